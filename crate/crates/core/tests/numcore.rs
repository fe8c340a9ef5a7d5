use proptest::prelude::*;
use rfa_core::numcore::{cross_entropy_rows, finite_diff_check, reparameterize, softmax_rows, Rng, Tape, Tensor, Var};

#[test]
fn relu_matvec_gradient_matches_hand_value_and_differences() {
    let w = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let v = Tensor::new(vec![2, 1], vec![1.0, -1.0]).unwrap();
    let f = |t: &mut Tape, wv: Var| {
        let vv = t.constant(v.clone())?;
        let h = t.matmul(wv, vv)?;
        let r = t.relu(h)?;
        t.sum(r)
    };
    let mut tape = Tape::new();
    let wv = tape.leaf(w.clone()).unwrap();
    let out = f(&mut tape, wv).unwrap();
    let g = tape.backward(out).unwrap();
    assert_eq!(g.get(wv).unwrap().data(), &[1.0, -1.0, 0.0, 0.0]);
    let r = finite_diff_check(f, &w, 1e-5, 1e-6).unwrap();
    assert!(r.pass && r.excluded.is_empty(), "{r:?}");
}

#[test]
fn softmax_cross_entropy_through_two_dense_layers() {
    let mut rng = Rng::new(5);
    let x = rng.normal_tensor(&[4, 6]);
    let w1 = rng.normal_tensor(&[6, 5]);
    let b1 = rng.normal_tensor(&[5]);
    let w2 = rng.normal_tensor(&[5, 3]);
    let b2 = rng.normal_tensor(&[3]);
    let y = [0, 2, 1, 2];
    let net = |t: &mut Tape, w1v: Var, w2v: Var| {
        let xv = t.constant(x.clone())?;
        let b1v = t.constant(b1.clone())?;
        let b2v = t.constant(b2.clone())?;
        let h = t.affine(xv, w1v, b1v)?;
        let h = t.relu(h)?;
        let o = t.affine(h, w2v, b2v)?;
        t.cross_entropy(o, &y)
    };
    let first = finite_diff_check(
        |t, w| {
            let w2v = t.constant(w2.clone())?;
            net(t, w, w2v)
        },
        &w1,
        1e-5,
        1e-6,
    )
    .unwrap();
    let second = finite_diff_check(
        |t, w| {
            let w1v = t.constant(w1.clone())?;
            net(t, w1v, w)
        },
        &w2,
        1e-5,
        1e-6,
    )
    .unwrap();
    assert!(first.pass, "{first:?}");
    assert!(second.pass, "{second:?}");
}

#[test]
fn single_channel_convolution_matches_differences() {
    let mut rng = Rng::new(8);
    let x = rng.normal_tensor(&[1, 1, 8, 8]);
    let k = rng.normal_tensor(&[1, 1, 3, 3]);
    let b = Tensor::from_vec(vec![0.1]);
    let probe = rng.normal_tensor(&[1, 1, 8, 8]);
    let r = finite_diff_check(
        |t, kv| {
            let xv = t.constant(x.clone())?;
            let bv = t.constant(b.clone())?;
            let pv = t.constant(probe.clone())?;
            let y = t.conv2d(xv, kv, bv, 1)?;
            let y = t.mul(y, pv)?;
            t.sum(y)
        },
        &k,
        1e-5,
        1e-6,
    )
    .unwrap();
    assert!(r.pass, "{r:?}");
}

#[test]
fn reparameterized_sample_repeats_under_a_seed() {
    let draw = || {
        let mut t = Tape::new();
        let mu = t.constant(Tensor::from_vec(vec![0.5, -1.0, 2.0])).unwrap();
        let lv = t.constant(Tensor::from_vec(vec![0.0, -2.0, 1.0])).unwrap();
        let s = reparameterize(&mut t, mu, lv, &mut Rng::new(42)).unwrap();
        t.value(s).clone()
    };
    assert_eq!(draw(), draw());
}

#[test]
fn sample_gradient_with_respect_to_mean_is_one() {
    let mut t = Tape::new();
    let mu = t.leaf(Tensor::from_vec(vec![0.5, -1.0])).unwrap();
    let lv = t.constant(Tensor::from_vec(vec![0.3, -0.2])).unwrap();
    let s = reparameterize(&mut t, mu, lv, &mut Rng::new(1)).unwrap();
    let total = t.sum(s).unwrap();
    let g = t.backward(total).unwrap();
    assert_eq!(g.get(mu).unwrap().data(), &[1.0, 1.0]);
}

fn rows() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1usize..5, 2usize..6).prop_flat_map(|(n, c)| {
        (
            Just(n),
            Just(c),
            proptest::collection::vec(-30.0f64..30.0, n * c),
        )
    })
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions((n, c, data) in rows()) {
        let p = softmax_rows(&Tensor::new(vec![n, c], data).unwrap());
        for i in 0..n {
            let s: f64 = p.row(i).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(p.row(i).iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn cross_entropy_is_nonnegative_and_matches_rows((n, c, data) in rows(), seed in 0u64..1000) {
        let logits = Tensor::new(vec![n, c], data).unwrap();
        let mut rng = Rng::new(seed);
        let y: Vec<usize> = (0..n).map(|_| rng.below(c)).collect();
        let mut t = Tape::new();
        let l = t.constant(logits.clone()).unwrap();
        let total = t.cross_entropy_sum(l, &y).unwrap();
        let rows = cross_entropy_rows(&logits, &y);
        prop_assert!(rows.iter().all(|&v| v >= 0.0));
        let expect: f64 = rows.iter().sum();
        prop_assert!((t.value(total).item() - expect).abs() <= 1e-9 * expect.abs().max(1.0));
    }

    #[test]
    fn weighted_sum_gradient_is_the_weights((n, c, data) in rows(), seed in 0u64..1000) {
        let x = Tensor::new(vec![n, c], data).unwrap();
        let w = Rng::new(seed).normal_tensor(&[n, c]);
        let mut t = Tape::new();
        let xv = t.leaf(x).unwrap();
        let wv = t.constant(w.clone()).unwrap();
        let p = t.mul(xv, wv).unwrap();
        let s = t.sum(p).unwrap();
        let g = t.backward(s).unwrap();
        prop_assert_eq!(g.get(xv).unwrap(), &w);
    }
}
