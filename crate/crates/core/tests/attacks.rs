mod common;

use std::sync::OnceLock;

use common::{desk, Desk, EPS_8};
use proptest::prelude::*;
use rfa_core::attacks::*;
use rfa_core::backbone::SplitNet;
use rfa_core::datasets::sequential_batches;
use rfa_core::numcore::{cross_entropy_rows, Rng, Tensor};

fn trained() -> &'static Desk {
    static DESK: OnceLock<Desk> = OnceLock::new();
    DESK.get_or_init(|| desk(16, 0.05))
}

fn ce(net: &SplitNet, x: &Tensor, y: &[usize]) -> Vec<f64> {
    cross_entropy_rows(&net.logits(x).unwrap(), y)
}

fn share(pred: impl Iterator<Item = bool>) -> f64 {
    let v: Vec<bool> = pred.collect();
    v.iter().filter(|&&b| b).count() as f64 / v.len() as f64
}

#[test]
fn fgsm_raises_the_loss() {
    let d = trained();
    let (x, y) = (&d.test.images, &d.test.labels);
    let adv = fgsm(&d.backbone, x, y, EPS_8).unwrap();
    let (c0, c1) = (ce(&d.backbone, x, y), ce(&d.backbone, &adv, y));
    assert!(share(c0.iter().zip(&c1).map(|(a, b)| b >= a)) >= 0.9);
}

#[test]
fn ten_step_pgd_beats_fgsm() {
    let d = trained();
    let (x, y) = (&d.test.images, &d.test.labels);
    let f = ce(&d.backbone, &fgsm(&d.backbone, x, y, EPS_8).unwrap(), y);
    let p = ce(&d.backbone, &pgd_input(&d.backbone, x, y, &AttackSpec::pgd_linf(EPS_8, 10), &mut Rng::new(1)).unwrap(), y);
    assert!(share(f.iter().zip(&p).map(|(a, b)| b >= a)) >= 0.8);
}

#[test]
fn feature_attacks_raise_the_loss_at_both_depths() {
    let d = trained();
    let (x, y) = (&d.test.images, &d.test.labels);
    for (g, eta) in [(1, 0.01), (3, 0.035)] {
        let z = d.backbone.forward_values(x, 0, g).unwrap();
        let fa = pgd_feature(&d.backbone, &z, y, &AttackSpec::feature(g, eta, 10)).unwrap();
        let before = losses_from(&d.backbone, &z, y, g).unwrap();
        let after = losses_from(&d.backbone, &fa.z_adv, y, g).unwrap();
        let up = share(before.iter().zip(&after).map(|(a, b)| b > a));
        assert!(up >= 0.95, "g={g}: {up}");
    }
}

#[test]
fn calibrated_eta_grows_with_the_input_budget() {
    let d = trained();
    let batches = sequential_batches(&d.test.take(128), 64);
    let mut last = 0.0;
    for eps in [2.0 / 255.0, 4.0 / 255.0, 8.0 / 255.0, 16.0 / 255.0] {
        let c = calibrate_eta(&d.backbone, &batches, 3, eps, 10, &mut Rng::new(5)).unwrap();
        assert!(c.eta >= last, "eps {eps}: {} < {last}", c.eta);
        assert_eq!((c.batches, c.samples), (2, 128));
        last = c.eta;
    }
    assert!(last > 0.0);
}

#[test]
fn small_feature_steps_follow_the_first_order_prediction() {
    let d = trained();
    let (x, y) = (&d.test.images, &d.test.labels);
    let g = 3;
    let z = d.backbone.forward_values(x, 0, g).unwrap();
    let fa = pgd_feature(&d.backbone, &z, y, &AttackSpec::feature(g, 0.035 * 0.01, 10)).unwrap();
    let actual: Vec<f64> = losses_from(&d.backbone, &fa.z_adv, y, g)
        .unwrap()
        .iter()
        .zip(losses_from(&d.backbone, &z, y, g).unwrap())
        .map(|(a, b)| (a - b).abs())
        .collect();
    let predicted = first_order_delta_loss(&d.backbone, g, &z, &fa.z_adv, y).unwrap();
    let close = share(actual.iter().zip(&predicted).map(|(a, p)| (a - p).abs() / a.max(1e-8) < 0.2));
    assert!(close >= 0.9, "{close}");
}

#[test]
fn matched_budgets_hit_shallow_layers_harder() {
    let d = trained();
    let (x, y) = (&d.test.images, &d.test.labels);
    let at = |g| -> Vec<f64> { delta_loss_batch(&d.backbone, g, 0.1, 10, x, y).unwrap().iter().map(|s| s.value).collect() };
    let mw = rfa_core::metrics::mann_whitney_greater(&at(1), &at(3)).unwrap();
    assert!(mw.p_value < 0.01, "{mw:?}");
}

fn linf(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn input_attacks_respect_ball_and_box(
        seed in any::<u64>(),
        eps in 0.0f64..0.6,
        k in 1usize..8,
        l2 in any::<bool>(),
        rand_init in any::<bool>(),
    ) {
        let net = SplitNet::ref_net_d(12, 3, seed % 7).unwrap();
        let mut rng = Rng::new(seed);
        let x = rng.uniform_tensor(&[3, 12], 0.0, 1.0);
        let y: Vec<usize> = (0..3).map(|_| rng.below(3)).collect();
        let spec = AttackSpec {
            rand_init,
            ..if l2 { AttackSpec::pgd_l2(eps, k) } else { AttackSpec::pgd_linf(eps, k) }
        };
        let adv = pgd_input(&net, &x, &y, &spec, &mut rng).unwrap();
        for i in 0..3 {
            let (a, c) = (adv.row(i), x.row(i));
            let dist = if l2 {
                a.iter().zip(c).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
            } else {
                linf(a, c)
            };
            prop_assert!(dist <= eps, "{dist} > {eps}");
            prop_assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn feature_attacks_stay_within_k_alpha(seed in any::<u64>(), eta in 0.0f64..0.5, k in 1usize..8, g in 1usize..5) {
        let net = SplitNet::ref_net_d(12, 3, seed % 7).unwrap();
        let mut rng = Rng::new(seed);
        let x = rng.uniform_tensor(&[3, 12], 0.0, 1.0);
        let y: Vec<usize> = (0..3).map(|_| rng.below(3)).collect();
        let z = net.forward_values(&x, 0, g).unwrap();
        let fa = pgd_feature(&net, &z, &y, &AttackSpec::feature(g, eta, k)).unwrap();
        prop_assert_eq!(fa.alpha, eta * z.mean_abs());
        prop_assert!(linf(fa.z_adv.data(), z.data()) <= k as f64 * fa.alpha);
    }

    #[test]
    fn one_step_pgd_is_fgsm(seed in any::<u64>(), eps in 0.0f64..0.5) {
        let net = SplitNet::ref_net_d(12, 3, seed % 5).unwrap();
        let mut rng = Rng::new(seed);
        let x = rng.uniform_tensor(&[4, 12], 0.0, 1.0);
        let y: Vec<usize> = (0..4).map(|_| rng.below(3)).collect();
        let spec = AttackSpec { rand_init: false, ..AttackSpec::pgd_linf(eps, 1) };
        let a = pgd_input(&net, &x, &y, &spec, &mut rng).unwrap();
        let b = fgsm(&net, &x, &y, eps).unwrap();
        prop_assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}
