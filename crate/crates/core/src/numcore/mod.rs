//! Dense tensors, tape-based reverse-mode differentiation and seeded randomness.

mod gradcheck;
mod rng;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_check_at, GradCheckReport};
pub use rng::Rng;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{cross_entropy_rows, softmax_rows, Tensor};

pub(crate) use tape::{sigmoid, sign};
pub(crate) use tensor::argmax;

use crate::error::{Result, RfaError};

/// Reparameterized Gaussian sample `mu + exp(logvar / 2) * noise`.
pub fn reparameterize(tape: &mut Tape, mu: Var, logvar: Var, rng: &mut Rng) -> Result<Var> {
    let shape = tape.value(mu).shape().to_vec();
    if tape.value(logvar).shape() != shape.as_slice() {
        return Err(RfaError::shape(
            "reparameterize",
            format!("{:?} vs {:?}", shape, tape.value(logvar).shape()),
        ));
    }
    let noise = tape.constant(rng.normal_tensor(&shape))?;
    let half = tape.scale(logvar, 0.5)?;
    let std = tape.exp(half)?;
    let eps = tape.mul(std, noise)?;
    tape.add(mu, eps)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_variance_returns_mean() {
        let mut tape = Tape::new();
        let mu_t = Tensor::new(vec![2, 3], vec![0.1, -2.0, 3.0, 4.0, 0.0, -0.5]).unwrap();
        let mu = tape.leaf(mu_t.clone()).unwrap();
        let lv = tape.leaf(Tensor::full(&[2, 3], -40.0)).unwrap();
        let z = reparameterize(&mut tape, mu, lv, &mut Rng::new(1)).unwrap();
        for (a, b) in tape.value(z).data().iter().zip(mu_t.data()) {
            assert!((a - b).abs() < 1e-8);
        }
        let s = tape.sum(z).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(mu).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn same_seed_same_sample() {
        let draw = || {
            let mut tape = Tape::new();
            let mu = tape.constant(Tensor::zeros(&[4])).unwrap();
            let lv = tape.constant(Tensor::zeros(&[4])).unwrap();
            let z = reparameterize(&mut tape, mu, lv, &mut Rng::new(42)).unwrap();
            tape.value(z).clone()
        };
        assert_eq!(draw(), draw());
    }

    #[test]
    fn shape_mismatch() {
        let mut tape = Tape::new();
        let mu = tape.constant(Tensor::zeros(&[4])).unwrap();
        let lv = tape.constant(Tensor::zeros(&[3])).unwrap();
        assert!(reparameterize(&mut tape, mu, lv, &mut Rng::new(0)).is_err());
    }
}
