use crate::attacks::{loss_gradient, pgd_input, AttackSpec};
use crate::backbone::SplitNet;
use crate::error::{Result, RfaError};
use crate::numcore::{Rng, Tensor};

use super::stats::median;

/// First-order stationarity per sample:
/// `eps * ||grad L(x_k)||_1 - <x_k - x_0, grad L(x_k)>`.
pub fn fosc(net: &SplitNet, x0: &Tensor, xk: &Tensor, y: &[usize], epsilon: f64) -> Result<Vec<f64>> {
    if x0.shape() != xk.shape() {
        return Err(RfaError::shape("fosc", format!("{:?} vs {:?}", x0.shape(), xk.shape())));
    }
    let (g, _) = loss_gradient(net, xk, y, 0)?;
    Ok((0..x0.rows())
        .map(|i| {
            let gr = g.row(i);
            let l1: f64 = gr.iter().map(|v| v.abs()).sum();
            let inner: f64 = xk.row(i).iter().zip(x0.row(i)).zip(gr).map(|((a, b), gi)| (a - b) * gi).sum();
            epsilon * l1 - inner
        })
        .collect())
}

/// Median FOSC of PGD endpoints for each step count in `steps`.
pub fn fosc_by_steps(
    net: &SplitNet,
    x: &Tensor,
    y: &[usize],
    base: &AttackSpec,
    steps: &[usize],
    rng: &Rng,
) -> Result<Vec<(usize, f64)>> {
    steps
        .iter()
        .map(|&k| {
            let spec = AttackSpec { k, ..base.clone() };
            let mut r = rng.split_indexed("fosc", k as u64);
            let xk = pgd_input(net, x, y, &spec, &mut r)?;
            Ok((k, median(&fosc(net, x, &xk, y, spec.epsilon)?)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_point_reduces_to_gradient_norm() {
        let net = SplitNet::ref_net_d(6, 3, 1).unwrap();
        let x = Rng::new(2).uniform_tensor(&[4, 6], 0.0, 1.0);
        let y = [0, 1, 2, 1];
        let eps = 0.03;
        let c = fosc(&net, &x, &x, &y, eps).unwrap();
        let (g, _) = loss_gradient(&net, &x, &y, 0).unwrap();
        for (i, ci) in c.iter().enumerate() {
            let expect = eps * g.row(i).iter().map(|v| v.abs()).sum::<f64>();
            assert_eq!(*ci, expect);
        }
    }
}
