//! Inner-loop maximization: input-space FGSM/PGD, feature-space PGD with a
//! batch-scaled step, budget calibration and loss-variation measurement.

use serde::{Deserialize, Serialize};

use crate::backbone::SplitNet;
use crate::error::{Result, RfaError};
use crate::numcore::{cross_entropy_rows, sign, Rng, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackFamily {
    Fgsm,
    Pgd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackSpace {
    Input,
    Feature,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Norm {
    #[serde(rename = "l_inf")]
    LInf,
    #[serde(rename = "l_2")]
    L2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSpec {
    pub family: AttackFamily,
    pub space: AttackSpace,
    pub norm: Norm,
    /// Input-space budget.
    pub epsilon: f64,
    /// Step count.
    pub k: usize,
    /// Feature-space step scale: `alpha = eta * mean(|z_g|)`.
    pub eta: f64,
    /// Feature split to perturb.
    pub g: usize,
    pub rand_init: bool,
}

impl Default for AttackSpec {
    fn default() -> Self {
        AttackSpec {
            family: AttackFamily::Pgd,
            space: AttackSpace::Input,
            norm: Norm::LInf,
            epsilon: 8.0 / 255.0,
            k: 10,
            eta: 0.035,
            g: 3,
            rand_init: true,
        }
    }
}

impl AttackSpec {
    pub fn pgd_linf(epsilon: f64, k: usize) -> Self {
        AttackSpec {
            epsilon,
            k,
            ..Default::default()
        }
    }

    pub fn pgd_l2(epsilon: f64, k: usize) -> Self {
        AttackSpec {
            norm: Norm::L2,
            epsilon,
            k,
            ..Default::default()
        }
    }

    pub fn fgsm(epsilon: f64) -> Self {
        AttackSpec {
            family: AttackFamily::Fgsm,
            epsilon,
            k: 1,
            rand_init: false,
            ..Default::default()
        }
    }

    pub fn feature(g: usize, eta: f64, k: usize) -> Self {
        AttackSpec {
            space: AttackSpace::Feature,
            g,
            eta,
            k,
            rand_init: false,
            ..Default::default()
        }
    }

    /// Short label such as `pgd_l_inf` or `feature_g3`.
    pub fn label(&self) -> String {
        match (self.space, self.family, self.norm) {
            (AttackSpace::Feature, _, _) => format!("feature_g{}", self.g),
            (_, AttackFamily::Fgsm, _) => "fgsm".into(),
            (_, AttackFamily::Pgd, Norm::LInf) => "pgd_l_inf".into(),
            (_, AttackFamily::Pgd, Norm::L2) => "pgd_l_2".into(),
        }
    }

    pub fn steps(&self) -> usize {
        match self.family {
            AttackFamily::Fgsm => 1,
            AttackFamily::Pgd => self.k,
        }
    }

    pub fn validate(&self, num_splits: usize) -> Result<()> {
        if self.k == 0 {
            return Err(RfaError::InvalidArgument("attack needs k >= 1".into()));
        }
        match self.space {
            AttackSpace::Input if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) => Err(
                RfaError::InvalidArgument(format!("epsilon {} must be >= 0", self.epsilon)),
            ),
            AttackSpace::Feature if !(self.eta >= 0.0 && self.eta.is_finite()) => Err(
                RfaError::InvalidArgument(format!("eta {} must be >= 0", self.eta)),
            ),
            AttackSpace::Feature if self.g == 0 || self.g >= num_splits => Err(
                RfaError::SplitIndex(format!("feature attack needs 0 < g < {num_splits}, got {}", self.g)),
            ),
            _ => Ok(()),
        }
    }
}

/// Gradient of the summed cross-entropy of `net[from..L]` with respect to its input,
/// together with the per-sample losses at that input.
pub fn loss_gradient(net: &SplitNet, input: &Tensor, labels: &[usize], from: usize) -> Result<(Tensor, Vec<f64>)> {
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape, false)?;
    let x = tape.leaf(input.clone())?;
    let logits = net.forward_slice(&mut tape, &bound, x, from, net.num_splits())?;
    let losses = cross_entropy_rows(tape.value(logits), labels);
    let loss = tape.cross_entropy_sum(logits, labels)?;
    let grads = tape.backward(loss)?;
    let g = grads.get_or_zeros(x, input);
    g.ensure_finite("attack gradient")?;
    Ok((g, losses))
}

/// Per-sample cross-entropy of `net[from..L]` at `input`.
pub fn losses_from(net: &SplitNet, input: &Tensor, labels: &[usize], from: usize) -> Result<Vec<f64>> {
    let logits = net.forward_values(input, from, net.num_splits())?;
    Ok(cross_entropy_rows(&logits, labels))
}

/// Rounds `candidate` toward `center` until `|candidate - center| <= radius` holds in
/// floating point.
fn clamp_to_radius(center: f64, candidate: f64, radius: f64) -> f64 {
    let mut c = candidate.clamp(center - radius, center + radius);
    while c - center > radius {
        c = c.next_down();
    }
    while center - c > radius {
        c = c.next_up();
    }
    c
}

/// `clamp(x + eps * sign(grad), 0, 1)`.
pub fn fgsm(net: &SplitNet, x: &Tensor, y: &[usize], epsilon: f64) -> Result<Tensor> {
    let (g, _) = loss_gradient(net, x, y, 0)?;
    let mut out = x.clone();
    for (o, gi) in out.data_mut().iter_mut().zip(g.data()) {
        let cand = (*o + epsilon * sign(*gi)).clamp(0.0, 1.0);
        *o = clamp_to_radius(*o, cand, epsilon);
    }
    Ok(out)
}

fn row_norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Input-space PGD. The l_inf step is `2.5 * eps / k`; l_2 steps move along the
/// per-sample normalized gradient by the same length. Iterates are projected onto
/// the budget ball and the `[0, 1]` box after every step.
pub fn pgd_input(net: &SplitNet, x: &Tensor, y: &[usize], spec: &AttackSpec, rng: &mut Rng) -> Result<Tensor> {
    if spec.family == AttackFamily::Fgsm {
        return match spec.norm {
            Norm::LInf => fgsm(net, x, y, spec.epsilon),
            Norm::L2 => pgd_steps(net, x, y, spec.epsilon, 1, spec.epsilon, Norm::L2, false, rng),
        };
    }
    let step = 2.5 * spec.epsilon / spec.k as f64;
    pgd_steps(net, x, y, spec.epsilon, spec.k, step, spec.norm, spec.rand_init, rng)
}

/// Input-space PGD with an explicit step size.
#[allow(clippy::too_many_arguments)]
pub fn pgd_steps(
    net: &SplitNet,
    x: &Tensor,
    y: &[usize],
    epsilon: f64,
    k: usize,
    step: f64,
    norm: Norm,
    rand_init: bool,
    rng: &mut Rng,
) -> Result<Tensor> {
    let n = x.rows();
    let w = x.row_len();
    let mut adv = x.clone();
    if rand_init && epsilon > 0.0 {
        let noise = match norm {
            Norm::LInf => rng.uniform_tensor(x.shape(), -epsilon, epsilon),
            Norm::L2 => {
                let mut t = rng.normal_tensor(x.shape());
                for i in 0..n {
                    let r = epsilon * rng.uniform();
                    let row = &mut t.data_mut()[i * w..(i + 1) * w];
                    let nrm = row_norm(row).max(1e-12);
                    row.iter_mut().for_each(|v| *v *= r / nrm);
                }
                t
            }
        };
        for (a, d) in adv.data_mut().iter_mut().zip(noise.data()) {
            *a += d;
        }
        project(&mut adv, x, epsilon, norm);
    }
    for _ in 0..k {
        let (g, _) = loss_gradient(net, &adv, y, 0)?;
        match norm {
            Norm::LInf => {
                for (a, gi) in adv.data_mut().iter_mut().zip(g.data()) {
                    *a += step * sign(*gi);
                }
            }
            Norm::L2 => {
                for i in 0..n {
                    let gr = g.row(i);
                    let nrm = row_norm(gr);
                    if nrm > 0.0 {
                        let row = &mut adv.data_mut()[i * w..(i + 1) * w];
                        for (a, gi) in row.iter_mut().zip(gr) {
                            *a += step * gi / nrm;
                        }
                    }
                }
            }
        }
        project(&mut adv, x, epsilon, norm);
    }
    Ok(adv)
}

fn dist_l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
}

/// Projects onto the budget ball around `x` and the `[0, 1]` box.
fn project(adv: &mut Tensor, x: &Tensor, epsilon: f64, norm: Norm) {
    let w = x.row_len();
    match norm {
        Norm::LInf => {
            for (a, &c) in adv.data_mut().iter_mut().zip(x.data()) {
                *a = clamp_to_radius(c, a.clamp(0.0, 1.0), epsilon);
            }
        }
        Norm::L2 => {
            for i in 0..x.rows() {
                let xr = x.row(i);
                let row = &mut adv.data_mut()[i * w..(i + 1) * w];
                let nrm = dist_l2(row, xr);
                if nrm > epsilon {
                    let delta: Vec<f64> = row.iter().zip(xr).map(|(a, c)| a - c).collect();
                    let mut s = epsilon / nrm;
                    loop {
                        for ((a, c), d) in row.iter_mut().zip(xr).zip(&delta) {
                            *a = c + d * s;
                        }
                        if dist_l2(row, xr) <= epsilon {
                            break;
                        }
                        s = s.next_down();
                    }
                }
                for a in row.iter_mut() {
                    *a = a.clamp(0.0, 1.0);
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct FeatureAttack {
    pub z_adv: Tensor,
    /// Per-step size `eta * mean(|z_g|)`.
    pub alpha: f64,
}

/// Feature-space PGD at split `spec.g`, starting from the clean feature (no random start).
/// Each step adds `alpha * sign(grad)` and clamps into the l_inf ball of radius `k * alpha`.
pub fn pgd_feature(net: &SplitNet, z_g: &Tensor, y: &[usize], spec: &AttackSpec) -> Result<FeatureAttack> {
    if z_g.rows() == 0 || z_g.is_empty() {
        return Err(RfaError::InvalidArgument("feature attack on an empty batch".into()));
    }
    spec.validate(net.num_splits())?;
    let k = spec.steps();
    let alpha = spec.eta * z_g.mean_abs();
    let radius = k as f64 * alpha;
    let mut adv = z_g.clone();
    if alpha > 0.0 {
        for _ in 0..k {
            let (g, _) = loss_gradient(net, &adv, y, spec.g)?;
            for ((a, gi), &c) in adv.data_mut().iter_mut().zip(g.data()).zip(z_g.data()) {
                *a = clamp_to_radius(c, *a + alpha * sign(*gi), radius);
            }
        }
    }
    Ok(FeatureAttack { z_adv: adv, alpha })
}

/// Attacked features at split `d` (`d > g` for feature-space attacks) for a clean batch.
pub fn adversarial_features(
    net: &SplitNet,
    spec: &AttackSpec,
    x: &Tensor,
    y: &[usize],
    d: usize,
    rng: &mut Rng,
) -> Result<Tensor> {
    match spec.space {
        AttackSpace::Input => {
            let x_adv = pgd_input(net, x, y, spec, rng)?;
            net.forward_values(&x_adv, 0, d)
        }
        AttackSpace::Feature => {
            if spec.g >= d {
                return Err(RfaError::SplitIndex(format!(
                    "feature attack at g={} must precede d={d}",
                    spec.g
                )));
            }
            let z_g = net.forward_values(x, 0, spec.g)?;
            let fa = pgd_feature(net, &z_g, y, spec)?;
            net.forward_values(&fa.z_adv, spec.g, d)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaLSample {
    pub g: usize,
    pub value: f64,
}

/// `|CE(B_{g+}[z_g']) - CE(B_{g+}[z_g])|` per sample, with `z_g'` the feature PGD endpoint.
pub fn delta_loss_batch(net: &SplitNet, g: usize, eta: f64, k: usize, x: &Tensor, y: &[usize]) -> Result<Vec<DeltaLSample>> {
    let spec = AttackSpec::feature(g, eta, k);
    let z = net.forward_values(x, 0, g)?;
    let fa = pgd_feature(net, &z, y, &spec)?;
    let clean = losses_from(net, &z, y, g)?;
    let adv = losses_from(net, &fa.z_adv, y, g)?;
    Ok(clean
        .iter()
        .zip(&adv)
        .map(|(c, a)| DeltaLSample {
            g,
            value: (a - c).abs(),
        })
        .collect())
}

/// First-order prediction `|<delta, grad_z L(z)>|` of the loss change per sample.
pub fn first_order_delta_loss(net: &SplitNet, g: usize, z: &Tensor, z_adv: &Tensor, y: &[usize]) -> Result<Vec<f64>> {
    let (grad, _) = loss_gradient(net, z, y, g)?;
    let w = z.row_len();
    Ok((0..z.rows())
        .map(|i| {
            (0..w)
                .map(|j| (z_adv.row(i)[j] - z.row(i)[j]) * grad.row(i)[j])
                .sum::<f64>()
                .abs()
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub g: usize,
    pub eta: f64,
    /// Mean `|z_g|` of clean features over all batches.
    pub mu: f64,
    /// Largest per-sample `||z_g(x_adv) - z_g(x)||_inf`.
    pub max_delta_inf: f64,
    pub batches: usize,
    pub samples: usize,
}

/// Matches a feature-space budget at split `g` to the displacement that input-space
/// PGD(`epsilon`, `k`) induces there: `k * eta * mu = max ||delta_g||_inf`.
pub fn calibrate_eta(
    net: &SplitNet,
    batches: &[(Tensor, Vec<usize>)],
    g: usize,
    epsilon: f64,
    k: usize,
    rng: &mut Rng,
) -> Result<Calibration> {
    if g == 0 || g >= net.num_splits() {
        return Err(RfaError::SplitIndex(format!("calibration split {g}")));
    }
    if batches.is_empty() {
        return Err(RfaError::InvalidArgument("calibration needs at least one batch".into()));
    }
    let spec = AttackSpec::pgd_linf(epsilon, k);
    let (mut abs_sum, mut count, mut max_delta, mut samples) = (0.0, 0usize, 0.0f64, 0usize);
    for (bi, (x, y)) in batches.iter().enumerate() {
        let mut brng = rng.split_indexed("calibrate", bi as u64);
        let x_adv = pgd_input(net, x, y, &spec, &mut brng)?;
        let z = net.forward_values(x, 0, g)?;
        let z_adv = net.forward_values(&x_adv, 0, g)?;
        abs_sum += z.data().iter().map(|v| v.abs()).sum::<f64>();
        count += z.len();
        for i in 0..z.rows() {
            let d = z
                .row(i)
                .iter()
                .zip(z_adv.row(i))
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            max_delta = max_delta.max(d);
        }
        samples += x.rows();
    }
    let mu = abs_sum / count as f64;
    if mu <= 0.0 {
        return Err(RfaError::Degenerate(format!("mean |z_{g}| is zero")));
    }
    Ok(Calibration {
        g,
        eta: max_delta / (k as f64 * mu),
        mu,
        max_delta_inf: max_delta,
        batches: batches.len(),
        samples,
    })
}
