use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::stats::cosine;
use crate::adapter::{adapter_outputs, head_logits_values, RfaInference, RfaModule};
use crate::attacks::{pgd_feature, pgd_input, AttackSpace, AttackSpec};
use crate::backbone::SplitNet;
use crate::datasets::{sequential_batches, Dataset};
use crate::error::{Result, RfaError};
use crate::numcore::{softmax_rows, Rng, Tensor};

/// Logits of the deployed predictor: the adapter path when `rfa_i` is attached,
/// otherwise the plain backbone.
pub fn predictor_logits(backbone: &SplitNet, rfa_i: Option<&RfaInference>, x: &Tensor) -> Result<Tensor> {
    match rfa_i {
        Some(r) => {
            let z = backbone.forward_values(x, 0, r.d())?;
            r.robust_logits_from_features(backbone, &z)
        }
        None => backbone.logits(x),
    }
}

fn count_correct(logits: &Tensor, y: &[usize]) -> usize {
    logits.argmax_rows().iter().zip(y).filter(|(p, t)| p == t).count()
}

/// Clean accuracy of the deployed predictor.
pub fn accuracy(backbone: &SplitNet, rfa_i: Option<&RfaInference>, data: &Dataset) -> Result<f64> {
    let correct = sequential_batches(data, 256)
        .par_iter()
        .map(|(x, y)| predictor_logits(backbone, rfa_i, x).map(|l| count_correct(&l, y)))
        .collect::<Result<Vec<usize>>>()?;
    Ok(correct.iter().sum::<usize>() as f64 / data.len().max(1) as f64)
}

/// Logits of the deployed predictor after an attack crafted on the backbone alone.
pub fn attacked_logits(
    backbone: &SplitNet,
    rfa_i: Option<&RfaInference>,
    attack: &AttackSpec,
    x: &Tensor,
    y: &[usize],
    rng: &mut Rng,
) -> Result<Tensor> {
    match attack.space {
        AttackSpace::Input => {
            let x_adv = pgd_input(backbone, x, y, attack, rng)?;
            predictor_logits(backbone, rfa_i, &x_adv)
        }
        AttackSpace::Feature => {
            let g = attack.g;
            let z = backbone.forward_values(x, 0, g)?;
            let z_adv = pgd_feature(backbone, &z, y, attack)?.z_adv;
            match rfa_i {
                Some(r) => {
                    if g >= r.d() {
                        return Err(RfaError::SplitIndex(format!(
                            "feature attack at g={g} cannot precede adapter at d={}",
                            r.d()
                        )));
                    }
                    let z_d = backbone.forward_values(&z_adv, g, r.d())?;
                    r.robust_logits_from_features(backbone, &z_d)
                }
                None => backbone.forward_values(&z_adv, g, backbone.num_splits()),
            }
        }
    }
}

/// Fraction of samples still classified correctly after a gray-box attack.
pub fn robust_accuracy(
    backbone: &SplitNet,
    rfa_i: Option<&RfaInference>,
    data: &Dataset,
    attack: &AttackSpec,
    batch_size: usize,
    rng: &mut Rng,
) -> Result<f64> {
    attack.validate(backbone.num_splits())?;
    let root = rng.split("robust-accuracy");
    let correct = sequential_batches(data, batch_size)
        .par_iter()
        .enumerate()
        .map(|(i, (x, y))| {
            let mut r = root.split_indexed("batch", i as u64);
            attacked_logits(backbone, rfa_i, attack, x, y, &mut r).map(|l| count_correct(&l, y))
        })
        .collect::<Result<Vec<usize>>>()?;
    Ok(correct.iter().sum::<usize>() as f64 / data.len().max(1) as f64)
}

/// Mean cosine similarities between the prediction vectors of the backbone (`D`),
/// robust head (`R`) and non-robust head (`N`); `+` clean, `-` attacked.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correlations {
    pub attack: String,
    pub n_minus_d_minus: f64,
    pub r_minus_d_plus: f64,
    pub r_minus_n_minus: f64,
}

pub fn prediction_correlations(
    backbone: &SplitNet,
    rfa: &RfaModule,
    data: &Dataset,
    attack: &AttackSpec,
    rng: &mut Rng,
) -> Result<Correlations> {
    let d = rfa.d();
    let l = backbone.num_splits();
    let root = rng.split("correlations");
    let sums = sequential_batches(data, 256)
        .par_iter()
        .enumerate()
        .map(|(i, (x, y))| -> Result<[f64; 3]> {
            let mut r = root.split_indexed("batch", i as u64);
            let z_plus = backbone.forward_values(x, 0, d)?;
            let z_minus = crate::attacks::adversarial_features(backbone, attack, x, y, d, &mut r)?;
            let d_plus = softmax_rows(&backbone.forward_values(&z_plus, d, l)?);
            let d_minus = softmax_rows(&backbone.forward_values(&z_minus, d, l)?);
            let (zr, zn) = adapter_outputs(rfa, &z_minus, None)?;
            let r_minus = softmax_rows(&head_logits_values(rfa, &zr, true)?);
            let n_minus = softmax_rows(&head_logits_values(rfa, &zn, false)?);
            let mut s = [0.0; 3];
            for k in 0..x.rows() {
                s[0] += cosine(n_minus.row(k), d_minus.row(k));
                s[1] += cosine(r_minus.row(k), d_plus.row(k));
                s[2] += cosine(r_minus.row(k), n_minus.row(k));
            }
            Ok(s)
        })
        .collect::<Result<Vec<_>>>()?;
    let n = data.len().max(1) as f64;
    let tot = sums.iter().fold([0.0; 3], |a, s| [a[0] + s[0], a[1] + s[1], a[2] + s[2]]);
    Ok(Correlations {
        attack: attack.label(),
        n_minus_d_minus: tot[0] / n,
        r_minus_d_plus: tot[1] / n,
        r_minus_n_minus: tot[2] / n,
    })
}
