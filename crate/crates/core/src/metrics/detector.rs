use serde::{Deserialize, Serialize};

use super::roc::{roc, RocCurve};
use crate::adapter::{distill_infer, RfaInference};
use crate::attacks::{pgd_input, AttackSpace, AttackSpec};
use crate::backbone::SplitNet;
use crate::datasets::{sequential_batches, Dataset};
use crate::error::{Result, RfaError};
use crate::numcore::{sigmoid, Rng, Tape, Tensor};
use crate::trainer::Adam;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorInput {
    /// `y_hat ++ y_hat_R`.
    Concat,
    /// `y_hat ++ y_hat_R ++ (y_hat * y_hat_R)`. A linear score over the plain
    /// concatenation cannot tell agreement from disagreement when classes are
    /// interchangeable; the product block makes agreement visible to it.
    #[default]
    ConcatAgreement,
}

impl DetectorInput {
    fn features(self, y_hat: &Tensor, y_hat_r: &Tensor) -> Tensor {
        let c = y_hat.row_len();
        let width = match self {
            DetectorInput::Concat => 2 * c,
            DetectorInput::ConcatAgreement => 3 * c,
        };
        let mut data = Vec::with_capacity(y_hat.rows() * width);
        for i in 0..y_hat.rows() {
            let (a, b) = (y_hat.row(i), y_hat_r.row(i));
            data.extend_from_slice(a);
            data.extend_from_slice(b);
            if self == DetectorInput::ConcatAgreement {
                data.extend(a.iter().zip(b).map(|(p, q)| p * q));
            }
        }
        Tensor::new(vec![y_hat.rows(), width], data).expect("feature width")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub input: DetectorInput,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Share of samples held out for threshold selection.
    pub holdout_fraction: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            input: DetectorInput::ConcatAgreement,
            epochs: 300,
            learning_rate: 0.05,
            holdout_fraction: 0.25,
        }
    }
}

/// One affine layer over the prediction pair, followed by a sigmoid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detector {
    pub input: DetectorInput,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub threshold: f64,
}

impl Detector {
    pub fn scores(&self, y_hat: &Tensor, y_hat_r: &Tensor) -> Result<Vec<f64>> {
        let f = self.input.features(y_hat, y_hat_r);
        if f.row_len() != self.weights.len() {
            return Err(RfaError::shape(
                "detector",
                format!("{} features, {} weights", f.row_len(), self.weights.len()),
            ));
        }
        Ok((0..f.rows())
            .map(|i| {
                let z: f64 = f.row(i).iter().zip(&self.weights).map(|(a, w)| a * w).sum();
                sigmoid(z + self.bias)
            })
            .collect())
    }
}

/// Inputs after the attack, or unchanged for the no-attack control. Attacks are
/// crafted on the backbone alone.
fn attacked_inputs(backbone: &SplitNet, attack: Option<&AttackSpec>, data: &Dataset, rng: &Rng) -> Result<Tensor> {
    let Some(a) = attack else {
        return Ok(data.images.clone());
    };
    if a.space != AttackSpace::Input {
        return Err(RfaError::InvalidArgument("detection needs an input-space attack".into()));
    }
    let parts = sequential_batches(data, 256)
        .iter()
        .enumerate()
        .map(|(i, (x, y))| pgd_input(backbone, x, y, a, &mut rng.split_indexed("detect-attack", i as u64)))
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack_rows(&parts)
}

/// Prediction pairs `(y_hat, y_hat_R)` for clean and attacked versions of `data`.
fn pairs(
    backbone: &SplitNet,
    rfa_i: &RfaInference,
    data: &Dataset,
    attack: Option<&AttackSpec>,
    rng: &Rng,
) -> Result<((Tensor, Tensor), (Tensor, Tensor))> {
    let clean = distill_infer(rfa_i, backbone, &data.images)?;
    let x_adv = attacked_inputs(backbone, attack, data, rng)?;
    let adv = distill_infer(rfa_i, backbone, &x_adv)?;
    Ok(((clean.y_hat, clean.y_hat_r), (adv.y_hat, adv.y_hat_r)))
}

fn balanced_accuracy(scores: &[f64], labels: &[bool], t: f64) -> f64 {
    let (mut tp, mut tn, mut p, mut n) = (0, 0, 0, 0);
    for (&s, &l) in scores.iter().zip(labels) {
        if l {
            p += 1;
            tp += (s >= t) as usize;
        } else {
            n += 1;
            tn += (s < t) as usize;
        }
    }
    0.5 * (tp as f64 / p.max(1) as f64 + tn as f64 / n.max(1) as f64)
}

/// Logistic regression on clean (negative) versus attacked (positive) prediction
/// pairs, one of each per sample; threshold picked on a held-out split for the best
/// balanced accuracy.
pub fn train_detector(
    backbone: &SplitNet,
    rfa_i: &RfaInference,
    data: &Dataset,
    attack: Option<&AttackSpec>,
    config: &DetectorConfig,
    seed: u64,
) -> Result<Detector> {
    if data.len() < 4 {
        return Err(RfaError::Degenerate("detector needs at least 4 samples".into()));
    }
    let rng = Rng::new(seed);
    let ((cy, cr), (ay, ar)) = pairs(backbone, rfa_i, data, attack, &rng.split("attack"))?;
    let clean = config.input.features(&cy, &cr);
    let adv = config.input.features(&ay, &ar);

    let perm = rng.split("holdout").permutation(data.len());
    let n_hold = ((data.len() as f64 * config.holdout_fraction).round() as usize).clamp(1, data.len() - 1);
    let (hold, fit) = perm.split_at(n_hold);
    let assemble = |idx: &[usize]| -> Result<(Tensor, Vec<f64>)> {
        let x = Tensor::stack_rows(&[clean.select_rows(idx), adv.select_rows(idx)])?;
        let mut t = vec![0.0; idx.len()];
        t.extend(std::iter::repeat_n(1.0, idx.len()));
        Ok((x, t))
    };
    let (xf, tf) = assemble(fit)?;
    let width = xf.row_len();

    let mut w = Tensor::zeros(&[width, 1]);
    let mut b = Tensor::zeros(&[1]);
    let mut adam = Adam::with_lr(config.learning_rate);
    for _ in 0..config.epochs {
        let mut tape = Tape::new();
        let wv = tape.leaf(w.clone())?;
        let bv = tape.leaf(b.clone())?;
        let xv = tape.constant(xf.clone())?;
        let z = tape.affine(xv, wv, bv)?;
        let loss = tape.bce_with_logits(z, &tf)?;
        let g = tape.backward(loss)?;
        let grads = [g.get_or_zeros(wv, &w), g.get_or_zeros(bv, &b)];
        adam.step(&mut [&mut w, &mut b], &grads)?;
    }
    let mut det = Detector {
        input: config.input,
        weights: w.into_data(),
        bias: b.item(),
        threshold: 0.5,
    };
    let (xh, th) = assemble(hold)?;
    let hs: Vec<f64> = (0..xh.rows())
        .map(|i| sigmoid(xh.row(i).iter().zip(&det.weights).map(|(a, w)| a * w).sum::<f64>() + det.bias))
        .collect();
    let hl: Vec<bool> = th.iter().map(|&t| t > 0.5).collect();
    let mut cands = hs.clone();
    cands.sort_by(f64::total_cmp);
    cands.dedup();
    let mut best = (f64::NEG_INFINITY, 0.5);
    for &t in &cands {
        let ba = balanced_accuracy(&hs, &hl, t);
        if ba > best.0 {
            best = (ba, t);
        }
    }
    det.threshold = best.1;
    Ok(det)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionScore {
    pub sample_index: usize,
    pub label: usize,
    pub clean_score: f64,
    pub adversarial_score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub attack: String,
    pub control: bool,
    pub auc: f64,
    pub tnr_at_95_tpr: f64,
    pub accuracy_at_threshold: f64,
    pub threshold: f64,
    #[serde(skip)]
    pub roc: Option<RocCurve>,
    #[serde(skip)]
    pub scores: Vec<DetectionScore>,
}

/// Scores clean and attacked versions of every test sample.
pub fn evaluate_detector(
    detector: &Detector,
    backbone: &SplitNet,
    rfa_i: &RfaInference,
    test: &Dataset,
    attack: Option<&AttackSpec>,
    seed: u64,
) -> Result<DetectionReport> {
    let rng = Rng::new(seed).split("evaluate");
    let ((cy, cr), (ay, ar)) = pairs(backbone, rfa_i, test, attack, &rng)?;
    let cs = detector.scores(&cy, &cr)?;
    let as_ = detector.scores(&ay, &ar)?;
    let all: Vec<f64> = cs.iter().chain(&as_).copied().collect();
    let labels: Vec<bool> = (0..all.len()).map(|i| i >= cs.len()).collect();
    let curve = roc(&all, &labels)?;
    let correct = all
        .iter()
        .zip(&labels)
        .filter(|(s, l)| (**s >= detector.threshold) == **l)
        .count();
    Ok(DetectionReport {
        attack: attack.map_or_else(|| "control".to_string(), AttackSpec::label),
        control: attack.is_none(),
        auc: curve.auc,
        tnr_at_95_tpr: curve.tnr_at_95_tpr,
        accuracy_at_threshold: correct as f64 / all.len() as f64,
        threshold: detector.threshold,
        scores: (0..test.len())
            .map(|i| DetectionScore {
                sample_index: i,
                label: test.labels[i],
                clean_score: cs[i],
                adversarial_score: as_[i],
            })
            .collect(),
        roc: Some(curve),
    })
}
