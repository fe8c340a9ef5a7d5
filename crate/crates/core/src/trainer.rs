//! Outer-loop minimization: Adam, adapter-only (FB) and alternating joint (UB)
//! training, the full-model AT-PGD baseline, standard training, run records and
//! robust-overfitting detection.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::{adapter_objective, wrong_labels, LossComponents, LossWeights, RfaModule};
use crate::attacks::{adversarial_features, pgd_feature, pgd_input, AttackSpace, AttackSpec};
use crate::backbone::SplitNet;
use crate::datasets::{batches, BatchPlan, Dataset};
use crate::error::{Result, RfaError};
use crate::metrics::{accuracy, robust_accuracy};
use crate::numcore::{Rng, Tape, Tensor};

/// Bias-corrected Adam over a fixed list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn with_lr(lr: f64) -> Self {
        Self::new(lr, 0.9, 0.999, 1e-8)
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(RfaError::shape(
                "adam_step",
                format!("{} parameters, {} gradients", params.len(), grads.len()),
            ));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(RfaError::shape("adam_step", "parameter list changed between steps"));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(RfaError::shape(
                    "adam_step",
                    format!("param {:?} grad {:?}", p.shape(), g.shape()),
                ));
            }
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for (i, &gi) in g.data().iter().enumerate() {
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * gi;
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * gi * gi;
                let mh = md[i] / c1;
                let vh = vd[i] / c2;
                pd[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Fb,
    Ub,
    AtPgdBaseline,
    Standard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    /// Inner-loop attack; `attack.g` is the feature perturbation site.
    pub attack: AttackSpec,
    /// Adapter site.
    pub d: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weights: LossWeights,
    /// Learning rate for backbone parameters in the joint phase; defaults to `learning_rate`.
    pub ub_backbone_lr: Option<f64>,
    /// Cap on test samples used for the per-epoch robust error.
    pub eval_limit: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Fb,
            attack: AttackSpec::feature(3, 0.035, 10),
            d: 4,
            epochs: 20,
            batch_size: 64,
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weights: LossWeights::default(),
            ub_backbone_lr: None,
            eval_limit: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, num_splits: usize) -> Result<()> {
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(RfaError::InvalidArgument("learning_rate must be > 0".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(RfaError::InvalidArgument("epochs and batch_size must be >= 1".into()));
        }
        if self.ub_backbone_lr.is_some_and(|lr| !(lr >= 0.0 && lr.is_finite())) {
            return Err(RfaError::InvalidArgument("ub_backbone_lr must be >= 0".into()));
        }
        self.weights.validate()?;
        self.attack.validate(num_splits)?;
        let adapter = matches!(self.mode, TrainMode::Fb | TrainMode::Ub);
        if adapter && (self.d == 0 || self.d >= num_splits) {
            return Err(RfaError::SplitIndex(format!("adapter site d={} outside (0, {num_splits})", self.d)));
        }
        if self.attack.space == AttackSpace::Feature {
            if !adapter {
                return Err(RfaError::InvalidArgument(format!(
                    "{:?} training needs an input-space attack",
                    self.mode
                )));
            }
            if self.attack.g >= self.d {
                return Err(RfaError::SplitIndex(format!(
                    "feature attack site g={} must precede d={}",
                    self.attack.g, self.d
                )));
            }
        }
        Ok(())
    }

    fn adam(&self, lr: f64) -> Adam {
        Adam::new(lr, self.beta1, self.beta2, self.adam_eps)
    }
}

/// Hex SHA-256 of the canonical JSON form of a config.
pub fn config_hash<T: Serialize>(config: &T) -> String {
    let json = serde_json::to_vec(config).expect("configs serialize");
    hex::encode(Sha256::digest(json))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_std_err: f64,
    pub test_std_err: f64,
    pub test_robust_err: f64,
    pub loss_total: f64,
    pub loss_cr: f64,
    pub loss_cn: f64,
    pub loss_tp: f64,
    pub loss_b: f64,
    pub loss_kl: f64,
    pub wall_time_s: f64,
    pub mean_batch_time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub mode: TrainMode,
    pub config_hash: String,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    /// Number of scalar parameters updated at each batch, in order.
    pub update_set_sizes: Vec<usize>,
    pub checkpoints: Vec<String>,
}

impl RunRecord {
    fn new(config: &TrainConfig) -> Self {
        RunRecord {
            mode: config.mode,
            config_hash: config_hash(config),
            seed: config.seed,
            epochs: Vec::new(),
            update_set_sizes: Vec::new(),
            checkpoints: Vec::new(),
        }
    }

    /// Copy with all wall-clock fields zeroed, for reproducibility comparisons.
    pub fn without_timing(&self) -> RunRecord {
        let mut r = self.clone();
        for e in &mut r.epochs {
            e.wall_time_s = 0.0;
            e.mean_batch_time_s = 0.0;
        }
        r
    }

    pub fn truncated(&self, epochs: usize) -> RunRecord {
        let mut r = self.clone();
        r.epochs.truncate(epochs);
        r
    }

    pub fn robust_errors(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.test_robust_err).collect()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => RfaError::io(path, io),
            other => RfaError::InvalidArgument(format!("{other:?}")),
        })?;
        for e in &self.epochs {
            w.serialize(e)?;
        }
        w.flush().map_err(|e| RfaError::io(path, e))
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let s = serde_json::to_string_pretty(self)?;
        std::fs::write(path, s).map_err(|e| RfaError::io(path, e))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoReport {
    pub ro_detected: bool,
    /// 1-based epoch at which the smoothed curve is lowest.
    pub best_epoch: usize,
    pub final_gap: f64,
}

pub const RO_WINDOW: usize = 5;
pub const RO_GAP: f64 = 0.02;

/// Trailing moving average over full windows; entry `i` covers epochs `i+1..=i+w`.
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    values
        .windows(window)
        .map(|w| w.iter().sum::<f64>() / window as f64)
        .collect()
}

/// Robust overfitting: the smoothed test robust error ends more than `RO_GAP` above
/// its minimum.
pub fn detect_ro(record: &RunRecord) -> Result<RoReport> {
    detect_ro_curve(&record.robust_errors())
}

pub fn detect_ro_curve(errors: &[f64]) -> Result<RoReport> {
    if errors.len() < 10 {
        return Err(RfaError::InvalidArgument(format!(
            "robust-overfitting detection needs >= 10 epochs, got {}",
            errors.len()
        )));
    }
    let s = smooth(errors, RO_WINDOW);
    let (imin, min) = s
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |(bi, bv), (i, &v)| if v < bv { (i, v) } else { (bi, bv) });
    let gap = s[s.len() - 1] - min;
    Ok(RoReport {
        ro_detected: gap > RO_GAP,
        best_epoch: imin + RO_WINDOW,
        final_gap: gap,
    })
}

/// First epoch (1-based) whose smoothed robust error is within `tol` of the best
/// smoothed value of the run.
pub fn convergence_epoch(record: &RunRecord, tol: f64) -> Option<usize> {
    let s = smooth(&record.robust_errors(), RO_WINDOW);
    let min = s.iter().copied().fold(f64::INFINITY, f64::min);
    s.iter().position(|&v| v <= min + tol).map(|i| i + RO_WINDOW)
}

pub struct TrainData<'a> {
    pub train: &'a Dataset,
    pub test: &'a Dataset,
}

fn epoch_plan(config: &TrainConfig, epoch: usize) -> BatchPlan {
    BatchPlan {
        batch_size: config.batch_size,
        shuffle_seed: Rng::new(config.seed).split_indexed("shuffle", epoch as u64).next_u64(),
        drop_last: false,
    }
}

fn eval_set<'a>(test: &'a Dataset, config: &TrainConfig) -> std::borrow::Cow<'a, Dataset> {
    match config.eval_limit {
        Some(n) if n < test.len() => std::borrow::Cow::Owned(test.take(n)),
        _ => std::borrow::Cow::Borrowed(test),
    }
}

#[derive(Default)]
struct EpochAcc {
    total: f64,
    comps: LossComponents,
    batches: usize,
    batch_time: f64,
}

impl EpochAcc {
    fn add(&mut self, total: f64, c: &LossComponents, secs: f64) {
        self.total += total;
        self.comps.cr += c.cr;
        self.comps.cn += c.cn;
        self.comps.tp += c.tp;
        self.comps.b += c.b;
        self.comps.kl += c.kl;
        self.batches += 1;
        self.batch_time += secs;
    }

    fn finish(self, epoch: usize, errs: (f64, f64, f64), wall: f64) -> EpochRecord {
        let n = self.batches.max(1) as f64;
        EpochRecord {
            epoch,
            train_std_err: errs.0,
            test_std_err: errs.1,
            test_robust_err: errs.2,
            loss_total: self.total / n,
            loss_cr: self.comps.cr / n,
            loss_cn: self.comps.cn / n,
            loss_tp: self.comps.tp / n,
            loss_b: self.comps.b / n,
            loss_kl: self.comps.kl / n,
            wall_time_s: wall,
            mean_batch_time_s: self.batch_time / n,
        }
    }
}

/// Adapter-side optimizer state for FB/UB training.
pub struct AdapterTrainer {
    pub config: TrainConfig,
    adam_a: Adam,
    adam_b: Adam,
}

impl AdapterTrainer {
    pub fn new(config: TrainConfig) -> Self {
        let adam_a = config.adam(config.learning_rate);
        let adam_b = config.adam(config.ub_backbone_lr.unwrap_or(config.learning_rate));
        AdapterTrainer {
            config,
            adam_a,
            adam_b,
        }
    }

    /// One adapter-only update on a batch. Returns `(L_FB, components)`.
    pub fn fb_step(&mut self, backbone: &SplitNet, rfa: &mut RfaModule, x: &Tensor, y: &[usize], rng: &mut Rng) -> Result<(f64, LossComponents)> {
        let cfg = &self.config;
        let d = cfg.d;
        let z_plus = backbone.forward_values(x, 0, d)?;
        let mut arng = rng.split("attack");
        let z_minus = adversarial_features(backbone, &cfg.attack, x, y, d, &mut arng)?;
        let adv_logits = backbone.forward_values(&z_minus, d, backbone.num_splits())?;
        let y_bar = wrong_labels(&adv_logits, y);

        let mut tape = Tape::new();
        let bound = rfa.bind(&mut tape, true)?;
        let zp = tape.constant(z_plus)?;
        let zm = tape.constant(z_minus)?;
        let mut vrng = rng.split("vae");
        let obj = adapter_objective(&mut tape, rfa, &bound, &cfg.weights, zp, zm, y, &y_bar, None, &mut vrng)?;
        let total = tape.value(obj.total).item();
        let grads = tape.backward(obj.total)?;
        let g = rfa.collect_grads(&bound, &grads);
        let mut params: Vec<&mut Tensor> = rfa.stacks_mut().into_iter().flat_map(|s| s.params_mut().iter_mut()).collect();
        self.adam_a.step(&mut params, &g)?;
        Ok((total, obj.components))
    }

    /// One joint update of adapter and backbone on a batch. Returns `(L_UB, components)`.
    pub fn ub_step(&mut self, backbone: &mut SplitNet, rfa: &mut RfaModule, x: &Tensor, y: &[usize], rng: &mut Rng) -> Result<(f64, LossComponents)> {
        let cfg = &self.config;
        let (d, l) = (cfg.d, backbone.num_splits());
        let mut arng = rng.split("attack");

        let mut tape = Tape::new();
        let bb = backbone.bind(&mut tape, true)?;
        let xv = tape.constant(x.clone())?;
        let z_plus = backbone.forward_slice(&mut tape, &bb, xv, 0, d)?;
        let z_minus = match cfg.attack.space {
            AttackSpace::Input => {
                let x_adv = pgd_input(backbone, x, y, &cfg.attack, &mut arng)?;
                let xa = tape.constant(x_adv)?;
                backbone.forward_slice(&mut tape, &bb, xa, 0, d)?
            }
            AttackSpace::Feature => {
                let g = cfg.attack.g;
                let z_g = backbone.forward_slice(&mut tape, &bb, xv, 0, g)?;
                let zg_val = tape.value(z_g).clone();
                let fa = pgd_feature(backbone, &zg_val, y, &cfg.attack)?;
                let delta = tape.constant(fa.z_adv.zip_map(&zg_val, |a, b| a - b)?)?;
                let zg_adv = tape.add(z_g, delta)?;
                backbone.forward_slice(&mut tape, &bb, zg_adv, g, d)?
            }
        };
        let clean_logits = backbone.forward_slice(&mut tape, &bb, z_plus, d, l)?;
        let l_b = tape.cross_entropy(clean_logits, y)?;
        let tape_rfa = rfa.bind(&mut tape, true)?;
        let mut vrng = rng.split("vae");
        let obj = adapter_objective(&mut tape, rfa, &tape_rfa, &cfg.weights, z_plus, z_minus, y, &[], Some(l_b), &mut vrng)?;
        let total = tape.value(obj.total).item();
        let grads = tape.backward(obj.total)?;
        let ga = rfa.collect_grads(&tape_rfa, &grads);
        let gb: Vec<Tensor> = backbone
            .stack()
            .params()
            .iter()
            .zip(&bb.vars)
            .map(|(p, v)| grads.get_or_zeros(*v, p))
            .collect();
        let mut pa: Vec<&mut Tensor> = rfa.stacks_mut().into_iter().flat_map(|s| s.params_mut().iter_mut()).collect();
        self.adam_a.step(&mut pa, &ga)?;
        let mut pb: Vec<&mut Tensor> = backbone.stack_mut().params_mut().iter_mut().collect();
        self.adam_b.step(&mut pb, &gb)?;
        Ok((total, obj.components))
    }
}

/// Error rates `(train clean, test clean, test robust)` of the deployed predictor.
fn evaluate(
    backbone: &SplitNet,
    rfa: Option<&RfaModule>,
    data: &TrainData,
    config: &TrainConfig,
    epoch: usize,
) -> Result<(f64, f64, f64)> {
    let inf = rfa.map(RfaModule::strip_to_inference);
    let inf = inf.as_ref();
    let train_acc = accuracy(backbone, inf, data.train)?;
    let test_acc = accuracy(backbone, inf, data.test)?;
    let test = eval_set(data.test, config);
    let mut rng = Rng::new(config.seed).split_indexed("eval", epoch as u64);
    let rob = robust_accuracy(backbone, inf, &test, &config.attack, config.batch_size.max(64), &mut rng)?;
    Ok((1.0 - train_acc, 1.0 - test_acc, 1.0 - rob))
}

/// Adapter-only training with the backbone frozen.
pub fn train_fb(backbone: &SplitNet, rfa: &mut RfaModule, data: &TrainData, config: &TrainConfig) -> Result<RunRecord> {
    if config.mode != TrainMode::Fb {
        return Err(RfaError::InvalidArgument("train_fb needs mode = fb".into()));
    }
    train_adapter(&mut backbone.clone(), rfa, data, config)
}

/// Alternating training: odd batches update the adapter alone, even batches update
/// adapter and backbone jointly.
pub fn train_ub(backbone: &mut SplitNet, rfa: &mut RfaModule, data: &TrainData, config: &TrainConfig) -> Result<RunRecord> {
    if config.mode != TrainMode::Ub {
        return Err(RfaError::InvalidArgument("train_ub needs mode = ub".into()));
    }
    train_adapter(backbone, rfa, data, config)
}

fn train_adapter(backbone: &mut SplitNet, rfa: &mut RfaModule, data: &TrainData, config: &TrainConfig) -> Result<RunRecord> {
    config.validate(backbone.num_splits())?;
    if rfa.d() != config.d {
        return Err(RfaError::SplitIndex(format!("adapter built for d={}, config has d={}", rfa.d(), config.d)));
    }
    let mut trainer = AdapterTrainer::new(config.clone());
    let mut record = RunRecord::new(config);
    let root = Rng::new(config.seed);
    let (na, nb) = (rfa.param_count(), backbone.stack().param_count());
    let mut batch_no = 0u64;
    for epoch in 1..=config.epochs {
        let start = Instant::now();
        let mut acc = EpochAcc::default();
        for (x, y) in batches(data.train, &epoch_plan(config, epoch))? {
            batch_no += 1;
            let mut rng = root.split_indexed("batch", batch_no);
            let t0 = Instant::now();
            let joint = config.mode == TrainMode::Ub && batch_no.is_multiple_of(2);
            let (total, comps) = if joint {
                record.update_set_sizes.push(na + nb);
                trainer.ub_step(backbone, rfa, &x, &y, &mut rng)?
            } else {
                record.update_set_sizes.push(na);
                trainer.fb_step(backbone, rfa, &x, &y, &mut rng)?
            };
            acc.add(total, &comps, t0.elapsed().as_secs_f64());
        }
        let errs = evaluate(backbone, Some(rfa), data, config, epoch)?;
        rfa.lineage.epoch = epoch;
        record.epochs.push(acc.finish(epoch, errs, start.elapsed().as_secs_f64()));
    }
    if config.mode == TrainMode::Ub {
        backbone.lineage.epoch += config.epochs;
        backbone.lineage.seeds.push(config.seed);
    }
    Ok(record)
}

/// One full-model update on attacked (or, for `standard`, clean) inputs.
pub fn backbone_step(backbone: &mut SplitNet, adam: &mut Adam, attack: Option<&AttackSpec>, x: &Tensor, y: &[usize], rng: &mut Rng) -> Result<f64> {
    let input = match attack {
        Some(a) => pgd_input(backbone, x, y, a, rng)?,
        None => x.clone(),
    };
    let mut tape = Tape::new();
    let b = backbone.bind(&mut tape, true)?;
    let xv = tape.constant(input)?;
    let logits = backbone.forward_slice(&mut tape, &b, xv, 0, backbone.num_splits())?;
    let loss = tape.cross_entropy(logits, y)?;
    let value = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    let g: Vec<Tensor> = backbone
        .stack()
        .params()
        .iter()
        .zip(&b.vars)
        .map(|(p, v)| grads.get_or_zeros(*v, p))
        .collect();
    let mut params: Vec<&mut Tensor> = backbone.stack_mut().params_mut().iter_mut().collect();
    adam.step(&mut params, &g)?;
    Ok(value)
}

/// Full-model adversarial training on input-space PGD examples only.
pub fn train_at_baseline(backbone: &mut SplitNet, data: &TrainData, config: &TrainConfig) -> Result<RunRecord> {
    if config.mode != TrainMode::AtPgdBaseline {
        return Err(RfaError::InvalidArgument("train_at_baseline needs mode = at_pgd_baseline".into()));
    }
    train_backbone(backbone, data, config, true)
}

/// Plain clean-data training (pre-training of the backbone).
pub fn train_standard(backbone: &mut SplitNet, data: &TrainData, config: &TrainConfig) -> Result<RunRecord> {
    if config.mode != TrainMode::Standard {
        return Err(RfaError::InvalidArgument("train_standard needs mode = standard".into()));
    }
    train_backbone(backbone, data, config, false)
}

fn train_backbone(backbone: &mut SplitNet, data: &TrainData, config: &TrainConfig, adversarial: bool) -> Result<RunRecord> {
    config.validate(backbone.num_splits())?;
    let mut adam = config.adam(config.learning_rate);
    let mut record = RunRecord::new(config);
    let root = Rng::new(config.seed);
    let n = backbone.stack().param_count();
    let mut batch_no = 0u64;
    for epoch in 1..=config.epochs {
        let start = Instant::now();
        let mut acc = EpochAcc::default();
        for (x, y) in batches(data.train, &epoch_plan(config, epoch))? {
            batch_no += 1;
            let mut rng = root.split_indexed("batch", batch_no);
            let t0 = Instant::now();
            let attack = adversarial.then_some(&config.attack);
            let loss = backbone_step(backbone, &mut adam, attack, &x, &y, &mut rng)?;
            record.update_set_sizes.push(n);
            let comps = LossComponents {
                b: loss,
                ..Default::default()
            };
            acc.add(loss, &comps, t0.elapsed().as_secs_f64());
        }
        let errs = evaluate(backbone, None, data, config, epoch)?;
        backbone.lineage.epoch += 1;
        record.epochs.push(acc.finish(epoch, errs, start.elapsed().as_secs_f64()));
    }
    backbone.lineage.seeds.push(config.seed);
    Ok(record)
}
