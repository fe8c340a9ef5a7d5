use std::path::{Path, PathBuf};

use rfa_core::adapter::{AdapterConfig, AdapterInit, LossWeights};
use rfa_core::attacks::AttackSpec;
use rfa_core::backbone::Architecture;
use rfa_core::datasets::{load_idx, synth_blobs, Dataset};
use rfa_core::metrics::DetectorConfig;
use rfa_core::trainer::{config_hash, TrainConfig, TrainMode};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

const EPS_8: f64 = 8.0 / 255.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub backbone: BackboneConfig,
    pub attack: AttackConfig,
    pub adapter: AdapterSection,
    pub train: TrainSection,
    pub metrics: MetricsConfig,
    pub output_dir: PathBuf,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetConfig::default(),
            backbone: BackboneConfig::default(),
            attack: AttackConfig::default(),
            adapter: AdapterSection::default(),
            train: TrainSection::default(),
            metrics: MetricsConfig::default(),
            output_dir: PathBuf::from("runs"),
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    #[default]
    Blobs,
    Idx,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub blobs: BlobsConfig,
    pub idx: IdxConfig,
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            kind: DatasetKind::Blobs,
            blobs: BlobsConfig::default(),
            idx: IdxConfig::default(),
            train_limit: None,
            test_limit: None,
        }
    }
}

/// The test split is drawn with `seed + 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlobsConfig {
    pub seed: u64,
    pub num_classes: usize,
    pub dim: usize,
    pub spread: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
}

impl Default for BlobsConfig {
    fn default() -> Self {
        BlobsConfig {
            seed: 1,
            num_classes: 3,
            dim: 256,
            spread: 0.01,
            train_per_class: 200,
            test_per_class: 100,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdxConfig {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchChoice {
    /// Dense for single-row samples, convolutional otherwise.
    #[default]
    Auto,
    RefNetD,
    RefNetC,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub architecture: ArchChoice,
    /// Defaults to `<output_dir>/backbone.rfa`.
    pub checkpoint: Option<PathBuf>,
    pub pretrain_epochs: usize,
    pub pretrain_learning_rate: f64,
    pub pretrain_batch_size: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            architecture: ArchChoice::Auto,
            checkpoint: None,
            pretrain_epochs: 20,
            pretrain_learning_rate: 0.001,
            pretrain_batch_size: 64,
        }
    }
}

/// Evaluation attacks, used by `eval` and `detect`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub eval: Vec<AttackSpec>,
    pub batch_size: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            eval: vec![AttackSpec::pgd_linf(EPS_8, 10)],
            batch_size: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterSection {
    pub d: usize,
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub init: AdapterInit,
    pub weights: LossWeights,
    /// Defaults to `<output_dir>/adapter.rfa`.
    pub checkpoint: Option<PathBuf>,
}

impl Default for AdapterSection {
    fn default() -> Self {
        let a = AdapterConfig::default();
        AdapterSection {
            d: a.d,
            latent_dim: a.latent_dim,
            hidden_dim: a.hidden_dim,
            init: a.init,
            weights: a.weights,
            checkpoint: None,
        }
    }
}

impl AdapterSection {
    pub fn core(&self) -> AdapterConfig {
        AdapterConfig {
            d: self.d,
            latent_dim: self.latent_dim,
            hidden_dim: self.hidden_dim,
            init: self.init,
            weights: self.weights.clone(),
        }
    }
}

/// Training knobs; the adapter site and loss weights come from the `adapter` section
/// and the seed from the top level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub mode: TrainMode,
    pub attack: AttackSpec,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub ub_backbone_lr: Option<f64>,
    pub eval_limit: Option<usize>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            mode: t.mode,
            attack: AttackSpec::pgd_linf(EPS_8, 10),
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            beta1: t.beta1,
            beta2: t.beta2,
            adam_eps: t.adam_eps,
            ub_backbone_lr: t.ub_backbone_lr,
            eval_limit: Some(150),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Prop1Config {
    pub splits: Vec<usize>,
    pub k: usize,
    /// Total feature budget `k * eta`; ignored when `calibrated` is set.
    pub k_eta: f64,
    /// Use per-split `eta` from the input-space calibration instead.
    pub calibrated: bool,
    pub samples: usize,
    pub kde_points: usize,
}

impl Default for Prop1Config {
    fn default() -> Self {
        Prop1Config {
            splits: vec![1, 3],
            k: 10,
            k_eta: 1.0,
            calibrated: false,
            samples: 200,
            kde_points: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrateConfig {
    pub splits: Vec<usize>,
    pub epsilon: f64,
    pub k: usize,
    pub batches: usize,
    pub batch_size: usize,
}

impl Default for CalibrateConfig {
    fn default() -> Self {
        CalibrateConfig {
            splits: vec![1, 2, 3],
            epsilon: EPS_8,
            k: 10,
            batches: 4,
            batch_size: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectConfig {
    pub detector: DetectorConfig,
    /// Attack seen while fitting the detector.
    pub train_attack: AttackSpec,
    /// Also report the no-attack control.
    pub control: bool,
}

impl Default for DetectConfig {
    fn default() -> Self {
        DetectConfig {
            detector: DetectorConfig::default(),
            train_attack: AttackSpec::pgd_linf(EPS_8, 10),
            control: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    /// Evaluate through the adapter at `adapter.checkpoint` as well as the bare backbone.
    pub use_adapter: bool,
    pub prop1: Prop1Config,
    pub calibrate: CalibrateConfig,
    pub detect: DetectConfig,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            use_adapter: true,
            prop1: Prop1Config::default(),
            calibrate: CalibrateConfig::default(),
            detect: DetectConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    /// Hash of everything except `output_dir`, so moving a run does not change its identity.
    pub fn hash(&self) -> String {
        config_hash(&ExperimentConfig {
            output_dir: PathBuf::new(),
            ..self.clone()
        })
    }

    pub fn backbone_path(&self) -> PathBuf {
        self.backbone.checkpoint.clone().unwrap_or_else(|| self.output_dir.join("backbone.rfa"))
    }

    pub fn adapter_path(&self) -> PathBuf {
        self.adapter.checkpoint.clone().unwrap_or_else(|| self.output_dir.join("adapter.rfa"))
    }

    pub fn architecture(&self, sample_shape: &[usize], num_classes: usize) -> Result<Architecture, CliError> {
        let (c, h, w) = (sample_shape[0], sample_shape[1], sample_shape[2]);
        let conv = match self.backbone.architecture {
            ArchChoice::Auto => c * h > 1,
            ArchChoice::RefNetD => false,
            ArchChoice::RefNetC => true,
        };
        if conv && (h < 4 || w < 4) {
            return Err(CliError::Usage(format!("ref_net_c needs images of at least 4x4, got {h}x{w}")));
        }
        Ok(if conv {
            Architecture::RefNetC {
                channels: c,
                height: h,
                width: w,
                num_classes,
            }
        } else {
            Architecture::RefNetD {
                input_dim: c * h * w,
                num_classes,
            }
        })
    }

    /// Number of split points of the configured backbone, known before any data is read.
    fn num_splits(&self) -> Option<usize> {
        let conv = match self.backbone.architecture {
            ArchChoice::RefNetC => true,
            ArchChoice::RefNetD => false,
            ArchChoice::Auto if self.dataset.kind == DatasetKind::Blobs => false,
            ArchChoice::Auto => return None,
        };
        let probe = if conv {
            Architecture::RefNetC {
                channels: 1,
                height: 8,
                width: 8,
                num_classes: 2,
            }
        } else {
            Architecture::RefNetD {
                input_dim: 2,
                num_classes: 2,
            }
        };
        probe.backbone_layers().ok().map(|l| l.len())
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            mode: t.mode,
            attack: t.attack.clone(),
            d: self.adapter.d,
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            beta1: t.beta1,
            beta2: t.beta2,
            adam_eps: t.adam_eps,
            weights: self.adapter.weights.clone(),
            ub_backbone_lr: t.ub_backbone_lr,
            eval_limit: t.eval_limit,
            seed: self.seed,
        }
    }

    pub fn pretrain_config(&self) -> TrainConfig {
        TrainConfig {
            mode: TrainMode::Standard,
            attack: self.attack.eval.first().cloned().unwrap_or_else(|| AttackSpec::pgd_linf(EPS_8, 10)),
            epochs: self.backbone.pretrain_epochs,
            batch_size: self.backbone.pretrain_batch_size,
            learning_rate: self.backbone.pretrain_learning_rate,
            eval_limit: self.train.eval_limit,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }

    /// Checks everything that can be checked without touching the filesystem.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Usage(m));
        if self.attack.batch_size == 0 {
            return bad("attack.batch_size must be >= 1".into());
        }
        if self.dataset.kind == DatasetKind::Blobs {
            let b = &self.dataset.blobs;
            if b.num_classes < 2 || b.dim < 2 || b.train_per_class == 0 || b.test_per_class == 0 {
                return bad("dataset.blobs needs num_classes >= 2, dim >= 2 and non-empty splits".into());
            }
            if !(b.spread >= 0.0 && b.spread.is_finite()) {
                return bad(format!("dataset.blobs.spread {} must be >= 0", b.spread));
            }
        }
        let p = &self.metrics.prop1;
        if p.splits.is_empty() || p.samples == 0 || p.k == 0 || !(p.k_eta >= 0.0 && p.k_eta.is_finite()) {
            return bad("metrics.prop1 needs splits, samples >= 1, k >= 1 and k_eta >= 0".into());
        }
        let c = &self.metrics.calibrate;
        if c.batches == 0 || c.batch_size == 0 || c.k == 0 || !(c.epsilon >= 0.0 && c.epsilon.is_finite()) {
            return bad("metrics.calibrate needs batches, batch_size, k >= 1 and epsilon >= 0".into());
        }
        let Some(l) = self.num_splits() else {
            return Ok(());
        };
        let lift = |e: rfa_core::RfaError| CliError::Usage(e.to_string());
        self.train_config().validate(l).map_err(lift)?;
        self.pretrain_config().validate(l).map_err(lift)?;
        for a in self.attack.eval.iter().chain([&self.metrics.detect.train_attack]) {
            a.validate(l).map_err(lift)?;
        }
        for &g in p.splits.iter().chain(&c.splits) {
            if g == 0 || g >= l {
                return bad(format!("split {g} outside (0, {l})"));
            }
        }
        Ok(())
    }

    pub fn load_data(&self) -> Result<(Dataset, Dataset), CliError> {
        let (train, test) = match self.dataset.kind {
            DatasetKind::Blobs => {
                let b = &self.dataset.blobs;
                (
                    synth_blobs(b.seed, b.train_per_class, b.num_classes, b.dim, b.spread)?,
                    synth_blobs(b.seed + 1, b.test_per_class, b.num_classes, b.dim, b.spread)?,
                )
            }
            DatasetKind::Idx => {
                let i = &self.dataset.idx;
                let mut train = load_idx(&i.train_images, &i.train_labels)?;
                let mut test = load_idx(&i.test_images, &i.test_labels)?;
                let classes = train.num_classes.max(test.num_classes);
                train.num_classes = classes;
                test.num_classes = classes;
                (train, test)
            }
        };
        let cap = |d: Dataset, n: Option<usize>| n.map_or_else(|| d.clone(), |n| d.take(n));
        Ok((cap(train, self.dataset.train_limit), cap(test, self.dataset.test_limit)))
    }
}
