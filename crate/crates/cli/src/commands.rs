use std::path::{Path, PathBuf};

use rfa_core::adapter::RfaModule;
use rfa_core::attacks::{calibrate_eta, delta_loss_batch, AttackSpec, Calibration};
use rfa_core::backbone::SplitNet;
use rfa_core::datasets::{sequential_batches, Dataset};
use rfa_core::metrics::{
    accuracy, evaluate_detector, mann_whitney_greater, median, robust_accuracy, train_detector, DetectionReport, Detector,
    Kde, MannWhitney,
};
use rfa_core::numcore::Rng;
use rfa_core::trainer::{detect_ro, train_at_baseline, train_fb, train_standard, train_ub, RoReport, RunRecord, TrainData, TrainMode};
use rfa_core::RfaError;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::{io, CliError};

type Result<T> = std::result::Result<T, CliError>;

/// Every JSON output carries the command, config hash and seed next to its body.
#[derive(Serialize)]
struct Stamped<'a, T: Serialize> {
    command: &'a str,
    config_hash: &'a str,
    seed: u64,
    #[serde(flatten)]
    body: T,
}

pub struct Ctx {
    pub cfg: ExperimentConfig,
    pub hash: String,
    pub command: &'static str,
}

impl Ctx {
    pub fn new(cfg: ExperimentConfig, command: &'static str) -> Result<Self> {
        cfg.validate()?;
        std::fs::create_dir_all(&cfg.output_dir).map_err(|e| io(&cfg.output_dir, e))?;
        let ctx = Ctx {
            hash: cfg.hash(),
            cfg,
            command,
        };
        ctx.write_json(&format!("{command}_config.json"), &ctx.cfg)?;
        Ok(ctx)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.cfg.output_dir.join(name)
    }

    fn write_json<T: Serialize>(&self, name: &str, body: &T) -> Result<PathBuf> {
        let stamped = Stamped {
            command: self.command,
            config_hash: &self.hash,
            seed: self.cfg.seed,
            body,
        };
        let path = self.path(name);
        let text = serde_json::to_string_pretty(&stamped).map_err(RfaError::from)?;
        std::fs::write(&path, text).map_err(|e| io(&path, e))?;
        Ok(path)
    }

    fn write_csv<T: Serialize>(&self, name: &str, rows: impl IntoIterator<Item = T>) -> Result<PathBuf> {
        let path = self.path(name);
        let mut w = csv::Writer::from_path(&path).map_err(RfaError::from)?;
        for r in rows {
            w.serialize(r).map_err(RfaError::from)?;
        }
        w.flush().map_err(|e| io(&path, e))?;
        Ok(path)
    }

    fn rng(&self, label: &str) -> Rng {
        Rng::new(self.cfg.seed).split(label)
    }

    fn fresh_backbone(&self, data: &Dataset) -> Result<SplitNet> {
        let arch = self.cfg.architecture(data.sample_shape(), data.num_classes)?;
        Ok(SplitNet::new(arch, self.cfg.seed)?)
    }

    fn load_backbone(&self) -> Result<SplitNet> {
        Ok(SplitNet::load(self.cfg.backbone_path())?)
    }

    fn load_adapter(&self) -> Result<RfaModule> {
        Ok(RfaModule::load(self.cfg.adapter_path())?)
    }

    fn save_backbone(&self, net: &SplitNet, path: &Path, record: &mut RunRecord) -> Result<()> {
        create_parent(path)?;
        net.save(path)?;
        record.checkpoints.push(path.display().to_string());
        Ok(())
    }

    fn write_run(&self, stem: &str, record: &RunRecord) -> Result<()> {
        record.write_csv(self.path(&format!("{stem}_curve.csv")))?;
        #[derive(Serialize)]
        struct Run<'a> {
            run: &'a RunRecord,
            robust_overfitting: Option<RoReport>,
        }
        self.write_json(
            &format!("{stem}_run.json"),
            &Run {
                run: record,
                robust_overfitting: detect_ro(record).ok(),
            },
        )?;
        Ok(())
    }
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => std::fs::create_dir_all(p).map_err(|e| io(p, e)),
        _ => Ok(()),
    }
}

fn last_epoch_line(record: &RunRecord) -> String {
    record.epochs.last().map_or_else(String::new, |e| {
        format!(
            "epoch {}: test error {:.4}, robust test error {:.4}",
            e.epoch, e.test_std_err, e.test_robust_err
        )
    })
}

pub fn pretrain(ctx: &Ctx) -> Result<()> {
    let (train, test) = ctx.cfg.load_data()?;
    let mut net = ctx.fresh_backbone(&train)?;
    let mut record = train_standard(&mut net, &TrainData { train: &train, test: &test }, &ctx.cfg.pretrain_config())?;
    ctx.save_backbone(&net, &ctx.cfg.backbone_path(), &mut record)?;
    ctx.write_run("pretrain", &record)?;
    println!("pretrain {}", last_epoch_line(&record));
    Ok(())
}

pub fn train(ctx: &Ctx) -> Result<()> {
    let (train, test) = ctx.cfg.load_data()?;
    let data = TrainData { train: &train, test: &test };
    let tc = ctx.cfg.train_config();
    let (stem, record) = match tc.mode {
        TrainMode::Fb => {
            let net = ctx.load_backbone()?;
            let mut rfa = RfaModule::new(&net, &ctx.cfg.adapter.core(), ctx.cfg.seed)?;
            let mut record = train_fb(&net, &mut rfa, &data, &tc)?;
            let path = ctx.cfg.adapter_path();
            create_parent(&path)?;
            rfa.save(&path)?;
            record.checkpoints.push(path.display().to_string());
            ("train_fb", record)
        }
        TrainMode::Ub => {
            let mut net = ctx.load_backbone()?;
            let mut rfa = RfaModule::new(&net, &ctx.cfg.adapter.core(), ctx.cfg.seed)?;
            let mut record = train_ub(&mut net, &mut rfa, &data, &tc)?;
            let path = ctx.cfg.adapter_path();
            create_parent(&path)?;
            rfa.save(&path)?;
            record.checkpoints.push(path.display().to_string());
            ctx.save_backbone(&net, &ctx.path("backbone_ub.rfa"), &mut record)?;
            ("train_ub", record)
        }
        TrainMode::AtPgdBaseline => {
            let mut net = ctx.fresh_backbone(&train)?;
            let mut record = train_at_baseline(&mut net, &data, &tc)?;
            ctx.save_backbone(&net, &ctx.path("backbone_at.rfa"), &mut record)?;
            ("train_at", record)
        }
        TrainMode::Standard => {
            return Err(CliError::Usage("train.mode = standard is what `pretrain` does; use that".into()));
        }
    };
    ctx.write_run(stem, &record)?;
    println!("{stem} {}", last_epoch_line(&record));
    Ok(())
}

#[derive(Serialize)]
struct AttackResult {
    attack: String,
    spec: AttackSpec,
    robust_accuracy: f64,
}

#[derive(Serialize)]
struct ModelResult {
    model: &'static str,
    clean_accuracy: f64,
    attacks: Vec<AttackResult>,
}

pub fn eval(ctx: &Ctx) -> Result<()> {
    let (_, test) = ctx.cfg.load_data()?;
    let net = ctx.load_backbone()?;
    let inf = if ctx.cfg.metrics.use_adapter {
        Some(ctx.load_adapter()?.strip_to_inference())
    } else {
        None
    };
    let mut models = Vec::new();
    let variants = [("backbone", None), ("backbone+rfa", inf.as_ref())];
    for (name, rfa_i) in variants.into_iter().filter(|(n, r)| *n == "backbone" || r.is_some()) {
        let clean = accuracy(&net, rfa_i, &test)?;
        let mut attacks = Vec::new();
        for (i, spec) in ctx.cfg.attack.eval.iter().enumerate() {
            let mut rng = ctx.rng("eval").split_indexed(name, i as u64);
            let r = robust_accuracy(&net, rfa_i, &test, spec, ctx.cfg.attack.batch_size, &mut rng)?;
            attacks.push(AttackResult {
                attack: spec.label(),
                spec: spec.clone(),
                robust_accuracy: r,
            });
        }
        println!("{name}: clean {clean:.4}");
        for a in &attacks {
            println!("{name}: {} (eps {:.4}, k {}) {:.4}", a.attack, a.spec.epsilon, a.spec.steps(), a.robust_accuracy);
        }
        models.push(ModelResult {
            model: name,
            clean_accuracy: clean,
            attacks,
        });
    }
    #[derive(Serialize)]
    struct Report {
        test_samples: usize,
        models: Vec<ModelResult>,
    }
    ctx.write_json(
        "eval.json",
        &Report {
            test_samples: test.len(),
            models,
        },
    )?;
    Ok(())
}

#[derive(Serialize)]
struct DeltaRow {
    g: usize,
    sample_index: usize,
    delta_l: f64,
}

#[derive(Serialize)]
struct KdeRow {
    g: usize,
    x: f64,
    density: f64,
}

#[derive(Serialize)]
struct SplitSummary {
    g: usize,
    eta: f64,
    k: usize,
    samples: usize,
    median: f64,
    kde_bandwidth: Option<f64>,
}

#[derive(Serialize)]
struct PairTest {
    shallow: usize,
    deep: usize,
    #[serde(flatten)]
    test: MannWhitney,
}

fn calibration_batches(ctx: &Ctx, train: &Dataset) -> Vec<(rfa_core::numcore::Tensor, Vec<usize>)> {
    let c = &ctx.cfg.metrics.calibrate;
    let mut b = sequential_batches(&train.take(c.batches * c.batch_size), c.batch_size);
    b.truncate(c.batches);
    b
}

fn calibrate_splits(ctx: &Ctx, net: &SplitNet, train: &Dataset, splits: &[usize]) -> Result<Vec<Calibration>> {
    let c = &ctx.cfg.metrics.calibrate;
    let batches = calibration_batches(ctx, train);
    splits
        .iter()
        .map(|&g| Ok(calibrate_eta(net, &batches, g, c.epsilon, c.k, &mut ctx.rng("calibrate"))?))
        .collect()
}

pub fn prop1(ctx: &Ctx) -> Result<()> {
    let p = &ctx.cfg.metrics.prop1;
    let (train, test) = ctx.cfg.load_data()?;
    let net = ctx.load_backbone()?;
    for &g in &p.splits {
        if g == 0 || g >= net.num_splits() {
            return Err(CliError::Runtime(RfaError::SplitIndex(format!(
                "prop1 split {g} outside (0, {})",
                net.num_splits()
            ))));
        }
    }
    let mut splits = p.splits.clone();
    splits.sort_unstable();
    splits.dedup();
    let etas: Vec<f64> = if p.calibrated {
        calibrate_splits(ctx, &net, &train, &splits)?.iter().map(|c| c.eta).collect()
    } else {
        vec![p.k_eta / p.k as f64; splits.len()]
    };
    let sample = test.take(p.samples);
    let (mut rows, mut kde_rows, mut summaries, mut warnings) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut per_split = Vec::new();
    for (&g, &eta) in splits.iter().zip(&etas) {
        let mut values = Vec::with_capacity(sample.len());
        for (x, y) in sequential_batches(&sample, 100) {
            values.extend(delta_loss_batch(&net, g, eta, p.k, &x, &y)?.iter().map(|s| s.value));
        }
        rows.extend(values.iter().enumerate().map(|(i, &v)| DeltaRow {
            g,
            sample_index: i,
            delta_l: v,
        }));
        let bandwidth = match Kde::fit(&values) {
            Ok(k) => {
                let grid = k.grid(p.kde_points);
                kde_rows.extend(grid.iter().zip(k.evaluate(&grid)).map(|(&x, density)| KdeRow { g, x, density }));
                Some(k.bandwidth)
            }
            Err(RfaError::Degenerate(_)) | Err(RfaError::InvalidArgument(_)) => {
                let w = format!("degenerate KDE at g={g}: all delta_l samples are equal");
                eprintln!("warning: {w}");
                warnings.push(w);
                None
            }
            Err(e) => return Err(e.into()),
        };
        summaries.push(SplitSummary {
            g,
            eta,
            k: p.k,
            samples: values.len(),
            median: median(&values),
            kde_bandwidth: bandwidth,
        });
        per_split.push(values);
    }
    let mut tests = Vec::new();
    for i in 1..splits.len() {
        tests.push(PairTest {
            shallow: splits[i - 1],
            deep: splits[i],
            test: mann_whitney_greater(&per_split[i - 1], &per_split[i])?,
        });
    }
    ctx.write_csv("prop1.csv", rows)?;
    ctx.write_csv("prop1_kde.csv", kde_rows)?;
    for s in &summaries {
        println!("g={} eta={:.5} median delta_l {:.6}", s.g, s.eta, s.median);
    }
    for t in &tests {
        println!("g={} > g={}: p = {:.3e}", t.shallow, t.deep, t.test.p_value);
    }
    #[derive(Serialize)]
    struct Summary {
        splits: Vec<SplitSummary>,
        mann_whitney: Vec<PairTest>,
        warnings: Vec<String>,
    }
    ctx.write_json(
        "prop1.json",
        &Summary {
            splits: summaries,
            mann_whitney: tests,
            warnings,
        },
    )?;
    Ok(())
}

pub fn calibrate(ctx: &Ctx) -> Result<()> {
    let c = &ctx.cfg.metrics.calibrate;
    let (train, _) = ctx.cfg.load_data()?;
    let net = ctx.load_backbone()?;
    let table = calibrate_splits(ctx, &net, &train, &c.splits)?;
    for t in &table {
        println!("g={} eta={:.6} mu={:.6} max_delta_inf={:.6}", t.g, t.eta, t.mu, t.max_delta_inf);
    }
    #[derive(Serialize)]
    struct Table {
        epsilon: f64,
        k: usize,
        batches: usize,
        samples: usize,
        table: Vec<Calibration>,
    }
    ctx.write_json(
        "calibrate.json",
        &Table {
            epsilon: c.epsilon,
            k: c.k,
            batches: table.first().map_or(0, |t| t.batches),
            samples: table.first().map_or(0, |t| t.samples),
            table,
        },
    )?;
    Ok(())
}

pub fn detect(ctx: &Ctx) -> Result<()> {
    let d = &ctx.cfg.metrics.detect;
    let (train, test) = ctx.cfg.load_data()?;
    let net = ctx.load_backbone()?;
    let inf = ctx.load_adapter()?.strip_to_inference();
    let seed = ctx.rng("detect-train").next_u64();
    let detector = train_detector(&net, &inf, &train, Some(&d.train_attack), &d.detector, seed)?;

    let mut attacks: Vec<Option<&AttackSpec>> = ctx.cfg.attack.eval.iter().map(Some).collect();
    if d.control {
        attacks.push(None);
    }
    let mut reports = Vec::new();
    for (i, attack) in attacks.into_iter().enumerate() {
        let seed = ctx.rng("detect-eval").split_indexed("attack", i as u64).next_u64();
        let report = evaluate_detector(&detector, &net, &inf, &test, attack, seed)?;
        let stem = format!("detect_{i}_{}", report.attack);
        ctx.write_csv(&format!("{stem}_scores.csv"), &report.scores)?;
        if let Some(curve) = &report.roc {
            ctx.write_csv(&format!("{stem}_roc.csv"), &curve.points)?;
        }
        println!(
            "{}{}: auc {:.4}, tnr@95tpr {:.4}, accuracy {:.4}",
            report.attack,
            if report.control { " (control)" } else { "" },
            report.auc,
            report.tnr_at_95_tpr,
            report.accuracy_at_threshold
        );
        reports.push(report);
    }
    #[derive(Serialize)]
    struct Report<'a> {
        train_attack: &'a AttackSpec,
        detector: &'a Detector,
        reports: &'a [DetectionReport],
    }
    ctx.write_json(
        "detect.json",
        &Report {
            train_attack: &d.train_attack,
            detector: &detector,
            reports: &reports,
        },
    )?;
    Ok(())
}
