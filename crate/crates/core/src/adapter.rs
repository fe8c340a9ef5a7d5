//! The robustness feature adapter: two VAEs at split `d` that separate robust from
//! non-robust feature content, the duplicated-tail heads that drive them, every loss
//! term, and the stripped inference module.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{Architecture, BoundStack, Checkpoint, CheckpointMeta, LayerSpec, LayerStack, Lineage, SplitNet};
use crate::error::{Result, RfaError};
use crate::numcore::{argmax, reparameterize, softmax_rows, Gradients, Rng, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_cn: f64,
    pub lambda_tp: f64,
    pub lambda_b: f64,
    /// Triplet margin on dimension-normalized squared distances.
    pub tau: f64,
    pub lambda_kl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_cn: 0.4,
            lambda_tp: 0.4,
            lambda_b: 0.6,
            tau: 0.5,
            lambda_kl: 0.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_cn, self.lambda_tp, self.lambda_b, self.tau, self.lambda_kl];
        if all.iter().all(|w| *w >= 0.0 && w.is_finite()) {
            Ok(())
        } else {
            Err(RfaError::InvalidArgument(format!("loss weights must be >= 0: {self:?}")))
        }
    }
}

/// Scalar loss terms of one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub cr: f64,
    pub cn: f64,
    pub tp: f64,
    /// Clean-input backbone cross-entropy (joint phase only).
    pub b: f64,
    pub kl: f64,
}

/// `L_CR + lambda_cn * L_CN + lambda_tp * L_Tp` (+ optional KL).
pub fn loss_fb(w: &LossWeights, c: &LossComponents) -> f64 {
    c.cr + w.lambda_cn * c.cn + w.lambda_tp * c.tp + w.lambda_kl * c.kl
}

/// `L_CR + lambda_tp * L_Tp + lambda_b * L_B` (+ optional KL). `L_CN` does not enter.
pub fn loss_ub(w: &LossWeights, c: &LossComponents) -> f64 {
    c.cr + w.lambda_tp * c.tp + w.lambda_b * c.b + w.lambda_kl * c.kl
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterInit {
    /// He-uniform weights, log-variance bias at `INIT_LOGVAR`.
    #[default]
    Random,
    /// Exact pass-through for non-negative features; needs
    /// `latent_dim == hidden_dim == feature_dim`.
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    pub d: usize,
    /// `0` means "same as the feature width at `d`".
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub init: AdapterInit,
    pub weights: LossWeights,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            d: 4,
            latent_dim: 0,
            hidden_dim: 0,
            init: AdapterInit::Random,
            weights: LossWeights::default(),
        }
    }
}

/// Initial log-variance bias for randomly initialized encoders.
pub const INIT_LOGVAR: f64 = -6.0;

fn dense(inputs: usize, outputs: usize, relu: bool) -> LayerSpec {
    LayerSpec::Dense {
        inputs,
        outputs,
        relu,
    }
}

fn eye(n: usize) -> Tensor {
    let mut t = Tensor::zeros(&[n, n]);
    for i in 0..n {
        t.data_mut()[i * n + i] = 1.0;
    }
    t
}

/// Encoder (dense + relu) with parallel mean and log-variance heads, and a
/// two-layer decoder back to the feature width.
#[derive(Clone, Debug, PartialEq)]
pub struct Vae {
    enc: LayerStack,
    mu: LayerStack,
    logvar: LayerStack,
    dec: LayerStack,
}

struct VaeSpecs {
    enc: Vec<LayerSpec>,
    mu: Vec<LayerSpec>,
    logvar: Vec<LayerSpec>,
    dec: Vec<LayerSpec>,
}

fn vae_specs(feature_dim: usize, latent_dim: usize, hidden_dim: usize) -> VaeSpecs {
    VaeSpecs {
        enc: vec![dense(feature_dim, hidden_dim, true)],
        mu: vec![dense(hidden_dim, latent_dim, false)],
        logvar: vec![dense(hidden_dim, latent_dim, false)],
        dec: vec![dense(latent_dim, hidden_dim, true), dense(hidden_dim, feature_dim, false)],
    }
}

impl Vae {
    pub fn init(feature_dim: usize, latent_dim: usize, hidden_dim: usize, prefix: &str, rng: &mut Rng) -> Self {
        let s = vae_specs(feature_dim, latent_dim, hidden_dim);
        let mut logvar = LayerStack::init(s.logvar, &format!("{prefix}.logvar"), rng);
        logvar.params_mut()[1] = Tensor::full(&[latent_dim], INIT_LOGVAR);
        Vae {
            enc: LayerStack::init(s.enc, &format!("{prefix}.enc"), rng),
            mu: LayerStack::init(s.mu, &format!("{prefix}.mu"), rng),
            logvar,
            dec: LayerStack::init(s.dec, &format!("{prefix}.dec"), rng),
        }
    }

    /// Identity weights throughout and log-variance fixed at -40, so the mean path and
    /// (to within `exp(-20)`) the sampled path return non-negative inputs unchanged.
    pub fn pass_through(feature_dim: usize, prefix: &str) -> Self {
        let n = feature_dim;
        let s = vae_specs(n, n, n);
        let id = |specs: Vec<LayerSpec>, p: &str| {
            let params = specs.iter().flat_map(|_| [eye(n), Tensor::zeros(&[n])]).collect();
            LayerStack::with_params(specs, params, &format!("{prefix}.{p}")).expect("square layers")
        };
        let logvar = LayerStack::with_params(
            s.logvar,
            vec![Tensor::zeros(&[n, n]), Tensor::full(&[n], -40.0)],
            &format!("{prefix}.logvar"),
        )
        .expect("square layer");
        Vae {
            enc: id(s.enc, "enc"),
            mu: id(s.mu, "mu"),
            logvar,
            dec: id(s.dec, "dec"),
        }
    }

    fn from_params(feature_dim: usize, latent_dim: usize, hidden_dim: usize, prefix: &str, params: &mut std::vec::IntoIter<Tensor>) -> Result<Self> {
        let s = vae_specs(feature_dim, latent_dim, hidden_dim);
        let mut take = |specs: Vec<LayerSpec>, p: &str| {
            let n = specs.len() * 2;
            let ts: Vec<Tensor> = params.by_ref().take(n).collect();
            LayerStack::with_params(specs, ts, &format!("{prefix}.{p}"))
        };
        Ok(Vae {
            enc: take(s.enc, "enc")?,
            mu: take(s.mu, "mu")?,
            logvar: take(s.logvar, "logvar")?,
            dec: take(s.dec, "dec")?,
        })
    }

    fn stacks(&self) -> [&LayerStack; 4] {
        [&self.enc, &self.mu, &self.logvar, &self.dec]
    }

    fn stacks_mut(&mut self) -> [&mut LayerStack; 4] {
        [&mut self.enc, &mut self.mu, &mut self.logvar, &mut self.dec]
    }

    pub fn param_count(&self) -> usize {
        self.stacks().iter().map(|s| s.param_count()).sum()
    }

    fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<Vec<BoundStack>> {
        self.stacks().iter().map(|s| s.bind(tape, trainable)).collect()
    }

    /// Returns `(sample, mu, logvar)`; with `rng = None` the sample is `mu`.
    fn encode(&self, tape: &mut Tape, b: &[BoundStack], x: Var, rng: Option<&mut Rng>) -> Result<(Var, Var, Var)> {
        let h = self.enc.forward(tape, &b[0], x, 0, 1)?;
        let mu = self.mu.forward(tape, &b[1], h, 0, 1)?;
        let lv = self.logvar.forward(tape, &b[2], h, 0, 1)?;
        let z = match rng {
            Some(r) => reparameterize(tape, mu, lv, r)?,
            None => mu,
        };
        Ok((z, mu, lv))
    }

    fn decode(&self, tape: &mut Tape, b: &[BoundStack], z: Var) -> Result<Var> {
        self.dec.forward(tape, &b[3], z, 0, 2)
    }

    /// Deterministic (mean-path) reconstruction of a feature batch.
    pub fn transform(&self, z_d: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false)?;
        let x = tape.constant(z_d.clone())?;
        let (z, _, _) = self.encode(&mut tape, &b, x, None)?;
        let out = self.decode(&mut tape, &b, z)?;
        tape.value(out).clone().reshape(z_d.shape().to_vec())
    }
}

/// Full training-time adapter.
#[derive(Clone, Debug, PartialEq)]
pub struct RfaModule {
    d: usize,
    feature_dim: usize,
    latent_dim: usize,
    hidden_dim: usize,
    pub vae_r: Vae,
    pub vae_n: Vae,
    pub head_r: LayerStack,
    pub head_n: LayerStack,
    pub lineage: Lineage,
}

/// Tape handles for every adapter parameter.
pub struct RfaBound {
    vae_r: Vec<BoundStack>,
    vae_n: Vec<BoundStack>,
    head_r: BoundStack,
    head_n: BoundStack,
}

/// Tape outputs of [`rfa_forward`].
#[derive(Clone, Copy, Debug)]
pub struct RfaOutputs {
    pub z_r: Var,
    pub z_n: Var,
    pub mu_r: Var,
    pub logvar_r: Var,
    pub mu_n: Var,
    pub logvar_n: Var,
}

impl RfaModule {
    pub fn new(backbone: &SplitNet, config: &AdapterConfig, seed: u64) -> Result<Self> {
        let d = config.d;
        let feature_dim = backbone.feature_dim(d)?;
        let head_r = backbone.duplicate_tail(d, "head_r.")?;
        let head_n = backbone.duplicate_tail(d, "head_n.")?;
        let or = |v: usize| if v == 0 { feature_dim } else { v };
        let (latent_dim, hidden_dim) = (or(config.latent_dim), or(config.hidden_dim));
        let (vae_r, vae_n) = match config.init {
            AdapterInit::Random => {
                let mut rng = Rng::new(seed).split("adapter-init");
                let r = Vae::init(feature_dim, latent_dim, hidden_dim, "vae_r", &mut rng);
                let n = Vae::init(feature_dim, latent_dim, hidden_dim, "vae_n", &mut rng);
                (r, n)
            }
            AdapterInit::Identity => {
                if latent_dim != feature_dim || hidden_dim != feature_dim {
                    return Err(RfaError::InvalidArgument(format!(
                        "identity init needs latent_dim = hidden_dim = {feature_dim}"
                    )));
                }
                (Vae::pass_through(feature_dim, "vae_r"), Vae::pass_through(feature_dim, "vae_n"))
            }
        };
        Ok(RfaModule {
            d,
            feature_dim,
            latent_dim,
            hidden_dim,
            vae_r,
            vae_n,
            head_r,
            head_n,
            lineage: Lineage {
                seeds: vec![seed],
                epoch: 0,
            },
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    /// All parameter stacks in a fixed order (`vae_r`, `vae_n`, `head_r`, `head_n`).
    pub fn stacks(&self) -> Vec<&LayerStack> {
        let mut v: Vec<&LayerStack> = self.vae_r.stacks().into_iter().collect();
        v.extend(self.vae_n.stacks());
        v.push(&self.head_r);
        v.push(&self.head_n);
        v
    }

    pub fn stacks_mut(&mut self) -> Vec<&mut LayerStack> {
        let mut v: Vec<&mut LayerStack> = self.vae_r.stacks_mut().into_iter().collect();
        v.extend(self.vae_n.stacks_mut());
        v.push(&mut self.head_r);
        v.push(&mut self.head_n);
        v
    }

    pub fn param_count(&self) -> usize {
        self.stacks().iter().map(|s| s.param_count()).sum()
    }

    pub fn checksum(&self) -> u64 {
        self.stacks()
            .iter()
            .fold(0u64, |h, s| h.rotate_left(11) ^ s.checksum())
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<RfaBound> {
        Ok(RfaBound {
            vae_r: self.vae_r.bind(tape, trainable)?,
            vae_n: self.vae_n.bind(tape, trainable)?,
            head_r: self.head_r.bind(tape, trainable)?,
            head_n: self.head_n.bind(tape, trainable)?,
        })
    }

    /// Gradients for every parameter, in [`RfaModule::stacks`] order, flattened per tensor.
    pub fn collect_grads(&self, bound: &RfaBound, grads: &Gradients) -> Vec<Tensor> {
        let mut out = Vec::new();
        let bs = bound.vae_r.iter().chain(&bound.vae_n).chain([&bound.head_r, &bound.head_n]);
        for (stack, b) in self.stacks().into_iter().zip(bs) {
            for (p, v) in stack.params().iter().zip(&b.vars) {
                out.push(grads.get_or_zeros(*v, p));
            }
        }
        out
    }

    pub fn head_logits(&self, tape: &mut Tape, bound: &RfaBound, z: Var, robust: bool) -> Result<Var> {
        let (stack, b) = if robust {
            (&self.head_r, &bound.head_r)
        } else {
            (&self.head_n, &bound.head_n)
        };
        stack.forward(tape, b, z, 0, stack.num_layers())
    }

    pub fn strip_to_inference(&self) -> RfaInference {
        RfaInference {
            d: self.d,
            feature_dim: self.feature_dim,
            latent_dim: self.latent_dim,
            hidden_dim: self.hidden_dim,
            vae_r: self.vae_r.clone(),
            lineage: self.lineage.clone(),
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            meta: CheckpointMeta {
                architecture: Architecture::Rfa {
                    d: self.d,
                    feature_dim: self.feature_dim,
                    latent_dim: self.latent_dim,
                    hidden_dim: self.hidden_dim,
                    tail: self.head_r.specs().to_vec(),
                },
                num_splits: self.head_r.num_layers(),
                seed_lineage: self.lineage.seeds.clone(),
                epoch: self.lineage.epoch,
            },
            params: named_params(&self.stacks()),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let Architecture::Rfa {
            d,
            feature_dim,
            latent_dim,
            hidden_dim,
            tail,
        } = ck.meta.architecture.clone()
        else {
            return Err(RfaError::UnknownArchitecture(format!(
                "expected RFA, found {}",
                ck.meta.architecture.name()
            )));
        };
        let (names, params): (Vec<String>, Vec<Tensor>) = ck.params.into_iter().unzip();
        let mut it = params.into_iter();
        let vae_r = Vae::from_params(feature_dim, latent_dim, hidden_dim, "vae_r", &mut it)?;
        let vae_n = Vae::from_params(feature_dim, latent_dim, hidden_dim, "vae_n", &mut it)?;
        let n = tail.len() * 2;
        let head_r = LayerStack::with_params(tail.clone(), it.by_ref().take(n).collect(), "head_r.")?;
        let head_n = LayerStack::with_params(tail, it.by_ref().take(n).collect(), "head_n.")?;
        let m = RfaModule {
            d,
            feature_dim,
            latent_dim,
            hidden_dim,
            vae_r,
            vae_n,
            head_r,
            head_n,
            lineage: Lineage {
                seeds: ck.meta.seed_lineage,
                epoch: ck.meta.epoch,
            },
        };
        check_names(&m.stacks(), &names)?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }
}

fn named_params(stacks: &[&LayerStack]) -> Vec<(String, Tensor)> {
    stacks
        .iter()
        .flat_map(|s| s.names().iter().cloned().zip(s.params().iter().cloned()))
        .collect()
}

fn check_names(stacks: &[&LayerStack], names: &[String]) -> Result<()> {
    let expected: Vec<&String> = stacks.iter().flat_map(|s| s.names()).collect();
    if expected.len() != names.len() || expected.iter().zip(names).any(|(a, b)| *a != b) {
        return Err(RfaError::Checkpoint("parameter names disagree with architecture".into()));
    }
    Ok(())
}

/// Checks that `z_d` has the adapter's feature width.
fn check_width(feature_dim: usize, z: &Tensor) -> Result<()> {
    if z.row_len() != feature_dim {
        return Err(RfaError::shape(
            "rfa_forward",
            format!("feature width {} but the adapter expects {feature_dim}", z.row_len()),
        ));
    }
    Ok(())
}

/// Runs both VAEs on `z_d`. With `rng = Some` latents are sampled, otherwise the mean
/// path is used. Outputs are reshaped to `z_d`'s shape.
pub fn rfa_forward(tape: &mut Tape, rfa: &RfaModule, bound: &RfaBound, z_d: Var, rng: Option<&mut Rng>) -> Result<RfaOutputs> {
    check_width(rfa.feature_dim, tape.value(z_d))?;
    let shape = tape.value(z_d).shape().to_vec();
    let (sr, mu_r, logvar_r, sn, mu_n, logvar_n) = match rng {
        Some(r) => {
            let (a, b, c) = rfa.vae_r.encode(tape, &bound.vae_r, z_d, Some(r))?;
            let (e, f, g) = rfa.vae_n.encode(tape, &bound.vae_n, z_d, Some(r))?;
            (a, b, c, e, f, g)
        }
        None => {
            let (a, b, c) = rfa.vae_r.encode(tape, &bound.vae_r, z_d, None)?;
            let (e, f, g) = rfa.vae_n.encode(tape, &bound.vae_n, z_d, None)?;
            (a, b, c, e, f, g)
        }
    };
    let z_r = rfa.vae_r.decode(tape, &bound.vae_r, sr)?;
    let z_r = tape.reshape(z_r, shape.clone())?;
    let z_n = rfa.vae_n.decode(tape, &bound.vae_n, sn)?;
    let z_n = tape.reshape(z_n, shape)?;
    Ok(RfaOutputs {
        z_r,
        z_n,
        mu_r,
        logvar_r,
        mu_n,
        logvar_n,
    })
}

/// `CE(head_r(z_R+), y) + CE(head_r(z_R-), y)`, batch means.
pub fn loss_cr(tape: &mut Tape, rfa: &RfaModule, bound: &RfaBound, plus: &RfaOutputs, minus: &RfaOutputs, y: &[usize]) -> Result<Var> {
    let lp = rfa.head_logits(tape, bound, plus.z_r, true)?;
    let lm = rfa.head_logits(tape, bound, minus.z_r, true)?;
    let a = tape.cross_entropy(lp, y)?;
    let b = tape.cross_entropy(lm, y)?;
    tape.add(a, b)
}

/// `CE(head_n(z_N+), y) + CE(head_n(z_N-), y_bar)`, batch means.
#[allow(clippy::too_many_arguments)]
pub fn loss_cn(
    tape: &mut Tape,
    rfa: &RfaModule,
    bound: &RfaBound,
    plus: &RfaOutputs,
    minus: &RfaOutputs,
    y: &[usize],
    y_bar: &[usize],
) -> Result<Var> {
    let lp = rfa.head_logits(tape, bound, plus.z_n, false)?;
    let lm = rfa.head_logits(tape, bound, minus.z_n, false)?;
    let a = tape.cross_entropy(lp, y)?;
    let b = tape.cross_entropy(lm, y_bar)?;
    tape.add(a, b)
}

/// Erroneous labels for the non-robust head: the backbone's adversarial argmax, or
/// the runner-up class where the attack failed to change the prediction away from `y`.
pub fn wrong_labels(adv_logits: &Tensor, y: &[usize]) -> Vec<usize> {
    (0..adv_logits.rows())
        .map(|i| {
            let row = adv_logits.row(i);
            let top = argmax(row);
            if top != y[i] {
                return top;
            }
            let mut best: Option<usize> = None;
            for (j, v) in row.iter().enumerate() {
                if j != top && best.is_none_or(|b| *v > row[b]) {
                    best = Some(j);
                }
            }
            best.unwrap_or(top)
        })
        .collect()
}

/// `mean_i max(|a_i - p_i|^2 / D - |a_i - n_i|^2 / D + tau, 0)`.
pub fn triplet(tape: &mut Tape, a: Var, p: Var, n: Var, tau: f64) -> Result<Var> {
    let dim = tape.value(a).row_len().max(1) as f64;
    let dap = tape.sq_dist(a, p)?;
    let dan = tape.sq_dist(a, n)?;
    let diff = tape.sub(dap, dan)?;
    let diff = tape.scale(diff, 1.0 / dim)?;
    let shifted = tape.add_scalar(diff, tau)?;
    let hinge = tape.relu(shifted)?;
    tape.mean(hinge)
}

/// `Tp(z_R+, z_R-, z_N+) + Tp(z_R+, z_R-, z_N-)`.
pub fn loss_tp(tape: &mut Tape, plus: &RfaOutputs, minus: &RfaOutputs, tau: f64) -> Result<Var> {
    let a = triplet(tape, plus.z_r, minus.z_r, plus.z_n, tau)?;
    let b = triplet(tape, plus.z_r, minus.z_r, minus.z_n, tau)?;
    tape.add(a, b)
}

/// Gaussian KL to the unit prior, summed over latent units and averaged over the batch.
pub fn kl_term(tape: &mut Tape, mu: Var, logvar: Var) -> Result<Var> {
    let n = tape.value(mu).rows().max(1) as f64;
    let ev = tape.exp(logvar)?;
    let m2 = tape.mul(mu, mu)?;
    let s = tape.add(ev, m2)?;
    let s = tape.sub(s, logvar)?;
    let s = tape.add_scalar(s, -1.0)?;
    let total = tape.sum(s)?;
    tape.scale(total, 0.5 / n)
}

/// KL of all four latent posteriors (both VAEs, clean and adversarial).
pub fn loss_kl(tape: &mut Tape, plus: &RfaOutputs, minus: &RfaOutputs) -> Result<Var> {
    let mut acc = kl_term(tape, plus.mu_r, plus.logvar_r)?;
    for (m, l) in [
        (plus.mu_n, plus.logvar_n),
        (minus.mu_r, minus.logvar_r),
        (minus.mu_n, minus.logvar_n),
    ] {
        let k = kl_term(tape, m, l)?;
        acc = tape.add(acc, k)?;
    }
    Ok(acc)
}

/// Scalar terms recorded next to the combined objective.
pub struct ObjectiveParts {
    pub total: Var,
    pub components: LossComponents,
}

/// Adapter objective on paired clean/adversarial features. `backbone_ce` switches to
/// the joint objective, which drops `L_CN` and adds `lambda_b * L_B`.
#[allow(clippy::too_many_arguments)]
pub fn adapter_objective(
    tape: &mut Tape,
    rfa: &RfaModule,
    bound: &RfaBound,
    w: &LossWeights,
    z_plus: Var,
    z_minus: Var,
    y: &[usize],
    y_bar: &[usize],
    backbone_ce: Option<Var>,
    rng: &mut Rng,
) -> Result<ObjectiveParts> {
    let plus = rfa_forward(tape, rfa, bound, z_plus, Some(rng))?;
    let minus = rfa_forward(tape, rfa, bound, z_minus, Some(rng))?;
    let cr = loss_cr(tape, rfa, bound, &plus, &minus, y)?;
    let tp = loss_tp(tape, &plus, &minus, w.tau)?;
    let mut c = LossComponents {
        cr: tape.value(cr).item(),
        tp: tape.value(tp).item(),
        ..Default::default()
    };
    let wtp = tape.scale(tp, w.lambda_tp)?;
    let mut total = tape.add(cr, wtp)?;
    match backbone_ce {
        None => {
            let cn = loss_cn(tape, rfa, bound, &plus, &minus, y, y_bar)?;
            c.cn = tape.value(cn).item();
            let wcn = tape.scale(cn, w.lambda_cn)?;
            total = tape.add(total, wcn)?;
        }
        Some(b) => {
            c.b = tape.value(b).item();
            let wb = tape.scale(b, w.lambda_b)?;
            total = tape.add(total, wb)?;
        }
    }
    if w.lambda_kl > 0.0 {
        let kl = loss_kl(tape, &plus, &minus)?;
        c.kl = tape.value(kl).item();
        let wkl = tape.scale(kl, w.lambda_kl)?;
        total = tape.add(total, wkl)?;
    }
    Ok(ObjectiveParts { total, components: c })
}

/// Inference plug-in: `VAE_R` on its mean path, followed by the frozen backbone tail.
#[derive(Clone, Debug, PartialEq)]
pub struct RfaInference {
    d: usize,
    feature_dim: usize,
    latent_dim: usize,
    hidden_dim: usize,
    pub vae_r: Vae,
    pub lineage: Lineage,
}

/// Softmax outputs of the plain backbone and of the adapter path.
#[derive(Clone, Debug, PartialEq)]
pub struct Distilled {
    pub y_hat: Tensor,
    pub y_hat_r: Tensor,
}

impl RfaInference {
    pub fn d(&self) -> usize {
        self.d
    }

    pub fn param_count(&self) -> usize {
        self.vae_r.param_count()
    }

    /// `VAE_R(z_d)` on the mean path.
    pub fn transform(&self, z_d: &Tensor) -> Result<Tensor> {
        check_width(self.feature_dim, z_d)?;
        self.vae_r.transform(z_d)
    }

    /// Robust logits `B_{d+}[VAE_R(z_d)]` from a feature batch at split `d`.
    pub fn robust_logits_from_features(&self, backbone: &SplitNet, z_d: &Tensor) -> Result<Tensor> {
        let zr = self.transform(z_d)?;
        backbone.forward_values(&zr, self.d, backbone.num_splits())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            meta: CheckpointMeta {
                architecture: Architecture::Rfai {
                    d: self.d,
                    feature_dim: self.feature_dim,
                    latent_dim: self.latent_dim,
                    hidden_dim: self.hidden_dim,
                },
                num_splits: 0,
                seed_lineage: self.lineage.seeds.clone(),
                epoch: self.lineage.epoch,
            },
            params: named_params(&self.vae_r.stacks()),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let Architecture::Rfai {
            d,
            feature_dim,
            latent_dim,
            hidden_dim,
        } = ck.meta.architecture
        else {
            return Err(RfaError::UnknownArchitecture(format!(
                "expected RFAI, found {}",
                ck.meta.architecture.name()
            )));
        };
        let (names, params): (Vec<String>, Vec<Tensor>) = ck.params.into_iter().unzip();
        let vae_r = Vae::from_params(feature_dim, latent_dim, hidden_dim, "vae_r", &mut params.into_iter())?;
        check_names(&vae_r.stacks(), &names)?;
        Ok(RfaInference {
            d,
            feature_dim,
            latent_dim,
            hidden_dim,
            vae_r,
            lineage: Lineage {
                seeds: ck.meta.seed_lineage,
                epoch: ck.meta.epoch,
            },
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }
}

/// Value-only `(z_R, z_N)` for a feature batch; sampled when `rng` is given.
pub fn adapter_outputs(rfa: &RfaModule, z_d: &Tensor, rng: Option<&mut Rng>) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let b = rfa.bind(&mut tape, false)?;
    let z = tape.constant(z_d.clone())?;
    let o = rfa_forward(&mut tape, rfa, &b, z, rng)?;
    Ok((tape.value(o.z_r).clone(), tape.value(o.z_n).clone()))
}

/// Logits of `head_r` (`robust = true`) or `head_n` on an adapter output batch.
pub fn head_logits_values(rfa: &RfaModule, z: &Tensor, robust: bool) -> Result<Tensor> {
    let mut tape = Tape::new();
    let b = rfa.bind(&mut tape, false)?;
    let zv = tape.constant(z.clone())?;
    let out = rfa.head_logits(&mut tape, &b, zv, robust)?;
    Ok(tape.value(out).clone())
}

/// Backbone prediction `y_hat` and adapter prediction `y_hat_R` for inputs `x`.
pub fn distill_infer(rfa_i: &RfaInference, backbone: &SplitNet, x: &Tensor) -> Result<Distilled> {
    let l = backbone.num_splits();
    if rfa_i.d == 0 || rfa_i.d >= l {
        return Err(RfaError::SplitIndex(format!("adapter split {} outside (0, {l})", rfa_i.d)));
    }
    let z_d = backbone.forward_values(x, 0, rfa_i.d)?;
    let logits = backbone.forward_values(&z_d, rfa_i.d, l)?;
    let robust = rfa_i.robust_logits_from_features(backbone, &z_d)?;
    Ok(Distilled {
        y_hat: softmax_rows(&logits),
        y_hat_r: softmax_rows(&robust),
    })
}
