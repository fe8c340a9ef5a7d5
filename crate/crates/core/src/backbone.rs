//! Split-indexable backbone networks and the `RFA1` checkpoint format.
//!
//! A network is a flat list of layers. Split index `g` names the output of the
//! first `g` layers, so `forward_slice(x, 0, g)` is the feature `z_g` and
//! `forward_slice(z_g, g, L)` finishes the pass to logits.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, RfaError};
use crate::numcore::{softmax_rows, Rng, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
        relu: bool,
    },
    /// 3x3 kernel, zero padding 1.
    Conv {
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        relu: bool,
    },
}

impl LayerSpec {
    fn param_shapes(&self) -> [Vec<usize>; 2] {
        match *self {
            LayerSpec::Dense {
                inputs, outputs, ..
            } => [vec![inputs, outputs], vec![outputs]],
            LayerSpec::Conv {
                in_channels,
                out_channels,
                ..
            } => [vec![out_channels, in_channels, 3, 3], vec![out_channels]],
        }
    }

    fn fan_in(&self) -> usize {
        match *self {
            LayerSpec::Dense { inputs, .. } => inputs,
            LayerSpec::Conv { in_channels, .. } => in_channels * 9,
        }
    }

    fn relu(&self) -> bool {
        match *self {
            LayerSpec::Dense { relu, .. } | LayerSpec::Conv { relu, .. } => relu,
        }
    }
}

/// Ordered layers with their weights and biases.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerStack {
    specs: Vec<LayerSpec>,
    params: Vec<Tensor>,
    names: Vec<String>,
}

/// Tape variables for every parameter of a [`LayerStack`], in registry order.
#[derive(Clone, Debug)]
pub struct BoundStack {
    pub vars: Vec<Var>,
}

impl LayerStack {
    /// He-uniform weights, zero biases.
    pub fn init(specs: Vec<LayerSpec>, prefix: &str, rng: &mut Rng) -> Self {
        let mut params = Vec::with_capacity(specs.len() * 2);
        for spec in &specs {
            let [ws, bs] = spec.param_shapes();
            let bound = (6.0 / spec.fan_in() as f64).sqrt();
            params.push(rng.uniform_tensor(&ws, -bound, bound));
            params.push(Tensor::zeros(&bs));
        }
        Self::with_params(specs, params, prefix).expect("init shapes are consistent")
    }

    pub fn with_params(specs: Vec<LayerSpec>, params: Vec<Tensor>, prefix: &str) -> Result<Self> {
        if params.len() != specs.len() * 2 {
            return Err(RfaError::Checkpoint(format!(
                "{} layers need {} tensors, got {}",
                specs.len(),
                specs.len() * 2,
                params.len()
            )));
        }
        for (i, spec) in specs.iter().enumerate() {
            let [ws, bs] = spec.param_shapes();
            if params[2 * i].shape() != ws.as_slice() || params[2 * i + 1].shape() != bs.as_slice() {
                return Err(RfaError::Checkpoint(format!("layer {i} parameter shapes")));
            }
        }
        let names = (0..specs.len())
            .flat_map(|i| [format!("{prefix}{i}.weight"), format!("{prefix}{i}.bias")])
            .collect();
        Ok(LayerStack {
            specs,
            params,
            names,
        })
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn num_layers(&self) -> usize {
        self.specs.len()
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn checksum(&self) -> u64 {
        self.params
            .iter()
            .fold(0u64, |h, t| h.rotate_left(7) ^ t.checksum())
    }

    /// Copies layers `[from, to)` into an independent stack.
    pub fn slice(&self, from: usize, to: usize, prefix: &str) -> Result<LayerStack> {
        LayerStack::with_params(
            self.specs[from..to].to_vec(),
            self.params[2 * from..2 * to].to_vec(),
            prefix,
        )
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<BoundStack> {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    tape.leaf(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect::<Result<_>>()?;
        Ok(BoundStack { vars })
    }

    /// Applies layers `[from, to)`.
    pub fn forward(&self, tape: &mut Tape, bound: &BoundStack, x: Var, from: usize, to: usize) -> Result<Var> {
        let mut h = x;
        for i in from..to {
            let (w, b) = (bound.vars[2 * i], bound.vars[2 * i + 1]);
            let spec = self.specs[i];
            h = match spec {
                LayerSpec::Dense { .. } => tape.affine(h, w, b)?,
                LayerSpec::Conv { stride, .. } => tape.conv2d(h, w, b, stride)?,
            };
            if spec.relu() {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    pub fn forward_values(&self, x: &Tensor, from: usize, to: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false)?;
        let xv = tape.constant(x.clone())?;
        let out = self.forward(&mut tape, &bound, xv, from, to)?;
        Ok(tape.value(out).clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum Architecture {
    RefNetD {
        input_dim: usize,
        num_classes: usize,
    },
    RefNetC {
        channels: usize,
        height: usize,
        width: usize,
        num_classes: usize,
    },
    #[serde(rename = "RFA")]
    Rfa {
        d: usize,
        feature_dim: usize,
        latent_dim: usize,
        hidden_dim: usize,
        tail: Vec<LayerSpec>,
    },
    #[serde(rename = "RFAI")]
    Rfai {
        d: usize,
        feature_dim: usize,
        latent_dim: usize,
        hidden_dim: usize,
    },
}

impl Architecture {
    pub fn name(&self) -> &'static str {
        match self {
            Architecture::RefNetD { .. } => "RefNetD",
            Architecture::RefNetC { .. } => "RefNetC",
            Architecture::Rfa { .. } => "RFA",
            Architecture::Rfai { .. } => "RFAI",
        }
    }

    /// Layer list of a backbone architecture.
    pub fn backbone_layers(&self) -> Result<Vec<LayerSpec>> {
        let dense_tail = |input: usize, classes: usize| {
            let widths = [input, 256, 128, 64, 64];
            let mut v: Vec<LayerSpec> = widths
                .windows(2)
                .map(|w| LayerSpec::Dense {
                    inputs: w[0],
                    outputs: w[1],
                    relu: true,
                })
                .collect();
            v.push(LayerSpec::Dense {
                inputs: 64,
                outputs: classes,
                relu: false,
            });
            v
        };
        match *self {
            Architecture::RefNetD {
                input_dim,
                num_classes,
            } => Ok(dense_tail(input_dim, num_classes)),
            Architecture::RefNetC {
                channels,
                height,
                width,
                num_classes,
            } => {
                let (h1, w1) = ((height - 1) / 2 + 1, (width - 1) / 2 + 1);
                let (h2, w2) = ((h1 - 1) / 2 + 1, (w1 - 1) / 2 + 1);
                let mut v = vec![
                    LayerSpec::Conv {
                        in_channels: channels,
                        out_channels: 8,
                        stride: 2,
                        relu: true,
                    },
                    LayerSpec::Conv {
                        in_channels: 8,
                        out_channels: 16,
                        stride: 2,
                        relu: true,
                    },
                ];
                v.extend(dense_tail(16 * h2 * w2, num_classes));
                Ok(v)
            }
            _ => Err(RfaError::UnknownArchitecture(format!(
                "{} is not a backbone",
                self.name()
            ))),
        }
    }
}

/// Which seeds produced a set of weights, and at which epoch they were saved.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Lineage {
    pub seeds: Vec<u64>,
    pub epoch: usize,
}

/// Backbone `B` with split points `0..=L`.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitNet {
    arch: Architecture,
    stack: LayerStack,
    pub lineage: Lineage,
}

impl SplitNet {
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        let specs = arch.backbone_layers()?;
        let mut rng = Rng::new(seed).split("backbone-init");
        Ok(SplitNet {
            arch,
            stack: LayerStack::init(specs, "layer", &mut rng),
            lineage: Lineage {
                seeds: vec![seed],
                epoch: 0,
            },
        })
    }

    /// Dense reference network `input_dim -> 256 -> 128 -> 64 -> 64 -> num_classes`.
    pub fn ref_net_d(input_dim: usize, num_classes: usize, seed: u64) -> Result<Self> {
        Self::new(
            Architecture::RefNetD {
                input_dim,
                num_classes,
            },
            seed,
        )
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn num_splits(&self) -> usize {
        self.stack.num_layers()
    }

    pub fn num_classes(&self) -> usize {
        match self.stack.specs().last() {
            Some(LayerSpec::Dense { outputs, .. }) => *outputs,
            Some(LayerSpec::Conv { out_channels, .. }) => *out_channels,
            None => 0,
        }
    }

    pub fn stack(&self) -> &LayerStack {
        &self.stack
    }

    pub fn stack_mut(&mut self) -> &mut LayerStack {
        &mut self.stack
    }

    pub fn checksum(&self) -> u64 {
        self.stack.checksum()
    }

    /// Flattened width of the feature at split `g` (for `g >= 1`).
    pub fn feature_dim(&self, g: usize) -> Result<usize> {
        self.check_split(0, g)?;
        let probe = Tensor::zeros(&self.input_shape_for_probe());
        Ok(self.stack.forward_values(&probe, 0, g)?.row_len())
    }

    fn input_shape_for_probe(&self) -> Vec<usize> {
        match self.arch {
            Architecture::RefNetC {
                channels,
                height,
                width,
                ..
            } => vec![1, channels, height, width],
            Architecture::RefNetD { input_dim, .. } => vec![1, input_dim],
            _ => vec![1, 1],
        }
    }

    fn check_split(&self, from: usize, to: usize) -> Result<()> {
        let l = self.num_splits();
        if from >= to || to > l {
            return Err(RfaError::SplitIndex(format!(
                "need 0 <= from < to <= {l}, got [{from}, {to})"
            )));
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<BoundStack> {
        self.stack.bind(tape, trainable)
    }

    /// Runs layers `[from, to)` on the tape.
    pub fn forward_slice(&self, tape: &mut Tape, bound: &BoundStack, x: Var, from: usize, to: usize) -> Result<Var> {
        self.check_split(from, to)?;
        self.stack.forward(tape, bound, x, from, to)
    }

    /// Value-only pass over layers `[from, to)`.
    pub fn forward_values(&self, x: &Tensor, from: usize, to: usize) -> Result<Tensor> {
        self.check_split(from, to)?;
        self.stack.forward_values(x, from, to)
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_values(x, 0, self.num_splits())
    }

    /// Argmax labels (ties to the lower class) and softmax probabilities.
    pub fn predict(&self, x: &Tensor) -> Result<(Vec<usize>, Tensor)> {
        let logits = self.logits(x)?;
        Ok((logits.argmax_rows(), softmax_rows(&logits)))
    }

    /// Independent trainable copy of layers `[d, L)`.
    pub fn duplicate_tail(&self, d: usize, prefix: &str) -> Result<LayerStack> {
        let l = self.num_splits();
        if d == 0 || d >= l {
            return Err(RfaError::SplitIndex(format!("tail split {d} outside (0, {l})")));
        }
        self.stack.slice(d, l, prefix)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            meta: CheckpointMeta {
                architecture: self.arch.clone(),
                num_splits: self.num_splits(),
                seed_lineage: self.lineage.seeds.clone(),
                epoch: self.lineage.epoch,
            },
            params: self
                .stack
                .names()
                .iter()
                .cloned()
                .zip(self.stack.params().iter().cloned())
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let specs = ck.meta.architecture.backbone_layers()?;
        if specs.len() != ck.meta.num_splits {
            return Err(RfaError::Checkpoint("num_splits disagrees with architecture".into()));
        }
        let (names, params): (Vec<String>, Vec<Tensor>) = ck.params.into_iter().unzip();
        let stack = LayerStack::with_params(specs, params, "layer")?;
        if stack.names() != names.as_slice() {
            return Err(RfaError::Checkpoint("parameter names disagree with architecture".into()));
        }
        Ok(SplitNet {
            arch: ck.meta.architecture,
            stack,
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

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub architecture: Architecture,
    pub num_splits: usize,
    pub seed_lineage: Vec<u64>,
    pub epoch: usize,
}

/// In-memory form of an `RFA1` file.
///
/// Layout (integers little-endian):
/// `"RFA1"`, `u32` metadata length, metadata JSON, `u32` tensor count, then per
/// tensor `u32` name length, name, `u32` rank, `u64` extents, `f64` values.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: Vec<(String, Tensor)>,
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RFA1";

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.at..end];
                self.at = end;
                Ok(s)
            }
            None => Err(RfaError::Checkpoint("truncated tensor payload".into())),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(RfaError::Checkpoint("bad magic".into()));
        }
        let mut r = Reader { bytes, at: 4 };
        let meta_len = r.u32()? as usize;
        let meta_raw = r.take(meta_len)?;
        let value: serde_json::Value = serde_json::from_slice(meta_raw)
            .map_err(|e| RfaError::Checkpoint(format!("metadata: {e}")))?;
        let kind = value
            .get("architecture")
            .and_then(|a| a.get("kind"))
            .and_then(|k| k.as_str())
            .unwrap_or("<missing>")
            .to_string();
        let meta: CheckpointMeta =
            serde_json::from_value(value).map_err(|_| RfaError::UnknownArchitecture(kind))?;
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec())
                .map_err(|_| RfaError::Checkpoint("parameter name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(8).ok_or_else(|| RfaError::Checkpoint("tensor too large".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            params.push((name, Tensor::new(shape, data)?));
        }
        if r.at != bytes.len() {
            return Err(RfaError::Checkpoint("trailing bytes after last tensor".into()));
        }
        Ok(Checkpoint { meta, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| RfaError::io(path, e))?;
        f.write_all(&bytes).map_err(|e| RfaError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| RfaError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn net() -> SplitNet {
        SplitNet::ref_net_d(12, 3, 5).unwrap()
    }

    fn input(n: usize) -> Tensor {
        Rng::new(2).uniform_tensor(&[n, 1, 1, 12], 0.0, 1.0)
    }

    #[test]
    fn slice_composition_is_exact() {
        let net = net();
        let x = input(4);
        let full = net.logits(&x).unwrap();
        for g in 1..net.num_splits() {
            let z = net.forward_values(&x, 0, g).unwrap();
            assert_eq!(net.forward_values(&z, g, 5).unwrap(), full);
        }
    }

    #[test]
    fn slice_bounds() {
        let net = net();
        assert!(net.forward_values(&input(1), 2, 2).is_err());
        assert!(net.forward_values(&input(1), 0, 6).is_err());
        let big = SplitNet::ref_net_d(784, 10, 0).unwrap();
        assert_eq!(big.feature_dim(1).unwrap(), 256);
    }

    #[test]
    fn predict_tie_rule_and_normalization() {
        let t = Tensor::from_rows(&[vec![2.0, 2.0]]).unwrap();
        assert_eq!(t.argmax_rows(), vec![0]);
        let (_, probs) = net().predict(&input(5)).unwrap();
        for i in 0..5 {
            assert!((probs.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn tail_duplicate_matches_then_diverges() {
        let net = net();
        let z = net.forward_values(&input(3), 0, 3).unwrap();
        let mut head = net.duplicate_tail(3, "head_r.").unwrap();
        let other = net.duplicate_tail(3, "head_n.").unwrap();
        assert_eq!(head.forward_values(&z, 0, 2).unwrap(), net.forward_values(&z, 3, 5).unwrap());
        let before = net.checksum();
        head.params_mut()[0].data_mut()[0] += 1.0;
        assert_eq!(net.checksum(), before);
        assert_ne!(head.params()[0], other.params()[0]);
        assert!(net.duplicate_tail(0, "x").is_err());
        assert!(net.duplicate_tail(5, "x").is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = net();
        let bytes = net.to_checkpoint().to_bytes().unwrap();
        let back = SplitNet::from_checkpoint(Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, net);
        assert_eq!(back.to_checkpoint().to_bytes().unwrap(), bytes);
        assert_eq!(back.logits(&input(2)).unwrap(), net.logits(&input(2)).unwrap());
    }

    #[test]
    fn checkpoint_corruption() {
        let bytes = net().to_checkpoint().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(RfaError::Checkpoint(_))));
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(err.to_string().contains("truncated"));
        let s = String::from_utf8_lossy(&bytes).replace("RefNetD", "RefNetZ");
        let err = Checkpoint::from_bytes(s.as_bytes()).unwrap_err();
        assert!(matches!(err, RfaError::UnknownArchitecture(_)), "{err}");
    }

    #[test]
    fn conv_net_runs() {
        let net = SplitNet::new(
            Architecture::RefNetC {
                channels: 1,
                height: 8,
                width: 8,
                num_classes: 4,
            },
            1,
        )
        .unwrap();
        assert_eq!(net.num_splits(), 7);
        let x = Rng::new(0).uniform_tensor(&[2, 1, 8, 8], 0.0, 1.0);
        assert_eq!(net.logits(&x).unwrap().shape(), &[2, 4]);
        assert_eq!(net.feature_dim(2).unwrap(), 16 * 2 * 2);
    }
}
