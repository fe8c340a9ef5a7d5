//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value and whatever it
//! needs for the backward pass. Nodes only ever reference earlier nodes, so a
//! reverse sweep over the node list is a valid topological order.

use std::sync::atomic::{AtomicU64, Ordering};

use super::tensor::{softmax_rows, Tensor};
use crate::error::{Result, RfaError};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.idx
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Affine { x: usize, w: usize, b: usize },
    Conv2d { x: usize, w: usize, b: usize, stride: usize },
    Reshape(usize),
    Relu(usize),
    Sigmoid(usize),
    Exp(usize),
    Abs(usize),
    Sign,
    Clamp { x: usize, lo: f64, hi: f64 },
    Sum(usize),
    Mean(usize),
    NormL1(usize),
    NormL2(usize),
    NormLinf(usize),
    Softmax(usize),
    CrossEntropy { logits: usize, labels: Vec<usize>, probs: Vec<f64>, mean: bool },
    BceWithLogits { logits: usize, targets: Vec<f64> },
    SqDist(usize, usize),
    Concat(usize, usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records primitive operations for one forward pass.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar seed with respect to every reachable differentiable leaf.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.idx).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` was unreachable.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get_mut(v.idx).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(RfaError::ForeignVar);
        }
        Ok(v.idx)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        value.ensure_finite(name)?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        })
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, true, "leaf")
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, false, "constant")
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.idx].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.idx].requires_grad
    }

    fn binary_same(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (self.nodes[ia].value.shape(), self.nodes[ib].value.shape());
        if sa != sb {
            return Err(RfaError::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok((ia, ib))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = self.binary_same("add", a, b)?;
        let v = self.nodes[ia].value.zip_map(&self.nodes[ib].value, |x, y| x + y)?;
        let rg = self.rg(ia) || self.rg(ib);
        self.push(v, Op::Add(ia, ib), rg, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = self.binary_same("sub", a, b)?;
        let v = self.nodes[ia].value.zip_map(&self.nodes[ib].value, |x, y| x - y)?;
        let rg = self.rg(ia) || self.rg(ib);
        self.push(v, Op::Sub(ia, ib), rg, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = self.binary_same("mul", a, b)?;
        let v = self.nodes[ia].value.zip_map(&self.nodes[ib].value, |x, y| x * y)?;
        let rg = self.rg(ia) || self.rg(ib);
        self.push(v, Op::Mul(ia, ib), rg, "mul")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ia = self.check(a)?;
        let v = self.nodes[ia].value.map(|x| x * c);
        self.push(v, Op::Scale(ia, c), self.rg(ia), "scale")
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let ia = self.check(a)?;
        let v = self.nodes[ia].value.map(|x| x + c);
        self.push(v, Op::AddScalar(ia), self.rg(ia), "add_scalar")
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(RfaError::shape(
                "matmul",
                format!("{:?} x {:?}", ta.shape(), tb.shape()),
            ));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let out = gemm(ta.data(), tb.data(), m, k, n);
        let rg = self.rg(ia) || self.rg(ib);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(ia, ib), rg, "matmul")
    }

    /// Dense layer `x W + b`: `x` is flattened to `[n, in]`, `W` is `[in, out]`, `b` is `[out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (ix, iw, ib) = (self.check(x)?, self.check(w)?, self.check(b)?);
        let (tx, tw, tb) = (
            &self.nodes[ix].value,
            &self.nodes[iw].value,
            &self.nodes[ib].value,
        );
        let n = tx.rows();
        let fan_in = tx.row_len();
        if tx.rank() < 2 || tw.rank() != 2 || tw.shape()[0] != fan_in || tb.shape() != [tw.shape()[1]] {
            return Err(RfaError::shape(
                "affine",
                format!("x {:?}, w {:?}, b {:?}", tx.shape(), tw.shape(), tb.shape()),
            ));
        }
        let out = tw.shape()[1];
        let mut y = gemm(tx.data(), tw.data(), n, fan_in, out);
        for row in y.chunks_mut(out) {
            for (v, bias) in row.iter_mut().zip(tb.data()) {
                *v += bias;
            }
        }
        let rg = self.rg(ix) || self.rg(iw) || self.rg(ib);
        self.push(
            Tensor::new(vec![n, out], y)?,
            Op::Affine { x: ix, w: iw, b: ib },
            rg,
            "affine",
        )
    }

    /// 3x3 convolution with zero padding 1. `x: [n,c,h,w]`, `w: [oc,c,3,3]`, `b: [oc]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let (ix, iw, ib) = (self.check(x)?, self.check(w)?, self.check(b)?);
        let (tx, tw, tb) = (
            &self.nodes[ix].value,
            &self.nodes[iw].value,
            &self.nodes[ib].value,
        );
        if !(stride == 1 || stride == 2) {
            return Err(RfaError::shape("conv2d", format!("stride {stride}")));
        }
        if tx.rank() != 4
            || tw.rank() != 4
            || tw.shape()[1] != tx.shape()[1]
            || tw.shape()[2..] != [3, 3]
            || tb.shape() != [tw.shape()[0]]
        {
            return Err(RfaError::shape(
                "conv2d",
                format!("x {:?}, w {:?}, b {:?}", tx.shape(), tw.shape(), tb.shape()),
            ));
        }
        let g = ConvGeom::new(tx.shape(), tw.shape()[0], stride);
        let y = conv_forward(&g, tx.data(), tw.data(), tb.data());
        let rg = self.rg(ix) || self.rg(iw) || self.rg(ib);
        self.push(
            Tensor::new(vec![g.n, g.oc, g.ho, g.wo], y)?,
            Op::Conv2d {
                x: ix,
                w: iw,
                b: ib,
                stride,
            },
            rg,
            "conv2d",
        )
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let ia = self.check(a)?;
        let v = self.nodes[ia].value.clone().reshape(shape)?;
        self.push(v, Op::Reshape(ia), self.rg(ia), "reshape")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let v = self.nodes[ia].value.map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(v, Op::Relu(ia), self.rg(ia), "relu")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let v = self.nodes[ia].value.map(sigmoid);
        self.push(v, Op::Sigmoid(ia), self.rg(ia), "sigmoid")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let v = self.nodes[ia].value.map(f64::exp);
        self.push(v, Op::Exp(ia), self.rg(ia), "exp")
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let v = self.nodes[ia].value.map(f64::abs);
        self.push(v, Op::Abs(ia), self.rg(ia), "abs")
    }

    pub fn sign(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let v = self.nodes[ia].value.map(sign);
        self.push(v, Op::Sign, self.rg(ia), "sign")
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let ia = self.check(a)?;
        if lo > hi {
            return Err(RfaError::InvalidArgument(format!("clamp [{lo}, {hi}]")));
        }
        let v = self.nodes[ia].value.map(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp { x: ia, lo, hi }, self.rg(ia), "clamp")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let v = Tensor::scalar(self.nodes[ia].value.sum());
        self.push(v, Op::Sum(ia), self.rg(ia), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let t = &self.nodes[ia].value;
        if t.is_empty() {
            return Err(RfaError::shape("mean", "empty tensor"));
        }
        let v = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(v, Op::Mean(ia), self.rg(ia), "mean")
    }

    pub fn norm_l1(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let v = Tensor::scalar(self.nodes[ia].value.data().iter().map(|x| x.abs()).sum());
        self.push(v, Op::NormL1(ia), self.rg(ia), "norm_l1")
    }

    pub fn norm_l2(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let ss: f64 = self.nodes[ia].value.data().iter().map(|x| x * x).sum();
        self.push(Tensor::scalar(ss.sqrt()), Op::NormL2(ia), self.rg(ia), "norm_l2")
    }

    pub fn norm_linf(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let v = Tensor::scalar(self.nodes[ia].value.max_abs());
        self.push(v, Op::NormLinf(ia), self.rg(ia), "norm_linf")
    }

    /// Row-wise softmax over the trailing axis of a `[n, c]` tensor.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        if self.nodes[ia].value.rank() != 2 {
            return Err(RfaError::shape("softmax", "expected [n, c]"));
        }
        let v = softmax_rows(&self.nodes[ia].value);
        self.push(v, Op::Softmax(ia), self.rg(ia), "softmax")
    }

    /// Batch-mean cross-entropy of `[n, c]` logits.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.cross_entropy_impl(logits, labels, true)
    }

    /// Batch-summed cross-entropy; per-sample gradients come out unscaled.
    pub fn cross_entropy_sum(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.cross_entropy_impl(logits, labels, false)
    }

    fn cross_entropy_impl(&mut self, logits: Var, labels: &[usize], mean: bool) -> Result<Var> {
        let il = self.check(logits)?;
        let t = &self.nodes[il].value;
        if t.rank() != 2 || t.rows() != labels.len() || t.rows() == 0 {
            return Err(RfaError::shape(
                "cross_entropy",
                format!("logits {:?}, {} labels", t.shape(), labels.len()),
            ));
        }
        let c = t.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(RfaError::shape("cross_entropy", format!("label {bad} >= {c}")));
        }
        let probs = softmax_rows(t);
        let mut total = super::tensor::cross_entropy_rows(t, labels).iter().sum::<f64>();
        if mean {
            total /= labels.len() as f64;
        }
        self.push(
            Tensor::scalar(total),
            Op::CrossEntropy {
                logits: il,
                labels: labels.to_vec(),
                probs: probs.into_data(),
                mean,
            },
            self.rg(il),
            "cross_entropy",
        )
    }

    /// Batch-mean binary cross-entropy on raw logits of shape `[n]` or `[n, 1]`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let il = self.check(logits)?;
        let t = &self.nodes[il].value;
        if t.len() != targets.len() || t.is_empty() {
            return Err(RfaError::shape("bce_with_logits", "length mismatch"));
        }
        let total: f64 = t
            .data()
            .iter()
            .zip(targets)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum();
        self.push(
            Tensor::scalar(total / targets.len() as f64),
            Op::BceWithLogits {
                logits: il,
                targets: targets.to_vec(),
            },
            self.rg(il),
            "bce_with_logits",
        )
    }

    /// Per-row squared Euclidean distance of two `[n, ...]` tensors, giving `[n]`.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = self.binary_same("sq_dist", a, b)?;
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let d: Vec<f64> = (0..ta.rows())
            .map(|i| {
                ta.row(i)
                    .iter()
                    .zip(tb.row(i))
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum()
            })
            .collect();
        let rg = self.rg(ia) || self.rg(ib);
        self.push(Tensor::from_vec(d), Op::SqDist(ia, ib), rg, "sq_dist")
    }

    /// Concatenates two `[n, p]` and `[n, q]` tensors into `[n, p + q]`.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if ta.rank() != 2 || tb.rank() != 2 || ta.rows() != tb.rows() {
            return Err(RfaError::shape(
                "concat",
                format!("{:?} ++ {:?}", ta.shape(), tb.shape()),
            ));
        }
        let (p, q) = (ta.shape()[1], tb.shape()[1]);
        let mut data = Vec::with_capacity(ta.len() + tb.len());
        for i in 0..ta.rows() {
            data.extend_from_slice(ta.row(i));
            data.extend_from_slice(tb.row(i));
        }
        let v = Tensor::new(vec![ta.rows(), p + q], data)?;
        let rg = self.rg(ia) || self.rg(ib);
        self.push(v, Op::Concat(ia, ib), rg, "concat")
    }

    /// Reverse sweep from a scalar seed.
    pub fn backward(&self, seed: Var) -> Result<Gradients> {
        let is = self.check(seed)?;
        let st = &self.nodes[is].value;
        if st.len() != 1 {
            return Err(RfaError::NonScalarSeed(st.shape().to_vec()));
        }
        let mut acc: Vec<Option<Vec<f64>>> = vec![None; is + 1];
        let mut leaves: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        acc[is] = Some(vec![1.0]);

        for i in (0..=is).rev() {
            let Some(g) = acc[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    leaves[i] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut acc, *a, |s| axpy(s, &g, 1.0));
                    self.accumulate(&mut acc, *b, |s| axpy(s, &g, 1.0));
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut acc, *a, |s| axpy(s, &g, 1.0));
                    self.accumulate(&mut acc, *b, |s| axpy(s, &g, -1.0));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                    self.accumulate(&mut acc, *a, |s| {
                        for ((s, g), y) in s.iter_mut().zip(&g).zip(vb) {
                            *s += g * y;
                        }
                    });
                    self.accumulate(&mut acc, *b, |s| {
                        for ((s, g), x) in s.iter_mut().zip(&g).zip(va) {
                            *s += g * x;
                        }
                    });
                }
                Op::Scale(a, c) => self.accumulate(&mut acc, *a, |s| axpy(s, &g, *c)),
                Op::AddScalar(a) | Op::Reshape(a) => {
                    self.accumulate(&mut acc, *a, |s| axpy(s, &g, 1.0))
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                    self.accumulate(&mut acc, *a, |s| {
                        axpy(s, &gemm_a_bt(&g, tb.data(), m, n, k), 1.0)
                    });
                    self.accumulate(&mut acc, *b, |s| {
                        axpy(s, &gemm_at_b(ta.data(), &g, m, k, n), 1.0)
                    });
                }
                Op::Affine { x, w, b } => {
                    let (tx, tw) = (&self.nodes[*x].value, &self.nodes[*w].value);
                    let (n, fan_in, out) = (tx.rows(), tw.shape()[0], tw.shape()[1]);
                    self.accumulate(&mut acc, *x, |s| {
                        axpy(s, &gemm_a_bt(&g, tw.data(), n, out, fan_in), 1.0)
                    });
                    self.accumulate(&mut acc, *w, |s| {
                        axpy(s, &gemm_at_b(tx.data(), &g, n, fan_in, out), 1.0)
                    });
                    self.accumulate(&mut acc, *b, |s| {
                        for row in g.chunks(out) {
                            axpy(s, row, 1.0);
                        }
                    });
                }
                Op::Conv2d { x, w, b, stride } => {
                    let (tx, tw) = (&self.nodes[*x].value, &self.nodes[*w].value);
                    let geom = ConvGeom::new(tx.shape(), tw.shape()[0], *stride);
                    if self.rg(*x) {
                        let dx = conv_backward_input(&geom, &g, tw.data());
                        self.accumulate(&mut acc, *x, |s| axpy(s, &dx, 1.0));
                    }
                    if self.rg(*w) {
                        let dw = conv_backward_weight(&geom, &g, tx.data());
                        self.accumulate(&mut acc, *w, |s| axpy(s, &dw, 1.0));
                    }
                    self.accumulate(&mut acc, *b, |s| {
                        let plane = geom.ho * geom.wo;
                        for (j, chunk) in g.chunks(plane).enumerate() {
                            s[j % geom.oc] += chunk.iter().sum::<f64>();
                        }
                    });
                }
                Op::Relu(a) => {
                    let va = self.nodes[*a].value.data();
                    self.accumulate(&mut acc, *a, |s| {
                        for ((s, g), x) in s.iter_mut().zip(&g).zip(va) {
                            if *x > 0.0 {
                                *s += g;
                            }
                        }
                    });
                }
                Op::Sigmoid(a) => {
                    let y = node.value.data();
                    self.accumulate(&mut acc, *a, |s| {
                        for ((s, g), y) in s.iter_mut().zip(&g).zip(y) {
                            *s += g * y * (1.0 - y);
                        }
                    });
                }
                Op::Exp(a) => {
                    let y = node.value.data();
                    self.accumulate(&mut acc, *a, |s| {
                        for ((s, g), y) in s.iter_mut().zip(&g).zip(y) {
                            *s += g * y;
                        }
                    });
                }
                Op::Abs(a) => {
                    let va = self.nodes[*a].value.data();
                    self.accumulate(&mut acc, *a, |s| {
                        for ((s, g), x) in s.iter_mut().zip(&g).zip(va) {
                            *s += g * sign(*x);
                        }
                    });
                }
                // piecewise constant: contributes nothing
                Op::Sign => {}
                Op::Clamp { x, lo, hi } => {
                    let va = self.nodes[*x].value.data();
                    self.accumulate(&mut acc, *x, |s| {
                        for ((s, g), v) in s.iter_mut().zip(&g).zip(va) {
                            if *v > *lo && *v < *hi {
                                *s += g;
                            }
                        }
                    });
                }
                Op::Sum(a) => self.accumulate(&mut acc, *a, |s| {
                    for s in s.iter_mut() {
                        *s += g[0];
                    }
                }),
                Op::Mean(a) => {
                    let n = self.nodes[*a].value.len() as f64;
                    self.accumulate(&mut acc, *a, |s| {
                        for s in s.iter_mut() {
                            *s += g[0] / n;
                        }
                    })
                }
                Op::NormL1(a) => {
                    let va = self.nodes[*a].value.data();
                    self.accumulate(&mut acc, *a, |s| {
                        for (s, x) in s.iter_mut().zip(va) {
                            *s += g[0] * sign(*x);
                        }
                    });
                }
                Op::NormL2(a) => {
                    let norm = node.value.item();
                    let va = self.nodes[*a].value.data();
                    if norm > 0.0 {
                        self.accumulate(&mut acc, *a, |s| {
                            for (s, x) in s.iter_mut().zip(va) {
                                *s += g[0] * x / norm;
                            }
                        });
                    }
                }
                Op::NormLinf(a) => {
                    let va = self.nodes[*a].value.data();
                    let m = node.value.item();
                    if let Some(j) = va.iter().position(|x| x.abs() == m) {
                        self.accumulate(&mut acc, *a, |s| s[j] += g[0] * sign(va[j]));
                    }
                }
                Op::Softmax(a) => {
                    let p = &node.value;
                    let c = p.row_len();
                    self.accumulate(&mut acc, *a, |s| {
                        for i in 0..p.rows() {
                            let pr = p.row(i);
                            let gr = &g[i * c..(i + 1) * c];
                            let dot: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for j in 0..c {
                                s[i * c + j] += pr[j] * (gr[j] - dot);
                            }
                        }
                    });
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                    mean,
                } => {
                    let c = probs.len() / labels.len();
                    let scale = if *mean { g[0] / labels.len() as f64 } else { g[0] };
                    self.accumulate(&mut acc, *logits, |s| {
                        for (i, &y) in labels.iter().enumerate() {
                            for j in 0..c {
                                let onehot = if j == y { 1.0 } else { 0.0 };
                                s[i * c + j] += scale * (probs[i * c + j] - onehot);
                            }
                        }
                    });
                }
                Op::BceWithLogits { logits, targets } => {
                    let z = self.nodes[*logits].value.data();
                    let scale = g[0] / targets.len() as f64;
                    self.accumulate(&mut acc, *logits, |s| {
                        for ((s, z), t) in s.iter_mut().zip(z).zip(targets) {
                            *s += scale * (sigmoid(*z) - t);
                        }
                    });
                }
                Op::SqDist(a, b) => {
                    let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let w = ta.row_len();
                    let da: Vec<f64> = ta
                        .data()
                        .iter()
                        .zip(tb.data())
                        .enumerate()
                        .map(|(k, (p, q))| 2.0 * (p - q) * g[k / w])
                        .collect();
                    self.accumulate(&mut acc, *a, |s| axpy(s, &da, 1.0));
                    self.accumulate(&mut acc, *b, |s| axpy(s, &da, -1.0));
                }
                Op::Concat(a, b) => {
                    let p = self.nodes[*a].value.shape()[1];
                    let q = self.nodes[*b].value.shape()[1];
                    self.accumulate(&mut acc, *a, |s| {
                        for (i, row) in s.chunks_mut(p).enumerate() {
                            axpy(row, &g[i * (p + q)..i * (p + q) + p], 1.0);
                        }
                    });
                    self.accumulate(&mut acc, *b, |s| {
                        for (i, row) in s.chunks_mut(q).enumerate() {
                            axpy(row, &g[i * (p + q) + p..(i + 1) * (p + q)], 1.0);
                        }
                    });
                }
            }
        }
        Ok(Gradients {
            tape: self.id,
            grads: leaves,
        })
    }

    fn accumulate(&self, acc: &mut [Option<Vec<f64>>], i: usize, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[i].requires_grad {
            return;
        }
        let slot = acc[i].get_or_insert_with(|| vec![0.0; self.nodes[i].value.len()]);
        f(slot);
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn axpy(dst: &mut [f64], src: &[f64], a: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

/// `[m, k] x [k, n]`.
fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let ci = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            axpy(ci, &b[p * n..(p + 1) * n], aip);
        }
    }
    c
}

/// `a^T b` for `a: [m, k]`, `b: [m, n]`, giving `[k, n]`.
fn gemm_at_b(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let bi = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            axpy(&mut c[p * n..(p + 1) * n], bi, aip);
        }
    }
    c
}

/// `a b^T` for `a: [m, n]`, `b: [k, n]`, giving `[m, k]`.
fn gemm_a_bt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * k];
    for i in 0..m {
        let ai = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let bp = &b[p * n..(p + 1) * n];
            c[i * k + p] = ai.iter().zip(bp).map(|(x, y)| x * y).sum();
        }
    }
    c
}

struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    oc: usize,
    ho: usize,
    wo: usize,
    stride: usize,
}

impl ConvGeom {
    fn new(xshape: &[usize], oc: usize, stride: usize) -> Self {
        let (h, w) = (xshape[2], xshape[3]);
        ConvGeom {
            n: xshape[0],
            c: xshape[1],
            h,
            w,
            oc,
            ho: (h - 1) / stride + 1,
            wo: (w - 1) / stride + 1,
            stride,
        }
    }

    /// Visits every (output, input, weight) index triple touched by the kernel.
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        for n in 0..self.n {
            for o in 0..self.oc {
                for oy in 0..self.ho {
                    for ox in 0..self.wo {
                        let out_i = ((n * self.oc + o) * self.ho + oy) * self.wo + ox;
                        for ci in 0..self.c {
                            for ky in 0..3 {
                                let iy = (oy * self.stride + ky) as isize - 1;
                                if iy < 0 || iy >= self.h as isize {
                                    continue;
                                }
                                for kx in 0..3 {
                                    let ix = (ox * self.stride + kx) as isize - 1;
                                    if ix < 0 || ix >= self.w as isize {
                                        continue;
                                    }
                                    let in_i = ((n * self.c + ci) * self.h + iy as usize) * self.w
                                        + ix as usize;
                                    let w_i = ((o * self.c + ci) * 3 + ky) * 3 + kx;
                                    f(out_i, in_i, w_i);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_forward(g: &ConvGeom, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let plane = g.ho * g.wo;
    let mut y: Vec<f64> = (0..g.n * g.oc * plane)
        .map(|i| b[(i / plane) % g.oc])
        .collect();
    g.for_each(|o, i, k| y[o] += x[i] * w[k]);
    y
}

fn conv_backward_input(g: &ConvGeom, dy: &[f64], w: &[f64]) -> Vec<f64> {
    let mut dx = vec![0.0; g.n * g.c * g.h * g.w];
    g.for_each(|o, i, k| dx[i] += dy[o] * w[k]);
    dx
}

fn conv_backward_weight(g: &ConvGeom, dy: &[f64], x: &[f64]) -> Vec<f64> {
    let mut dw = vec![0.0; g.oc * g.c * 9];
    g.for_each(|o, i, k| dw[k] += dy[o] * x[i]);
    dw
}
