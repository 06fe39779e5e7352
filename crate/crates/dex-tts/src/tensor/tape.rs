//! Recording tape for reverse-mode differentiation.
//!
//! Operations append nodes holding the computed value plus enough metadata to
//! replay the chain rule in reverse. The op set is fixed (matmul, convolution,
//! elementwise arithmetic and activations, softmax, normalization, reductions,
//! reshape/transpose, gather, concatenation, slicing, reflect padding and the
//! straight-through substitution); everything higher-level is composed from it.
//! Every op checks shapes and rejects non-finite outputs. The tape is consumed
//! by [`Tape::backward`], which frees the graph and returns the gradients.

use super::store::{GradSink, ParamId, ParamStore};
use super::{strides_of, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Boundary fill rule for [`Tape::pad_axis`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    /// Mirror without repeating the edge entry; each side can add at most
    /// extent−1 entries.
    Reflect,
    /// Repeat the edge entry; any amount.
    Replicate,
}

/// Grouping rule for [`Tape::normalize`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    /// Per channel (axis 0) over all remaining axes.
    Instance,
    /// Over the last axis, independently per leading index.
    Layer,
    /// Last axis split into this many contiguous groups, per leading index.
    Group(usize),
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Sigmoid,
    Tanh,
    Gelu,
    Swish,
    Softplus,
    Relu,
    Exp,
    Ln,
    Sqrt,
}

enum Op {
    LeafInput,
    LeafConst,
    LeafParam(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    BroadcastAdd(Var, Var),
    BroadcastMul(Var, Var),
    Matmul(Var, Var),
    Conv1d {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        stride: (usize, usize),
        pad: (usize, usize),
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        stride: (usize, usize),
        pad: (usize, usize),
    },
    Unary(Var, Unary),
    Softmax {
        x: Var,
        axis: usize,
    },
    Normalize {
        x: Var,
        kind: NormKind,
        eps: f64,
    },
    SumAll(Var),
    MeanAll(Var),
    MeanAxis {
        x: Var,
        axis: usize,
    },
    Reshape(Var),
    Transpose {
        x: Var,
        perm: Vec<usize>,
    },
    GatherRows {
        table: Var,
        indices: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    SliceAxis {
        x: Var,
        axis: usize,
        start: usize,
        len: usize,
    },
    PadAxis {
        x: Var,
        axis: usize,
        before: usize,
        after: usize,
        mode: PadMode,
    },
    StraightThrough(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Gradients produced by one backward pass, indexable by [`Var`].
pub struct GradientMap {
    grads: Vec<Option<Tensor>>,
}

impl GradientMap {
    /// Gradient of the loss with respect to the given node, if any flowed there.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

/// Operation recorder; create one per forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, value: Tensor, op: Op, tracked: bool, name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(name));
        }
        Ok(self.push(value, op, tracked))
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Tracked input leaf: gradients w.r.t. it are available after backward.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        self.push_checked(value, Op::LeafInput, true, "leaf")
    }

    /// Untracked constant: no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push_checked(value, Op::LeafConst, false, "constant")
    }

    /// Leaf backed by a stored parameter; backward accumulates into its grad.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::LeafParam(id), true)
    }

    /// Copies the value into a fresh constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.push(value, Op::LeafConst, false)
    }

    // ── elementwise arithmetic ──────────────────────────────────────────

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let tracked = self.tracked(a) || self.tracked(b);
        self.push_checked(value, Op::Add(a, b), tracked, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let tracked = self.tracked(a) || self.tracked(b);
        self.push_checked(value, Op::Sub(a, b), tracked, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let tracked = self.tracked(a) || self.tracked(b);
        self.push_checked(value, Op::Mul(a, b), tracked, "mul")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let data = self.value(x).data().iter().map(|v| v * c).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        let tracked = self.tracked(x);
        self.push_checked(value, Op::Scale(x, c), tracked, "scale")
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let data = self.value(x).data().iter().map(|v| v + c).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        let tracked = self.tracked(x);
        self.push_checked(value, Op::AddScalar(x), tracked, "add_scalar")
    }

    // ── broadcasting (same rank; rhs axes must be 1 or equal) ───────────

    fn broadcast_strides(&self, x: Var, y: Var, what: &str) -> Result<Vec<usize>> {
        let xs = self.shape(x);
        let ys = self.shape(y);
        if xs.len() != ys.len() {
            return Err(Error::Shape(format!(
                "{what}: rank {} vs {}",
                xs.len(),
                ys.len()
            )));
        }
        let y_str = strides_of(ys);
        let mut eff = vec![0usize; xs.len()];
        for a in 0..xs.len() {
            if ys[a] == xs[a] {
                eff[a] = y_str[a];
            } else if ys[a] == 1 {
                eff[a] = 0;
            } else {
                return Err(Error::Shape(format!(
                    "{what}: cannot broadcast {ys:?} over {xs:?}"
                )));
            }
        }
        Ok(eff)
    }

    pub fn broadcast_add(&mut self, x: Var, y: Var) -> Result<Var> {
        let eff = self.broadcast_strides(x, y, "broadcast_add")?;
        let shape = self.shape(x).to_vec();
        let mut data = vec![0.0; self.value(x).numel()];
        {
            let xd = self.value(x).data();
            let yd = self.value(y).data();
            for_each_broadcast(&shape, &eff, |xi, yi| data[xi] = xd[xi] + yd[yi]);
        }
        let value = Tensor::new(shape, data)?;
        let tracked = self.tracked(x) || self.tracked(y);
        self.push_checked(value, Op::BroadcastAdd(x, y), tracked, "broadcast_add")
    }

    pub fn broadcast_mul(&mut self, x: Var, y: Var) -> Result<Var> {
        let eff = self.broadcast_strides(x, y, "broadcast_mul")?;
        let shape = self.shape(x).to_vec();
        let mut data = vec![0.0; self.value(x).numel()];
        {
            let xd = self.value(x).data();
            let yd = self.value(y).data();
            for_each_broadcast(&shape, &eff, |xi, yi| data[xi] = xd[xi] * yd[yi]);
        }
        let value = Tensor::new(shape, data)?;
        let tracked = self.tracked(x) || self.tracked(y);
        self.push_checked(value, Op::BroadcastMul(x, y), tracked, "broadcast_mul")
    }

    // ── linear algebra ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::Shape(format!("matmul wants rank 2, got {sa:?} x {sb:?}")));
        }
        let (m, k) = (sa[0], sa[1]);
        let (k2, n) = (sb[0], sb[1]);
        if k != k2 {
            return Err(Error::Shape(format!("matmul inner extents {k} vs {k2}")));
        }
        let value = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::new(vec![m, n], value)?;
        let tracked = self.tracked(a) || self.tracked(b);
        self.push_checked(value, Op::Matmul(a, b), tracked, "matmul")
    }

    /// x·w + b for x:[M×K], w:[K×N], b:[1×N].
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.broadcast_add(y, b)
    }

    // ── convolutions ────────────────────────────────────────────────────

    pub fn conv1d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 2 || sw.len() != 3 {
            return Err(Error::Shape(format!("conv1d wants x:[C×T] w:[O×C×k], got {sx:?} {sw:?}")));
        }
        let (ci, t) = (sx[0], sx[1]);
        let (co, ci2, k) = (sw[0], sw[1], sw[2]);
        if ci != ci2 {
            return Err(Error::Shape(format!("conv1d channels {ci} vs {ci2}")));
        }
        if k < 1 || t + 2 * pad < k || stride == 0 {
            return Err(Error::Shape(format!(
                "conv1d kernel {k} does not fit padded input {}",
                t + 2 * pad
            )));
        }
        let t_out = (t + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0; co * t_out];
        {
            let xd = self.value(x).data();
            let wd = self.value(w).data();
            for o in 0..co {
                for c in 0..ci {
                    for u in 0..k {
                        let wv = wd[(o * ci + c) * k + u];
                        if wv == 0.0 {
                            continue;
                        }
                        for tp in 0..t_out {
                            let pos = (tp * stride + u) as isize - pad as isize;
                            if pos >= 0 && (pos as usize) < t {
                                out[o * t_out + tp] += xd[c * t + pos as usize] * wv;
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![co, t_out], out)?;
        let tracked = self.tracked(x) || self.tracked(w);
        self.push_checked(value, Op::Conv1d { x, w, stride, pad }, tracked, "conv1d")
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 3 || sw.len() != 4 {
            return Err(Error::Shape(format!(
                "conv2d wants x:[C×H×W] w:[O×C×kh×kw], got {sx:?} {sw:?}"
            )));
        }
        let (ci, h, wd_) = (sx[0], sx[1], sx[2]);
        let (co, ci2, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        if ci != ci2 {
            return Err(Error::Shape(format!("conv2d channels {ci} vs {ci2}")));
        }
        if kh < 1 || kw < 1 || h + 2 * pad.0 < kh || wd_ + 2 * pad.1 < kw || stride.0 == 0 || stride.1 == 0 {
            return Err(Error::Shape(format!(
                "conv2d kernel {kh}x{kw} does not fit padded input {}x{}",
                h + 2 * pad.0,
                wd_ + 2 * pad.1
            )));
        }
        let h_out = (h + 2 * pad.0 - kh) / stride.0 + 1;
        let w_out = (wd_ + 2 * pad.1 - kw) / stride.1 + 1;
        let mut out = vec![0.0; co * h_out * w_out];
        {
            let xd = self.value(x).data();
            let wdat = self.value(w).data();
            for o in 0..co {
                for c in 0..ci {
                    for u in 0..kh {
                        for v in 0..kw {
                            let wv = wdat[((o * ci + c) * kh + u) * kw + v];
                            if wv == 0.0 {
                                continue;
                            }
                            for i in 0..h_out {
                                let a = (i * stride.0 + u) as isize - pad.0 as isize;
                                if a < 0 || a as usize >= h {
                                    continue;
                                }
                                let xrow = (c * h + a as usize) * wd_;
                                let orow = (o * h_out + i) * w_out;
                                for j in 0..w_out {
                                    let b = (j * stride.1 + v) as isize - pad.1 as isize;
                                    if b >= 0 && (b as usize) < wd_ {
                                        out[orow + j] += xd[xrow + b as usize] * wv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![co, h_out, w_out], out)?;
        let tracked = self.tracked(x) || self.tracked(w);
        self.push_checked(value, Op::Conv2d { x, w, stride, pad }, tracked, "conv2d")
    }

    /// Transposed convolution; weight layout is [C_in×C_out×kh×kw].
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        stride: (usize, usize),
        pad: (usize, usize),
        out_pad: (usize, usize),
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 3 || sw.len() != 4 {
            return Err(Error::Shape(format!(
                "conv_transpose2d wants x:[C×H×W] w:[C×O×kh×kw], got {sx:?} {sw:?}"
            )));
        }
        let (ci, h, wd_) = (sx[0], sx[1], sx[2]);
        let (ci2, co, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        if ci != ci2 {
            return Err(Error::Shape(format!("conv_transpose2d channels {ci} vs {ci2}")));
        }
        if out_pad.0 >= stride.0 || out_pad.1 >= stride.1 {
            return Err(Error::Shape("conv_transpose2d output padding must be < stride".into()));
        }
        let h_out = (h - 1) * stride.0 + kh + out_pad.0;
        let w_out = (wd_ - 1) * stride.1 + kw + out_pad.1;
        if h_out <= 2 * pad.0 || w_out <= 2 * pad.1 {
            return Err(Error::Shape("conv_transpose2d output vanishes under padding".into()));
        }
        let h_out = h_out - 2 * pad.0;
        let w_out = w_out - 2 * pad.1;
        let mut out = vec![0.0; co * h_out * w_out];
        {
            let xd = self.value(x).data();
            let wdat = self.value(w).data();
            for c in 0..ci {
                for o in 0..co {
                    for u in 0..kh {
                        for v in 0..kw {
                            let wv = wdat[((c * co + o) * kh + u) * kw + v];
                            if wv == 0.0 {
                                continue;
                            }
                            for i in 0..h {
                                let a = (i * stride.0 + u) as isize - pad.0 as isize;
                                if a < 0 || a as usize >= h_out {
                                    continue;
                                }
                                let orow = (o * h_out + a as usize) * w_out;
                                let xrow = (c * h + i) * wd_;
                                for j in 0..wd_ {
                                    let b = (j * stride.1 + v) as isize - pad.1 as isize;
                                    if b >= 0 && (b as usize) < w_out {
                                        out[orow + b as usize] += xd[xrow + j] * wv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![co, h_out, w_out], out)?;
        let tracked = self.tracked(x) || self.tracked(w);
        let _ = out_pad;
        self.push_checked(
            value,
            Op::ConvTranspose2d { x, w, stride, pad },
            tracked,
            "conv_transpose2d",
        )
    }

    // ── elementwise activations ─────────────────────────────────────────

    fn unary(&mut self, x: Var, kind: Unary, name: &'static str) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| unary_eval(kind, v)).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        let tracked = self.tracked(x);
        self.push_checked(value, Op::Unary(x, kind), tracked, name)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sigmoid, "sigmoid")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Tanh, "tanh")
    }

    /// GeLU, tanh approximation (forward and backward are mutually consistent).
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Gelu, "gelu")
    }

    /// Swish / SiLU with β = 1: x·σ(x).
    pub fn swish(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Swish, "swish")
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Softplus, "softplus")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Relu, "relu")
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Exp, "exp")
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Ln, "ln")
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sqrt, "sqrt")
    }

    // ── softmax and normalization ───────────────────────────────────────

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape(format!("softmax axis {axis} for shape {shape:?}")));
        }
        let (outer, lanes, inner) = lane_split(&shape, axis);
        let mut data = self.value(x).data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * lanes * inner + i;
                let mut max = f64::NEG_INFINITY;
                for l in 0..lanes {
                    max = max.max(data[base + l * inner]);
                }
                let mut sum = 0.0;
                for l in 0..lanes {
                    let e = (data[base + l * inner] - max).exp();
                    data[base + l * inner] = e;
                    sum += e;
                }
                for l in 0..lanes {
                    data[base + l * inner] /= sum;
                }
            }
        }
        let value = Tensor::new(shape, data)?;
        let tracked = self.tracked(x);
        self.push_checked(value, Op::Softmax { x, axis }, tracked, "softmax")
    }

    /// Zero-mean unit-variance normalization over the groups named by `kind`,
    /// with `eps` inside the square root.
    pub fn normalize(&mut self, x: Var, kind: NormKind, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let chunk = norm_chunk_len(&shape, kind)?;
        let mut data = self.value(x).data().to_vec();
        for group in data.chunks_mut(chunk) {
            let n = group.len() as f64;
            let mean = group.iter().sum::<f64>() / n;
            let var = group.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let denom = (var + eps).sqrt();
            for v in group.iter_mut() {
                *v = (*v - mean) / denom;
            }
        }
        let value = Tensor::new(shape, data)?;
        let tracked = self.tracked(x);
        self.push_checked(value, Op::Normalize { x, kind, eps }, tracked, "normalize")
    }

    // ── reductions ──────────────────────────────────────────────────────

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        let tracked = self.tracked(x);
        self.push_checked(value, Op::SumAll(x), tracked, "sum_all")
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f64;
        let value = Tensor::scalar(self.value(x).data().iter().sum::<f64>() / n);
        let tracked = self.tracked(x);
        self.push_checked(value, Op::MeanAll(x), tracked, "mean_all")
    }

    /// Mean over one axis, keeping it with extent 1.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape(format!("mean_axis {axis} for shape {shape:?}")));
        }
        let (outer, lanes, inner) = lane_split(&shape, axis);
        let mut out_shape = shape.clone();
        out_shape[axis] = 1;
        let mut out = vec![0.0; outer * inner];
        let xd = self.value(x).data();
        for o in 0..outer {
            for l in 0..lanes {
                let base = (o * lanes + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += xd[base + i];
                }
            }
        }
        for v in out.iter_mut() {
            *v /= lanes as f64;
        }
        let value = Tensor::new(out_shape, out)?;
        let tracked = self.tracked(x);
        self.push_checked(value, Op::MeanAxis { x, axis }, tracked, "mean_axis")
    }

    // ── shape manipulation ──────────────────────────────────────────────

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return Err(Error::Shape(format!(
                "reshape {:?} -> {:?}",
                self.shape(x),
                shape
            )));
        }
        let value = Tensor::new(shape.to_vec(), self.value(x).data().to_vec())?;
        let tracked = self.tracked(x);
        Ok(self.push(value, Op::Reshape(x), tracked))
    }

    pub fn transpose(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if perm.len() != shape.len() {
            return Err(Error::Shape(format!("transpose perm {perm:?} for shape {shape:?}")));
        }
        let mut seen = vec![false; perm.len()];
        for &p in perm {
            if p >= perm.len() || seen[p] {
                return Err(Error::Shape(format!("invalid permutation {perm:?}")));
            }
            seen[p] = true;
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let data = permute_raw(self.value(x).data(), &shape, perm);
        let value = Tensor::new(out_shape, data)?;
        let tracked = self.tracked(x);
        Ok(self.push(value, Op::Transpose { x, perm: perm.to_vec() }, tracked))
    }

    /// Convenience for 2-D transpose.
    pub fn transpose2(&mut self, x: Var) -> Result<Var> {
        self.transpose(x, &[1, 0])
    }

    /// Selects rows of a [R×C] table; gradient scatter-adds into the table.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(Error::Shape(format!("gather_rows wants rank 2, got {shape:?}")));
        }
        let (rows, cols) = (shape[0], shape[1]);
        if indices.is_empty() {
            return Err(Error::Shape("gather_rows with empty index list".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::Input(format!("row index {bad} out of range {rows}")));
        }
        let td = self.value(table).data();
        let mut out = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            out.extend_from_slice(&td[i * cols..(i + 1) * cols]);
        }
        let value = Tensor::new(vec![indices.len(), cols], out)?;
        let tracked = self.tracked(table);
        Ok(self.push(
            value,
            Op::GatherRows { table, indices: indices.to_vec() },
            tracked,
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("concat of zero parts".into()));
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::Shape(format!("concat axis {axis} for shape {first:?}")));
        }
        let mut total = 0usize;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(a, (x, y))| a != axis && x != y)
            {
                return Err(Error::Shape(format!("concat mismatch {s:?} vs {first:?}")));
            }
            total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let inner: usize = first[axis + 1..].iter().product();
        let outer: usize = first[..axis].iter().product();
        let mut out = vec![0.0; out_shape.iter().product()];
        let mut offset = 0usize;
        for &p in parts {
            let ext = self.shape(p)[axis];
            let pd = self.value(p).data();
            for o in 0..outer {
                let src = o * ext * inner;
                let dst = (o * total + offset) * inner;
                out[dst..dst + ext * inner].copy_from_slice(&pd[src..src + ext * inner]);
            }
            offset += ext;
        }
        let value = Tensor::new(out_shape, out)?;
        let tracked = parts.iter().any(|&p| self.tracked(p));
        Ok(self.push(value, Op::Concat { parts: parts.to_vec(), axis }, tracked))
    }

    pub fn slice_axis(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(Error::Shape(format!(
                "slice [{start}..{}] on axis {axis} of {shape:?}",
                start + len
            )));
        }
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let ext = shape[axis];
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let xd = self.value(x).data();
        let mut out = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let src = (o * ext + start) * inner;
            let dst = o * len * inner;
            out[dst..dst + len * inner].copy_from_slice(&xd[src..src + len * inner]);
        }
        let value = Tensor::new(out_shape, out)?;
        let tracked = self.tracked(x);
        Ok(self.push(value, Op::SliceAxis { x, axis, start, len }, tracked))
    }

    /// Appends `count` mirror-reflected entries (no edge repeat) at the end of
    /// `axis`: the new entry at offset i copies index n−2−i.
    pub fn pad_reflect_end(&mut self, x: Var, axis: usize, count: usize) -> Result<Var> {
        self.pad_axis(x, axis, 0, count, PadMode::Reflect)
    }

    /// Pads `axis` with `before`/`after` entries using the given fill rule.
    pub fn pad_axis(
        &mut self,
        x: Var,
        axis: usize,
        before: usize,
        after: usize,
        mode: PadMode,
    ) -> Result<Var> {
        if before == 0 && after == 0 {
            return self.reshape(x, &self.shape(x).to_vec());
        }
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape(format!("pad axis {axis} for shape {shape:?}")));
        }
        let n = shape[axis];
        if mode == PadMode::Reflect && before.max(after) > n.saturating_sub(1) {
            return Err(Error::Shape(format!(
                "reflect pad of ({before}, {after}) exceeds extent {n} - 1"
            )));
        }
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let total = before + n + after;
        let mut out_shape = shape.clone();
        out_shape[axis] = total;
        let xd = self.value(x).data();
        let mut out = vec![0.0; outer * total * inner];
        for o in 0..outer {
            let src = o * n * inner;
            let dst = o * total * inner;
            for pos in 0..total {
                let mirror = pad_source(pos, before, n, mode);
                let s = src + mirror * inner;
                let d = dst + pos * inner;
                out[d..d + inner].copy_from_slice(&xd[s..s + inner]);
            }
        }
        let value = Tensor::new(out_shape, out)?;
        let tracked = self.tracked(x);
        Ok(self.push(value, Op::PadAxis { x, axis, before, after, mode }, tracked))
    }

    /// Replaces the forward value while passing the gradient through unchanged
    /// (the straight-through estimator used by vector quantization).
    pub fn straight_through(&mut self, x: Var, replacement: Tensor) -> Result<Var> {
        if replacement.shape() != self.shape(x) {
            return Err(Error::Shape(format!(
                "straight_through {:?} vs {:?}",
                replacement.shape(),
                self.shape(x)
            )));
        }
        let tracked = self.tracked(x);
        self.push_checked(replacement, Op::StraightThrough(x), tracked, "straight_through")
    }

    // ── composed helpers ────────────────────────────────────────────────

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.mul(x, x)
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        self.mean_all(sq)
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Parameter gradients accumulate into
    /// the sink (usually the store); gradients for tracked nodes are
    /// returned. Consumes the tape.
    pub fn backward<S: GradSink>(self, loss: Var, sink: &mut S) -> Result<GradientMap> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward on non-scalar loss of shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(
            self.nodes[loss.0].value.shape().to_vec(),
            vec![1.0],
        )?);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].tracked {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads, sink)?;
            grads[i] = Some(g);
        }
        Ok(GradientMap { grads })
    }

    fn propagate<S: GradSink>(
        &self,
        i: usize,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
        sink: &mut S,
    ) -> Result<()> {
        let node = &self.nodes[i];
        macro_rules! grad_of {
            ($v:expr) => {{
                let shape = self.nodes[$v.0].value.shape();
                grads[$v.0].get_or_insert_with(|| Tensor::zeros(shape))
            }};
        }
        match &node.op {
            Op::LeafInput | Op::LeafConst => {}
            Op::LeafParam(id) => {
                sink.accumulate(*id, g)?;
            }
            Op::Add(a, b) => {
                if self.tracked(*a) {
                    let da = grad_of!(*a);
                    for (d, gi) in da.data_mut().iter_mut().zip(g.data()) {
                        *d += gi;
                    }
                }
                if self.tracked(*b) {
                    let db = grad_of!(*b);
                    for (d, gi) in db.data_mut().iter_mut().zip(g.data()) {
                        *d += gi;
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.tracked(*a) {
                    let da = grad_of!(*a);
                    for (d, gi) in da.data_mut().iter_mut().zip(g.data()) {
                        *d += gi;
                    }
                }
                if self.tracked(*b) {
                    let db = grad_of!(*b);
                    for (d, gi) in db.data_mut().iter_mut().zip(g.data()) {
                        *d -= gi;
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.tracked(*a) {
                    let bv = self.nodes[b.0].value.data();
                    let da = grad_of!(*a);
                    for ((d, gi), bi) in da.data_mut().iter_mut().zip(g.data()).zip(bv) {
                        *d += gi * bi;
                    }
                }
                if self.tracked(*b) {
                    let av = self.nodes[a.0].value.data();
                    let db = grad_of!(*b);
                    for ((d, gi), ai) in db.data_mut().iter_mut().zip(g.data()).zip(av) {
                        *d += gi * ai;
                    }
                }
            }
            Op::Scale(x, c) => {
                if self.tracked(*x) {
                    let dx = grad_of!(*x);
                    for (d, gi) in dx.data_mut().iter_mut().zip(g.data()) {
                        *d += gi * c;
                    }
                }
            }
            Op::AddScalar(x) => {
                if self.tracked(*x) {
                    let dx = grad_of!(*x);
                    for (d, gi) in dx.data_mut().iter_mut().zip(g.data()) {
                        *d += gi;
                    }
                }
            }
            Op::BroadcastAdd(x, y) => {
                let shape = node.value.shape().to_vec();
                if self.tracked(*x) {
                    let dx = grad_of!(*x);
                    for (d, gi) in dx.data_mut().iter_mut().zip(g.data()) {
                        *d += gi;
                    }
                }
                if self.tracked(*y) {
                    let eff = self.broadcast_strides(*x, *y, "broadcast_add")?;
                    let dy = grad_of!(*y);
                    let dyd = dy.data_mut();
                    for_each_broadcast(&shape, &eff, |xi, yi| dyd[yi] += g.data()[xi]);
                }
            }
            Op::BroadcastMul(x, y) => {
                let shape = node.value.shape().to_vec();
                let eff = self.broadcast_strides(*x, *y, "broadcast_mul")?;
                if self.tracked(*x) {
                    let yv = self.nodes[y.0].value.data();
                    let dx = grad_of!(*x);
                    let dxd = dx.data_mut();
                    for_each_broadcast(&shape, &eff, |xi, yi| dxd[xi] += g.data()[xi] * yv[yi]);
                }
                if self.tracked(*y) {
                    let xv = self.nodes[x.0].value.data();
                    let dy = grad_of!(*y);
                    let dyd = dy.data_mut();
                    for_each_broadcast(&shape, &eff, |xi, yi| dyd[yi] += g.data()[xi] * xv[xi]);
                }
            }
            Op::Matmul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.tracked(*a) {
                    // dA = g · Bᵀ
                    let bv = self.nodes[b.0].value.data();
                    let da = grad_of!(*a);
                    let dad = da.data_mut();
                    for i in 0..m {
                        for j in 0..n {
                            let gv = g.data()[i * n + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                dad[i * k + p] += gv * bv[p * n + j];
                            }
                        }
                    }
                }
                if self.tracked(*b) {
                    // dB = Aᵀ · g
                    let av = self.nodes[a.0].value.data();
                    let db = grad_of!(*b);
                    let dbd = db.data_mut();
                    for i in 0..m {
                        for p in 0..k {
                            let av_ip = av[i * k + p];
                            if av_ip == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                dbd[p * n + j] += av_ip * g.data()[i * n + j];
                            }
                        }
                    }
                }
            }
            Op::Conv1d { x, w, stride, pad } => {
                let (ci, t) = (self.shape(*x)[0], self.shape(*x)[1]);
                let (co, _, k) = (self.shape(*w)[0], self.shape(*w)[1], self.shape(*w)[2]);
                let t_out = node.value.shape()[1];
                let xv = self.nodes[x.0].value.data();
                let wv = self.nodes[w.0].value.data();
                let track_x = self.tracked(*x);
                let track_w = self.tracked(*w);
                let mut dx = if track_x { Some(vec![0.0; ci * t]) } else { None };
                let mut dw = if track_w { Some(vec![0.0; co * ci * k]) } else { None };
                for o in 0..co {
                    for c in 0..ci {
                        for u in 0..k {
                            let widx = (o * ci + c) * k + u;
                            for tp in 0..t_out {
                                let pos = (tp * stride + u) as isize - *pad as isize;
                                if pos < 0 || pos as usize >= t {
                                    continue;
                                }
                                let gv = g.data()[o * t_out + tp];
                                if let Some(dx) = dx.as_mut() {
                                    dx[c * t + pos as usize] += gv * wv[widx];
                                }
                                if let Some(dw) = dw.as_mut() {
                                    dw[widx] += gv * xv[c * t + pos as usize];
                                }
                            }
                        }
                    }
                }
                if let Some(dx) = dx {
                    let gx = grad_of!(*x);
                    for (d, v) in gx.data_mut().iter_mut().zip(&dx) {
                        *d += v;
                    }
                }
                if let Some(dw) = dw {
                    let gw = grad_of!(*w);
                    for (d, v) in gw.data_mut().iter_mut().zip(&dw) {
                        *d += v;
                    }
                }
            }
            Op::Conv2d { x, w, stride, pad } => {
                let (ci, h, wd_) = (self.shape(*x)[0], self.shape(*x)[1], self.shape(*x)[2]);
                let (co, kh, kw) = (self.shape(*w)[0], self.shape(*w)[2], self.shape(*w)[3]);
                let (h_out, w_out) = (node.value.shape()[1], node.value.shape()[2]);
                let xv = self.nodes[x.0].value.data();
                let wv = self.nodes[w.0].value.data();
                let track_x = self.tracked(*x);
                let track_w = self.tracked(*w);
                let mut dx = if track_x { Some(vec![0.0; ci * h * wd_]) } else { None };
                let mut dw = if track_w { Some(vec![0.0; co * ci * kh * kw]) } else { None };
                for o in 0..co {
                    for c in 0..ci {
                        for u in 0..kh {
                            for v in 0..kw {
                                let widx = ((o * ci + c) * kh + u) * kw + v;
                                for i in 0..h_out {
                                    let a = (i * stride.0 + u) as isize - pad.0 as isize;
                                    if a < 0 || a as usize >= h {
                                        continue;
                                    }
                                    let xrow = (c * h + a as usize) * wd_;
                                    let grow = (o * h_out + i) * w_out;
                                    for j in 0..w_out {
                                        let b = (j * stride.1 + v) as isize - pad.1 as isize;
                                        if b < 0 || b as usize >= wd_ {
                                            continue;
                                        }
                                        let gv = g.data()[grow + j];
                                        if let Some(dx) = dx.as_mut() {
                                            dx[xrow + b as usize] += gv * wv[widx];
                                        }
                                        if let Some(dw) = dw.as_mut() {
                                            dw[widx] += gv * xv[xrow + b as usize];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(dx) = dx {
                    let gx = grad_of!(*x);
                    for (d, v) in gx.data_mut().iter_mut().zip(&dx) {
                        *d += v;
                    }
                }
                if let Some(dw) = dw {
                    let gw = grad_of!(*w);
                    for (d, v) in gw.data_mut().iter_mut().zip(&dw) {
                        *d += v;
                    }
                }
            }
            Op::ConvTranspose2d { x, w, stride, pad } => {
                let (ci, h, wd_) = (self.shape(*x)[0], self.shape(*x)[1], self.shape(*x)[2]);
                let (co, kh, kw) = (self.shape(*w)[1], self.shape(*w)[2], self.shape(*w)[3]);
                let (h_out, w_out) = (node.value.shape()[1], node.value.shape()[2]);
                let xv = self.nodes[x.0].value.data();
                let wv = self.nodes[w.0].value.data();
                let track_x = self.tracked(*x);
                let track_w = self.tracked(*w);
                let mut dx = if track_x { Some(vec![0.0; ci * h * wd_]) } else { None };
                let mut dw = if track_w { Some(vec![0.0; ci * co * kh * kw]) } else { None };
                for c in 0..ci {
                    for o in 0..co {
                        for u in 0..kh {
                            for v in 0..kw {
                                let widx = ((c * co + o) * kh + u) * kw + v;
                                for i in 0..h {
                                    let a = (i * stride.0 + u) as isize - pad.0 as isize;
                                    if a < 0 || a as usize >= h_out {
                                        continue;
                                    }
                                    let grow = (o * h_out + a as usize) * w_out;
                                    let xrow = (c * h + i) * wd_;
                                    for j in 0..wd_ {
                                        let b = (j * stride.1 + v) as isize - pad.1 as isize;
                                        if b < 0 || b as usize >= w_out {
                                            continue;
                                        }
                                        let gv = g.data()[grow + b as usize];
                                        if let Some(dx) = dx.as_mut() {
                                            dx[xrow + j] += gv * wv[widx];
                                        }
                                        if let Some(dw) = dw.as_mut() {
                                            dw[widx] += gv * xv[xrow + j];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(dx) = dx {
                    let gx = grad_of!(*x);
                    for (d, v) in gx.data_mut().iter_mut().zip(&dx) {
                        *d += v;
                    }
                }
                if let Some(dw) = dw {
                    let gw = grad_of!(*w);
                    for (d, v) in gw.data_mut().iter_mut().zip(&dw) {
                        *d += v;
                    }
                }
            }
            Op::Unary(x, kind) => {
                if self.tracked(*x) {
                    let xv = self.nodes[x.0].value.data();
                    let yv = node.value.data();
                    let dx = grad_of!(*x);
                    for i in 0..xv.len() {
                        dx.data_mut()[i] += g.data()[i] * unary_deriv(*kind, xv[i], yv[i]);
                    }
                }
            }
            Op::Softmax { x, axis } => {
                if self.tracked(*x) {
                    let shape = node.value.shape().to_vec();
                    let (outer, lanes, inner) = lane_split(&shape, *axis);
                    let yv = node.value.data();
                    let dx = grad_of!(*x);
                    let dxd = dx.data_mut();
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * lanes * inner + i;
                            let mut dot = 0.0;
                            for l in 0..lanes {
                                let idx = base + l * inner;
                                dot += g.data()[idx] * yv[idx];
                            }
                            for l in 0..lanes {
                                let idx = base + l * inner;
                                dxd[idx] += yv[idx] * (g.data()[idx] - dot);
                            }
                        }
                    }
                }
            }
            Op::Normalize { x, kind, eps } => {
                if self.tracked(*x) {
                    let shape = node.value.shape().to_vec();
                    let chunk = norm_chunk_len(&shape, *kind)?;
                    let xv = self.nodes[x.0].value.data();
                    let yv = node.value.data();
                    let dx = grad_of!(*x);
                    let dxd = dx.data_mut();
                    let mut start = 0usize;
                    while start < xv.len() {
                        let end = start + chunk;
                        let n = chunk as f64;
                        let mean = xv[start..end].iter().sum::<f64>() / n;
                        let var = xv[start..end]
                            .iter()
                            .map(|v| (v - mean) * (v - mean))
                            .sum::<f64>()
                            / n;
                        let denom = (var + eps).sqrt();
                        let g_mean = g.data()[start..end].iter().sum::<f64>() / n;
                        let gy_mean = g.data()[start..end]
                            .iter()
                            .zip(&yv[start..end])
                            .map(|(gi, yi)| gi * yi)
                            .sum::<f64>()
                            / n;
                        for j in start..end {
                            dxd[j] += (g.data()[j] - g_mean - yv[j] * gy_mean) / denom;
                        }
                        start = end;
                    }
                }
            }
            Op::SumAll(x) => {
                if self.tracked(*x) {
                    let gv = g.data()[0];
                    let dx = grad_of!(*x);
                    for d in dx.data_mut() {
                        *d += gv;
                    }
                }
            }
            Op::MeanAll(x) => {
                if self.tracked(*x) {
                    let n = self.nodes[x.0].value.numel() as f64;
                    let gv = g.data()[0] / n;
                    let dx = grad_of!(*x);
                    for d in dx.data_mut() {
                        *d += gv;
                    }
                }
            }
            Op::MeanAxis { x, axis } => {
                if self.tracked(*x) {
                    let shape = self.nodes[x.0].value.shape().to_vec();
                    let (outer, lanes, inner) = lane_split(&shape, *axis);
                    let dx = grad_of!(*x);
                    let dxd = dx.data_mut();
                    for o in 0..outer {
                        for l in 0..lanes {
                            let base = (o * lanes + l) * inner;
                            for i in 0..inner {
                                dxd[base + i] += g.data()[o * inner + i] / lanes as f64;
                            }
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if self.tracked(*x) {
                    let dx = grad_of!(*x);
                    for (d, gi) in dx.data_mut().iter_mut().zip(g.data()) {
                        *d += gi;
                    }
                }
            }
            Op::Transpose { x, perm } => {
                if self.tracked(*x) {
                    let mut inv = vec![0usize; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    let back = permute_raw(g.data(), node.value.shape(), &inv);
                    let dx = grad_of!(*x);
                    for (d, v) in dx.data_mut().iter_mut().zip(&back) {
                        *d += v;
                    }
                }
            }
            Op::GatherRows { table, indices } => {
                if self.tracked(*table) {
                    let cols = self.shape(*table)[1];
                    let dt = grad_of!(*table);
                    let dtd = dt.data_mut();
                    for (r, &idx) in indices.iter().enumerate() {
                        for c in 0..cols {
                            dtd[idx * cols + c] += g.data()[r * cols + c];
                        }
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let total = node.value.shape()[*axis];
                let inner: usize = node.value.shape()[*axis + 1..].iter().product();
                let outer: usize = node.value.shape()[..*axis].iter().product();
                let mut offset = 0usize;
                for &p in parts {
                    let ext = self.shape(p)[*axis];
                    if self.tracked(p) {
                        let dp = grad_of!(p);
                        let dpd = dp.data_mut();
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * ext * inner;
                            for j in 0..ext * inner {
                                dpd[dst + j] += g.data()[src + j];
                            }
                        }
                    }
                    offset += ext;
                }
            }
            Op::SliceAxis { x, axis, start, len } => {
                if self.tracked(*x) {
                    let shape = self.nodes[x.0].value.shape().to_vec();
                    let inner: usize = shape[*axis + 1..].iter().product();
                    let outer: usize = shape[..*axis].iter().product();
                    let ext = shape[*axis];
                    let dx = grad_of!(*x);
                    let dxd = dx.data_mut();
                    for o in 0..outer {
                        let dst = (o * ext + start) * inner;
                        let src = o * len * inner;
                        for j in 0..len * inner {
                            dxd[dst + j] += g.data()[src + j];
                        }
                    }
                }
            }
            Op::PadAxis { x, axis, before, after, mode } => {
                if self.tracked(*x) {
                    let shape = self.nodes[x.0].value.shape().to_vec();
                    let n = shape[*axis];
                    let inner: usize = shape[*axis + 1..].iter().product();
                    let outer: usize = shape[..*axis].iter().product();
                    let total = before + n + after;
                    let dx = grad_of!(*x);
                    let dxd = dx.data_mut();
                    for o in 0..outer {
                        let src = o * total * inner;
                        let dst = o * n * inner;
                        for pos in 0..total {
                            let mirror = pad_source(pos, *before, n, *mode);
                            for j in 0..inner {
                                dxd[dst + mirror * inner + j] += g.data()[src + pos * inner + j];
                            }
                        }
                    }
                }
            }
            Op::StraightThrough(x) => {
                if self.tracked(*x) {
                    let dx = grad_of!(*x);
                    for (d, gi) in dx.data_mut().iter_mut().zip(g.data()) {
                        *d += gi;
                    }
                }
            }
        }
        Ok(())
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = p * n;
            let orow = i * n;
            for j in 0..n {
                out[orow + j] += av * b[brow + j];
            }
        }
    }
    out
}

fn permute_raw(data: &[f64], in_shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let rank = in_shape.len();
    if rank == 0 {
        return data.to_vec();
    }
    let in_strides = strides_of(in_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total: usize = out_shape.iter().product();
    let mut out = vec![0.0; total];
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for slot in out.iter_mut() {
        *slot = data[src];
        for a in (0..rank).rev() {
            idx[a] += 1;
            src += step[a];
            if idx[a] < out_shape[a] {
                break;
            }
            idx[a] = 0;
            src -= step[a] * out_shape[a];
        }
    }
    out
}

fn for_each_broadcast(shape: &[usize], y_eff_strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let rank = shape.len();
    let total: usize = shape.iter().product();
    if rank == 0 {
        f(0, 0);
        return;
    }
    let mut idx = vec![0usize; rank];
    let mut yflat = 0usize;
    for xflat in 0..total {
        f(xflat, yflat);
        for a in (0..rank).rev() {
            idx[a] += 1;
            yflat += y_eff_strides[a];
            if idx[a] < shape[a] {
                break;
            }
            idx[a] = 0;
            yflat -= y_eff_strides[a] * shape[a];
        }
    }
}

/// Source index inside the unpadded extent for output position `pos`.
fn pad_source(pos: usize, before: usize, n: usize, mode: PadMode) -> usize {
    if pos < before {
        match mode {
            PadMode::Reflect => before - pos,
            PadMode::Replicate => 0,
        }
    } else if pos < before + n {
        pos - before
    } else {
        let k = pos - before - n;
        match mode {
            PadMode::Reflect => n - 2 - k,
            PadMode::Replicate => n - 1,
        }
    }
}

/// Splits a shape at `axis` into (outer, lane length, inner) products.
fn lane_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let lanes = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, lanes, inner)
}

fn norm_chunk_len(shape: &[usize], kind: NormKind) -> Result<usize> {
    match kind {
        NormKind::Instance => {
            if shape.len() < 2 {
                return Err(Error::Config(format!(
                    "instance norm needs rank >= 2, got {shape:?}"
                )));
            }
            Ok(shape[1..].iter().product())
        }
        NormKind::Layer => {
            if shape.is_empty() {
                return Err(Error::Config("layer norm on rank-0 tensor".into()));
            }
            Ok(shape[shape.len() - 1])
        }
        NormKind::Group(groups) => {
            if shape.is_empty() {
                return Err(Error::Config("group norm on rank-0 tensor".into()));
            }
            let last = shape[shape.len() - 1];
            if groups == 0 || last % groups != 0 {
                return Err(Error::Config(format!(
                    "group norm with {groups} groups over extent {last}"
                )));
            }
            Ok(last / groups)
        }
    }
}

fn unary_eval(kind: Unary, x: f64) -> f64 {
    match kind {
        Unary::Sigmoid => sigmoid(x),
        Unary::Tanh => x.tanh(),
        Unary::Gelu => {
            let u = GELU_C * (x + 0.044715 * x * x * x);
            0.5 * x * (1.0 + u.tanh())
        }
        Unary::Swish => x * sigmoid(x),
        Unary::Softplus => {
            // max(x,0) + ln(1 + e^{-|x|}) avoids overflow on both tails
            x.max(0.0) + (-x.abs()).exp().ln_1p()
        }
        Unary::Relu => x.max(0.0),
        Unary::Exp => x.exp(),
        Unary::Ln => x.ln(),
        Unary::Sqrt => x.sqrt(),
    }
}

fn unary_deriv(kind: Unary, x: f64, y: f64) -> f64 {
    match kind {
        Unary::Sigmoid => y * (1.0 - y),
        Unary::Tanh => 1.0 - y * y,
        Unary::Gelu => {
            let u = GELU_C * (x + 0.044715 * x * x * x);
            let t = u.tanh();
            0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
        }
        Unary::Swish => {
            let s = sigmoid(x);
            s * (1.0 + x * (1.0 - s))
        }
        Unary::Softplus => sigmoid(x),
        Unary::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Unary::Exp => y,
        Unary::Ln => 1.0 / x,
        Unary::Sqrt => 0.5 / y,
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// sqrt(2/pi) for the tanh form of GeLU
const GELU_C: f64 = 0.797_884_560_802_865_4;
