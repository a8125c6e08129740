//! Dynamic computation record and the reverse pass over it.
//!
//! A [`Graph`] is rebuilt for every forward pass. Each operation appends a
//! node holding its output value plus whatever the backward rule needs.
//! [`Graph::backward`] walks the nodes in reverse insertion order, which is a
//! valid topological order because inputs always precede outputs.

use std::sync::Arc;

use crate::error::{AutodiffError, Result};
use crate::grid::BilinearGrid;
use crate::linalg;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, gemm_into, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    LhsScalar,
    RhsScalar,
}

/// Geometry of a square-kernel 2D convolution over `[batch, height, width, channels]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    /// Calls `f(row, col, src)` for every in-bounds (patch row, patch column,
    /// source index) triple of the im2col expansion.
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (ho, wo) = (self.out_height(), self.out_width());
        let k = self.kernel;
        let ncols = k * k * self.channels;
        for b in 0..self.batch {
            for oy in 0..ho {
                for ox in 0..wo {
                    let row = (b * ho + oy) * wo + ox;
                    for ky in 0..k {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix < 0 || ix >= self.width as isize {
                                continue;
                            }
                            let src = ((b * self.height + iy as usize) * self.width + ix as usize)
                                * self.channels;
                            let col = (ky * k + kx) * self.channels;
                            for c in 0..self.channels {
                                f(row * ncols, col + c, src + c);
                            }
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Div(Var, Var, Bcast),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Slice { src: Var, axis: usize, start: usize },
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    Exp(Var),
    Log(Var),
    Square(Var),
    Sqrt(Var),
    Tanh(Var),
    Sigmoid(Var),
    LeakyRelu(Var, f64),
    Softplus(Var),
    Clamp(Var, f64, f64),
    BatchNorm { x: Var, inv_std: Vec<f64> },
    Inverse(Var),
    Trace(Var),
    Im2Col(Var, ConvGeometry),
    SegmentMean(Var, usize),
    RepeatRows(Var, usize),
    PairwiseSqDist(Var),
    PairwiseAngle { x: Var, origin: [f64; 2], valid: Vec<bool> },
    Bilinear { points: Var, partials: Vec<[f64; 2]> },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Batch statistics produced by a training-mode batch normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Dynamic tape of executed operations.
#[derive(Debug, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(Var, ParamId)>,
    condition_bound: f64,
    degenerate_angles: usize,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn invalid(op: &'static str, t: &Tensor, reason: impl Into<String>) -> AutodiffError {
    AutodiffError::InvalidShape {
        op,
        shape: t.shape().to_vec(),
        reason: reason.into(),
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

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            condition_bound: linalg::DEFAULT_CONDITION_BOUND,
            degenerate_angles: 0,
        }
    }

    /// Condition-number bound applied by [`Graph::inverse`].
    pub fn set_condition_bound(&mut self, bound: f64) {
        self.condition_bound = bound;
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Number of angle pairs that hit a degenerate (near-zero) segment.
    pub fn degenerate_angle_count(&self) -> usize {
        self.degenerate_angles
    }

    /// Parameter leaves recorded through [`Graph::param`].
    pub fn param_leaves(&self) -> &[(Var, ParamId)] {
        &self.params
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(AutodiffError::NonFiniteValue { op: name });
        }
        let requires_grad = self.op_inputs(&op).iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn op_inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Add(a, b, _)
            | Op::Sub(a, b, _)
            | Op::Mul(a, b, _)
            | Op::Div(a, b, _)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b)
            | Op::MatMul(a, b) => vec![*a, *b],
            Op::Concat(xs, _) => xs.clone(),
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumAxis(a, _)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Square(a)
            | Op::Sqrt(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::LeakyRelu(a, _)
            | Op::Softplus(a)
            | Op::Clamp(a, _, _)
            | Op::Inverse(a)
            | Op::Trace(a)
            | Op::Im2Col(a, _)
            | Op::SegmentMean(a, _)
            | Op::RepeatRows(a, _)
            | Op::PairwiseSqDist(a) => vec![*a],
            Op::Slice { src, .. } => vec![*src],
            Op::BatchNorm { x, .. } => vec![*x],
            Op::PairwiseAngle { x, .. } => vec![*x],
            Op::Bilinear { points, .. } => vec![*points],
        }
    }

    // ----- leaves -------------------------------------------------------

    /// Leaf holding `value`; gradients are tracked when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Leaf copied from a parameter store. Frozen parameters and buffers
    /// enter as constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        let v = self.leaf(p.value.clone(), p.is_trainable());
        if p.is_trainable() {
            self.params.push((v, id));
        }
        v
    }

    // ----- elementwise binary -------------------------------------------

    fn bcast(&self, op: &'static str, a: Var, b: Var) -> Result<Bcast> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            Ok(Bcast::Same)
        } else if ta.is_scalar() {
            Ok(Bcast::LhsScalar)
        } else if tb.is_scalar() {
            Ok(Bcast::RhsScalar)
        } else {
            Err(shape_err(op, ta, tb))
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        mk: impl Fn(Var, Var, Bcast) -> Op,
    ) -> Result<Var> {
        let bc = self.bcast(name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let (shape, data) = match bc {
            Bcast::Same => (
                ta.shape().to_vec(),
                ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect(),
            ),
            Bcast::LhsScalar => {
                let x = ta.item();
                (tb.shape().to_vec(), tb.data().iter().map(|&y| f(x, y)).collect())
            }
            Bcast::RhsScalar => {
                let y = tb.item();
                (ta.shape().to_vec(), ta.data().iter().map(|&x| f(x, y)).collect())
            }
        };
        self.push(Tensor::from_parts(shape, data), mk(a, b, bc), name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    fn row_op(
        &mut self,
        name: &'static str,
        x: Var,
        row: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (tx, tr) = (self.value(x), self.value(row));
        let (_, c) = tx.dims2()?;
        if tr.numel() != c || tr.rank() != 1 {
            return Err(shape_err(name, tx, tr));
        }
        let r = tr.data();
        let data = tx
            .data()
            .chunks(c)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(&v, &b)| f(v, b)))
            .collect();
        let shape = tx.shape().to_vec();
        self.push(Tensor::from_parts(shape, data), op, name)
    }

    /// `x + b` with `b` broadcast over the rows of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.row_op("add_row", x, bias, |v, b| v + b, Op::AddRow(x, bias))
    }

    /// `x ⊙ s` with `s` broadcast over the rows of `x`.
    pub fn mul_row(&mut self, x: Var, scale: Var) -> Result<Var> {
        self.row_op("mul_row", x, scale, |v, s| v * s, Op::MulRow(x, scale))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let v = self.value(x).scale(s);
        self.push(v, Op::Scale(x, s), "scale")
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        let v = self.value(x).map(|a| a + s);
        self.push(v, Op::AddScalar(x), "add_scalar")
    }

    // ----- shape ops ----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        self.push(v, Op::MatMul(a, b), "matmul")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).transpose2()?;
        self.push(v, Op::Transpose(x), "transpose")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshaped(shape)?;
        self.push(v, Op::Reshape(x), "reshape")
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .value(*xs.first().ok_or_else(|| AutodiffError::InvalidShape {
                op: "concat",
                shape: vec![],
                reason: "no inputs".into(),
            })?)
            .clone();
        if axis >= first.rank() {
            return Err(invalid("concat", &first, format!("axis {axis} out of range")));
        }
        let mut total = 0;
        for &x in xs {
            let t = self.value(x);
            let ok = t.rank() == first.rank()
                && t.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(shape_err("concat", &first, t));
            }
            total += t.shape()[axis];
        }
        let (outer, _, inner) = axis_split(first.shape(), axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let t = self.value(x);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        self.push(Tensor::from_parts(shape, data), Op::Concat(xs.to_vec(), axis), "concat")
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() || start + len > t.shape()[axis] {
            return Err(invalid("slice", t, format!("range {start}..{} on axis {axis}", start + len)));
        }
        let (outer, n, inner) = axis_split(t.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            data.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        self.push(
            Tensor::from_parts(shape, data),
            Op::Slice {
                src: x,
                axis,
                start,
            },
            "slice",
        )
    }

    /// Repeats every row of a rank-2 tensor `times` times consecutively.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = t.dims2()?;
        let mut data = Vec::with_capacity(r * times * c);
        for row in t.data().chunks(c) {
            for _ in 0..times {
                data.extend_from_slice(row);
            }
        }
        self.push(
            Tensor::from_parts(vec![r * times, c], data),
            Op::RepeatRows(x, times),
            "repeat_rows",
        )
    }

    // ----- reductions ---------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.numel() == 0 {
            return Err(invalid("mean", t, "empty tensor"));
        }
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), "mean")
    }

    /// Sum over one axis, removing it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(invalid("sum_axis", t, format!("axis {axis} out of range")));
        }
        let (outer, n, inner) = axis_split(t.shape(), axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let base = (o * n + k) * inner;
                for i in 0..inner {
                    data[o * inner + i] += t.data()[base + i];
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        self.push(Tensor::from_parts(shape, data), Op::SumAxis(x, axis), "sum_axis")
    }

    /// Averages consecutive groups of `group` rows: `[b·group, c] → [b, c]`.
    pub fn segment_mean(&mut self, x: Var, group: usize) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = t.dims2()?;
        if group == 0 || r % group != 0 {
            return Err(invalid("segment_mean", t, format!("rows not divisible by {group}")));
        }
        let b = r / group;
        let mut data = vec![0.0; b * c];
        for (i, row) in t.data().chunks(c).enumerate() {
            let out = &mut data[(i / group) * c..(i / group + 1) * c];
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let inv = 1.0 / group as f64;
        data.iter_mut().for_each(|v| *v *= inv);
        self.push(Tensor::from_parts(vec![b, c], data), Op::SegmentMean(x, group), "segment_mean")
    }

    pub fn trace(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = t.dims2()?;
        if r != c {
            return Err(invalid("trace", t, "matrix must be square"));
        }
        let s = (0..r).map(|i| t.data()[i * c + i]).sum();
        self.push(Tensor::scalar(s), Op::Trace(x), "trace")
    }

    // ----- elementwise unary --------------------------------------------

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(f64::exp);
        self.push(v, Op::Exp(x), "exp")
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if let Some((index, &value)) = t.data().iter().enumerate().find(|(_, &v)| v <= 0.0) {
            return Err(AutodiffError::NonPositiveLog { value, index });
        }
        let v = t.map(f64::ln);
        self.push(v, Op::Log(x), "log")
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|a| a * a);
        self.push(v, Op::Square(x), "square")
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if let Some((index, &value)) = t.data().iter().enumerate().find(|(_, &v)| v < 0.0) {
            return Err(AutodiffError::NegativeSqrt { value, index });
        }
        let v = t.map(f64::sqrt);
        self.push(v, Op::Sqrt(x), "sqrt")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(f64::tanh);
        self.push(v, Op::Tanh(x), "tanh")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(sigmoid);
        self.push(v, Op::Sigmoid(x), "sigmoid")
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        let v = self.value(x).map(|a| if a > 0.0 { a } else { slope * a });
        self.push(v, Op::LeakyRelu(x, slope), "leaky_relu")
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|a| a.max(0.0) + (-a.abs()).exp().ln_1p());
        self.push(v, Op::Softplus(x), "softplus")
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let v = self.value(x).map(|a| a.clamp(lo, hi));
        self.push(v, Op::Clamp(x, lo, hi), "clamp")
    }

    // ----- normalization ------------------------------------------------

    /// Training-mode batch normalization over the rows of `[rows, features]`
    /// (no affine part). Returns the normalized tensor and the batch
    /// statistics (biased variance) for running-average updates.
    pub fn batch_norm_train(&mut self, x: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let t = self.value(x);
        let (r, c) = t.dims2()?;
        if r == 0 {
            return Err(invalid("batch_norm", t, "empty batch"));
        }
        let mut mean = vec![0.0; c];
        for row in t.data().chunks(c) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= r as f64);
        let mut var = vec![0.0; c];
        for row in t.data().chunks(c) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= r as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let data = t
            .data()
            .chunks(c)
            .flat_map(|row| {
                row.iter()
                    .zip(&mean)
                    .zip(&inv_std)
                    .map(|((v, m), s)| (v - m) * s)
                    .collect::<Vec<_>>()
            })
            .collect();
        let shape = t.shape().to_vec();
        let out = self.push(
            Tensor::from_parts(shape, data),
            Op::BatchNorm { x, inv_std },
            "batch_norm",
        )?;
        Ok((out, BatchStats { mean, var }))
    }

    // ----- linear algebra -----------------------------------------------

    /// Matrix inverse; backward applies `dA = -A⁻ᵀ G A⁻ᵀ`.
    pub fn inverse(&mut self, x: Var) -> Result<Var> {
        let inv = linalg::inverse(self.value(x), self.condition_bound)?;
        self.push(inv, Op::Inverse(x), "inverse")
    }

    // ----- convolution --------------------------------------------------

    /// Patch extraction for convolution: `[B, H, W, C]` →
    /// `[B·Ho·Wo, k·k·C]` (zero padding).
    pub fn im2col(&mut self, x: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        let t = self.value(x);
        let geom = match t.shape() {
            &[batch, height, width, channels] => ConvGeometry {
                batch,
                height,
                width,
                channels,
                kernel,
                stride,
                padding,
            },
            _ => return Err(invalid("im2col", t, "expected [B, H, W, C]")),
        };
        if stride == 0 || kernel == 0 || geom.height + 2 * padding < kernel || geom.width + 2 * padding < kernel {
            return Err(invalid("im2col", t, "kernel does not fit"));
        }
        let rows = geom.batch * geom.out_height() * geom.out_width();
        let cols = kernel * kernel * geom.channels;
        let mut data = vec![0.0; rows * cols];
        let src = t.data();
        geom.for_each(|row_base, col, s| data[row_base + col] = src[s]);
        self.push(Tensor::from_parts(vec![rows, cols], data), Op::Im2Col(x, geom), "im2col")
    }

    // ----- trajectory-set primitives -----------------------------------

    /// Squared Euclidean distances between all row pairs of `[n, d]`.
    pub fn pairwise_sq_dist(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (n, d) = t.dims2()?;
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                let s: f64 = (0..d)
                    .map(|k| {
                        let diff = t.data()[i * d + k] - t.data()[j * d + k];
                        diff * diff
                    })
                    .sum();
                data[i * n + j] = s;
                data[j * n + i] = s;
            }
        }
        self.push(Tensor::from_parts(vec![n, n], data), Op::PairwiseSqDist(x), "pairwise_sq_dist")
    }

    /// Un-oriented angles in `[0, π]` between the segments `origin → x_i`
    /// and `origin → x_j` for the rows of `[n, 2]`. A segment shorter than
    /// `eps` yields angle 0 against every other row and bumps
    /// [`Graph::degenerate_angle_count`].
    pub fn pairwise_angle(&mut self, x: Var, origin: [f64; 2], eps: f64) -> Result<Var> {
        let t = self.value(x);
        let (n, d) = t.dims2()?;
        if d != 2 {
            return Err(invalid("pairwise_angle", t, "expected [n, 2]"));
        }
        let rel: Vec<[f64; 2]> = (0..n)
            .map(|i| [t.data()[2 * i] - origin[0], t.data()[2 * i + 1] - origin[1]])
            .collect();
        let valid: Vec<bool> = rel.iter().map(|a| a[0].hypot(a[1]) > eps).collect();
        let mut data = vec![0.0; n * n];
        let mut degenerate = 0;
        for i in 0..n {
            for j in i + 1..n {
                if !(valid[i] && valid[j]) {
                    degenerate += 1;
                    continue;
                }
                let (a, b) = (rel[i], rel[j]);
                let cross = a[0] * b[1] - a[1] * b[0];
                let dot = a[0] * b[0] + a[1] * b[1];
                let th = cross.atan2(dot).abs();
                data[i * n + j] = th;
                data[j * n + i] = th;
            }
        }
        self.degenerate_angles += degenerate;
        self.push(
            Tensor::from_parts(vec![n, n], data),
            Op::PairwiseAngle { x, origin, valid },
            "pairwise_angle",
        )
    }

    /// Samples `grid` bilinearly at the rows of `[k, 2]`, returning `[k]`.
    pub fn bilinear_sample(&mut self, points: Var, grid: &Arc<BilinearGrid>) -> Result<Var> {
        let t = self.value(points);
        let (k, d) = t.dims2()?;
        if d != 2 {
            return Err(invalid("bilinear_sample", t, "expected [k, 2]"));
        }
        let mut values = Vec::with_capacity(k);
        let mut partials = Vec::with_capacity(k);
        for p in t.data().chunks(2) {
            let (v, g) = grid.sample([p[0], p[1]]);
            values.push(v);
            partials.push(g);
        }
        self.push(
            Tensor::from_parts(vec![k], values),
            Op::Bilinear { points, partials },
            "bilinear_sample",
        )
    }

    // ----- reverse pass -------------------------------------------------

    /// Reverse pass from a scalar loss with unit seed.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let t = self.value(loss);
        if !t.is_scalar() {
            return Err(AutodiffError::NonScalarLoss {
                shape: t.shape().to_vec(),
            });
        }
        self.backward_with_seed(loss, Tensor::from_parts(t.shape().to_vec(), vec![1.0]))
    }

    /// Reverse pass seeded with an arbitrary upstream gradient shaped like
    /// `output`. The record is left intact, so repeated calls are identical.
    pub fn backward_with_seed(&self, output: Var, seed: Tensor) -> Result<Gradients> {
        let out = self.value(output);
        if out.shape() != seed.shape() {
            return Err(shape_err("backward_seed", out, &seed));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed.into_data());
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if self.nodes[idx].requires_grad {
                self.propagate(idx, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        let tensors = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|g| Tensor::from_parts(n.value.shape().to_vec(), g)))
            .collect();
        Ok(Gradients { grads: tensors })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut send = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                slot @ None => *slot = Some(contrib),
            }
        };
        let unary = |v: Var, f: &dyn Fn(usize) -> f64| -> Vec<f64> {
            (0..val(v).len()).map(|i| g[i] * f(i)).collect()
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b, bc) | Op::Sub(a, b, bc) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let total: f64 = g.iter().sum();
                let (ga, gb) = match bc {
                    Bcast::Same => (g.to_vec(), g.iter().map(|x| sign * x).collect()),
                    Bcast::LhsScalar => (vec![total], g.iter().map(|x| sign * x).collect()),
                    Bcast::RhsScalar => (g.to_vec(), vec![sign * total]),
                };
                send(*a, ga);
                send(*b, gb);
            }
            Op::Mul(a, b, bc) => {
                let (va, vb) = (val(*a), val(*b));
                let (ga, gb) = match bc {
                    Bcast::Same => (
                        g.iter().zip(vb).map(|(g, y)| g * y).collect(),
                        g.iter().zip(va).map(|(g, x)| g * x).collect(),
                    ),
                    Bcast::LhsScalar => (
                        vec![g.iter().zip(vb).map(|(g, y)| g * y).sum()],
                        g.iter().map(|g| g * va[0]).collect(),
                    ),
                    Bcast::RhsScalar => (
                        g.iter().map(|g| g * vb[0]).collect(),
                        vec![g.iter().zip(va).map(|(g, x)| g * x).sum()],
                    ),
                };
                send(*a, ga);
                send(*b, gb);
            }
            Op::Div(a, b, bc) => {
                let (va, vb) = (val(*a), val(*b));
                let n = g.len();
                let x = |i: usize| if *bc == Bcast::LhsScalar { va[0] } else { va[i] };
                let y = |i: usize| if *bc == Bcast::RhsScalar { vb[0] } else { vb[i] };
                let da: Vec<f64> = (0..n).map(|i| g[i] / y(i)).collect();
                let db: Vec<f64> = (0..n).map(|i| -g[i] * x(i) / (y(i) * y(i))).collect();
                let reduce = |v: Vec<f64>, scalar: bool| if scalar { vec![v.iter().sum()] } else { v };
                send(*a, reduce(da, *bc == Bcast::LhsScalar));
                send(*b, reduce(db, *bc == Bcast::RhsScalar));
            }
            Op::AddRow(x, b) => {
                let c = val(*b).len();
                let mut gb = vec![0.0; c];
                for row in g.chunks(c) {
                    gb.iter_mut().zip(row).for_each(|(s, v)| *s += v);
                }
                send(*x, g.to_vec());
                send(*b, gb);
            }
            Op::MulRow(x, s) => {
                let (vx, vs) = (val(*x), val(*s));
                let c = vs.len();
                let mut gs = vec![0.0; c];
                let mut gx = vec![0.0; g.len()];
                for (r, row) in g.chunks(c).enumerate() {
                    for j in 0..c {
                        gs[j] += row[j] * vx[r * c + j];
                        gx[r * c + j] = row[j] * vs[j];
                    }
                }
                send(*x, gx);
                send(*s, gs);
            }
            Op::Scale(x, s) => send(*x, g.iter().map(|v| v * s).collect()),
            Op::AddScalar(x) => send(*x, g.to_vec()),
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if self.nodes[a.0].requires_grad {
                    // dA = G · Bᵀ
                    let mut ga = vec![0.0; m * k];
                    gemm_into(m, n, k, g, (n as isize, 1), tb.data(), (1, n as isize), &mut ga, 0.0);
                    send(*a, ga);
                }
                if self.nodes[b.0].requires_grad {
                    // dB = Aᵀ · G
                    let mut gb = vec![0.0; k * n];
                    gemm_into(k, m, n, ta.data(), (1, k as isize), g, (n as isize, 1), &mut gb, 0.0);
                    send(*b, gb);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (node.value.shape()[0], node.value.shape()[1]);
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        gx[j * r + i] = g[i * c + j];
                    }
                }
                send(*x, gx);
            }
            Op::Reshape(x) => send(*x, g.to_vec()),
            Op::Concat(xs, axis) => {
                let (outer, total, inner) = axis_split(node.value.shape(), *axis);
                let mut offset = 0;
                for &x in xs {
                    let n = self.nodes[x.0].value.shape()[*axis];
                    let mut gx = Vec::with_capacity(outer * n * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        gx.extend_from_slice(&g[base..base + n * inner]);
                    }
                    offset += n;
                    send(x, gx);
                }
            }
            Op::Slice { src, axis, start } => {
                let src_shape = self.nodes[src.0].value.shape();
                let (outer, n, inner) = axis_split(src_shape, *axis);
                let len = node.value.shape()[*axis];
                let mut gx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    let dst = o * n * inner + start * inner;
                    let s = o * len * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g[s..s + len * inner]);
                }
                send(*src, gx);
            }
            Op::RepeatRows(x, times) => {
                let c = self.nodes[x.0].value.shape()[1];
                let r = self.nodes[x.0].value.shape()[0];
                let mut gx = vec![0.0; r * c];
                for (i, row) in g.chunks(c).enumerate() {
                    let dst = &mut gx[(i / times) * c..(i / times + 1) * c];
                    dst.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                }
                send(*x, gx);
            }
            Op::Sum(x) => send(*x, vec![g[0]; val(*x).len()]),
            Op::Mean(x) => {
                let n = val(*x).len();
                send(*x, vec![g[0] / n as f64; n]);
            }
            Op::SumAxis(x, axis) => {
                let (outer, n, inner) = axis_split(self.nodes[x.0].value.shape(), *axis);
                let mut gx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    for k in 0..n {
                        let base = (o * n + k) * inner;
                        gx[base..base + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                send(*x, gx);
            }
            Op::SegmentMean(x, group) => {
                let c = node.value.shape()[1];
                let r = self.nodes[x.0].value.shape()[0];
                let inv = 1.0 / *group as f64;
                let mut gx = vec![0.0; r * c];
                for (i, row) in gx.chunks_mut(c).enumerate() {
                    let src = &g[(i / group) * c..(i / group + 1) * c];
                    row.iter_mut().zip(src).for_each(|(d, s)| *d = s * inv);
                }
                send(*x, gx);
            }
            Op::Trace(x) => {
                let n = self.nodes[x.0].value.shape()[0];
                let mut gx = vec![0.0; n * n];
                for i in 0..n {
                    gx[i * n + i] = g[0];
                }
                send(*x, gx);
            }
            Op::Exp(x) => send(*x, unary(*x, &|i| out[i])),
            Op::Log(x) => {
                let vx = val(*x);
                send(*x, unary(*x, &|i| 1.0 / vx[i]));
            }
            Op::Square(x) => {
                let vx = val(*x);
                send(*x, unary(*x, &|i| 2.0 * vx[i]));
            }
            Op::Sqrt(x) => send(*x, unary(*x, &|i| 0.5 / out[i])),
            Op::Tanh(x) => send(*x, unary(*x, &|i| 1.0 - out[i] * out[i])),
            Op::Sigmoid(x) => send(*x, unary(*x, &|i| out[i] * (1.0 - out[i]))),
            Op::LeakyRelu(x, slope) => {
                let vx = val(*x);
                send(*x, unary(*x, &|i| if vx[i] > 0.0 { 1.0 } else { *slope }));
            }
            Op::Softplus(x) => {
                let vx = val(*x);
                send(*x, unary(*x, &|i| sigmoid(vx[i])));
            }
            Op::Clamp(x, lo, hi) => {
                let vx = val(*x);
                send(*x, unary(*x, &|i| if vx[i] >= *lo && vx[i] <= *hi { 1.0 } else { 0.0 }));
            }
            Op::BatchNorm { x, inv_std } => {
                let c = inv_std.len();
                let r = g.len() / c;
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for (grow, xrow) in g.chunks(c).zip(out.chunks(c)) {
                    for j in 0..c {
                        sum_g[j] += grow[j];
                        sum_gx[j] += grow[j] * xrow[j];
                    }
                }
                let rf = r as f64;
                let mut gx = vec![0.0; g.len()];
                for (i, (grow, xrow)) in g.chunks(c).zip(out.chunks(c)).enumerate() {
                    for j in 0..c {
                        gx[i * c + j] =
                            inv_std[j] / rf * (rf * grow[j] - sum_g[j] - xrow[j] * sum_gx[j]);
                    }
                }
                send(*x, gx);
            }
            Op::Inverse(x) => {
                // dA = -A⁻ᵀ G A⁻ᵀ
                let n = node.value.shape()[0];
                let inv = out;
                let mut tmp = vec![0.0; n * n];
                gemm_into(n, n, n, inv, (1, n as isize), g, (n as isize, 1), &mut tmp, 0.0);
                let mut gx = vec![0.0; n * n];
                gemm_into(n, n, n, &tmp, (n as isize, 1), inv, (1, n as isize), &mut gx, 0.0);
                gx.iter_mut().for_each(|v| *v = -*v);
                send(*x, gx);
            }
            Op::Im2Col(x, geom) => {
                let mut gx = vec![0.0; val(*x).len()];
                geom.for_each(|row_base, col, s| gx[s] += g[row_base + col]);
                send(*x, gx);
            }
            Op::PairwiseSqDist(x) => {
                let vx = val(*x);
                let n = node.value.shape()[0];
                let d = vx.len() / n.max(1);
                let mut gx = vec![0.0; vx.len()];
                for i in 0..n {
                    for j in 0..n {
                        if i == j {
                            continue;
                        }
                        let w = 2.0 * (g[i * n + j] + g[j * n + i]);
                        if w == 0.0 {
                            continue;
                        }
                        for k in 0..d {
                            gx[i * d + k] += w * (vx[i * d + k] - vx[j * d + k]);
                        }
                    }
                }
                send(*x, gx);
            }
            Op::PairwiseAngle { x, origin, valid } => {
                let vx = val(*x);
                let n = valid.len();
                let rel: Vec<[f64; 2]> =
                    (0..n).map(|i| [vx[2 * i] - origin[0], vx[2 * i + 1] - origin[1]]).collect();
                let mut gx = vec![0.0; vx.len()];
                for i in 0..n {
                    for j in i + 1..n {
                        if !(valid[i] && valid[j]) {
                            continue;
                        }
                        let w = g[i * n + j] + g[j * n + i];
                        let (a, b) = (rel[i], rel[j]);
                        let cross = a[0] * b[1] - a[1] * b[0];
                        let dot = a[0] * b[0] + a[1] * b[1];
                        let phi = cross.atan2(dot);
                        let sgn = if phi > 0.0 {
                            1.0
                        } else if phi < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        if sgn == 0.0 || w == 0.0 {
                            continue;
                        }
                        // phi = heading(b) - heading(a)
                        let na = a[0] * a[0] + a[1] * a[1];
                        let nb = b[0] * b[0] + b[1] * b[1];
                        let s = w * sgn;
                        gx[2 * i] += s * a[1] / na;
                        gx[2 * i + 1] += s * -a[0] / na;
                        gx[2 * j] += s * -b[1] / nb;
                        gx[2 * j + 1] += s * b[0] / nb;
                    }
                }
                send(*x, gx);
            }
            Op::Bilinear { points, partials } => {
                let mut gx = Vec::with_capacity(partials.len() * 2);
                for (gi, p) in g.iter().zip(partials) {
                    gx.push(gi * p[0]);
                    gx.push(gi * p[1]);
                }
                send(*points, gx);
            }
        }
    }
}

/// Gradients produced by one reverse pass, indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a node; `None` when nothing flowed into it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of a leaf, or zeros shaped like it when no path reached it.
    pub fn wrt(&self, graph: &Graph, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(graph.value(v).shape()))
    }

    /// Gradients of every trainable parameter leaf recorded in `graph`,
    /// summed per parameter.
    pub fn param_grads(&self, graph: &Graph) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> = Vec::new();
        for &(v, id) in graph.param_leaves() {
            let g = self.wrt(graph, v);
            if let Some((_, acc)) = out.iter_mut().find(|(pid, _)| *pid == id) {
                acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
            } else {
                out.push((id, g));
            }
        }
        out
    }
}

/// Plain product helper re-exported for callers that need an unrecorded
/// matrix product on raw slices.
pub fn matmul_slices(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    gemm(m, k, n, a, b)
}
