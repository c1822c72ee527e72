use std::collections::HashMap;
use std::sync::Arc;

use super::gemm::gemm;
use super::params::{ParamGrads, ParamId, ParamStore};
use super::tensor::{axis_extents, Tensor};
use super::AutodiffError;

type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Spatial geometry of a 2-D convolution over a `[C, H, W]` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    LogSumExp { x: Var, axis: usize },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    ReduceSum { x: Var, axis: Option<usize> },
    ReduceMean { x: Var, axis: Option<usize> },
    GatherRows { x: Var, rows: Vec<usize> },
    Reshape(Var),
    Pad2d { x: Var, pad: usize },
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom, cols: Vec<f64> },
    Conv2dOneHot { labels: Arc<[u8]>, w: Var, b: Var, geom: ConvGeom },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode tape. Nodes are appended in evaluation order, which is a
/// topological order of the computation DAG.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    param_order: Vec<(ParamId, Var)>,
}

/// Gradients of a scalar with respect to every node that required one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients aligned with `store`; parameters not used on the tape get zeros.
    pub fn param_grads(&self, store: &ParamStore) -> ParamGrads {
        let mut out = ParamGrads::zeros_like(store);
        for &(id, var) in &self.params {
            if let Some(g) = self.wrt(var) {
                out.get_mut(id).add_assign(g);
            }
        }
        out
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn softmax_along(x: &Tensor, axis: usize) -> Tensor {
    let (outer, n, inner) = axis_extents(x.shape(), axis);
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * n + j) * inner + i;
            let max = (0..n).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..n {
                let e = (src[at(j)] - max).exp();
                out[at(j)] = e;
                sum += e;
            }
            for j in 0..n {
                out[at(j)] /= sum;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}

fn without_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.remove(axis);
    s
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A constant input; no gradient is tracked through it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A free input whose gradient is tracked.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Bring a stored parameter onto the tape. Repeated calls return the
    /// same node, so gradients from every use accumulate in one place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param, true);
        self.params.insert(id, v);
        self.param_order.push((id, v));
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    fn zip(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    /// `x[..., n] + b[n]`, broadcasting the bias over leading dimensions.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let n = tb.len();
        if tb.rank() != 1 || tx.rank() == 0 || tx.shape()[tx.rank() - 1] != n {
            return Err(shape_err("add_bias", tx.shape(), tb.shape()));
        }
        let bias = tb.data();
        let data = tx.data().iter().enumerate().map(|(i, &v)| v + bias[i % n]).collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(t, Op::AddBias(x, b), rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        self.value(x).map(f)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.unary(x, |v| c * v);
        let rg = self.rg(x);
        self.push(t, Op::Scale(x, c), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let t = self.unary(x, |v| v + c);
        let rg = self.rg(x);
        self.push(t, Op::AddScalar(x), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let t = self.unary(x, f64::exp);
        let rg = self.rg(x);
        self.push(t, Op::Exp(x), rg)
    }

    pub fn log(&mut self, x: Var) -> Var {
        let t = self.unary(x, f64::ln);
        let rg = self.rg(x);
        self.push(t, Op::Log(x), rg)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let t = self.unary(x, |v| v * v);
        let rg = self.rg(x);
        self.push(t, Op::Square(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.unary(x, |v| v.max(0.0));
        let rg = self.rg(x);
        self.push(t, Op::Relu(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.unary(x, f64::tanh);
        let rg = self.rg(x);
        self.push(t, Op::Tanh(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.unary(x, |v| 1.0 / (1.0 + (-v).exp()));
        let rg = self.rg(x);
        self.push(t, Op::Sigmoid(x), rg)
    }

    /// Elementwise clamp to `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let t = self.unary(x, |v| v.clamp(lo, hi));
        let rg = self.rg(x);
        self.push(t, Op::Clamp { x, lo, hi }, rg)
    }

    fn check_axis(&self, x: Var, axis: usize, op: &'static str) -> Result<()> {
        let rank = self.value(x).rank();
        if axis >= rank {
            return Err(AutodiffError::AxisOutOfRange { op, axis, rank });
        }
        Ok(())
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "softmax")?;
        let t = softmax_along(self.value(x), axis);
        let rg = self.rg(x);
        Ok(self.push(t, Op::Softmax { x, axis }, rg))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "log_softmax")?;
        let tx = self.value(x);
        let (outer, n, inner) = axis_extents(tx.shape(), axis);
        let src = tx.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..n).map(|j| (src[at(j)] - max).exp()).sum::<f64>().ln();
                for j in 0..n {
                    out[at(j)] = src[at(j)] - lse;
                }
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::LogSoftmax { x, axis }, rg))
    }

    /// `log Σ exp(x)` along `axis` (removed from the output shape), computed
    /// with max-subtraction.
    pub fn logsumexp(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "logsumexp")?;
        let tx = self.value(x);
        let (outer, n, inner) = axis_extents(tx.shape(), axis);
        let src = tx.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                out[o * inner + i] = if max == f64::NEG_INFINITY {
                    max
                } else {
                    max + (0..n).map(|j| (src[at(j)] - max).exp()).sum::<f64>().ln()
                };
            }
        }
        let t = Tensor::new(without_axis(tx.shape(), axis), out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::LogSumExp { x, axis }, rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs.first().ok_or(AutodiffError::EmptyConcat)?;
        self.check_axis(first, axis, "concat")?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_extents(&shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// `len` entries of `x` along `axis`, starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis(x, axis, "slice")?;
        let tx = self.value(x);
        let (outer, n, inner) = axis_extents(tx.shape(), axis);
        if start + len > n {
            return Err(AutodiffError::SliceOutOfRange { start, len, extent: n });
        }
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * n + start) * inner;
            out.extend_from_slice(&tx.data()[from..from + len * inner]);
        }
        let mut shape = tx.shape().to_vec();
        shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Slice { x, axis, start }, rg))
    }

    fn reduce(&mut self, x: Var, axis: Option<usize>, mean: bool) -> Result<Var> {
        let tx = self.value(x);
        let t = match axis {
            None => {
                let s: f64 = tx.data().iter().sum();
                let n = tx.len().max(1) as f64;
                Tensor::scalar(if mean { s / n } else { s })
            }
            Some(axis) => {
                let rank = tx.rank();
                if axis >= rank {
                    return Err(AutodiffError::AxisOutOfRange {
                        op: "reduce",
                        axis,
                        rank,
                    });
                }
                let (outer, n, inner) = axis_extents(tx.shape(), axis);
                let src = tx.data();
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for j in 0..n {
                        for i in 0..inner {
                            out[o * inner + i] += src[(o * n + j) * inner + i];
                        }
                    }
                }
                if mean {
                    out.iter_mut().for_each(|v| *v /= n as f64);
                }
                Tensor::new(without_axis(tx.shape(), axis), out)?
            }
        };
        let rg = self.rg(x);
        let op = if mean {
            Op::ReduceMean { x, axis }
        } else {
            Op::ReduceSum { x, axis }
        };
        Ok(self.push(t, op, rg))
    }

    /// Sum over `axis`, or over everything to a scalar when `axis` is `None`.
    pub fn reduce_sum(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(x, axis, false)
    }

    pub fn reduce_mean(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(x, axis, true)
    }

    /// Rows `rows[i]` of a matrix, stacked. Rows may repeat.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 2 {
            return Err(shape_err("gather_rows", tx.shape(), &[]));
        }
        let (r, c) = (tx.shape()[0], tx.shape()[1]);
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            if i >= r {
                return Err(AutodiffError::SliceOutOfRange {
                    start: i,
                    len: 1,
                    extent: r,
                });
            }
            out.extend_from_slice(&tx.data()[i * c..(i + 1) * c]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![rows.len(), c], out)?,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Single row of a matrix as a `[1, n]` matrix.
    pub fn gather_row(&mut self, x: Var, row: usize) -> Result<Var> {
        self.gather_rows(x, &[row])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        if shape.iter().product::<usize>() != tx.len() {
            return Err(shape_err("reshape", tx.shape(), shape));
        }
        let t = tx.reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Zero-pad the two spatial dimensions of a `[C, H, W]` tensor.
    pub fn pad2d(&mut self, x: Var, pad: usize) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 3 {
            return Err(shape_err("pad2d", tx.shape(), &[]));
        }
        let (c, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        let mut out = vec![0.0; c * ph * pw];
        for ch in 0..c {
            for y in 0..h {
                let src = &tx.data()[(ch * h + y) * w..(ch * h + y + 1) * w];
                let dst = (ch * ph + y + pad) * pw + pad;
                out[dst..dst + w].copy_from_slice(src);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![c, ph, pw], out)?, Op::Pad2d { x, pad }, rg))
    }

    /// Valid 2-D convolution: `x[C, H, W]`, `w[O, C, k, k]`, `b[O]` → `[O, Ho, Wo]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let (xs, ws) = (tx.shape(), tw.shape());
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] || ws[2] != ws[3] || stride == 0 {
            return Err(shape_err("conv2d", xs, ws));
        }
        if tb.shape() != [ws[0]] {
            return Err(shape_err("conv2d bias", tb.shape(), &ws[..1]));
        }
        if xs[1] < ws[2] || xs[2] < ws[3] {
            return Err(shape_err("conv2d (input smaller than kernel)", xs, ws));
        }
        let geom = ConvGeom {
            in_channels: xs[0],
            in_h: xs[1],
            in_w: xs[2],
            out_channels: ws[0],
            kernel: ws[2],
            stride,
            padding: 0,
        };
        let cols = im2col(tx.data(), &geom);
        let p = geom.out_h() * geom.out_w();
        let o = geom.out_channels;
        let mut out = vec![0.0; o * p];
        gemm(o, geom.patch_len(), p, tw.data(), false, &cols, false, &mut out, false);
        for (ch, row) in out.chunks_mut(p).enumerate() {
            let bias = tb.data()[ch];
            row.iter_mut().for_each(|v| *v += bias);
        }
        let t = Tensor::new(vec![o, geom.out_h(), geom.out_w()], out)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        // Columns are only needed for the weight gradient.
        let cols = if self.rg(w) { cols } else { Vec::new() };
        Ok(self.push(t, Op::Conv2d { x, w, b, geom, cols }, rg))
    }

    /// Convolution of a one-hot encoded label image without materializing
    /// the one-hot tensor. Equivalent to `conv2d(pad2d(onehot(labels)))`.
    /// Labels are row-major `[h, w]` with values `< classes`.
    #[allow(clippy::too_many_arguments)]
    pub fn conv2d_onehot(
        &mut self,
        labels: Arc<[u8]>,
        h: usize,
        w_px: usize,
        classes: usize,
        w: Var,
        b: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (tw, tb) = (self.value(w), self.value(b));
        let ws = tw.shape();
        if ws.len() != 4 || ws[1] != classes || ws[2] != ws[3] || labels.len() != h * w_px || stride == 0 {
            return Err(shape_err("conv2d_onehot", &[classes, h, w_px], ws));
        }
        if tb.shape() != [ws[0]] {
            return Err(shape_err("conv2d_onehot bias", tb.shape(), &ws[..1]));
        }
        if h + 2 * padding < ws[2] || w_px + 2 * padding < ws[2] {
            return Err(shape_err("conv2d_onehot (input smaller than kernel)", &[classes, h, w_px], ws));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(AutodiffError::LabelOutOfRange { label: bad, classes });
        }
        let geom = ConvGeom {
            in_channels: classes,
            in_h: h,
            in_w: w_px,
            out_channels: ws[0],
            kernel: ws[2],
            stride,
            padding,
        };
        let o = geom.out_channels;
        let k = geom.kernel;
        // [tap][class][o] so the inner loop is a contiguous axpy.
        let mut wt = vec![0.0; k * k * classes * o];
        for oc in 0..o {
            for c in 0..classes {
                for tap in 0..k * k {
                    wt[(tap * classes + c) * o + oc] = tw.data()[(oc * classes + c) * k * k + tap];
                }
            }
        }
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let mut acc = vec![0.0; o];
        let mut out = vec![0.0; o * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                acc.copy_from_slice(tb.data());
                for_each_tap(&geom, oy, ox, |tap, iy, ix| {
                    let c = labels[iy * w_px + ix] as usize;
                    let row = &wt[(tap * classes + c) * o..(tap * classes + c + 1) * o];
                    for (a, wv) in acc.iter_mut().zip(row) {
                        *a += wv;
                    }
                });
                let p = oy * ow + ox;
                for (oc, a) in acc.iter().enumerate() {
                    out[oc * oh * ow + p] = *a;
                }
            }
        }
        let t = Tensor::new(vec![o, oh, ow], out)?;
        let rg = self.rg(w) || self.rg(b);
        Ok(self.push(t, Op::Conv2dOneHot { labels, w, b, geom }, rg))
    }

    /// Reverse sweep from a scalar `loss`. Every node is visited once, in
    /// reverse creation order; contributions accumulate in that fixed order.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &gy, &mut grads)?;
            }
            grads[i] = Some(gy);
        }
        Ok(Gradients {
            grads,
            params: self.param_order.clone(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, gy: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let y = &node.value;
        let like = |v: Var, data: Vec<f64>| Tensor::new(self.shape(v).to_vec(), data).expect("shape");
        let zipg = |v: Var, f: &dyn Fn(f64, f64) -> f64| {
            // f(upstream gradient, input value)
            let data = gy.data().iter().zip(self.value(v).data()).map(|(&g, &x)| f(g, x)).collect();
            like(v, data)
        };
        let zipy = |v: Var, f: &dyn Fn(f64, f64) -> f64| {
            // f(upstream gradient, output value)
            let data = gy.data().iter().zip(y.data()).map(|(&g, &o)| f(g, o)).collect();
            like(v, data)
        };
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.rg(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, gy.data(), false, self.value(*b).data(), true, &mut da, false);
                    self.accumulate(grads, *a, like(*a, da));
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, self.value(*a).data(), true, gy.data(), false, &mut db, false);
                    self.accumulate(grads, *b, like(*b, db));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.clone());
            }
            Op::AddBias(x, b) => {
                self.accumulate(grads, *x, gy.clone());
                if self.rg(*b) {
                    let n = self.value(*b).len();
                    let mut db = vec![0.0; n];
                    for (j, g) in gy.data().iter().enumerate() {
                        db[j % n] += g;
                    }
                    self.accumulate(grads, *b, like(*b, db));
                }
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                if self.rg(*b) {
                    self.accumulate(grads, *b, gy.map(|g| -g));
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, zipg(*b, &|g, x| g * x));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, zipg(*a, &|g, x| g * x));
                }
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.accumulate(grads, *x, gy.map(|g| g * c));
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                let g = gy.reshaped(self.shape(*x))?;
                self.accumulate(grads, *x, g);
            }
            Op::Exp(x) => self.accumulate(grads, *x, zipy(*x, &|g, o| g * o)),
            Op::Log(x) => self.accumulate(grads, *x, zipg(*x, &|g, v| g / v)),
            Op::Square(x) => self.accumulate(grads, *x, zipg(*x, &|g, v| 2.0 * v * g)),
            Op::Relu(x) => self.accumulate(grads, *x, zipg(*x, &|g, v| if v > 0.0 { g } else { 0.0 })),
            Op::Tanh(x) => self.accumulate(grads, *x, zipy(*x, &|g, o| g * (1.0 - o * o))),
            Op::Sigmoid(x) => self.accumulate(grads, *x, zipy(*x, &|g, o| g * o * (1.0 - o))),
            Op::Clamp { x, lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                self.accumulate(grads, *x, zipg(*x, &|g, v| if v >= lo && v <= hi { g } else { 0.0 }));
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = axis_extents(y.shape(), *axis);
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + i;
                        let dot: f64 = (0..n).map(|j| gy.data()[at(j)] * y.data()[at(j)]).sum();
                        for j in 0..n {
                            dx[at(j)] = y.data()[at(j)] * (gy.data()[at(j)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, like(*x, dx));
            }
            Op::LogSoftmax { x, axis } => {
                let (outer, n, inner) = axis_extents(y.shape(), *axis);
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + i;
                        let total: f64 = (0..n).map(|j| gy.data()[at(j)]).sum();
                        for j in 0..n {
                            dx[at(j)] = gy.data()[at(j)] - y.data()[at(j)].exp() * total;
                        }
                    }
                }
                self.accumulate(grads, *x, like(*x, dx));
            }
            Op::LogSumExp { x, axis } => {
                let sm = softmax_along(self.value(*x), *axis);
                let (outer, n, inner) = axis_extents(sm.shape(), *axis);
                let mut dx = sm.into_data();
                for o in 0..outer {
                    for j in 0..n {
                        for i in 0..inner {
                            dx[(o * n + j) * inner + i] *= gy.data()[o * inner + i];
                        }
                    }
                }
                self.accumulate(grads, *x, like(*x, dx));
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = axis_extents(y.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis];
                    if self.rg(v) {
                        let mut dv = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let from = (o * total + offset) * inner;
                            dv.extend_from_slice(&gy.data()[from..from + len * inner]);
                        }
                        self.accumulate(grads, v, like(v, dv));
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, n, inner) = axis_extents(self.shape(*x), *axis);
                let len = y.shape()[*axis];
                let mut dx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    let to = (o * n + start) * inner;
                    let from = o * len * inner;
                    dx[to..to + len * inner].copy_from_slice(&gy.data()[from..from + len * inner]);
                }
                self.accumulate(grads, *x, like(*x, dx));
            }
            Op::ReduceSum { x, axis } | Op::ReduceMean { x, axis } => {
                let mean = matches!(node.op, Op::ReduceMean { .. });
                let xs = self.shape(*x);
                let dx = match axis {
                    None => {
                        let n = xs.iter().product::<usize>().max(1) as f64;
                        let g = if mean { gy.item() / n } else { gy.item() };
                        vec![g; xs.iter().product()]
                    }
                    Some(axis) => {
                        let (outer, n, inner) = axis_extents(xs, *axis);
                        let div = if mean { n as f64 } else { 1.0 };
                        let mut dx = vec![0.0; outer * n * inner];
                        for o in 0..outer {
                            for j in 0..n {
                                for i in 0..inner {
                                    dx[(o * n + j) * inner + i] = gy.data()[o * inner + i] / div;
                                }
                            }
                        }
                        dx
                    }
                };
                self.accumulate(grads, *x, like(*x, dx));
            }
            Op::GatherRows { x, rows } => {
                let c = y.shape()[1];
                let mut dx = vec![0.0; self.value(*x).len()];
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..c {
                        dx[r * c + j] += gy.data()[k * c + j];
                    }
                }
                self.accumulate(grads, *x, like(*x, dx));
            }
            Op::Pad2d { x, pad } => {
                let xs = self.shape(*x);
                let (c, h, w) = (xs[0], xs[1], xs[2]);
                let (ph, pw) = (h + 2 * pad, w + 2 * pad);
                let mut dx = Vec::with_capacity(c * h * w);
                for ch in 0..c {
                    for yy in 0..h {
                        let from = (ch * ph + yy + pad) * pw + pad;
                        dx.extend_from_slice(&gy.data()[from..from + w]);
                    }
                }
                self.accumulate(grads, *x, like(*x, dx));
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let p = geom.out_h() * geom.out_w();
                let o = geom.out_channels;
                let kk = geom.patch_len();
                if self.rg(*w) {
                    let mut dw = vec![0.0; o * kk];
                    gemm(o, p, kk, gy.data(), false, cols, true, &mut dw, false);
                    self.accumulate(grads, *w, like(*w, dw));
                }
                if self.rg(*b) {
                    let db = gy.data().chunks(p).map(|r| r.iter().sum()).collect();
                    self.accumulate(grads, *b, like(*b, db));
                }
                if self.rg(*x) {
                    let mut dcols = vec![0.0; kk * p];
                    gemm(kk, o, p, self.value(*w).data(), true, gy.data(), false, &mut dcols, false);
                    self.accumulate(grads, *x, like(*x, col2im(&dcols, geom)));
                }
            }
            Op::Conv2dOneHot { labels, w, b, geom } => {
                let (oh, ow) = (geom.out_h(), geom.out_w());
                let p = oh * ow;
                let o = geom.out_channels;
                let classes = geom.in_channels;
                let k = geom.kernel;
                if self.rg(*w) {
                    let mut dwt = vec![0.0; k * k * classes * o];
                    let mut g = vec![0.0; o];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let pos = oy * ow + ox;
                            for (oc, gv) in g.iter_mut().enumerate() {
                                *gv = gy.data()[oc * p + pos];
                            }
                            for_each_tap(geom, oy, ox, |tap, iy, ix| {
                                let c = labels[iy * geom.in_w + ix] as usize;
                                let row = &mut dwt[(tap * classes + c) * o..(tap * classes + c + 1) * o];
                                for (d, gv) in row.iter_mut().zip(&g) {
                                    *d += gv;
                                }
                            });
                        }
                    }
                    let mut dw = vec![0.0; o * classes * k * k];
                    for oc in 0..o {
                        for c in 0..classes {
                            for tap in 0..k * k {
                                dw[(oc * classes + c) * k * k + tap] = dwt[(tap * classes + c) * o + oc];
                            }
                        }
                    }
                    self.accumulate(grads, *w, like(*w, dw));
                }
                if self.rg(*b) {
                    let db = gy.data().chunks(p).map(|r| r.iter().sum()).collect();
                    self.accumulate(grads, *b, like(*b, db));
                }
            }
        }
        Ok(())
    }
}

/// Visit the in-bounds taps of the receptive field of output `(oy, ox)`.
fn for_each_tap(geom: &ConvGeom, oy: usize, ox: usize, mut f: impl FnMut(usize, usize, usize)) {
    let k = geom.kernel;
    for ky in 0..k {
        let iy = (oy * geom.stride + ky) as isize - geom.padding as isize;
        if iy < 0 || iy >= geom.in_h as isize {
            continue;
        }
        for kx in 0..k {
            let ix = (ox * geom.stride + kx) as isize - geom.padding as isize;
            if ix < 0 || ix >= geom.in_w as isize {
                continue;
            }
            f(ky * k + kx, iy as usize, ix as usize);
        }
    }
}

/// `[C, H, W]` → `[C·k·k, Ho·Wo]` patch matrix (no padding).
fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (oh, ow, k, s) = (g.out_h(), g.out_w(), g.kernel, g.stride);
    let p = oh * ow;
    let mut cols = vec![0.0; g.patch_len() * p];
    for c in 0..g.in_channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let src = &x[(c * g.in_h + oy * s + ky) * g.in_w..];
                    let d = &mut dst[oy * ow..(oy + 1) * ow];
                    for (ox, v) in d.iter_mut().enumerate() {
                        *v = src[ox * s + kx];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (oh, ow, k, s) = (g.out_h(), g.out_w(), g.kernel, g.stride);
    let p = oh * ow;
    let mut x = vec![0.0; g.in_channels * g.in_h * g.in_w];
    for c in 0..g.in_channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let base = (c * g.in_h + oy * s + ky) * g.in_w + kx;
                    for ox in 0..ow {
                        x[base + ox * s] += src[oy * ow + ox];
                    }
                }
            }
        }
    }
    x
}
