//! Parameterized building blocks on top of [`Graph`]: dense, convolution,
//! GRU and (bidirectional) LSTM.

use std::sync::Arc;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::AutodiffError;
use crate::rng::XorShift64;

type Result<T> = std::result::Result<T, AutodiffError>;

/// Fully connected layer `x·W + b` with `W: [in, out]`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Dense {
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, rng: &mut XorShift64) -> Result<Self> {
        let w = store.add_xavier(format!("{name}.w"), &[inputs, outputs], inputs, outputs, rng)?;
        let b = store.add_zeros(format!("{name}.b"), &[outputs])?;
        Ok(Self { w, b, inputs, outputs })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let xw = g.matmul(x, w)?;
        g.add_bias(xw, b)
    }
}

/// Square-kernel convolution with explicit zero padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut XorShift64,
    ) -> Result<Self> {
        let kk = kernel * kernel;
        let w = store.add_xavier(
            format!("{name}.w"),
            &[out_channels, in_channels, kernel, kernel],
            in_channels * kk,
            out_channels * kk,
            rng,
        )?;
        let b = store.add_zeros(format!("{name}.b"), &[out_channels])?;
        Ok(Self {
            w,
            b,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        })
    }

    pub fn out_size(&self, size: usize) -> Option<usize> {
        let padded = size + 2 * self.padding;
        (padded >= self.kernel).then(|| (padded - self.kernel) / self.stride + 1)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let x = if self.padding > 0 { g.pad2d(x, self.padding)? } else { x };
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.conv2d(x, w, b, self.stride)
    }

    /// Apply to a label image, treating it as its one-hot encoding.
    pub fn forward_onehot(&self, g: &mut Graph, store: &ParamStore, labels: Arc<[u8]>, h: usize, w_px: usize) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.conv2d_onehot(labels, h, w_px, self.in_channels, w, b, self.stride, self.padding)
    }
}

/// Gated recurrent unit with separate input and hidden projections:
///
/// ```text
/// r  = σ(x·Wxr + bxr + h·Whr + bhr)
/// z  = σ(x·Wxz + bxz + h·Whz + bhz)
/// n  = tanh(x·Wxn + bxn + r ⊙ (h·Whn + bhn))
/// h' = (1 − z) ⊙ n + z ⊙ h
/// ```
#[derive(Debug, Clone)]
pub struct GruCell {
    pub wx: ParamId,
    pub wh: ParamId,
    pub bx: ParamId,
    pub bh: ParamId,
    pub inputs: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, hidden: usize, rng: &mut XorShift64) -> Result<Self> {
        let wx = store.add_xavier(format!("{name}.wx"), &[inputs, 3 * hidden], inputs, hidden, rng)?;
        let wh = store.add_xavier(format!("{name}.wh"), &[hidden, 3 * hidden], hidden, hidden, rng)?;
        let bx = store.add_zeros(format!("{name}.bx"), &[3 * hidden])?;
        let bh = store.add_zeros(format!("{name}.bh"), &[3 * hidden])?;
        Ok(Self {
            wx,
            wh,
            bx,
            bh,
            inputs,
            hidden,
        })
    }

    /// `x: [B, inputs]`, `h: [B, hidden]` → `[B, hidden]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, h: Var) -> Result<Var> {
        let hs = g.shape(h);
        if hs.len() != 2 || hs[1] != self.hidden {
            return Err(AutodiffError::ShapeMismatch {
                op: "gru_cell hidden",
                lhs: hs.to_vec(),
                rhs: vec![self.hidden],
            });
        }
        let n = self.hidden;
        let (wx, wh) = (g.param(store, self.wx), g.param(store, self.wh));
        let (bx, bh) = (g.param(store, self.bx), g.param(store, self.bh));
        let gx = g.matmul(x, wx)?;
        let gx = g.add_bias(gx, bx)?;
        let gh = g.matmul(h, wh)?;
        let gh = g.add_bias(gh, bh)?;

        let gate = |g: &mut Graph, k: usize| -> Result<Var> {
            let a = g.slice(gx, 1, k * n, n)?;
            let b = g.slice(gh, 1, k * n, n)?;
            let s = g.add(a, b)?;
            Ok(g.sigmoid(s))
        };
        let r = gate(g, 0)?;
        let z = gate(g, 1)?;
        let xn = g.slice(gx, 1, 2 * n, n)?;
        let hn = g.slice(gh, 1, 2 * n, n)?;
        let rh = g.mul(r, hn)?;
        let pre = g.add(xn, rh)?;
        let cand = g.tanh(pre);
        // h' = n + z ⊙ (h − n)
        let diff = g.sub(h, cand)?;
        let zd = g.mul(z, diff)?;
        g.add(cand, zd)
    }
}

/// LSTM cell with gate order (input, forget, cell, output).
#[derive(Debug, Clone)]
pub struct LstmCell {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    pub inputs: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, hidden: usize, rng: &mut XorShift64) -> Result<Self> {
        let wx = store.add_xavier(format!("{name}.wx"), &[inputs, 4 * hidden], inputs, hidden, rng)?;
        let wh = store.add_xavier(format!("{name}.wh"), &[hidden, 4 * hidden], hidden, hidden, rng)?;
        let b = store.add_zeros(format!("{name}.b"), &[4 * hidden])?;
        Ok(Self {
            wx,
            wh,
            b,
            inputs,
            hidden,
        })
    }

    /// One step on `x: [1, inputs]`; returns `(h', c')`.
    pub fn step(&self, g: &mut Graph, store: &ParamStore, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let n = self.hidden;
        let (wx, wh, b) = (g.param(store, self.wx), g.param(store, self.wh), g.param(store, self.b));
        let gx = g.matmul(x, wx)?;
        let gh = g.matmul(h, wh)?;
        let pre = g.add(gx, gh)?;
        let pre = g.add_bias(pre, b)?;
        let i = g.slice(pre, 1, 0, n)?;
        let i = g.sigmoid(i);
        let f = g.slice(pre, 1, n, n)?;
        let f = g.sigmoid(f);
        let cc = g.slice(pre, 1, 2 * n, n)?;
        let cc = g.tanh(cc);
        let o = g.slice(pre, 1, 3 * n, n)?;
        let o = g.sigmoid(o);
        let fc = g.mul(f, c)?;
        let ic = g.mul(i, cc)?;
        let c2 = g.add(fc, ic)?;
        let tc = g.tanh(c2);
        let h2 = g.mul(o, tc)?;
        Ok((h2, c2))
    }
}

/// Bidirectional LSTM summarizing a sequence into one fixed-size vector.
#[derive(Debug, Clone)]
pub struct BiLstm {
    pub forward: LstmCell,
    pub backward: LstmCell,
}

impl BiLstm {
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, hidden: usize, rng: &mut XorShift64) -> Result<Self> {
        Ok(Self {
            forward: LstmCell::new(store, &format!("{name}.fwd"), inputs, hidden, rng)?,
            backward: LstmCell::new(store, &format!("{name}.bwd"), inputs, hidden, rng)?,
        })
    }

    pub fn output_size(&self) -> usize {
        self.forward.hidden + self.backward.hidden
    }

    /// `seq: [T, inputs]` → `[1, 2·hidden]`: the forward pass's final hidden
    /// state concatenated with the backward pass's final hidden state.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, seq: Var) -> Result<Var> {
        let s = g.shape(seq).to_vec();
        if s.len() != 2 || s[1] != self.forward.inputs {
            return Err(AutodiffError::ShapeMismatch {
                op: "bilstm_encode",
                lhs: s,
                rhs: vec![self.forward.inputs],
            });
        }
        let steps = s[0];
        if steps == 0 {
            return Err(AutodiffError::EmptySequence);
        }
        let rows: Vec<Var> = (0..steps).map(|t| g.gather_row(seq, t)).collect::<Result<_>>()?;
        let run = |g: &mut Graph, cell: &LstmCell, order: &mut dyn Iterator<Item = &Var>| -> Result<Var> {
            let mut h = g.constant(super::Tensor::zeros(&[1, cell.hidden]));
            let mut c = g.constant(super::Tensor::zeros(&[1, cell.hidden]));
            for &x in order {
                (h, c) = cell.step(g, store, x, h, c)?;
            }
            Ok(h)
        };
        let hf = run(g, &self.forward, &mut rows.iter())?;
        let hb = run(g, &self.backward, &mut rows.iter().rev())?;
        g.concat(&[hf, hb], 1)
    }
}
