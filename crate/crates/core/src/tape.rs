//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every primitive application in evaluation order, so the
//! node list is topologically sorted by construction. [`Tape::backward`]
//! walks it once in reverse.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg::{col2im_add, gemm, im2col, ConvGeom};
use crate::math;
use crate::mmd::{mmd2_with_grad, Estimator, KernelSpec};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
}

/// Primitive identifiers, used in reports and for fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Conv2d,
    Linear,
    Relu,
    Sigmoid,
    Tanh,
    Add,
    Sub,
    Mul,
    Scale,
    Sum,
    Mean,
    GlobalAvgPool,
    ChannelScale,
    ChannelAffine,
    Softmax,
    CrossEntropy,
    Entropy,
    Mmd2,
    GatherRows,
    ClampUnit,
    RowNormalize,
}

impl OpKind {
    pub const ALL: [OpKind; 22] = [
        OpKind::Leaf,
        OpKind::Conv2d,
        OpKind::Linear,
        OpKind::Relu,
        OpKind::Sigmoid,
        OpKind::Tanh,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::GlobalAvgPool,
        OpKind::ChannelScale,
        OpKind::ChannelAffine,
        OpKind::Softmax,
        OpKind::CrossEntropy,
        OpKind::Entropy,
        OpKind::Mmd2,
        OpKind::GatherRows,
        OpKind::ClampUnit,
        OpKind::RowNormalize,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Conv2d => "conv2d",
            OpKind::Linear => "linear",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::GlobalAvgPool => "global_avg_pool",
            OpKind::ChannelScale => "channel_scale",
            OpKind::ChannelAffine => "channel_affine",
            OpKind::Softmax => "softmax",
            OpKind::CrossEntropy => "cross_entropy",
            OpKind::Entropy => "entropy",
            OpKind::Mmd2 => "mmd2",
            OpKind::GatherRows => "gather_rows",
            OpKind::ClampUnit => "clamp_unit",
            OpKind::RowNormalize => "row_normalize",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::ALL.iter().copied().find(|k| k.name() == name)
    }
}

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    GlobalAvgPool(Var),
    ChannelScale {
        x: Var,
        w: Var,
    },
    ChannelAffine {
        x: Var,
        scale: Var,
        shift: Var,
    },
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Entropy(Var),
    Mmd2 {
        a: Var,
        b: Var,
        kernel: KernelSpec,
        estimator: Estimator,
    },
    GatherRows {
        x: Var,
        indices: Vec<usize>,
    },
    ClampUnit(Var),
    RowNormalize {
        x: Var,
        sums: Vec<f64>,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Linear { .. } => OpKind::Linear,
            Op::Relu(_) => OpKind::Relu,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::GlobalAvgPool(_) => OpKind::GlobalAvgPool,
            Op::ChannelScale { .. } => OpKind::ChannelScale,
            Op::ChannelAffine { .. } => OpKind::ChannelAffine,
            Op::Softmax(_) => OpKind::Softmax,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::Entropy(_) => OpKind::Entropy,
            Op::Mmd2 { .. } => OpKind::Mmd2,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::ClampUnit(_) => OpKind::ClampUnit,
            Op::RowNormalize { .. } => OpKind::RowNormalize,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; `None` when `v` does not
    /// require a gradient or is not reachable from the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Single-threaded gradient tape.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<OpKind>,
    kink_signature: u64,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            alloc::format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            fault: None,
            kink_signature: FNV_OFFSET,
        }
    }

    /// Testing hook: corrupts the backward rule of one primitive so that
    /// gradient checks can be shown to catch it.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Hash of every piecewise-linear branch taken so far (relu masks, clamp
    /// regions). Two evaluations with equal signatures lie on the same smooth
    /// piece of the function.
    pub fn kink_signature(&self) -> u64 {
        self.kink_signature
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Cross-correlation of an `N×C_in×H×W` batch with a `C_out×C_in×k×k`
    /// kernel, plus a per-output-channel bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws, bs) = (self.value(x).shape(), self.value(w).shape(), self.value(b).shape());
        if xs.len() != 4 || ws.len() != 4 || ws[2] != ws[3] {
            return Err(Error::shape(
                "conv2d",
                alloc::format!("input {:?}, kernel {:?}", xs, ws),
            ));
        }
        if xs[1] != ws[1] {
            return Err(Error::shape(
                "conv2d",
                alloc::format!("input has {} channels, kernel expects {}", xs[1], ws[1]),
            ));
        }
        if bs != [ws[0]] {
            return Err(Error::shape("conv2d", alloc::format!("bias {:?}", bs)));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
        }
        let k = ws[2];
        if k > xs[2] + 2 * pad || k > xs[3] + 2 * pad {
            return Err(Error::InvalidArgument("conv2d kernel larger than padded input".into()));
        }
        let geom = ConvGeom {
            batch: xs[0],
            c_in: xs[1],
            height: xs[2],
            width: xs[3],
            c_out: ws[0],
            kernel: k,
            stride,
            pad,
            out_h: (xs[2] + 2 * pad - k) / stride + 1,
            out_w: (xs[3] + 2 * pad - k) / stride + 1,
        };
        let (kk, plane) = (geom.patch_len(), geom.out_plane());
        let mut cols = vec![0.0; geom.batch * kk * plane];
        let mut out = vec![0.0; geom.batch * geom.c_out * plane];
        {
            let xd = self.value(x).data();
            let wd = self.value(w).data();
            let bd = self.value(b).data();
            for n in 0..geom.batch {
                let col = &mut cols[n * kk * plane..(n + 1) * kk * plane];
                im2col(&geom, &xd[n * geom.in_image()..(n + 1) * geom.in_image()], col);
                let o = &mut out[n * geom.c_out * plane..(n + 1) * geom.c_out * plane];
                for (co, row) in o.chunks_mut(plane).enumerate() {
                    row.fill(bd[co]);
                }
                gemm(
                    geom.c_out, kk, plane, 1.0, wd, kk as isize, 1, col, plane as isize, 1, 1.0,
                    o, plane as isize, 1,
                );
            }
        }
        let value = Tensor::new(vec![geom.batch, geom.c_out, geom.out_h, geom.out_w], out)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(value, Op::Conv2d { x, w, b, geom, cols }, rg))
    }

    /// `x·Wᵀ + b` for `x: N×D_in`, `W: D_out×D_in`, `b: D_out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.value(x).shape(), self.value(w).shape(), self.value(b).shape());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || bs != [ws[0]] {
            return Err(Error::shape(
                "linear",
                alloc::format!("x {:?}, W {:?}, b {:?}", xs, ws, bs),
            ));
        }
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        let mut out = Vec::with_capacity(n * dout);
        let bd = self.value(b).data();
        for _ in 0..n {
            out.extend_from_slice(bd);
        }
        gemm(
            n,
            din,
            dout,
            1.0,
            self.value(x).data(),
            din as isize,
            1,
            self.value(w).data(),
            1,
            din as isize,
            1.0,
            &mut out,
            dout as isize,
            1,
        );
        let value = Tensor::new(vec![n, dout], out)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(value, Op::Linear { x, w, b }, rg))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        match kind {
            Activation::Relu => self.relu(x),
            Activation::Sigmoid => self.sigmoid(x),
            Activation::Tanh => self.tanh(x),
        }
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        let mut sig = self.kink_signature;
        for &v in self.value(x).data() {
            sig ^= (v > 0.0) as u64;
            sig = sig.wrapping_mul(FNV_PRIME);
        }
        self.kink_signature = sig;
        let rg = self.rg(x);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(math::sigmoid);
        let rg = self.rg(x);
        self.push(value, Op::Sigmoid(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(math::tanh);
        let rg = self.rg(x);
        self.push(value, Op::Tanh(x), rg)
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(name, av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).map(|v| v * factor);
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, factor), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        let rg = self.rg(x);
        self.push(value, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let value = Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64);
        let rg = self.rg(x);
        Ok(self.push(value, Op::Mean(x), rg))
    }

    /// Weighted sum of scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(f64, Var)]) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for &(w, v) in terms {
            let t = self.scale(v, w);
            acc = Some(match acc {
                None => t,
                Some(a) => self.add(a, t)?,
            });
        }
        acc.ok_or_else(|| Error::InvalidArgument("weighted_sum of no terms".into()))
    }

    /// Mean over the spatial plane: `N×C×H×W -> N×C`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape();
        if s.len() != 4 || s[2] == 0 || s[3] == 0 {
            return Err(Error::shape("global_avg_pool", alloc::format!("{:?}", s)));
        }
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let data = t
            .data()
            .chunks(hw)
            .map(|plane| plane.iter().sum::<f64>() / hw as f64)
            .collect();
        let value = Tensor::new(vec![n, c], data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::GlobalAvgPool(x), rg))
    }

    /// `y[n,c,·,·] = w[n,c] · x[n,c,·,·]`.
    pub fn channel_scale(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xt, wt) = (self.value(x), self.value(w));
        let s = xt.shape();
        if s.len() != 4 || wt.shape() != [s[0], s[1]] {
            return Err(Error::shape(
                "channel_scale",
                alloc::format!("x {:?}, weights {:?}", s, wt.shape()),
            ));
        }
        let hw = s[2] * s[3];
        let mut data = xt.data().to_vec();
        for (plane, &wv) in data.chunks_mut(hw.max(1)).zip(wt.data()) {
            plane.iter_mut().for_each(|v| *v *= wv);
        }
        let value = Tensor::new(s.to_vec(), data)?;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(value, Op::ChannelScale { x, w }, rg))
    }

    /// `y[n,c,·,·] = scale[c] · x[n,c,·,·] + shift[c]`.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let (xt, st, bt) = (self.value(x), self.value(scale), self.value(shift));
        let s = xt.shape();
        if s.len() != 4 || st.shape() != [s[1]] || bt.shape() != [s[1]] {
            return Err(Error::shape("channel_affine", alloc::format!("x {:?}", s)));
        }
        let (c, hw) = (s[1], s[2] * s[3]);
        let mut data = xt.data().to_vec();
        for (i, plane) in data.chunks_mut(hw.max(1)).enumerate() {
            let ch = i % c;
            let (a, b) = (st.data()[ch], bt.data()[ch]);
            plane.iter_mut().for_each(|v| *v = a * *v + b);
        }
        let value = Tensor::new(s.to_vec(), data)?;
        let rg = self.rg(x) || self.rg(scale) || self.rg(shift);
        Ok(self.push(value, Op::ChannelAffine { x, scale, shift }, rg))
    }

    /// Row-wise softmax of an `N×K` matrix.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(Error::shape("softmax", alloc::format!("{:?}", t.shape())));
        }
        let value = Tensor::new(t.shape().to_vec(), softmax_rows(t.data(), t.shape()[1]))?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Softmax(x), rg))
    }

    /// Mean cross-entropy of row-wise softmax probabilities against class
    /// indices in `0..K`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        if t.rank() != 2 || t.shape()[0] != labels.len() {
            return Err(Error::shape(
                "cross_entropy",
                alloc::format!("logits {:?}, {} labels", t.shape(), labels.len()),
            ));
        }
        if labels.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let k = t.shape()[1];
        if let Some(&label) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::LabelOutOfRange { label, classes: k });
        }
        let probs = softmax_rows(t.data(), k);
        let mut loss = 0.0;
        for (i, row) in t.data().chunks(k).enumerate() {
            loss -= log_softmax_at(row, labels[i]);
        }
        let value = Tensor::scalar(loss / labels.len() as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean Shannon entropy of the rows of an `N×K` probability matrix, with
    /// `0·log 0 = 0`.
    pub fn entropy(&mut self, p: Var) -> Result<Var> {
        let t = self.value(p);
        if t.rank() != 2 {
            return Err(Error::shape("entropy", alloc::format!("{:?}", t.shape())));
        }
        let (n, k) = (t.shape()[0], t.shape()[1]);
        if n == 0 {
            return Err(Error::EmptyBatch);
        }
        let mut total = 0.0;
        for row in t.data().chunks(k) {
            for &v in row {
                if v > 0.0 {
                    total -= v * math::ln(v);
                }
            }
        }
        let value = Tensor::scalar(total / n as f64);
        let rg = self.rg(p);
        Ok(self.push(value, Op::Entropy(p), rg))
    }

    /// Squared MMD between the rows of `a` and `b` under a fixed kernel.
    pub fn mmd2(&mut self, a: Var, b: Var, kernel: &KernelSpec, estimator: Estimator) -> Result<Var> {
        let (v, _) = mmd2_with_grad(self.value(a), self.value(b), kernel, estimator, false)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::scalar(v),
            Op::Mmd2 {
                a,
                b,
                kernel: kernel.clone(),
                estimator,
            },
            rg,
        ))
    }

    /// Selects leading-axis slices (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if let Some(&bad) = indices.iter().find(|&&i| i >= t.rows()) {
            return Err(Error::InvalidArgument(alloc::format!(
                "row {} out of range for {} rows",
                bad,
                t.rows()
            )));
        }
        let value = t.select_rows(indices);
        let rg = self.rg(x);
        Ok(self.push(
            value,
            Op::GatherRows {
                x,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Elementwise clamp to `[0, 1]`.
    pub fn clamp_unit(&mut self, x: Var) -> Var {
        let mut sig = self.kink_signature;
        for &v in self.value(x).data() {
            let region = if v < 0.0 { 0 } else if v > 1.0 { 2 } else { 1 };
            sig ^= region;
            sig = sig.wrapping_mul(FNV_PRIME);
        }
        self.kink_signature = sig;
        let value = self.value(x).map(|v| v.clamp(0.0, 1.0));
        let rg = self.rg(x);
        self.push(value, Op::ClampUnit(x), rg)
    }

    /// Divides each row of an `N×K` matrix by its sum.
    pub fn row_normalize(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(Error::shape("row_normalize", alloc::format!("{:?}", t.shape())));
        }
        let k = t.shape()[1];
        let sums: Vec<f64> = t
            .data()
            .chunks(k.max(1))
            .map(|r| r.iter().sum::<f64>().max(ROW_SUM_FLOOR))
            .collect();
        let data = t
            .data()
            .chunks(k.max(1))
            .zip(&sums)
            .flat_map(|(r, s)| r.iter().map(move |v| v / s))
            .collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::RowNormalize { x, sums }, rg))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(mut g) = grads[i].take() else { continue };
            if self.fault == Some(node.op.kind()) {
                g.iter_mut().for_each(|v| *v *= 1.5);
            }
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| g.map(|g| Tensor::new(node.value.shape().to_vec(), g).expect("gradient shape")))
            .collect();
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let want = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom, cols } => {
                let (kk, plane) = (geom.patch_len(), geom.out_plane());
                let out_img = geom.c_out * plane;
                if want(*b) {
                    let db = accumulate(&mut grads[b.0], geom.c_out);
                    for n in 0..geom.batch {
                        for (co, row) in g[n * out_img..(n + 1) * out_img].chunks(plane).enumerate() {
                            db[co] += row.iter().sum::<f64>();
                        }
                    }
                }
                if want(*w) {
                    let dw = accumulate(&mut grads[w.0], geom.c_out * kk);
                    for n in 0..geom.batch {
                        gemm(
                            geom.c_out,
                            plane,
                            kk,
                            1.0,
                            &g[n * out_img..(n + 1) * out_img],
                            plane as isize,
                            1,
                            &cols[n * kk * plane..(n + 1) * kk * plane],
                            1,
                            plane as isize,
                            1.0,
                            dw,
                            kk as isize,
                            1,
                        );
                    }
                }
                if want(*x) {
                    let wd = val(*w).data();
                    let mut dcols = vec![0.0; kk * plane];
                    let img = geom.in_image();
                    let dx = accumulate(&mut grads[x.0], geom.batch * img);
                    for n in 0..geom.batch {
                        gemm(
                            kk,
                            geom.c_out,
                            plane,
                            1.0,
                            wd,
                            1,
                            kk as isize,
                            &g[n * out_img..(n + 1) * out_img],
                            plane as isize,
                            1,
                            0.0,
                            &mut dcols,
                            plane as isize,
                            1,
                        );
                        col2im_add(geom, &dcols, &mut dx[n * img..(n + 1) * img]);
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (n, din) = (val(*x).shape()[0], val(*x).shape()[1]);
                let dout = val(*w).shape()[0];
                if want(*b) {
                    let db = accumulate(&mut grads[b.0], dout);
                    for row in g.chunks(dout) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                }
                if want(*w) {
                    let dw = accumulate(&mut grads[w.0], dout * din);
                    gemm(
                        dout, n, din, 1.0, g, 1, dout as isize, val(*x).data(), din as isize, 1, 1.0,
                        dw, din as isize, 1,
                    );
                }
                if want(*x) {
                    let dx = accumulate(&mut grads[x.0], n * din);
                    gemm(
                        n, dout, din, 1.0, g, dout as isize, 1, val(*w).data(), din as isize, 1, 1.0,
                        dx, din as isize, 1,
                    );
                }
            }
            Op::Relu(x) => {
                if want(*x) {
                    let xd = val(*x).data();
                    let dx = accumulate(&mut grads[x.0], xd.len());
                    for ((d, &gv), &xv) in dx.iter_mut().zip(g).zip(xd) {
                        if xv > 0.0 {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if want(*x) {
                    let y = node.value.data();
                    let dx = accumulate(&mut grads[x.0], y.len());
                    for ((d, &gv), &yv) in dx.iter_mut().zip(g).zip(y) {
                        *d += gv * yv * (1.0 - yv);
                    }
                }
            }
            Op::Tanh(x) => {
                if want(*x) {
                    let y = node.value.data();
                    let dx = accumulate(&mut grads[x.0], y.len());
                    for ((d, &gv), &yv) in dx.iter_mut().zip(g).zip(y) {
                        *d += gv * (1.0 - yv * yv);
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if want(*a) {
                    let da = accumulate(&mut grads[a.0], g.len());
                    da.iter_mut().zip(g).for_each(|(d, v)| *d += v);
                }
                if want(*b) {
                    let db = accumulate(&mut grads[b.0], g.len());
                    db.iter_mut().zip(g).for_each(|(d, v)| *d += sign * v);
                }
            }
            Op::Mul(a, b) => {
                if want(*a) {
                    let bd = val(*b).data();
                    let da = accumulate(&mut grads[a.0], g.len());
                    for ((d, &gv), &bv) in da.iter_mut().zip(g).zip(bd) {
                        *d += gv * bv;
                    }
                }
                if want(*b) {
                    let ad = val(*a).data();
                    let db = accumulate(&mut grads[b.0], g.len());
                    for ((d, &gv), &av) in db.iter_mut().zip(g).zip(ad) {
                        *d += gv * av;
                    }
                }
            }
            Op::Scale(x, f) => {
                if want(*x) {
                    let dx = accumulate(&mut grads[x.0], g.len());
                    dx.iter_mut().zip(g).for_each(|(d, v)| *d += f * v);
                }
            }
            Op::Sum(x) | Op::Mean(x) => {
                if want(*x) {
                    let len = val(*x).len();
                    let gv = if matches!(node.op, Op::Mean(_)) {
                        g[0] / len as f64
                    } else {
                        g[0]
                    };
                    let dx = accumulate(&mut grads[x.0], len);
                    dx.iter_mut().for_each(|d| *d += gv);
                }
            }
            Op::GlobalAvgPool(x) => {
                if want(*x) {
                    let s = val(*x).shape();
                    let hw = s[2] * s[3];
                    let dx = accumulate(&mut grads[x.0], val(*x).len());
                    for (plane, &gv) in dx.chunks_mut(hw).zip(g) {
                        let v = gv / hw as f64;
                        plane.iter_mut().for_each(|d| *d += v);
                    }
                }
            }
            Op::ChannelScale { x, w } => {
                let s = val(*x).shape();
                let hw = (s[2] * s[3]).max(1);
                if want(*x) {
                    let wd = val(*w).data();
                    let dx = accumulate(&mut grads[x.0], val(*x).len());
                    for ((plane, gp), &wv) in dx.chunks_mut(hw).zip(g.chunks(hw)).zip(wd) {
                        plane.iter_mut().zip(gp).for_each(|(d, v)| *d += wv * v);
                    }
                }
                if want(*w) {
                    let xd = val(*x).data();
                    let dw = accumulate(&mut grads[w.0], s[0] * s[1]);
                    for ((d, gp), xp) in dw.iter_mut().zip(g.chunks(hw)).zip(xd.chunks(hw)) {
                        *d += gp.iter().zip(xp).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
            Op::ChannelAffine { x, scale, shift } => {
                let s = val(*x).shape();
                let (c, hw) = (s[1], (s[2] * s[3]).max(1));
                if want(*x) {
                    let sd = val(*scale).data();
                    let dx = accumulate(&mut grads[x.0], val(*x).len());
                    for (i, (plane, gp)) in dx.chunks_mut(hw).zip(g.chunks(hw)).enumerate() {
                        let a = sd[i % c];
                        plane.iter_mut().zip(gp).for_each(|(d, v)| *d += a * v);
                    }
                }
                if want(*scale) {
                    let xd = val(*x).data();
                    let ds = accumulate(&mut grads[scale.0], c);
                    for (i, (gp, xp)) in g.chunks(hw).zip(xd.chunks(hw)).enumerate() {
                        ds[i % c] += gp.iter().zip(xp).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
                if want(*shift) {
                    let db = accumulate(&mut grads[shift.0], c);
                    for (i, gp) in g.chunks(hw).enumerate() {
                        db[i % c] += gp.iter().sum::<f64>();
                    }
                }
            }
            Op::Softmax(x) => {
                if want(*x) {
                    let k = node.value.shape()[1];
                    let y = node.value.data();
                    let dx = accumulate(&mut grads[x.0], y.len());
                    for ((drow, grow), yrow) in dx.chunks_mut(k).zip(g.chunks(k)).zip(y.chunks(k)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((d, gv), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += yv * (gv - dot);
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if want(*logits) {
                    let k = val(*logits).shape()[1];
                    let scale = g[0] / labels.len() as f64;
                    let dx = accumulate(&mut grads[logits.0], probs.len());
                    for (i, (drow, prow)) in dx.chunks_mut(k).zip(probs.chunks(k)).enumerate() {
                        for (j, (d, p)) in drow.iter_mut().zip(prow).enumerate() {
                            let target = if j == labels[i] { 1.0 } else { 0.0 };
                            *d += scale * (p - target);
                        }
                    }
                }
            }
            Op::Entropy(p) => {
                if want(*p) {
                    let t = val(*p);
                    let scale = g[0] / t.shape()[0] as f64;
                    let dp = accumulate(&mut grads[p.0], t.len());
                    for (d, &v) in dp.iter_mut().zip(t.data()) {
                        *d -= scale * (math::ln(v.max(ENTROPY_LOG_FLOOR)) + 1.0);
                    }
                }
            }
            Op::Mmd2 {
                a,
                b,
                kernel,
                estimator,
            } => {
                let (_, grad) = mmd2_with_grad(val(*a), val(*b), kernel, *estimator, true)
                    .expect("mmd2 inputs validated in forward");
                let grad = grad.expect("gradient requested");
                if want(*a) {
                    let da = accumulate(&mut grads[a.0], grad.a.len());
                    da.iter_mut().zip(&grad.a).for_each(|(d, v)| *d += g[0] * v);
                }
                if want(*b) {
                    let db = accumulate(&mut grads[b.0], grad.b.len());
                    db.iter_mut().zip(&grad.b).for_each(|(d, v)| *d += g[0] * v);
                }
            }
            Op::GatherRows { x, indices } => {
                if want(*x) {
                    let w = val(*x).row_len();
                    let dx = accumulate(&mut grads[x.0], val(*x).len());
                    for (r, &i) in indices.iter().enumerate() {
                        for t in 0..w {
                            dx[i * w + t] += g[r * w + t];
                        }
                    }
                }
            }
            Op::ClampUnit(x) => {
                if want(*x) {
                    let xd = val(*x).data();
                    let dx = accumulate(&mut grads[x.0], xd.len());
                    for ((d, &gv), &xv) in dx.iter_mut().zip(g).zip(xd) {
                        if (0.0..=1.0).contains(&xv) {
                            *d += gv;
                        }
                    }
                }
            }
            Op::RowNormalize { x, sums } => {
                if want(*x) {
                    let k = node.value.shape()[1].max(1);
                    let y = node.value.data();
                    let dx = accumulate(&mut grads[x.0], y.len());
                    for (((drow, grow), yrow), s) in dx
                        .chunks_mut(k)
                        .zip(g.chunks(k))
                        .zip(y.chunks(k))
                        .zip(sums)
                    {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for (d, gv) in drow.iter_mut().zip(grow) {
                            *d += (gv - dot) / s;
                        }
                    }
                }
            }
        }
    }
}

const ROW_SUM_FLOOR: f64 = 1e-12;
const ENTROPY_LOG_FLOOR: f64 = 1e-300;

pub(crate) fn softmax_rows(data: &[f64], k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks(k.max(1)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut total = 0.0;
        for &v in row {
            let e = math::exp(v - max);
            total += e;
            out.push(e);
        }
        out[start..].iter_mut().for_each(|v| *v /= total);
    }
    out
}

fn log_softmax_at(row: &[f64], index: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + math::ln(row.iter().map(|&v| math::exp(v - max)).sum::<f64>());
    row[index] - lse
}
