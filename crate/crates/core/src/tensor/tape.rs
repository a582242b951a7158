use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::kernels::{self, ConvGeometry};
use super::Tensor;
use crate::error::{Error, Result};

/// Lower clamp applied to the argument of `log`.
pub const LOG_FLOOR: f64 = 1e-12;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryOp {
    Sigmoid,
    Tanh,
    LeakyRelu(f64),
    /// Natural log of `max(x, LOG_FLOOR)`.
    Log,
    Exp,
    Scale(f64),
    OneMinus,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
}

/// Primitive kinds, used to name ops in diagnostics and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Sigmoid,
    Tanh,
    LeakyRelu,
    Log,
    Exp,
    Scale,
    OneMinus,
    MatMul,
    Linear,
    Sum,
    Mean,
    Reshape,
    Expand,
    Conv2d,
    Conv3d,
    MaxPool2d,
    Unpool3d,
    Softmax,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::LeakyRelu => "leaky_relu",
            OpKind::Log => "log",
            OpKind::Exp => "exp",
            OpKind::Scale => "scale",
            OpKind::OneMinus => "one_minus",
            OpKind::MatMul => "matmul",
            OpKind::Linear => "linear",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Reshape => "reshape",
            OpKind::Expand => "expand",
            OpKind::Conv2d => "conv2d",
            OpKind::Conv3d => "conv3d",
            OpKind::MaxPool2d => "maxpool2d",
            OpKind::Unpool3d => "unpool3d",
            OpKind::Softmax => "softmax",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        use OpKind::*;
        [
            Leaf, Add, Sub, Mul, Sigmoid, Tanh, LeakyRelu, Log, Exp, Scale, OneMinus, MatMul, Linear, Sum, Mean,
            Reshape, Expand, Conv2d, Conv3d, MaxPool2d, Unpool3d, Softmax,
        ]
        .into_iter()
        .find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Unary {
        x: usize,
        op: UnaryOp,
    },
    Binary {
        a: usize,
        b: usize,
        op: BinaryOp,
    },
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
        batch: usize,
        inp: usize,
        out: usize,
    },
    Reduce {
        x: usize,
        op: ReduceOp,
        axes: Vec<usize>,
    },
    Reshape {
        x: usize,
    },
    Expand {
        x: usize,
        reps: usize,
    },
    Conv {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeometry,
        batch: usize,
        three_d: bool,
    },
    MaxPool2d {
        x: usize,
        argmax: Vec<usize>,
    },
    Unpool3d {
        x: usize,
        factor: usize,
    },
    Softmax {
        x: usize,
        channel: usize,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Unary { op, .. } => match op {
                UnaryOp::Sigmoid => OpKind::Sigmoid,
                UnaryOp::Tanh => OpKind::Tanh,
                UnaryOp::LeakyRelu(_) => OpKind::LeakyRelu,
                UnaryOp::Log => OpKind::Log,
                UnaryOp::Exp => OpKind::Exp,
                UnaryOp::Scale(_) => OpKind::Scale,
                UnaryOp::OneMinus => OpKind::OneMinus,
            },
            Op::Binary { op, .. } => match op {
                BinaryOp::Add => OpKind::Add,
                BinaryOp::Sub => OpKind::Sub,
                BinaryOp::Mul => OpKind::Mul,
            },
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Linear { .. } => OpKind::Linear,
            Op::Reduce { op: ReduceOp::Sum, .. } => OpKind::Sum,
            Op::Reduce { op: ReduceOp::Mean, .. } => OpKind::Mean,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::Expand { .. } => OpKind::Expand,
            Op::Conv { three_d: false, .. } => OpKind::Conv2d,
            Op::Conv { three_d: true, .. } => OpKind::Conv3d,
            Op::MaxPool2d { .. } => OpKind::MaxPool2d,
            Op::Unpool3d { .. } => OpKind::Unpool3d,
            Op::Softmax { .. } => OpKind::Softmax,
        }
    }
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of the primitive ops of one forward pass.
///
/// Nodes are appended as ops execute, so every node's inputs precede it.
/// A tape is built per forward pass and discarded after `backward`.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    fault: Option<OpKind>,
    fault_end: usize,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the output w.r.t. `v`, if `v` is a leaf that requires grad
    /// and the output depends on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get_mut(v.index).and_then(Option::take)
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

fn accumulate(slot: &mut Option<Vec<f64>>, contrib: Vec<f64>) {
    match slot {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(contrib) {
                *a += b;
            }
        }
        None => *slot = Some(contrib),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            fault: None,
            fault_end: usize::MAX,
        }
    }

    /// Test fixture: negate the input gradients of every op of `kind`.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    /// Ops recorded after this call are exempt from the injected fault.
    #[doc(hidden)]
    pub fn seal_fault(&mut self) {
        self.fault_end = self.nodes.len();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn index(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::ForeignTensor);
        }
        Ok(v.index)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable belongs to another tape");
        &self.nodes[v.index].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        debug_assert!(value.data().iter().all(|x| !x.is_nan()), "{} produced NaN", op.kind());
        let index = self.nodes.len();
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var { tape: self.id, index }
    }

    /// A constant input (no gradient).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by `backward`.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf sharing storage with a parameter.
    pub fn shared(&mut self, t: Arc<Tensor>, requires_grad: bool) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        Var { tape: self.id, index }
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    pub fn unary(&mut self, op: UnaryOp, x: Var) -> Result<Var> {
        let xi = self.index(x)?;
        let xv = &self.nodes[xi].value;
        let f: Box<dyn Fn(f64) -> f64> = match op {
            UnaryOp::Sigmoid => Box::new(sigmoid),
            UnaryOp::Tanh => Box::new(f64::tanh),
            UnaryOp::LeakyRelu(s) => Box::new(move |v| if v > 0.0 { v } else { s * v }),
            UnaryOp::Log => Box::new(|v: f64| v.max(LOG_FLOOR).ln()),
            UnaryOp::Exp => Box::new(f64::exp),
            UnaryOp::Scale(c) => Box::new(move |v| c * v),
            UnaryOp::OneMinus => Box::new(|v| 1.0 - v),
        };
        let out = xv.map(f);
        let rg = self.rg(xi);
        Ok(self.push(out, Op::Unary { x: xi, op }, rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Tanh, x)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.unary(UnaryOp::LeakyRelu(slope), x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Log, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Exp, x)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(UnaryOp::Scale(c), x)
    }

    pub fn one_minus(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::OneMinus, x)
    }

    /// Elementwise `a ∘ b`. `b` may have lower rank, in which case its shape
    /// must equal the trailing axes of `a` and it is repeated along the
    /// leading ones.
    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.index(a)?, self.index(b)?);
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        let (sa, sb) = (av.shape(), bv.shape());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape(
                match op {
                    BinaryOp::Add => "add",
                    BinaryOp::Sub => "sub",
                    BinaryOp::Mul => "mul",
                },
                sa,
                sb,
            ));
        }
        let bl = bv.len();
        let bd = bv.data();
        let data: Vec<f64> = av
            .data()
            .chunks_exact(bl)
            .flat_map(|chunk| {
                chunk.iter().zip(bd).map(move |(&x, &y)| match op {
                    BinaryOp::Add => x + y,
                    BinaryOp::Sub => x - y,
                    BinaryOp::Mul => x * y,
                })
            })
            .collect();
        let out = Tensor::from_parts(sa.to_vec(), data);
        let rg = self.rg(ai) || self.rg(bi);
        Ok(self.push(out, Op::Binary { a: ai, b: bi, op }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    /// `a[m,k] × b[k,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.index(a)?, self.index(b)?);
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut c = vec![0.0; m * n];
        kernels::gemm_nn(&mut c, av.data(), bv.data(), m, k, n);
        let rg = self.rg(ai) || self.rg(bi);
        Ok(self.push(
            Tensor::from_parts(vec![m, n], c),
            Op::MatMul { a: ai, b: bi, m, k, n },
            rg,
        ))
    }

    /// Affine map `x[B,in] × w[out,in]ᵀ + bias[out]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let (xi, wi) = (self.index(x)?, self.index(w)?);
        let bi = bias.map(|b| self.index(b)).transpose()?;
        let (xv, wv) = (&self.nodes[xi].value, &self.nodes[wi].value);
        let (sx, sw) = (xv.shape(), wv.shape());
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(Error::shape("linear", sx, sw));
        }
        let (batch, inp, out) = (sx[0], sx[1], sw[0]);
        let mut y = vec![0.0; batch * out];
        if let Some(bi) = bi {
            let bv = &self.nodes[bi].value;
            if bv.shape() != [out] {
                return Err(Error::shape("linear", sw, bv.shape()));
            }
            for row in y.chunks_exact_mut(out) {
                row.copy_from_slice(bv.data());
            }
        }
        kernels::gemm_nt(&mut y, xv.data(), wv.data(), batch, inp, out);
        let rg = self.rg(xi) || self.rg(wi) || bi.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor::from_parts(vec![batch, out], y),
            Op::Linear {
                x: xi,
                w: wi,
                b: bi,
                batch,
                inp,
                out,
            },
            rg,
        ))
    }

    /// Sum or mean over `axes` (all axes when `axes` is empty). Reduced axes
    /// are removed from the result shape.
    pub fn reduce(&mut self, op: ReduceOp, x: Var, axes: &[usize]) -> Result<Var> {
        let xi = self.index(x)?;
        let xv = &self.nodes[xi].value;
        let rank = xv.rank();
        let mut axes: Vec<usize> = if axes.is_empty() {
            (0..rank).collect()
        } else {
            axes.to_vec()
        };
        axes.sort_unstable();
        axes.dedup();
        if let Some(&bad) = axes.iter().find(|&&a| a >= rank) {
            return Err(Error::invalid(
                "reduce",
                format!("axis {bad} out of range for shape {:?}", xv.shape()),
            ));
        }
        let map = reduce_map(xv.shape(), &axes);
        let out_shape: Vec<usize> = (0..rank).filter(|a| !axes.contains(a)).map(|a| xv.shape()[a]).collect();
        let out_len: usize = out_shape.iter().product();
        let mut y = vec![0.0; out_len];
        for (&v, &o) in xv.data().iter().zip(&map) {
            y[o] += v;
        }
        if op == ReduceOp::Mean {
            let count = (xv.len() / out_len) as f64;
            for v in &mut y {
                *v /= count;
            }
        }
        let rg = self.rg(xi);
        Ok(self.push(Tensor::from_parts(out_shape, y), Op::Reduce { x: xi, op, axes }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.reduce(ReduceOp::Sum, x, &[])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.reduce(ReduceOp::Mean, x, &[])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xi = self.index(x)?;
        let xv = &self.nodes[xi].value;
        if shape.iter().product::<usize>() != xv.len() || shape.contains(&0) {
            return Err(Error::shape("reshape", xv.shape(), shape));
        }
        let out = Tensor::from_parts(shape.to_vec(), xv.data().to_vec());
        let rg = self.rg(xi);
        Ok(self.push(out, Op::Reshape { x: xi }, rg))
    }

    /// Repeat every element of `x` over new trailing axes `extra`.
    pub fn expand_trailing(&mut self, x: Var, extra: &[usize]) -> Result<Var> {
        let xi = self.index(x)?;
        let xv = &self.nodes[xi].value;
        if extra.contains(&0) {
            return Err(Error::invalid("expand", "zero extent"));
        }
        let reps: usize = extra.iter().product();
        let mut shape = xv.shape().to_vec();
        shape.extend_from_slice(extra);
        let data: Vec<f64> = xv.data().iter().flat_map(|&v| std::iter::repeat_n(v, reps)).collect();
        let rg = self.rg(xi);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Expand { x: xi, reps }, rg))
    }

    /// 2D cross-correlation of `x[B,C,H,W]` with `w[Co,C,kh,kw]`, symmetric
    /// zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(Error::shape("conv2d", &sx, &sw));
        }
        let geom = ConvGeometry::new(
            sx[1],
            sw[0],
            [1, sx[2], sx[3]],
            [1, sw[2], sw[3]],
            [1, stride, stride],
            [0, pad, pad],
        )
        .ok_or_else(|| {
            Error::invalid(
                "conv2d",
                format!("kernel {:?} larger than padded input {:?}", &sw[2..], &sx[2..]),
            )
        })?;
        self.conv(x, w, bias, geom, sx[0], false)
    }

    /// Extent-preserving 3D cross-correlation of `x[B,C,D,H,W]` with
    /// `w[Co,C,k,k,k]` (odd `k`, stride 1, padding `(k-1)/2`).
    pub fn conv3d(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 5 || sw.len() != 5 || sx[1] != sw[1] {
            return Err(Error::shape("conv3d", &sx, &sw));
        }
        if sw[2..].iter().any(|k| k % 2 == 0) {
            return Err(Error::invalid(
                "conv3d",
                format!("kernel extents must be odd, got {:?}", &sw[2..]),
            ));
        }
        let geom = ConvGeometry::new(
            sx[1],
            sw[0],
            [sx[2], sx[3], sx[4]],
            [sw[2], sw[3], sw[4]],
            [1, 1, 1],
            [(sw[2] - 1) / 2, (sw[3] - 1) / 2, (sw[4] - 1) / 2],
        )
        .ok_or_else(|| Error::invalid("conv3d", "kernel larger than padded input"))?;
        self.conv(x, w, bias, geom, sx[0], true)
    }

    fn conv(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
        batch: usize,
        three_d: bool,
    ) -> Result<Var> {
        let (xi, wi) = (self.index(x)?, self.index(w)?);
        let bi = bias.map(|b| self.index(b)).transpose()?;
        let op = if three_d { "conv3d" } else { "conv2d" };
        let bvals = match bi {
            Some(b) => {
                let bv = &self.nodes[b].value;
                if bv.shape() != [geom.out_channels] {
                    return Err(Error::shape(op, &[geom.out_channels], bv.shape()));
                }
                Some(bv.data())
            }
            None => None,
        };
        let y = geom.forward(self.nodes[xi].value.data(), self.nodes[wi].value.data(), bvals, batch);
        let mut shape = vec![batch, geom.out_channels];
        if three_d {
            shape.extend_from_slice(&geom.output);
        } else {
            shape.extend_from_slice(&geom.output[1..]);
        }
        let rg = self.rg(xi) || self.rg(wi) || bi.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor::from_parts(shape, y),
            Op::Conv {
                x: xi,
                w: wi,
                b: bi,
                geom,
                batch,
                three_d,
            },
            rg,
        ))
    }

    /// Channel-wise max over non-overlapping `window×window` blocks of
    /// `x[B,C,H,W]`. Ties route the gradient to the first element in
    /// row-major window order.
    pub fn maxpool2d(&mut self, x: Var, window: usize) -> Result<Var> {
        let xi = self.index(x)?;
        let xv = &self.nodes[xi].value;
        let s = xv.shape();
        if s.len() != 4 {
            return Err(Error::invalid("maxpool2d", format!("expected rank 4, got {s:?}")));
        }
        if window == 0 || !s[2].is_multiple_of(window) || !s[3].is_multiple_of(window) {
            return Err(Error::invalid(
                "maxpool2d",
                format!("extent {:?} not divisible by window {window}", &s[2..]),
            ));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h / window, w / window);
        let mut y = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        let d = xv.data();
        for p in 0..planes {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = p * h * w + oy * window * w + ox * window;
                    for dy in 0..window {
                        for dx in 0..window {
                            let i = p * h * w + (oy * window + dy) * w + ox * window + dx;
                            if d[i] > d[best] {
                                best = i;
                            }
                        }
                    }
                    y.push(d[best]);
                    argmax.push(best);
                }
            }
        }
        let shape = vec![s[0], s[1], oh, ow];
        let rg = self.rg(xi);
        Ok(self.push(Tensor::from_parts(shape, y), Op::MaxPool2d { x: xi, argmax }, rg))
    }

    /// Place each value of `x[B,C,D,H,W]` at the even-index corner of its
    /// `factor³` output block; every other cell is zero.
    pub fn unpool3d(&mut self, x: Var, factor: usize) -> Result<Var> {
        let xi = self.index(x)?;
        if factor < 2 {
            return Err(Error::invalid("unpool3d", format!("factor must be >= 2, got {factor}")));
        }
        let xv = &self.nodes[xi].value;
        let s = xv.shape();
        if s.len() != 5 {
            return Err(Error::invalid("unpool3d", format!("expected rank 5, got {s:?}")));
        }
        let (d, h, w) = (s[2], s[3], s[4]);
        let (od, oh, ow) = (d * factor, h * factor, w * factor);
        let planes = s[0] * s[1];
        let mut y = vec![0.0; planes * od * oh * ow];
        let src = xv.data();
        for p in 0..planes {
            for z in 0..d {
                for r in 0..h {
                    for c in 0..w {
                        y[((p * od + z * factor) * oh + r * factor) * ow + c * factor] =
                            src[((p * d + z) * h + r) * w + c];
                    }
                }
            }
        }
        let shape = vec![s[0], s[1], od, oh, ow];
        let rg = self.rg(xi);
        Ok(self.push(Tensor::from_parts(shape, y), Op::Unpool3d { x: xi, factor }, rg))
    }

    /// Softmax over axis 1 of `x[B,C,...]`, returning the probability of
    /// `channel` with axis 1 removed. Computed with max subtraction.
    pub fn softmax_channel(&mut self, x: Var, channel: usize) -> Result<Var> {
        let xi = self.index(x)?;
        let xv = &self.nodes[xi].value;
        let s = xv.shape();
        if s.len() < 2 || channel >= s[1] {
            return Err(Error::invalid(
                "softmax",
                format!("channel {channel} out of range for shape {s:?}"),
            ));
        }
        let (batch, classes) = (s[0], s[1]);
        let inner: usize = s[2..].iter().product();
        let d = xv.data();
        let mut y = vec![0.0; batch * inner];
        for b in 0..batch {
            for v in 0..inner {
                let at = |c: usize| d[(b * classes + c) * inner + v];
                let m = (0..classes).map(at).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..classes).map(|c| (at(c) - m).exp()).sum();
                y[b * inner + v] = (at(channel) - m).exp() / z;
            }
        }
        let mut shape = vec![batch];
        shape.extend_from_slice(&s[2..]);
        let rg = self.rg(xi);
        Ok(self.push(Tensor::from_parts(shape, y), Op::Softmax { x: xi, channel }, rg))
    }

    /// Reverse sweep from the scalar `output`. Returns gradients of every
    /// leaf that requires grad; a leaf used several times accumulates the
    /// contributions of all paths.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.index(output)?;
        let ov = &self.nodes[out].value;
        if ov.len() != 1 {
            return Err(Error::NonScalarOutput(ov.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; out + 1];
        let mut leaves: Vec<Option<Tensor>> = Vec::new();
        leaves.resize_with(self.nodes.len(), || None);
        grads[out] = Some(vec![1.0]);
        for i in (0..=out).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaves[i] = Some(Tensor::from_parts(node.value.shape().to_vec(), g));
                continue;
            }
            let sign = if i < self.fault_end && self.fault == Some(node.op.kind()) {
                -1.0
            } else {
                1.0
            };
            for (j, mut contrib) in self.vjp(i, &g) {
                if sign < 0.0 {
                    contrib.iter_mut().for_each(|v| *v = -*v);
                }
                accumulate(&mut grads[j], contrib);
            }
        }
        Ok(Gradients {
            tape: self.id,
            grads: leaves,
        })
    }

    /// Vector-Jacobian products of node `i` for each input that needs one.
    fn vjp(&self, i: usize, g: &[f64]) -> Vec<(usize, Vec<f64>)> {
        let node = &self.nodes[i];
        let y = node.value.data();
        let val = |j: usize| self.nodes[j].value.data();
        let mut out = Vec::with_capacity(3);
        match node.op {
            Op::Leaf => {}
            Op::Unary { x, op } => {
                let xv = val(x);
                let gx: Vec<f64> = match op {
                    UnaryOp::Sigmoid => g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect(),
                    UnaryOp::Tanh => g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect(),
                    UnaryOp::LeakyRelu(s) => g
                        .iter()
                        .zip(xv)
                        .map(|(g, &x)| if x > 0.0 { *g } else { s * g })
                        .collect(),
                    UnaryOp::Log => g
                        .iter()
                        .zip(xv)
                        .map(|(g, &x)| if x > LOG_FLOOR { g / x } else { 0.0 })
                        .collect(),
                    UnaryOp::Exp => g.iter().zip(y).map(|(g, y)| g * y).collect(),
                    UnaryOp::Scale(c) => g.iter().map(|g| c * g).collect(),
                    UnaryOp::OneMinus => g.iter().map(|g| -g).collect(),
                };
                out.push((x, gx));
            }
            Op::Binary { a, b, op } => {
                let (av, bv) = (val(a), val(b));
                let bl = bv.len();
                if self.rg(a) {
                    let ga = match op {
                        BinaryOp::Add | BinaryOp::Sub => g.to_vec(),
                        BinaryOp::Mul => g.iter().enumerate().map(|(k, g)| g * bv[k % bl]).collect(),
                    };
                    out.push((a, ga));
                }
                if self.rg(b) {
                    let mut gb = vec![0.0; bl];
                    for (k, &gk) in g.iter().enumerate() {
                        gb[k % bl] += match op {
                            BinaryOp::Add => gk,
                            BinaryOp::Sub => -gk,
                            BinaryOp::Mul => gk * av[k],
                        };
                    }
                    out.push((b, gb));
                }
            }
            Op::MatMul { a, b, m, k, n } => {
                if self.rg(a) {
                    let mut ga = vec![0.0; m * k];
                    kernels::gemm_nt(&mut ga, g, val(b), m, n, k);
                    out.push((a, ga));
                }
                if self.rg(b) {
                    let mut gb = vec![0.0; k * n];
                    kernels::gemm_tn(&mut gb, val(a), g, k, m, n);
                    out.push((b, gb));
                }
            }
            Op::Linear {
                x,
                w,
                b,
                batch,
                inp,
                out: o,
            } => {
                if self.rg(x) {
                    let mut gx = vec![0.0; batch * inp];
                    kernels::gemm_nn(&mut gx, g, val(w), batch, o, inp);
                    out.push((x, gx));
                }
                if self.rg(w) {
                    let mut gw = vec![0.0; o * inp];
                    kernels::gemm_tn(&mut gw, g, val(x), o, batch, inp);
                    out.push((w, gw));
                }
                if let Some(b) = b.filter(|&b| self.rg(b)) {
                    let mut gb = vec![0.0; o];
                    for row in g.chunks_exact(o) {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    out.push((b, gb));
                }
            }
            Op::Reduce { x, op, ref axes } => {
                let xv = &self.nodes[x].value;
                let map = reduce_map(xv.shape(), axes);
                let scale = match op {
                    ReduceOp::Sum => 1.0,
                    ReduceOp::Mean => (g.len() as f64) / (xv.len() as f64),
                };
                out.push((x, map.iter().map(|&o| g[o] * scale).collect()));
            }
            Op::Reshape { x } => out.push((x, g.to_vec())),
            Op::Expand { x, reps } => {
                out.push((x, g.chunks_exact(reps).map(|c| c.iter().sum()).collect()));
            }
            Op::Conv {
                x, w, b, geom, batch, ..
            } => {
                let (gx, gw, gb) = geom.backward(val(x), val(w), g, batch, self.rg(x), self.rg(w));
                if let Some(gx) = gx {
                    out.push((x, gx));
                }
                if let Some(gw) = gw {
                    out.push((w, gw));
                }
                if let Some(b) = b.filter(|&b| self.rg(b)) {
                    out.push((b, gb));
                }
            }
            Op::MaxPool2d { x, ref argmax } => {
                let mut gx = vec![0.0; self.nodes[x].value.len()];
                for (&src, &gv) in argmax.iter().zip(g) {
                    gx[src] += gv;
                }
                out.push((x, gx));
            }
            Op::Unpool3d { x, factor } => {
                let xs = self.nodes[x].value.shape();
                let (d, h, w) = (xs[2], xs[3], xs[4]);
                let (od, oh, ow) = (d * factor, h * factor, w * factor);
                let planes = xs[0] * xs[1];
                let mut gx = vec![0.0; planes * d * h * w];
                for p in 0..planes {
                    for z in 0..d {
                        for r in 0..h {
                            for c in 0..w {
                                gx[((p * d + z) * h + r) * w + c] =
                                    g[((p * od + z * factor) * oh + r * factor) * ow + c * factor];
                            }
                        }
                    }
                }
                out.push((x, gx));
            }
            Op::Softmax { x, channel } => {
                let xv = &self.nodes[x].value;
                let s = xv.shape();
                let (batch, classes) = (s[0], s[1]);
                let inner: usize = s[2..].iter().product();
                let d = xv.data();
                let mut gx = vec![0.0; xv.len()];
                let mut p = vec![0.0; classes];
                for b in 0..batch {
                    for v in 0..inner {
                        let at = |c: usize| d[(b * classes + c) * inner + v];
                        let m = (0..classes).map(at).fold(f64::NEG_INFINITY, f64::max);
                        let mut z = 0.0;
                        for (c, pc) in p.iter_mut().enumerate() {
                            *pc = (at(c) - m).exp();
                            z += *pc;
                        }
                        p.iter_mut().for_each(|pc| *pc /= z);
                        let gy = g[b * inner + v];
                        let pk = p[channel];
                        for (c, &pc) in p.iter().enumerate() {
                            let delta = if c == channel { 1.0 } else { 0.0 };
                            gx[(b * classes + c) * inner + v] = gy * pk * (delta - pc);
                        }
                    }
                }
                out.push((x, gx));
            }
        }
        out
    }
}

/// For every flat input index, the flat output index after dropping `axes`.
fn reduce_map(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let n: usize = shape.iter().product();
    let rank = shape.len();
    let mut out_stride = vec![0usize; rank];
    let mut acc = 1;
    for a in (0..rank).rev() {
        if !axes.contains(&a) {
            out_stride[a] = acc;
            acc *= shape[a];
        }
    }
    let mut idx = vec![0usize; rank];
    let mut map = Vec::with_capacity(n);
    for _ in 0..n {
        map.push(idx.iter().zip(&out_stride).map(|(i, s)| i * s).sum());
        for a in (0..rank).rev() {
            idx[a] += 1;
            if idx[a] < shape[a] {
                break;
            }
            idx[a] = 0;
        }
    }
    map
}
