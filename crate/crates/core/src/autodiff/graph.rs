//! The gradient tape.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles in
//! creation order, which is already a topological order: an op can only
//! consume vars that exist when it is recorded. [`Graph::backward`] walks the
//! records in reverse and accumulates (`+=`) each op's input gradients.
//!
//! Binary elementwise ops (`add`, `sub`, `mul`, `div`) share one broadcast
//! rule: the result takes the left operand's shape, and the right operand
//! must have the same rank with every dimension either equal to the left's
//! or 1. So `[C, T] * [C, 1]` (per-channel scaling) and `[T] - [1]` (scalar
//! shift) are allowed; anything else is a shape error.

use std::fmt;
use std::str::FromStr;

use super::kernels::{self, Conv1dAttrs, ConvDims};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Div,
    Scale,
    AddScalar,
    MatMul,
    Conv1d,
    Conv1dTranspose,
    Prelu,
    Sigmoid,
    Relu,
    Mean,
    Sum,
    Power,
    Log,
    Exp,
    Concat,
    Slice,
    LayerNormGlobal,
    Softmax,
    LogSoftmax,
    Gather,
    Reshape,
}

impl OpKind {
    pub const ALL: [OpKind; 24] = [
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Div,
        OpKind::Scale,
        OpKind::AddScalar,
        OpKind::MatMul,
        OpKind::Conv1d,
        OpKind::Conv1dTranspose,
        OpKind::Prelu,
        OpKind::Sigmoid,
        OpKind::Relu,
        OpKind::Mean,
        OpKind::Sum,
        OpKind::Power,
        OpKind::Log,
        OpKind::Exp,
        OpKind::Concat,
        OpKind::Slice,
        OpKind::LayerNormGlobal,
        OpKind::Softmax,
        OpKind::LogSoftmax,
        OpKind::Gather,
        OpKind::Reshape,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add_scalar",
            OpKind::MatMul => "matmul",
            OpKind::Conv1d => "conv1d",
            OpKind::Conv1dTranspose => "conv1d_transpose",
            OpKind::Prelu => "prelu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Relu => "relu",
            OpKind::Mean => "mean",
            OpKind::Sum => "sum",
            OpKind::Power => "power",
            OpKind::Log => "log",
            OpKind::Exp => "exp",
            OpKind::Concat => "concat",
            OpKind::Slice => "slice",
            OpKind::LayerNormGlobal => "layer_norm_global",
            OpKind::Softmax => "softmax",
            OpKind::LogSoftmax => "log_softmax",
            OpKind::Gather => "gather",
            OpKind::Reshape => "reshape",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::UnknownOp(s.to_string()))
    }
}

/// Attribute bag for [`Graph::apply`]. Each kind reads only the fields it
/// needs.
#[derive(Clone, Debug, Default)]
pub struct OpAttrs {
    /// Reduction / concat / slice / softmax axis. `None` reduces everything.
    pub axis: Option<usize>,
    pub conv: Conv1dAttrs,
    /// Exponent for `power`, factor for `scale`, offset for `add_scalar`,
    /// epsilon for `layer_norm_global`.
    pub scalar: f64,
    pub start: usize,
    pub end: usize,
    pub indices: Vec<usize>,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Conv1d {
        x: Var,
        w: Var,
        attrs: Conv1dAttrs,
    },
    ConvTranspose {
        x: Var,
        w: Var,
        stride: usize,
    },
    Prelu {
        x: Var,
        slope: Var,
    },
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Power(Var, f64),
    Sum {
        x: Var,
        axis: Option<usize>,
    },
    Mean {
        x: Var,
        axis: Option<usize>,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    LayerNormGlobal {
        x: Var,
        gain: Var,
        bias: Var,
        mean: f64,
        rstd: f64,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax {
        x: Var,
        axis: usize,
    },
    Gather {
        x: Var,
        indices: Vec<usize>,
    },
    Reshape(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode tape. Single-threaded; build one per forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

/// `(outer, axis_len, inner)` split of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// For each element of a `lhs`-shaped tensor, the flat index of the
/// broadcast `rhs` element. `None` when shapes are identical.
/// Where each lhs element finds its rhs partner under broadcasting.
enum Bcast {
    Same,
    Scalar,
    /// rhs varies along leading axes only: index `k / inner`.
    Rows(usize),
    /// rhs varies along trailing axes only: index `k % inner`.
    Cols(usize),
    Map(Vec<usize>),
}

impl Bcast {
    #[inline]
    fn at(&self, k: usize) -> usize {
        match self {
            Bcast::Same => k,
            Bcast::Scalar => 0,
            Bcast::Rows(inner) => k / inner,
            Bcast::Cols(inner) => k % inner,
            Bcast::Map(m) => m[k],
        }
    }
}

fn broadcast_map(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<Bcast> {
    if lhs == rhs {
        return Ok(Bcast::Same);
    }
    let compatible = lhs.len() == rhs.len()
        && lhs.iter().zip(rhs).all(|(&l, &r)| r == l || r == 1);
    if !compatible {
        return Err(Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        });
    }
    if rhs.iter().all(|&r| r == 1) {
        return Ok(Bcast::Scalar);
    }
    let rank = lhs.len();
    // axes where the rhs is broadcast (size 1 but lhs is not)
    let bcast: Vec<bool> = (0..rank).map(|d| rhs[d] == 1 && lhs[d] != 1).collect();
    let first = bcast.iter().position(|&b| b).expect("shapes differ");
    let last = bcast.iter().rposition(|&b| b).expect("shapes differ");
    let full_between = |a: usize, b: usize| (a..b).all(|d| !bcast[d]);
    if full_between(0, first) && (first..rank).all(|d| bcast[d] || lhs[d] == 1) {
        return Ok(Bcast::Rows(lhs[first..].iter().product()));
    }
    if full_between(last + 1, rank) && (0..=last).all(|d| bcast[d] || lhs[d] == 1) {
        return Ok(Bcast::Cols(lhs[last + 1..].iter().product()));
    }
    let mut rstride = vec![0usize; rank];
    let mut acc = 1;
    for d in (0..rank).rev() {
        rstride[d] = if rhs[d] == 1 { 0 } else { acc };
        acc *= rhs[d];
    }
    let n: usize = lhs.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        map.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += rstride[d];
            if idx[d] < lhs[d] {
                break;
            }
            off -= rstride[d] * lhs[d];
            idx[d] = 0;
        }
    }
    Ok(Bcast::Map(map))
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Gradients are only kept for leaves (and anything
    /// downstream of one) with `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that does not.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last [`Graph::backward`] loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    // ---- elementwise binary -------------------------------------------

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let map = broadcast_map(name, &shape, self.shape(b))?;
        let (ad, bd) = (self.data(a), self.data(b));
        let out: Vec<f64> = match &map {
            Bcast::Same => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
            m => ad.iter().enumerate().map(|(k, &x)| f(x, bd[m.at(k)])).collect(),
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, out), op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    // ---- elementwise unary --------------------------------------------

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let out: Vec<f64> = t.data().iter().map(|&v| f(v)).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor::from_parts(shape, out), op, rg)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.unary(x, |v| v * factor, Op::Scale(x, factor))
    }

    pub fn add_scalar(&mut self, x: Var, offset: f64) -> Var {
        self.unary(x, |v| v + offset, Op::AddScalar(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    pub fn power(&mut self, x: Var, exponent: f64) -> Var {
        self.unary(x, |v| v.powf(exponent), Op::Power(x, exponent))
    }

    /// Parametric ReLU. `slope` holds one shared value, or one per entry of
    /// the first axis of `x`.
    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ns = self.value(slope).numel();
        if ns != 1 && ns != xs[0] {
            return Err(Error::ShapeMismatch {
                op: "prelu",
                lhs: xs,
                rhs: self.shape(slope).to_vec(),
            });
        }
        let inner = self.value(x).numel() / xs[0];
        let sd = self.data(slope);
        let out: Vec<f64> = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                if v >= 0.0 {
                    v
                } else {
                    v * sd[if ns == 1 { 0 } else { i / inner }]
                }
            })
            .collect();
        let rg = self.rg(&[x, slope]);
        Ok(self.push(Tensor::from_parts(xs, out), Op::Prelu { x, slope }, rg))
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        super::gemm::gemm(
            super::gemm::View::row_major(self.data(a), m, k),
            super::gemm::View::row_major(self.data(b), k, n),
            0.0,
            &mut out,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    fn conv_dims(&self, x: Var, w: Var, attrs: &Conv1dAttrs) -> Result<ConvDims> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        let mismatch = || Error::ShapeMismatch {
            op: "conv1d",
            lhs: sx.to_vec(),
            rhs: sw.to_vec(),
        };
        if attrs.stride == 0 || attrs.dilation == 0 || attrs.groups == 0 {
            return Err(Error::InvalidAttr {
                op: "conv1d",
                msg: format!("{attrs:?}: stride, dilation and groups must be positive"),
            });
        }
        if sx.len() != 2 || sw.len() != 3 {
            return Err(mismatch());
        }
        let (cin, len, cout, cig, kernel) = (sx[0], sx[1], sw[0], sw[1], sw[2]);
        if cin % attrs.groups != 0 || cout % attrs.groups != 0 || cig * attrs.groups != cin {
            return Err(mismatch());
        }
        let out_len = attrs.out_len(len, kernel).ok_or_else(mismatch)?;
        Ok(ConvDims {
            cin,
            cout,
            len,
            kernel,
            out_len,
        })
    }

    /// 1-D cross-correlation (no kernel flip). `x` is `[C_in, T]`, `w` is
    /// `[C_out, C_in / groups, K]`.
    pub fn conv1d(&mut self, x: Var, w: Var, attrs: Conv1dAttrs) -> Result<Var> {
        let dims = self.conv_dims(x, w, &attrs)?;
        let out = kernels::conv1d_forward(self.data(x), self.data(w), &dims, &attrs);
        let rg = self.rg(&[x, w]);
        Ok(self.push(
            Tensor::from_parts(vec![dims.cout, dims.out_len], out),
            Op::Conv1d { x, w, attrs },
            rg,
        ))
    }

    /// Transposed convolution. `x` is `[C_in, T]`, `w` is `[C_in, C_out, K]`;
    /// output is `[C_out, (T - 1) * stride + K]`.
    pub fn conv1d_transpose(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 2 || sw.len() != 3 || sx[0] != sw[0] || stride == 0 {
            return Err(Error::ShapeMismatch {
                op: "conv1d_transpose",
                lhs: sx.to_vec(),
                rhs: sw.to_vec(),
            });
        }
        let dims = ConvDims {
            cin: sx[0],
            cout: sw[1],
            len: sx[1],
            kernel: sw[2],
            out_len: (sx[1] - 1) * stride + sw[2],
        };
        let out = kernels::conv_transpose1d_forward(self.data(x), self.data(w), &dims, stride);
        let rg = self.rg(&[x, w]);
        Ok(self.push(
            Tensor::from_parts(vec![dims.cout, dims.out_len], out),
            Op::ConvTranspose { x, w, stride },
            rg,
        ))
    }

    // ---- reductions and shape ops ------------------------------------------

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        let rank = self.shape(x).len();
        if axis >= rank {
            return Err(Error::InvalidAttr {
                op,
                msg: format!("axis {axis} out of range for rank {rank}"),
            });
        }
        Ok(())
    }

    fn reduce(&mut self, x: Var, axis: Option<usize>, mean: bool) -> Result<Var> {
        let name = if mean { "mean" } else { "sum" };
        let t = self.value(x);
        let (shape, out) = match axis {
            None => {
                let s: f64 = t.data().iter().sum();
                let n = t.numel() as f64;
                (vec![1], vec![if mean { s / n } else { s }])
            }
            Some(ax) => {
                self.check_axis(name, x, ax)?;
                let (outer, len, inner) = split_axis(t.shape(), ax);
                let d = t.data();
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for a in 0..len {
                        let row = &d[(o * len + a) * inner..][..inner];
                        for (acc, &v) in out[o * inner..][..inner].iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                }
                if mean {
                    out.iter_mut().for_each(|v| *v /= len as f64);
                }
                let mut shape = t.shape().to_vec();
                shape[ax] = 1;
                (shape, out)
            }
        };
        let op = if mean {
            Op::Mean { x, axis }
        } else {
            Op::Sum { x, axis }
        };
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(shape, out), op, rg))
    }

    /// Sum over `axis` (kept as size 1), or over everything into `[1]`.
    pub fn sum(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(x, axis, false)
    }

    pub fn mean(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(x, axis, true)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        self.reduce(x, None, false).expect("full reduction cannot fail")
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = *xs.first().ok_or(Error::EmptyInput("concat"))?;
        self.check_axis("concat", first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in xs {
                let len = self.shape(v)[axis];
                out.extend_from_slice(&self.data(v)[o * len * inner..][..len * inner]);
            }
        }
        let rg = self.rg(xs);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.check_axis("slice", x, axis)?;
        let s = self.shape(x).to_vec();
        if start >= end || end > s[axis] {
            return Err(Error::InvalidAttr {
                op: "slice",
                msg: format!("range {start}..{end} invalid for axis of length {}", s[axis]),
            });
        }
        let (outer, len, inner) = split_axis(&s, axis);
        let w = end - start;
        let d = self.data(x);
        let mut out = Vec::with_capacity(outer * w * inner);
        for o in 0..outer {
            out.extend_from_slice(&d[(o * len + start) * inner..][..w * inner]);
        }
        let mut shape = s;
        shape[axis] = w;
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Slice { x, axis, start },
            rg,
        ))
    }

    /// Selects positions along the last axis; indices may repeat.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let last = *s.last().expect("rank >= 1");
        if indices.is_empty() || indices.iter().any(|&i| i >= last) {
            return Err(Error::InvalidAttr {
                op: "gather",
                msg: format!("indices must be non-empty and < {last}"),
            });
        }
        let outer = s[..s.len() - 1].iter().product::<usize>();
        let d = self.data(x);
        let mut out = Vec::with_capacity(outer * indices.len());
        for o in 0..outer {
            let row = &d[o * last..][..last];
            out.extend(indices.iter().map(|&i| row[i]));
        }
        let mut shape = s;
        *shape.last_mut().unwrap() = indices.len();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Gather {
                x,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape.to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    // ---- normalization ---------------------------------------------------------

    /// Global layer norm over a `[C, T]` input: one mean and variance over
    /// all entries, then per-channel `gain` and `bias` (`C` entries each).
    pub fn layer_norm_global(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2
            || self.value(gain).numel() != s[0]
            || self.value(bias).numel() != s[0]
        {
            return Err(Error::ShapeMismatch {
                op: "layer_norm_global",
                lhs: s,
                rhs: self.shape(gain).to_vec(),
            });
        }
        let (c, t) = (s[0], s[1]);
        let d = self.data(x);
        let n = d.len() as f64;
        let mean = d.iter().sum::<f64>() / n;
        let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let rstd = 1.0 / (var + eps).sqrt();
        let (gd, bd) = (self.data(gain), self.data(bias));
        let mut out = Vec::with_capacity(d.len());
        for ch in 0..c {
            let (gc, bc) = (gd[ch], bd[ch]);
            out.extend(d[ch * t..][..t].iter().map(|v| gc * (v - mean) * rstd + bc));
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            Tensor::from_parts(s, out),
            Op::LayerNormGlobal {
                x,
                gain,
                bias,
                mean,
                rstd,
            },
            rg,
        ))
    }

    fn softmax_impl(&mut self, x: Var, axis: usize, log: bool) -> Result<Var> {
        let name = if log { "log_softmax" } else { "softmax" };
        self.check_axis(name, x, axis)?;
        let s = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis(&s, axis);
        let d = self.data(x);
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * len + a) * inner + i;
                let max = (0..len).map(|a| d[at(a)]).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..len).map(|a| (d[at(a)] - max).exp()).sum();
                let lz = z.ln();
                for a in 0..len {
                    let shifted = d[at(a)] - max;
                    out[at(a)] = if log { shifted - lz } else { shifted.exp() / z };
                }
            }
        }
        let op = if log {
            Op::LogSoftmax { x, axis }
        } else {
            Op::Softmax { x, axis }
        };
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(s, out), op, rg))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(x, axis, false)
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(x, axis, true)
    }

    /// Dynamic dispatch by kind, for callers that carry op kinds as data.
    pub fn apply(&mut self, kind: OpKind, inputs: &[Var], attrs: &OpAttrs) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(Error::InvalidAttr {
                    op: kind.name(),
                    msg: format!("expected {n} inputs, got {}", inputs.len()),
                })
            }
        };
        match kind {
            OpKind::Concat => return self.concat(inputs, attrs.axis.unwrap_or(0)),
            OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div | OpKind::MatMul => arity(2)?,
            OpKind::Conv1d | OpKind::Conv1dTranspose | OpKind::Prelu => arity(2)?,
            OpKind::LayerNormGlobal => arity(3)?,
            _ => arity(1)?,
        }
        let x = inputs[0];
        match kind {
            OpKind::Add => self.add(x, inputs[1]),
            OpKind::Sub => self.sub(x, inputs[1]),
            OpKind::Mul => self.mul(x, inputs[1]),
            OpKind::Div => self.div(x, inputs[1]),
            OpKind::MatMul => self.matmul(x, inputs[1]),
            OpKind::Conv1d => self.conv1d(x, inputs[1], attrs.conv),
            OpKind::Conv1dTranspose => self.conv1d_transpose(x, inputs[1], attrs.conv.stride),
            OpKind::Prelu => self.prelu(x, inputs[1]),
            OpKind::LayerNormGlobal => self.layer_norm_global(x, inputs[1], inputs[2], attrs.scalar),
            OpKind::Scale => Ok(self.scale(x, attrs.scalar)),
            OpKind::AddScalar => Ok(self.add_scalar(x, attrs.scalar)),
            OpKind::Sigmoid => Ok(self.sigmoid(x)),
            OpKind::Relu => Ok(self.relu(x)),
            OpKind::Exp => Ok(self.exp(x)),
            OpKind::Log => Ok(self.log(x)),
            OpKind::Power => Ok(self.power(x, attrs.scalar)),
            OpKind::Sum => self.sum(x, attrs.axis),
            OpKind::Mean => self.mean(x, attrs.axis),
            OpKind::Slice => self.slice(x, attrs.axis.unwrap_or(0), attrs.start, attrs.end),
            OpKind::Softmax => self.softmax(x, attrs.axis.unwrap_or(0)),
            OpKind::LogSoftmax => self.log_softmax(x, attrs.axis.unwrap_or(0)),
            OpKind::Gather => self.gather(x, &attrs.indices),
            OpKind::Reshape => self.reshape(x, &attrs.shape),
            OpKind::Concat => unreachable!(),
        }
    }

    // ---- backward ---------------------------------------------------------------

    /// Populates gradients of the scalar `loss` for every var that requires
    /// one. Gradients from earlier calls are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    /// Adds `delta(buf)` into the gradient buffer of `v`, if it wants one.
    fn accum(&mut self, v: Var, f: impl FnOnce(&mut [f64], &[Node])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        let mut buf = self.grads[v.0].take().unwrap_or_else(|| vec![0.0; n]);
        f(&mut buf, &self.nodes);
        self.grads[v.0] = Some(buf);
    }

    fn backprop_node(&mut self, i: usize, g: &[f64]) {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(op, Op::Add(..)) { 1.0 } else { -1.0 };
                self.accum(a, |da, _| da.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv));
                self.accum(b, |db, nodes| {
                    let map = broadcast_map("add", nodes[a.0].value.shape(), nodes[b.0].value.shape())
                        .expect("checked in forward");
                    match map {
                        Bcast::Same => db.iter_mut().zip(g).for_each(|(d, &gv)| *d += sign * gv),
                        m => g.iter().enumerate().for_each(|(k, &gv)| db[m.at(k)] += sign * gv),
                    }
                });
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let is_div = matches!(op, Op::Div(..));
                let map = broadcast_map(
                    "mul",
                    self.nodes[a.0].value.shape(),
                    self.nodes[b.0].value.shape(),
                )
                .expect("checked in forward");
                let bidx = |k: usize| map.at(k);
                self.accum(a, |da, nodes| {
                    let bd = nodes[b.0].value.data();
                    for (k, d) in da.iter_mut().enumerate() {
                        let bv = bd[bidx(k)];
                        *d += if is_div { g[k] / bv } else { g[k] * bv };
                    }
                });
                self.accum(b, |db, nodes| {
                    let (ad, bd) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    for (k, &gv) in g.iter().enumerate() {
                        let j = bidx(k);
                        db[j] += if is_div {
                            -gv * ad[k] / (bd[j] * bd[j])
                        } else {
                            gv * ad[k]
                        };
                    }
                });
            }
            Op::Scale(x, f) => {
                self.accum(x, |dx, _| dx.iter_mut().zip(g).for_each(|(d, &gv)| *d += f * gv));
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                self.accum(x, |dx, _| dx.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv));
            }
            Op::Sigmoid(x) => {
                self.accum(x, |dx, nodes| {
                    let y = nodes[i].value.data();
                    for ((d, &gv), &yv) in dx.iter_mut().zip(g).zip(y) {
                        *d += gv * yv * (1.0 - yv);
                    }
                });
            }
            Op::Relu(x) => {
                self.accum(x, |dx, nodes| {
                    let xv = nodes[x.0].value.data();
                    for ((d, &gv), &v) in dx.iter_mut().zip(g).zip(xv) {
                        if v > 0.0 {
                            *d += gv;
                        }
                    }
                });
            }
            Op::Exp(x) => {
                self.accum(x, |dx, nodes| {
                    let y = nodes[i].value.data();
                    dx.iter_mut().zip(g).zip(y).for_each(|((d, &gv), &yv)| *d += gv * yv);
                });
            }
            Op::Log(x) => {
                self.accum(x, |dx, nodes| {
                    let xv = nodes[x.0].value.data();
                    dx.iter_mut().zip(g).zip(xv).for_each(|((d, &gv), &v)| *d += gv / v);
                });
            }
            Op::Power(x, p) => {
                self.accum(x, |dx, nodes| {
                    let xv = nodes[x.0].value.data();
                    for ((d, &gv), &v) in dx.iter_mut().zip(g).zip(xv) {
                        *d += gv * p * v.powf(p - 1.0);
                    }
                });
            }
            Op::Prelu { x, slope } => {
                let ns = self.nodes[slope.0].value.numel();
                let inner = self.nodes[x.0].value.numel() / self.nodes[x.0].value.shape()[0];
                let si = move |k: usize| if ns == 1 { 0 } else { k / inner };
                self.accum(x, |dx, nodes| {
                    let (xv, sv) = (nodes[x.0].value.data(), nodes[slope.0].value.data());
                    for (k, d) in dx.iter_mut().enumerate() {
                        *d += if xv[k] >= 0.0 { g[k] } else { g[k] * sv[si(k)] };
                    }
                });
                self.accum(slope, |ds, nodes| {
                    let xv = nodes[x.0].value.data();
                    for (k, &v) in xv.iter().enumerate() {
                        if v < 0.0 {
                            ds[si(k)] += g[k] * v;
                        }
                    }
                });
            }
            Op::MatMul(a, b) => {
                use super::gemm::{gemm, View};
                let (m, k) = {
                    let s = self.nodes[a.0].value.shape();
                    (s[0], s[1])
                };
                let n = self.nodes[b.0].value.shape()[1];
                self.accum(a, |da, nodes| {
                    let bd = nodes[b.0].value.data();
                    gemm(View::row_major(g, m, n), View::row_major(bd, k, n).t(), 1.0, da);
                });
                self.accum(b, |db, nodes| {
                    let ad = nodes[a.0].value.data();
                    gemm(View::row_major(ad, m, k).t(), View::row_major(g, m, n), 1.0, db);
                });
            }
            Op::Conv1d { x, w, attrs } => {
                let dims = self.conv_dims(x, w, &attrs).expect("checked in forward");
                let (rx, rw) = (self.nodes[x.0].requires_grad, self.nodes[w.0].requires_grad);
                let mut dx = rx.then(|| self.grads[x.0].take().unwrap_or_else(|| vec![0.0; self.nodes[x.0].value.numel()]));
                let mut dw = rw.then(|| self.grads[w.0].take().unwrap_or_else(|| vec![0.0; self.nodes[w.0].value.numel()]));
                kernels::conv1d_backward(
                    self.nodes[x.0].value.data(),
                    self.nodes[w.0].value.data(),
                    g,
                    &dims,
                    &attrs,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                );
                if let Some(dx) = dx {
                    self.grads[x.0] = Some(dx);
                }
                if let Some(dw) = dw {
                    self.grads[w.0] = Some(dw);
                }
            }
            Op::ConvTranspose { x, w, stride } => {
                let (sx, sw) = (self.nodes[x.0].value.shape(), self.nodes[w.0].value.shape());
                let dims = ConvDims {
                    cin: sx[0],
                    cout: sw[1],
                    len: sx[1],
                    kernel: sw[2],
                    out_len: (sx[1] - 1) * stride + sw[2],
                };
                let (rx, rw) = (self.nodes[x.0].requires_grad, self.nodes[w.0].requires_grad);
                let mut dx = rx.then(|| self.grads[x.0].take().unwrap_or_else(|| vec![0.0; self.nodes[x.0].value.numel()]));
                let mut dw = rw.then(|| self.grads[w.0].take().unwrap_or_else(|| vec![0.0; self.nodes[w.0].value.numel()]));
                kernels::conv_transpose1d_backward(
                    self.nodes[x.0].value.data(),
                    self.nodes[w.0].value.data(),
                    g,
                    &dims,
                    stride,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                );
                if let Some(dx) = dx {
                    self.grads[x.0] = Some(dx);
                }
                if let Some(dw) = dw {
                    self.grads[w.0] = Some(dw);
                }
            }
            Op::Sum { x, axis } | Op::Mean { x, axis } => {
                let mean = matches!(op, Op::Mean { .. });
                self.accum(x, |dx, nodes| {
                    let s = nodes[x.0].value.shape();
                    match axis {
                        None => {
                            let v = if mean { g[0] / dx.len() as f64 } else { g[0] };
                            dx.iter_mut().for_each(|d| *d += v);
                        }
                        Some(ax) => {
                            let (outer, len, inner) = split_axis(s, ax);
                            let f = if mean { 1.0 / len as f64 } else { 1.0 };
                            for o in 0..outer {
                                let go = &g[o * inner..][..inner];
                                for a in 0..len {
                                    let row = &mut dx[(o * len + a) * inner..][..inner];
                                    row.iter_mut().zip(go).for_each(|(d, &gv)| *d += f * gv);
                                }
                            }
                        }
                    }
                });
            }
            Op::Concat { xs, axis } => {
                let shape = self.nodes[i].value.shape().to_vec();
                let (outer, total, inner) = split_axis(&shape, axis);
                let mut offset = 0;
                for &v in &xs {
                    let len = self.nodes[v.0].value.shape()[axis];
                    let off = offset;
                    self.accum(v, |dv, _| {
                        for o in 0..outer {
                            let src = &g[(o * total + off) * inner..][..len * inner];
                            let dst = &mut dv[o * len * inner..][..len * inner];
                            dst.iter_mut().zip(src).for_each(|(d, &gv)| *d += gv);
                        }
                    });
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let w = self.nodes[i].value.shape()[axis];
                self.accum(x, |dx, nodes| {
                    let (outer, len, inner) = split_axis(nodes[x.0].value.shape(), axis);
                    for o in 0..outer {
                        let dst = &mut dx[(o * len + start) * inner..][..w * inner];
                        let src = &g[o * w * inner..][..w * inner];
                        dst.iter_mut().zip(src).for_each(|(d, &gv)| *d += gv);
                    }
                });
            }
            Op::Gather { x, indices } => {
                self.accum(x, |dx, nodes| {
                    let last = *nodes[x.0].value.shape().last().unwrap();
                    let outer = dx.len() / last;
                    for o in 0..outer {
                        let go = &g[o * indices.len()..][..indices.len()];
                        for (&j, &gv) in indices.iter().zip(go) {
                            dx[o * last + j] += gv;
                        }
                    }
                });
            }
            Op::LayerNormGlobal {
                x,
                gain,
                bias,
                mean,
                rstd,
            } => {
                let s = self.nodes[x.0].value.shape().to_vec();
                let (c, t) = (s[0], s[1]);
                let xd = self.nodes[x.0].value.data();
                let gd = self.nodes[gain.0].value.data();
                let xhat: Vec<f64> = xd.iter().map(|v| (v - mean) * rstd).collect();
                let mut dxhat = vec![0.0; xd.len()];
                for ch in 0..c {
                    for k in ch * t..(ch + 1) * t {
                        dxhat[k] = g[k] * gd[ch];
                    }
                }
                let n = xd.len() as f64;
                let m1 = dxhat.iter().sum::<f64>() / n;
                let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n;
                self.accum(x, |dx, _| {
                    for k in 0..dx.len() {
                        dx[k] += rstd * (dxhat[k] - m1 - xhat[k] * m2);
                    }
                });
                self.accum(gain, |dg, _| {
                    for ch in 0..c {
                        let r = ch * t..(ch + 1) * t;
                        dg[ch] += g[r.clone()].iter().zip(&xhat[r]).map(|(a, b)| a * b).sum::<f64>();
                    }
                });
                self.accum(bias, |db, _| {
                    for ch in 0..c {
                        db[ch] += g[ch * t..(ch + 1) * t].iter().sum::<f64>();
                    }
                });
            }
            Op::Softmax { x, axis } | Op::LogSoftmax { x, axis } => {
                let log = matches!(op, Op::LogSoftmax { .. });
                self.accum(x, |dx, nodes| {
                    let y = nodes[i].value.data();
                    let (outer, len, inner) = split_axis(nodes[i].value.shape(), axis);
                    for o in 0..outer {
                        for ii in 0..inner {
                            let at = |a: usize| (o * len + a) * inner + ii;
                            if log {
                                // dx = g - softmax * sum(g)
                                let gs: f64 = (0..len).map(|a| g[at(a)]).sum();
                                for a in 0..len {
                                    dx[at(a)] += g[at(a)] - y[at(a)].exp() * gs;
                                }
                            } else {
                                let dot: f64 = (0..len).map(|a| g[at(a)] * y[at(a)]).sum();
                                for a in 0..len {
                                    dx[at(a)] += y[at(a)] * (g[at(a)] - dot);
                                }
                            }
                        }
                    }
                });
            }
        }
    }
}
