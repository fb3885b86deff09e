//! Dynamic computation tape with reverse-mode differentiation.
//!
//! A [`Tape`] is rebuilt for every optimization step. Leaves are either
//! trainable ([`Tape::leaf`]) or constant ([`Tape::constant`]); every op
//! appends a node whose parents precede it, so a single reverse sweep over
//! the node list visits each node exactly once.

use super::conv::{self, Conv3dSpec, ConvGeometry};
use super::gemm::gemm;
use super::tensor::{axis_extents, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum UnaryKind {
    Neg,
    Exp,
    Log,
    Sigmoid,
    Softplus,
    Relu,
    Abs,
}

/// How the right operand of a binary op maps onto the left operand.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    Scalar,
    /// Right operand repeats along every row of width `n`.
    Row(usize),
    /// Right operand holds one value per row of width `n`.
    Col(usize),
}

impl Broadcast {
    fn resolve(a: &[usize], b: &[usize]) -> Option<Self> {
        let b_len: usize = b.iter().product();
        if a == b {
            return Some(Broadcast::Same);
        }
        if b_len == 1 {
            return Some(Broadcast::Scalar);
        }
        let last = *a.last()?;
        let b_is_row = (b.len() == 1 && b[0] == last)
            || (b.len() == a.len() && b.last() == Some(&last) && b[..b.len() - 1].iter().all(|&d| d == 1));
        if a.len() >= 2 && b_is_row {
            return Some(Broadcast::Row(last));
        }
        if a.len() >= 2 && b.len() == a.len() && b[..b.len() - 1] == a[..a.len() - 1] && b[b.len() - 1] == 1 {
            return Some(Broadcast::Col(last));
        }
        None
    }

    #[inline]
    fn index(self, i: usize) -> usize {
        match self {
            Broadcast::Same => i,
            Broadcast::Scalar => 0,
            Broadcast::Row(n) => i % n,
            Broadcast::Col(n) => i / n,
        }
    }
}

/// Per-channel batch statistics produced by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance of the batch.
    pub var: Vec<f64>,
    /// Number of values each channel statistic was computed from.
    pub count: usize,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
        bcast: Broadcast,
    },
    Unary(UnaryKind, Var),
    PowScalar(Var, f64),
    AddScalar(Var),
    MulScalar(Var, f64),
    ClampMin(Var, f64),
    SumAll(Var),
    SumAxis(Var, usize),
    NormAxis(Var, usize),
    CumProd {
        a: Var,
        axis: usize,
        exclusive: bool,
    },
    Concat(Vec<Var>, usize),
    Narrow {
        a: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    IndexRows(Var, Vec<usize>),
    Conv3d {
        input: Var,
        kernel: Var,
        geom: ConvGeometry,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        training: bool,
    },
    SoftmaxXent {
        logits: Var,
        labels: Tensor,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of `v`, or `None` when `v` is unreachable from the loss or
    /// does not require gradients.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v` with unreachable nodes reported as zeros of `len`.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

#[inline]
fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn stable_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
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

    /// Trainable leaf: receives a gradient on backward.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant input: never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    // ---------------------------------------------------------------- linear algebra

    /// `a [m×k] · b [k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    // ---------------------------------------------------------------- elementwise

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let op_name = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        };
        let bcast = Broadcast::resolve(self.shape(a), self.shape(b))
            .ok_or_else(|| Error::shape(op_name, self.shape(a), self.shape(b)))?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        if kind == BinaryKind::Div && bv.contains(&0.0) {
            return Err(Error::domain("div", "division by zero"));
        }
        let out: Vec<f64> = av
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = bv[bcast.index(i)];
                match kind {
                    BinaryKind::Add => x + y,
                    BinaryKind::Sub => x - y,
                    BinaryKind::Mul => x * y,
                    BinaryKind::Div => x / y,
                }
            })
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Binary { kind, a, b, bcast }, rg))
    }

    /// `a + b`; `b` may be the same shape, a scalar, a row (`[n]` / `[1,…,n]`)
    /// or a column (`a`'s shape with the last extent 1).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    /// `a / b`; any zero in `b` is a domain error.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    fn unary(&mut self, kind: UnaryKind, a: Var) -> Var {
        let f: fn(f64) -> f64 = match kind {
            UnaryKind::Neg => |x| -x,
            UnaryKind::Exp => f64::exp,
            UnaryKind::Log => f64::ln,
            UnaryKind::Sigmoid => stable_sigmoid,
            UnaryKind::Softplus => stable_softplus,
            UnaryKind::Relu => |x| x.max(0.0),
            UnaryKind::Abs => f64::abs,
        };
        let src = self.value(a);
        let out = Tensor::new(src.shape().to_vec(), src.data().iter().map(|&x| f(x)).collect())
            .expect("unary preserves shape");
        let rg = self.rg(a);
        self.push(out, Op::Unary(kind, a), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Neg, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Exp, a)
    }

    /// Natural log; any non-positive entry is a domain error.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| x <= 0.0 || x.is_nan()) {
            return Err(Error::domain("log", format!("non-positive entry {bad}")));
        }
        Ok(self.unary(UnaryKind::Log, a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, a)
    }

    /// `log(1 + e^x)` in the overflow-free form `max(x,0) + log1p(e^{-|x|})`.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Softplus, a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Relu, a)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Abs, a)
    }

    /// `a^p` for a constant exponent. Negative bases need an integer `p`.
    pub fn powf(&mut self, a: Var, p: f64) -> Result<Var> {
        let src = self.value(a);
        if p.fract() != 0.0 && src.data().iter().any(|&x| x < 0.0) {
            return Err(Error::domain("pow", format!("negative base with exponent {p}")));
        }
        let out = Tensor::new(src.shape().to_vec(), src.data().iter().map(|&x| x.powf(p)).collect())?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::PowScalar(a, p), rg))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let src = self.value(a);
        let out =
            Tensor::new(src.shape().to_vec(), src.data().iter().map(|&x| x + s).collect()).expect("shape preserved");
        let rg = self.rg(a);
        self.push(out, Op::AddScalar(a), rg)
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Var {
        let src = self.value(a);
        let out =
            Tensor::new(src.shape().to_vec(), src.data().iter().map(|&x| x * s).collect()).expect("shape preserved");
        let rg = self.rg(a);
        self.push(out, Op::MulScalar(a, s), rg)
    }

    /// `max(a, min)`; entries at or below `min` pass no gradient.
    pub fn clamp_min(&mut self, a: Var, min: f64) -> Var {
        let src = self.value(a);
        let out = Tensor::new(src.shape().to_vec(), src.data().iter().map(|&x| x.max(min)).collect())
            .expect("shape preserved");
        let rg = self.rg(a);
        self.push(out, Op::ClampMin(a, min), rg)
    }

    // ---------------------------------------------------------------- reductions

    /// Sum of all entries, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.mul_scalar(s, 1.0 / n)
    }

    fn reduced_shape(shape: &[usize], axis: usize, keepdim: bool) -> Vec<usize> {
        let mut out = shape.to_vec();
        if keepdim {
            out[axis] = 1;
        } else {
            out.remove(axis);
            if out.is_empty() {
                out.push(1);
            }
        }
        out
    }

    fn check_axis(&self, op: &'static str, a: Var, axis: usize) -> Result<()> {
        if axis >= self.shape(a).len() {
            return Err(Error::shape(op, self.shape(a), &[axis]));
        }
        Ok(())
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize, keepdim: bool) -> Result<Var> {
        self.check_axis("sum_axis", a, axis)?;
        let (outer, len, inner) = axis_extents(self.shape(a), axis);
        let src = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let base = (o * len + j) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let shape = Self::reduced_shape(self.shape(a), axis, keepdim);
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::SumAxis(a, axis), rg))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize, keepdim: bool) -> Result<Var> {
        self.check_axis("mean_axis", a, axis)?;
        let n = self.shape(a)[axis].max(1) as f64;
        let s = self.sum_axis(a, axis, keepdim)?;
        Ok(self.mul_scalar(s, 1.0 / n))
    }

    /// Euclidean norm along `axis`. The subgradient at a zero vector is zero.
    pub fn norm_axis(&mut self, a: Var, axis: usize, keepdim: bool) -> Result<Var> {
        self.check_axis("norm_axis", a, axis)?;
        let (outer, len, inner) = axis_extents(self.shape(a), axis);
        let src = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let base = (o * len + j) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i] * src[base + i];
                }
            }
        }
        out.iter_mut().for_each(|v| *v = v.sqrt());
        let shape = Self::reduced_shape(self.shape(a), axis, keepdim);
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::NormAxis(a, axis), rg))
    }

    /// Prefix products along `axis`. Exclusive products start at exactly 1.
    pub fn cumprod(&mut self, a: Var, axis: usize, exclusive: bool) -> Result<Var> {
        self.check_axis("cumprod", a, axis)?;
        let (outer, len, inner) = axis_extents(self.shape(a), axis);
        let src = self.value(a).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let mut acc = 1.0;
                for j in 0..len {
                    let idx = (o * len + j) * inner + i;
                    if exclusive {
                        out[idx] = acc;
                        acc *= src[idx];
                    } else {
                        acc *= src[idx];
                        out[idx] = acc;
                    }
                }
            }
        }
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::CumProd { a, axis, exclusive }, rg))
    }

    // ---------------------------------------------------------------- shape ops

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        self.check_axis("concat", first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_extents(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                let chunk = len * inner;
                out.extend_from_slice(&self.value(p).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat(parts.to_vec(), axis), rg))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis("narrow", a, axis)?;
        let src_shape = self.shape(a).to_vec();
        if start + len > src_shape[axis] {
            return Err(Error::shape("narrow", &src_shape, &[start, len]));
        }
        let (outer, full, inner) = axis_extents(&src_shape, axis);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * full + start) * inner;
            out.extend_from_slice(&src[from..from + len * inner]);
        }
        let mut shape = src_shape;
        shape[axis] = len;
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::Narrow { a, axis, start }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Reorders axes: output axis `k` is input axis `perm[k]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let src_shape = self.shape(a).to_vec();
        let mut seen = vec![false; src_shape.len()];
        let valid = perm.len() == src_shape.len()
            && perm
                .iter()
                .all(|&p| p < seen.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(Error::shape("permute", &src_shape, perm));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| src_shape[p]).collect();
        let src = self.value(a).data();
        let mut out = vec![0.0; src.len()];
        for_each_permuted(&src_shape, perm, |dst, s| out[dst] = src[s]);
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Permute(a, perm.to_vec()), rg))
    }

    /// Gathers rows (first-axis slices) of `a` in the given order.
    pub fn index_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let src_shape = self.shape(a).to_vec();
        let rows = *src_shape.first().unwrap_or(&0);
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::shape("index_rows", &src_shape, &[bad]));
        }
        let width = src_shape[1..].iter().product::<usize>();
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(index.len() * width);
        for &i in index {
            out.extend_from_slice(&src[i * width..(i + 1) * width]);
        }
        let mut shape = src_shape;
        shape[0] = index.len();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::IndexRows(a, index.to_vec()), rg))
    }

    // ---------------------------------------------------------------- fused layers

    /// Cross-correlation of `input [N×Cin×D×H×W]` with
    /// `kernel [Cout×Cin×kd×kh×kw]`.
    pub fn conv3d(&mut self, input: Var, kernel: Var, spec: Conv3dSpec) -> Result<Var> {
        let geom = ConvGeometry::new(self.shape(input), self.shape(kernel), spec)?;
        let out = conv::forward(&geom, self.value(input).data(), self.value(kernel).data());
        let value = Tensor::new(geom.output_shape(), out)?;
        let rg = self.rg(input) || self.rg(kernel);
        Ok(self.push(value, Op::Conv3d { input, kernel, geom }, rg))
    }

    fn bn_check(&self, x: Var, gamma: Var, beta: Var) -> Result<usize> {
        let s = self.shape(x);
        if s.len() < 2 {
            return Err(Error::shape("batch_norm", s, &[]));
        }
        let c = s[1];
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::shape("batch_norm", s, self.shape(gamma)));
        }
        Ok(c)
    }

    /// Training-mode batch norm over axis 1 of `x [N×C×…]`, followed by the
    /// per-channel affine `gamma·x̂ + beta`.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let c = self.bn_check(x, gamma, beta)?;
        let (outer, _, inner) = axis_extents(self.shape(x), 1);
        let count = outer * inner;
        let src = self.value(x).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                mean[ch] += src[base..base + inner].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                var[ch] += src[base..base + inner]
                    .iter()
                    .map(|v| (v - mean[ch]).powi(2))
                    .sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= count as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (y, xhat) = self.bn_apply(x, gamma, beta, &mean, &inv_std, c, outer, inner);
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let out = self.push(
            Tensor::new(shape, y)?,
            Op::BatchNorm {
                input: x,
                gamma,
                beta,
                xhat,
                inv_std,
                training: true,
            },
            rg,
        );
        Ok((out, BatchStats { mean, var, count }))
    }

    /// Inference-mode batch norm using fixed running statistics.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let c = self.bn_check(x, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape("batch_norm", self.shape(x), &[running_mean.len()]));
        }
        let (outer, _, inner) = axis_extents(self.shape(x), 1);
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (y, xhat) = self.bn_apply(x, gamma, beta, running_mean, &inv_std, c, outer, inner);
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::new(shape, y)?,
            Op::BatchNorm {
                input: x,
                gamma,
                beta,
                xhat,
                inv_std,
                training: false,
            },
            rg,
        ))
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_apply(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: &[f64],
        c: usize,
        outer: usize,
        inner: usize,
    ) -> (Vec<f64>, Vec<f64>) {
        let src = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; src.len()];
        let mut y = vec![0.0; src.len()];
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                for i in base..base + inner {
                    xhat[i] = (src[i] - mean[ch]) * inv_std[ch];
                    y[i] = g[ch] * xhat[i] + b[ch];
                }
            }
        }
        (y, xhat)
    }

    /// Mean over the batch of `−Σ y·log softmax(logits)`, via log-sum-exp.
    /// Every label row must sum to 1 within 1e-6.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &Tensor) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || labels.shape() != s {
            return Err(Error::shape("softmax_cross_entropy", s, labels.shape()));
        }
        let (batch, k) = (s[0], s[1]);
        for r in 0..batch {
            let total: f64 = labels.row(r).iter().sum();
            if (total - 1.0).abs() > 1e-6 {
                return Err(Error::Contract(format!("label row {r} sums to {total}, expected 1")));
            }
        }
        let z = self.value(logits).data();
        let mut probs = vec![0.0; z.len()];
        let mut loss = 0.0;
        for r in 0..batch {
            let row = &z[r * k..(r + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for j in 0..k {
                let logp = row[j] - lse;
                probs[r * k + j] = logp.exp();
                let y = labels.data()[r * k + j];
                if y != 0.0 {
                    loss -= y * logp;
                }
            }
        }
        loss /= batch.max(1) as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                logits,
                labels: labels.clone(),
                probs,
            },
            rg,
        ))
    }

    // ---------------------------------------------------------------- backward

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Contract("loss is not on this tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if self.rg(loss) {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        Ok(Gradients { grads })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut [f64]> {
        if !self.rg(v) {
            return None;
        }
        let len = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]).as_mut_slice())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (self.value(*a).data().to_vec(), self.value(*b).data().to_vec());
                if let Some(ga) = self.slot(grads, *a) {
                    gemm(m, n, k, g, false, &bv, true, ga, true);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gemm(k, m, n, &av, true, g, false, gb, true);
                }
            }
            Op::Binary { kind, a, b, bcast } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(ga) = self.slot(grads, *a) {
                    for (idx, gi) in g.iter().enumerate() {
                        let y = bv[bcast.index(idx)];
                        ga[idx] += match kind {
                            BinaryKind::Add | BinaryKind::Sub => *gi,
                            BinaryKind::Mul => gi * y,
                            BinaryKind::Div => gi / y,
                        };
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for (idx, gi) in g.iter().enumerate() {
                        let j = bcast.index(idx);
                        gb[j] += match kind {
                            BinaryKind::Add => *gi,
                            BinaryKind::Sub => -gi,
                            BinaryKind::Mul => gi * av[idx],
                            BinaryKind::Div => -gi * av[idx] / (bv[j] * bv[j]),
                        };
                    }
                }
            }
            Op::Unary(kind, a) => {
                let x = self.value(*a).data();
                if let Some(ga) = self.slot(grads, *a) {
                    for idx in 0..g.len() {
                        let d = match kind {
                            UnaryKind::Neg => -1.0,
                            UnaryKind::Exp => out[idx],
                            UnaryKind::Log => 1.0 / x[idx],
                            UnaryKind::Sigmoid => out[idx] * (1.0 - out[idx]),
                            UnaryKind::Softplus => stable_sigmoid(x[idx]),
                            UnaryKind::Relu => f64::from(u8::from(x[idx] > 0.0)),
                            UnaryKind::Abs => {
                                if x[idx] > 0.0 {
                                    1.0
                                } else if x[idx] < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                }
                            }
                        };
                        ga[idx] += g[idx] * d;
                    }
                }
            }
            Op::PowScalar(a, p) => {
                let x = self.value(*a).data();
                if let Some(ga) = self.slot(grads, *a) {
                    for idx in 0..g.len() {
                        ga[idx] += g[idx] * p * x[idx].powf(p - 1.0);
                    }
                }
            }
            Op::AddScalar(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(d, gi)| *d += gi);
                }
            }
            Op::MulScalar(a, s) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(d, gi)| *d += gi * s);
                }
            }
            Op::ClampMin(a, min) => {
                let x = self.value(*a).data();
                if let Some(ga) = self.slot(grads, *a) {
                    for idx in 0..g.len() {
                        if x[idx] > *min {
                            ga[idx] += g[idx];
                        }
                    }
                }
            }
            Op::SumAll(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::SumAxis(a, axis) => {
                let (outer, len, inner) = axis_extents(self.shape(*a), *axis);
                if let Some(ga) = self.slot(grads, *a) {
                    for o in 0..outer {
                        for j in 0..len {
                            for k in 0..inner {
                                ga[(o * len + j) * inner + k] += g[o * inner + k];
                            }
                        }
                    }
                }
            }
            Op::NormAxis(a, axis) => {
                let (outer, len, inner) = axis_extents(self.shape(*a), *axis);
                let x = self.value(*a).data();
                if let Some(ga) = self.slot(grads, *a) {
                    for o in 0..outer {
                        for k in 0..inner {
                            let norm = out[o * inner + k];
                            if norm == 0.0 {
                                continue;
                            }
                            let scale = g[o * inner + k] / norm;
                            for j in 0..len {
                                let idx = (o * len + j) * inner + k;
                                ga[idx] += scale * x[idx];
                            }
                        }
                    }
                }
            }
            Op::CumProd { a, axis, exclusive } => {
                let (outer, len, inner) = axis_extents(self.shape(*a), *axis);
                let x = self.value(*a).data();
                if let Some(ga) = self.slot(grads, *a) {
                    cumprod_backward(x, g, ga, outer, len, inner, *exclusive);
                }
            }
            Op::Concat(parts, axis) => {
                let (outer, _, inner) = axis_extents(self.shape(Var(i)), *axis);
                let total = self.shape(Var(i))[*axis];
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if let Some(gp) = self.slot(grads, p) {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * len * inner;
                            for t in 0..len * inner {
                                gp[dst + t] += g[src + t];
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::Narrow { a, axis, start } => {
                let (outer, full, inner) = axis_extents(self.shape(*a), *axis);
                let len = self.shape(Var(i))[*axis];
                if let Some(ga) = self.slot(grads, *a) {
                    for o in 0..outer {
                        let dst = (o * full + start) * inner;
                        let src = o * len * inner;
                        for t in 0..len * inner {
                            ga[dst + t] += g[src + t];
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(d, gi)| *d += gi);
                }
            }
            Op::Permute(a, perm) => {
                let src_shape = self.shape(*a).to_vec();
                if let Some(ga) = self.slot(grads, *a) {
                    for_each_permuted(&src_shape, perm, |dst, s| ga[s] += g[dst]);
                }
            }
            Op::IndexRows(a, index) => {
                let width: usize = self.shape(*a)[1..].iter().product();
                if let Some(ga) = self.slot(grads, *a) {
                    for (r, &src) in index.iter().enumerate() {
                        for t in 0..width {
                            ga[src * width + t] += g[r * width + t];
                        }
                    }
                }
            }
            Op::Conv3d { input, kernel, geom } => {
                let x = self.value(*input).data().to_vec();
                let w = self.value(*kernel).data().to_vec();
                let mut gi = self.rg(*input).then(|| vec![0.0; x.len()]);
                let mut gw = self.rg(*kernel).then(|| vec![0.0; w.len()]);
                conv::backward(geom, &x, &w, g, gi.as_deref_mut(), gw.as_deref_mut());
                if let (Some(src), Some(dst)) = (gi, self.slot(grads, *input)) {
                    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                }
                if let (Some(src), Some(dst)) = (gw, self.slot(grads, *kernel)) {
                    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            } => {
                let (outer, c, inner) = axis_extents(self.shape(*input), 1);
                let count = (outer * inner) as f64;
                let gam = self.value(*gamma).data().to_vec();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for o in 0..outer {
                    for ch in 0..c {
                        let base = (o * c + ch) * inner;
                        for t in base..base + inner {
                            sum_g[ch] += g[t];
                            sum_gx[ch] += g[t] * xhat[t];
                        }
                    }
                }
                if let Some(gg) = self.slot(grads, *gamma) {
                    gg.iter_mut().zip(&sum_gx).for_each(|(d, s)| *d += s);
                }
                if let Some(gb) = self.slot(grads, *beta) {
                    gb.iter_mut().zip(&sum_g).for_each(|(d, s)| *d += s);
                }
                if let Some(gx) = self.slot(grads, *input) {
                    for o in 0..outer {
                        for ch in 0..c {
                            let base = (o * c + ch) * inner;
                            let k = gam[ch] * inv_std[ch];
                            for t in base..base + inner {
                                gx[t] += if *training {
                                    k * (g[t] - sum_g[ch] / count - xhat[t] * sum_gx[ch] / count)
                                } else {
                                    k * g[t]
                                };
                            }
                        }
                    }
                }
            }
            Op::SoftmaxXent { logits, labels, probs } => {
                let batch = self.shape(*logits)[0].max(1) as f64;
                if let Some(gl) = self.slot(grads, *logits) {
                    for (t, d) in gl.iter_mut().enumerate() {
                        *d += g[0] * (probs[t] - labels.data()[t]) / batch;
                    }
                }
            }
        }
    }

    /// Which side of each kink (relu, abs, clamp) every recorded input sits
    /// on. Finite-difference probes are only valid when this signature does
    /// not change across the probe interval.
    pub fn kink_signature(&self) -> Vec<i8> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            let (a, threshold) = match node.op {
                Op::Unary(UnaryKind::Relu | UnaryKind::Abs, a) => (a, 0.0),
                Op::ClampMin(a, min) => (a, min),
                _ => continue,
            };
            sig.extend(self.value(a).data().iter().map(|&x| match x.partial_cmp(&threshold) {
                Some(std::cmp::Ordering::Greater) => 1,
                Some(std::cmp::Ordering::Less) => -1,
                _ => 0,
            }));
        }
        sig
    }
}

/// Calls `f(output_offset, input_offset)` for every element of the permuted
/// view of a tensor with `src_shape`.
fn for_each_permuted(src_shape: &[usize], perm: &[usize], mut f: impl FnMut(usize, usize)) {
    let nd = src_shape.len();
    let mut src_strides = vec![1; nd];
    for d in (0..nd.saturating_sub(1)).rev() {
        src_strides[d] = src_strides[d + 1] * src_shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| src_shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
    let total: usize = src_shape.iter().product();
    let mut idx = vec![0usize; nd];
    let mut src = 0usize;
    for dst in 0..total {
        f(dst, src);
        for d in (0..nd).rev() {
            idx[d] += 1;
            src += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
}

/// Zero-safe cumulative-product gradient using suffix recurrences only.
///
/// Exclusive: `dx_i = P_i · S_i`, `S_i = g_{i+1} + x_{i+1}·S_{i+1}`, `S_{n-1} = 0`.
/// Inclusive: `dx_i = P_i · T_i`, `T_i = g_i + x_{i+1}·T_{i+1}`, `T_{n-1} = g_{n-1}`,
/// where `P_i` is the exclusive prefix product.
fn cumprod_backward(x: &[f64], g: &[f64], gx: &mut [f64], outer: usize, len: usize, inner: usize, exclusive: bool) {
    let mut prefix = vec![0.0; len];
    for o in 0..outer {
        for k in 0..inner {
            let at = |j: usize| (o * len + j) * inner + k;
            let mut acc = 1.0;
            for (j, p) in prefix.iter_mut().enumerate() {
                *p = acc;
                acc *= x[at(j)];
            }
            let mut suffix = 0.0;
            for j in (0..len).rev() {
                if exclusive {
                    if j + 1 < len {
                        suffix = g[at(j + 1)] + x[at(j + 1)] * suffix;
                    }
                } else if j + 1 < len {
                    suffix = g[at(j)] + x[at(j + 1)] * suffix;
                } else {
                    suffix = g[at(j)];
                }
                gx[at(j)] += prefix[j] * suffix;
            }
        }
    }
}
