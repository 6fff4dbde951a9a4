//! Reverse-mode tape. Operations are recorded in execution order and
//! `backward` walks them in reverse.

use std::collections::HashMap;
use std::sync::Arc;

use super::broadcast;
use super::kernels::{self, AttnDims};
use super::tensor::last_dim;
use super::{NumericsError, ParamId, ParamStore, Result, Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Per-token rotation angles for [`Tape::rotary`]; `cos`/`sin` are `[tokens, pairs]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RotaryAngles<T> {
    pub tokens: usize,
    pub pairs: usize,
    pub cos: Vec<T>,
    pub sin: Vec<T>,
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Silu(Var),
    Gelu(Var),
    Relu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Option<Var>,
        bias: Option<Var>,
        stats: Vec<T>,
    },
    MatMul(Var, Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    BroadcastTo(Var),
    Sum(Var),
    Mean(Var),
    Embedding {
        table: Var,
        idx: Vec<usize>,
    },
    Pick {
        x: Var,
        idx: Vec<usize>,
    },
    Rotary {
        x: Var,
        angles: Arc<RotaryAngles<T>>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        probs: Vec<T>,
    },
    Patchify(Var, usize),
    Unpatchify(Var, usize),
    Im2col3(Var),
    AvgPool2(Var),
}

impl<T> Op<T> {
    fn kernel(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Silu(_) => "silu",
            Op::Gelu(_) => "gelu",
            Op::Relu(_) => "relu",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::MatMul(..) => "matmul",
            Op::Reshape(_) => "reshape",
            Op::Permute(..) => "permute",
            Op::Concat(..) => "concat",
            Op::Narrow { .. } => "narrow",
            Op::BroadcastTo(_) => "broadcast_to",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Embedding { .. } => "embedding",
            Op::Pick { .. } => "pick",
            Op::Rotary { .. } => "rotary",
            Op::Attention { .. } => "attention",
            Op::Patchify(..) => "patchify",
            Op::Unpatchify(..) => "unpatchify",
            Op::Im2col3(_) => "im2col3",
            Op::AvgPool2(_) => "avg_pool2",
        }
    }
}

thread_local! {
    static MUTATED: std::cell::Cell<Option<&'static str>> = const { std::cell::Cell::new(None) };
}

/// Fault injection for self-tests: while alive, the backward pass of the
/// named kernel on this thread scales its incoming gradient by 1.01.
#[derive(Debug)]
pub struct BackwardMutation {
    prev: Option<&'static str>,
}

impl BackwardMutation {
    pub fn new(kernel: &'static str) -> Self {
        Self {
            prev: MUTATED.with(|m| m.replace(Some(kernel))),
        }
    }
}

impl Drop for BackwardMutation {
    fn drop(&mut self) {
        MUTATED.with(|m| m.set(self.prev));
    }
}

struct Node<T> {
    /// `None` for parameter nodes, whose value lives in the store.
    value: Option<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    inputs: HashMap<usize, Tensor<T>>,
    params: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a differentiable leaf created with [`Tape::leaf`].
    pub fn wrt(&self, var: Var) -> Option<&Tensor<T>> {
        self.inputs.get(&var.0)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn into_params(self) -> Vec<Option<Tensor<T>>> {
        self.params
    }
}

/// Records a forward computation for reverse-mode differentiation.
///
/// One tape per thread; each forward pass records onto a fresh tape.
pub struct Tape<'p, T: Scalar> {
    params: Option<&'p ParamStore<T>>,
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    check_finite: bool,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<'static, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<'static, T> {
    pub fn new() -> Self {
        Self {
            params: None,
            nodes: Vec::new(),
            grad_enabled: true,
            check_finite: true,
            consumed: false,
        }
    }
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn with_params(params: &'p ParamStore<T>) -> Self {
        Self {
            params: Some(params),
            nodes: Vec::new(),
            grad_enabled: true,
            check_finite: true,
            consumed: false,
        }
    }

    /// Forward-only tape: nothing is saved for backward.
    pub fn inference(params: &'p ParamStore<T>) -> Self {
        Self {
            grad_enabled: false,
            ..Self::with_params(params)
        }
    }

    /// Toggle the non-finite check performed after every kernel.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.expect("param node without store").get(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool, name: &'static str) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(NumericsError::NonFinite { op: name });
        }
        let requires_grad = requires_grad && self.grad_enabled;
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Differentiable input; its gradient is reported by [`Gradients::wrt`].
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let rg = self.grad_enabled;
        self.nodes.push(Node {
            value: Some(t),
            op: Op::Leaf,
            requires_grad: rg,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: Some(t),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        let store = self.params.ok_or(NumericsError::NoParamStore)?;
        if id.0 >= store.len() {
            return Err(NumericsError::IndexOutOfRange {
                op: "param",
                index: id.0,
                size: store.len(),
            });
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad: self.grad_enabled,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---- elementwise -------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (shape, data) = broadcast::binary(ta.shape(), ta.data(), tb.shape(), tb.data(), name, f)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(shape, data)?, op, rg, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, a: Var, name: &'static str, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let out = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(out, op, rg, name)
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        self.unary(a, "scale", |x| x * factor, Op::Scale(a, factor))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        self.unary(a, "add_scalar", |x| x + c, Op::AddScalar(a))
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "silu", kernels::silu, Op::Silu(a))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "gelu", kernels::gelu, Op::Gelu(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "relu", |x| x.max(T::zero()), Op::Relu(a))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let d = last_dim(t.shape(), "softmax")?;
        let mut out = t.clone();
        kernels::softmax_rows(out.data_mut(), d);
        let rg = self.rg(a);
        self.push(out, Op::Softmax(a), rg, "softmax")
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let d = last_dim(t.shape(), "log_softmax")?;
        let mut out = t.clone();
        kernels::log_softmax_rows(out.data_mut(), d);
        let rg = self.rg(a);
        self.push(out, Op::LogSoftmax(a), rg, "log_softmax")
    }

    /// Layer norm over the last axis with optional affine parameters.
    pub fn layer_norm(&mut self, x: Var, gain: Option<Var>, bias: Option<Var>, eps: T) -> Result<Var> {
        let tx = self.value(x);
        let d = last_dim(tx.shape(), "layer_norm")?;
        for p in [gain, bias].into_iter().flatten() {
            if self.shape(p) != [d] {
                return Err(NumericsError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: tx.shape().to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let rows = tx.numel() / d;
        let mut out = vec![T::zero(); tx.numel()];
        let mut stats = vec![T::zero(); 2 * rows];
        kernels::layer_norm_forward(
            tx.data(),
            gain.map(|g| self.value(g).data()),
            bias.map(|b| self.value(b).data()),
            &mut out,
            &mut stats,
            d,
            eps,
        );
        let shape = tx.shape().to_vec();
        let rg = self.rg(x) || gain.is_some_and(|g| self.rg(g)) || bias.is_some_and(|b| self.rg(b));
        self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm { x, gain, bias, stats },
            rg,
            "layer_norm",
        )
    }

    // ---- linear algebra ------------------------------------------------

    /// `a[..., k] x b[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, n) = kernels::matmul_dims(ta.shape(), tb.shape())?;
        let mut out = vec![T::zero(); m * n];
        kernels::matmul(ta.data(), tb.data(), &mut out, m, k, n, false);
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(shape, out)?, Op::MatMul(a, b), rg, "matmul")
    }

    /// `x w + b` where `w` is `[in, out]` and `b` is `[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    // ---- shape ops -----------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape.to_vec())?;
        let rg = self.rg(a);
        self.push(out, Op::Reshape(a), rg, "reshape")
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let mut seen = vec![false; t.rank()];
        if perm.len() != t.rank() || perm.iter().any(|&p| p >= t.rank() || std::mem::replace(&mut seen[p], true)) {
            return Err(NumericsError::InvalidShape {
                op: "permute",
                shape: t.shape().to_vec(),
                reason: format!("bad permutation {perm:?}"),
            });
        }
        let (shape, data) = permute_data(t.shape(), t.data(), perm);
        let rg = self.rg(a);
        self.push(Tensor::new(shape, data)?, Op::Permute(a, perm.to_vec()), rg, "permute")
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.value(a).rank();
        if r < 2 {
            return Err(NumericsError::InvalidShape {
                op: "transpose",
                shape: self.shape(a).to_vec(),
                reason: "rank below 2".into(),
            });
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 1, r - 2);
        self.permute(a, &perm)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| NumericsError::InvalidShape {
            op: "concat",
            shape: vec![],
            reason: "no inputs".into(),
        })?);
        if axis >= first.len() {
            return Err(NumericsError::InvalidShape {
                op: "concat",
                shape: first.to_vec(),
                reason: format!("axis {axis} out of range"),
            });
        }
        let mut shape = first.to_vec();
        shape[axis] = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == shape.len()
                && s.iter().zip(&shape).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat",
                    lhs: first.to_vec(),
                    rhs: s.to_vec(),
                });
            }
            shape[axis] += s[axis];
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let block = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::new(shape, data)?, Op::Concat(parts.to_vec(), axis), rg, "concat")
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() || start + len > t.shape()[axis] {
            return Err(NumericsError::InvalidShape {
                op: "narrow",
                shape: t.shape().to_vec(),
                reason: format!("axis {axis} range {start}..{}", start + len),
            });
        }
        let outer: usize = t.shape()[..axis].iter().product();
        let inner: usize = t.shape()[axis + 1..].iter().product();
        let full = t.shape()[axis] * inner;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&t.data()[o * full + start * inner..o * full + (start + len) * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let rg = self.rg(x);
        self.push(Tensor::new(shape, data)?, Op::Narrow { x, axis, start }, rg, "narrow")
    }

    /// Split the last axis into `n` equal chunks.
    pub fn chunk_last(&mut self, x: Var, n: usize) -> Result<Vec<Var>> {
        let shape = self.shape(x).to_vec();
        let axis = shape.len().saturating_sub(1);
        let d = *shape.last().unwrap_or(&0);
        if n == 0 || d % n != 0 {
            return Err(NumericsError::InvalidShape {
                op: "chunk",
                shape,
                reason: format!("last axis not divisible by {n}"),
            });
        }
        (0..n).map(|i| self.narrow(x, axis, i * d / n, d / n)).collect()
    }

    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let out = broadcast::broadcast_shape(t.shape(), shape)?;
        if out != shape {
            return Err(NumericsError::ShapeMismatch {
                op: "broadcast_to",
                lhs: t.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let data = broadcast::expand(t.data(), t.shape(), shape);
        let rg = self.rg(a);
        self.push(Tensor::new(shape.to_vec(), data)?, Op::BroadcastTo(a), rg, "broadcast_to")
    }

    // ---- reductions ----------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(v), Op::Sum(a), rg, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).mean();
        let rg = self.rg(a);
        self.push(Tensor::scalar(v), Op::Mean(a), rg, "mean")
    }

    // ---- indexing ------------------------------------------------------

    /// Rows of a `[vocab, d]` table.
    pub fn embedding(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (vocab, d) = match *t.shape() {
            [v, d] => (v, d),
            _ => {
                return Err(NumericsError::InvalidShape {
                    op: "embedding",
                    shape: t.shape().to_vec(),
                    reason: "table must be rank 2".into(),
                })
            }
        };
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= vocab {
                return Err(NumericsError::IndexOutOfRange {
                    op: "embedding",
                    index: i,
                    size: vocab,
                });
            }
            data.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        self.push(
            Tensor::new([idx.len(), d], data)?,
            Op::Embedding {
                table,
                idx: idx.to_vec(),
            },
            rg,
            "embedding",
        )
    }

    /// `out[i] = x[i, idx[i]]` for `x` of shape `[n, c]`.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (n, c) = match *t.shape() {
            [n, c] if n == idx.len() => (n, c),
            _ => {
                return Err(NumericsError::ShapeMismatch {
                    op: "pick",
                    lhs: t.shape().to_vec(),
                    rhs: vec![idx.len()],
                })
            }
        };
        let mut data = Vec::with_capacity(n);
        for (r, &i) in idx.iter().enumerate() {
            if i >= c {
                return Err(NumericsError::IndexOutOfRange {
                    op: "pick",
                    index: i,
                    size: c,
                });
            }
            data.push(t.data()[r * c + i]);
        }
        let rg = self.rg(x);
        self.push(
            Tensor::new([n], data)?,
            Op::Pick {
                x,
                idx: idx.to_vec(),
            },
            rg,
            "pick",
        )
    }

    // ---- attention family ---------------------------------------------

    /// Rotate consecutive pairs of the last axis of `[batch, tokens, heads, dim]`.
    pub fn rotary(&mut self, x: Var, angles: &Arc<RotaryAngles<T>>) -> Result<Var> {
        let t = self.value(x);
        let dims = AttnDims::from_shape(t.shape())?;
        if dims.tokens != angles.tokens || dims.head_dim != 2 * angles.pairs {
            return Err(NumericsError::ShapeMismatch {
                op: "rotary",
                lhs: t.shape().to_vec(),
                rhs: vec![angles.tokens, angles.pairs],
            });
        }
        let mut out = vec![T::zero(); t.numel()];
        kernels::rotate_pairs(
            t.data(),
            &mut out,
            &angles.cos,
            &angles.sin,
            dims.tokens,
            dims.heads,
            dims.head_dim,
            false,
        );
        let shape = t.shape().to_vec();
        let rg = self.rg(x);
        self.push(
            Tensor::new(shape, out)?,
            Op::Rotary {
                x,
                angles: Arc::clone(angles),
            },
            rg,
            "rotary",
        )
    }

    /// Softmax(q k^T / sqrt(head_dim)) v over `[batch, tokens, heads, head_dim]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let dims = AttnDims::from_shape(self.shape(q))?;
        for other in [k, v] {
            if self.shape(other) != self.shape(q) {
                return Err(NumericsError::ShapeMismatch {
                    op: "attention",
                    lhs: self.shape(q).to_vec(),
                    rhs: self.shape(other).to_vec(),
                });
            }
        }
        let (out, probs) = kernels::attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            dims,
        );
        let shape = self.shape(q).to_vec();
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        let probs = if rg && self.grad_enabled { probs } else { Vec::new() };
        self.push(Tensor::new(shape, out)?, Op::Attention { q, k, v, probs }, rg, "attention")
    }

    /// `[b, h, w, c]` -> `[b, (h/p)(w/p), p*p*c]`.
    pub fn patchify(&mut self, x: Var, p: usize) -> Result<Var> {
        let t = self.value(x);
        let (b, h, w, c) = grid_dims(t.shape(), p, "patchify")?;
        let data = kernels::patchify(t.data(), b, h, w, c, p);
        let rg = self.rg(x);
        self.push(
            Tensor::new([b, (h / p) * (w / p), p * p * c], data)?,
            Op::Patchify(x, p),
            rg,
            "patchify",
        )
    }

    /// Inverse of [`Tape::patchify`] for a `(h, w, c)` grid.
    pub fn unpatchify(&mut self, x: Var, p: usize, h: usize, w: usize, c: usize) -> Result<Var> {
        let t = self.value(x);
        let want = [t.shape()[0], (h / p) * (w / p), p * p * c];
        if p == 0 || h % p != 0 || w % p != 0 || t.rank() != 3 || t.shape() != want {
            return Err(NumericsError::ShapeMismatch {
                op: "unpatchify",
                lhs: t.shape().to_vec(),
                rhs: want.to_vec(),
            });
        }
        let b = t.shape()[0];
        let data = kernels::unpatchify(t.data(), b, h, w, c, p);
        let rg = self.rg(x);
        self.push(Tensor::new([b, h, w, c], data)?, Op::Unpatchify(x, p), rg, "unpatchify")
    }

    /// 3x3 same-padding patch extraction `[b, h, w, c]` -> `[b, h, w, 9c]`.
    pub fn im2col3(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (b, h, w, c) = grid_dims(t.shape(), 1, "im2col")?;
        let data = kernels::im2col3(t.data(), b, h, w, c);
        let rg = self.rg(x);
        self.push(Tensor::new([b, h, w, 9 * c], data)?, Op::Im2col3(x), rg, "im2col")
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (b, h, w, c) = grid_dims(t.shape(), 2, "avg_pool2")?;
        let data = kernels::avg_pool2(t.data(), b, h, w, c);
        let rg = self.rg(x);
        self.push(Tensor::new([b, h / 2, w / 2, c], data)?, Op::AvgPool2(x), rg, "avg_pool2")
    }

    // ---- backward ------------------------------------------------------

    /// Reverse pass from a scalar output. May run once per tape.
    pub fn backward(&mut self, output: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(NumericsError::TapeConsumed);
        }
        if self.value(output).numel() != 1 {
            return Err(NumericsError::NotScalar(self.shape(output).to_vec()));
        }
        self.consumed = true;
        let n_params = self.params.map_or(0, |p| p.len());
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut out = Gradients {
            inputs: HashMap::new(),
            params: (0..n_params).map(|_| None).collect(),
        };
        if !self.nodes[output.0].requires_grad {
            return Ok(out);
        }
        grads[output.0] = Some(vec![T::one()]);
        let mutated = MUTATED.with(|m| m.get());

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    if node.requires_grad {
                        let shape = node.value.as_ref().unwrap().shape().to_vec();
                        out.inputs.insert(i, Tensor::new(shape, g)?);
                    }
                }
                Op::Param(id) => {
                    let shape = self.value(Var(i)).shape().to_vec();
                    match &mut out.params[id.0] {
                        Some(acc) => add_into(acc.data_mut(), &g),
                        slot => *slot = Some(Tensor::new(shape, g)?),
                    }
                }
                op => {
                    if mutated == Some(op.kernel()) {
                        let f = T::from_f64(1.01);
                        let g: Vec<T> = g.iter().map(|&v| v * f).collect();
                        self.backward_op(op, Var(i), &g, &mut grads);
                    } else {
                        self.backward_op(op, Var(i), &g, &mut grads);
                    }
                }
            }
        }
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => add_into(acc, &g),
            slot => *slot = Some(g),
        }
    }

    fn backward_op(&self, op: &Op<T>, out: Var, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out_shape = self.shape(out);
        match op {
            Op::Leaf | Op::Param(_) => unreachable!(),
            Op::Add(a, b) | Op::Sub(a, b) => {
                let ga = broadcast::reduce_to(g, out_shape, self.shape(*a));
                let mut gb = broadcast::reduce_to(g, out_shape, self.shape(*b));
                if matches!(op, Op::Sub(..)) {
                    gb.iter_mut().for_each(|v| *v = -*v);
                }
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let bx = broadcast::expand(tb.data(), tb.shape(), out_shape);
                    let prod: Vec<T> = g.iter().zip(&bx).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *a, broadcast::reduce_to(&prod, out_shape, ta.shape()));
                }
                if self.rg(*b) {
                    let ax = broadcast::expand(ta.data(), ta.shape(), out_shape);
                    let prod: Vec<T> = g.iter().zip(&ax).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *b, broadcast::reduce_to(&prod, out_shape, tb.shape()));
                }
            }
            Op::Scale(a, f) => self.accumulate(grads, *a, g.iter().map(|&v| v * *f).collect()),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.to_vec()),
            Op::Silu(a) => {
                let x = self.value(*a).data();
                let d = g.iter().zip(x).map(|(&gv, &xv)| gv * kernels::silu_grad(xv)).collect();
                self.accumulate(grads, *a, d);
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                let d = g.iter().zip(x).map(|(&gv, &xv)| gv * kernels::gelu_grad(xv)).collect();
                self.accumulate(grads, *a, d);
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let d = g
                    .iter()
                    .zip(x)
                    .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                self.accumulate(grads, *a, d);
            }
            Op::Softmax(a) => {
                let y = self.value(out).data();
                let d = *out_shape.last().unwrap();
                let mut dx = vec![T::zero(); g.len()];
                for ((yr, gr), dr) in y.chunks_exact(d).zip(g.chunks_exact(d)).zip(dx.chunks_exact_mut(d)) {
                    let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for ((o, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - dot);
                    }
                }
                self.accumulate(grads, *a, dx);
            }
            Op::LogSoftmax(a) => {
                let y = self.value(out).data();
                let d = *out_shape.last().unwrap();
                let mut dx = vec![T::zero(); g.len()];
                for ((yr, gr), dr) in y.chunks_exact(d).zip(g.chunks_exact(d)).zip(dx.chunks_exact_mut(d)) {
                    let total: T = gr.iter().copied().sum();
                    for ((o, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *o = gv - yv.exp() * total;
                    }
                }
                self.accumulate(grads, *a, dx);
            }
            Op::LayerNorm { x, gain, bias, stats } => {
                let tx = self.value(*x);
                let d = *tx.shape().last().unwrap();
                let mut dx = vec![T::zero(); tx.numel()];
                let mut dg = gain.map(|_| vec![T::zero(); d]);
                let mut db = bias.map(|_| vec![T::zero(); d]);
                kernels::layer_norm_backward(
                    tx.data(),
                    gain.map(|gv| self.value(gv).data()),
                    stats,
                    g,
                    &mut dx,
                    dg.as_deref_mut(),
                    db.as_deref_mut(),
                    d,
                );
                self.accumulate(grads, *x, dx);
                if let (Some(gv), Some(dg)) = (gain, dg) {
                    self.accumulate(grads, *gv, dg);
                }
                if let (Some(bv), Some(db)) = (bias, db) {
                    self.accumulate(grads, *bv, db);
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = kernels::matmul_dims(ta.shape(), tb.shape()).expect("recorded");
                if self.rg(*a) {
                    let mut da = vec![T::zero(); m * k];
                    kernels::matmul_nt(g, tb.data(), &mut da, m, n, k, false);
                    self.accumulate(grads, *a, da);
                }
                if self.rg(*b) {
                    let mut db = vec![T::zero(); k * n];
                    kernels::matmul_tn(ta.data(), g, &mut db, k, m, n, false);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Reshape(a) => self.accumulate(grads, *a, g.to_vec()),
            Op::BroadcastTo(a) => {
                self.accumulate(grads, *a, broadcast::reduce_to(g, out_shape, self.shape(*a)))
            }
            Op::Permute(a, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let (_, data) = permute_data(out_shape, g, &inv);
                self.accumulate(grads, *a, data);
            }
            Op::Concat(parts, axis) => {
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let mut offset = 0;
                let full = out_shape[*axis] * inner;
                for &p in parts {
                    let block = self.shape(p)[*axis] * inner;
                    if self.rg(p) {
                        let mut d = Vec::with_capacity(outer * block);
                        for o in 0..outer {
                            d.extend_from_slice(&g[o * full + offset..o * full + offset + block]);
                        }
                        self.accumulate(grads, p, d);
                    }
                    offset += block;
                }
            }
            Op::Narrow { x, axis, start } => {
                let in_shape = self.shape(*x);
                let outer: usize = in_shape[..*axis].iter().product();
                let inner: usize = in_shape[axis + 1..].iter().product();
                let full = in_shape[*axis] * inner;
                let len = out_shape[*axis] * inner;
                let mut d = vec![T::zero(); outer * full];
                for o in 0..outer {
                    d[o * full + start * inner..][..len].copy_from_slice(&g[o * len..(o + 1) * len]);
                }
                self.accumulate(grads, *x, d);
            }
            Op::Sum(a) => self.accumulate(grads, *a, vec![g[0]; self.value(*a).numel()]),
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                let v = g[0] / T::from_f64(n.max(1) as f64);
                self.accumulate(grads, *a, vec![v; n]);
            }
            Op::Embedding { table, idx } => {
                let t = self.value(*table);
                let d = t.shape()[1];
                let mut dt = vec![T::zero(); t.numel()];
                for (r, &i) in idx.iter().enumerate() {
                    add_into(&mut dt[i * d..(i + 1) * d], &g[r * d..(r + 1) * d]);
                }
                self.accumulate(grads, *table, dt);
            }
            Op::Pick { x, idx } => {
                let t = self.value(*x);
                let c = t.shape()[1];
                let mut dx = vec![T::zero(); t.numel()];
                for (r, &i) in idx.iter().enumerate() {
                    dx[r * c + i] = g[r];
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Rotary { x, angles } => {
                let dims = AttnDims::from_shape(out_shape).expect("recorded");
                let mut dx = vec![T::zero(); g.len()];
                kernels::rotate_pairs(
                    g,
                    &mut dx,
                    &angles.cos,
                    &angles.sin,
                    dims.tokens,
                    dims.heads,
                    dims.head_dim,
                    true,
                );
                self.accumulate(grads, *x, dx);
            }
            Op::Attention { q, k, v, probs } => {
                let dims = AttnDims::from_shape(out_shape).expect("recorded");
                let n = g.len();
                let (mut dq, mut dk, mut dv) = (vec![T::zero(); n], vec![T::zero(); n], vec![T::zero(); n]);
                kernels::attention_backward(
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    probs,
                    g,
                    &mut dq,
                    &mut dk,
                    &mut dv,
                    dims,
                );
                self.accumulate(grads, *q, dq);
                self.accumulate(grads, *k, dk);
                self.accumulate(grads, *v, dv);
            }
            Op::Patchify(x, p) => {
                let s = self.shape(*x);
                let d = kernels::unpatchify(g, s[0], s[1], s[2], s[3], *p);
                self.accumulate(grads, *x, d);
            }
            Op::Unpatchify(x, p) => {
                let s = out_shape;
                let d = kernels::patchify(g, s[0], s[1], s[2], s[3], *p);
                self.accumulate(grads, *x, d);
            }
            Op::Im2col3(x) => {
                let s = self.shape(*x);
                let d = kernels::col2im3(g, s[0], s[1], s[2], s[3]);
                self.accumulate(grads, *x, d);
            }
            Op::AvgPool2(x) => {
                let s = self.shape(*x);
                let d = kernels::avg_pool2_backward(g, s[0], s[1], s[2], s[3]);
                self.accumulate(grads, *x, d);
            }
        }
    }
}

fn add_into<T: Scalar>(acc: &mut [T], g: &[T]) {
    for (a, &b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

fn grid_dims(shape: &[usize], p: usize, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [b, h, w, c] if p > 0 && h % p == 0 && w % p == 0 => Ok((b, h, w, c)),
        _ => Err(NumericsError::InvalidShape {
            op,
            shape: shape.to_vec(),
            reason: format!("expected [batch, h, w, c] with h and w divisible by {p}"),
        }),
    }
}

fn permute_data<T: Scalar>(shape: &[usize], data: &[T], perm: &[usize]) -> (Vec<usize>, Vec<T>) {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let numel = data.len();
    let mut out = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..numel {
        out.push(data[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out_shape, out)
}
