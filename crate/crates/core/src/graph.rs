//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only arena of nodes. Every op evaluates eagerly,
//! stores its value and records how to route an incoming adjoint back to its
//! parents. Node indices are a topological order by construction, so the
//! reverse sweep is a single pass from the output down to index zero.
//!
//! A graph is consumed by [`Graph::backward`]; build a fresh one per forward
//! pass.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::param::Parameter;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

/// Tags for [`Graph::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Relu,
    Exp,
    Neg,
    Scale(f64),
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, transpose_b: bool },
    Add(Var, Var, bool),
    Sub(Var, Var, bool),
    Mul(Var, Var, bool),
    Neg(Var),
    Scale(Var, f64),
    Offset(Var),
    Relu(Var),
    Exp(Var),
    Sigmoid(Var),
    Tanh(Var),
    Reduce {
        a: Var,
        op: ReduceOp,
        axis: usize,
        argmax: Vec<usize>,
    },
    Reshape(Var),
    SliceCols { a: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows { a: Var, index: Vec<usize> },
    Softmax { a: Var, tau: f64 },
    LayerNorm { a: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Opaque { a: Var, label: &'static str },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::BatchMatMul { .. } => "batch_matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Neg(_) => "neg",
            Op::Scale(..) => "scale",
            Op::Offset(_) => "offset",
            Op::Relu(_) => "relu",
            Op::Exp(_) => "exp",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Reduce { .. } => "reduce",
            Op::Reshape(_) => "reshape",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::GatherRows { .. } => "gather_rows",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Opaque { label, .. } => label,
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Gradients produced by one backward sweep, for every leaf that asked for
/// them.
#[derive(Debug, Default)]
pub struct Gradients {
    leaves: BTreeMap<usize, Tensor>,
    names: BTreeMap<String, usize>,
}

impl Gradients {
    /// Gradient of the output with respect to a leaf. A leaf the output does
    /// not depend on has an all-zero gradient.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(&v.0)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.names.get(name).and_then(|i| self.leaves.get(i))
    }

    /// Named (parameter) gradients in name order.
    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .filter_map(|(n, i)| self.leaves.get(i).map(|t| (n.as_str(), t)))
    }

    pub fn into_named(mut self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (n, i) in self.names {
            if let Some(t) = self.leaves.remove(&i) {
                out.insert(n, t);
            }
        }
        out
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    names: BTreeMap<String, usize>,
}

/// `c (+)= A·B` for strided operands, `A` is m×k, `B` is k×n, `C` is dense
/// row-major m×n.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the strides describe matrices that lie inside `a`, `b` and
    // `c`; callers derive them from tensor shapes checked beforehand.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn reduce_dims(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of nodes recorded so far.
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, false)
    }

    /// An unnamed leaf that receives a gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, true)
    }

    /// Registers a parameter. Its gradient is reported under the parameter's
    /// name when `trainable`, otherwise it behaves as a constant.
    pub fn param(&mut self, p: &Parameter, trainable: bool) -> Result<Var> {
        if trainable && self.names.contains_key(p.name()) {
            return Err(Error::Contract(format!(
                "parameter `{}` registered twice",
                p.name()
            )));
        }
        let v = self.push(Op::Leaf, p.value().clone(), trainable);
        if trainable {
            self.names.insert(p.name().into(), v.0);
        }
        Ok(v)
    }

    fn binary_layout(&self, op: &'static str, a: Var, b: Var) -> Result<bool> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa == sb {
            return Ok(false);
        }
        let nb: usize = sb.iter().product();
        let leading_ones = sb[..sb.len() - 1].iter().all(|&d| d == 1);
        if leading_ones && nb == *sa.last().unwrap() {
            Ok(true)
        } else {
            Err(Error::shape(op, sa, sb))
        }
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, bool)> {
        let bcast = self.binary_layout(op, a, b)?;
        let ta = self.value(a);
        let tb = self.value(b).data();
        let n = ta.cols();
        let data = if bcast {
            ta.data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, tb[i % n]))
                .collect()
        } else {
            ta.data().iter().zip(tb).map(|(&x, &y)| f(x, y)).collect()
        };
        Ok((Tensor::new(ta.shape().to_vec(), data)?, bcast))
    }

    /// `a + b`; `b` may be a row vector broadcast over the leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, bc) = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Add(a, b, bc), t, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, bc) = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Sub(a, b, bc), t, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, bc) = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Mul(a, b, bc), t, rg))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(op, t, rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, Op::Neg(a), |x| -x)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    /// `a + c` for a constant `c`.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Offset(a), |x| x + c)
    }

    /// Rectifier; the subgradient at exactly zero is zero.
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), libm::exp)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), |x| 1.0 / (1.0 + libm::exp(-x)))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), libm::tanh)
    }

    /// Elementwise op selected by tag. Unary tags ignore `b`.
    pub fn elementwise(&mut self, op: ElementwiseOp, a: Var, b: Option<Var>) -> Result<Var> {
        let need = |b: Option<Var>| {
            b.ok_or_else(|| Error::Contract("binary elementwise op needs two operands".into()))
        };
        Ok(match op {
            ElementwiseOp::Add => self.add(a, need(b)?)?,
            ElementwiseOp::Sub => self.sub(a, need(b)?)?,
            ElementwiseOp::Mul => self.mul(a, need(b)?)?,
            ElementwiseOp::Relu => self.relu(a),
            ElementwiseOp::Exp => self.exp(a),
            ElementwiseOp::Neg => self.neg(a),
            ElementwiseOp::Scale(c) => self.scale(a, c),
        })
    }

    /// Elementwise function with no adjoint. Any gradient that reaches it
    /// during [`backward`](Self::backward) is an error.
    pub fn opaque(&mut self, a: Var, label: &'static str, f: fn(f64) -> f64) -> Var {
        self.unary(a, Op::Opaque { a, label }, f)
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
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
            (k, 1),
            self.value(b).data(),
            (n, 1),
            &mut out,
            false,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), Tensor::new(vec![m, n], out)?, rg))
    }

    /// Batched product over rank-3 tensors: `[B,m,k]·[B,k,n]`, or
    /// `[B,m,k]·[B,n,k]ᵀ` when `transpose_b`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if transpose_b {
                sa[2] == sb[2]
            } else {
                sa[2] == sb[1]
            };
        if !ok {
            return Err(Error::shape("batch_matmul", &sa, &sb));
        }
        let (bs, m, k) = (sa[0], sa[1], sa[2]);
        let n = if transpose_b { sb[1] } else { sb[2] };
        let bstr = if transpose_b { (1, k) } else { (n, 1) };
        let mut out = vec![0.0; bs * m * n];
        {
            let da = self.value(a).data();
            let db = self.value(b).data();
            for i in 0..bs {
                gemm(
                    m,
                    k,
                    n,
                    &da[i * m * k..],
                    (k, 1),
                    &db[i * k * n..],
                    bstr,
                    &mut out[i * m * n..],
                    false,
                );
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Op::BatchMatMul { a, b, transpose_b },
            Tensor::new(vec![bs, m, n], out)?,
            rg,
        ))
    }

    /// Sum, mean or max along `axis`. Max routes its adjoint to the first
    /// maximal entry.
    pub fn reduce(&mut self, a: Var, op: ReduceOp, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Axis {
                axis,
                rank: shape.len(),
            });
        }
        let (outer, len, inner) = reduce_dims(&shape, axis);
        let src = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        let mut argmax = Vec::new();
        match op {
            ReduceOp::Sum | ReduceOp::Mean => {
                for o in 0..outer {
                    for l in 0..len {
                        let base = (o * len + l) * inner;
                        for i in 0..inner {
                            out[o * inner + i] += src[base + i];
                        }
                    }
                }
                if op == ReduceOp::Mean {
                    out.iter_mut().for_each(|v| *v /= len as f64);
                }
            }
            ReduceOp::Max => {
                argmax = vec![0; outer * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let mut best = src[o * len * inner + i];
                        let mut at = 0;
                        for l in 1..len {
                            let v = src[(o * len + l) * inner + i];
                            if v > best {
                                best = v;
                                at = l;
                            }
                        }
                        out[o * inner + i] = best;
                        argmax[o * inner + i] = at;
                    }
                }
            }
        }
        let mut oshape: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != axis)
            .map(|(_, &d)| d)
            .collect();
        if oshape.is_empty() {
            oshape.push(1);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            Op::Reduce {
                a,
                op,
                axis,
                argmax,
            },
            Tensor::new(oshape, out)?,
            rg,
        ))
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        let flat = self.reshape(a, &[n])?;
        self.reduce(flat, ReduceOp::Sum, 0)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        let flat = self.reshape(a, &[n])?;
        self.reduce(flat, ReduceOp::Mean, 0)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Reshape(a), t, rg))
    }

    /// Columns `start..start+len` of a matrix (the last axis of a tensor
    /// viewed as rows × cols).
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        if len == 0 || start + len > c {
            return Err(Error::shape("slice_cols", t.shape(), &[start, len]));
        }
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&t.data()[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Op::SliceCols { a, start }, Tensor::new(vec![r, len], out)?, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = self.value(parts[0]).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if t.rows() != r {
                return Err(Error::shape("concat_cols", self.shape(parts[0]), t.shape()));
            }
            widths.push(t.cols());
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Op::ConcatCols(parts.to_vec()),
            Tensor::new(vec![r, total], out)?,
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.value(parts[0]).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != c {
                return Err(Error::shape("concat_rows", self.shape(parts[0]), t.shape()));
            }
            rows += t.rows();
            out.extend_from_slice(t.data());
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Op::ConcatRows(parts.to_vec()),
            Tensor::new(vec![rows, c], out)?,
            rg,
        ))
    }

    /// Selects rows by index (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in index {
            if i >= r {
                return Err(Error::shape("gather_rows", t.shape(), &[i]));
            }
            out.extend_from_slice(t.row(i));
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            Op::GatherRows {
                a,
                index: index.to_vec(),
            },
            Tensor::new(vec![index.len(), c], out)?,
            rg,
        ))
    }

    /// Row-wise `exp((z - r)/tau) / Σ exp((z - r)/tau)` over the last axis,
    /// evaluated after subtracting each row's maximum.
    pub fn softmax(&mut self, a: Var, r: f64, tau: f64) -> Result<Var> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::Contract(format!("temperature must be > 0, got {tau}")));
        }
        let t = self.value(a);
        if !t.all_finite() {
            return Err(Error::Numeric("non-finite softmax input".into()));
        }
        let c = t.cols();
        let mut out = Vec::with_capacity(t.len());
        for row in t.data().chunks(c) {
            let s: Vec<f64> = row.iter().map(|&z| (z - r) / tau).collect();
            let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|&v| libm::exp(v - m)).collect();
            let denom: f64 = e.iter().sum();
            out.extend(e.iter().map(|v| v / denom));
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Softmax { a, tau }, Tensor::new(shape, out)?, rg))
    }

    /// Normalises each row to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let t = self.value(a);
        let c = t.cols();
        let mut xhat = Vec::with_capacity(t.len());
        let mut inv_std = Vec::with_capacity(t.rows());
        for row in t.data().chunks(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / libm::sqrt(var + eps);
            inv_std.push(is);
            xhat.extend(row.iter().map(|v| (v - mean) * is));
        }
        let out = Tensor::new(t.shape().to_vec(), xhat.clone())?;
        let rg = self.rg(&[a]);
        Ok(self.push(Op::LayerNorm { a, xhat, inv_std }, out, rg))
    }

    /// Reverse sweep from a scalar output. Consumes the graph.
    pub fn backward(self, output: Var) -> Result<Gradients> {
        if self.value(output).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(output)
            )));
        }
        let Graph { nodes, names } = self;
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[output.0].requires_grad {
            grads[output.0] = Some(vec![1.0]);
        }
        let mut leaves = BTreeMap::new();

        for i in (0..=output.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                if matches!(node.op, Op::Leaf) {
                    leaves.insert(i, Tensor::zeros(node.value.shape()));
                }
                continue;
            };
            let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
                if nodes[v.0].requires_grad {
                    let slot =
                        grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
                    f(slot);
                }
            };
            let val = |v: Var| nodes[v.0].value.data();
            match &node.op {
                Op::Leaf => {
                    leaves.insert(i, Tensor::new(node.value.shape().to_vec(), g)?);
                }
                Op::Add(a, b, bc) | Op::Sub(a, b, bc) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    acc(*a, &mut |s| s.iter_mut().zip(&g).for_each(|(s, g)| *s += g));
                    let n = nodes[b.0].value.len();
                    acc(*b, &mut |s| {
                        if *bc {
                            for (j, gv) in g.iter().enumerate() {
                                s[j % n] += sign * gv;
                            }
                        } else {
                            s.iter_mut().zip(&g).for_each(|(s, g)| *s += sign * g);
                        }
                    });
                }
                Op::Mul(a, b, bc) => {
                    let (va, vb) = (val(*a), val(*b));
                    let n = vb.len();
                    acc(*a, &mut |s| {
                        for (j, gv) in g.iter().enumerate() {
                            s[j] += gv * vb[if *bc { j % n } else { j }];
                        }
                    });
                    acc(*b, &mut |s| {
                        for (j, gv) in g.iter().enumerate() {
                            s[if *bc { j % n } else { j }] += gv * va[j];
                        }
                    });
                }
                Op::Neg(a) => acc(*a, &mut |s| s.iter_mut().zip(&g).for_each(|(s, g)| *s -= g)),
                Op::Scale(a, c) => {
                    acc(*a, &mut |s| s.iter_mut().zip(&g).for_each(|(s, g)| *s += c * g))
                }
                Op::Offset(a) => {
                    acc(*a, &mut |s| s.iter_mut().zip(&g).for_each(|(s, g)| *s += g))
                }
                Op::Relu(a) => {
                    let x = val(*a);
                    acc(*a, &mut |s| {
                        for j in 0..g.len() {
                            if x[j] > 0.0 {
                                s[j] += g[j];
                            }
                        }
                    })
                }
                Op::Exp(a) => {
                    let y = node.value.data();
                    acc(*a, &mut |s| {
                        for j in 0..g.len() {
                            s[j] += g[j] * y[j];
                        }
                    })
                }
                Op::Sigmoid(a) => {
                    let y = node.value.data();
                    acc(*a, &mut |s| {
                        for j in 0..g.len() {
                            s[j] += g[j] * y[j] * (1.0 - y[j]);
                        }
                    })
                }
                Op::Tanh(a) => {
                    let y = node.value.data();
                    acc(*a, &mut |s| {
                        for j in 0..g.len() {
                            s[j] += g[j] * (1.0 - y[j] * y[j]);
                        }
                    })
                }
                Op::MatMul(a, b) => {
                    let sa = nodes[a.0].value.shape();
                    let (m, k) = (sa[0], sa[1]);
                    let n = nodes[b.0].value.shape()[1];
                    let (va, vb) = (val(*a), val(*b));
                    // dA = G·Bᵀ, dB = Aᵀ·G
                    acc(*a, &mut |s| gemm(m, n, k, &g, (n, 1), vb, (1, n), s, true));
                    acc(*b, &mut |s| gemm(k, m, n, va, (1, k), &g, (n, 1), s, true));
                }
                Op::BatchMatMul { a, b, transpose_b } => {
                    let sa = nodes[a.0].value.shape();
                    let (bs, m, k) = (sa[0], sa[1], sa[2]);
                    let n = node.value.shape()[2];
                    let (va, vb) = (val(*a), val(*b));
                    let tb = *transpose_b;
                    acc(*a, &mut |s| {
                        for i in 0..bs {
                            let gi = &g[i * m * n..];
                            let bi = &vb[i * k * n..];
                            // dA = G·Bᵀ, or G·B when B entered transposed.
                            let bstr = if tb { (k, 1) } else { (1, n) };
                            gemm(m, n, k, gi, (n, 1), bi, bstr, &mut s[i * m * k..], true);
                        }
                    });
                    acc(*b, &mut |s| {
                        for i in 0..bs {
                            let gi = &g[i * m * n..];
                            let ai = &va[i * m * k..];
                            if tb {
                                // B is n×k: dB = Gᵀ·A
                                gemm(n, m, k, gi, (1, n), ai, (k, 1), &mut s[i * n * k..], true);
                            } else {
                                // B is k×n: dB = Aᵀ·G
                                gemm(k, m, n, ai, (1, k), gi, (n, 1), &mut s[i * k * n..], true);
                            }
                        }
                    });
                }
                Op::Reduce {
                    a,
                    op,
                    axis,
                    argmax,
                } => {
                    let (outer, len, inner) = reduce_dims(nodes[a.0].value.shape(), *axis);
                    acc(*a, &mut |s| {
                        for o in 0..outer {
                            for i in 0..inner {
                                let gv = g[o * inner + i];
                                match op {
                                    ReduceOp::Sum | ReduceOp::Mean => {
                                        let w = if *op == ReduceOp::Mean {
                                            gv / len as f64
                                        } else {
                                            gv
                                        };
                                        for l in 0..len {
                                            s[(o * len + l) * inner + i] += w;
                                        }
                                    }
                                    ReduceOp::Max => {
                                        let l = argmax[o * inner + i];
                                        s[(o * len + l) * inner + i] += gv;
                                    }
                                }
                            }
                        }
                    });
                }
                Op::Reshape(a) => {
                    acc(*a, &mut |s| s.iter_mut().zip(&g).for_each(|(s, g)| *s += g))
                }
                Op::SliceCols { a, start } => {
                    let c = nodes[a.0].value.cols();
                    let w = node.value.cols();
                    acc(*a, &mut |s| {
                        for (r, gr) in g.chunks(w).enumerate() {
                            for (j, gv) in gr.iter().enumerate() {
                                s[r * c + start + j] += gv;
                            }
                        }
                    })
                }
                Op::ConcatCols(parts) => {
                    let total = node.value.cols();
                    let mut off = 0;
                    for p in parts {
                        let w = nodes[p.0].value.cols();
                        acc(*p, &mut |s| {
                            for (r, gr) in g.chunks(total).enumerate() {
                                for j in 0..w {
                                    s[r * w + j] += gr[off + j];
                                }
                            }
                        });
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let n = nodes[p.0].value.len();
                        acc(*p, &mut |s| {
                            s.iter_mut()
                                .zip(&g[off..off + n])
                                .for_each(|(s, g)| *s += g)
                        });
                        off += n;
                    }
                }
                Op::GatherRows { a, index } => {
                    let c = node.value.cols();
                    acc(*a, &mut |s| {
                        for (r, &src) in index.iter().enumerate() {
                            for j in 0..c {
                                s[src * c + j] += g[r * c + j];
                            }
                        }
                    })
                }
                Op::Softmax { a, tau } => {
                    let y = node.value.data();
                    let c = node.value.cols();
                    acc(*a, &mut |s| {
                        for (r, (yr, gr)) in y.chunks(c).zip(g.chunks(c)).enumerate() {
                            let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                            for j in 0..c {
                                s[r * c + j] += yr[j] * (gr[j] - dot) / tau;
                            }
                        }
                    })
                }
                Op::LayerNorm { a, xhat, inv_std } => {
                    let c = node.value.cols();
                    acc(*a, &mut |s| {
                        for (r, (xr, gr)) in xhat.chunks(c).zip(g.chunks(c)).enumerate() {
                            let gs: f64 = gr.iter().sum();
                            let gx: f64 = gr.iter().zip(xr).map(|(g, x)| g * x).sum();
                            let k = inv_std[r] / c as f64;
                            for j in 0..c {
                                s[r * c + j] += k * (c as f64 * gr[j] - gs - xr[j] * gx);
                            }
                        }
                    })
                }
                Op::Opaque { a, .. } => {
                    if nodes[a.0].requires_grad {
                        return Err(Error::MissingAdjoint(node.op.name()));
                    }
                }
            }
        }
        Ok(Gradients { leaves, names })
    }
}
