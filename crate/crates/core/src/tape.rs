//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation applied to its [`Var`] handles. Calling
//! [`Tape::backward`] replays the record in reverse and returns the gradient of
//! a scalar output with respect to every node that needs one. Leaves created
//! from tensors with `requires_grad == false`, and everything computed only
//! from such leaves, carry no gradient.
//!
//! Every operation checks that its output is finite; NaN or infinity is
//! reported as [`Error::NonFinite`] naming the operation.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::error::{Error, Result};
use crate::kernels::{self, Strategy};
use crate::tensor::{check_shape, numel, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Clip {
    Below,
    Inside,
    Above,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Abs(Var),
    Tanh(Var),
    Gelu(Var),
    Clip(Var, f64, f64),
    RoundSte(Var),
    Matmul {
        a: Var,
        b: Var,
        groups: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    SumAll(Var),
    MeanAll(Var),
    SumAxis {
        x: Var,
        outer: usize,
        axis: usize,
        inner: usize,
    },
    Reshape(Var),
    SplitHeads {
        x: Var,
        batch: usize,
        tokens: usize,
        heads: usize,
    },
    MergeHeads {
        x: Var,
        batch: usize,
        tokens: usize,
        heads: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    PrependRow {
        x: Var,
        row: Var,
        groups: usize,
    },
    FakeQuant {
        x: Var,
        delta: Var,
        zero: Var,
        levels: usize,
        per_row: bool,
        mask: Vec<Clip>,
    },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Nodes recorded in execution order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn ensure_finite(value: &[f64], op: &str) -> Result<()> {
    if value.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op.to_string()))
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::dim(format!(
                    "shapes {a:?} and {b:?} are not broadcast-compatible"
                )))
            }
        };
    }
    Ok(out)
}

/// Offsets into an operand of `shape` for each element of `out`.
fn broadcast_map(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let pad = rank - shape.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i + pad] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    let total = numel(out);
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0; rank];
    let mut off = 0;
    for _ in 0..total {
        map.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out[d] {
                break;
            }
            off -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2)) + x * (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

fn last_dim(shape: &[usize]) -> usize {
    shape[shape.len() - 1]
}

fn softmax_rows(x: &[f64], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, o) in x.chunks(width).zip(out.chunks_mut(width)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (oi, &xi) in o.iter_mut().zip(row) {
            *oi = (xi - max).exp();
            sum += *oi;
        }
        o.iter_mut().for_each(|v| *v /= sum);
    }
    out
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        value: Vec<f64>,
        op: Op,
        needs_grad: bool,
    ) -> Result<Var> {
        ensure_finite(&value, name)?;
        Ok(self.push(shape, value, op, needs_grad))
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    /// Records a leaf; it receives a gradient iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Result<Var> {
        let needs = t.requires_grad();
        self.push_checked("leaf", t.shape().to_vec(), t.data().to_vec(), Op::Leaf, needs)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        let shape = t.shape().to_vec();
        self.push_checked("constant", shape, t.into_data(), Op::Leaf, false)
    }

    pub fn scalar_const(&mut self, v: f64) -> Result<Var> {
        self.constant(Tensor::scalar(v))
    }

    /// A gradient-free copy of `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = self.node(v);
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.push(shape, value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.node(v).needs_grad
    }

    /// First element of `v`; intended for scalar outputs.
    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(&n.shape, n.value.clone()).expect("tape nodes hold valid shapes")
    }

    fn binary(
        &mut self,
        name: &str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (na, nb) = (self.node(a), self.node(b));
        let needs = na.needs_grad || nb.needs_grad;
        let (shape, value) = if na.shape == nb.shape {
            let v = na.value.iter().zip(&nb.value).map(|(&x, &y)| f(x, y)).collect();
            (na.shape.clone(), v)
        } else {
            let shape = broadcast_shape(&na.shape, &nb.shape)?;
            let ma = broadcast_map(&na.shape, &shape);
            let mb = broadcast_map(&nb.shape, &shape);
            let v = ma
                .iter()
                .zip(&mb)
                .map(|(&i, &j)| f(na.value[i], nb.value[j]))
                .collect();
            (shape, v)
        };
        self.push_checked(name, shape, value, op, needs)
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
        if self.node(b).value.iter().any(|&v| v == 0.0) {
            return Err(Error::domain("division by zero"));
        }
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, name: &str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let n = self.node(a);
        let value = n.value.iter().map(|&x| f(x)).collect();
        let (shape, needs) = (n.shape.clone(), n.needs_grad);
        self.push_checked(name, shape, value, op, needs)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("scale", a, |x| x * c, Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("add_scalar", a, |x| x + c, Op::AddScalar(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        if self.node(a).value.iter().any(|&v| v <= 0.0) {
            return Err(Error::domain("logarithm of a non-positive value"));
        }
        self.unary("ln", a, f64::ln, Op::Ln(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.node(a).value.iter().any(|&v| v < 0.0) {
            return Err(Error::domain("square root of a negative value"));
        }
        self.unary("sqrt", a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary("abs", a, f64::abs, Op::Abs(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, f64::tanh, Op::Tanh(a))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary("gelu", a, gelu, Op::Gelu(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    /// Clamps to `[lo, hi]`; the gradient passes only where `lo <= x <= hi`.
    pub fn clip(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(Error::domain(format!("clip bounds {lo} > {hi}")));
        }
        self.unary("clip", a, |x| x.clamp(lo, hi), Op::Clip(a, lo, hi))
    }

    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Result<Var> {
        self.clip(a, lo, f64::INFINITY)
    }

    /// Round half to even with no gradient.
    pub fn round(&mut self, a: Var) -> Result<Var> {
        let n = self.node(a);
        let value = n.value.iter().map(|x| x.round_ties_even()).collect();
        let shape = n.shape.clone();
        self.push_checked("round", shape, value, Op::Leaf, false)
    }

    /// Round half to even forward, identity Jacobian backward.
    pub fn round_ste(&mut self, a: Var) -> Result<Var> {
        self.unary("round_ste", a, f64::round_ties_even, Op::RoundSte(a))
    }

    fn matmul_impl(&mut self, a: Var, b: Var, batched: bool, trans_b: bool) -> Result<Var> {
        let (na, nb) = (self.node(a), self.node(b));
        let (sa, sb) = (&na.shape, &nb.shape);
        let rank = if batched { 3 } else { 2 };
        if sa.len() != rank || sb.len() != rank {
            return Err(Error::dim(format!(
                "matmul expects rank {rank} operands, got {sa:?} and {sb:?}"
            )));
        }
        let (groups, sa2, sb2) = if batched {
            if sa[0] != sb[0] {
                return Err(Error::dim(format!("batch extents differ: {sa:?} vs {sb:?}")));
            }
            (sa[0], &sa[1..], &sb[1..])
        } else {
            (1, &sa[..], &sb[..])
        };
        let (m, k) = (sa2[0], sa2[1]);
        let (kb, n) = if trans_b { (sb2[1], sb2[0]) } else { (sb2[0], sb2[1]) };
        if k != kb {
            return Err(Error::dim(format!(
                "inner dimensions disagree: {sa:?} x {sb:?}{}",
                if trans_b { "ᵀ" } else { "" }
            )));
        }
        let strategy = Strategy::auto(groups * m * n * k);
        let value = if trans_b {
            kernels::gemm_nt(strategy, &na.value, &nb.value, groups, m, k, n)
        } else {
            kernels::gemm_nn(strategy, &na.value, &nb.value, groups, m, k, n)
        };
        let shape = if batched { vec![groups, m, n] } else { vec![m, n] };
        let needs = na.needs_grad || nb.needs_grad;
        let op = Op::Matmul {
            a,
            b,
            groups,
            m,
            k,
            n,
            trans_b,
        };
        self.push_checked("matmul", shape, value, op, needs)
    }

    /// `[m, k] · [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false, false)
    }

    /// `[m, k] · [n, k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false, true)
    }

    /// Batched `[g, m, k] · [g, k, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true, false)
    }

    /// Batched `[g, m, k] · [g, n, k]ᵀ`.
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true, true)
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let n = self.node(a);
        let value = softmax_rows(&n.value, last_dim(&n.shape));
        let (shape, needs) = (n.shape.clone(), n.needs_grad);
        self.push_checked("softmax", shape, value, Op::Softmax(a), needs)
    }

    /// Log-softmax over the last dimension.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let n = self.node(a);
        let w = last_dim(&n.shape);
        let mut value = vec![0.0; n.value.len()];
        for (row, o) in n.value.chunks(w).zip(value.chunks_mut(w)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            o.iter_mut().zip(row).for_each(|(oi, xi)| *oi = xi - lse);
        }
        let (shape, needs) = (n.shape.clone(), n.needs_grad);
        self.push_checked("log_softmax", shape, value, Op::LogSoftmax(a), needs)
    }

    /// Layer normalization over the last dimension with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (nx, ng, nb) = (self.node(x), self.node(gamma), self.node(beta));
        let d = last_dim(&nx.shape);
        if ng.value.len() != d || nb.value.len() != d {
            return Err(Error::dim(format!(
                "layer_norm affine parameters must have {d} elements"
            )));
        }
        let rows = nx.value.len() / d;
        let mut xhat = vec![0.0; nx.value.len()];
        let mut rstd = vec![0.0; rows];
        let mut value = vec![0.0; nx.value.len()];
        for r in 0..rows {
            let row = &nx.value[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                value[r * d + c] = h * ng.value[c] + nb.value[c];
            }
        }
        let needs = nx.needs_grad || ng.needs_grad || nb.needs_grad;
        let shape = nx.shape.clone();
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        };
        self.push_checked("layer_norm", shape, value, op, needs)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let n = self.node(a);
        let s = n.value.iter().sum();
        let needs = n.needs_grad;
        self.push_checked("sum", vec![1], vec![s], Op::SumAll(a), needs)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.node(a);
        let s = n.value.iter().sum::<f64>() / n.value.len() as f64;
        let needs = n.needs_grad;
        self.push_checked("mean", vec![1], vec![s], Op::MeanAll(a), needs)
    }

    /// Sums out dimension `axis`.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let n = self.node(a);
        if axis >= n.shape.len() {
            return Err(Error::dim(format!("axis {axis} out of range for {:?}", n.shape)));
        }
        let outer: usize = n.shape[..axis].iter().product();
        let len = n.shape[axis];
        let inner: usize = n.shape[axis + 1..].iter().product();
        let mut value = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let src = &n.value[(o * len + k) * inner..(o * len + k + 1) * inner];
                let dst = &mut value[o * inner..(o + 1) * inner];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
            }
        }
        let mut shape: Vec<usize> = n.shape.clone();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let needs = n.needs_grad;
        let op = Op::SumAxis {
            x: a,
            outer,
            axis: len,
            inner,
        };
        self.push_checked("sum_axis", shape, value, op, needs)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        check_shape(shape)?;
        let n = self.node(a);
        if numel(shape) != n.value.len() {
            return Err(Error::dim(format!("cannot reshape {:?} into {shape:?}", n.shape)));
        }
        let (value, needs) = (n.value.clone(), n.needs_grad);
        Ok(self.push(shape.to_vec(), value, Op::Reshape(a), needs))
    }

    /// `[batch * tokens, heads * dh]` to `[batch * heads, tokens, dh]`.
    pub fn split_heads(&mut self, x: Var, batch: usize, heads: usize) -> Result<Var> {
        let n = self.node(x);
        if n.shape.len() != 2 || n.shape[0] % batch != 0 || n.shape[1] % heads != 0 {
            return Err(Error::dim(format!(
                "cannot split {:?} into {batch} sequences of {heads} heads",
                n.shape
            )));
        }
        let tokens = n.shape[0] / batch;
        let dh = n.shape[1] / heads;
        let mut value = vec![0.0; n.value.len()];
        for b in 0..batch {
            for t in 0..tokens {
                for h in 0..heads {
                    let src = (b * tokens + t) * heads * dh + h * dh;
                    let dst = ((b * heads + h) * tokens + t) * dh;
                    value[dst..dst + dh].copy_from_slice(&n.value[src..src + dh]);
                }
            }
        }
        let needs = n.needs_grad;
        let op = Op::SplitHeads {
            x,
            batch,
            tokens,
            heads,
        };
        Ok(self.push(vec![batch * heads, tokens, dh], value, op, needs))
    }

    /// Inverse of [`Tape::split_heads`].
    pub fn merge_heads(&mut self, x: Var, batch: usize) -> Result<Var> {
        let n = self.node(x);
        if n.shape.len() != 3 || n.shape[0] % batch != 0 {
            return Err(Error::dim(format!(
                "cannot merge {:?} into {batch} sequences",
                n.shape
            )));
        }
        let heads = n.shape[0] / batch;
        let (tokens, dh) = (n.shape[1], n.shape[2]);
        let mut value = vec![0.0; n.value.len()];
        for b in 0..batch {
            for t in 0..tokens {
                for h in 0..heads {
                    let dst = (b * tokens + t) * heads * dh + h * dh;
                    let src = ((b * heads + h) * tokens + t) * dh;
                    value[dst..dst + dh].copy_from_slice(&n.value[src..src + dh]);
                }
            }
        }
        let needs = n.needs_grad;
        let op = Op::MergeHeads {
            x,
            batch,
            tokens,
            heads,
        };
        Ok(self.push(vec![batch * tokens, heads * dh], value, op, needs))
    }

    /// Columns `start..start + len` of a 2-D value.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let n = self.node(x);
        if n.shape.len() != 2 || start + len > n.shape[1] || len == 0 {
            return Err(Error::dim(format!(
                "column slice {start}..{} out of range for {:?}",
                start + len,
                n.shape
            )));
        }
        let (rows, cols) = (n.shape[0], n.shape[1]);
        let mut value = Vec::with_capacity(rows * len);
        for r in 0..rows {
            value.extend_from_slice(&n.value[r * cols + start..r * cols + start + len]);
        }
        let needs = n.needs_grad;
        Ok(self.push(vec![rows, len], value, Op::SliceCols { x, start }, needs))
    }

    /// Gathers rows (first dimension) of a 2-D value.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let n = self.node(x);
        if n.shape.len() != 2 || rows.is_empty() || rows.iter().any(|&r| r >= n.shape[0]) {
            return Err(Error::dim(format!("row selection out of range for {:?}", n.shape)));
        }
        let cols = n.shape[1];
        let mut value = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            value.extend_from_slice(&n.value[r * cols..(r + 1) * cols]);
        }
        let needs = n.needs_grad;
        let op = Op::SelectRows {
            x,
            rows: rows.to_vec(),
        };
        Ok(self.push(vec![rows.len(), cols], value, op, needs))
    }

    /// Inserts `row` before each of `groups` equal blocks of rows of `x`.
    pub fn prepend_row(&mut self, x: Var, row: Var, groups: usize) -> Result<Var> {
        let (nx, nr) = (self.node(x), self.node(row));
        if nx.shape.len() != 2 || groups == 0 || nx.shape[0] % groups != 0 {
            return Err(Error::dim(format!("cannot group {:?} into {groups}", nx.shape)));
        }
        let cols = nx.shape[1];
        if nr.value.len() != cols {
            return Err(Error::dim(format!("prepended row must have {cols} elements")));
        }
        let per = nx.shape[0] / groups;
        let mut value = Vec::with_capacity((nx.shape[0] + groups) * cols);
        for g in 0..groups {
            value.extend_from_slice(&nr.value);
            value.extend_from_slice(&nx.value[g * per * cols..(g + 1) * per * cols]);
        }
        let needs = nx.needs_grad || nr.needs_grad;
        let shape = vec![nx.shape[0] + groups, cols];
        Ok(self.push(shape, value, Op::PrependRow { x, row, groups }, needs))
    }

    /// Simulated uniform quantization onto `levels` grid points.
    ///
    /// Computes `(clip(round(x / Δ) + round(z), 0, L - 1) - round(z)) · Δ` with
    /// straight-through rounding. `delta` and `zero` hold either one element
    /// (shared) or one element per row of `x` when `per_row` is set.
    pub fn fake_quant(
        &mut self,
        x: Var,
        delta: Var,
        zero: Var,
        levels: usize,
        per_row: bool,
    ) -> Result<Var> {
        let (nx, nd, nz) = (self.node(x), self.node(delta), self.node(zero));
        if levels < 2 {
            return Err(Error::State(format!("quantizer needs at least 2 levels, got {levels}")));
        }
        let rows = if per_row { nx.shape[0] } else { 1 };
        if nd.value.len() != rows || nz.value.len() != rows {
            return Err(Error::dim(format!(
                "quantizer parameters must have {rows} elements for input {:?}",
                nx.shape
            )));
        }
        if nd.value.iter().any(|&d| !(d > 0.0)) {
            return Err(Error::State("quantizer step size must be positive".into()));
        }
        let top = (levels - 1) as f64;
        let cols = nx.value.len() / rows;
        let mut value = vec![0.0; nx.value.len()];
        let mut mask = vec![Clip::Inside; nx.value.len()];
        for r in 0..rows {
            let d = nd.value[r];
            let zr = nz.value[r].round_ties_even();
            for i in r * cols..(r + 1) * cols {
                let v = (nx.value[i] / d).round_ties_even() + zr;
                let q = if v < 0.0 {
                    mask[i] = Clip::Below;
                    0.0
                } else if v > top {
                    mask[i] = Clip::Above;
                    top
                } else {
                    v
                };
                value[i] = (q - zr) * d;
            }
        }
        let needs = nx.needs_grad || nd.needs_grad || nz.needs_grad;
        let shape = nx.shape.clone();
        let op = Op::FakeQuant {
            x,
            delta,
            zero,
            levels,
            per_row,
            mask,
        };
        self.push_checked("fake_quant", shape, value, op, needs)
    }

    /// Gradient of the scalar `loss` (first element seeded with 1).
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if !self.node(loss).needs_grad {
            return Ok(Gradients { grads });
        }
        let mut seed = vec![0.0; self.node(loss).value.len()];
        seed[0] = 1.0;
        grads[loss.0] = Some(seed);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.iter().all(|v| v.is_finite()) {
                    return Err(Error::NonFinite(format!("backward through node {i}")));
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let n = &self.nodes[v.0];
            if !n.needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n.value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                self.broadcast_back(*a, &node.shape, g, &mut acc, |gi, _| gi);
                self.broadcast_back(*b, &node.shape, g, &mut acc, |gi, _| sign * gi);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
                let (ma, mb) = self.maps(sa, sb, &node.shape);
                self.broadcast_back(*a, &node.shape, g, &mut acc, |gi, o| gi * bv[mb(o)]);
                self.broadcast_back(*b, &node.shape, g, &mut acc, |gi, o| gi * av[ma(o)]);
            }
            Op::Div(a, b) => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
                let (ma, mb) = self.maps(sa, sb, &node.shape);
                self.broadcast_back(*a, &node.shape, g, &mut acc, |gi, o| gi / bv[mb(o)]);
                self.broadcast_back(*b, &node.shape, g, &mut acc, |gi, o| {
                    let y = bv[mb(o)];
                    -gi * av[ma(o)] / (y * y)
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, gi)| *s += gi * c)),
            Op::AddScalar(a) | Op::RoundSte(a) | Op::Reshape(a) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, gi)| *s += gi))
            }
            Op::Exp(a) => acc(*a, &mut |s| {
                for ((s, gi), y) in s.iter_mut().zip(g).zip(out) {
                    *s += gi * y;
                }
            }),
            Op::Ln(a) => {
                let x = &self.nodes[a.0].value;
                acc(*a, &mut |s| {
                    for ((s, gi), xi) in s.iter_mut().zip(g).zip(x) {
                        *s += gi / xi;
                    }
                })
            }
            Op::Sqrt(a) => acc(*a, &mut |s| {
                for ((s, gi), y) in s.iter_mut().zip(g).zip(out) {
                    *s += gi * 0.5 / y;
                }
            }),
            Op::Abs(a) => {
                let x = &self.nodes[a.0].value;
                acc(*a, &mut |s| {
                    for ((s, gi), xi) in s.iter_mut().zip(g).zip(x) {
                        if *xi > 0.0 {
                            *s += gi;
                        } else if *xi < 0.0 {
                            *s -= gi;
                        }
                    }
                })
            }
            Op::Tanh(a) => acc(*a, &mut |s| {
                for ((s, gi), y) in s.iter_mut().zip(g).zip(out) {
                    *s += gi * (1.0 - y * y);
                }
            }),
            Op::Gelu(a) => {
                let x = &self.nodes[a.0].value;
                acc(*a, &mut |s| {
                    for ((s, gi), xi) in s.iter_mut().zip(g).zip(x) {
                        *s += gi * gelu_grad(*xi);
                    }
                })
            }
            Op::Clip(a, lo, hi) => {
                let x = &self.nodes[a.0].value;
                acc(*a, &mut |s| {
                    for ((s, gi), xi) in s.iter_mut().zip(g).zip(x) {
                        if *xi >= *lo && *xi <= *hi {
                            *s += gi;
                        }
                    }
                })
            }
            Op::Matmul {
                a,
                b,
                groups,
                m,
                k,
                n,
                trans_b,
            } => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (groups, m, k, n) = (*groups, *m, *k, *n);
                let work = groups * m * n * k;
                let st = Strategy::auto(work);
                if self.nodes[a.0].needs_grad {
                    // dA = G·B (trans_b) or G·Bᵀ
                    let da = if *trans_b {
                        kernels::gemm_nn(st, g, bv, groups, m, n, k)
                    } else {
                        kernels::gemm_nt(st, g, bv, groups, m, n, k)
                    };
                    acc(*a, &mut |s| s.iter_mut().zip(&da).for_each(|(s, d)| *s += d));
                }
                if self.nodes[b.0].needs_grad {
                    // dB = Gᵀ·A (trans_b) or Aᵀ·G
                    let db = if *trans_b {
                        kernels::gemm_tn(st, g, av, groups, n, m, k)
                    } else {
                        kernels::gemm_tn(st, av, g, groups, k, m, n)
                    };
                    acc(*b, &mut |s| s.iter_mut().zip(&db).for_each(|(s, d)| *s += d));
                }
            }
            Op::Softmax(a) => {
                let w = last_dim(&node.shape);
                acc(*a, &mut |s| {
                    for ((srow, grow), yrow) in s.chunks_mut(w).zip(g.chunks(w)).zip(out.chunks(w)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((si, gi), yi) in srow.iter_mut().zip(grow).zip(yrow) {
                            *si += yi * (gi - dot);
                        }
                    }
                })
            }
            Op::LogSoftmax(a) => {
                let w = last_dim(&node.shape);
                acc(*a, &mut |s| {
                    for ((srow, grow), yrow) in s.chunks_mut(w).zip(g.chunks(w)).zip(out.chunks(w)) {
                        let total: f64 = grow.iter().sum();
                        for ((si, gi), yi) in srow.iter_mut().zip(grow).zip(yrow) {
                            *si += gi - yi.exp() * total;
                        }
                    }
                })
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gam = &self.nodes[gamma.0].value;
                let d = gam.len();
                acc(*x, &mut |s| {
                    for (r, rs) in rstd.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for c in 0..d {
                            let gh = gr[c] * gam[c];
                            m1 += gh;
                            m2 += gh * hr[c];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for c in 0..d {
                            s[r * d + c] += rs * (gr[c] * gam[c] - m1 - hr[c] * m2);
                        }
                    }
                });
                acc(*gamma, &mut |s| {
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for c in 0..d {
                            s[c] += gr[c] * hr[c];
                        }
                    }
                });
                acc(*beta, &mut |s| {
                    for gr in g.chunks(d) {
                        s.iter_mut().zip(gr).for_each(|(s, gi)| *s += gi);
                    }
                });
            }
            Op::SumAll(a) => acc(*a, &mut |s| s.iter_mut().for_each(|s| *s += g[0])),
            Op::MeanAll(a) => {
                let c = g[0] / self.nodes[a.0].value.len() as f64;
                acc(*a, &mut |s| s.iter_mut().for_each(|s| *s += c))
            }
            Op::SumAxis {
                x,
                outer,
                axis,
                inner,
            } => acc(*x, &mut |s| {
                for o in 0..*outer {
                    for k in 0..*axis {
                        let dst = &mut s[(o * axis + k) * inner..(o * axis + k + 1) * inner];
                        let src = &g[o * inner..(o + 1) * inner];
                        dst.iter_mut().zip(src).for_each(|(d, v)| *d += v);
                    }
                }
            }),
            Op::SplitHeads {
                x,
                batch,
                tokens,
                heads,
            } => {
                let dh = node.shape[2];
                acc(*x, &mut |s| {
                    for b in 0..*batch {
                        for t in 0..*tokens {
                            for h in 0..*heads {
                                let src = ((b * heads + h) * tokens + t) * dh;
                                let dst = (b * tokens + t) * heads * dh + h * dh;
                                for i in 0..dh {
                                    s[dst + i] += g[src + i];
                                }
                            }
                        }
                    }
                })
            }
            Op::MergeHeads {
                x,
                batch,
                tokens,
                heads,
            } => {
                let dh = node.shape[1] / heads;
                acc(*x, &mut |s| {
                    for b in 0..*batch {
                        for t in 0..*tokens {
                            for h in 0..*heads {
                                let src = (b * tokens + t) * heads * dh + h * dh;
                                let dst = ((b * heads + h) * tokens + t) * dh;
                                for i in 0..dh {
                                    s[dst + i] += g[src + i];
                                }
                            }
                        }
                    }
                })
            }
            Op::SliceCols { x, start } => {
                let cols = self.nodes[x.0].shape[1];
                let len = node.shape[1];
                acc(*x, &mut |s| {
                    for (r, gr) in g.chunks(len).enumerate() {
                        let dst = &mut s[r * cols + start..r * cols + start + len];
                        dst.iter_mut().zip(gr).for_each(|(d, v)| *d += v);
                    }
                })
            }
            Op::SelectRows { x, rows } => {
                let cols = node.shape[1];
                acc(*x, &mut |s| {
                    for (gr, &r) in g.chunks(cols).zip(rows) {
                        let dst = &mut s[r * cols..(r + 1) * cols];
                        dst.iter_mut().zip(gr).for_each(|(d, v)| *d += v);
                    }
                })
            }
            Op::PrependRow { x, row, groups } => {
                let cols = node.shape[1];
                let per = self.nodes[x.0].shape[0] / groups;
                acc(*x, &mut |s| {
                    for gi in 0..*groups {
                        let src = &g[(gi * (per + 1) + 1) * cols..(gi + 1) * (per + 1) * cols];
                        let dst = &mut s[gi * per * cols..(gi + 1) * per * cols];
                        dst.iter_mut().zip(src).for_each(|(d, v)| *d += v);
                    }
                });
                acc(*row, &mut |s| {
                    for gi in 0..*groups {
                        let src = &g[gi * (per + 1) * cols..(gi * (per + 1) + 1) * cols];
                        s.iter_mut().zip(src).for_each(|(d, v)| *d += v);
                    }
                });
            }
            Op::FakeQuant {
                x,
                delta,
                zero,
                levels,
                per_row,
                mask,
            } => {
                let xv = &self.nodes[x.0].value;
                let dv = &self.nodes[delta.0].value;
                let zv = &self.nodes[zero.0].value;
                let rows = if *per_row { self.nodes[x.0].shape[0] } else { 1 };
                let cols = xv.len() / rows;
                let top = (*levels - 1) as f64;
                acc(*x, &mut |s| {
                    for ((s, gi), m) in s.iter_mut().zip(g).zip(mask) {
                        if *m == Clip::Inside {
                            *s += gi;
                        }
                    }
                });
                acc(*delta, &mut |s| {
                    for r in 0..rows {
                        let d = dv[r];
                        let zr = zv[r].round_ties_even();
                        let mut total = 0.0;
                        for i in r * cols..(r + 1) * cols {
                            let u = xv[i] / d;
                            total += g[i]
                                * match mask[i] {
                                    Clip::Inside => u.round_ties_even() - u,
                                    Clip::Below => -zr,
                                    Clip::Above => top - zr,
                                };
                        }
                        s[r] += total;
                    }
                });
                acc(*zero, &mut |s| {
                    for r in 0..rows {
                        let d = dv[r];
                        let mut total = 0.0;
                        for i in r * cols..(r + 1) * cols {
                            if mask[i] != Clip::Inside {
                                total -= g[i] * d;
                            }
                        }
                        s[r] += total;
                    }
                });
            }
        }
    }

    fn maps<'a>(
        &self,
        sa: &'a [usize],
        sb: &'a [usize],
        out: &'a [usize],
    ) -> (impl Fn(usize) -> usize, impl Fn(usize) -> usize) {
        let ma = (sa != out).then(|| broadcast_map(sa, out));
        let mb = (sb != out).then(|| broadcast_map(sb, out));
        (
            move |o| ma.as_ref().map_or(o, |m| m[o]),
            move |o| mb.as_ref().map_or(o, |m| m[o]),
        )
    }

    /// Accumulates `f(g[o], o)` into the operand's gradient, summing over
    /// broadcast dimensions.
    fn broadcast_back(
        &self,
        v: Var,
        out_shape: &[usize],
        g: &[f64],
        acc: &mut impl FnMut(Var, &mut dyn FnMut(&mut [f64])),
        f: impl Fn(f64, usize) -> f64,
    ) {
        let shape = &self.nodes[v.0].shape;
        if shape == out_shape {
            acc(v, &mut |s| {
                for (o, (si, gi)) in s.iter_mut().zip(g).enumerate() {
                    *si += f(*gi, o);
                }
            });
        } else {
            let map = broadcast_map(shape, out_shape);
            acc(v, &mut |s| {
                for (o, (&gi, &i)) in g.iter().zip(&map).enumerate() {
                    s[i] += f(gi, o);
                }
            });
        }
    }
}
