//! Dense-tensor computation graph with reverse-mode differentiation.
//!
//! A [`Graph`] owns every tensor created on it. Ops append tape nodes when
//! any input participates in differentiation; [`Graph::backward`] replays the
//! tape in reverse and accumulates gradients for `parameter` leaves. Graphs
//! are rebuilt per training step, so the tape never needs explicit clearing —
//! repeated `backward` calls on the same graph are allowed and independent.
//!
//! Every op validates shapes (`InvalidArgument`) and scans its output for
//! non-finite values (`Numeric` carrying the op name).

use std::cell::RefCell;

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Handle to a tensor living on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tensor {
    pub(crate) id: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    MatMul(usize, usize),
    Bmm(usize, usize),
    TransposeLast(usize),
    Reshape(usize),
    SliceLast(usize, usize, usize),
    ConcatLast(Vec<usize>),
    MeanAxis(usize, usize),
    MeanAll(usize),
    Relu(usize),
    Gelu(usize),
    Abs(usize),
    Sqrt(usize),
    AddConst(usize),
    MulConst(usize, f64),
    SoftmaxLast(usize),
    LayerNormLast(usize, f64),
    AddBroadcast(usize, usize),
    MulBroadcast(usize, usize),
    ExpandLast(usize, usize),
    MaxPoolLast(usize, usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::MatMul(..) => "matmul",
            Op::Bmm(..) => "bmm",
            Op::TransposeLast(..) => "transpose_last",
            Op::Reshape(..) => "reshape",
            Op::SliceLast(..) => "slice_last",
            Op::ConcatLast(..) => "concat_last",
            Op::MeanAxis(..) => "mean_axis",
            Op::MeanAll(..) => "mean_all",
            Op::Relu(..) => "relu",
            Op::Gelu(..) => "gelu",
            Op::Abs(..) => "abs",
            Op::Sqrt(..) => "sqrt",
            Op::AddConst(..) => "add_const",
            Op::MulConst(..) => "mul_const",
            Op::SoftmaxLast(..) => "softmax_last",
            Op::LayerNormLast(..) => "layer_norm_last",
            Op::AddBroadcast(..) => "add_broadcast",
            Op::MulBroadcast(..) => "mul_broadcast",
            Op::ExpandLast(..) => "expand_last",
            Op::MaxPoolLast(..) => "max_pool_last",
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::MatMul(a, b)
            | Op::Bmm(a, b)
            | Op::AddBroadcast(a, b)
            | Op::MulBroadcast(a, b) => vec![*a, *b],
            Op::ConcatLast(ids) => ids.clone(),
            Op::TransposeLast(a)
            | Op::Reshape(a)
            | Op::SliceLast(a, _, _)
            | Op::MeanAxis(a, _)
            | Op::MeanAll(a)
            | Op::Relu(a)
            | Op::Gelu(a)
            | Op::Abs(a)
            | Op::Sqrt(a)
            | Op::AddConst(a)
            | Op::MulConst(a, _)
            | Op::SoftmaxLast(a)
            | Op::LayerNormLast(a, _)
            | Op::ExpandLast(a, _)
            | Op::MaxPoolLast(a, _) => vec![*a],
        }
    }
}

struct Node {
    op: Op,
    out: usize,
}

#[derive(Default)]
struct Inner {
    shapes: Vec<Vec<usize>>,
    values: Vec<Vec<f64>>,
    needs_grad: Vec<bool>,
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass, keyed by tensor handle.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, t: Tensor) -> Option<&[f64]> {
        self.grads.get(t.id).and_then(|g| g.as_deref())
    }
}

#[derive(Default)]
pub struct Graph {
    inner: RefCell<Inner>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_finite(op: &str, vals: &[f64]) -> Result<()> {
    if vals.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::numeric(op, "non-finite value in output"))
    }
}

const PAR_FLOPS: usize = 1 << 16;

/// Row-block height of the register-tiled kernel.
const MR: usize = 6;
/// Column width of the register-tiled kernel (one cache line of f64).
const JR: usize = 8;

fn parallel_worthwhile(flops: usize) -> bool {
    flops >= PAR_FLOPS && rayon::current_num_threads() > 1
}

/// `MR_ACT x JR` register tile: accumulates rows `base..base+MR_ACT` of
/// `a[.,k] @ b[k,n]` into `out_rows` (a slice of MR_ACT rows, stride `n`).
/// Fixed `MR_ACT` lets the compiler keep the accumulators in registers.
fn nn_tile<const MR_ACT: usize>(
    a: &[f64],
    b: &[f64],
    k: usize,
    n: usize,
    base: usize,
    out_rows: &mut [f64],
) {
    let mut j = 0;
    while j + JR <= n {
        let mut acc = [[0.0f64; JR]; MR_ACT];
        for l in 0..k {
            let bseg: &[f64; JR] = b[l * n + j..l * n + j + JR].try_into().unwrap();
            for t in 0..MR_ACT {
                let av = a[(base + t) * k + l];
                for c in 0..JR {
                    acc[t][c] += av * bseg[c];
                }
            }
        }
        for t in 0..MR_ACT {
            out_rows[t * n + j..t * n + j + JR].copy_from_slice(&acc[t]);
        }
        j += JR;
    }
    while j < n {
        for t in 0..MR_ACT {
            let arow = &a[(base + t) * k..(base + t + 1) * k];
            let mut s = 0.0;
            for l in 0..k {
                s += arow[l] * b[l * n + j];
            }
            out_rows[t * n + j] = s;
        }
        j += 1;
    }
}

/// Computes a block of full output rows starting at absolute row `base`.
fn nn_rows(a: &[f64], b: &[f64], k: usize, n: usize, base: usize, out_rows: &mut [f64]) {
    let rows = out_rows.len() / n;
    let mut r = 0;
    while r + MR <= rows {
        nn_tile::<MR>(a, b, k, n, base + r, &mut out_rows[r * n..(r + MR) * n]);
        r += MR;
    }
    while r < rows {
        nn_tile::<1>(a, b, k, n, base + r, &mut out_rows[r * n..(r + 1) * n]);
        r += 1;
    }
}

/// `out[m,n] = a[m,k] @ b[k,n]`
fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    if parallel_worthwhile(m * k * n) && m > MR {
        out.par_chunks_mut(MR * n)
            .enumerate()
            .for_each(|(bi, chunk)| nn_rows(a, b, k, n, bi * MR, chunk));
    } else {
        nn_rows(a, b, k, n, 0, &mut out);
    }
    out
}

/// `out[m,k] = a[m,n] @ b[k,n]^T`, computed by transposing `b` once and
/// reusing the tiled `nn` kernel. `b` is weight-sized at every call site,
/// so the transpose is cheap relative to the multiply.
fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut bt = vec![0.0; n * k];
    for l in 0..k {
        for j in 0..n {
            bt[j * k + l] = b[l * n + j];
        }
    }
    matmul_nn(a, &bt, m, n, k)
}

/// Rank-`I_ACT` update: adds `a[i0..i0+I_ACT,:]^T @ b[i0..i0+I_ACT,:]` into
/// `out[k,n]`, reusing the `I_ACT` rows of `b` across all `k` output rows.
fn tn_update<const I_ACT: usize>(
    a: &[f64],
    b: &[f64],
    k: usize,
    n: usize,
    i0: usize,
    out: &mut [f64],
) {
    for l in 0..k {
        let mut av = [0.0f64; I_ACT];
        for t in 0..I_ACT {
            av[t] = a[(i0 + t) * k + l];
        }
        if av.iter().all(|&v| v == 0.0) {
            continue;
        }
        let orow = &mut out[l * n..(l + 1) * n];
        for t in 0..I_ACT {
            if av[t] != 0.0 {
                let brow = &b[(i0 + t) * n..(i0 + t + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av[t] * bv;
                }
            }
        }
    }
}

/// `out[k,n] = a[m,k]^T @ b[m,n]`
fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    if parallel_worthwhile(m * k * n) && k > 1 {
        // each thread owns a band of output rows and scans all of a/b
        out.par_chunks_mut(n).enumerate().for_each(|(l, orow)| {
            for i in 0..m {
                let av = a[i * k + l];
                if av != 0.0 {
                    let brow = &b[i * n..(i + 1) * n];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
        });
    } else {
        let mut i = 0;
        while i + 4 <= m {
            tn_update::<4>(a, b, k, n, i, &mut out);
            i += 4;
        }
        while i < m {
            tn_update::<1>(a, b, k, n, i, &mut out);
            i += 1;
        }
    }
    out
}

fn gelu_scalar(x: f64) -> f64 {
    // tanh approximation of x * Phi(x)
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&self, shape: Vec<usize>, values: Vec<f64>, needs_grad: bool) -> Tensor {
        let mut inner = self.inner.borrow_mut();
        inner.shapes.push(shape);
        inner.values.push(values);
        inner.needs_grad.push(needs_grad);
        Tensor {
            id: inner.shapes.len() - 1,
        }
    }

    /// Leaf that does not participate in differentiation.
    pub fn constant(&self, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if values.len() != numel(shape) {
            return Err(Error::invalid(format!(
                "value length {} does not match shape {:?}",
                values.len(),
                shape
            )));
        }
        check_finite("constant", &values)?;
        Ok(self.push(shape.to_vec(), values, false))
    }

    /// Leaf that receives a gradient from [`Graph::backward`].
    pub fn parameter(&self, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if values.len() != numel(shape) {
            return Err(Error::invalid(format!(
                "value length {} does not match shape {:?}",
                values.len(),
                shape
            )));
        }
        check_finite("parameter", &values)?;
        Ok(self.push(shape.to_vec(), values, true))
    }

    pub fn shape(&self, t: Tensor) -> Vec<usize> {
        self.inner.borrow().shapes[t.id].clone()
    }

    pub fn values(&self, t: Tensor) -> Vec<f64> {
        self.inner.borrow().values[t.id].clone()
    }

    pub fn numel(&self, t: Tensor) -> usize {
        self.inner.borrow().values[t.id].len()
    }

    /// Scalar convenience accessor; errors unless `t` holds one element.
    pub fn scalar(&self, t: Tensor) -> Result<f64> {
        let inner = self.inner.borrow();
        let v = &inner.values[t.id];
        if v.len() != 1 {
            return Err(Error::invalid("tensor is not scalar-shaped"));
        }
        Ok(v[0])
    }

    fn record(&self, op: Op, shape: Vec<usize>, values: Vec<f64>) -> Result<Tensor> {
        check_finite(op.name(), &values)?;
        let needs = {
            let inner = self.inner.borrow();
            op.inputs().iter().any(|&i| inner.needs_grad[i])
        };
        let t = self.push(shape, values, needs);
        if needs {
            self.inner.borrow_mut().nodes.push(Node { op, out: t.id });
        }
        Ok(t)
    }

    fn binary_same_shape(&self, name: &str, a: Tensor, b: Tensor) -> Result<Vec<usize>> {
        let inner = self.inner.borrow();
        let (sa, sb) = (&inner.shapes[a.id], &inner.shapes[b.id]);
        if sa != sb {
            return Err(Error::invalid(format!(
                "{name}: shape mismatch {sa:?} vs {sb:?}"
            )));
        }
        Ok(sa.clone())
    }

    pub fn add(&self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let shape = self.binary_same_shape("add", a, b)?;
        let vals = {
            let inner = self.inner.borrow();
            inner.values[a.id]
                .iter()
                .zip(&inner.values[b.id])
                .map(|(x, y)| x + y)
                .collect()
        };
        self.record(Op::Add(a.id, b.id), shape, vals)
    }

    pub fn sub(&self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let shape = self.binary_same_shape("sub", a, b)?;
        let vals = {
            let inner = self.inner.borrow();
            inner.values[a.id]
                .iter()
                .zip(&inner.values[b.id])
                .map(|(x, y)| x - y)
                .collect()
        };
        self.record(Op::Sub(a.id, b.id), shape, vals)
    }

    pub fn mul(&self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let shape = self.binary_same_shape("mul", a, b)?;
        let vals = {
            let inner = self.inner.borrow();
            inner.values[a.id]
                .iter()
                .zip(&inner.values[b.id])
                .map(|(x, y)| x * y)
                .collect()
        };
        self.record(Op::Mul(a.id, b.id), shape, vals)
    }

    pub fn div(&self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let shape = self.binary_same_shape("div", a, b)?;
        let vals = {
            let inner = self.inner.borrow();
            inner.values[a.id]
                .iter()
                .zip(&inner.values[b.id])
                .map(|(x, y)| x / y)
                .collect()
        };
        self.record(Op::Div(a.id, b.id), shape, vals)
    }

    /// 2-D matrix product `a[m,k] @ b[k,n]`.
    pub fn matmul(&self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (m, k, n, vals) = {
            let inner = self.inner.borrow();
            let (sa, sb) = (&inner.shapes[a.id], &inner.shapes[b.id]);
            if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
                return Err(Error::invalid(format!(
                    "matmul: incompatible shapes {sa:?} @ {sb:?}"
                )));
            }
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            let vals = matmul_nn(&inner.values[a.id], &inner.values[b.id], m, k, n);
            (m, k, n, vals)
        };
        let _ = k;
        self.record(Op::MatMul(a.id, b.id), vec![m, n], vals)
    }

    /// Batched 3-D matrix product `a[B,m,k] @ b[B,k,n]`.
    pub fn bmm(&self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (bsz, m, n, vals) = {
            let inner = self.inner.borrow();
            let (sa, sb) = (&inner.shapes[a.id], &inner.shapes[b.id]);
            if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
                return Err(Error::invalid(format!(
                    "bmm: incompatible shapes {sa:?} @ {sb:?}"
                )));
            }
            let (bsz, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
            let (va, vb) = (&inner.values[a.id], &inner.values[b.id]);
            let mut vals = vec![0.0; bsz * m * n];
            if bsz > 1 && bsz * m * k * n >= PAR_FLOPS {
                vals.par_chunks_mut(m * n).enumerate().for_each(|(s, out)| {
                    let block = matmul_nn(&va[s * m * k..(s + 1) * m * k], &vb[s * k * n..(s + 1) * k * n], m, k, n);
                    out.copy_from_slice(&block);
                });
            } else {
                for s in 0..bsz {
                    let block = matmul_nn(&va[s * m * k..(s + 1) * m * k], &vb[s * k * n..(s + 1) * k * n], m, k, n);
                    vals[s * m * n..(s + 1) * m * n].copy_from_slice(&block);
                }
            }
            (bsz, m, n, vals)
        };
        self.record(Op::Bmm(a.id, b.id), vec![bsz, m, n], vals)
    }

    /// Swap the last two axes of a 2-D or 3-D tensor.
    pub fn transpose_last(&self, a: Tensor) -> Result<Tensor> {
        let (shape, vals) = {
            let inner = self.inner.borrow();
            let sa = &inner.shapes[a.id];
            if sa.len() < 2 {
                return Err(Error::invalid("transpose_last needs >= 2 dims"));
            }
            let (m, n) = (sa[sa.len() - 2], sa[sa.len() - 1]);
            let batch = numel(&sa[..sa.len() - 2]);
            let va = &inner.values[a.id];
            let mut vals = vec![0.0; va.len()];
            for s in 0..batch {
                let src = &va[s * m * n..(s + 1) * m * n];
                let dst = &mut vals[s * m * n..(s + 1) * m * n];
                for i in 0..m {
                    for j in 0..n {
                        dst[j * m + i] = src[i * n + j];
                    }
                }
            }
            let mut shape = sa.clone();
            let len = shape.len();
            shape.swap(len - 2, len - 1);
            (shape, vals)
        };
        self.record(Op::TransposeLast(a.id), shape, vals)
    }

    pub fn reshape(&self, a: Tensor, shape: &[usize]) -> Result<Tensor> {
        let vals = {
            let inner = self.inner.borrow();
            if numel(&inner.shapes[a.id]) != numel(shape) {
                return Err(Error::invalid(format!(
                    "reshape: {:?} incompatible with {:?}",
                    inner.shapes[a.id], shape
                )));
            }
            inner.values[a.id].clone()
        };
        self.record(Op::Reshape(a.id), shape.to_vec(), vals)
    }

    /// Slice `[start, end)` along the last axis.
    pub fn slice_last(&self, a: Tensor, start: usize, end: usize) -> Result<Tensor> {
        let (shape, vals) = {
            let inner = self.inner.borrow();
            let sa = &inner.shapes[a.id];
            let n = *sa.last().ok_or_else(|| Error::invalid("slice_last on 0-dim"))?;
            if start >= end || end > n {
                return Err(Error::invalid(format!(
                    "slice_last: [{start},{end}) out of range for axis {n}"
                )));
            }
            let lead = numel(&sa[..sa.len() - 1]);
            let w = end - start;
            let va = &inner.values[a.id];
            let mut vals = Vec::with_capacity(lead * w);
            for r in 0..lead {
                vals.extend_from_slice(&va[r * n + start..r * n + end]);
            }
            let mut shape = sa.clone();
            *shape.last_mut().unwrap() = w;
            (shape, vals)
        };
        self.record(Op::SliceLast(a.id, start, end), shape, vals)
    }

    /// Concatenate along the last axis; leading shapes must agree.
    pub fn concat_last(&self, parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_last needs at least one input"));
        }
        let (shape, vals) = {
            let inner = self.inner.borrow();
            let lead_shape = {
                let s = &inner.shapes[parts[0].id];
                s[..s.len() - 1].to_vec()
            };
            let mut total = 0;
            for p in parts {
                let s = &inner.shapes[p.id];
                if s.is_empty() || s[..s.len() - 1] != lead_shape[..] {
                    return Err(Error::invalid("concat_last: leading shapes differ"));
                }
                total += *s.last().unwrap();
            }
            let lead = numel(&lead_shape);
            let mut vals = Vec::with_capacity(lead * total);
            for r in 0..lead {
                for p in parts {
                    let n = *inner.shapes[p.id].last().unwrap();
                    vals.extend_from_slice(&inner.values[p.id][r * n..(r + 1) * n]);
                }
            }
            let mut shape = lead_shape;
            shape.push(total);
            (shape, vals)
        };
        self.record(
            Op::ConcatLast(parts.iter().map(|t| t.id).collect()),
            shape,
            vals,
        )
    }

    /// Mean over one axis; the axis is removed from the output shape.
    pub fn mean_axis(&self, a: Tensor, axis: usize) -> Result<Tensor> {
        let (shape, vals) = {
            let inner = self.inner.borrow();
            let sa = &inner.shapes[a.id];
            if axis >= sa.len() {
                return Err(Error::invalid(format!(
                    "mean_axis: axis {axis} out of range for {sa:?}"
                )));
            }
            let outer = numel(&sa[..axis]);
            let len = sa[axis];
            let stride = numel(&sa[axis + 1..]);
            let va = &inner.values[a.id];
            let mut vals = vec![0.0; outer * stride];
            for o in 0..outer {
                for l in 0..len {
                    for s in 0..stride {
                        vals[o * stride + s] += va[(o * len + l) * stride + s];
                    }
                }
            }
            for v in &mut vals {
                *v /= len as f64;
            }
            let mut shape = sa.clone();
            shape.remove(axis);
            if shape.is_empty() {
                shape.push(1);
            }
            (shape, vals)
        };
        self.record(Op::MeanAxis(a.id, axis), shape, vals)
    }

    /// Mean over every element; output is scalar-shaped `[1]`.
    pub fn mean_all(&self, a: Tensor) -> Result<Tensor> {
        let vals = {
            let inner = self.inner.borrow();
            let va = &inner.values[a.id];
            if va.is_empty() {
                return Err(Error::invalid("mean_all of empty tensor"));
            }
            vec![va.iter().sum::<f64>() / va.len() as f64]
        };
        self.record(Op::MeanAll(a.id), vec![1], vals)
    }

    pub fn relu(&self, a: Tensor) -> Result<Tensor> {
        let (shape, vals) = {
            let inner = self.inner.borrow();
            (
                inner.shapes[a.id].clone(),
                inner.values[a.id].iter().map(|&x| x.max(0.0)).collect(),
            )
        };
        self.record(Op::Relu(a.id), shape, vals)
    }

    pub fn gelu(&self, a: Tensor) -> Result<Tensor> {
        let (shape, vals) = {
            let inner = self.inner.borrow();
            (
                inner.shapes[a.id].clone(),
                inner.values[a.id].iter().map(|&x| gelu_scalar(x)).collect(),
            )
        };
        self.record(Op::Gelu(a.id), shape, vals)
    }

    pub fn abs(&self, a: Tensor) -> Result<Tensor> {
        let (shape, vals) = {
            let inner = self.inner.borrow();
            (
                inner.shapes[a.id].clone(),
                inner.values[a.id].iter().map(|&x| x.abs()).collect(),
            )
        };
        self.record(Op::Abs(a.id), shape, vals)
    }

    pub fn sqrt(&self, a: Tensor) -> Result<Tensor> {
        let (shape, vals) = {
            let inner = self.inner.borrow();
            (
                inner.shapes[a.id].clone(),
                inner.values[a.id].iter().map(|&x| x.sqrt()).collect(),
            )
        };
        self.record(Op::Sqrt(a.id), shape, vals)
    }

    pub fn add_const(&self, a: Tensor, c: f64) -> Result<Tensor> {
        let (shape, vals) = {
            let inner = self.inner.borrow();
            (
                inner.shapes[a.id].clone(),
                inner.values[a.id].iter().map(|&x| x + c).collect(),
            )
        };
        self.record(Op::AddConst(a.id), shape, vals)
    }

    pub fn mul_const(&self, a: Tensor, c: f64) -> Result<Tensor> {
        let (shape, vals) = {
            let inner = self.inner.borrow();
            (
                inner.shapes[a.id].clone(),
                inner.values[a.id].iter().map(|&x| x * c).collect(),
            )
        };
        self.record(Op::MulConst(a.id, c), shape, vals)
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax_last(&self, a: Tensor) -> Result<Tensor> {
        let (shape, vals) = {
            let inner = self.inner.borrow();
            let sa = &inner.shapes[a.id];
            let n = *sa.last().ok_or_else(|| Error::invalid("softmax_last on 0-dim"))?;
            let va = &inner.values[a.id];
            let mut vals = vec![0.0; va.len()];
            for (row_in, row_out) in va.chunks(n).zip(vals.chunks_mut(n)) {
                let max = row_in.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for (o, &x) in row_out.iter_mut().zip(row_in) {
                    *o = (x - max).exp();
                    sum += *o;
                }
                for o in row_out.iter_mut() {
                    *o /= sum;
                }
            }
            (sa.clone(), vals)
        };
        self.record(Op::SoftmaxLast(a.id), shape, vals)
    }

    /// Standardize each last-axis row to zero mean and unit variance
    /// (population variance, `eps` inside the square root). No affine term;
    /// compose with [`Graph::mul_broadcast`] / [`Graph::add_broadcast`] for
    /// learned scale and shift.
    pub fn layer_norm_last(&self, a: Tensor, eps: f64) -> Result<Tensor> {
        let (shape, vals) = {
            let inner = self.inner.borrow();
            let sa = &inner.shapes[a.id];
            let n = *sa.last().ok_or_else(|| Error::invalid("layer_norm_last on 0-dim"))?;
            let va = &inner.values[a.id];
            let mut vals = vec![0.0; va.len()];
            for (row_in, row_out) in va.chunks(n).zip(vals.chunks_mut(n)) {
                let mean = row_in.iter().sum::<f64>() / n as f64;
                let var = row_in.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
                let inv = 1.0 / (var + eps).sqrt();
                for (o, &x) in row_out.iter_mut().zip(row_in) {
                    *o = (x - mean) * inv;
                }
            }
            (sa.clone(), vals)
        };
        self.record(Op::LayerNormLast(a.id, eps), shape, vals)
    }

    fn broadcast_check(&self, name: &str, a: Tensor, b: Tensor) -> Result<(Vec<usize>, usize)> {
        let inner = self.inner.borrow();
        let (sa, sb) = (&inner.shapes[a.id], &inner.shapes[b.id]);
        if sb.len() > sa.len() || !sa.ends_with(sb) {
            return Err(Error::invalid(format!(
                "{name}: {sb:?} is not a trailing suffix of {sa:?}"
            )));
        }
        Ok((sa.clone(), numel(sb)))
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s; `b` is tiled
    /// over the leading axes. Covers bias rows and positional tables.
    pub fn add_broadcast(&self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (shape, bn) = self.broadcast_check("add_broadcast", a, b)?;
        let vals = {
            let inner = self.inner.borrow();
            let vb = &inner.values[b.id];
            inner.values[a.id]
                .iter()
                .enumerate()
                .map(|(i, &x)| x + vb[i % bn])
                .collect()
        };
        self.record(Op::AddBroadcast(a.id, b.id), shape, vals)
    }

    /// Elementwise `a * b` with `b` tiled over leading axes (see
    /// [`Graph::add_broadcast`]).
    pub fn mul_broadcast(&self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (shape, bn) = self.broadcast_check("mul_broadcast", a, b)?;
        let vals = {
            let inner = self.inner.borrow();
            let vb = &inner.values[b.id];
            inner.values[a.id]
                .iter()
                .enumerate()
                .map(|(i, &x)| x * vb[i % bn])
                .collect()
        };
        self.record(Op::MulBroadcast(a.id, b.id), shape, vals)
    }

    /// Expand a trailing axis of size 1 to size `n`.
    pub fn expand_last(&self, a: Tensor, n: usize) -> Result<Tensor> {
        let (shape, vals) = {
            let inner = self.inner.borrow();
            let sa = &inner.shapes[a.id];
            if sa.last() != Some(&1) {
                return Err(Error::invalid(format!(
                    "expand_last: last axis of {sa:?} is not 1"
                )));
            }
            let va = &inner.values[a.id];
            let mut vals = Vec::with_capacity(va.len() * n);
            for &x in va {
                vals.extend(std::iter::repeat(x).take(n));
            }
            let mut shape = sa.clone();
            *shape.last_mut().unwrap() = n;
            (shape, vals)
        };
        self.record(Op::ExpandLast(a.id, n), shape, vals)
    }

    /// Max pooling along the last axis with kernel == stride == `k`; a short
    /// trailing window is reduced as-is (ceil semantics).
    pub fn max_pool_last(&self, a: Tensor, k: usize) -> Result<Tensor> {
        if k == 0 {
            return Err(Error::invalid("max_pool_last: kernel must be positive"));
        }
        let (shape, vals) = {
            let inner = self.inner.borrow();
            let sa = &inner.shapes[a.id];
            let n = *sa.last().ok_or_else(|| Error::invalid("max_pool_last on 0-dim"))?;
            let out_n = n.div_ceil(k);
            let lead = numel(&sa[..sa.len() - 1]);
            let va = &inner.values[a.id];
            let mut vals = vec![0.0; lead * out_n];
            for r in 0..lead {
                let row = &va[r * n..(r + 1) * n];
                for j in 0..out_n {
                    let win = &row[j * k..((j + 1) * k).min(n)];
                    vals[r * out_n + j] = win.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                }
            }
            let mut shape = sa.clone();
            *shape.last_mut().unwrap() = out_n;
            (shape, vals)
        };
        self.record(Op::MaxPoolLast(a.id, k), shape, vals)
    }

    /// Reverse-mode pass from a scalar `loss`; returns gradients for every
    /// tensor on a differentiation path to a `parameter` leaf.
    pub fn backward(&self, loss: Tensor) -> Result<Gradients> {
        let inner = self.inner.borrow();
        if inner.values[loss.id].len() != 1 {
            return Err(Error::invalid("backward: loss must be scalar-shaped"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; inner.values.len()];
        grads[loss.id] = Some(vec![1.0]);

        for node in inner.nodes.iter().rev() {
            let out_grad = match &grads[node.out] {
                Some(g) => g.clone(),
                None => continue,
            };
            self.backprop_node(&inner, node, &out_grad, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(
        &self,
        inner: &Inner,
        node: &Node,
        g: &[f64],
        grads: &mut Vec<Option<Vec<f64>>>,
    ) {
        let acc = |grads: &mut Vec<Option<Vec<f64>>>, id: usize, contrib: Vec<f64>| {
            if !inner.needs_grad[id] {
                return;
            }
            match &mut grads[id] {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(contrib) {
                        *e += c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };

        match &node.op {
            Op::Add(a, b) => {
                acc(grads, *a, g.to_vec());
                acc(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.to_vec());
                acc(grads, *b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&inner.values[*a], &inner.values[*b]);
                acc(grads, *a, g.iter().zip(vb).map(|(x, y)| x * y).collect());
                acc(grads, *b, g.iter().zip(va).map(|(x, y)| x * y).collect());
            }
            Op::Div(a, b) => {
                let (va, vb) = (&inner.values[*a], &inner.values[*b]);
                acc(grads, *a, g.iter().zip(vb).map(|(x, y)| x / y).collect());
                acc(
                    grads,
                    *b,
                    g.iter()
                        .zip(va.iter().zip(vb))
                        .map(|(gi, (x, y))| -gi * x / (y * y))
                        .collect(),
                );
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (&inner.shapes[*a], &inner.shapes[*b]);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                acc(grads, *a, matmul_nt(g, &inner.values[*b], m, n, k));
                acc(grads, *b, matmul_tn(&inner.values[*a], g, m, k, n));
            }
            Op::Bmm(a, b) => {
                let (sa, sb) = (&inner.shapes[*a], &inner.shapes[*b]);
                let (bsz, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let (va, vb) = (&inner.values[*a], &inner.values[*b]);
                let mut da = vec![0.0; va.len()];
                let mut db = vec![0.0; vb.len()];
                for s in 0..bsz {
                    let gs = &g[s * m * n..(s + 1) * m * n];
                    let block_a = matmul_nt(gs, &vb[s * k * n..(s + 1) * k * n], m, n, k);
                    da[s * m * k..(s + 1) * m * k].copy_from_slice(&block_a);
                    let block_b = matmul_tn(&va[s * m * k..(s + 1) * m * k], gs, m, k, n);
                    db[s * k * n..(s + 1) * k * n].copy_from_slice(&block_b);
                }
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::TransposeLast(a) => {
                let so = &inner.shapes[node.out];
                let (m, n) = (so[so.len() - 2], so[so.len() - 1]);
                let batch = numel(&so[..so.len() - 2]);
                let mut da = vec![0.0; g.len()];
                for s in 0..batch {
                    let src = &g[s * m * n..(s + 1) * m * n];
                    let dst = &mut da[s * m * n..(s + 1) * m * n];
                    for i in 0..m {
                        for j in 0..n {
                            dst[j * m + i] = src[i * n + j];
                        }
                    }
                }
                acc(grads, *a, da);
            }
            Op::Reshape(a) => acc(grads, *a, g.to_vec()),
            Op::SliceLast(a, start, end) => {
                let sa = &inner.shapes[*a];
                let n = *sa.last().unwrap();
                let lead = numel(&sa[..sa.len() - 1]);
                let w = end - start;
                let mut da = vec![0.0; inner.values[*a].len()];
                for r in 0..lead {
                    da[r * n + start..r * n + end].copy_from_slice(&g[r * w..(r + 1) * w]);
                }
                acc(grads, *a, da);
            }
            Op::ConcatLast(ids) => {
                let total = *inner.shapes[node.out].last().unwrap();
                let lead = g.len() / total;
                let mut offset = 0;
                for &id in ids {
                    let n = *inner.shapes[id].last().unwrap();
                    let mut da = Vec::with_capacity(lead * n);
                    for r in 0..lead {
                        da.extend_from_slice(&g[r * total + offset..r * total + offset + n]);
                    }
                    acc(grads, id, da);
                    offset += n;
                }
            }
            Op::MeanAxis(a, axis) => {
                let sa = &inner.shapes[*a];
                let outer = numel(&sa[..*axis]);
                let len = sa[*axis];
                let stride = numel(&sa[*axis + 1..]);
                let scale = 1.0 / len as f64;
                let mut da = vec![0.0; inner.values[*a].len()];
                for o in 0..outer {
                    for l in 0..len {
                        for s in 0..stride {
                            da[(o * len + l) * stride + s] = g[o * stride + s] * scale;
                        }
                    }
                }
                acc(grads, *a, da);
            }
            Op::MeanAll(a) => {
                let len = inner.values[*a].len();
                acc(grads, *a, vec![g[0] / len as f64; len]);
            }
            Op::Relu(a) => {
                let va = &inner.values[*a];
                acc(
                    grads,
                    *a,
                    g.iter()
                        .zip(va)
                        .map(|(gi, &x)| if x > 0.0 { *gi } else { 0.0 })
                        .collect(),
                );
            }
            Op::Gelu(a) => {
                let va = &inner.values[*a];
                acc(
                    grads,
                    *a,
                    g.iter()
                        .zip(va)
                        .map(|(gi, &x)| gi * gelu_grad_scalar(x))
                        .collect(),
                );
            }
            Op::Abs(a) => {
                // subgradient at 0 is 0
                let va = &inner.values[*a];
                acc(
                    grads,
                    *a,
                    g.iter()
                        .zip(va)
                        .map(|(gi, &x)| {
                            if x > 0.0 {
                                *gi
                            } else if x < 0.0 {
                                -*gi
                            } else {
                                0.0
                            }
                        })
                        .collect(),
                );
            }
            Op::Sqrt(a) => {
                let vo = &inner.values[node.out];
                acc(
                    grads,
                    *a,
                    g.iter().zip(vo).map(|(gi, &y)| gi / (2.0 * y)).collect(),
                );
            }
            Op::AddConst(a) => acc(grads, *a, g.to_vec()),
            Op::MulConst(a, c) => acc(grads, *a, g.iter().map(|x| x * c).collect()),
            Op::SoftmaxLast(a) => {
                let n = *inner.shapes[node.out].last().unwrap();
                let vo = &inner.values[node.out];
                let mut da = vec![0.0; g.len()];
                for ((srow, grow), drow) in vo.chunks(n).zip(g.chunks(n)).zip(da.chunks_mut(n)) {
                    let dot: f64 = srow.iter().zip(grow).map(|(s, gi)| s * gi).sum();
                    for ((d, &s), &gi) in drow.iter_mut().zip(srow).zip(grow) {
                        *d = s * (gi - dot);
                    }
                }
                acc(grads, *a, da);
            }
            Op::LayerNormLast(a, eps) => {
                let sa = &inner.shapes[*a];
                let n = *sa.last().unwrap();
                let va = &inner.values[*a];
                let vo = &inner.values[node.out];
                let mut da = vec![0.0; g.len()];
                for ((xrow, yrow), (grow, drow)) in va
                    .chunks(n)
                    .zip(vo.chunks(n))
                    .zip(g.chunks(n).zip(da.chunks_mut(n)))
                {
                    let mean = xrow.iter().sum::<f64>() / n as f64;
                    let var =
                        xrow.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let gmean = grow.iter().sum::<f64>() / n as f64;
                    let gydot = grow.iter().zip(yrow).map(|(gi, y)| gi * y).sum::<f64>() / n as f64;
                    for ((d, &gi), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d = inv * (gi - gmean - y * gydot);
                    }
                }
                acc(grads, *a, da);
            }
            Op::AddBroadcast(a, b) => {
                acc(grads, *a, g.to_vec());
                let bn = inner.values[*b].len();
                let mut db = vec![0.0; bn];
                for (i, gi) in g.iter().enumerate() {
                    db[i % bn] += gi;
                }
                acc(grads, *b, db);
            }
            Op::MulBroadcast(a, b) => {
                let (va, vb) = (&inner.values[*a], &inner.values[*b]);
                let bn = vb.len();
                acc(
                    grads,
                    *a,
                    g.iter().enumerate().map(|(i, gi)| gi * vb[i % bn]).collect(),
                );
                let mut db = vec![0.0; bn];
                for (i, gi) in g.iter().enumerate() {
                    db[i % bn] += gi * va[i];
                }
                acc(grads, *b, db);
            }
            Op::ExpandLast(a, n) => {
                let mut da = Vec::with_capacity(g.len() / n);
                for chunk in g.chunks(*n) {
                    da.push(chunk.iter().sum());
                }
                acc(grads, *a, da);
            }
            Op::MaxPoolLast(a, k) => {
                let sa = &inner.shapes[*a];
                let n = *sa.last().unwrap();
                let out_n = n.div_ceil(*k);
                let lead = numel(&sa[..sa.len() - 1]);
                let va = &inner.values[*a];
                let mut da = vec![0.0; va.len()];
                for r in 0..lead {
                    let row = &va[r * n..(r + 1) * n];
                    for j in 0..out_n {
                        let lo = j * k;
                        let hi = ((j + 1) * k).min(n);
                        // first max wins on ties, matching forward
                        let mut best = lo;
                        for i in lo + 1..hi {
                            if row[i] > row[best] {
                                best = i;
                            }
                        }
                        da[r * n + best] += g[r * out_n + j];
                    }
                }
                acc(grads, *a, da);
            }
        }
    }
}
