use std::collections::BTreeMap;

use super::kernels::{gemm, softmax_rows};
use super::pow2::{exp_shifted, log_unshifted};
use super::{Result, Scalar, Tensor, TensorError};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Exp,
    /// Natural log; rejects non-positive inputs.
    Log,
    /// Natural log that lets `-inf`/`NaN` through. Only the untricked LASER
    /// path uses it, where overflow is the thing being observed.
    LogUnchecked,
    Sigmoid,
    Softplus,
    Relu,
}

/// Deliberate backward-pass defects, used to show that gradient checking
/// actually catches broken derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    SoftmaxBackwardSign,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum RowOp {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op<T> {
    Param,
    Constant,
    MatMul { a: Var, b: Var, trans_b: bool },
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Row { x: Var, row: Var, op: RowOp },
    Scale(Var, T),
    ScaleBy { x: Var, s: Var },
    Unary(Var, Unary),
    Softmax(Var),
    ExpShifted(Var),
    LogUnshifted(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    Reshape(Var),
    Gather { table: Var, ids: Vec<usize> },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Tensor<T>,
        count: usize,
    },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

/// Append-only record of differentiable operations.
///
/// Nodes are stored in creation order, which is a topological order: every
/// op can only reference nodes that already exist. [`Graph::backward`]
/// walks the nodes once in reverse.
#[derive(Debug)]
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: Vec<Var>,
    fault: Option<Fault>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every parameter leaf of a graph.
#[derive(Debug, Clone)]
pub struct GradientMap<T> {
    grads: BTreeMap<Var, Tensor<T>>,
}

impl<T: Scalar> GradientMap<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(&v)
    }

    /// Panicking lookup for callers that know `v` is a parameter.
    pub fn wrt(&self, v: Var) -> &Tensor<T> {
        self.grads
            .get(&v)
            .unwrap_or_else(|| panic!("{v:?} is not a parameter of this graph"))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor<T>)> {
        self.grads.iter().map(|(v, t)| (*v, t))
    }

    pub fn remove(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.remove(&v)
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Scalar>(x: T) -> T {
    // log(1 + e^x) = max(x, 0) + log1p(e^-|x|)
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            fault: None,
        }
    }

    pub fn with_fault(fault: Fault) -> Self {
        Self {
            fault: Some(fault),
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn params(&self) -> &[Var] {
        &self.params
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var {
        let id = Var(self.nodes.len());
        self.nodes.push(Node { value, op, tracked });
        id
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Records a differentiable leaf; [`Graph::backward`] reports its gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        let v = self.push(value, Op::Param, true);
        self.params.push(v);
        v
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a * b^T` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (br, bc) = self.value(b).dims2()?;
        let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(mismatch("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            trans_b,
            &mut out,
            false,
        );
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMul { a, b, trans_b }, tracked))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).transpose2()?;
        let tracked = self.tracked(a);
        Ok(self.push(t, Op::Transpose(a), tracked))
    }

    fn zip(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "add", |x, y| x + y)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(t, Op::Add(a, b), tracked))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "sub", |x, y| x - y)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(t, Op::Sub(a, b), tracked))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "mul", |x, y| x * y)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(t, Op::Mul(a, b), tracked))
    }

    fn row_broadcast(&mut self, x: Var, row: Var, op: RowOp) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let rv = self.value(row);
        let row_ok = matches!(rv.shape(), [n] if *n == c) || matches!(rv.shape(), [1, n] if *n == c);
        if !row_ok {
            return Err(mismatch("row_broadcast", self.shape(x), self.shape(row)));
        }
        let xs = self.value(x).data();
        let rs = rv.data();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                let (a, b) = (xs[i * c + j], rs[j]);
                out.push(match op {
                    RowOp::Add => a + b,
                    RowOp::Sub => a - b,
                    RowOp::Mul => a * b,
                });
            }
        }
        let tracked = self.tracked(x) || self.tracked(row);
        Ok(self.push(Tensor::new([r, c], out)?, Op::Row { x, row, op }, tracked))
    }

    /// Adds a length-`c` (or `1 x c`) row to every row of an `r x c` tensor.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_broadcast(x, row, RowOp::Add)
    }

    pub fn sub_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_broadcast(x, row, RowOp::Sub)
    }

    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_broadcast(x, row, RowOp::Mul)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let t = self.value(x).map(|v| v * c);
        let tracked = self.tracked(x);
        Ok(self.push(t, Op::Scale(x, c), tracked))
    }

    /// Multiplies `x` by the single element of `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(mismatch("scale_by", self.shape(x), self.shape(s)));
        }
        let c = self.value(s).data()[0];
        let t = self.value(x).map(|v| v * c);
        let tracked = self.tracked(x) || self.tracked(s);
        Ok(self.push(t, Op::ScaleBy { x, s }, tracked))
    }

    pub fn unary(&mut self, x: Var, kind: Unary) -> Result<Var> {
        let input = self.value(x);
        if kind == Unary::Log {
            if let Some((index, &value)) = input.data().iter().enumerate().find(|(_, v)| !(**v > T::zero())) {
                return Err(TensorError::Domain {
                    op: "log",
                    index,
                    value: value.to_f64().unwrap_or(f64::NAN),
                });
            }
        }
        let t = match kind {
            Unary::Exp => input.map(T::exp),
            Unary::Log | Unary::LogUnchecked => input.map(T::ln),
            Unary::Sigmoid => input.map(sigmoid),
            Unary::Softplus => input.map(softplus),
            Unary::Relu => input.map(|v| v.max(T::zero())),
        };
        let tracked = self.tracked(x);
        Ok(self.push(t, Op::Unary(x, kind), tracked))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Log)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Softplus)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Relu)
    }

    /// Row-wise softmax; `mask` holds `0` for visible and `-inf` for hidden
    /// entries.
    pub fn row_softmax(&mut self, x: Var, mask: Option<&Tensor<T>>) -> Result<Var> {
        let t = softmax_rows(self.value(x), mask)?;
        let tracked = self.tracked(x);
        Ok(self.push(t, Op::Softmax(x), tracked))
    }

    /// Column-wise maximum as a `1 x c` constant: no gradient flows back.
    pub fn column_max_stopped(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if r == 0 {
            return Err(TensorError::Empty("column_max_stopped"));
        }
        let xs = self.value(x).data();
        let mut m = xs[..c].to_vec();
        for i in 1..r {
            for (mj, &v) in m.iter_mut().zip(&xs[i * c..(i + 1) * c]) {
                *mj = mj.max(v);
            }
        }
        Ok(self.push(Tensor::new([1, c], m)?, Op::Constant, false))
    }

    fn column_shift_check(&self, x: Var, shifts: &[i64], op: &'static str) -> Result<(usize, usize)> {
        let (r, c) = self.value(x).dims2()?;
        if shifts.len() != c {
            return Err(mismatch(op, self.shape(x), &[shifts.len()]));
        }
        Ok((r, c))
    }

    /// `exp(x_ij - k_j ln 2)` with integer column shifts `k`. Changing `k_j`
    /// rescales column `j` by an exact power of two.
    pub fn exp_pow2_shifted(&mut self, x: Var, shifts: &[i64]) -> Result<Var> {
        let (r, c) = self.column_shift_check(x, shifts, "exp_pow2_shifted")?;
        let xs = self.value(x).data();
        let out = (0..r * c).map(|i| exp_shifted(xs[i], shifts[i % c])).collect();
        let tracked = self.tracked(x);
        Ok(self.push(Tensor::new([r, c], out)?, Op::ExpShifted(x), tracked))
    }

    /// `ln(x_ij) + k_j ln 2`; the inverse of [`Graph::exp_pow2_shifted`].
    /// Rejects non-positive inputs.
    pub fn log_pow2_unshifted(&mut self, x: Var, shifts: &[i64]) -> Result<Var> {
        let (r, c) = self.column_shift_check(x, shifts, "log_pow2_unshifted")?;
        let xs = self.value(x).data();
        if let Some((index, &value)) = xs.iter().enumerate().find(|(_, v)| !(**v > T::zero())) {
            return Err(TensorError::Domain {
                op: "log",
                index,
                value: value.to_f64().unwrap_or(f64::NAN),
            });
        }
        let out = (0..r * c).map(|i| log_unshifted(xs[i], shifts[i % c])).collect();
        let tracked = self.tracked(x);
        Ok(self.push(Tensor::new([r, c], out)?, Op::LogUnshifted(x), tracked))
    }

    /// Per-row `(x - mean) / sqrt(var + eps) * gain + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if c < 2 {
            return Err(TensorError::Invalid(format!("layer_norm needs at least 2 columns, got {c}")));
        }
        for p in [gain, bias] {
            if self.value(p).numel() != c {
                return Err(mismatch("layer_norm", self.shape(x), self.shape(p)));
            }
        }
        let xs = self.value(x).data();
        let (gs, bs) = (self.value(gain).data(), self.value(bias).data());
        let n = T::from_usize(c).unwrap();
        let mut out = Vec::with_capacity(r * c);
        let mut means = Vec::with_capacity(r);
        let mut rstds = Vec::with_capacity(r);
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rstd = T::one() / (var + eps).sqrt();
            for j in 0..c {
                out.push((row[j] - mean) * rstd * gs[j] + bs[j]);
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let tracked = self.tracked(x) || self.tracked(gain) || self.tracked(bias);
        Ok(self.push(
            Tensor::new([r, c], out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean: means,
                rstd: rstds,
            },
            tracked,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if start + len > c {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: start + len,
                bound: c,
            });
        }
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&xs[i * c + start..i * c + start + len]);
        }
        let tracked = self.tracked(x);
        Ok(self.push(Tensor::new([r, len], out)?, Op::SliceCols { x, start }, tracked))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(TensorError::Empty("concat_cols"))?;
        let (r, _) = self.value(first).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.value(p).dims2()?;
            if pr != r {
                return Err(mismatch("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(pc);
        }
        let c: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let tracked = parts.iter().any(|&p| self.tracked(p));
        Ok(self.push(Tensor::new([r, c], out)?, Op::ConcatCols(parts.to_vec()), tracked))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        let tracked = self.tracked(x);
        Ok(self.push(t, Op::Reshape(x), tracked))
    }

    /// Selects rows of a `rows x c` table (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, c) = self.value(table).dims2()?;
        let ts = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: id,
                    bound: rows,
                });
            }
            out.extend_from_slice(&ts[id * c..(id + 1) * c]);
        }
        let tracked = self.tracked(table);
        Ok(self.push(
            Tensor::new([ids.len(), c], out)?,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            tracked,
        ))
    }

    /// Mean cross-entropy of row-wise softmax(logits) against the targets;
    /// rows whose target is `None` are skipped.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (r, c) = self.value(logits).dims2()?;
        if targets.len() != r {
            return Err(mismatch("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        let xs = self.value(logits).data();
        let mut probs = vec![T::zero(); r * c];
        let mut total = T::zero();
        let mut count = 0usize;
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
            }
            if let Some(t) = targets[i] {
                if t >= c {
                    return Err(TensorError::IndexOutOfRange {
                        op: "cross_entropy",
                        index: t,
                        bound: c,
                    });
                }
                total = total + (lse - row[t]);
                count += 1;
            }
        }
        if count == 0 {
            return Err(TensorError::Empty("cross_entropy"));
        }
        let loss = total / T::from_usize(count).unwrap();
        let tracked = self.tracked(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs: Tensor::new([r, c], probs)?,
                count,
            },
            tracked,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        let tracked = self.tracked(x);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), tracked))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.numel() == 0 {
            return Err(TensorError::Empty("mean"));
        }
        let s = t.sum() / T::from_usize(t.numel()).unwrap();
        let tracked = self.tracked(x);
        Ok(self.push(Tensor::scalar(s), Op::Mean(x), tracked))
    }

    /// Gradient of a scalar node with respect to every parameter leaf.
    pub fn backward(&self, loss: Var) -> Result<GradientMap<T>> {
        let t = self.value(loss);
        if t.numel() != 1 {
            return Err(TensorError::NonScalarLoss(t.shape().to_vec()));
        }
        self.vjp(loss, Tensor::ones(t.shape().to_vec()))
    }

    /// Vector-Jacobian product: pulls `cotangent` (shaped like `output`) back
    /// to every parameter leaf.
    pub fn vjp(&self, output: Var, cotangent: Tensor<T>) -> Result<GradientMap<T>> {
        if cotangent.shape() != self.shape(output) {
            return Err(mismatch("vjp", self.shape(output), cotangent.shape()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(cotangent);
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Param) {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
        }
        let mut out = BTreeMap::new();
        for &p in &self.params {
            let g = if p.0 <= output.0 { grads[p.0].take() } else { None };
            out.insert(p, g.unwrap_or_else(|| Tensor::zeros(self.shape(p).to_vec())));
        }
        Ok(GradientMap { grads: out })
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Tensor<T>>], v: Var) -> Option<&'a mut [T]> {
        if !self.tracked(v) {
            return None;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.shape(v).to_vec()));
        }
        slot.as_mut().map(Tensor::data_mut)
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        let y = &node.value;
        match &node.op {
            Op::Param | Op::Constant => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let n = y.shape()[1];
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.slot(grads, *a) {
                    // ga += g * op(b)^T
                    gemm(m, n, k, gd, false, bv, !trans_b, ga, true);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    if *trans_b {
                        // b is n x k: gb += g^T a
                        gemm(n, m, k, gd, true, av, false, gb, true);
                    } else {
                        // b is k x n: gb += a^T g
                        gemm(k, m, n, av, true, gd, false, gb, true);
                    }
                }
            }
            Op::Transpose(a) => {
                let (r, c) = y.dims2().unwrap();
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..r {
                        for j in 0..c {
                            ga[j * r + i] = ga[j * r + i] + gd[i * c + j];
                        }
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -T::one() } else { T::one() };
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(gd).for_each(|(s, &v)| *s = *s + v);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gb.iter_mut().zip(gd).for_each(|(s, &v)| *s = *s + sign * v);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.slot(grads, *a) {
                    for ((s, &v), &o) in ga.iter_mut().zip(gd).zip(bv) {
                        *s = *s + v * o;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for ((s, &v), &o) in gb.iter_mut().zip(gd).zip(av) {
                        *s = *s + v * o;
                    }
                }
            }
            Op::Row { x, row, op } => {
                let (r, c) = y.dims2().unwrap();
                let (xv, rv) = (self.value(*x).data(), self.value(*row).data());
                if let Some(gx) = self.slot(grads, *x) {
                    for i in 0..r {
                        for j in 0..c {
                            let v = gd[i * c + j];
                            gx[i * c + j] = gx[i * c + j]
                                + match op {
                                    RowOp::Mul => v * rv[j],
                                    _ => v,
                                };
                        }
                    }
                }
                if let Some(gr) = self.slot(grads, *row) {
                    for i in 0..r {
                        for j in 0..c {
                            let v = gd[i * c + j];
                            gr[j] = gr[j]
                                + match op {
                                    RowOp::Add => v,
                                    RowOp::Sub => -v,
                                    RowOp::Mul => v * xv[i * c + j],
                                };
                        }
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().zip(gd).for_each(|(s, &v)| *s = *s + v * *c);
                }
            }
            Op::ScaleBy { x, s } => {
                let c = self.value(*s).data()[0];
                let xv = self.value(*x).data();
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().zip(gd).for_each(|(acc, &v)| *acc = *acc + v * c);
                }
                if let Some(gs) = self.slot(grads, *s) {
                    let dot: T = gd.iter().zip(xv).map(|(&a, &b)| a * b).sum();
                    gs[0] = gs[0] + dot;
                }
            }
            Op::Unary(x, kind) => {
                let xv = self.value(*x).data();
                let yv = y.data();
                if let Some(gx) = self.slot(grads, *x) {
                    let terms = gx.iter_mut().zip(gd).zip(xv.iter().zip(yv));
                    match kind {
                        Unary::Exp => terms.for_each(|((s, &g), (_, &y))| *s = *s + g * y),
                        Unary::Log | Unary::LogUnchecked => terms.for_each(|((s, &g), (&x, _))| *s = *s + g / x),
                        Unary::Sigmoid => terms.for_each(|((s, &g), (_, &y))| *s = *s + g * y * (T::one() - y)),
                        Unary::Softplus => terms.for_each(|((s, &g), (&x, _))| *s = *s + g * sigmoid(x)),
                        Unary::Relu => terms.for_each(|((s, &g), (&x, _))| {
                            if x > T::zero() {
                                *s = *s + g;
                            }
                        }),
                    }
                }
            }
            Op::Softmax(x) => {
                let (r, c) = y.dims2().unwrap();
                let sign = if self.fault == Some(Fault::SoftmaxBackwardSign) {
                    -T::one()
                } else {
                    T::one()
                };
                if let Some(gx) = self.slot(grads, *x) {
                    // (diag(a) - a a^T) g, row by row
                    for i in 0..r {
                        let a = &y.data()[i * c..(i + 1) * c];
                        let gr = &gd[i * c..(i + 1) * c];
                        let dot: T = a.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                        for j in 0..c {
                            gx[i * c + j] = gx[i * c + j] + sign * a[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::ExpShifted(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    for ((s, &v), &e) in gx.iter_mut().zip(gd).zip(y.data()) {
                        *s = *s + v * e;
                    }
                }
            }
            Op::LogUnshifted(x) => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.slot(grads, *x) {
                    for ((s, &v), &w) in gx.iter_mut().zip(gd).zip(xv) {
                        *s = *s + v / w;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            } => {
                let (r, c) = y.dims2().unwrap();
                let xv = self.value(*x).data();
                let gain_v = self.value(*gain).data();
                let n = T::from_usize(c).unwrap();
                let xhat = |i: usize, j: usize| (xv[i * c + j] - mean[i]) * rstd[i];
                if let Some(gg) = self.slot(grads, *gain) {
                    for i in 0..r {
                        for j in 0..c {
                            gg[j] = gg[j] + gd[i * c + j] * xhat(i, j);
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *bias) {
                    for i in 0..r {
                        for j in 0..c {
                            gb[j] = gb[j] + gd[i * c + j];
                        }
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    for i in 0..r {
                        let mut mean_g = T::zero();
                        let mut mean_gx = T::zero();
                        for j in 0..c {
                            let gh = gd[i * c + j] * gain_v[j];
                            mean_g = mean_g + gh;
                            mean_gx = mean_gx + gh * xhat(i, j);
                        }
                        mean_g = mean_g / n;
                        mean_gx = mean_gx / n;
                        for j in 0..c {
                            let gh = gd[i * c + j] * gain_v[j];
                            gx[i * c + j] = gx[i * c + j] + rstd[i] * (gh - mean_g - xhat(i, j) * mean_gx);
                        }
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let (r, len) = y.dims2().unwrap();
                let c = self.shape(*x)[1];
                if let Some(gx) = self.slot(grads, *x) {
                    for i in 0..r {
                        for j in 0..len {
                            let k = i * c + start + j;
                            gx[k] = gx[k] + gd[i * len + j];
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (r, c) = y.dims2().unwrap();
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    if let Some(gp) = self.slot(grads, p) {
                        for i in 0..r {
                            for j in 0..w {
                                gp[i * w + j] = gp[i * w + j] + gd[i * c + offset + j];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().zip(gd).for_each(|(s, &v)| *s = *s + v);
                }
            }
            Op::Gather { table, ids } => {
                let c = y.shape()[1];
                if let Some(gt) = self.slot(grads, *table) {
                    for (i, &id) in ids.iter().enumerate() {
                        for j in 0..c {
                            gt[id * c + j] = gt[id * c + j] + gd[i * c + j];
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let c = probs.shape()[1];
                let scale = gd[0] / T::from_usize(*count).unwrap();
                if let Some(gl) = self.slot(grads, *logits) {
                    for (i, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        for j in 0..c {
                            let onehot = if j == t { T::one() } else { T::zero() };
                            gl[i * c + j] = gl[i * c + j] + scale * (probs.data()[i * c + j] - onehot);
                        }
                    }
                }
            }
            Op::Sum(x) | Op::Mean(x) => {
                let n = self.value(*x).numel();
                let v = if matches!(node.op, Op::Mean(_)) {
                    gd[0] / T::from_usize(n).unwrap()
                } else {
                    gd[0]
                };
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().for_each(|s| *s = *s + v);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::<f64>::new();
        let w = g.param(Tensor::from_fn([2, 3], |i| i[1] as f64));
        let s = g.sum(w).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.wrt(w).data().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn square_gradient_is_twice_w() {
        let mut g = Graph::<f64>::new();
        let w = g.param(Tensor::new([1, 1], vec![1.5]).unwrap());
        let sq = g.mul(w, w).unwrap();
        let s = g.sum(sq).unwrap();
        assert_eq!(g.backward(s).unwrap().wrt(w).data(), &[3.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::<f64>::new();
        let w = g.param(Tensor::zeros([2, 2]));
        assert!(matches!(g.backward(w), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn unused_param_gets_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.param(Tensor::ones([2]));
        let b = g.param(Tensor::ones([3]));
        let s = g.sum(a).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(b).data(), &[0.0; 3]);
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new([2], vec![1.0, 0.0]).unwrap());
        assert!(matches!(g.log(x), Err(TensorError::Domain { index: 1, .. })));
        let y = g.unary(x, Unary::LogUnchecked).unwrap();
        assert_eq!(g.value(y).data()[1], f64::NEG_INFINITY);
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::zeros([1]));
        let e = g.exp(z).unwrap();
        assert_eq!(g.value(e).data(), &[1.0]);
        let s = g.sigmoid(z).unwrap();
        assert_eq!(g.value(s).data(), &[0.5]);
        for x in [-3.0, 0.0, 7.0] {
            let v = g.constant(Tensor::scalar(x));
            let e = g.exp(v).unwrap();
            let l = g.log(e).unwrap();
            assert!((g.value(l).data()[0] - x).abs() <= 1e-12);
        }
    }

    #[test]
    fn column_max_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 0.0]]).unwrap());
        let m = g.column_max_stopped(x).unwrap();
        assert_eq!(g.value(m).data(), &[3.0, 2.0]);
        let c = g.constant(Tensor::full([3, 2], 4.0));
        let mc = g.column_max_stopped(c).unwrap();
        assert_eq!(g.value(mc).data(), &[4.0, 4.0]);

        let shifted = g.sub_row(x, m).unwrap();
        let s = g.sum(shifted).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).data(), &[1.0; 4]);
    }

    #[test]
    fn pow2_shifted_pair_round_trips() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_rows(&[vec![0.5, -2.0], vec![3.0, 40.0]]).unwrap());
        let shifts = [2, 58];
        let e = g.exp_pow2_shifted(x, &shifts).unwrap();
        let want = (3.0 - 2.0 * std::f64::consts::LN_2).exp();
        assert!((g.value(e).at(&[1, 0]) - want).abs() < 1e-15);
        let l = g.log_pow2_unshifted(e, &shifts).unwrap();
        for (a, b) in g.value(l).data().iter().zip(g.value(x).data()) {
            assert!((a - b).abs() < 1e-13);
        }
        let s = g.sum(l).unwrap();
        let grads = g.backward(s).unwrap();
        for v in grads.wrt(x).data() {
            assert!((v - 1.0).abs() < 1e-13);
        }
        assert!(g.log_pow2_unshifted(x, &shifts).is_err());
        assert!(g.exp_pow2_shifted(x, &[1]).is_err());
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full([2, 4], 3.0));
        let gain = g.constant(Tensor::ones([4]));
        let bias = g.constant(Tensor::zeros([4]));
        let y = g.layer_norm(x, gain, bias, 1e-6).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_rejects_single_column() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros([2, 1]));
        let p = g.constant(Tensor::ones([1]));
        assert!(g.layer_norm(x, p, p, 1e-6).is_err());
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut g = Graph::<f64>::new();
        let logits = g.param(Tensor::zeros([3, 5]));
        let loss = g.cross_entropy(logits, &[Some(1), None, Some(4)]).unwrap();
        assert!((g.value(loss).data()[0] - 5f64.ln()).abs() < 1e-15);
        let grads = g.backward(loss).unwrap();
        let gl = grads.wrt(logits);
        assert_eq!(gl.row(1), &[0.0; 5]);
        assert!((gl.row(0)[1] - (0.2 - 1.0) / 2.0).abs() < 1e-15);
    }
}
