use std::cell::RefCell;

use rand::Rng;

use crate::error::{Error, Result};

use super::{Shape, Tensor};

/// How a binary elementwise op pairs its operands.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    /// Identical shapes.
    None,
    /// Left is a matrix, right is a row vector applied to every row.
    VecRhs,
    /// Left is a row vector applied to every row of the right matrix.
    VecLhs,
}

#[derive(Clone, Copy, Debug)]
enum BinKind {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
}

enum Op {
    MatMul,
    MatVec,
    Transpose,
    Bin { kind: BinKind, broadcast: Broadcast },
    Tanh,
    Sigmoid,
    Scale(f64),
    Softmax { axis: usize },
    Reduce { kind: ReduceKind, axis: usize },
    Concat { axis: usize },
    StackRows,
    Row { index: usize },
    Slice { start: usize, len: usize },
    GatherRows { indices: Vec<usize>, skip: Option<usize> },
    Dropout { mask: Vec<f64> },
    CrossEntropy { targets: Vec<usize>, pad: Option<usize>, probs: Vec<f64>, counted: usize },
}

struct Entry {
    op: Op,
    inputs: Vec<Tensor>,
    output: Tensor,
}

/// Ordered record of executed operations.
///
/// Replaying the record in reverse execution order accumulates the same
/// gradients as any topological order would: every op is recorded after all
/// of its inputs, so by the time an entry's backward runs, the full upstream
/// gradient of its output has already been deposited.
pub struct Tape {
    entries: RefCell<Vec<Entry>>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    /// Tape that records gradients.
    pub fn new() -> Self {
        Tape { entries: RefCell::new(Vec::new()), grad_enabled: true }
    }

    /// Tape that records nothing: forward values only. Evaluation paths use
    /// this so inference never touches gradient state.
    pub fn no_grad() -> Self {
        Tape { entries: RefCell::new(Vec::new()), grad_enabled: false }
    }

    pub fn len(&self) -> usize {
        self.entries.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.borrow().is_empty()
    }

    fn record(&self, op: Op, inputs: Vec<Tensor>, output: &Tensor) {
        if output.requires_grad() {
            self.entries.borrow_mut().push(Entry { op, inputs, output: output.clone() });
        }
    }

    fn wants_grad(&self, inputs: &[&Tensor]) -> bool {
        self.grad_enabled && inputs.iter().any(|t| t.requires_grad())
    }

    // ── forward ops ──────────────────────────────────────────────────

    /// Standard matrix product `[m x k] @ [k x n] -> [m x n]`.
    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (Shape::Matrix(m, k), Shape::Matrix(k2, n)) = (a.shape(), b.shape()) else {
            return Err(Error::Dimension(format!(
                "matmul needs two matrices, got {} and {}",
                a.shape(),
                b.shape()
            )));
        };
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner dimensions disagree: {} vs {}",
                a.shape(),
                b.shape()
            )));
        }
        let ad = a.data();
        let bd = b.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for (p, &aip) in ad[i * k..(i + 1) * k].iter().enumerate() {
                let brow = &bd[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, &bpj) in orow.iter_mut().zip(brow) {
                    *o += aip * bpj;
                }
            }
        }
        drop(ad);
        drop(bd);
        let res = Tensor::result(Shape::Matrix(m, n), out, self.wants_grad(&[a, b]));
        self.record(Op::MatMul, vec![a.clone(), b.clone()], &res);
        Ok(res)
    }

    /// Matrix-vector product `[m x k] @ [k] -> [m]`.
    pub fn matvec(&self, a: &Tensor, v: &Tensor) -> Result<Tensor> {
        let (Shape::Matrix(m, k), Shape::Vector(k2)) = (a.shape(), v.shape()) else {
            return Err(Error::Dimension(format!(
                "matvec needs matrix and vector, got {} and {}",
                a.shape(),
                v.shape()
            )));
        };
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matvec inner dimensions disagree: {} vs {}",
                a.shape(),
                v.shape()
            )));
        }
        let ad = a.data();
        let vd = v.data();
        let mut out = vec![0.0; m];
        for (i, o) in out.iter_mut().enumerate() {
            *o = ad[i * k..(i + 1) * k].iter().zip(vd.iter()).map(|(x, y)| x * y).sum();
        }
        drop(ad);
        drop(vd);
        let res = Tensor::result(Shape::Vector(m), out, self.wants_grad(&[a, v]));
        self.record(Op::MatVec, vec![a.clone(), v.clone()], &res);
        Ok(res)
    }

    pub fn transpose(&self, a: &Tensor) -> Result<Tensor> {
        let Shape::Matrix(r, c) = a.shape() else {
            return Err(Error::Dimension(format!("transpose needs a matrix, got {}", a.shape())));
        };
        let ad = a.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = ad[i * c + j];
            }
        }
        drop(ad);
        let res = Tensor::result(Shape::Matrix(c, r), out, self.wants_grad(&[a]));
        self.record(Op::Transpose, vec![a.clone()], &res);
        Ok(res)
    }

    fn binary(&self, kind: BinKind, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let broadcast = match (a.shape(), b.shape()) {
            (x, y) if x == y => Broadcast::None,
            (Shape::Matrix(_, c), Shape::Vector(n)) if c == n => Broadcast::VecRhs,
            (Shape::Vector(n), Shape::Matrix(_, c)) if c == n => Broadcast::VecLhs,
            (x, y) => {
                return Err(Error::Dimension(format!(
                    "elementwise op on incompatible shapes {x} and {y}"
                )))
            }
        };
        let ad = a.data();
        let bd = b.data();
        let apply = |x: f64, y: f64| match kind {
            BinKind::Add => x + y,
            BinKind::Sub => x - y,
            BinKind::Mul => x * y,
        };
        let (shape, out) = match broadcast {
            Broadcast::None => {
                (a.shape(), ad.iter().zip(bd.iter()).map(|(&x, &y)| apply(x, y)).collect())
            }
            Broadcast::VecRhs => {
                let (r, c) = a.shape().rows_cols();
                let mut out = Vec::with_capacity(r * c);
                for i in 0..r {
                    for j in 0..c {
                        out.push(apply(ad[i * c + j], bd[j]));
                    }
                }
                (a.shape(), out)
            }
            Broadcast::VecLhs => {
                let (r, c) = b.shape().rows_cols();
                let mut out = Vec::with_capacity(r * c);
                for i in 0..r {
                    for j in 0..c {
                        out.push(apply(ad[j], bd[i * c + j]));
                    }
                }
                (b.shape(), out)
            }
        };
        drop(ad);
        drop(bd);
        let res = Tensor::result(shape, out, self.wants_grad(&[a, b]));
        self.record(Op::Bin { kind, broadcast }, vec![a.clone(), b.clone()], &res);
        Ok(res)
    }

    /// Elementwise sum; one operand may be a vector broadcast across rows.
    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(BinKind::Sub, a, b)
    }

    /// Elementwise (Hadamard) product with the same broadcast rule as `add`.
    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(BinKind::Mul, a, b)
    }

    pub fn tanh(&self, a: &Tensor) -> Tensor {
        let out: Vec<f64> = a.data().iter().map(|v| v.tanh()).collect();
        let res = Tensor::result(a.shape(), out, self.wants_grad(&[a]));
        self.record(Op::Tanh, vec![a.clone()], &res);
        res
    }

    pub fn sigmoid(&self, a: &Tensor) -> Tensor {
        let out: Vec<f64> = a.data().iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
        let res = Tensor::result(a.shape(), out, self.wants_grad(&[a]));
        self.record(Op::Sigmoid, vec![a.clone()], &res);
        res
    }

    /// Multiply every element by a constant.
    pub fn scale(&self, a: &Tensor, factor: f64) -> Tensor {
        let out: Vec<f64> = a.data().iter().map(|v| v * factor).collect();
        let res = Tensor::result(a.shape(), out, self.wants_grad(&[a]));
        self.record(Op::Scale(factor), vec![a.clone()], &res);
        res
    }

    /// Numerically stable softmax along `axis` (max-subtracted).
    ///
    /// For a vector the axis must be 0. For a matrix, axis 0 normalizes each
    /// column, axis 1 each row; every normalized slice sums to 1.
    pub fn softmax(&self, a: &Tensor, axis: usize) -> Result<Tensor> {
        self.check_axis(a, axis, "softmax")?;
        let (r, c) = a.shape().rows_cols();
        let row_wise = a.shape().rank() == 1 || axis == 1;
        let ad = a.data();
        let mut out = vec![0.0; r * c];
        let (slices, len, stride, step) = if row_wise { (r, c, c, 1) } else { (c, r, 1, c) };
        for s in 0..slices {
            let base = if row_wise { s * stride } else { s };
            let mut max = f64::NEG_INFINITY;
            for i in 0..len {
                max = max.max(ad[base + i * step]);
            }
            let mut total = 0.0;
            for i in 0..len {
                let e = (ad[base + i * step] - max).exp();
                out[base + i * step] = e;
                total += e;
            }
            for i in 0..len {
                out[base + i * step] /= total;
            }
        }
        drop(ad);
        let res = Tensor::result(a.shape(), out, self.wants_grad(&[a]));
        self.record(Op::Softmax { axis }, vec![a.clone()], &res);
        Ok(res)
    }

    fn check_axis(&self, a: &Tensor, axis: usize, what: &str) -> Result<()> {
        let ok = match a.shape() {
            Shape::Vector(n) => axis == 0 && n > 0,
            Shape::Matrix(r, c) => axis < 2 && r > 0 && c > 0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Dimension(format!(
                "{what}: axis {axis} invalid or empty for shape {}",
                a.shape()
            )))
        }
    }

    /// Reduce along `axis`. For a matrix, axis 0 collapses the rows (sums
    /// down each column), axis 1 collapses the columns. A vector reduces to
    /// a scalar (axis 0).
    pub fn reduce(&self, kind: ReduceKind, a: &Tensor, axis: usize) -> Result<Tensor> {
        self.check_axis(a, axis, "reduce")?;
        let (out_shape, out) = match a.shape() {
            Shape::Vector(n) => {
                let total: f64 = a.data().iter().sum();
                let v = if kind == ReduceKind::Mean { total / n as f64 } else { total };
                (Shape::Vector(1), vec![v])
            }
            Shape::Matrix(r, c) => {
                let ad = a.data();
                if axis == 0 {
                    let mut out = vec![0.0; c];
                    for i in 0..r {
                        for (j, o) in out.iter_mut().enumerate() {
                            *o += ad[i * c + j];
                        }
                    }
                    if kind == ReduceKind::Mean {
                        out.iter_mut().for_each(|o| *o /= r as f64);
                    }
                    (Shape::Vector(c), out)
                } else {
                    let mut out = vec![0.0; r];
                    for (i, o) in out.iter_mut().enumerate() {
                        *o = ad[i * c..(i + 1) * c].iter().sum();
                        if kind == ReduceKind::Mean {
                            *o /= c as f64;
                        }
                    }
                    (Shape::Vector(r), out)
                }
            }
        };
        let res = Tensor::result(out_shape, out, self.wants_grad(&[a]));
        self.record(Op::Reduce { kind, axis }, vec![a.clone()], &res);
        Ok(res)
    }

    pub fn sum(&self, a: &Tensor, axis: usize) -> Result<Tensor> {
        self.reduce(ReduceKind::Sum, a, axis)
    }

    pub fn mean(&self, a: &Tensor, axis: usize) -> Result<Tensor> {
        self.reduce(ReduceKind::Mean, a, axis)
    }

    /// Sum of every element, as a scalar.
    pub fn sum_all(&self, a: &Tensor) -> Result<Tensor> {
        match a.shape() {
            Shape::Vector(_) => self.sum(a, 0),
            Shape::Matrix(_, _) => {
                let cols = self.sum(a, 0)?;
                self.sum(&cols, 0)
            }
        }
    }

    /// Concatenate along `axis`; every non-axis dimension must agree.
    /// Parts appear in argument order.
    pub fn concat(&self, parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::Usage("concat of zero tensors".into()));
        }
        let rank = parts[0].shape().rank();
        if parts.iter().any(|p| p.shape().rank() != rank) || axis >= rank {
            return Err(Error::Dimension(format!(
                "concat: axis {axis} invalid for mixed or rank-{rank} inputs"
            )));
        }
        let (shape, out) = match rank {
            1 => {
                let mut out = Vec::new();
                for p in parts {
                    out.extend_from_slice(&p.data());
                }
                (Shape::Vector(out.len()), out)
            }
            _ => {
                if axis == 0 {
                    let c = parts[0].shape().rows_cols().1;
                    let mut rows = 0;
                    for p in parts {
                        let (pr, pc) = p.shape().rows_cols();
                        if pc != c {
                            return Err(Error::Dimension(format!(
                                "concat axis 0: column counts differ, {} vs {}",
                                parts[0].shape(),
                                p.shape()
                            )));
                        }
                        rows += pr;
                    }
                    let mut out = Vec::with_capacity(rows * c);
                    for p in parts {
                        out.extend_from_slice(&p.data());
                    }
                    (Shape::Matrix(rows, c), out)
                } else {
                    let r = parts[0].shape().rows_cols().0;
                    let mut cols = 0;
                    for p in parts {
                        let (pr, pc) = p.shape().rows_cols();
                        if pr != r {
                            return Err(Error::Dimension(format!(
                                "concat axis 1: row counts differ, {} vs {}",
                                parts[0].shape(),
                                p.shape()
                            )));
                        }
                        cols += pc;
                    }
                    let mut out = Vec::with_capacity(r * cols);
                    for i in 0..r {
                        for p in parts {
                            let pc = p.shape().rows_cols().1;
                            out.extend_from_slice(&p.data()[i * pc..(i + 1) * pc]);
                        }
                    }
                    (Shape::Matrix(r, cols), out)
                }
            }
        };
        let refs: Vec<&Tensor> = parts.to_vec();
        let res = Tensor::result(shape, out, self.wants_grad(&refs));
        self.record(Op::Concat { axis }, parts.iter().map(|p| (*p).clone()).collect(), &res);
        Ok(res)
    }

    /// Stack rank-1 vectors of equal length into a `[T x d]` matrix.
    pub fn stack_rows(&self, parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::Usage("stack_rows of zero tensors".into()));
        }
        let Shape::Vector(d) = parts[0].shape() else {
            return Err(Error::Dimension(format!(
                "stack_rows needs vectors, got {}",
                parts[0].shape()
            )));
        };
        let mut out = Vec::with_capacity(parts.len() * d);
        for p in parts {
            if p.shape() != Shape::Vector(d) {
                return Err(Error::Dimension(format!(
                    "stack_rows: row shapes differ, {} vs {}",
                    parts[0].shape(),
                    p.shape()
                )));
            }
            out.extend_from_slice(&p.data());
        }
        let refs: Vec<&Tensor> = parts.to_vec();
        let res = Tensor::result(Shape::Matrix(parts.len(), d), out, self.wants_grad(&refs));
        self.record(Op::StackRows, parts.iter().map(|p| (*p).clone()).collect(), &res);
        Ok(res)
    }

    /// Row `index` of a matrix, as a vector.
    pub fn row(&self, a: &Tensor, index: usize) -> Result<Tensor> {
        let Shape::Matrix(r, c) = a.shape() else {
            return Err(Error::Dimension(format!("row() needs a matrix, got {}", a.shape())));
        };
        if index >= r {
            return Err(Error::Dimension(format!("row {index} out of range for {}", a.shape())));
        }
        let out = a.data()[index * c..(index + 1) * c].to_vec();
        let res = Tensor::result(Shape::Vector(c), out, self.wants_grad(&[a]));
        self.record(Op::Row { index }, vec![a.clone()], &res);
        Ok(res)
    }

    /// Contiguous slice `[start, start+len)` of a vector.
    pub fn slice(&self, a: &Tensor, start: usize, len: usize) -> Result<Tensor> {
        let Shape::Vector(n) = a.shape() else {
            return Err(Error::Dimension(format!("slice() needs a vector, got {}", a.shape())));
        };
        if start + len > n {
            return Err(Error::Dimension(format!(
                "slice [{start}, {}) out of range for {}",
                start + len,
                a.shape()
            )));
        }
        let out = a.data()[start..start + len].to_vec();
        let res = Tensor::result(Shape::Vector(len), out, self.wants_grad(&[a]));
        self.record(Op::Slice { start, len }, vec![a.clone()], &res);
        Ok(res)
    }

    /// Gather rows of a matrix by index: `out[t] = a[indices[t]]`. Gradient
    /// accumulates per occurrence; rows equal to `skip` receive none.
    pub fn gather_rows(&self, a: &Tensor, indices: &[usize], skip: Option<usize>) -> Result<Tensor> {
        let Shape::Matrix(r, c) = a.shape() else {
            return Err(Error::Dimension(format!("gather_rows needs a matrix, got {}", a.shape())));
        };
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return Err(Error::Data(format!("gather index {bad} out of range for {}", a.shape())));
        }
        let ad = a.data();
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            out.extend_from_slice(&ad[i * c..(i + 1) * c]);
        }
        drop(ad);
        let res = Tensor::result(Shape::Matrix(indices.len(), c), out, self.wants_grad(&[a]));
        self.record(Op::GatherRows { indices: indices.to_vec(), skip }, vec![a.clone()], &res);
        Ok(res)
    }

    /// Inverted dropout: in training mode each element is zeroed with
    /// probability `p` and survivors are scaled by `1/(1-p)`; in eval mode
    /// the input passes through untouched (bitwise identity).
    pub fn dropout<R: Rng>(
        &self,
        a: &Tensor,
        p: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Tensor> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Parameter(format!("dropout probability {p} outside [0, 1)")));
        }
        if !training || p == 0.0 {
            // Identity, but still a node so the graph stays uniform.
            return Ok(self.scale(a, 1.0));
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> =
            (0..a.numel()).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect();
        let out: Vec<f64> = a.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let res = Tensor::result(a.shape(), out, self.wants_grad(&[a]));
        self.record(Op::Dropout { mask }, vec![a.clone()], &res);
        Ok(res)
    }

    /// Mean negative log-softmax probability of the target class per row,
    /// skipping rows whose target equals `pad`. Logits are `[batch x V]`.
    pub fn cross_entropy_from_logits(
        &self,
        logits: &Tensor,
        targets: &[usize],
        pad: Option<usize>,
    ) -> Result<Tensor> {
        let Shape::Matrix(b, v) = logits.shape() else {
            return Err(Error::Dimension(format!(
                "cross entropy needs [batch x V] logits, got {}",
                logits.shape()
            )));
        };
        if targets.len() != b {
            return Err(Error::Dimension(format!(
                "cross entropy: {} logit rows but {} targets",
                b,
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Data(format!("target index {bad} out of range for vocab {v}")));
        }
        let ld = logits.data();
        let mut probs = vec![0.0; b * v];
        let mut total = 0.0;
        let mut counted = 0usize;
        for i in 0..b {
            let rowd = &ld[i * v..(i + 1) * v];
            let max = rowd.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (j, &x) in rowd.iter().enumerate() {
                let e = (x - max).exp();
                probs[i * v + j] = e;
                denom += e;
            }
            for j in 0..v {
                probs[i * v + j] /= denom;
            }
            if pad == Some(targets[i]) {
                continue;
            }
            total += denom.ln() + max - rowd[targets[i]];
            counted += 1;
        }
        drop(ld);
        if counted == 0 {
            return Err(Error::Data("cross entropy: every position is padding".into()));
        }
        let res =
            Tensor::result(Shape::Vector(1), vec![total / counted as f64], self.wants_grad(&[logits]));
        self.record(
            Op::CrossEntropy { targets: targets.to_vec(), pad, probs, counted },
            vec![logits.clone()],
            &res,
        );
        Ok(res)
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Accumulate `d(loss)/d(t)` into the grad buffer of every
    /// `requires_grad` tensor reachable from `loss`, by replaying the tape
    /// in reverse execution order. Calling twice accumulates twice.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        if loss.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {}",
                loss.shape()
            )));
        }
        if !loss.requires_grad() {
            return Err(Error::Usage(
                "backward on a tensor with no gradient path (no-grad tape or constant inputs)"
                    .into(),
            ));
        }
        loss.accumulate_grad(&[1.0]);
        for entry in self.entries.borrow().iter().rev() {
            entry.backward();
        }
        Ok(())
    }
}

impl Entry {
    fn backward(&self) {
        let g = self.output.grad();
        match &self.op {
            Op::MatMul => {
                let (a, b) = (&self.inputs[0], &self.inputs[1]);
                let (Shape::Matrix(m, k), Shape::Matrix(_, n)) = (a.shape(), b.shape()) else {
                    unreachable!()
                };
                a.with_grad(|da| {
                    let bd = b.data();
                    // da += g . b^T
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g[i * n + j] * bd[p * n + j];
                            }
                            da[i * k + p] += acc;
                        }
                    }
                });
                b.with_grad(|db| {
                    let ad = a.data();
                    // db += a^T . g
                    for p in 0..k {
                        for i in 0..m {
                            let aip = ad[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            let grow = &g[i * n..(i + 1) * n];
                            let drow = &mut db[p * n..(p + 1) * n];
                            for (d, &gj) in drow.iter_mut().zip(grow) {
                                *d += aip * gj;
                            }
                        }
                    }
                });
            }
            Op::MatVec => {
                let (a, v) = (&self.inputs[0], &self.inputs[1]);
                let Shape::Matrix(m, k) = a.shape() else { unreachable!() };
                a.with_grad(|da| {
                    let vd = v.data();
                    for i in 0..m {
                        let gi = g[i];
                        if gi == 0.0 {
                            continue;
                        }
                        let drow = &mut da[i * k..(i + 1) * k];
                        for (d, &vj) in drow.iter_mut().zip(vd.iter()) {
                            *d += gi * vj;
                        }
                    }
                });
                v.with_grad(|dv| {
                    let ad = a.data();
                    for i in 0..m {
                        let gi = g[i];
                        if gi == 0.0 {
                            continue;
                        }
                        let arow = &ad[i * k..(i + 1) * k];
                        for (d, &aij) in dv.iter_mut().zip(arow) {
                            *d += gi * aij;
                        }
                    }
                });
            }
            Op::Transpose => {
                let a = &self.inputs[0];
                let Shape::Matrix(r, c) = a.shape() else { unreachable!() };
                a.with_grad(|da| {
                    for i in 0..r {
                        for j in 0..c {
                            da[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Bin { kind, broadcast } => {
                let (a, b) = (&self.inputs[0], &self.inputs[1]);
                match kind {
                    BinKind::Add | BinKind::Sub => {
                        let sign = if matches!(kind, BinKind::Sub) { -1.0 } else { 1.0 };
                        match broadcast {
                            Broadcast::None => {
                                a.accumulate_grad(&g);
                                b.with_grad(|db| {
                                    for (d, &gi) in db.iter_mut().zip(&g) {
                                        *d += sign * gi;
                                    }
                                });
                            }
                            Broadcast::VecRhs => {
                                a.accumulate_grad(&g);
                                b.with_grad(|db| {
                                    let c = db.len();
                                    for (i, &gi) in g.iter().enumerate() {
                                        db[i % c] += sign * gi;
                                    }
                                });
                            }
                            Broadcast::VecLhs => {
                                a.with_grad(|da| {
                                    let c = da.len();
                                    for (i, &gi) in g.iter().enumerate() {
                                        da[i % c] += gi;
                                    }
                                });
                                b.with_grad(|db| {
                                    for (d, &gi) in db.iter_mut().zip(&g) {
                                        *d += sign * gi;
                                    }
                                });
                            }
                        }
                    }
                    BinKind::Mul => match broadcast {
                        Broadcast::None => {
                            a.with_grad(|da| {
                                let bd = b.data();
                                for ((d, &gi), &bi) in da.iter_mut().zip(&g).zip(bd.iter()) {
                                    *d += gi * bi;
                                }
                            });
                            b.with_grad(|db| {
                                let ad = a.data();
                                for ((d, &gi), &ai) in db.iter_mut().zip(&g).zip(ad.iter()) {
                                    *d += gi * ai;
                                }
                            });
                        }
                        Broadcast::VecRhs => {
                            a.with_grad(|da| {
                                let bd = b.data();
                                let c = bd.len();
                                for (i, (d, &gi)) in da.iter_mut().zip(&g).enumerate() {
                                    *d += gi * bd[i % c];
                                }
                            });
                            b.with_grad(|db| {
                                let ad = a.data();
                                let c = db.len();
                                for (i, &gi) in g.iter().enumerate() {
                                    db[i % c] += gi * ad[i];
                                }
                            });
                        }
                        Broadcast::VecLhs => {
                            a.with_grad(|da| {
                                let bd = b.data();
                                let c = da.len();
                                for (i, &gi) in g.iter().enumerate() {
                                    da[i % c] += gi * bd[i];
                                }
                            });
                            b.with_grad(|db| {
                                let ad = a.data();
                                let c = ad.len();
                                for (i, (d, &gi)) in db.iter_mut().zip(&g).enumerate() {
                                    *d += gi * ad[i % c];
                                }
                            });
                        }
                    },
                }
            }
            Op::Tanh => {
                let y = self.output.data();
                self.inputs[0].with_grad(|dx| {
                    for ((d, &gi), &yi) in dx.iter_mut().zip(&g).zip(y.iter()) {
                        *d += gi * (1.0 - yi * yi);
                    }
                });
            }
            Op::Sigmoid => {
                let y = self.output.data();
                self.inputs[0].with_grad(|dx| {
                    for ((d, &gi), &yi) in dx.iter_mut().zip(&g).zip(y.iter()) {
                        *d += gi * yi * (1.0 - yi);
                    }
                });
            }
            Op::Scale(f) => {
                self.inputs[0].with_grad(|dx| {
                    for (d, &gi) in dx.iter_mut().zip(&g) {
                        *d += f * gi;
                    }
                });
            }
            Op::Softmax { axis } => {
                let a = &self.inputs[0];
                let y = self.output.data();
                let (r, c) = a.shape().rows_cols();
                let row_wise = a.shape().rank() == 1 || *axis == 1;
                let (slices, len, stride, step) = if row_wise { (r, c, c, 1) } else { (c, r, 1, c) };
                a.with_grad(|dx| {
                    for s in 0..slices {
                        let base = if row_wise { s * stride } else { s };
                        let mut dot = 0.0;
                        for i in 0..len {
                            let idx = base + i * step;
                            dot += g[idx] * y[idx];
                        }
                        for i in 0..len {
                            let idx = base + i * step;
                            dx[idx] += y[idx] * (g[idx] - dot);
                        }
                    }
                });
            }
            Op::Reduce { kind, axis } => {
                let a = &self.inputs[0];
                match a.shape() {
                    Shape::Vector(n) => {
                        let f = if *kind == ReduceKind::Mean { 1.0 / n as f64 } else { 1.0 };
                        a.with_grad(|dx| {
                            for d in dx.iter_mut() {
                                *d += g[0] * f;
                            }
                        });
                    }
                    Shape::Matrix(r, c) => {
                        let over_rows = *axis == 0;
                        let f = if *kind == ReduceKind::Mean {
                            1.0 / if over_rows { r as f64 } else { c as f64 }
                        } else {
                            1.0
                        };
                        a.with_grad(|dx| {
                            for i in 0..r {
                                for j in 0..c {
                                    let gi = if over_rows { g[j] } else { g[i] };
                                    dx[i * c + j] += gi * f;
                                }
                            }
                        });
                    }
                }
            }
            Op::Concat { axis } => {
                let rank = self.inputs[0].shape().rank();
                if rank == 1 || *axis == 0 {
                    let mut offset = 0;
                    for p in &self.inputs {
                        let n = p.numel();
                        p.accumulate_grad(&g[offset..offset + n]);
                        offset += n;
                    }
                } else {
                    let r = self.inputs[0].shape().rows_cols().0;
                    let total_c = self.output.shape().rows_cols().1;
                    let mut col = 0;
                    for p in &self.inputs {
                        let pc = p.shape().rows_cols().1;
                        p.with_grad(|dp| {
                            for i in 0..r {
                                for j in 0..pc {
                                    dp[i * pc + j] += g[i * total_c + col + j];
                                }
                            }
                        });
                        col += pc;
                    }
                }
            }
            Op::StackRows => {
                let d = self.inputs[0].numel();
                for (t, p) in self.inputs.iter().enumerate() {
                    p.accumulate_grad(&g[t * d..(t + 1) * d]);
                }
            }
            Op::Row { index } => {
                let a = &self.inputs[0];
                let c = a.shape().rows_cols().1;
                a.with_grad(|dx| {
                    for (j, &gj) in g.iter().enumerate() {
                        dx[index * c + j] += gj;
                    }
                });
            }
            Op::Slice { start, .. } => {
                self.inputs[0].with_grad(|dx| {
                    for (j, &gj) in g.iter().enumerate() {
                        dx[start + j] += gj;
                    }
                });
            }
            Op::GatherRows { indices, skip } => {
                let a = &self.inputs[0];
                let c = a.shape().rows_cols().1;
                a.with_grad(|dx| {
                    for (t, &i) in indices.iter().enumerate() {
                        if Some(i) == *skip {
                            continue;
                        }
                        for j in 0..c {
                            dx[i * c + j] += g[t * c + j];
                        }
                    }
                });
            }
            Op::Dropout { mask } => {
                self.inputs[0].with_grad(|dx| {
                    for ((d, &gi), &m) in dx.iter_mut().zip(&g).zip(mask) {
                        *d += gi * m;
                    }
                });
            }
            Op::CrossEntropy { targets, pad, probs, counted } => {
                let logits = &self.inputs[0];
                let v = logits.shape().rows_cols().1;
                let scale = g[0] / *counted as f64;
                logits.with_grad(|dx| {
                    for (i, &t) in targets.iter().enumerate() {
                        if *pad == Some(t) {
                            continue;
                        }
                        for j in 0..v {
                            let one_hot = if j == t { 1.0 } else { 0.0 };
                            dx[i * v + j] += scale * (probs[i * v + j] - one_hot);
                        }
                    }
                });
            }
        }
    }
}
