use std::sync::Arc;

use super::{Tensor, TensorError};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Exp(Var),
    Ln(Var),
    Sum(Var),
    Mean(Var),
    SqDiff(Var, Var),
    SqDistToRows(Var, Var),
    Dot(Var, Var),
    LogSumExp(Var),
    Transpose(Var),
    Diag(Var),
    Gather(Var, Vec<usize>),
    ConcatRows(Var, Var),
    CrossEntropy(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Arc<Tensor>,
    requires_grad: bool,
}

/// Ordered record of every operation evaluated since the tape was created.
///
/// Nodes are appended in evaluation order, so every node's inputs precede
/// it and a single reverse sweep visits the graph in topological order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every leaf that requires grad.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::Shape {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn matrix_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize), TensorError> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(TensorError::BadShape {
            op,
            shape: s.to_vec(),
            reason: "expected a matrix",
        }),
    }
}

fn finite(op: &'static str, t: Tensor) -> Result<Tensor, TensorError> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(TensorError::NonFinite { op })
    }
}

/// `out[n,m] += a[n,k] * b[k,m]`
fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let out_row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * m..(p + 1) * m];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, delta: Vec<f64>) {
    match slot {
        Some(existing) => {
            for (e, d) in existing.iter_mut().zip(delta) {
                *e += d;
            }
        }
        None => *slot = Some(delta),
    }
}

/// Pairwise summation; exact for any power-of-two count of equal values.
fn pairwise_sum(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        n => {
            let (a, b) = xs.split_at(n / 2);
            pairwise_sum(a) + pairwise_sum(b)
        }
    }
}

fn lse_row(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = row.iter().map(|v| (v - max).exp()).sum();
    max + s.ln()
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Registers a leaf.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.leaf_shared(Arc::new(value), requires_grad)
    }

    /// Registers a leaf without copying its buffer.
    pub fn leaf_shared(&mut self, value: Arc<Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, op: Op, value: Tensor, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            value: Arc::new(value),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, k) = matrix_dims("matmul", ta)?;
        let (k2, m) = matrix_dims("matmul", tb)?;
        if k != k2 {
            return Err(TensorError::Shape {
                op: "matmul",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; n * m];
        matmul_into(ta.data(), tb.data(), &mut out, n, k, m);
        let out = finite("matmul", Tensor::new(vec![n, m], out)?)?;
        Ok(self.push(Op::MatMul(a, b), out, &[a, b]))
    }

    /// Adds a `[m]` bias to every row of an `[n, m]` matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(bias));
        let (n, m) = matrix_dims("add_bias", ta)?;
        if tb.shape() != [m] {
            return Err(TensorError::Shape {
                op: "add_bias",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let mut out = ta.data().to_vec();
        for row in out.chunks_mut(m) {
            for (o, b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        let out = finite("add_bias", Tensor::new(vec![n, m], out)?)?;
        Ok(self.push(Op::AddBias(a, bias), out, &[a, bias]))
    }

    fn zip_with(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        check_same(op_name, ta, tb)?;
        let out: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = finite(op_name, Tensor::new(ta.shape().to_vec(), out)?)?;
        Ok(self.push(op, out, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn map(
        &mut self,
        op_name: &'static str,
        a: Var,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> Result<Var, TensorError> {
        let ta = self.value(a);
        let out: Vec<f64> = ta.data().iter().map(|&x| f(x)).collect();
        let out = finite(op_name, Tensor::new(ta.shape().to_vec(), out)?)?;
        Ok(self.push(op, out, &[a]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        self.map("scale", a, |x| x * c, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        self.map("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, TensorError> {
        self.map("exp", a, f64::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Result<Var, TensorError> {
        if let Some(&bad) = self.value(a).data().iter().find(|&&x| x <= 0.0) {
            return Err(TensorError::Domain { op: "ln", value: bad });
        }
        self.map("ln", a, f64::ln, Op::Ln(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let s = pairwise_sum(self.value(a).data());
        let out = finite("sum", Tensor::scalar(s))?;
        Ok(self.push(Op::Sum(a), out, &[a]))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.value(a);
        // shifted by the first element, so n equal values average exactly
        let shift = t.data().first().copied().unwrap_or(0.0);
        let centered: Vec<f64> = t.data().iter().map(|v| v - shift).collect();
        let s = shift + pairwise_sum(&centered) / t.len() as f64;
        let out = finite("mean", Tensor::scalar(s))?;
        Ok(self.push(Op::Mean(a), out, &[a]))
    }

    /// `sum((a - b)^2)` over all elements.
    pub fn sq_diff(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        check_same("sq_diff", ta, tb)?;
        let s: f64 = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let out = finite("sq_diff", Tensor::scalar(s))?;
        Ok(self.push(Op::SqDiff(a, b), out, &[a, b]))
    }

    /// `sum_i ||targets_i - z||^2` for a single row `z` (`[r]` or `[1, r]`)
    /// against every row of `targets` (`[m, r]`).
    pub fn sq_dist_to_rows(&mut self, z: Var, targets: Var) -> Result<Var, TensorError> {
        let (tz, tt) = (self.value(z), self.value(targets));
        let (_, r) = matrix_dims("sq_dist_to_rows", tt)?;
        let single_row = matches!(tz.shape(), [n] if *n == r) || matches!(tz.shape(), [1, n] if *n == r);
        if !single_row {
            return Err(TensorError::Shape {
                op: "sq_dist_to_rows",
                left: tz.shape().to_vec(),
                right: tt.shape().to_vec(),
            });
        }
        let zd = tz.data();
        let s: f64 = tt
            .data()
            .chunks(r)
            .map(|row| row.iter().zip(zd).map(|(t, z)| (t - z) * (t - z)).sum::<f64>())
            .sum();
        let out = finite("sq_dist_to_rows", Tensor::scalar(s))?;
        Ok(self.push(Op::SqDistToRows(z, targets), out, &[z, targets]))
    }

    /// Full contraction `sum(a * b)`.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        check_same("dot", ta, tb)?;
        let s: f64 = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).sum();
        let out = finite("dot", Tensor::scalar(s))?;
        Ok(self.push(Op::Dot(a, b), out, &[a, b]))
    }

    /// Stable `log(sum(exp(.)))` over the last axis: `[m] -> []`, `[n, m] -> [n]`.
    pub fn log_sum_exp(&mut self, a: Var) -> Result<Var, TensorError> {
        let ta = self.value(a);
        let out = match ta.shape() {
            [_] => Tensor::scalar(lse_row(ta.data())),
            [n, m] => Tensor::vector(ta.data().chunks(*m).map(lse_row).collect::<Vec<_>>())
                .reshape_checked(vec![*n])?,
            s => {
                return Err(TensorError::BadShape {
                    op: "log_sum_exp",
                    shape: s.to_vec(),
                    reason: "expected a vector or matrix",
                })
            }
        };
        let out = finite("log_sum_exp", out)?;
        Ok(self.push(Op::LogSumExp(a), out, &[a]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let ta = self.value(a);
        let (n, m) = matrix_dims("transpose", ta)?;
        let d = ta.data();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = d[i * m + j];
            }
        }
        let out = Tensor::new(vec![m, n], out)?;
        Ok(self.push(Op::Transpose(a), out, &[a]))
    }

    /// Diagonal of a square matrix.
    pub fn diag(&mut self, a: Var) -> Result<Var, TensorError> {
        let ta = self.value(a);
        let (n, m) = matrix_dims("diag", ta)?;
        if n != m {
            return Err(TensorError::BadShape {
                op: "diag",
                shape: ta.shape().to_vec(),
                reason: "expected a square matrix",
            });
        }
        let out: Vec<f64> = (0..n).map(|i| ta.data()[i * n + i]).collect();
        let out = Tensor::vector(out);
        Ok(self.push(Op::Diag(a), out, &[a]))
    }

    /// Picks `a[i, index[i]]` from every row of an `[n, c]` matrix.
    pub fn gather(&mut self, a: Var, index: &[usize]) -> Result<Var, TensorError> {
        let ta = self.value(a);
        let (n, c) = matrix_dims("gather", ta)?;
        if index.len() != n || index.iter().any(|&j| j >= c) {
            return Err(TensorError::Shape {
                op: "gather",
                left: ta.shape().to_vec(),
                right: vec![index.len()],
            });
        }
        let out: Vec<f64> = index
            .iter()
            .enumerate()
            .map(|(i, &j)| ta.data()[i * c + j])
            .collect();
        let out = Tensor::vector(out);
        Ok(self.push(Op::Gather(a, index.to_vec()), out, &[a]))
    }

    /// Stacks two matrices with equal column counts.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (na, ca) = matrix_dims("concat_rows", ta)?;
        let (nb, cb) = matrix_dims("concat_rows", tb)?;
        if ca != cb {
            return Err(TensorError::Shape {
                op: "concat_rows",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let mut out = Vec::with_capacity((na + nb) * ca);
        out.extend_from_slice(ta.data());
        out.extend_from_slice(tb.data());
        let out = Tensor::new(vec![na + nb, ca], out)?;
        Ok(self.push(Op::ConcatRows(a, b), out, &[a, b]))
    }

    /// Row-wise softmax cross-entropy `logsumexp(a_i) - a[i, target_i]` of an
    /// `[n, c]` logit matrix, computed as `(max_i - a[i, t_i]) + ln sum exp(a_i - max_i)`.
    pub fn cross_entropy(&mut self, a: Var, targets: &[usize]) -> Result<Var, TensorError> {
        let ta = self.value(a);
        let (n, c) = matrix_dims("cross_entropy", ta)?;
        if targets.len() != n || targets.iter().any(|&t| t >= c) {
            return Err(TensorError::Shape {
                op: "cross_entropy",
                left: ta.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let out: Vec<f64> = ta
            .data()
            .chunks(c)
            .zip(targets)
            .map(|(row, &t)| {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = row.iter().map(|v| (v - max).exp()).sum();
                (max - row[t]) + s.ln()
            })
            .collect();
        let out = finite("cross_entropy", Tensor::vector(out))?;
        Ok(self.push(Op::CrossEntropy(a, targets.to_vec()), out, &[a]))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(TensorError::NotScalar(lt.shape().to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(TensorError::Detached);
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let out = &node.value;
            let rg = |v: &Var| self.nodes[v.0].requires_grad;
            let val = |v: &Var| -> &Tensor { &self.nodes[v.0].value };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(Tensor::new(out.shape().to_vec(), g)?);
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (val(a), val(b));
                    let (n, k) = (ta.shape()[0], ta.shape()[1]);
                    let m = tb.shape()[1];
                    if rg(a) {
                        // dA = G * B^T
                        let mut da = vec![0.0; n * k];
                        for i in 0..n {
                            let g_row = &g[i * m..(i + 1) * m];
                            for p in 0..k {
                                let b_row = &tb.data()[p * m..(p + 1) * m];
                                da[i * k + p] = g_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
                            }
                        }
                        accumulate(&mut adj[a.0], da);
                    }
                    if rg(b) {
                        // dB = A^T * G
                        let mut db = vec![0.0; k * m];
                        for i in 0..n {
                            let g_row = &g[i * m..(i + 1) * m];
                            for p in 0..k {
                                let aip = ta.data()[i * k + p];
                                if aip == 0.0 {
                                    continue;
                                }
                                for (d, &gv) in db[p * m..(p + 1) * m].iter_mut().zip(g_row) {
                                    *d += aip * gv;
                                }
                            }
                        }
                        accumulate(&mut adj[b.0], db);
                    }
                }
                Op::AddBias(a, b) => {
                    let m = val(b).len();
                    if rg(b) {
                        let mut db = vec![0.0; m];
                        for row in g.chunks(m) {
                            for (d, gv) in db.iter_mut().zip(row) {
                                *d += gv;
                            }
                        }
                        accumulate(&mut adj[b.0], db);
                    }
                    if rg(a) {
                        accumulate(&mut adj[a.0], g);
                    }
                }
                Op::Add(a, b) => {
                    if rg(a) {
                        accumulate(&mut adj[a.0], g.clone());
                    }
                    if rg(b) {
                        accumulate(&mut adj[b.0], g);
                    }
                }
                Op::Sub(a, b) => {
                    if rg(b) {
                        accumulate(&mut adj[b.0], g.iter().map(|v| -v).collect());
                    }
                    if rg(a) {
                        accumulate(&mut adj[a.0], g);
                    }
                }
                Op::Mul(a, b) => {
                    if rg(a) {
                        let d = g.iter().zip(val(b).data()).map(|(x, y)| x * y).collect();
                        accumulate(&mut adj[a.0], d);
                    }
                    if rg(b) {
                        let d = g.iter().zip(val(a).data()).map(|(x, y)| x * y).collect();
                        accumulate(&mut adj[b.0], d);
                    }
                }
                Op::Scale(a, c) => {
                    accumulate(&mut adj[a.0], g.iter().map(|v| v * c).collect());
                }
                Op::Relu(a) => {
                    let d = g
                        .iter()
                        .zip(val(a).data())
                        .map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 })
                        .collect();
                    accumulate(&mut adj[a.0], d);
                }
                Op::Exp(a) => {
                    let d = g.iter().zip(out.data()).map(|(x, y)| x * y).collect();
                    accumulate(&mut adj[a.0], d);
                }
                Op::Ln(a) => {
                    let d = g.iter().zip(val(a).data()).map(|(x, y)| x / y).collect();
                    accumulate(&mut adj[a.0], d);
                }
                Op::Sum(a) => {
                    accumulate(&mut adj[a.0], vec![g[0]; val(a).len()]);
                }
                Op::Mean(a) => {
                    let n = val(a).len();
                    accumulate(&mut adj[a.0], vec![g[0] / n as f64; n]);
                }
                Op::SqDiff(a, b) => {
                    let diff: Vec<f64> = val(a)
                        .data()
                        .iter()
                        .zip(val(b).data())
                        .map(|(x, y)| 2.0 * g[0] * (x - y))
                        .collect();
                    if rg(b) {
                        accumulate(&mut adj[b.0], diff.iter().map(|v| -v).collect());
                    }
                    if rg(a) {
                        accumulate(&mut adj[a.0], diff);
                    }
                }
                Op::SqDistToRows(z, t) => {
                    let (tz, tt) = (val(z), val(t));
                    let r = tz.len();
                    let m = tt.rows();
                    if rg(z) {
                        let mut dz: Vec<f64> = tz.data().iter().map(|v| m as f64 * v).collect();
                        for row in tt.data().chunks(r) {
                            for (d, tv) in dz.iter_mut().zip(row) {
                                *d -= tv;
                            }
                        }
                        dz.iter_mut().for_each(|d| *d *= 2.0 * g[0]);
                        accumulate(&mut adj[z.0], dz);
                    }
                    if rg(t) {
                        let mut dt = Vec::with_capacity(tt.len());
                        for row in tt.data().chunks(r) {
                            dt.extend(row.iter().zip(tz.data()).map(|(tv, zv)| 2.0 * g[0] * (tv - zv)));
                        }
                        accumulate(&mut adj[t.0], dt);
                    }
                }
                Op::Dot(a, b) => {
                    if rg(a) {
                        accumulate(&mut adj[a.0], val(b).data().iter().map(|v| v * g[0]).collect());
                    }
                    if rg(b) {
                        accumulate(&mut adj[b.0], val(a).data().iter().map(|v| v * g[0]).collect());
                    }
                }
                Op::LogSumExp(a) => {
                    let ta = val(a);
                    let m = ta.cols();
                    let mut d = Vec::with_capacity(ta.len());
                    for (row, (lse, gv)) in ta.data().chunks(m).zip(out.data().iter().zip(&g)) {
                        d.extend(row.iter().map(|x| gv * (x - lse).exp()));
                    }
                    accumulate(&mut adj[a.0], d);
                }
                Op::Transpose(a) => {
                    let (n, m) = (val(a).shape()[0], val(a).shape()[1]);
                    let mut d = vec![0.0; n * m];
                    for i in 0..n {
                        for j in 0..m {
                            d[i * m + j] = g[j * n + i];
                        }
                    }
                    accumulate(&mut adj[a.0], d);
                }
                Op::Diag(a) => {
                    let n = val(a).shape()[0];
                    let mut d = vec![0.0; n * n];
                    for i in 0..n {
                        d[i * n + i] = g[i];
                    }
                    accumulate(&mut adj[a.0], d);
                }
                Op::Gather(a, index) => {
                    let c = val(a).cols();
                    let mut d = vec![0.0; val(a).len()];
                    for (i, &j) in index.iter().enumerate() {
                        d[i * c + j] = g[i];
                    }
                    accumulate(&mut adj[a.0], d);
                }
                Op::CrossEntropy(a, targets) => {
                    let ta = val(a);
                    let c = ta.cols();
                    let mut d = Vec::with_capacity(ta.len());
                    for ((row, &t), gv) in ta.data().chunks(c).zip(targets).zip(&g) {
                        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let s: f64 = row.iter().map(|v| (v - max).exp()).sum();
                        d.extend(row.iter().enumerate().map(|(j, v)| {
                            let p = (v - max).exp() / s;
                            gv * (p - if j == t { 1.0 } else { 0.0 })
                        }));
                    }
                    accumulate(&mut adj[a.0], d);
                }
                Op::ConcatRows(a, b) => {
                    let split = val(a).len();
                    let mut g = g;
                    let tail = g.split_off(split);
                    if rg(a) {
                        accumulate(&mut adj[a.0], g);
                    }
                    if rg(b) {
                        accumulate(&mut adj[b.0], tail);
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

impl Tensor {
    fn reshape_checked(self, shape: Vec<usize>) -> Result<Tensor, TensorError> {
        Tensor::new(shape, self.data)
    }
}
