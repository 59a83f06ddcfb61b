//! Operation tape and backward pass.
//!
//! Every operation appends one node holding its output value and enough
//! context to run its vector-Jacobian product. [`Tape::backward`] walks the
//! nodes in reverse record order once, accumulating (`+=`) into per-node
//! gradient buffers, so shared subexpressions receive summed gradients.

use rand::Rng;

use super::{Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    /// Holds the softmax output (masked entries are exactly zero).
    Softmax(Var),
    RowNormalize(Var),
    MeanRows(Var),
    GatherRows(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    StackRows(Vec<Var>),
    Reshape(Var),
    Gelu(Var),
    /// Saves `(x - mean) / std` per row and `1 / std` per row.
    LayerNorm(Var, Vec<f64>, Vec<f64>),
    RowL2Norm(Var),
    RowSum(Var),
    Sum(Var),
    /// Saves softmax probabilities and the smoothed target distribution.
    CrossEntropy(Var, Vec<f64>, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Single-owner record of one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn softmax_row(logits: &[f64], allowed: Option<&[bool]>, out: &mut [f64]) {
    let admit = |j: usize| allowed.is_none_or(|m| m[j]);
    let max = logits
        .iter()
        .enumerate()
        .filter(|&(j, _)| admit(j))
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (j, o) in out.iter_mut().enumerate() {
        *o = if admit(j) {
            (logits[j] - max).exp()
        } else {
            0.0
        };
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
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

    /// Differentiable input.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(mismatch("matmul", av, bv));
        }
        let (p, q) = av.dims2();
        let r = bv.shape()[1];
        let out = matmul_raw(av.data(), bv.data(), p, q, r);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![p, r], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let av = self.value(a);
        if av.rank() != 2 {
            return Err(mismatch("transpose", av, av));
        }
        let (p, q) = av.dims2();
        let out = transpose_raw(av.data(), p, q);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(vec![q, p], out)?, Op::Transpose(a), rg))
    }

    fn zip(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch(name, av, bv));
        }
        let out: Vec<f64> = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(av.shape().to_vec(), out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn row_broadcast(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        let (_, cols) = av.dims2();
        if bv.len() != cols || av.rank() == 0 {
            return Err(mismatch(name, av, bv));
        }
        let out: Vec<f64> = av
            .data()
            .iter()
            .enumerate()
            .map(|(k, &x)| f(x, bv.data()[k % cols]))
            .collect();
        let value = Tensor::new(av.shape().to_vec(), out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    /// `a[i, j] + b[j]` for a matrix (or vector) `a` and a vector `b`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.row_broadcast(a, b, "add_row", |x, y| x + y, Op::AddRow(a, b))
    }

    /// `a[i, j] * b[j]`.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.row_broadcast(a, b, "mul_row", |x, y| x * y, Op::MulRow(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let av = self.value(a);
        let out: Vec<f64> = av.data().iter().map(|&x| x * c).collect();
        let value = Tensor::new(av.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        self.softmax_impl(a, None)
            .expect("unmasked softmax cannot fail")
    }

    /// Row-wise softmax restricted to entries where `allowed` is true; the
    /// rest are exactly zero. Every row needs at least one allowed entry.
    pub fn masked_softmax_rows(&mut self, a: Var, allowed: &[bool]) -> Result<Var, TensorError> {
        self.softmax_impl(a, Some(allowed))
    }

    fn softmax_impl(&mut self, a: Var, allowed: Option<&[bool]>) -> Result<Var, TensorError> {
        let av = self.value(a);
        let (p, q) = av.dims2();
        if let Some(m) = allowed {
            if m.len() != p * q {
                return Err(TensorError::ShapeMismatch {
                    op: "masked_softmax_rows",
                    left: av.shape().to_vec(),
                    right: vec![m.len()],
                });
            }
        }
        let mut out = vec![0.0; p * q];
        for i in 0..p {
            let row_mask = allowed.map(|m| &m[i * q..(i + 1) * q]);
            softmax_row(
                &av.data()[i * q..(i + 1) * q],
                row_mask,
                &mut out[i * q..(i + 1) * q],
            );
        }
        let value = Tensor::new(av.shape().to_vec(), out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Softmax(a), rg))
    }

    /// Divides every row by its sum. Rows must have a nonzero sum.
    pub fn row_normalize(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (p, q) = av.dims2();
        let mut out = av.data().to_vec();
        for row in out.chunks_mut(q).take(p) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        let value = Tensor::new(av.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(value, Op::RowNormalize(a), rg)
    }

    /// Column means of a `p × q` matrix, giving a length-`q` vector.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (p, q) = av.dims2();
        let mut out = vec![0.0; q];
        for row in av.data().chunks(q).take(p) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= p as f64);
        let rg = self.rg(&[a]);
        self.push(Tensor::vector(out), Op::MeanRows(a), rg)
    }

    /// Row lookup: `out[k] = table[ids[k]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let tv = self.value(table);
        let (rows, cols) = tv.dims2();
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::IndexOutOfRange {
                    index: id,
                    bound: rows,
                });
            }
            out.extend_from_slice(tv.row(id));
        }
        let value = Tensor::new(vec![ids.len(), cols], out)?;
        let rg = self.rg(&[table]);
        Ok(self.push(value, Op::GatherRows(table, ids.to_vec()), rg))
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = self.value(parts[0]);
        let rows = first.dims2().0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let pv = self.value(p);
            if pv.rank() != 2 || pv.dims2().0 != rows {
                return Err(mismatch("concat_cols", first, pv));
            }
            widths.push(pv.dims2().1);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::new(vec![rows, total], out)?,
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    /// Stacks equal-length vectors into a matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var, TensorError> {
        let first = self.value(rows[0]);
        let n = first.len();
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            let rv = self.value(r);
            if rv.len() != n {
                return Err(mismatch("stack_rows", first, rv));
            }
            out.extend_from_slice(rv.data());
        }
        let rg = self.rg(rows);
        Ok(self.push(
            Tensor::new(vec![rows.len(), n], out)?,
            Op::StackRows(rows.to_vec()),
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out: Vec<f64> = av.data().iter().map(|&x| gelu(x)).collect();
        let value = Tensor::new(av.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(value, Op::Gelu(a), rg)
    }

    /// Per-row standardization without affine terms.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let av = self.value(a);
        let (p, q) = av.dims2();
        let mut xhat = vec![0.0; p * q];
        let mut inv_std = vec![0.0; p];
        for i in 0..p {
            let row = &av.data()[i * q..(i + 1) * q];
            let mean = row.iter().sum::<f64>() / q as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / q as f64;
            let s = 1.0 / (var + eps).sqrt();
            inv_std[i] = s;
            for j in 0..q {
                xhat[i * q + j] = (row[j] - mean) * s;
            }
        }
        let value = Tensor::new(av.shape().to_vec(), xhat.clone()).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(value, Op::LayerNorm(a, xhat, inv_std), rg)
    }

    /// Euclidean norm of each row, giving a vector.
    pub fn row_l2_norm(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (p, q) = av.dims2();
        let out: Vec<f64> = (0..p)
            .map(|i| {
                av.data()[i * q..(i + 1) * q]
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        let rg = self.rg(&[a]);
        self.push(Tensor::vector(out), Op::RowL2Norm(a), rg)
    }

    pub fn row_sum(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (p, q) = av.dims2();
        let out: Vec<f64> = (0..p)
            .map(|i| av.data()[i * q..(i + 1) * q].iter().sum())
            .collect();
        let rg = self.rg(&[a]);
        self.push(Tensor::vector(out), Op::RowSum(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Inverted dropout: in training mode each entry is zeroed with
    /// probability `rate` and survivors are scaled by `1 / (1 - rate)`.
    /// Evaluation mode (or `rate == 0`) returns `a` unchanged.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        a: Var,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::InvalidRate(rate));
        }
        if !training || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - rate);
        let shape = self.value(a).shape().to_vec();
        let n = self.value(a).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                if rng.random::<f64>() < rate {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        let m = self.constant(Tensor::new(shape, mask)?);
        self.mul(a, m)
    }

    /// Mean over the batch of `-sum_c q_c log p_c`, with
    /// `p = softmax(logits[b])` and `q = (1 - eps) onehot(target) + eps / C`.
    pub fn cross_entropy_label_smoothed(
        &mut self,
        logits: Var,
        targets: &[usize],
        epsilon: f64,
    ) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&epsilon) {
            return Err(TensorError::InvalidSmoothing(epsilon));
        }
        let lv = self.value(logits);
        let (b, c) = lv.dims2();
        if targets.len() != b {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                left: lv.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let mut probs = vec![0.0; b * c];
        let mut q = vec![epsilon / c as f64; b * c];
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(TensorError::IndexOutOfRange { index: t, bound: c });
            }
            let row = &lv.data()[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            q[i * c + t] += 1.0 - epsilon;
            for j in 0..c {
                let log_p = row[j] - lse;
                probs[i * c + j] = log_p.exp();
                loss -= q[i * c + j] * log_p;
            }
        }
        loss /= b as f64;
        let rg = self.rg(&[logits]);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy(logits, probs, q), rg))
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients, TensorError> {
        let out = self.value(output);
        if out.len() != 1 {
            return Err(TensorError::NonScalarLoss(out.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![1.0]);

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.filter(|_| self.nodes[i].requires_grad).map(|g| {
                    Tensor::new(self.nodes[i].value.shape().to_vec(), g).expect("grad shape")
                })
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !wants(v) {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (p, q) = av.dims2();
                let r = bv.dims2().1;
                acc(*a, &mut |da| {
                    let bt = transpose_raw(bv.data(), q, r);
                    let d = matmul_raw(g, &bt, p, r, q);
                    add_into(da, &d);
                });
                acc(*b, &mut |db| {
                    let at = transpose_raw(av.data(), p, q);
                    let d = matmul_raw(&at, g, q, p, r);
                    add_into(db, &d);
                });
            }
            Op::Transpose(a) => {
                let (p, q) = val(*a).dims2();
                acc(*a, &mut |da| add_into(da, &transpose_raw(g, q, p)));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |da| add_into(da, g));
                acc(*b, &mut |db| add_into(db, g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |da| {
                    for ((d, &gi), &y) in da.iter_mut().zip(g).zip(bv.data()) {
                        *d += gi * y;
                    }
                });
                acc(*b, &mut |db| {
                    for ((d, &gi), &x) in db.iter_mut().zip(g).zip(av.data()) {
                        *d += gi * x;
                    }
                });
            }
            Op::AddRow(a, b) => {
                let cols = val(*b).len();
                acc(*a, &mut |da| add_into(da, g));
                acc(*b, &mut |db| {
                    for (k, &gi) in g.iter().enumerate() {
                        db[k % cols] += gi;
                    }
                });
            }
            Op::MulRow(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let cols = bv.len();
                acc(*a, &mut |da| {
                    for (k, &gi) in g.iter().enumerate() {
                        da[k] += gi * bv.data()[k % cols];
                    }
                });
                acc(*b, &mut |db| {
                    for (k, &gi) in g.iter().enumerate() {
                        db[k % cols] += gi * av.data()[k];
                    }
                });
            }
            Op::Scale(a, c) => {
                acc(*a, &mut |da| {
                    for (d, &gi) in da.iter_mut().zip(g) {
                        *d += c * gi;
                    }
                });
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let (p, q) = node.value.dims2();
                acc(*a, &mut |da| {
                    for i in 0..p {
                        let r = i * q..(i + 1) * q;
                        let dot: f64 = g[r.clone()]
                            .iter()
                            .zip(&y[r.clone()])
                            .map(|(a, b)| a * b)
                            .sum();
                        for j in r {
                            da[j] += y[j] * (g[j] - dot);
                        }
                    }
                });
            }
            Op::RowNormalize(a) => {
                let x = val(*a).data();
                let y = node.value.data();
                let (p, q) = node.value.dims2();
                acc(*a, &mut |da| {
                    for i in 0..p {
                        let r = i * q..(i + 1) * q;
                        let s: f64 = x[r.clone()].iter().sum();
                        let dot: f64 = g[r.clone()]
                            .iter()
                            .zip(&y[r.clone()])
                            .map(|(a, b)| a * b)
                            .sum();
                        for j in r {
                            da[j] += (g[j] - dot) / s;
                        }
                    }
                });
            }
            Op::MeanRows(a) => {
                let (p, q) = val(*a).dims2();
                acc(*a, &mut |da| {
                    for i in 0..p {
                        for j in 0..q {
                            da[i * q + j] += g[j] / p as f64;
                        }
                    }
                });
            }
            Op::GatherRows(table, ids) => {
                let cols = val(*table).dims2().1;
                acc(*table, &mut |dt| {
                    for (k, &id) in ids.iter().enumerate() {
                        for j in 0..cols {
                            dt[id * cols + j] += g[k * cols + j];
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = node.value.dims2();
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).dims2().1;
                    acc(p, &mut |dp| {
                        for i in 0..rows {
                            for j in 0..w {
                                dp[i * w + j] += g[i * total + offset + j];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::StackRows(rows) => {
                let n = node.value.dims2().1;
                for (i, &r) in rows.iter().enumerate() {
                    acc(r, &mut |dr| add_into(dr, &g[i * n..(i + 1) * n]));
                }
            }
            Op::Reshape(a) => acc(*a, &mut |da| add_into(da, g)),
            Op::Gelu(a) => {
                let x = val(*a).data();
                acc(*a, &mut |da| {
                    for (k, d) in da.iter_mut().enumerate() {
                        *d += g[k] * gelu_grad(x[k]);
                    }
                });
            }
            Op::LayerNorm(a, xhat, inv_std) => {
                let (p, q) = node.value.dims2();
                acc(*a, &mut |da| {
                    for (i, &s) in inv_std.iter().enumerate().take(p) {
                        let r = i * q..(i + 1) * q;
                        let mean_g = g[r.clone()].iter().sum::<f64>() / q as f64;
                        let mean_gx = g[r.clone()]
                            .iter()
                            .zip(&xhat[r.clone()])
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            / q as f64;
                        for j in r {
                            da[j] += s * (g[j] - mean_g - xhat[j] * mean_gx);
                        }
                    }
                });
            }
            Op::RowL2Norm(a) => {
                let av = val(*a);
                let (p, q) = av.dims2();
                let norms = node.value.data();
                acc(*a, &mut |da| {
                    for i in 0..p {
                        if norms[i] == 0.0 {
                            continue;
                        }
                        for j in 0..q {
                            da[i * q + j] += g[i] * av.data()[i * q + j] / norms[i];
                        }
                    }
                });
            }
            Op::RowSum(a) => {
                let (p, q) = val(*a).dims2();
                acc(*a, &mut |da| {
                    for i in 0..p {
                        for j in 0..q {
                            da[i * q + j] += g[i];
                        }
                    }
                });
            }
            Op::Sum(a) => {
                acc(*a, &mut |da| da.iter_mut().for_each(|d| *d += g[0]));
            }
            Op::CrossEntropy(logits, probs, q) => {
                let b = val(*logits).dims2().0 as f64;
                acc(*logits, &mut |dl| {
                    for k in 0..dl.len() {
                        dl[k] += g[0] * (probs[k] - q[k]) / b;
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn transpose_raw(a: &[f64], p: usize, q: usize) -> Vec<f64> {
    let mut out = vec![0.0; p * q];
    for i in 0..p {
        for j in 0..q {
            out[j * p + i] = a[i * q + j];
        }
    }
    out
}

/// `(p × q) · (q × r)`.
fn matmul_raw(a: &[f64], b: &[f64], p: usize, q: usize, r: usize) -> Vec<f64> {
    let mut out = vec![0.0; p * r];
    for i in 0..p {
        let orow = &mut out[i * r..(i + 1) * r];
        for k in 0..q {
            let aik = a[i * q + k];
            if aik == 0.0 {
                continue;
            }
            for (o, &bkj) in orow.iter_mut().zip(&b[k * r..(k + 1) * r]) {
                *o += aik * bkj;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{x} vs {y}");
        }
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let mut t = Tape::new();
        let i = t.constant(Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let m = t.constant(Tensor::from_rows(&[&[3.0, 4.0], &[5.0, 6.0]]));
        let c = t.matmul(i, m).unwrap();
        assert_eq!(t.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);

        let a = t.constant(Tensor::from_rows(&[&[2.0]]));
        let b = t.constant(Tensor::from_rows(&[&[3.0]]));
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[6.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(
            t.matmul(a, b),
            Err(TensorError::ShapeMismatch { .. })
        ));
        let v = t.constant(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(
            t.add(a, v),
            Err(TensorError::ShapeMismatch { .. })
        ));
        assert!(matches!(
            t.add_row(a, v),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn softmax_examples() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::from_rows(&[&[0.0, 0.0], &[1000.0, 0.0]]));
        let s = t.softmax_rows(a);
        let v = t.value(s).data();
        assert_close(&v[..2], &[0.5, 0.5], 1e-15);
        assert!((v[2] - 1.0).abs() < 1e-15 && v[3] >= 0.0 && v[3] < 1e-300);
    }

    #[test]
    fn masked_softmax_zeroes_excluded() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::from_rows(&[&[1.0, 2.0, 3.0], &[0.5, -1.0, 4.0]]));
        let s = t
            .masked_softmax_rows(a, &[true, false, true, false, true, false])
            .unwrap();
        let v = t.value(s).data();
        assert_eq!(v[1], 0.0);
        assert_eq!(v[3], 0.0);
        assert_eq!(v[5], 0.0);
        assert_eq!(v[4], 1.0);
        assert!((v[0] + v[2] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn mean_rows_and_identity_mul() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::from_rows(&[&[2.0, 4.0], &[4.0, 8.0]]));
        let m = t.mean_rows(a);
        assert_eq!(t.value(m).data(), &[3.0, 6.0]);
        let ones = t.constant(Tensor::filled(&[2, 2], 1.0));
        let p = t.mul(a, ones).unwrap();
        assert_eq!(t.value(p), t.value(a));
    }

    #[test]
    fn dropout_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut t = Tape::new();
        let a = t.param(Tensor::filled(&[4, 4], 2.0));
        assert_eq!(t.dropout(a, 0.0, true, &mut rng).unwrap(), a);
        assert_eq!(t.dropout(a, 0.5, false, &mut rng).unwrap(), a);
        assert_eq!(
            t.dropout(a, 1.0, true, &mut rng),
            Err(TensorError::InvalidRate(1.0))
        );
        assert_eq!(
            t.dropout(a, -0.1, true, &mut rng),
            Err(TensorError::InvalidRate(-0.1))
        );
    }

    #[test]
    fn dropout_survivor_fraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut t = Tape::new();
        let a = t.constant(Tensor::filled(&[100_000], 1.0));
        let d = t.dropout(a, 0.5, true, &mut rng).unwrap();
        let v = t.value(d).data();
        let survivors = v.iter().filter(|&&x| x != 0.0).count() as f64 / v.len() as f64;
        assert!((0.49..=0.51).contains(&survivors), "{survivors}");
        assert!(v.iter().all(|&x| x == 0.0 || x == 2.0));
    }

    #[test]
    fn cross_entropy_examples() {
        let mut t = Tape::new();
        let l = t.constant(Tensor::from_rows(&[&[0.0, 0.0]]));
        let loss = t.cross_entropy_label_smoothed(l, &[0], 0.0).unwrap();
        assert!((t.value(loss).item() - std::f64::consts::LN_2).abs() < 1e-15);

        let l = t.constant(Tensor::from_rows(&[&[60.0, 0.0, 0.0]]));
        let loss = t.cross_entropy_label_smoothed(l, &[0], 0.0).unwrap();
        assert!(t.value(loss).item() < 1e-20);

        assert_eq!(
            t.cross_entropy_label_smoothed(l, &[3], 0.0),
            Err(TensorError::IndexOutOfRange { index: 3, bound: 3 })
        );
        assert_eq!(
            t.cross_entropy_label_smoothed(l, &[0], 1.0),
            Err(TensorError::InvalidSmoothing(1.0))
        );
    }

    /// Direct evaluation of the smoothed cross-entropy, one scalar at a time.
    fn ce_oracle(logits: &[Vec<f64>], targets: &[usize], eps: f64) -> f64 {
        let mut total = 0.0;
        for (row, &t) in logits.iter().zip(targets) {
            let c = row.len() as f64;
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            for (j, &v) in row.iter().enumerate() {
                let q = if j == t { 1.0 - eps + eps / c } else { eps / c };
                total -= q * (v.exp() / z).ln();
            }
        }
        total / logits.len() as f64
    }

    #[test]
    fn cross_entropy_matches_scalar_formula() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let rows: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..4).map(|_| rng.random_range(-3.0..3.0)).collect())
            .collect();
        let targets = [0, 3, 1, 2, 2];
        let mut t = Tape::new();
        let flat: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let l = t.constant(Tensor::from_rows(&flat));
        let loss = t.cross_entropy_label_smoothed(l, &targets, 0.1).unwrap();
        assert!((t.value(loss).item() - ce_oracle(&rows, &targets, 0.1)).abs() < 1e-10);
    }

    #[test]
    fn square_gradient() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![3.0]));
        let y = t.mul(x, x).unwrap();
        let s = t.sum(y);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn diamond_accumulates() {
        // f = sum(2a + 3a) -> df/da = 5 on every entry
        let mut t = Tape::new();
        let a = t.param(Tensor::vector(vec![1.0, -2.0]));
        let b = t.scale(a, 2.0);
        let c = t.scale(a, 3.0);
        let d = t.add(b, c).unwrap();
        let s = t.sum(d);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[5.0, 5.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::new();
        let a = t.param(Tensor::vector(vec![1.0]));
        let k = t.constant(Tensor::vector(vec![4.0]));
        let p = t.mul(a, k).unwrap();
        let s = t.sum(p);
        let g = t.backward(s).unwrap();
        assert!(g.get(k).is_none());
        assert_eq!(g.get(a).unwrap().data(), &[4.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut t = Tape::new();
        let a = t.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(t.backward(a), Err(TensorError::NonScalarLoss(_))));
    }
}
