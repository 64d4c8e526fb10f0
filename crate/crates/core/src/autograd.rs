//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] records every operation of one forward pass on a tape. Calling
//! [`Graph::backward`] walks the tape in reverse and returns the gradient of a
//! scalar output with respect to every parameter the graph borrowed.
//! Everything is two-dimensional; scalars are `1×1` matrices.

use ndarray::{s, Array2, ArrayView2, Axis};

pub type Tensor = Array2<f64>;

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;
const LN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Shift(Var),
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor, inv_std: Vec<f64> },
    Gather { table: Var, ids: Vec<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    SelectRows(Var, Vec<usize>),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Tensor },
    SqErrSum { pred: Var, target: Tensor },
    Sum(Var),
}

enum Value {
    Owned(Tensor),
    Param(usize),
}

struct Node {
    value: Value,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    params: Vec<Option<Tensor>>,
    nodes: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for parameter `index`, `None` when the parameter was unused.
    pub fn param(&self, index: usize) -> Option<&Tensor> {
        self.params.get(index).and_then(Option::as_ref)
    }

    /// Gradient with respect to an input created by [`Graph::input`].
    pub fn wrt(&self, var: Var) -> Option<&Tensor> {
        self.nodes.get(var.0).and_then(Option::as_ref)
    }

    pub fn into_params(self) -> Vec<Option<Tensor>> {
        self.params
    }
}

/// A single-use computation tape that borrows a parameter set.
pub struct Graph<'p> {
    params: &'p [Tensor],
    nodes: Vec<Node>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p [Tensor]) -> Self {
        Self { params, nodes: Vec::with_capacity(256) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        match &self.nodes[var.0].value {
            Value::Owned(t) => t,
            Value::Param(i) => &self.params[*i],
        }
    }

    /// Scalar value of a `1×1` node.
    pub fn scalar(&self, var: Var) -> f64 {
        let v = self.value(var);
        debug_assert_eq!(v.dim(), (1, 1));
        v[[0, 0]]
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: Value::Owned(value), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant with no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, index: usize) -> Var {
        assert!(index < self.params.len(), "parameter index {index} out of range");
        self.nodes.push(Node { value: Value::Param(index), op: Op::Param(index), requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(v, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        let rg = self.rg(&[a, b]);
        self.push(v, Op::MatMulBt(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Sub(a, b), rg)
    }

    /// Adds a `1×n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1, "add_row expects a single row");
        let v = self.value(a) + self.value(row);
        let rg = self.rg(&[a, row]);
        self.push(v, Op::AddRow(a, row), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, c), rg)
    }

    /// Multiplies `a` by the `1×1` node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let c = self.scalar(s);
        let v = self.value(a) * c;
        let rg = self.rg(&[a, s]);
        self.push(v, Op::ScaleBy(a, s), rg)
    }

    /// `a + c` elementwise.
    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) + c;
        let rg = self.rg(&[a]);
        self.push(v, Op::Shift(a), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()));
        let rg = self.rg(&[a]);
        self.push(v, Op::Gelu(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        let rg = self.rg(&[a]);
        self.push(v, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        let rg = self.rg(&[a]);
        self.push(v, Op::Sigmoid(a), rg)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a).view());
        let rg = self.rg(&[a]);
        self.push(v, Op::Softmax(a), rg)
    }

    /// Row-wise layer normalisation with affine `gamma`, `beta` (both `1×n`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let n = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        let out = &xhat * self.value(gamma) + self.value(beta);
        let rg = self.rg(&[x, gamma, beta]);
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, rg)
    }

    /// Embedding lookup: row `ids[i]` of `table` becomes row `i`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut out = Tensor::zeros((ids.len(), t.ncols()));
        for (i, &id) in ids.iter().enumerate() {
            out.row_mut(i).assign(&t.row(id));
        }
        let rg = self.rg(&[table]);
        self.push(out, Op::Gather { table, ids: ids.to_vec() }, rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows: column mismatch");
        let rg = self.rg(parts);
        self.push(v, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        let rg = self.rg(parts);
        self.push(v, Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![.., start..end]).to_owned();
        let rg = self.rg(&[a]);
        self.push(v, Op::SliceCols(a, start), rg)
    }

    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let v = self.value(a).select(Axis(0), rows);
        let rg = self.rg(&[a]);
        self.push(v, Op::SelectRows(a, rows.to_vec()), rg)
    }

    /// Mean token cross-entropy of row-wise logits against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.nrows(), targets.len(), "cross_entropy: one target per row");
        let probs = softmax_rows(lv.view());
        let total: f64 = targets.iter().enumerate().map(|(t, &y)| -log_softmax_at(lv.row(t), y)).sum();
        let loss = total / targets.len().max(1) as f64;
        let rg = self.rg(&[logits]);
        self.push(
            Tensor::from_elem((1, 1), loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            rg,
        )
    }

    /// `Σ ‖pred_i − target_i‖²` over all rows.
    pub fn sq_err_sum(&mut self, pred: Var, target: Tensor) -> Var {
        let diff = self.value(pred) - &target;
        let loss = diff.iter().map(|d| d * d).sum::<f64>();
        let rg = self.rg(&[pred]);
        self.push(Tensor::from_elem((1, 1), loss), Op::SqErrSum { pred, target }, rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = self.value(a).sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::from_elem((1, 1), v), Op::Sum(a), rg)
    }

    /// Reverse sweep from the scalar `output`.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).dim(), (1, 1), "backward expects a scalar output");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut param_grads: Vec<Option<Tensor>> = (0..self.params.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::ones((1, 1)));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                Op::Param(p) => accumulate(&mut param_grads[*p], g),
                Op::MatMul(a, b) => {
                    if self.wants(*a) {
                        let ga = g.dot(&self.value(*b).t());
                        accumulate(&mut grads[a.0], ga);
                    }
                    if self.wants(*b) {
                        let gb = self.value(*a).t().dot(&g);
                        accumulate(&mut grads[b.0], gb);
                    }
                }
                Op::MatMulBt(a, b) => {
                    // out = a bᵀ; da = g b; db = gᵀ a
                    if self.wants(*a) {
                        let ga = g.dot(self.value(*b));
                        accumulate(&mut grads[a.0], ga);
                    }
                    if self.wants(*b) {
                        let gb = g.t().dot(self.value(*a));
                        accumulate(&mut grads[b.0], gb);
                    }
                }
                Op::Add(a, b) => {
                    if self.wants(*b) {
                        accumulate(&mut grads[b.0], g.clone());
                    }
                    if self.wants(*a) {
                        accumulate(&mut grads[a.0], g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.wants(*b) {
                        accumulate(&mut grads[b.0], -&g);
                    }
                    if self.wants(*a) {
                        accumulate(&mut grads[a.0], g);
                    }
                }
                Op::AddRow(a, row) => {
                    if self.wants(*row) {
                        let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut grads[row.0], gr);
                    }
                    if self.wants(*a) {
                        accumulate(&mut grads[a.0], g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.wants(*a) {
                        accumulate(&mut grads[a.0], &g * self.value(*b));
                    }
                    if self.wants(*b) {
                        accumulate(&mut grads[b.0], &g * self.value(*a));
                    }
                }
                Op::Scale(a, c) => {
                    if self.wants(*a) {
                        accumulate(&mut grads[a.0], g * *c);
                    }
                }
                Op::ScaleBy(a, s) => {
                    if self.wants(*s) {
                        let gs = (&g * self.value(*a)).sum();
                        accumulate(&mut grads[s.0], Tensor::from_elem((1, 1), gs));
                    }
                    if self.wants(*a) {
                        let c = self.scalar(*s);
                        accumulate(&mut grads[a.0], g * c);
                    }
                }
                Op::Shift(a) => {
                    if self.wants(*a) {
                        accumulate(&mut grads[a.0], g);
                    }
                }
                Op::Gelu(a) => {
                    if self.wants(*a) {
                        let mut ga = g;
                        ga.zip_mut_with(self.value(*a), |gv, &x| *gv *= gelu_grad(x));
                        accumulate(&mut grads[a.0], ga);
                    }
                }
                Op::Relu(a) => {
                    if self.wants(*a) {
                        let mut ga = g;
                        ga.zip_mut_with(self.value(*a), |gv, &x| {
                            if x <= 0.0 {
                                *gv = 0.0;
                            }
                        });
                        accumulate(&mut grads[a.0], ga);
                    }
                }
                Op::Sigmoid(a) => {
                    if self.wants(*a) {
                        let mut ga = g;
                        ga.zip_mut_with(self.value(Var(idx)), |gv, &y| *gv *= y * (1.0 - y));
                        accumulate(&mut grads[a.0], ga);
                    }
                }
                Op::Softmax(a) => {
                    if self.wants(*a) {
                        let p = self.value(Var(idx));
                        let mut ga = &g * p;
                        for (mut row, prow) in ga.rows_mut().into_iter().zip(p.rows()) {
                            let dot = row.sum();
                            row.zip_mut_with(&prow, |v, &pv| *v -= pv * dot);
                        }
                        accumulate(&mut grads[a.0], ga);
                    }
                }
                Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                    if self.wants(*beta) {
                        accumulate(&mut grads[beta.0], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.wants(*gamma) {
                        let gg = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut grads[gamma.0], gg);
                    }
                    if self.wants(*x) {
                        let dxhat = &g * self.value(*gamma);
                        let n = dxhat.ncols() as f64;
                        let mut gx = Tensor::zeros(dxhat.raw_dim());
                        for r in 0..dxhat.nrows() {
                            let dr = dxhat.row(r);
                            let xr = xhat.row(r);
                            let sum_d = dr.sum();
                            let sum_dx = dr.iter().zip(xr.iter()).map(|(a, b)| a * b).sum::<f64>();
                            let is = inv_std[r];
                            for c in 0..dr.len() {
                                gx[[r, c]] = is / n * (n * dr[c] - sum_d - xr[c] * sum_dx);
                            }
                        }
                        accumulate(&mut grads[x.0], gx);
                    }
                }
                Op::Gather { table, ids } => {
                    if self.wants(*table) {
                        let t = self.value(*table);
                        let mut gt = Tensor::zeros(t.raw_dim());
                        for (i, &id) in ids.iter().enumerate() {
                            let mut row = gt.row_mut(id);
                            row += &g.row(i);
                        }
                        accumulate(&mut grads[table.0], gt);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let n = self.value(*p).nrows();
                        if self.wants(*p) {
                            accumulate(&mut grads[p.0], g.slice(s![start..start + n, ..]).to_owned());
                        }
                        start += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let n = self.value(*p).ncols();
                        if self.wants(*p) {
                            accumulate(&mut grads[p.0], g.slice(s![.., start..start + n]).to_owned());
                        }
                        start += n;
                    }
                }
                Op::SliceCols(a, start) => {
                    if self.wants(*a) {
                        let mut ga = Tensor::zeros(self.value(*a).raw_dim());
                        ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                        accumulate(&mut grads[a.0], ga);
                    }
                }
                Op::SelectRows(a, rows) => {
                    if self.wants(*a) {
                        let mut ga = Tensor::zeros(self.value(*a).raw_dim());
                        for (i, &r) in rows.iter().enumerate() {
                            let mut row = ga.row_mut(r);
                            row += &g.row(i);
                        }
                        accumulate(&mut grads[a.0], ga);
                    }
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    if self.wants(*logits) {
                        let scale = g[[0, 0]] / targets.len().max(1) as f64;
                        let mut gl = probs.clone();
                        for (t, &y) in targets.iter().enumerate() {
                            gl[[t, y]] -= 1.0;
                        }
                        gl *= scale;
                        accumulate(&mut grads[logits.0], gl);
                    }
                }
                Op::SqErrSum { pred, target } => {
                    if self.wants(*pred) {
                        let gp = (self.value(*pred) - target) * (2.0 * g[[0, 0]]);
                        accumulate(&mut grads[pred.0], gp);
                    }
                }
                Op::Sum(a) => {
                    if self.wants(*a) {
                        let ga = Tensor::from_elem(self.value(*a).raw_dim(), g[[0, 0]]);
                        accumulate(&mut grads[a.0], ga);
                    }
                }
            }
        }
        Gradients { params: param_grads, nodes: grads }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(existing) => *existing += &g,
        None => *slot = Some(g),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + GELU_A * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn softmax_rows(a: ArrayView2<f64>) -> Tensor {
    let mut out = a.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
    out
}

/// `log softmax(row)[index]`, computed stably.
pub fn log_softmax_at(row: ndarray::ArrayView1<f64>, index: usize) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row[index] - lse
}

/// Full row of log-probabilities.
pub fn log_softmax(row: ndarray::ArrayView1<f64>) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}
