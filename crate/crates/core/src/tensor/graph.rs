use std::collections::BTreeMap;

use super::{matmul_into, softmax_in_place, Result, Tensor, TensorError};

/// Identifier of a trainable leaf, stable across graphs (index into the
/// owning parameter store).
pub type ParamId = usize;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    Softmax(usize),
    CausalSoftmax(usize),
    LogSoftmax(usize),
    LayerNorm { x: usize, gamma: usize, beta: usize },
    Gelu(usize),
    GatherRows(usize, Vec<usize>),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceCols { x: usize, start: usize },
    SelectRows(usize, Vec<usize>),
    Pick(usize, Vec<(usize, usize)>),
    Sum(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    param: Option<ParamId>,
    /// Op-specific saved state (layer norm: normalized input then inverse std per row).
    aux: Vec<f64>,
}

/// A single-threaded tape of tensor operations in topological order.
///
/// Nodes are immutable once recorded. [`Graph::backward`] walks the tape in
/// reverse exactly once and returns the gradient of every parameter leaf.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients keyed by parameter id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    map: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.map.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &Tensor)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn insert(&mut self, id: ParamId, t: Tensor) {
        self.map.insert(id, t);
    }

    /// `self += scale * other`, adding missing entries.
    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (id, g) in &other.map {
            match self.map.get_mut(id) {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += scale * b;
                    }
                }
                None => {
                    let mut t = g.clone();
                    t.data_mut().iter_mut().for_each(|v| *v *= scale);
                    self.map.insert(*id, t);
                }
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.map.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= c);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.map.values().map(Tensor::sq_norm).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.map.values().all(Tensor::all_finite)
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

/// `out[m x n] += a[m x k] * b[n x k]^T`
fn matmul_nt_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[m x n] += a[k x m]^T * b[k x n]`
fn matmul_tn_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub(crate) const LN_EPS: f64 = 1e-5;

impl Graph {
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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[usize]) -> Var {
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        self.push_with(value, op, needs_grad, Vec::new())
    }

    fn push_with(&mut self, value: Tensor, op: Op, needs_grad: bool, aux: Vec<f64>) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param: None,
            aux,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf. Its gradient is reported under `id`.
    pub fn param(&mut self, id: ParamId, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
            param: Some(id),
            aux: Vec::new(),
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_with(value, Op::Leaf, false, Vec::new())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims("matmul")?;
        let (k2, n) = self.value(b).dims("matmul")?;
        if k != k2 {
            return Err(mismatch("matmul", self.value(a), self.value(b)));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a.0, b.0), &[a.0, b.0]))
    }

    /// `a * b^T`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims("matmul_nt")?;
        let (n, k2) = self.value(b).dims("matmul_nt")?;
        if k != k2 {
            return Err(mismatch("matmul_nt", self.value(a), self.value(b)));
        }
        let mut out = vec![0.0; m * n];
        matmul_nt_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNt(a.0, b.0), &[a.0, b.0]))
    }

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a.0, b.0), &[a.0, b.0]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a.0, b.0), &[a.0, b.0]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a.0, b.0), &[a.0, b.0]))
    }

    /// Adds a `1 x n` row to every row of an `m x n` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims("add_row")?;
        let (r, n2) = self.value(row).dims("add_row")?;
        if r != 1 || n != n2 {
            return Err(mismatch("add_row", self.value(x), self.value(row)));
        }
        let rv = self.value(row).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for i in 0..m {
            for (d, b) in data[i * n..(i + 1) * n].iter_mut().zip(&rv) {
                *d += b;
            }
        }
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::AddRow(x.0, row.0), &[x.0, row.0]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * c).collect();
        let t = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::Scale(x.0, c), &[x.0])
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, _) = self.value(x).dims("softmax_rows")?;
        let mut t = self.value(x).clone();
        for r in 0..m {
            softmax_in_place(t.row_slice_mut(r));
        }
        Ok(self.push(t, Op::Softmax(x.0), &[x.0]))
    }

    /// Softmax of attention scores where query row `i` may only see key
    /// columns `j <= i + (n - m)`.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims("causal_softmax")?;
        if n < m {
            return Err(TensorError::NotMatrix {
                op: "causal_softmax",
                shape: vec![m, n],
            });
        }
        let offset = n - m;
        let mut t = self.value(x).clone();
        for r in 0..m {
            let row = t.row_slice_mut(r);
            for v in row.iter_mut().skip(r + offset + 1) {
                *v = f64::NEG_INFINITY;
            }
            softmax_in_place(row);
        }
        Ok(self.push(t, Op::CausalSoftmax(x.0), &[x.0]))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, _) = self.value(x).dims("log_softmax_rows")?;
        let mut t = self.value(x).clone();
        for r in 0..m {
            let row = t.row_slice_mut(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        Ok(self.push(t, Op::LogSoftmax(x.0), &[x.0]))
    }

    /// Row-wise layer normalization with `1 x n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims("layer_norm")?;
        for p in [gamma, beta] {
            if self.value(p).shape() != [1, n] {
                return Err(mismatch("layer_norm", self.value(x), self.value(p)));
            }
        }
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = vec![0.0; m * n];
        let mut aux = vec![0.0; m * n + m];
        for r in 0..m {
            let row = &xs[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            aux[m * n + r] = inv;
            for c in 0..n {
                let xh = (row[c] - mean) * inv;
                aux[r * n + c] = xh;
                out[r * n + c] = xh * g[c] + b[c];
            }
        }
        let needs = [x, gamma, beta].iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push_with(
            Tensor::new(vec![m, n], out)?,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
            },
            needs,
            aux,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| gelu(*v)).collect();
        let t = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::Gelu(x.0), &[x.0])
    }

    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, n) = self.value(table).dims("gather_rows")?;
        let mut data = Vec::with_capacity(ids.len() * n);
        for &i in ids {
            if i >= rows {
                return Err(TensorError::RowIndex { index: i, rows });
            }
            data.extend_from_slice(self.value(table).row_slice(i));
        }
        let t = Tensor::new(vec![ids.len(), n], data)?;
        Ok(self.push(t, Op::GatherRows(table.0, ids.to_vec()), &[table.0]))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.value(x).dims("select_rows")?;
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= m {
                return Err(TensorError::RowIndex { index: r, rows: m });
            }
            data.extend_from_slice(self.value(x).row_slice(r));
        }
        let t = Tensor::new(vec![rows.len(), n], data)?;
        Ok(self.push(t, Op::SelectRows(x.0, rows.to_vec()), &[x.0]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(TensorError::Empty("concat_rows"))?;
        let (_, n) = self.value(*first).dims("concat_rows")?;
        let mut data = Vec::new();
        let mut m = 0;
        for p in parts {
            let (r, c) = self.value(*p).dims("concat_rows")?;
            if c != n {
                return Err(mismatch("concat_rows", self.value(*first), self.value(*p)));
            }
            data.extend_from_slice(self.value(*p).data());
            m += r;
        }
        let idx: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let t = Tensor::new(vec![m, n], data)?;
        Ok(self.push(t, Op::ConcatRows(idx.clone()), &idx))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(TensorError::Empty("concat_cols"))?;
        let (m, _) = self.value(*first).dims("concat_cols")?;
        let mut total = 0;
        for p in parts {
            let (r, c) = self.value(*p).dims("concat_cols")?;
            if r != m {
                return Err(mismatch("concat_cols", self.value(*first), self.value(*p)));
            }
            total += c;
        }
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for p in parts {
                data.extend_from_slice(self.value(*p).row_slice(r));
            }
        }
        let idx: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let t = Tensor::new(vec![m, total], data)?;
        Ok(self.push(t, Op::ConcatCols(idx.clone()), &idx))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.value(x).dims("slice_cols")?;
        if start + len > n {
            return Err(TensorError::ShapeMismatch {
                op: "slice_cols",
                lhs: vec![m, n],
                rhs: vec![start, len],
            });
        }
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&self.value(x).row_slice(r)[start..start + len]);
        }
        let t = Tensor::new(vec![m, len], data)?;
        Ok(self.push(t, Op::SliceCols { x: x.0, start }, &[x.0]))
    }

    /// Gathers individual entries into a `k x 1` column.
    pub fn pick(&mut self, x: Var, coords: &[(usize, usize)]) -> Result<Var> {
        let (m, n) = self.value(x).dims("pick")?;
        let mut data = Vec::with_capacity(coords.len());
        for &(r, c) in coords {
            if r >= m || c >= n {
                return Err(TensorError::ShapeMismatch {
                    op: "pick",
                    lhs: vec![m, n],
                    rhs: vec![r, c],
                });
            }
            data.push(self.value(x).get(r, c));
        }
        let t = Tensor::new(vec![coords.len(), 1], data)?;
        Ok(self.push(t, Op::Pick(x.0, coords.to_vec()), &[x.0]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x.0), &[x.0])
    }

    /// Sum of scalars (or of everything, for larger inputs).
    pub fn sum_all(&mut self, xs: &[Var]) -> Result<Var> {
        let mut acc = self.sum(*xs.first().ok_or(TensorError::Empty("sum_all"))?);
        for x in &xs[1..] {
            let s = self.sum(*x);
            acc = self.add(acc, s)?;
        }
        Ok(acc)
    }

    /// Reverse sweep from a scalar `loss`. Every parameter leaf gets an
    /// entry; leaves the loss does not depend on get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(TensorError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else {
                continue;
            };
            if let Some(pid) = node.param {
                let t = Tensor::new(node.value.shape().to_vec(), dy)?;
                match out.map.get_mut(&pid) {
                    Some(acc) => acc.data_mut().iter_mut().zip(t.data()).for_each(|(a, b)| *a += b),
                    None => {
                        out.map.insert(pid, t);
                    }
                }
                continue;
            }
            self.propagate(node, &dy, &mut grads);
        }

        for node in &self.nodes {
            if let Some(pid) = node.param {
                out.map.entry(pid).or_insert_with(|| {
                    let s = node.value.shape();
                    Tensor::new(s.to_vec(), vec![0.0; node.value.numel()]).expect("shape")
                });
            }
        }
        Ok(out)
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<f64>>], i: usize) -> &'a mut Vec<f64> {
        grads[i].get_or_insert_with(|| vec![0.0; self.nodes[i].value.numel()])
    }

    fn propagate(&self, node: &Node, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (m, k) = (ta.rows(), ta.cols());
                let n = tb.cols();
                if self.wants(*a) {
                    matmul_nt_into(dy, tb.data(), self.acc(grads, *a), m, n, k);
                }
                if self.wants(*b) {
                    matmul_tn_into(ta.data(), dy, self.acc(grads, *b), k, m, n);
                }
            }
            Op::MatMulNt(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (m, k) = (ta.rows(), ta.cols());
                let n = tb.rows();
                if self.wants(*a) {
                    matmul_into(dy, tb.data(), self.acc(grads, *a), m, n, k);
                }
                if self.wants(*b) {
                    matmul_tn_into(dy, ta.data(), self.acc(grads, *b), n, m, k);
                }
            }
            Op::Add(a, b) => {
                for (idx, sign) in [(*a, 1.0), (*b, 1.0)] {
                    if self.wants(idx) {
                        self.acc(grads, idx).iter_mut().zip(dy).for_each(|(g, d)| *g += sign * d);
                    }
                }
            }
            Op::Sub(a, b) => {
                for (idx, sign) in [(*a, 1.0), (*b, -1.0)] {
                    if self.wants(idx) {
                        self.acc(grads, idx).iter_mut().zip(dy).for_each(|(g, d)| *g += sign * d);
                    }
                }
            }
            Op::Mul(a, b) => {
                for (idx, other) in [(*a, *b), (*b, *a)] {
                    if self.wants(idx) {
                        let ov = self.nodes[other].value.data();
                        for ((g, d), o) in self.acc(grads, idx).iter_mut().zip(dy).zip(ov) {
                            *g += d * o;
                        }
                    }
                }
            }
            Op::AddRow(x, row) => {
                let n = y.cols();
                if self.wants(*x) {
                    self.acc(grads, *x).iter_mut().zip(dy).for_each(|(g, d)| *g += d);
                }
                if self.wants(*row) {
                    let g = self.acc(grads, *row);
                    for chunk in dy.chunks(n) {
                        g.iter_mut().zip(chunk).for_each(|(g, d)| *g += d);
                    }
                }
            }
            Op::Scale(x, c) => {
                self.acc(grads, *x).iter_mut().zip(dy).for_each(|(g, d)| *g += c * d);
            }
            Op::Softmax(x) | Op::CausalSoftmax(x) => {
                let n = y.cols();
                let g = self.acc(grads, *x);
                for r in 0..y.rows() {
                    let p = &y.data()[r * n..(r + 1) * n];
                    let d = &dy[r * n..(r + 1) * n];
                    let dot: f64 = p.iter().zip(d).map(|(a, b)| a * b).sum();
                    for c in 0..n {
                        g[r * n + c] += p[c] * (d[c] - dot);
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let n = y.cols();
                let g = self.acc(grads, *x);
                for r in 0..y.rows() {
                    let ly = &y.data()[r * n..(r + 1) * n];
                    let d = &dy[r * n..(r + 1) * n];
                    let total: f64 = d.iter().sum();
                    for c in 0..n {
                        g[r * n + c] += d[c] - ly[c].exp() * total;
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta } => {
                let (m, n) = (y.rows(), y.cols());
                let xhat = &node.aux[..m * n];
                let inv = &node.aux[m * n..];
                if self.wants(*gamma) {
                    let g = self.acc(grads, *gamma);
                    for r in 0..m {
                        for c in 0..n {
                            g[c] += dy[r * n + c] * xhat[r * n + c];
                        }
                    }
                }
                if self.wants(*beta) {
                    let g = self.acc(grads, *beta);
                    for r in 0..m {
                        for c in 0..n {
                            g[c] += dy[r * n + c];
                        }
                    }
                }
                if self.wants(*x) {
                    let gam = self.nodes[*gamma].value.data().to_vec();
                    let g = self.acc(grads, *x);
                    for r in 0..m {
                        let dxh: Vec<f64> = (0..n).map(|c| dy[r * n + c] * gam[c]).collect();
                        let xh = &xhat[r * n..(r + 1) * n];
                        let mean_d = dxh.iter().sum::<f64>() / n as f64;
                        let mean_dx = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for c in 0..n {
                            g[r * n + c] += inv[r] * (dxh[c] - mean_d - xh[c] * mean_dx);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let xs = self.nodes[*x].value.data();
                for ((g, d), v) in self.acc(grads, *x).iter_mut().zip(dy).zip(xs) {
                    *g += d * gelu_grad(*v);
                }
            }
            Op::GatherRows(table, ids) => {
                let n = y.cols();
                let g = self.acc(grads, *table);
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..n {
                        g[id * n + c] += dy[r * n + c];
                    }
                }
            }
            Op::SelectRows(x, rows) => {
                let n = y.cols();
                let g = self.acc(grads, *x);
                for (r, &src) in rows.iter().enumerate() {
                    for c in 0..n {
                        g[src * n + c] += dy[r * n + c];
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.nodes[p].value.numel();
                    if self.wants(p) {
                        let g = self.acc(grads, p);
                        g.iter_mut().zip(&dy[off..off + len]).for_each(|(g, d)| *g += d);
                    }
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = y.cols();
                let mut col = 0;
                for &p in parts {
                    let (m, c) = (self.nodes[p].value.rows(), self.nodes[p].value.cols());
                    if self.wants(p) {
                        let g = self.acc(grads, p);
                        for r in 0..m {
                            for j in 0..c {
                                g[r * c + j] += dy[r * total + col + j];
                            }
                        }
                    }
                    col += c;
                }
            }
            Op::SliceCols { x, start } => {
                let n = self.nodes[*x].value.cols();
                let len = y.cols();
                let g = self.acc(grads, *x);
                for r in 0..y.rows() {
                    for j in 0..len {
                        g[r * n + start + j] += dy[r * len + j];
                    }
                }
            }
            Op::Pick(x, coords) => {
                let n = self.nodes[*x].value.cols();
                let g = self.acc(grads, *x);
                for (i, &(r, c)) in coords.iter().enumerate() {
                    g[r * n + c] += dy[i];
                }
            }
            Op::Sum(x) => {
                let d = dy[0];
                self.acc(grads, *x).iter_mut().for_each(|g| *g += d);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_all_ones() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::full(2, 3, 1.0));
        let b = g.constant(Tensor::full(3, 1, 1.0));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[3.0, 3.0]);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(vec![0.0, 0.0]));
        let p = g.softmax_rows(x).unwrap();
        assert_eq!(g.value(p).data(), &[0.5, 0.5]);
    }

    #[test]
    fn gather_rows_is_row_lookup() {
        let mut g = Graph::new();
        let e = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let ev = g.constant(e);
        let r = g.gather_rows(ev, &[2, 0]).unwrap();
        assert_eq!(g.value(r).data(), &[5.0, 6.0, 1.0, 2.0]);
        assert!(matches!(
            g.gather_rows(ev, &[3]),
            Err(TensorError::RowIndex { index: 3, rows: 3 })
        ));
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.param(0, Tensor::new(vec![2, 3], vec![0.5; 6]).unwrap());
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(0).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn inner_product_gradient() {
        let mut g = Graph::new();
        let a = g.param(0, Tensor::row(vec![1.0, -2.0, 3.0]));
        let b = g.param(1, Tensor::row(vec![4.0, 5.0, -6.0]));
        let ab = g.mul(a, b).unwrap();
        let l = g.sum(ab);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(0).unwrap().data(), &[4.0, 5.0, -6.0]);
        assert_eq!(grads.get(1).unwrap().data(), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(0, Tensor::zeros(2, 2));
        let y = g.scale(x, 2.0);
        assert!(matches!(g.backward(y), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn unused_params_get_zero_gradients() {
        let mut g = Graph::new();
        let x = g.param(0, Tensor::row(vec![1.0]));
        let _unused = g.param(7, Tensor::zeros(2, 2));
        let l = g.sum(x);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(7).unwrap().data(), &[0.0; 4]);
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(3, 3));
        let p = g.causal_softmax(x).unwrap();
        let v = g.value(p);
        assert_eq!(v.row_slice(0), &[1.0, 0.0, 0.0]);
        assert_eq!(v.row_slice(1), &[0.5, 0.5, 0.0]);
    }
}
