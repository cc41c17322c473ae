//! Matrix-valued reverse-mode automatic differentiation.
//!
//! A [`Graph`] records operations on dense row-major matrices as they are
//! evaluated. [`Graph::backward`] walks the record in reverse and returns the
//! gradient of a scalar (1x1) node with respect to every node.

use serde::{Deserialize, Serialize};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor {rows}x{cols} given {} values", data.len());
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn scalar(v: f64) -> Self {
        Self::new(1, 1, vec![v])
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        Self::new(1, data.len(), data)
    }

    pub fn col_vector(data: Vec<f64>) -> Self {
        Self::new(data.len(), 1, data)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on a {}x{} tensor", self.rows, self.cols);
        self.data[0]
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `a (n x k) . b (k x m)`.
fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.rows, "matmul {}x{} . {}x{}", a.rows, a.cols, b.rows, b.cols);
    let mut out = Tensor::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let arow = a.row(i);
        let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(b.row(k)) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a (n x k) . b^T` with `b (m x k)`.
fn matmul_t(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.cols, "matmul_t {}x{} . ({}x{})^T", a.rows, a.cols, b.rows, b.cols);
    let mut out = Tensor::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let arow = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = arow.iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a^T . b` with `a (k x n)`, `b (k x m)`.
fn t_matmul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.rows, b.rows);
    let mut out = Tensor::zeros(a.cols, b.cols);
    for k in 0..a.rows {
        let brow = b.row(k);
        for (i, &av) in a.row(k).iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose(a: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(a.cols, a.rows);
    for r in 0..a.rows {
        for c in 0..a.cols {
            out.data[c * a.rows + r] = a.data[r * a.cols + c];
        }
    }
    out
}

fn softmax_row(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    SoftmaxRows(Var),
    MeanRows(Var),
    Gather(Var, Vec<usize>),
    ConcatRows(Var, Var),
    SliceCols(Var, usize),
    NormalizeRows(Var),
    RowDot(Var, Var),
    Sum(Var),
    Transpose(Var),
    Stack(Vec<Var>),
    CrossEntropyDiag(Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients of one scalar with respect to every node of a graph.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to `v`, or `None` when `v` does not influence the output.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = matmul(self.value(a), self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a . b^T`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = matmul_t(self.value(a), self.value(b));
        self.push(v, Op::MatMulT(a, b))
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!((ta.rows, ta.cols), (tb.rows, tb.cols), "elementwise shape mismatch");
        Tensor::new(ta.rows, ta.cols, ta.data.iter().zip(&tb.data).map(|(x, y)| f(*x, *y)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |x, y| x / y);
        self.push(v, Op::Div(a, b))
    }

    /// Adds a `1 x m` row to every row of an `n x m` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (ta, tr) = (self.value(a), self.value(row));
        assert_eq!((tr.rows, tr.cols), (1, ta.cols), "add_row shape mismatch");
        let mut v = ta.clone();
        for r in 0..v.rows {
            for (x, b) in v.row_mut(r).iter_mut().zip(&tr.data) {
                *x += b;
            }
        }
        self.push(v, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let t = self.value(a);
        let v = Tensor::new(t.rows, t.cols, t.data.iter().map(|x| x * k).collect());
        self.push(v, Op::Scale(a, k))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for r in 0..v.rows {
            softmax_row(v.row_mut(r));
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    /// `n x m -> 1 x m` column means.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut out = vec![0.0; t.cols];
        for r in 0..t.rows {
            for (o, x) in out.iter_mut().zip(t.row(r)) {
                *o += x;
            }
        }
        let n = t.rows as f64;
        out.iter_mut().for_each(|o| *o /= n);
        self.push(Tensor::row_vector(out), Op::MeanRows(a))
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * t.cols);
        for &id in ids {
            data.extend_from_slice(t.row(id));
        }
        let v = Tensor::new(ids.len(), t.cols, data);
        self.push(v, Op::Gather(table, ids.to_vec()))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.cols, tb.cols);
        let mut data = ta.data.clone();
        data.extend_from_slice(&tb.data);
        let v = Tensor::new(ta.rows + tb.rows, ta.cols, data);
        self.push(v, Op::ConcatRows(a, b))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let t = self.value(a);
        assert!(start < end && end <= t.cols);
        let mut data = Vec::with_capacity(t.rows * (end - start));
        for r in 0..t.rows {
            data.extend_from_slice(&t.row(r)[start..end]);
        }
        let v = Tensor::new(t.rows, end - start, data);
        self.push(v, Op::SliceCols(a, start))
    }

    /// Scales each row to unit L2 norm; all-zero rows stay zero.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for r in 0..v.rows {
            let row = v.row_mut(r);
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|x| *x /= norm);
            }
        }
        self.push(v, Op::NormalizeRows(a))
    }

    /// Row-wise dot products: `n x d, n x d -> n x 1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!((ta.rows, ta.cols), (tb.rows, tb.cols));
        let data = (0..ta.rows)
            .map(|r| ta.row(r).iter().zip(tb.row(r)).map(|(x, y)| x * y).sum())
            .collect();
        self.push(Tensor::col_vector(data), Op::RowDot(a, b))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = transpose(self.value(a));
        self.push(v, Op::Transpose(a))
    }

    /// Assembles `rows x cols` scalars (row-major) into one matrix.
    pub fn stack(&mut self, items: &[Var], rows: usize, cols: usize) -> Var {
        assert_eq!(items.len(), rows * cols);
        let data = items.iter().map(|&v| self.value(v).item()).collect();
        self.push(Tensor::new(rows, cols, data), Op::Stack(items.to_vec()))
    }

    /// Mean over rows of `-log softmax(row)[i]` at the diagonal entry `i`.
    pub fn cross_entropy_diag(&mut self, logits: Var) -> Var {
        let t = self.value(logits);
        assert_eq!(t.rows, t.cols, "cross_entropy_diag needs a square matrix");
        let mut total = 0.0;
        for r in 0..t.rows {
            let row = t.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[r];
        }
        self.push(Tensor::scalar(total / t.rows as f64), Op::CrossEntropyDiag(logits))
    }

    /// Reverse sweep from the scalar `output`.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, t: Tensor| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        let val = |v: Var| &self.nodes[v.0].value;
        let out = &self.nodes[idx].value;
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                acc(*a, matmul_t(g, val(*b)));
                acc(*b, t_matmul(val(*a), g));
            }
            Op::MatMulT(a, b) => {
                // out = a b^T: da = g b, db = g^T a
                acc(*a, matmul(g, val(*b)));
                acc(*b, t_matmul(g, val(*a)));
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, Tensor::new(g.rows, g.cols, g.data.iter().map(|x| -x).collect()));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                acc(*a, Tensor::new(g.rows, g.cols, g.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect()));
                acc(*b, Tensor::new(g.rows, g.cols, g.data.iter().zip(&ta.data).map(|(x, y)| x * y).collect()));
            }
            Op::Div(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                acc(*a, Tensor::new(g.rows, g.cols, g.data.iter().zip(&tb.data).map(|(x, y)| x / y).collect()));
                acc(
                    *b,
                    Tensor::new(
                        g.rows,
                        g.cols,
                        g.data
                            .iter()
                            .zip(ta.data.iter().zip(&tb.data))
                            .map(|(x, (n, d))| -x * n / (d * d))
                            .collect(),
                    ),
                );
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                let mut gr = vec![0.0; g.cols];
                for r in 0..g.rows {
                    for (o, x) in gr.iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
                acc(*row, Tensor::row_vector(gr));
            }
            Op::Scale(a, k) => acc(*a, Tensor::new(g.rows, g.cols, g.data.iter().map(|x| x * k).collect())),
            Op::SoftmaxRows(a) => {
                let mut d = Tensor::zeros(g.rows, g.cols);
                for r in 0..g.rows {
                    let (y, gy) = (out.row(r), g.row(r));
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for ((o, yi), gi) in d.row_mut(r).iter_mut().zip(y).zip(gy) {
                        *o = yi * (gi - dot);
                    }
                }
                acc(*a, d);
            }
            Op::MeanRows(a) => {
                let n = val(*a).rows;
                let mut d = Tensor::zeros(n, g.cols);
                let inv = 1.0 / n as f64;
                for r in 0..n {
                    for (o, x) in d.row_mut(r).iter_mut().zip(&g.data) {
                        *o = x * inv;
                    }
                }
                acc(*a, d);
            }
            Op::Gather(table, ids) => {
                let t = val(*table);
                let mut d = Tensor::zeros(t.rows, t.cols);
                for (k, &id) in ids.iter().enumerate() {
                    for (o, x) in d.row_mut(id).iter_mut().zip(g.row(k)) {
                        *o += x;
                    }
                }
                acc(*table, d);
            }
            Op::ConcatRows(a, b) => {
                let split = val(*a).len();
                acc(*a, Tensor::new(val(*a).rows, g.cols, g.data[..split].to_vec()));
                acc(*b, Tensor::new(val(*b).rows, g.cols, g.data[split..].to_vec()));
            }
            Op::SliceCols(a, start) => {
                let t = val(*a);
                let mut d = Tensor::zeros(t.rows, t.cols);
                for r in 0..t.rows {
                    d.row_mut(r)[*start..*start + g.cols].copy_from_slice(g.row(r));
                }
                acc(*a, d);
            }
            Op::NormalizeRows(a) => {
                let x = val(*a);
                let mut d = Tensor::zeros(x.rows, x.cols);
                for r in 0..x.rows {
                    let norm = x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm == 0.0 {
                        continue;
                    }
                    let (y, gy) = (out.row(r), g.row(r));
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for ((o, yi), gi) in d.row_mut(r).iter_mut().zip(y).zip(gy) {
                        *o = (gi - yi * dot) / norm;
                    }
                }
                acc(*a, d);
            }
            Op::RowDot(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let mut da = Tensor::zeros(ta.rows, ta.cols);
                let mut db = Tensor::zeros(tb.rows, tb.cols);
                for r in 0..ta.rows {
                    let gr = g.data[r];
                    for (o, x) in da.row_mut(r).iter_mut().zip(tb.row(r)) {
                        *o = gr * x;
                    }
                    for (o, x) in db.row_mut(r).iter_mut().zip(ta.row(r)) {
                        *o = gr * x;
                    }
                }
                acc(*a, da);
                acc(*b, db);
            }
            Op::Sum(a) => {
                let t = val(*a);
                acc(*a, Tensor::new(t.rows, t.cols, vec![g.item(); t.len()]));
            }
            Op::Transpose(a) => acc(*a, transpose(g)),
            Op::Stack(items) => {
                for (k, &v) in items.iter().enumerate() {
                    acc(v, Tensor::scalar(g.data[k]));
                }
            }
            Op::CrossEntropyDiag(a) => {
                let t = val(*a);
                let n = t.rows as f64;
                let mut d = t.clone();
                for r in 0..t.rows {
                    let row = d.row_mut(r);
                    softmax_row(row);
                    row[r] -= 1.0;
                    row.iter_mut().for_each(|x| *x *= g.item() / n);
                }
                acc(*a, d);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central differences of `f` at every entry of `x`.
    fn numeric_grad(x: &Tensor, f: &dyn Fn(&Tensor) -> f64) -> Vec<f64> {
        let h = 1e-6;
        (0..x.len())
            .map(|k| {
                let mut p = x.clone();
                let mut m = x.clone();
                p.data[k] += h;
                m.data[k] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn sample(rows: usize, cols: usize, seed: u64) -> Tensor {
        use rand::Rng;
        let mut rng = crate::seed::rng(seed);
        Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    fn check(build: &dyn Fn(&mut Graph, Var) -> Var, x: Tensor) {
        let eval = |t: &Tensor| {
            let mut g = Graph::new();
            let v = g.leaf(t.clone());
            let out = build(&mut g, v);
            g.value(out).item()
        };
        let mut g = Graph::new();
        let v = g.leaf(x.clone());
        let out = build(&mut g, v);
        let grads = g.backward(out);
        let analytic = grads.get(v).map(|t| t.data.clone()).unwrap_or_else(|| vec![0.0; x.len()]);
        let numeric = numeric_grad(&x, &eval);
        for (a, n) in analytic.iter().zip(&numeric) {
            assert!((a - n).abs() < 1e-6 * (1.0 + a.abs()), "analytic {a} vs numeric {n}");
        }
    }

    #[test]
    fn matmul_and_softmax() {
        let w = sample(3, 4, 1);
        check(
            &|g, x| {
                let wv = g.leaf(w.clone());
                let y = g.matmul(x, wv);
                let s = g.softmax_rows(y);
                let t = g.transpose(s);
                let c = g.slice_cols(t, 0, 1);
                g.sum(c)
            },
            sample(2, 3, 2),
        );
    }

    #[test]
    fn matmul_t_gather_concat_rows() {
        let other = sample(4, 3, 3);
        check(
            &|g, x| {
                let o = g.leaf(other.clone());
                let rows = g.gather(x, &[0, 2, 2]);
                let both = g.concat_rows(rows, o);
                let y = g.matmul_t(both, x);
                let m = g.mean_rows(y);
                let s = g.normalize_rows(m);
                let sq = g.mul(s, s);
                let z = g.sum(sq);
                let w = g.sum(m);
                g.add(z, w)
            },
            sample(3, 3, 4),
        );
    }

    #[test]
    fn row_dot_add_row_div_stack_ce() {
        let row = sample(1, 3, 5);
        check(
            &|g, x| {
                let r = g.leaf(row.clone());
                let a = g.add_row(x, r);
                let n = g.normalize_rows(a);
                let d = g.row_dot(n, x);
                let parts: Vec<Var> = (0..4).map(|k| {
                    let c = g.slice_cols(x, k % 3, k % 3 + 1);
                    g.sum(c)
                }).collect();
                let m = g.stack(&parts, 2, 2);
                let ce = g.cross_entropy_diag(m);
                let num = g.sum(d);
                let den0 = g.scale(ce, 3.0);
                let one = g.leaf(Tensor::scalar(5.0));
                let den = g.add(den0, one);
                let q = g.div(num, den);
                g.sub(q, ce)
            },
            sample(4, 3, 6),
        );
    }

    #[test]
    fn zero_rows_normalize_to_zero() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(2, 3));
        let n = g.normalize_rows(x);
        assert!(g.value(n).data.iter().all(|&v| v == 0.0));
        let s = g.sum(n);
        let grads = g.backward(s);
        assert!(grads.get(x).unwrap().data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cross_entropy_matches_closed_form() {
        let mut g = Graph::new();
        let l = g.leaf(Tensor::new(2, 2, vec![1.0, -1.0, -1.0, 1.0]));
        let ce = g.cross_entropy_diag(l);
        let e = std::f64::consts::E;
        let expected = -(e / (e + 1.0 / e)).ln();
        assert!((g.value(ce).item() - expected).abs() < 1e-12);
    }
}
