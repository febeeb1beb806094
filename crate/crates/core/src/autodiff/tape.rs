//! Define-by-run tape. Every forward primitive appends a node holding its
//! output value and the handles of its inputs; `backward` walks the nodes in
//! reverse and accumulates vector-Jacobian products.

use super::tensor::{gemm, gemm_new, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an operation defined outside this module.
///
/// `grad_out` has the shape of the op's output; the returned vector has one
/// entry per input (None when that input receives no gradient).
pub trait CustomBackward {
    fn name(&self) -> &'static str;
    fn backward(&self, grad_out: &[f64], inputs: &[&Tensor]) -> Vec<Option<Vec<f64>>>;
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Affine(Var, Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    /// Keeps `sigmoid(input)` for the backward pass; empty on no-grad tapes.
    Silu { input: Var, sig: Vec<f64> },
    Sigmoid(Var),
    Sum(Var),
    Mean(Var),
    SqErrRows(Var, Var),
    ConcatCols(Var, Var),
    SliceCols { input: Var, start: usize },
    GatherRows { input: Var, idx: Vec<usize> },
    SelectRows { mask: Vec<bool>, when_false: Var, when_true: Var },
    L2NormRows { input: Var, norms: Vec<f64>, eps: f64 },
    Scale(Var, f64),
    Shift(Var),
    Custom { inputs: Vec<Var>, rule: Box<dyn CustomBackward> },
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `var`; zeros if `var` is not on a path to the root.
    pub fn get(&self, var: Var) -> Tensor {
        let shape = self.shapes[var.0].clone();
        match &self.grads[var.0] {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn reached(&self, var: Var) -> bool {
        self.grads[var.0].is_some()
    }
}

pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape { op, lhs: a.shape().to_vec(), rhs: b.shape().to_vec() }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grad_enabled: true }
    }

    /// A tape that evaluates forward values only; `backward` is refused.
    pub fn no_grad() -> Self {
        Self { nodes: Vec::new(), grad_enabled: false }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let tracked = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].tracked);
        let op = if tracked { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        let tracked = self.grad_enabled;
        self.nodes.push(Node { value, op: Op::Leaf, tracked });
        Var(self.nodes.len() - 1)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, tracked: false });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, k) = ta.require_matrix("matmul")?;
        let (k2, m) = tb.require_matrix("matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", ta, tb));
        }
        let out = gemm_new(ta.values(), n, k, false, tb.values(), k, m, false);
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::MatMul(a, b), &[a, b]))
    }

    /// `x W + b` with `b` broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let (n, k) = tx.require_matrix("affine")?;
        let (k2, m) = tw.require_matrix("affine")?;
        if k != k2 {
            return Err(shape_err("affine", tx, tw));
        }
        if tb.numel() != m || tb.shape().len() > 1 && tb.rows() != 1 {
            return Err(shape_err("affine", tw, tb));
        }
        let mut out = Vec::with_capacity(n * m);
        for _ in 0..n {
            out.extend_from_slice(tb.values());
        }
        gemm(tx.values(), n, k, false, tw.values(), k, m, false, 1.0, &mut out);
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::Affine(x, w, b), &[x, w, b]))
    }

    /// `a[i, j] + row[j]` for every row `i`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        let (_, m) = ta.require_matrix("add_row")?;
        if tr.numel() != m || tr.shape().len() > 1 && tr.rows() != 1 {
            return Err(shape_err("add_row", ta, tr));
        }
        let rv = tr.values();
        let out: Vec<f64> = ta
            .values()
            .chunks_exact(m)
            .flat_map(|r| r.iter().zip(rv).map(|(x, b)| x + b))
            .collect();
        Ok(self.push(Tensor::from_parts(ta.shape().to_vec(), out), Op::AddRow(a, row), &[a, row]))
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta, tb));
        }
        let out = ta.values().iter().zip(tb.values()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(ta.shape().to_vec(), out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let ta = self.value(a);
        Tensor::from_parts(ta.shape().to_vec(), ta.values().iter().map(|&x| f(x)).collect())
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.map(a, |x| x.max(0.0));
        self.push(t, Op::Relu(a), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        if !(self.grad_enabled && self.nodes[a.0].tracked) {
            let t = self.map(a, |x| x * sigmoid(x));
            return self.push(t, Op::Silu { input: a, sig: Vec::new() }, &[a]);
        }
        let sig: Vec<f64> = ta.values().iter().map(|&x| sigmoid(x)).collect();
        let t = Tensor::from_parts(ta.shape().to_vec(), ta.values().iter().zip(&sig).map(|(x, s)| x * s).collect());
        self.push(t, Op::Silu { input: a, sig }, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.map(a, sigmoid);
        self.push(t, Op::Sigmoid(a), &[a])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.map(a, |x| c * x);
        self.push(t, Op::Scale(a, c), &[a])
    }

    pub fn shift(&mut self, a: Var, c: f64) -> Var {
        let t = self.map(a, |x| x + c);
        self.push(t, Op::Shift(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).values().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let s = ta.values().iter().sum::<f64>() / ta.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Mean over rows of the squared Euclidean norm of `a_i - b_i`.
    pub fn sq_err_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("sq_err_rows", ta, tb));
        }
        let n = ta.rows() as f64;
        let s = ta.values().iter().zip(tb.values()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
        Ok(self.push(Tensor::scalar(s), Op::SqErrRows(a, b), &[a, b]))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, ca) = ta.require_matrix("concat_cols")?;
        let (n2, cb) = tb.require_matrix("concat_cols")?;
        if n != n2 {
            return Err(shape_err("concat_cols", ta, tb));
        }
        let mut out = Vec::with_capacity(n * (ca + cb));
        for i in 0..n {
            out.extend_from_slice(ta.row(i));
            out.extend_from_slice(tb.row(i));
        }
        Ok(self.push(Tensor::from_parts(vec![n, ca + cb], out), Op::ConcatCols(a, b), &[a, b]))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        let (n, c) = ta.require_matrix("slice_cols")?;
        if len == 0 || start + len > c {
            return Err(Error::Shape { op: "slice_cols", lhs: ta.shape().to_vec(), rhs: vec![start, len] });
        }
        let mut out = Vec::with_capacity(n * len);
        for i in 0..n {
            out.extend_from_slice(&ta.row(i)[start..start + len]);
        }
        Ok(self.push(Tensor::from_parts(vec![n, len], out), Op::SliceCols { input: a, start }, &[a]))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let (n, _) = ta.require_matrix("gather_rows")?;
        if idx.is_empty() || idx.iter().any(|&i| i >= n) {
            return Err(Error::Shape { op: "gather_rows", lhs: ta.shape().to_vec(), rhs: vec![idx.len()] });
        }
        let t = ta.select_rows(idx);
        Ok(self.push(t, Op::GatherRows { input: a, idx: idx.to_vec() }, &[a]))
    }

    /// Row `i` of `when_true` if `mask[i]`, else row `i` of `when_false`.
    pub fn select_rows(&mut self, mask: &[bool], when_false: Var, when_true: Var) -> Result<Var> {
        let (tf, tt) = (self.value(when_false), self.value(when_true));
        if tf.shape() != tt.shape() {
            return Err(shape_err("select_rows", tf, tt));
        }
        let (n, _) = tf.require_matrix("select_rows")?;
        if mask.len() != n {
            return Err(Error::Shape { op: "select_rows", lhs: tf.shape().to_vec(), rhs: vec![mask.len()] });
        }
        let mut out = Vec::with_capacity(tf.numel());
        for (i, &m) in mask.iter().enumerate() {
            out.extend_from_slice(if m { tt.row(i) } else { tf.row(i) });
        }
        let t = Tensor::from_parts(tf.shape().to_vec(), out);
        Ok(self.push(t, Op::SelectRows { mask: mask.to_vec(), when_false, when_true }, &[when_false, when_true]))
    }

    /// `x / max(||x||, eps)` applied to each row.
    pub fn l2norm_rows(&mut self, a: Var, eps: f64) -> Result<Var> {
        let ta = self.value(a);
        let (n, c) = ta.require_matrix("l2norm_rows")?;
        let mut norms = Vec::with_capacity(n);
        let mut out = Vec::with_capacity(n * c);
        for i in 0..n {
            let r = ta.row(i);
            let raw = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            norms.push(raw);
            let nrm = raw.max(eps);
            out.extend(r.iter().map(|x| x / nrm));
        }
        let t = Tensor::from_parts(vec![n, c], out);
        Ok(self.push(t, Op::L2NormRows { input: a, norms, eps }, &[a]))
    }

    /// Records an externally computed value with its own backward rule.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, rule: Box<dyn CustomBackward>) -> Var {
        self.push(value, Op::Custom { inputs: inputs.to_vec(), rule }, inputs)
    }

    /// Reverse sweep from a scalar root. Gradients are kept for leaves only.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if !self.grad_enabled {
            return Err(Error::Contract("backward on a no-grad tape".into()));
        }
        let root_val = self.value(root);
        if !root_val.is_scalar() {
            return Err(Error::Contract(format!("backward root must be scalar, got shape {:?}", root_val.shape())));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[root.0].tracked {
            grads[root.0] = Some(vec![1.0]);
        }
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            } else {
                self.propagate(node, g, &mut grads);
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
        if !self.nodes[v.0].tracked {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn propagate(&self, node: &Node, mut g: Vec<f64>, grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        let tracked = |v: &Var| self.nodes[v.0].tracked;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, k) = (ta.rows(), ta.cols());
                let m = tb.cols();
                if tracked(a) {
                    let da = gemm_new(&g, n, m, false, tb.values(), k, m, true);
                    self.accumulate(grads, *a, da);
                }
                if tracked(b) {
                    let db = gemm_new(ta.values(), n, k, true, &g, n, m, false);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Affine(x, w, b) => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (n, k) = (tx.rows(), tx.cols());
                let m = tw.cols();
                if tracked(x) {
                    let dx = gemm_new(&g, n, m, false, tw.values(), k, m, true);
                    self.accumulate(grads, *x, dx);
                }
                if tracked(w) {
                    let dw = gemm_new(tx.values(), n, k, true, &g, n, m, false);
                    self.accumulate(grads, *w, dw);
                }
                if tracked(b) {
                    self.accumulate(grads, *b, column_sums(&g, m));
                }
            }
            Op::AddRow(a, row) => {
                if tracked(row) {
                    self.accumulate(grads, *row, column_sums(&g, out.cols()));
                }
                self.accumulate(grads, *a, g);
            }
            Op::Add(a, b) => {
                if tracked(a) {
                    self.accumulate(grads, *a, g.clone());
                }
                self.accumulate(grads, *b, g);
            }
            Op::Sub(a, b) => {
                if tracked(a) {
                    self.accumulate(grads, *a, g.clone());
                }
                g.iter_mut().for_each(|x| *x = -*x);
                self.accumulate(grads, *b, g);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if tracked(a) {
                    self.accumulate(grads, *a, g.iter().zip(tb.values()).map(|(g, y)| g * y).collect());
                }
                if tracked(b) {
                    g.iter_mut().zip(ta.values()).for_each(|(g, x)| *g *= x);
                    self.accumulate(grads, *b, g);
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a).values();
                g.iter_mut().zip(x).for_each(|(g, &x)| {
                    if x <= 0.0 {
                        *g = 0.0
                    }
                });
                self.accumulate(grads, *a, g);
            }
            Op::Silu { input, sig } => {
                let x = self.value(*input).values();
                g.iter_mut().zip(x).zip(sig).for_each(|((g, &x), &s)| *g *= s * (1.0 + x * (1.0 - s)));
                self.accumulate(grads, *input, g);
            }
            Op::Sigmoid(a) => {
                g.iter_mut().zip(out.values()).for_each(|(g, y)| *g *= y * (1.0 - y));
                self.accumulate(grads, *a, g);
            }
            Op::Scale(a, c) => {
                g.iter_mut().for_each(|x| *x *= c);
                self.accumulate(grads, *a, g);
            }
            Op::Shift(a) => self.accumulate(grads, *a, g),
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                self.accumulate(grads, *a, vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                self.accumulate(grads, *a, vec![g[0] / n as f64; n]);
            }
            Op::SqErrRows(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let c = 2.0 * g[0] / ta.rows() as f64;
                let d: Vec<f64> = ta.values().iter().zip(tb.values()).map(|(x, y)| c * (x - y)).collect();
                if tracked(b) {
                    self.accumulate(grads, *b, d.iter().map(|x| -x).collect());
                }
                self.accumulate(grads, *a, d);
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(*a).cols();
                let cb = self.value(*b).cols();
                let mut da = Vec::with_capacity(out.rows() * ca);
                let mut db = Vec::with_capacity(out.rows() * cb);
                for r in g.chunks_exact(ca + cb) {
                    da.extend_from_slice(&r[..ca]);
                    db.extend_from_slice(&r[ca..]);
                }
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::SliceCols { input, start } => {
                let c = self.value(*input).cols();
                let len = out.cols();
                let mut d = vec![0.0; self.value(*input).numel()];
                for (i, r) in g.chunks_exact(len).enumerate() {
                    d[i * c + start..i * c + start + len].copy_from_slice(r);
                }
                self.accumulate(grads, *input, d);
            }
            Op::GatherRows { input, idx } => {
                let c = out.cols();
                let mut d = vec![0.0; self.value(*input).numel()];
                for (r, &i) in g.chunks_exact(c).zip(idx) {
                    d[i * c..(i + 1) * c].iter_mut().zip(r).for_each(|(a, b)| *a += b);
                }
                self.accumulate(grads, *input, d);
            }
            Op::SelectRows { mask, when_false, when_true } => {
                let c = out.cols();
                let mut other = vec![0.0; g.len()];
                // `g` keeps the true rows, `other` receives the false rows
                for (i, r) in g.chunks_exact_mut(c).enumerate() {
                    if !mask[i] {
                        other[i * c..(i + 1) * c].copy_from_slice(r);
                        r.iter_mut().for_each(|x| *x = 0.0);
                    }
                }
                self.accumulate(grads, *when_false, other);
                self.accumulate(grads, *when_true, g);
            }
            Op::L2NormRows { input, norms, eps } => {
                let c = out.cols();
                for (i, (gr, yr)) in g.chunks_exact_mut(c).zip(out.values().chunks_exact(c)).enumerate() {
                    let nrm = norms[i];
                    // inside the clamp the map is x / eps, a plain scaling
                    if nrm <= *eps {
                        gr.iter_mut().for_each(|g| *g /= eps);
                    } else {
                        let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                        gr.iter_mut().zip(yr).for_each(|(g, y)| *g = (*g - y * dot) / nrm);
                    }
                }
                self.accumulate(grads, *input, g);
            }
            Op::Custom { inputs, rule } => {
                let vals: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                let ds = rule.backward(&g, &vals);
                for (v, d) in inputs.iter().zip(ds) {
                    if let Some(d) = d {
                        self.accumulate(grads, *v, d);
                    }
                }
            }
        }
    }
}

fn column_sums(g: &[f64], m: usize) -> Vec<f64> {
    let mut d = vec![0.0; m];
    for r in g.chunks_exact(m) {
        d.iter_mut().zip(r).for_each(|(d, x)| *d += x);
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(r: usize, c: usize, v: &[f64]) -> Tensor {
        Tensor::matrix(r, c, v.to_vec()).unwrap()
    }

    #[test]
    fn relu_values() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let y = t.relu(x);
        assert_eq!(t.value(y).values(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn identity_matmul() {
        let mut t = Tape::new();
        let i = t.constant(mat(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let b = t.constant(mat(2, 2, &[3.0, 4.0, 5.0, 6.0]));
        let c = t.matmul(i, b).unwrap();
        assert_eq!(t.value(c).values(), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn l2norm_three_four_five() {
        let mut t = Tape::new();
        let x = t.constant(mat(1, 2, &[3.0, 4.0]));
        let y = t.l2norm_rows(x, 1e-12).unwrap();
        let v = t.value(y).values();
        assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn l2norm_zero_row_stays_finite() {
        let mut t = Tape::new();
        let x = t.param(mat(1, 2, &[0.0, 0.0]));
        let y = t.l2norm_rows(x, 1e-12).unwrap();
        let s = t.sum(y);
        let g = t.backward(s).unwrap();
        assert!(t.value(y).is_finite());
        assert!(g.get(x).is_finite());
    }

    #[test]
    fn matmul_shape_error_names_op_and_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn sum_grad_is_ones() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.0, -2.0, 3.0]));
        let s = t.sum(x);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).values(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn mse_at_minimum_has_zero_grad() {
        let mut t = Tape::new();
        let x = t.param(mat(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let y = t.constant(mat(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let l = t.sq_err_rows(x, y).unwrap();
        let g = t.backward(l).unwrap();
        assert!(g.get(x).values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.0, 2.0]));
        let y = t.relu(x);
        assert!(matches!(t.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn unreached_leaf_gets_zero() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.0, 2.0]));
        let unused = t.param(Tensor::vector(vec![5.0]));
        let s = t.sum(x);
        let g = t.backward(s).unwrap();
        assert!(!g.reached(unused));
        assert_eq!(g.get(unused).values(), &[0.0]);
    }

    #[test]
    fn no_grad_tape_refuses_backward() {
        let mut t = Tape::no_grad();
        let x = t.param(Tensor::vector(vec![1.0]));
        let s = t.sum(x);
        assert!(t.backward(s).is_err());
    }

    #[test]
    fn select_rows_routes_gradient() {
        let mut t = Tape::new();
        let a = t.param(mat(2, 1, &[1.0, 2.0]));
        let b = t.param(mat(2, 1, &[10.0, 20.0]));
        let s = t.select_rows(&[false, true], a, b).unwrap();
        assert_eq!(t.value(s).values(), &[1.0, 20.0]);
        let l = t.sum(s);
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(a).values(), &[1.0, 0.0]);
        assert_eq!(g.get(b).values(), &[0.0, 1.0]);
    }
}
