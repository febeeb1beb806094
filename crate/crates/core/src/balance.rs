//! Alignment of control and treated representations.
//!
//! The balance loss is the transport cost `<H, pi>` of the entropic plan
//! between the two groups' empirical measures, with `H_ij = ||z0_i - z1_j||`.
//! Its gradient holds the plan fixed (envelope gradient), so the Sinkhorn loop
//! is never unrolled on the tape. That is the exact gradient of the
//! regularized objective and an approximation for the unregularized cost.

use std::cmp::Ordering;

use itertools::Itertools;
use serde::{Deserialize, Serialize};

use crate::autodiff::{CustomBackward, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nets::EncoderParams;

/// Pairwise Euclidean distances, `n x m`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    values: Vec<f64>,
    n: usize,
    m: usize,
}

impl CostMatrix {
    pub fn new(n: usize, m: usize, values: Vec<f64>) -> Result<Self> {
        if n == 0 || m == 0 {
            return Err(Error::EmptyGroup("cost matrix needs at least one row and one column"));
        }
        if values.len() != n * m {
            return Err(Error::Shape { op: "cost_matrix", lhs: vec![n, m], rhs: vec![values.len()] });
        }
        Ok(Self { values, n, m })
    }

    pub fn rows(&self) -> usize {
        self.n
    }

    pub fn cols(&self) -> usize {
        self.m
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.m + j]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn transpose(&self) -> CostMatrix {
        let mut t = vec![0.0; self.values.len()];
        for i in 0..self.n {
            for j in 0..self.m {
                t[j * self.n + i] = self.values[i * self.m + j];
            }
        }
        CostMatrix { values: t, n: self.m, m: self.n }
    }
}

pub fn cost_matrix(z0: &Tensor, z1: &Tensor) -> Result<CostMatrix> {
    if z0.numel() == 0 || z1.numel() == 0 {
        return Err(Error::EmptyGroup("cost matrix"));
    }
    if z0.cols() != z1.cols() {
        return Err(Error::Shape { op: "cost_matrix", lhs: z0.shape().to_vec(), rhs: z1.shape().to_vec() });
    }
    let (n, m) = (z0.rows(), z1.rows());
    let mut h = Vec::with_capacity(n * m);
    for i in 0..n {
        let a = z0.row(i);
        for j in 0..m {
            let d2: f64 = a.iter().zip(z1.row(j)).map(|(x, y)| (x - y) * (x - y)).sum();
            h.push(d2.sqrt());
        }
    }
    CostMatrix::new(n, m, h)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SinkhornOptions {
    pub epsilon: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for SinkhornOptions {
    fn default() -> Self {
        Self { epsilon: 0.1, max_iter: 200, tol: 1e-6 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    /// Coupling, `n x m` row-major.
    pub plan: Vec<f64>,
    pub n: usize,
    pub m: usize,
    /// `<H, plan>`
    pub sharp_cost: f64,
    pub iterations: usize,
    /// L1 distance of the plan's row and column sums from `1/n` and `1/m`.
    pub marginal_residual: f64,
}

impl TransportPlan {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.plan[i * self.m + j]
    }

    pub fn transpose(&self) -> TransportPlan {
        let mut t = vec![0.0; self.plan.len()];
        for i in 0..self.n {
            for j in 0..self.m {
                t[j * self.n + i] = self.plan[i * self.m + j];
            }
        }
        TransportPlan { plan: t, n: self.m, m: self.n, ..self.clone() }
    }
}

const ANNEAL_SWEEPS: usize = 20;
const ANNEAL_TOL: f64 = 1e-3;
/// Scalings beyond `exp(+-ABSORB)` are folded into the potentials.
const ABSORB: f64 = 100.0;

struct Duals<'a> {
    h: &'a CostMatrix,
    f: Vec<f64>,
    g: Vec<f64>,
    iterations: usize,
}

impl<'a> Duals<'a> {
    fn new(h: &'a CostMatrix) -> Self {
        Duals { h, f: vec![0.0; h.n], g: vec![0.0; h.m], iterations: 0 }
    }

    /// Exact log-domain `f` then `g` update.
    fn log_sweep(&mut self, eps: f64) {
        let (n, m, h) = (self.h.n, self.h.m, &self.h.values);
        let (log_a, log_b) = (-(n as f64).ln(), -(m as f64).ln());
        for i in 0..n {
            let row = &h[i * m..(i + 1) * m];
            self.f[i] = eps * (log_a - log_sum_exp(row.iter().zip(&self.g).map(|(c, gj)| (gj - c) / eps)));
        }
        let f = &self.f;
        for j in 0..m {
            self.g[j] = eps * (log_b - log_sum_exp((0..n).map(|i| (f[i] - h[i * m + j]) / eps)));
        }
        self.iterations += 1;
    }

    fn kernel(&self, eps: f64) -> Vec<f64> {
        let m = self.h.m;
        self.h
            .values
            .iter()
            .enumerate()
            .map(|(k, c)| ((self.f[k / m] + self.g[k % m] - c) / eps).exp())
            .collect()
    }

    /// Sweeps at temperature `eps` until the row residual is below `tol` or
    /// `max_sweeps` have run. Returns the final residual.
    fn run(&mut self, eps: f64, max_sweeps: usize, tol: f64) -> Result<f64> {
        let (n, m) = (self.h.n, self.h.m);
        let (a, b) = (1.0 / n as f64, 1.0 / m as f64);
        self.log_sweep(eps);
        let mut sweeps = 1;
        let mut kv = vec![0.0; n];
        let mut ktu = vec![0.0; m];
        loop {
            let k = self.kernel(eps);
            let mut u = vec![1.0; n];
            let mut v = vec![1.0; m];
            loop {
                for i in 0..n {
                    kv[i] = k[i * m..(i + 1) * m].iter().zip(&v).map(|(x, y)| x * y).sum();
                }
                let resid = u.iter().zip(&kv).map(|(ui, kvi)| (1.0 - ui * kvi / a).abs()).sum::<f64>() / n as f64;
                if !resid.is_finite() {
                    return Err(Error::Numerical(format!("sinkhorn residual non-finite at iteration {}", self.iterations)));
                }
                if resid < tol || sweeps >= max_sweeps {
                    self.absorb(eps, &u, &v);
                    return Ok(resid);
                }
                if kv.iter().any(|&x| x <= 0.0) {
                    // kernel underflow: fall back to an exact sweep and rebuild
                    self.absorb(eps, &u, &v);
                    self.log_sweep(eps);
                    sweeps += 1;
                    break;
                }
                for i in 0..n {
                    u[i] = a / kv[i];
                }
                ktu.iter_mut().for_each(|x| *x = 0.0);
                for i in 0..n {
                    let ui = u[i];
                    for (t, x) in ktu.iter_mut().zip(&k[i * m..(i + 1) * m]) {
                        *t += x * ui;
                    }
                }
                for j in 0..m {
                    v[j] = b / ktu[j];
                }
                sweeps += 1;
                self.iterations += 1;
                let wide = |s: &[f64]| s.iter().any(|x| !(x.ln().abs() < ABSORB));
                if wide(&u) || wide(&v) {
                    self.absorb(eps, &u, &v);
                    break;
                }
            }
        }
    }

    fn absorb(&mut self, eps: f64, u: &[f64], v: &[f64]) {
        for (f, ui) in self.f.iter_mut().zip(u) {
            *f += eps * ui.ln();
        }
        for (g, vj) in self.g.iter_mut().zip(v) {
            *g += eps * vj.ln();
        }
    }
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let mx = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return mx;
    }
    mx + xs.map(|x| (x - mx).exp()).sum::<f64>().ln()
}

/// Log-domain Sinkhorn with uniform marginals.
///
/// The plan is `exp((f_i + g_j - H_ij) / eps)` for dual potentials `f, g`.
/// Sweeps run on scalings `u, v` of a kernel built from the current
/// potentials, which are absorbed back into `f, g` whenever they drift far
/// from one. When `epsilon` is small relative to the costs the potentials
/// are warm-started over halving temperatures. Stops when the row-marginal
/// L1 residual (columns are exact after each `g` update) drops below `tol`,
/// or after `max_iter` sweeps at `epsilon`. `iterations` counts all sweeps.
pub fn sinkhorn(h: &CostMatrix, epsilon: f64, max_iter: usize, tol: f64) -> Result<TransportPlan> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::Precondition(format!("sinkhorn epsilon must be positive, got {epsilon}")));
    }
    if h.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("cost matrix contains non-finite entries".into()));
    }
    let mut solver = Duals::new(h);
    let h_max = h.values.iter().fold(0.0f64, |a, &b| a.max(b));
    let mut eps_stage = h_max / 2.0;
    while eps_stage > 4.0 * epsilon {
        solver.run(eps_stage, ANNEAL_SWEEPS, ANNEAL_TOL)?;
        eps_stage /= 2.0;
    }
    solver.run(epsilon, max_iter.max(1), tol)?;
    let (f, g, iterations) = (solver.f, solver.g, solver.iterations);
    let (n, m) = (h.n, h.m);

    let mut plan = Vec::with_capacity(n * m);
    for i in 0..n {
        for j in 0..m {
            plan.push(((f[i] + g[j] - h.values[i * m + j]) / epsilon).exp());
        }
    }
    if plan.iter().any(|p| !p.is_finite()) {
        return Err(Error::Numerical("sinkhorn plan has non-finite entries".into()));
    }
    let sharp_cost: f64 = plan.iter().zip(&h.values).map(|(p, c)| p * c).sum();
    let mut residual = 0.0;
    for i in 0..n {
        residual += (plan[i * m..(i + 1) * m].iter().sum::<f64>() - 1.0 / n as f64).abs();
    }
    for j in 0..m {
        residual += ((0..n).map(|i| plan[i * m + j]).sum::<f64>() - 1.0 / m as f64).abs();
    }
    Ok(TransportPlan { plan, n, m, sharp_cost, iterations, marginal_residual: residual })
}

/// Exact uniform-marginal OT cost for square instances by enumerating
/// permutations (an optimal plan is a scaled permutation matrix).
pub fn exact_ot_oracle(h: &CostMatrix) -> Result<f64> {
    let n = h.n;
    if n != h.m || n > 8 {
        return Err(Error::Unsupported(format!("exact OT oracle needs n = m <= 8, got {}x{}", h.n, h.m)));
    }
    let best = (0..n)
        .permutations(n)
        .map(|perm| perm.iter().enumerate().map(|(i, &j)| h.get(i, j)).sum::<f64>())
        .fold(f64::INFINITY, f64::min);
    Ok(best / n as f64)
}

fn lexicographic(a: &Tensor, b: &Tensor) -> Ordering {
    a.rows()
        .cmp(&b.rows())
        .then_with(|| {
            a.values().iter().zip(b.values()).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(Ordering::Equal)
        })
}

struct TransportCostRule {
    /// Plan oriented as (first input rows) x (second input rows).
    plan: Vec<f64>,
}

impl CustomBackward for TransportCostRule {
    fn name(&self) -> &'static str {
        "transport_cost"
    }

    fn backward(&self, grad_out: &[f64], inputs: &[&Tensor]) -> Vec<Option<Vec<f64>>> {
        let (z0, z1) = (inputs[0], inputs[1]);
        let (n, m, d) = (z0.rows(), z1.rows(), z0.cols());
        let g = grad_out[0];
        let mut d0 = vec![0.0; n * d];
        let mut d1 = vec![0.0; m * d];
        let mut diff = vec![0.0; d];
        for i in 0..n {
            let a = z0.row(i);
            for j in 0..m {
                let p = self.plan[i * m + j];
                if p == 0.0 {
                    continue;
                }
                let b = z1.row(j);
                let mut d2 = 0.0;
                for k in 0..d {
                    diff[k] = a[k] - b[k];
                    d2 += diff[k] * diff[k];
                }
                let dist = d2.sqrt();
                // the norm is not differentiable at 0; use the zero subgradient
                if dist <= 1e-300 {
                    continue;
                }
                let w = g * p / dist;
                for k in 0..d {
                    d0[i * d + k] += w * diff[k];
                    d1[j * d + k] -= w * diff[k];
                }
            }
        }
        vec![Some(d0), Some(d1)]
    }
}

/// Tracked `<H(z0, z1), pi*>` with `pi*` from Sinkhorn. Symmetric in its
/// arguments bit for bit: the plan is always solved in a canonical
/// orientation.
pub fn balance_loss(tape: &mut Tape, z0: Var, z1: Var, opts: &SinkhornOptions) -> Result<(Var, TransportPlan)> {
    let (t0, t1) = (tape.value(z0), tape.value(z1));
    if t0.numel() == 0 {
        return Err(Error::EmptyGroup("control"));
    }
    if t1.numel() == 0 {
        return Err(Error::EmptyGroup("treated"));
    }
    let swapped = lexicographic(t0, t1) == Ordering::Greater;
    let (first, second) = if swapped { (t1, t0) } else { (t0, t1) };
    let h = cost_matrix(first, second)?;
    let plan = sinkhorn(&h, opts.epsilon, opts.max_iter, opts.tol)?;
    let value = plan.sharp_cost;
    let oriented = if swapped { plan.transpose() } else { plan.clone() };
    let var = tape.custom(&[z0, z1], Tensor::scalar(value), Box::new(TransportCostRule { plan: oriented.plan.clone() }));
    Ok((var, oriented))
}

/// `<H(z0, z1), plan>` with a caller-supplied plan held fixed.
pub fn transport_cost_frozen(tape: &mut Tape, z0: Var, z1: Var, plan: &TransportPlan) -> Result<Var> {
    let h = cost_matrix(tape.value(z0), tape.value(z1))?;
    if h.n != plan.n || h.m != plan.m {
        return Err(Error::Shape { op: "transport_cost_frozen", lhs: vec![h.n, h.m], rhs: vec![plan.n, plan.m] });
    }
    let value: f64 = plan.plan.iter().zip(&h.values).map(|(p, c)| p * c).sum();
    Ok(tape.custom(&[z0, z1], Tensor::scalar(value), Box::new(TransportCostRule { plan: plan.plan.clone() })))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MmdEstimator {
    Biased,
    Unbiased,
}

struct MmdRule {
    bandwidth: f64,
    unbiased: bool,
    clamped: bool,
}

fn kernel(a: &[f64], b: &[f64], two_s2: f64) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (-d2 / two_s2).exp()
}

/// Within-group normalizer and whether the diagonal is included.
fn within_terms(n: usize, unbiased: bool) -> f64 {
    if unbiased {
        (n * (n - 1)) as f64
    } else {
        (n * n) as f64
    }
}

fn mmd_value(z0: &Tensor, z1: &Tensor, bandwidth: f64, unbiased: bool) -> f64 {
    let two_s2 = 2.0 * bandwidth * bandwidth;
    let (n, m) = (z0.rows(), z1.rows());
    let within = |z: &Tensor, k: usize| {
        let mut s = 0.0;
        for i in 0..k {
            for j in 0..k {
                if unbiased && i == j {
                    continue;
                }
                s += kernel(z.row(i), z.row(j), two_s2);
            }
        }
        s / within_terms(k, unbiased)
    };
    let mut cross = 0.0;
    for i in 0..n {
        for j in 0..m {
            cross += kernel(z0.row(i), z1.row(j), two_s2);
        }
    }
    within(z0, n) + within(z1, m) - 2.0 * cross / (n * m) as f64
}

impl CustomBackward for MmdRule {
    fn name(&self) -> &'static str {
        "mmd"
    }

    fn backward(&self, grad_out: &[f64], inputs: &[&Tensor]) -> Vec<Option<Vec<f64>>> {
        let (z0, z1) = (inputs[0], inputs[1]);
        let (n, m, d) = (z0.rows(), z1.rows(), z0.cols());
        let mut d0 = vec![0.0; n * d];
        let mut d1 = vec![0.0; m * d];
        if self.clamped {
            return vec![Some(d0), Some(d1)];
        }
        let g = grad_out[0];
        let s2 = self.bandwidth * self.bandwidth;
        let two_s2 = 2.0 * s2;
        // d k(a, b) / d a = -k(a, b) (a - b) / s^2
        let pair = |za: &Tensor, ia: usize, zb: &Tensor, ib: usize, coef: f64, da: &mut [f64], db: Option<&mut [f64]>| {
            let (a, b) = (za.row(ia), zb.row(ib));
            let k = kernel(a, b, two_s2);
            let w = -coef * k / s2;
            let mut db = db;
            for t in 0..d {
                let diff = a[t] - b[t];
                da[ia * d + t] += w * diff;
                if let Some(db) = db.as_deref_mut() {
                    db[ib * d + t] -= w * diff;
                }
            }
        };
        let c0 = g / within_terms(n, self.unbiased);
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    // both orderings appear in the double sum; each call handles the `a` side
                    pair(z0, i, z0, j, 2.0 * c0, &mut d0, None);
                }
            }
        }
        let c1 = g / within_terms(m, self.unbiased);
        for i in 0..m {
            for j in 0..m {
                if i != j {
                    pair(z1, i, z1, j, 2.0 * c1, &mut d1, None);
                }
            }
        }
        let cx = -2.0 * g / (n * m) as f64;
        for i in 0..n {
            for j in 0..m {
                pair(z0, i, z1, j, cx, &mut d0, Some(&mut d1));
            }
        }
        vec![Some(d0), Some(d1)]
    }
}

/// Squared MMD with a Gaussian kernel `exp(-||a - b||^2 / (2 bandwidth^2))`.
/// The unbiased estimator falls back to the biased one when a group has a
/// single row. Negative estimates are clamped to zero.
pub fn mmd(tape: &mut Tape, z0: Var, z1: Var, bandwidth: f64, estimator: MmdEstimator) -> Result<Var> {
    if !(bandwidth > 0.0) {
        return Err(Error::Precondition(format!("mmd bandwidth must be positive, got {bandwidth}")));
    }
    let (t0, t1) = (tape.value(z0), tape.value(z1));
    if t0.numel() == 0 || t1.numel() == 0 {
        return Err(Error::EmptyGroup("mmd"));
    }
    if t0.cols() != t1.cols() {
        return Err(Error::Shape { op: "mmd", lhs: t0.shape().to_vec(), rhs: t1.shape().to_vec() });
    }
    let unbiased = estimator == MmdEstimator::Unbiased && t0.rows() > 1 && t1.rows() > 1;
    let raw = mmd_value(t0, t1, bandwidth, unbiased);
    let clamped = raw < 0.0;
    let value = raw.max(0.0);
    Ok(tape.custom(&[z0, z1], Tensor::scalar(value), Box::new(MmdRule { bandwidth, unbiased, clamped })))
}

/// Median of pooled pairwise distances; 1.0 if that median is zero.
pub fn median_bandwidth(z0: &Tensor, z1: &Tensor) -> f64 {
    let rows: Vec<&[f64]> = (0..z0.rows()).map(|i| z0.row(i)).chain((0..z1.rows()).map(|j| z1.row(j))).collect();
    let mut d: Vec<f64> = Vec::with_capacity(rows.len() * rows.len().saturating_sub(1) / 2);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            d.push(rows[i].iter().zip(rows[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let mid = d.len() / 2;
    let med = if d.len() % 2 == 0 { 0.5 * (d[mid - 1] + d[mid]) } else { d[mid] };
    if med > 0.0 {
        med
    } else {
        1.0
    }
}

/// Untracked balance loss between the encoded treatment groups.
pub fn latent_group_distance(encoder: &EncoderParams, x: &Tensor, treated: &[bool], opts: &SinkhornOptions) -> Result<f64> {
    let (idx0, idx1) = group_indices(treated);
    if idx0.is_empty() {
        return Err(Error::EmptyGroup("control"));
    }
    if idx1.is_empty() {
        return Err(Error::EmptyGroup("treated"));
    }
    let z = encoder.encode(x)?;
    let mut tape = Tape::no_grad();
    let z0 = tape.constant(z.select_rows(&idx0));
    let z1 = tape.constant(z.select_rows(&idx1));
    let (v, _) = balance_loss(&mut tape, z0, z1, opts)?;
    Ok(tape.value(v).item())
}

pub fn group_indices(treated: &[bool]) -> (Vec<usize>, Vec<usize>) {
    let (mut c, mut t) = (Vec::new(), Vec::new());
    for (i, &a) in treated.iter().enumerate() {
        if a {
            t.push(i)
        } else {
            c.push(i)
        }
    }
    (c, t)
}
