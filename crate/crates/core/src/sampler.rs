//! Reverse-time ODE sampling and Monte-Carlo response estimates.

use crate::autodiff::Tensor;
use crate::data::Standardizer;
use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::nets::VelocityParams;
use crate::rng::CounterRng;

/// Rows integrated per network call.
pub const CHUNK_ROWS: usize = 4096;

/// Batched velocity `dy/dt = v(y, t)`; every row shares the same `t`.
pub trait VelocityField {
    fn velocity(&self, y: &Tensor, t: f64) -> Result<Tensor>;
}

impl<F> VelocityField for F
where
    F: Fn(&Tensor, f64) -> Result<Tensor>,
{
    fn velocity(&self, y: &Tensor, t: f64) -> Result<Tensor> {
        self(y, t)
    }
}

fn axpy(y: &Tensor, h: f64, k: &Tensor) -> Tensor {
    Tensor::from_parts(y.shape().to_vec(), y.values().iter().zip(k.values()).map(|(a, b)| a + h * b).collect())
}

/// Classical RK4 from `t = 1` down to `t = 0` with `n_steps` steps of `-1/n_steps`.
pub fn rk4_integrate<F: VelocityField + ?Sized>(field: &F, y1: &Tensor, n_steps: usize) -> Result<Tensor> {
    if n_steps == 0 {
        return Err(Error::Precondition("ODE step count must be >= 1".into()));
    }
    let h = -1.0 / n_steps as f64;
    let n = n_steps as f64;
    let mut y = y1.clone();
    for k in 0..n_steps {
        let t0 = 1.0 - k as f64 / n;
        let tm = (1.0 - (k as f64 + 0.5) / n).clamp(0.0, 1.0);
        let t1 = (1.0 - (k as f64 + 1.0) / n).clamp(0.0, 1.0);
        let k1 = field.velocity(&y, t0)?;
        let k2 = field.velocity(&axpy(&y, 0.5 * h, &k1), tm)?;
        let k3 = field.velocity(&axpy(&y, 0.5 * h, &k2), tm)?;
        let k4 = field.velocity(&axpy(&y, h, &k3), t1)?;
        let next: Vec<f64> = y
            .values()
            .iter()
            .enumerate()
            .map(|(i, v)| v + h / 6.0 * (k1.values()[i] + 2.0 * k2.values()[i] + 2.0 * k3.values()[i] + k4.values()[i]))
            .collect();
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite ODE state at step {} of {n_steps}", k + 1)));
        }
        y = Tensor::from_parts(y.shape().to_vec(), next);
    }
    Ok(y)
}

/// The trained velocity network with fixed conditioning rows and arms.
pub struct NetworkField<'a> {
    pub velocity: &'a VelocityParams,
    pub cond: &'a Tensor,
    pub treated: &'a [bool],
}

impl VelocityField for NetworkField<'_> {
    fn velocity(&self, y: &Tensor, t: f64) -> Result<Tensor> {
        let ts = vec![t; y.rows()];
        self.velocity.eval(y, &ts, self.cond, self.treated)
    }
}

/// Noise vector for draw `m` of a unit whose stream is seeded by `seed`.
pub fn draw_noise(seed: u64, m: usize, d_y: usize) -> Vec<f64> {
    CounterRng::new(seed).split(m as u64).normals(d_y)
}

/// Sampling request for a batch of units.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleSpec {
    pub draws: usize,
    pub ode_steps: usize,
}

impl Default for SampleSpec {
    fn default() -> Self {
        Self { draws: 100, ode_steps: 20 }
    }
}

impl SampleSpec {
    pub fn validate(&self) -> Result<()> {
        if self.draws == 0 {
            return Err(Error::config("sample.draws", "must be >= 1"));
        }
        if self.ode_steps == 0 {
            return Err(Error::config("sample.ode_steps", "must be >= 1"));
        }
        Ok(())
    }
}

/// Generated outcomes in original units: `draws[m]` is `units x d_y`.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorDraws {
    pub draws: Vec<Tensor>,
    pub seeds: Vec<u64>,
}

impl PosteriorDraws {
    /// Mean over draws, `units x d_y`.
    pub fn mean(&self) -> Tensor {
        let m = self.draws.len() as f64;
        let mut acc = vec![0.0; self.draws[0].numel()];
        for d in &self.draws {
            acc.iter_mut().zip(d.values()).for_each(|(a, v)| *a += v);
        }
        acc.iter_mut().for_each(|a| *a /= m);
        Tensor::from_parts(self.draws[0].shape().to_vec(), acc)
    }
}

/// Draws potential outcomes for raw covariate rows `x` under arms `arm`.
/// Unit `i` uses the noise stream `seeds[i]`, draw `m` its `m`-th split, so
/// the result for a unit does not depend on which other units are in the call.
pub fn sample_units(
    model: &FlowModel,
    st: &Standardizer,
    x: &Tensor,
    arm: &[bool],
    seeds: &[u64],
    spec: SampleSpec,
) -> Result<PosteriorDraws> {
    spec.validate()?;
    let units = x.rows();
    if arm.len() != units || seeds.len() != units {
        return Err(Error::Shape { op: "sample_units", lhs: x.shape().to_vec(), rhs: vec![arm.len(), seeds.len()] });
    }
    let d_y = model.dims.d_y;
    let cond = model.condition(&st.apply_x(x)?)?;

    // rows ordered (draw, unit)
    let total = units * spec.draws;
    let mut out = vec![0.0; total * d_y];
    let mut start = 0;
    while start < total {
        let end = (start + CHUNK_ROWS).min(total);
        let rows: Vec<(usize, usize)> = (start..end).map(|r| (r / units, r % units)).collect();
        let unit_idx: Vec<usize> = rows.iter().map(|&(_, u)| u).collect();
        let mut y1 = Vec::with_capacity(rows.len() * d_y);
        for &(m, u) in &rows {
            y1.extend(draw_noise(seeds[u], m, d_y));
        }
        let y1 = Tensor::from_parts(vec![rows.len(), d_y], y1);
        let c = cond.select_rows(&unit_idx);
        let a: Vec<bool> = unit_idx.iter().map(|&u| arm[u]).collect();
        let field = NetworkField { velocity: &model.velocity, cond: &c, treated: &a };
        let y0 = rk4_integrate(&field, &y1, spec.ode_steps)?;
        for (dst, v) in out[start * d_y..end * d_y].iter_mut().zip(y0.values()) {
            *dst = st.invert_y(*v);
        }
        start = end;
    }
    let draws = out.chunks_exact(units * d_y).map(|c| Tensor::from_parts(vec![units, d_y], c.to_vec())).collect();
    Ok(PosteriorDraws { draws, seeds: seeds.to_vec() })
}

/// `M` draws for a single covariate row under arm `a`; result is `M x d_y`.
pub fn sample_po(model: &FlowModel, st: &Standardizer, x: &[f64], a: bool, spec: SampleSpec, seed: u64) -> Result<Tensor> {
    let row = Tensor::matrix(1, x.len(), x.to_vec())?;
    let draws = sample_units(model, st, &row, &[a], &[seed], spec)?;
    let vals: Vec<f64> = draws.draws.iter().flat_map(|d| d.values().to_vec()).collect();
    Ok(Tensor::from_parts(vec![spec.draws, model.dims.d_y], vals))
}

/// Monte-Carlo response `mu_a(x)` per unit, `units x d_y`.
pub fn estimate_mu(model: &FlowModel, st: &Standardizer, x: &Tensor, a: bool, seeds: &[u64], spec: SampleSpec) -> Result<Tensor> {
    let arm = vec![a; x.rows()];
    Ok(sample_units(model, st, x, &arm, seeds, spec)?.mean())
}

/// `mu_1(x) - mu_0(x)` with the same noise draws in both arms.
pub fn estimate_cate(model: &FlowModel, st: &Standardizer, x: &Tensor, seeds: &[u64], spec: SampleSpec) -> Result<Tensor> {
    let mu1 = estimate_mu(model, st, x, true, seeds, spec)?;
    let mu0 = estimate_mu(model, st, x, false, seeds, spec)?;
    let d = mu1.values().iter().zip(mu0.values()).map(|(a, b)| a - b).collect();
    Ok(Tensor::from_parts(mu1.shape().to_vec(), d))
}

/// Per-unit noise seeds derived from a root seed and unit identifiers.
pub fn unit_seeds(root: u64, unit_ids: &[usize]) -> Vec<u64> {
    let r = CounterRng::new(root);
    unit_ids.iter().map(|&u| r.split(u as u64).next_u64()).collect()
}
