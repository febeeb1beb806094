//! Central finite-difference comparison against `Tape::backward`.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    /// `max_i |analytic_i - numeric_i| / max(|analytic|_inf, |numeric|_inf)`
    /// over the entries of this tensor.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Floor for the error denominator so an all-zero gradient compares as 0/floor.
const SCALE_FLOOR: f64 = 1e-10;

/// `loss` builds a scalar on the supplied tape from leaf handles, one per
/// entry of `params` (in the same order).
pub fn grad_check<F>(loss: F, params: &[(String, Tensor)], step: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|(_, t)| tape.param(t.clone())).collect();
    let root = loss(&mut tape, &vars)?;
    let grads = tape.backward(root)?;

    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut t = Tape::no_grad();
        let vs: Vec<Var> = values.iter().map(|v| t.param(v.clone())).collect();
        let r = loss(&mut t, &vs)?;
        let out = t.value(r);
        if !out.is_scalar() {
            return Err(Error::Contract("grad_check closure must return a scalar".into()));
        }
        Ok(out.item())
    };

    let mut work: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    let mut report = Vec::with_capacity(params.len());
    for (k, (name, _)) in params.iter().enumerate() {
        let analytic = grads.get(vars[k]);
        let mut numeric = vec![0.0; analytic.numel()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = work[k].values()[i];
            work[k].values_mut()[i] = orig + step;
            let up = eval(&work)?;
            work[k].values_mut()[i] = orig - step;
            let down = eval(&work)?;
            work[k].values_mut()[i] = orig;
            *slot = (up - down) / (2.0 * step);
        }
        let inf = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let scale = inf(analytic.values()).max(inf(&numeric)).max(SCALE_FLOOR);
        let max_abs_err = analytic.values().iter().zip(&numeric).fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
        report.push(ParamCheck { name: name.clone(), max_rel_err: max_abs_err / scale, max_abs_err });
    }
    let max_rel_err = report.iter().fold(0.0f64, |m, p| m.max(p.max_rel_err));
    Ok(GradCheckReport { params: report, max_rel_err, tolerance, passed: max_rel_err < tolerance })
}
