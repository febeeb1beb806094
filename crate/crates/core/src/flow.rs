//! Conditional flow matching with a latent balance penalty.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, AdamState, Parameters, Tape, Tensor, Var};
use crate::balance::{balance_loss, group_indices, median_bandwidth, mmd, MmdEstimator, SinkhornOptions};
use crate::data::{CausalData, Standardizer};
use crate::error::{Error, Result};
use crate::nets::{EncoderParams, ModelDims, VelocityParams};
use crate::rng::CounterRng;

/// `(1 - t) y0 + (t + sigma (1 - t)) y1`, row by row.
pub fn interpolant(y0: &Tensor, y1: &Tensor, t: &[f64], sigma: f64) -> Result<Tensor> {
    if y0.shape() != y1.shape() {
        return Err(Error::Shape { op: "interpolant", lhs: y0.shape().to_vec(), rhs: y1.shape().to_vec() });
    }
    let (n, d) = (y0.rows(), y0.cols());
    if t.len() != n {
        return Err(Error::Shape { op: "interpolant", lhs: y0.shape().to_vec(), rhs: vec![t.len()] });
    }
    if let Some(bad) = t.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Precondition(format!("interpolation time {bad} outside [0, 1]")));
    }
    let mut out = Vec::with_capacity(n * d);
    for (i, &ti) in t.iter().enumerate() {
        let (c0, c1) = (1.0 - ti, ti + sigma * (1.0 - ti));
        out.extend(y0.row(i).iter().zip(y1.row(i)).map(|(a, b)| c0 * a + c1 * b));
    }
    Ok(Tensor::from_parts(y0.shape().to_vec(), out))
}

/// `(1 - sigma) y1 - y0`; does not depend on `t`.
pub fn target_velocity(y0: &Tensor, y1: &Tensor, sigma: f64) -> Result<Tensor> {
    if y0.shape() != y1.shape() {
        return Err(Error::Shape { op: "target_velocity", lhs: y0.shape().to_vec(), rhs: y1.shape().to_vec() });
    }
    let v = y0.values().iter().zip(y1.values()).map(|(a, b)| (1.0 - sigma) * b - a).collect();
    Ok(Tensor::from_parts(y0.shape().to_vec(), v))
}

/// Mean over rows of `||v - u||^2`.
pub fn flow_loss(tape: &mut Tape, v: Var, u: Var) -> Result<Var> {
    tape.sq_err_rows(v, u)
}

/// `L_flow + lambda * L_bal`.
pub fn total_loss(tape: &mut Tape, l_flow: Var, l_bal: Var, lambda: f64) -> Result<Var> {
    if !tape.value(l_flow).is_scalar() || !tape.value(l_bal).is_scalar() {
        return Err(Error::Contract("total_loss expects scalar inputs".into()));
    }
    let weighted = tape.scale(l_bal, lambda);
    tape.add(l_flow, weighted)
}

/// What the velocity network is conditioned on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    /// Unit-norm encoder output.
    Latent,
    /// Standardized covariates; the encoder is bypassed.
    Raw,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BalanceKind {
    Sinkhorn,
    Mmd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoRep,
    LambdaZero,
    MmdBalance,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoRep, Variant::LambdaZero, Variant::MmdBalance];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoRep => "no_rep",
            Variant::LambdaZero => "lambda_zero",
            Variant::MmdBalance => "mmd_balance",
        }
    }

    pub fn conditioning(self) -> Conditioning {
        match self {
            Variant::NoRep => Conditioning::Raw,
            _ => Conditioning::Latent,
        }
    }

    /// Adjusts a training config for this variant.
    pub fn apply(self, cfg: &FlowConfig) -> FlowConfig {
        let mut c = cfg.clone();
        match self {
            Variant::Full => {}
            Variant::NoRep | Variant::LambdaZero => c.lambda = 0.0,
            Variant::MmdBalance => c.balance = BalanceKind::Mmd,
        }
        c
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::config("variant", format!("unknown variant {s:?}; expected full, no_rep, lambda_zero or mmd_balance")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopping {
    /// Steps between validation evaluations.
    pub every: usize,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub sigma: f64,
    pub lambda: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub sinkhorn: SinkhornOptions,
    pub balance: BalanceKind,
    pub early_stopping: Option<EarlyStopping>,
    pub seed: u64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            sigma: 0.01,
            lambda: 1.0,
            batch_size: 256,
            steps: 5000,
            lr: 1e-3,
            sinkhorn: SinkhornOptions::default(),
            balance: BalanceKind::Sinkhorn,
            early_stopping: None,
            seed: 0,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma < 1.0) {
            return Err(Error::config("train.sigma", format!("must lie in (0, 1), got {}", self.sigma)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("train.lambda", format!("must be finite and >= 0, got {}", self.lambda)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train.lr", format!("must be positive, got {}", self.lr)));
        }
        if !(self.sinkhorn.epsilon > 0.0) {
            return Err(Error::config("train.sinkhorn_epsilon", format!("must be positive, got {}", self.sinkhorn.epsilon)));
        }
        if self.sinkhorn.max_iter == 0 {
            return Err(Error::config("train.sinkhorn_max_iter", "must be positive"));
        }
        if let Some(es) = self.early_stopping {
            if es.every == 0 || es.patience == 0 {
                return Err(Error::config("train.early_stopping", "interval and patience must be positive"));
            }
        }
        Ok(())
    }
}

/// Encoder and velocity network together with how they are wired.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowModel {
    pub dims: ModelDims,
    pub conditioning: Conditioning,
    pub encoder: EncoderParams,
    pub velocity: VelocityParams,
}

impl FlowModel {
    pub fn init(dims: ModelDims, conditioning: Conditioning, seed: u64) -> Result<Self> {
        dims.validate()?;
        let root = CounterRng::new(seed);
        let encoder = EncoderParams::init(&dims, &mut root.named("encoder"));
        let cond_dim = match conditioning {
            Conditioning::Latent => dims.d_z,
            Conditioning::Raw => dims.d_x,
        };
        let velocity = VelocityParams::init(&dims, cond_dim, &mut root.named("velocity"));
        Ok(Self { dims, conditioning, encoder, velocity })
    }

    /// Conditioning rows for standardized covariates (untracked).
    pub fn condition(&self, x_std: &Tensor) -> Result<Tensor> {
        if x_std.cols() != self.dims.d_x {
            return Err(Error::Shape { op: "condition", lhs: x_std.shape().to_vec(), rhs: vec![self.dims.d_x] });
        }
        match self.conditioning {
            Conditioning::Latent => self.encoder.encode(x_std),
            Conditioning::Raw => Ok(x_std.clone()),
        }
    }

    /// All parameters, encoder first.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut v = self.encoder.named_params();
        v.extend(self.velocity.named_params());
        v
    }

    pub fn load(&mut self, source: &BTreeMap<String, Tensor>) -> Result<()> {
        crate::nets::load_named(&mut self.encoder, source)?;
        crate::nets::load_named(&mut self.velocity, source)
    }
}

/// Standardized training rows.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainData {
    pub x: Tensor,
    pub treated: Vec<bool>,
    /// `n x d_y` outcomes.
    pub y: Tensor,
}

impl TrainData {
    pub fn new(x: Tensor, treated: Vec<bool>, y: Tensor) -> Result<Self> {
        if x.rows() != treated.len() || y.rows() != treated.len() {
            return Err(Error::Shape { op: "train_data", lhs: x.shape().to_vec(), rhs: y.shape().to_vec() });
        }
        if treated.is_empty() {
            return Err(Error::Precondition("training data is empty".into()));
        }
        Ok(Self { x, treated, y })
    }

    pub fn from_causal(data: &CausalData, st: &Standardizer) -> Result<Self> {
        let x = st.apply_x(&data.x)?;
        let y = Tensor::matrix(data.len(), 1, data.y.iter().map(|&v| st.apply_y(v)).collect())?;
        Self::new(x, data.treated.clone(), y)
    }

    pub fn len(&self) -> usize {
        self.treated.len()
    }

    pub fn is_empty(&self) -> bool {
        self.treated.is_empty()
    }
}

/// One mini-batch with its flow-matching noise.
#[derive(Clone, Debug)]
pub struct Batch {
    pub x: Tensor,
    pub treated: Vec<bool>,
    pub y0: Tensor,
    pub t: Vec<f64>,
    pub y1: Tensor,
}

impl Batch {
    /// Rows `idx` of `data`, `t ~ U[0, 1]` and `y1 ~ N(0, I)` per row.
    pub fn draw(data: &TrainData, idx: &[usize], rng: &mut CounterRng) -> Batch {
        let d_y = data.y.cols();
        let t = (0..idx.len()).map(|_| rng.uniform()).collect();
        let y1 = Tensor::from_parts(vec![idx.len(), d_y], rng.normals(idx.len() * d_y));
        Batch { x: data.x.select_rows(idx), treated: idx.iter().map(|&i| data.treated[i]).collect(), y0: data.y.select_rows(idx), t, y1 }
    }
}

/// Losses and handles from one forward pass.
pub struct Forward {
    pub l_flow: Var,
    pub l_bal: Option<Var>,
    pub total: Var,
    pub encoder_vars: Vec<Var>,
    pub velocity_vars: Vec<Var>,
    pub balance_skipped: bool,
}

/// Builds `L_total` for a batch on `tape`.
pub fn forward_losses(tape: &mut Tape, model: &FlowModel, batch: &Batch, cfg: &FlowConfig) -> Result<Forward> {
    let vel = model.velocity.bind(tape);
    let xv = tape.constant(batch.x.clone());
    let (cond, encoder_vars) = match model.conditioning {
        Conditioning::Latent => {
            let enc = model.encoder.bind(tape);
            (enc.forward(tape, xv)?, enc.vars())
        }
        Conditioning::Raw => (xv, Vec::new()),
    };

    let mut l_bal = None;
    let mut balance_skipped = false;
    if cfg.lambda > 0.0 && model.conditioning == Conditioning::Latent {
        let (i0, i1) = group_indices(&batch.treated);
        if i0.is_empty() || i1.is_empty() {
            balance_skipped = true;
        } else {
            let z0 = tape.gather_rows(cond, &i0)?;
            let z1 = tape.gather_rows(cond, &i1)?;
            l_bal = Some(match cfg.balance {
                BalanceKind::Sinkhorn => balance_loss(tape, z0, z1, &cfg.sinkhorn)?.0,
                BalanceKind::Mmd => {
                    let bw = median_bandwidth(tape.value(z0), tape.value(z1));
                    mmd(tape, z0, z1, bw, MmdEstimator::Unbiased)?
                }
            });
        }
    }

    let psi = tape.constant(interpolant(&batch.y0, &batch.y1, &batch.t, cfg.sigma)?);
    let u = tape.constant(target_velocity(&batch.y0, &batch.y1, cfg.sigma)?);
    let v = vel.forward(tape, psi, &batch.t, cond, &batch.treated)?;
    let l_flow = flow_loss(tape, v, u)?;
    let total = match l_bal {
        Some(b) => total_loss(tape, l_flow, b, cfg.lambda)?,
        None => l_flow,
    };
    Ok(Forward { l_flow, l_bal, total, encoder_vars, velocity_vars: vel.vars(), balance_skipped })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub l_flow: f64,
    /// Zero when the balance term was not computed.
    pub l_bal: f64,
    pub l_total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: FlowModel,
    pub encoder_adam: AdamState,
    pub velocity_adam: AdamState,
    pub step: usize,
    pub history: Vec<LossRecord>,
    /// Steps whose batch lacked one treatment group, so the balance term was dropped.
    pub skipped_balance: Vec<usize>,
    pub sinkhorn_calls: usize,
    /// Step at which early stopping fired, if it did.
    pub stopped_at: Option<usize>,
}

impl TrainState {
    pub fn new(model: FlowModel) -> Self {
        let encoder_adam = AdamState::new(&model.encoder);
        let velocity_adam = AdamState::new(&model.velocity);
        Self {
            model,
            encoder_adam,
            velocity_adam,
            step: 0,
            history: Vec::new(),
            skipped_balance: Vec::new(),
            sinkhorn_calls: 0,
            stopped_at: None,
        }
    }

    /// One optimization step on a batch drawn from `data`.
    pub fn step(&mut self, data: &TrainData, cfg: &FlowConfig, rng: &mut CounterRng) -> Result<LossRecord> {
        let k = cfg.batch_size.min(data.len());
        let idx = rng.sample_indices(data.len(), k);
        let batch = Batch::draw(data, &idx, rng);

        let mut tape = Tape::new();
        let fwd = forward_losses(&mut tape, &self.model, &batch, cfg)?;
        let l_flow = tape.value(fwd.l_flow).item();
        let l_bal = fwd.l_bal.map(|b| tape.value(b).item());
        let l_total = tape.value(fwd.total).item();
        if !l_total.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite loss at step {}: L_flow = {l_flow}, L_bal = {l_bal:?}",
                self.step
            )));
        }
        let grads = tape.backward(fwd.total)?;
        let vel_grads: Vec<Tensor> = fwd.velocity_vars.iter().map(|&v| grads.get(v)).collect();
        let enc_grads: Vec<Tensor> = fwd.encoder_vars.iter().map(|&v| grads.get(v)).collect();

        let staged = |e: Error| match e {
            Error::Numerical(m) => Error::Numerical(format!("step {}: {m}", self.step)),
            other => other,
        };
        if self.model.conditioning == Conditioning::Latent {
            // check both gradient sets before touching either network
            for (g, (name, _)) in enc_grads.iter().zip(self.model.encoder.named_params()) {
                if !g.is_finite() {
                    return Err(staged(Error::Numerical(format!("non-finite gradient for parameter {name}"))));
                }
            }
        }
        adam_step(&mut self.model.velocity, &vel_grads, &mut self.velocity_adam, cfg.lr).map_err(staged)?;
        if self.model.conditioning == Conditioning::Latent {
            adam_step(&mut self.model.encoder, &enc_grads, &mut self.encoder_adam, cfg.lr).map_err(staged)?;
        }

        if fwd.balance_skipped {
            log::debug!("step {}: one treatment group empty in batch; balance term skipped", self.step);
            self.skipped_balance.push(self.step);
        }
        if fwd.l_bal.is_some() && cfg.balance == BalanceKind::Sinkhorn {
            self.sinkhorn_calls += 1;
        }
        let rec = LossRecord { l_flow, l_bal: l_bal.unwrap_or(0.0), l_total };
        self.history.push(rec);
        self.step += 1;
        Ok(rec)
    }
}

/// Flow loss on `data` with noise fixed by `seed` (no balance term).
pub fn validation_loss(model: &FlowModel, data: &TrainData, cfg: &FlowConfig, seed: u64) -> Result<f64> {
    let mut rng = CounterRng::new(seed);
    let idx: Vec<usize> = (0..data.len()).collect();
    let batch = Batch::draw(data, &idx, &mut rng);
    let mut tape = Tape::no_grad();
    let eval_cfg = FlowConfig { lambda: 0.0, ..cfg.clone() };
    let fwd = forward_losses(&mut tape, model, &batch, &eval_cfg)?;
    Ok(tape.value(fwd.l_flow).item())
}

/// Runs `cfg.steps` mini-batch updates starting from `model`.
pub fn train(model: FlowModel, data: &TrainData, val: Option<&TrainData>, cfg: &FlowConfig) -> Result<TrainState> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Precondition("training split is empty".into()));
    }
    if data.x.cols() != model.dims.d_x || data.y.cols() != model.dims.d_y {
        return Err(Error::Shape { op: "train", lhs: vec![data.x.cols(), data.y.cols()], rhs: vec![model.dims.d_x, model.dims.d_y] });
    }
    let root = CounterRng::new(cfg.seed);
    let val_seed = root.derive_seed("validation");
    let mut state = TrainState::new(model);
    let mut best: Option<(f64, FlowModel)> = None;
    let mut stale = 0;
    for step in 0..cfg.steps {
        let mut rng = root.split(step as u64);
        state.step(data, cfg, &mut rng)?;
        if let (Some(es), Some(val)) = (cfg.early_stopping, val) {
            if (step + 1) % es.every == 0 {
                let loss = validation_loss(&state.model, val, cfg, val_seed)?;
                if best.as_ref().map_or(true, |(b, _)| loss < *b) {
                    best = Some((loss, state.model.clone()));
                    stale = 0;
                } else {
                    stale += 1;
                    if stale >= es.patience {
                        log::info!("early stopping at step {} (best validation flow loss {:.5})", step + 1, best.as_ref().unwrap().0);
                        state.stopped_at = Some(step + 1);
                        break;
                    }
                }
            }
        }
    }
    if let Some((_, m)) = best {
        state.model = m;
    }
    Ok(state)
}

/// Per-step loss CSV with header `step,L_flow,L_bal,L_total`.
pub fn write_loss_csv(history: &[LossRecord], path: &Path) -> Result<()> {
    let mut out = String::from("step,L_flow,L_bal,L_total\n");
    for (i, r) in history.iter().enumerate() {
        out.push_str(&format!("{},{},{},{}\n", i, r.l_flow, r.l_bal, r.l_total));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
