//! Representation encoder and conditional velocity network.
//!
//! Weights are stored `[in, out]` so a layer is `x W + b` on row-major batches.
//! Parameter names are stable and used verbatim in checkpoints:
//!
//! ```text
//! encoder.proj.{W,b}
//! encoder.res{1,2}.{W1,b1,W2,b2}
//! encoder.out.{W,b}
//! velocity.y_embed.{W,b}
//! velocity.t_embed.{W,b}
//! velocity.film.{W,b}
//! velocity.block{1,2}.{Wg,bg,Wf,bf}
//! velocity.head{0,1}.{W,b}
//! ```

use serde::{Deserialize, Serialize};

use crate::autodiff::{Parameters, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::CounterRng;

/// Clamp for the row norm in the final L2 normalization.
pub const NORM_EPS: f64 = 1e-12;
/// Number of sinusoidal frequencies; features are `[sin(w_k t)..., cos(w_k t)...]`.
pub const TIME_FREQUENCIES: usize = 16;
pub const TIME_FEATURES: usize = 2 * TIME_FREQUENCIES;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub d_x: usize,
    pub d_y: usize,
    pub d_z: usize,
    pub hidden: usize,
    pub time_embed: usize,
}

impl ModelDims {
    pub fn new(d_x: usize, d_y: usize) -> Self {
        Self { d_x, d_y, d_z: 32, hidden: 128, time_embed: 64 }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [("d_x", self.d_x), ("d_y", self.d_y), ("d_z", self.d_z), ("hidden", self.hidden), ("time_embed", self.time_embed)];
        for (name, v) in all {
            if v == 0 {
                return Err(Error::Precondition(format!("model dimension {name} must be >= 1")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLinear {
    pub w: Var,
    pub b: Var,
}

impl Linear {
    /// Fan-in scaled uniform weights, zero bias.
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut CounterRng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = (0..fan_in * fan_out).map(|_| (2.0 * rng.uniform() - 1.0) * bound).collect();
        Self { w: Tensor::from_parts(vec![fan_in, fan_out], w), b: Tensor::zeros(&[fan_out]) }
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundLinear {
        BoundLinear { w: tape.param(self.w.clone()), b: tape.param(self.b.clone()) }
    }

    fn visit<'a>(&'a self, prefix: &str, w: &str, b: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.{w}"), &self.w));
        out.push((format!("{prefix}.{b}"), &self.b));
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        out.push(&mut self.w);
        out.push(&mut self.b);
    }
}

impl BoundLinear {
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.affine(x, self.w, self.b)
    }

    fn vars(&self, out: &mut Vec<Var>) {
        out.push(self.w);
        out.push(self.b);
    }
}

/// `relu(x + fc2(relu(fc1(x))))`
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResBlock {
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundResBlock {
    fc1: BoundLinear,
    fc2: BoundLinear,
}

impl ResBlock {
    fn init(width: usize, rng: &mut CounterRng) -> Self {
        Self { fc1: Linear::init(width, width, rng), fc2: Linear::init(width, width, rng) }
    }

    fn bind(&self, tape: &mut Tape) -> BoundResBlock {
        BoundResBlock { fc1: self.fc1.bind(tape), fc2: self.fc2.bind(tape) }
    }
}

impl BoundResBlock {
    fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.fc1.apply(tape, x)?;
        let h = tape.relu(h);
        let h = self.fc2.apply(tape, h)?;
        let s = tape.add(x, h)?;
        Ok(tape.relu(s))
    }
}

/// `x + sigmoid(gate(x)) * silu(transform(x))`
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GatedBlock {
    pub gate: Linear,
    pub transform: Linear,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundGatedBlock {
    gate: BoundLinear,
    transform: BoundLinear,
}

impl GatedBlock {
    fn init(width: usize, rng: &mut CounterRng) -> Self {
        Self { gate: Linear::init(width, width, rng), transform: Linear::init(width, width, rng) }
    }

    fn bind(&self, tape: &mut Tape) -> BoundGatedBlock {
        BoundGatedBlock { gate: self.gate.bind(tape), transform: self.transform.bind(tape) }
    }
}

impl BoundGatedBlock {
    fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let g = self.gate.apply(tape, x)?;
        let g = tape.sigmoid(g);
        let f = self.transform.apply(tape, x)?;
        let f = tape.silu(f);
        let gf = tape.mul(g, f)?;
        tape.add(x, gf)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub proj: Linear,
    pub res1: ResBlock,
    pub res2: ResBlock,
    pub out: Linear,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundEncoder {
    proj: BoundLinear,
    res1: BoundResBlock,
    res2: BoundResBlock,
    out: BoundLinear,
}

impl EncoderParams {
    pub fn init(dims: &ModelDims, rng: &mut CounterRng) -> Self {
        Self {
            proj: Linear::init(dims.d_x, dims.hidden, rng),
            res1: ResBlock::init(dims.hidden, rng),
            res2: ResBlock::init(dims.hidden, rng),
            out: Linear::init(dims.hidden, dims.d_z, rng),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundEncoder {
        BoundEncoder {
            proj: self.proj.bind(tape),
            res1: self.res1.bind(tape),
            res2: self.res2.bind(tape),
            out: self.out.bind(tape),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.proj.w.rows()
    }

    pub fn latent_dim(&self) -> usize {
        self.out.w.cols()
    }

    /// Untracked forward pass.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::no_grad();
        let bound = self.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let z = bound.forward(&mut tape, xv)?;
        Ok(tape.value(z).clone())
    }
}

impl BoundEncoder {
    /// Rows of the result have unit L2 norm.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let u = self.pre_norm(tape, x)?;
        tape.l2norm_rows(u, NORM_EPS)
    }

    /// Encoder output before the L2 normalization.
    pub fn pre_norm(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.proj.apply(tape, x)?;
        let h = self.res1.apply(tape, h)?;
        let h = self.res2.apply(tape, h)?;
        self.out.apply(tape, h)
    }

    pub fn vars(&self) -> Vec<Var> {
        let mut v = Vec::new();
        self.proj.vars(&mut v);
        for r in [&self.res1, &self.res2] {
            r.fc1.vars(&mut v);
            r.fc2.vars(&mut v);
        }
        self.out.vars(&mut v);
        v
    }
}

impl Parameters for EncoderParams {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.proj.visit("encoder.proj", "W", "b", &mut out);
        for (name, r) in [("encoder.res1", &self.res1), ("encoder.res2", &self.res2)] {
            r.fc1.visit(name, "W1", "b1", &mut out);
            r.fc2.visit(name, "W2", "b2", &mut out);
        }
        self.out.visit("encoder.out", "W", "b", &mut out);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        self.proj.visit_mut(&mut out);
        for r in [&mut self.res1, &mut self.res2] {
            r.fc1.visit_mut(&mut out);
            r.fc2.visit_mut(&mut out);
        }
        self.out.visit_mut(&mut out);
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VelocityParams {
    pub y_embed: Linear,
    pub t_embed: Linear,
    pub film: Linear,
    pub block1: GatedBlock,
    pub block2: GatedBlock,
    pub head0: Linear,
    pub head1: Linear,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundVelocity {
    y_embed: BoundLinear,
    t_embed: BoundLinear,
    film: BoundLinear,
    block1: BoundGatedBlock,
    block2: BoundGatedBlock,
    pub head0: BoundLinear,
    pub head1: BoundLinear,
    hidden: usize,
}

/// Sinusoidal time features, `n x TIME_FEATURES`, frequencies `2^k * pi`.
pub fn time_features(t: &[f64]) -> Tensor {
    let mut out = Vec::with_capacity(t.len() * TIME_FEATURES);
    for &ti in t {
        let base = std::f64::consts::PI * ti;
        out.extend((0..TIME_FREQUENCIES).map(|k| (base * (1u64 << k) as f64).sin()));
        out.extend((0..TIME_FREQUENCIES).map(|k| (base * (1u64 << k) as f64).cos()));
    }
    Tensor::from_parts(vec![t.len(), TIME_FEATURES], out)
}

impl VelocityParams {
    /// `cond_dim` is the width of the conditioning input: `d_z` normally,
    /// `d_x` when the network is conditioned on raw covariates.
    pub fn init(dims: &ModelDims, cond_dim: usize, rng: &mut CounterRng) -> Self {
        let h = dims.hidden;
        Self {
            y_embed: Linear::init(dims.d_y, h, rng),
            t_embed: Linear::init(TIME_FEATURES, dims.time_embed, rng),
            film: Linear::init(cond_dim + dims.time_embed, 2 * h, rng),
            block1: GatedBlock::init(h, rng),
            block2: GatedBlock::init(h, rng),
            head0: Linear::init(h, dims.d_y, rng),
            head1: Linear::init(h, dims.d_y, rng),
        }
    }

    pub fn hidden(&self) -> usize {
        self.y_embed.w.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.y_embed.w.rows()
    }

    pub fn cond_dim(&self) -> usize {
        self.film.w.rows() - self.t_embed.w.cols()
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundVelocity {
        BoundVelocity {
            y_embed: self.y_embed.bind(tape),
            t_embed: self.t_embed.bind(tape),
            film: self.film.bind(tape),
            block1: self.block1.bind(tape),
            block2: self.block2.bind(tape),
            head0: self.head0.bind(tape),
            head1: self.head1.bind(tape),
            hidden: self.hidden(),
        }
    }

    /// Untracked forward pass.
    pub fn eval(&self, psi: &Tensor, t: &[f64], cond: &Tensor, treated: &[bool]) -> Result<Tensor> {
        let mut tape = Tape::no_grad();
        let bound = self.bind(&mut tape);
        let p = tape.constant(psi.clone());
        let c = tape.constant(cond.clone());
        let v = bound.forward(&mut tape, p, t, c, treated)?;
        Ok(tape.value(v).clone())
    }
}

impl BoundVelocity {
    /// Shared trunk: outcome embedding, FiLM from `[cond ; time embedding]`,
    /// two gated blocks whose outputs are summed.
    pub fn trunk(&self, tape: &mut Tape, psi: Var, t: &[f64], cond: Var) -> Result<Var> {
        if let Some(bad) = t.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Precondition(format!("time {bad} outside [0, 1]")));
        }
        let n = tape.value(psi).rows();
        if t.len() != n || tape.value(cond).rows() != n {
            return Err(Error::Shape {
                op: "velocity_forward",
                lhs: tape.value(psi).shape().to_vec(),
                rhs: vec![t.len(), tape.value(cond).rows()],
            });
        }
        let h = self.hidden;
        let ye = self.y_embed.apply(tape, psi)?;
        let tf = tape.constant(time_features(t));
        let te = self.t_embed.apply(tape, tf)?;
        let c = tape.concat_cols(cond, te)?;
        let gb = self.film.apply(tape, c)?;
        let gamma = tape.slice_cols(gb, 0, h)?;
        let beta = tape.slice_cols(gb, h, h)?;
        let scale = tape.shift(gamma, 1.0);
        let modulated = tape.mul(ye, scale)?;
        let h0 = tape.add(modulated, beta)?;
        let b1 = self.block1.apply(tape, h0)?;
        let b2 = self.block2.apply(tape, b1)?;
        tape.add(b1, b2)
    }

    pub fn forward(&self, tape: &mut Tape, psi: Var, t: &[f64], cond: Var, treated: &[bool]) -> Result<Var> {
        let trunk = self.trunk(tape, psi, t, cond)?;
        let v0 = self.head0.apply(tape, trunk)?;
        let v1 = self.head1.apply(tape, trunk)?;
        tape.select_rows(treated, v0, v1)
    }

    pub fn vars(&self) -> Vec<Var> {
        let mut v = Vec::new();
        self.y_embed.vars(&mut v);
        self.t_embed.vars(&mut v);
        self.film.vars(&mut v);
        for b in [&self.block1, &self.block2] {
            b.gate.vars(&mut v);
            b.transform.vars(&mut v);
        }
        self.head0.vars(&mut v);
        self.head1.vars(&mut v);
        v
    }
}

impl Parameters for VelocityParams {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.y_embed.visit("velocity.y_embed", "W", "b", &mut out);
        self.t_embed.visit("velocity.t_embed", "W", "b", &mut out);
        self.film.visit("velocity.film", "W", "b", &mut out);
        for (name, b) in [("velocity.block1", &self.block1), ("velocity.block2", &self.block2)] {
            b.gate.visit(name, "Wg", "bg", &mut out);
            b.transform.visit(name, "Wf", "bf", &mut out);
        }
        self.head0.visit("velocity.head0", "W", "b", &mut out);
        self.head1.visit("velocity.head1", "W", "b", &mut out);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        self.y_embed.visit_mut(&mut out);
        self.t_embed.visit_mut(&mut out);
        self.film.visit_mut(&mut out);
        for b in [&mut self.block1, &mut self.block2] {
            b.gate.visit_mut(&mut out);
            b.transform.visit_mut(&mut out);
        }
        self.head0.visit_mut(&mut out);
        self.head1.visit_mut(&mut out);
        out
    }
}

/// Deterministic initialization of both networks from one seed.
pub fn init_params(dims: &ModelDims, seed: u64) -> Result<(EncoderParams, VelocityParams)> {
    dims.validate()?;
    let root = CounterRng::new(seed);
    let enc = EncoderParams::init(dims, &mut root.named("encoder"));
    let vel = VelocityParams::init(dims, dims.d_z, &mut root.named("velocity"));
    Ok((enc, vel))
}

/// Copies named tensors into `target`, checking every name and shape.
pub fn load_named<P: Parameters>(target: &mut P, source: &std::collections::BTreeMap<String, Tensor>) -> Result<()> {
    let names: Vec<(String, Vec<usize>)> =
        target.named_params().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
    for ((name, shape), slot) in names.iter().zip(target.params_mut()) {
        let t = source.get(name).ok_or_else(|| Error::parse(name.clone(), "missing parameter"))?;
        if t.shape() != shape.as_slice() {
            return Err(Error::Shape { op: "load_named", lhs: shape.clone(), rhs: t.shape().to_vec() });
        }
        *slot = t.clone();
    }
    Ok(())
}
