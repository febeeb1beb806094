#![allow(dead_code)]

use repflow::autodiff::{Parameters, Tape, Tensor};
use repflow::balance::{balance_loss, sinkhorn, transport_cost_frozen, SinkhornOptions, TransportPlan};
use repflow::flow::{flow_loss, forward_losses, interpolant, target_velocity, Batch, Conditioning, FlowConfig, FlowModel};
use repflow::nets::ModelDims;
use repflow::rng::CounterRng;

pub fn random_tensor(rng: &mut CounterRng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), rng.normals(n)).unwrap()
}

pub fn small_dims() -> ModelDims {
    ModelDims { d_x: 4, d_y: 1, d_z: 3, hidden: 6, time_embed: 4 }
}

/// A batch of `n` rows with both treatment groups present.
pub fn small_batch(rng: &mut CounterRng, dims: &ModelDims, n: usize) -> Batch {
    let x = random_tensor(rng, &[n, dims.d_x]);
    let treated = (0..n).map(|i| i % 2 == 1).collect();
    let y0 = random_tensor(rng, &[n, dims.d_y]);
    let y1 = random_tensor(rng, &[n, dims.d_y]);
    let t = (0..n).map(|_| 0.05 + 0.9 * rng.uniform()).collect();
    Batch { x, treated, y0, t, y1 }
}

fn groups(treated: &[bool]) -> (Vec<usize>, Vec<usize>) {
    let i0 = (0..treated.len()).filter(|&i| !treated[i]).collect();
    let i1 = (0..treated.len()).filter(|&i| treated[i]).collect();
    (i0, i1)
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Composed loss `L_flow + lambda <plan, H(z0, z1)>` evaluated without a
/// gradient tape; the transport cost is summed here from raw distances.
pub fn composed_value(model: &FlowModel, batch: &Batch, sigma: f64, lambda: f64, plan: &TransportPlan) -> f64 {
    let mut tape = Tape::no_grad();
    let x = tape.constant(batch.x.clone());
    let enc = model.encoder.bind(&mut tape);
    let z = enc.forward(&mut tape, x).unwrap();
    let vel = model.velocity.bind(&mut tape);
    let psi = tape.constant(interpolant(&batch.y0, &batch.y1, &batch.t, sigma).unwrap());
    let u = tape.constant(target_velocity(&batch.y0, &batch.y1, sigma).unwrap());
    let v = vel.forward(&mut tape, psi, &batch.t, z, &batch.treated).unwrap();
    let lf = flow_loss(&mut tape, v, u).unwrap();
    let zt = tape.value(z).clone();
    let (i0, i1) = groups(&batch.treated);
    let mut cost = 0.0;
    for (a, &i) in i0.iter().enumerate() {
        for (b, &j) in i1.iter().enumerate() {
            cost += plan.get(a, b) * euclid(zt.row(i), zt.row(j));
        }
    }
    tape.value(lf).item() + lambda * cost
}

/// Plan solved at the model's current latent codes for `batch`.
pub fn plan_at(model: &FlowModel, batch: &Batch, opts: &SinkhornOptions) -> TransportPlan {
    let z = model.encoder.encode(&batch.x).unwrap();
    let (i0, i1) = groups(&batch.treated);
    let h = repflow::balance::cost_matrix(&z.select_rows(&i0), &z.select_rows(&i1)).unwrap();
    sinkhorn(&h, opts.epsilon, opts.max_iter, opts.tol).unwrap()
}

/// Backward gradients of the composed loss with `plan` held fixed, in
/// `named_params` order (encoder then velocity).
pub fn composed_grads(model: &FlowModel, batch: &Batch, sigma: f64, lambda: f64, plan: &TransportPlan) -> Vec<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(batch.x.clone());
    let enc = model.encoder.bind(&mut tape);
    let z = enc.forward(&mut tape, x).unwrap();
    let vel = model.velocity.bind(&mut tape);
    let (i0, i1) = groups(&batch.treated);
    let z0 = tape.gather_rows(z, &i0).unwrap();
    let z1 = tape.gather_rows(z, &i1).unwrap();
    let bal = transport_cost_frozen(&mut tape, z0, z1, plan).unwrap();
    let psi = tape.constant(interpolant(&batch.y0, &batch.y1, &batch.t, sigma).unwrap());
    let u = tape.constant(target_velocity(&batch.y0, &batch.y1, sigma).unwrap());
    let v = vel.forward(&mut tape, psi, &batch.t, z, &batch.treated).unwrap();
    let lf = flow_loss(&mut tape, v, u).unwrap();
    let scaled = tape.scale(bal, lambda);
    let total = tape.add(lf, scaled).unwrap();
    let g = tape.backward(total).unwrap();
    enc.vars().into_iter().chain(vel.vars()).map(|v| g.get(v)).collect()
}

/// Training-path gradients from `forward_losses`, same order.
pub fn training_grads(model: &FlowModel, batch: &Batch, cfg: &FlowConfig) -> Vec<Tensor> {
    let mut tape = Tape::new();
    let f = forward_losses(&mut tape, model, batch, cfg).unwrap();
    let g = tape.backward(f.total).unwrap();
    f.encoder_vars.iter().chain(&f.velocity_vars).map(|&v| g.get(v)).collect()
}

/// Reads entry `i` of parameter tensor `k` (encoder tensors first), writing
/// `set` when given; returns the previous value.
fn entry(m: &mut FlowModel, n_enc: usize, k: usize, i: usize, set: Option<f64>) -> f64 {
    let mut params = if k < n_enc { m.encoder.params_mut() } else { m.velocity.params_mut() };
    let t = &mut params[if k < n_enc { k } else { k - n_enc }];
    let old = t.values()[i];
    if let Some(v) = set {
        t.values_mut()[i] = v;
    }
    old
}

/// Largest per-tensor relative error between backward gradients and central
/// differences of `composed_value`. Per tensor the error is
/// `max |analytic - numeric| / max(|analytic|_inf, |numeric|_inf, 1e-10)`.
pub fn pipeline_grad_error(model: &FlowModel, batch: &Batch, sigma: f64, lambda: f64, opts: &SinkhornOptions, step: f64) -> f64 {
    let plan = plan_at(model, batch, opts);
    let analytic = composed_grads(model, batch, sigma, lambda, &plan);
    let mut work = model.clone();
    let mut worst = 0.0f64;
    let n_enc = model.encoder.named_params().len();
    for (k, a) in analytic.iter().enumerate() {
        let mut numeric = vec![0.0; a.numel()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = entry(&mut work, n_enc, k, i, None);
            entry(&mut work, n_enc, k, i, Some(orig + step));
            let up = composed_value(&work, batch, sigma, lambda, &plan);
            entry(&mut work, n_enc, k, i, Some(orig - step));
            let down = composed_value(&work, batch, sigma, lambda, &plan);
            entry(&mut work, n_enc, k, i, Some(orig));
            *slot = (up - down) / (2.0 * step);
        }
        let inf = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let scale = inf(a.values()).max(inf(&numeric)).max(1e-10);
        let err = a.values().iter().zip(&numeric).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        worst = worst.max(err / scale);
    }
    worst
}

/// Fresh latent-conditioned model for the small test dims.
pub fn small_model(seed: u64) -> FlowModel {
    FlowModel::init(small_dims(), Conditioning::Latent, seed).unwrap()
}

/// Balance value through the training path for comparison with the frozen path.
pub fn balance_value(model: &FlowModel, batch: &Batch, opts: &SinkhornOptions) -> f64 {
    let mut tape = Tape::no_grad();
    let x = tape.constant(batch.x.clone());
    let enc = model.encoder.bind(&mut tape);
    let z = enc.forward(&mut tape, x).unwrap();
    let (i0, i1) = groups(&batch.treated);
    let z0 = tape.gather_rows(z, &i0).unwrap();
    let z1 = tape.gather_rows(z, &i1).unwrap();
    let (v, _) = balance_loss(&mut tape, z0, z1, opts).unwrap();
    tape.value(v).item()
}
