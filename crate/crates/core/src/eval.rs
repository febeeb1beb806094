//! Metrics, experiment runs over replications, sweeps and the bound diagnostic.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::balance::{latent_group_distance, SinkhornOptions};
use crate::data::{self, CausalData, Split, Standardizer};
use crate::error::{Error, Result};
use crate::flow::{train, Conditioning, FlowConfig, FlowModel, TrainData, TrainState, Variant};
use crate::nets::ModelDims;
use crate::rng::CounterRng;
use crate::sampler::{sample_units, unit_seeds, SampleSpec};

fn check_len(a: usize, b: usize, op: &'static str) -> Result<()> {
    if a != b {
        return Err(Error::Shape { op, lhs: vec![a], rhs: vec![b] });
    }
    if a == 0 {
        return Err(Error::Precondition(format!("{op} needs at least one value")));
    }
    Ok(())
}

/// Root mean squared error between estimated and true effects.
pub fn pehe_sqrt(tau_hat: &[f64], tau: &[f64]) -> Result<f64> {
    check_len(tau_hat.len(), tau.len(), "pehe_sqrt")?;
    let mse = tau_hat.iter().zip(tau).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / tau.len() as f64;
    Ok(mse.sqrt())
}

/// `|mean(tau_hat) - mean(tau)|`.
pub fn ate_error(tau_hat: &[f64], tau: &[f64]) -> Result<f64> {
    check_len(tau_hat.len(), tau.len(), "ate_error")?;
    let n = tau.len() as f64;
    Ok((tau_hat.iter().sum::<f64>() / n - tau.iter().sum::<f64>() / n).abs())
}

/// Mean Euclidean distance between row `i` of `y_hat` and row `i` of `y_true`.
pub fn empirical_w1(y_hat: &Tensor, y_true: &Tensor) -> Result<f64> {
    if y_hat.shape() != y_true.shape() {
        return Err(Error::Shape { op: "empirical_w1", lhs: y_hat.shape().to_vec(), rhs: y_true.shape().to_vec() });
    }
    let n = y_hat.rows();
    if n == 0 {
        return Err(Error::Precondition("empirical_w1 needs at least one row".into()));
    }
    let total: f64 = (0..n)
        .map(|i| y_hat.row(i).iter().zip(y_true.row(i)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
        .sum();
    Ok(total / n as f64)
}

/// One-dimensional W1 between two empirical laws of equal size: sort both and pair by rank.
pub fn sorted_w1(a: &[f64], b: &[f64]) -> Result<f64> {
    check_len(a.len(), b.len(), "sorted_w1")?;
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

/// Where the observational data for a replication comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    SettingA { n: usize, d: usize },
    SettingB { n: usize, d: usize, shift: f64 },
    /// A file written by the synthetic CSV exporter.
    SyntheticCsv(PathBuf),
    /// One IHDP replication file per experiment replication.
    Ihdp(Vec<PathBuf>),
}

impl DataSource {
    pub fn label(&self) -> &'static str {
        match self {
            DataSource::SettingA { .. } => "setting_a",
            DataSource::SettingB { .. } => "setting_b",
            DataSource::SyntheticCsv(_) => "synthetic_csv",
            DataSource::Ihdp(_) => "ihdp",
        }
    }

    pub fn load(&self, replication: usize, seed: u64) -> Result<CausalData> {
        Ok(match self {
            DataSource::SettingA { n, d } => data::gen_setting_a(*n, *d, seed)?.into(),
            DataSource::SettingB { n, d, shift } => data::gen_setting_b(*n, *d, *shift, seed)?.into(),
            DataSource::SyntheticCsv(path) => data::read_synthetic_csv(path)?.into(),
            DataSource::Ihdp(files) => {
                let path = files.get(replication).ok_or_else(|| {
                    Error::config("dataset.path", format!("replication {replication} requested but only {} IHDP files found", files.len()))
                })?;
                data::load_ihdp(path)?.into()
            }
        })
    }
}

/// Lists `*.csv` files of a directory in name order, or the single file given.
pub fn ihdp_files(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::config("dataset.path", format!("no .csv files in {}", path.display())));
        }
        Ok(files)
    } else if path.exists() {
        Ok(vec![path.to_path_buf()])
    } else {
        Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "no such file or directory")))
    }
}

/// Network widths; the input dimension comes from the data.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Widths {
    pub latent_dim: usize,
    pub hidden: usize,
    pub time_embed: usize,
}

impl Default for Widths {
    fn default() -> Self {
        let d = ModelDims::new(1, 1);
        Self { latent_dim: d.d_z, hidden: d.hidden, time_embed: d.time_embed }
    }
}

impl Widths {
    pub fn dims(&self, d_x: usize) -> ModelDims {
        ModelDims { d_x, d_y: 1, d_z: self.latent_dim, hidden: self.hidden, time_embed: self.time_embed }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub source: DataSource,
    pub widths: Widths,
    pub train: FlowConfig,
    pub sample: SampleSpec,
    pub fractions: [f64; 3],
}

/// Seeds for one replication, all derived from the root seed by name.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReplicationSeeds {
    pub gen: u64,
    pub split: u64,
    pub init: u64,
    pub train: u64,
    pub sample: u64,
    pub truth: u64,
}

impl ReplicationSeeds {
    pub fn new(root: u64, replication: usize) -> Self {
        let r = CounterRng::new(root).named("replication").split(replication as u64);
        Self {
            gen: r.derive_seed("gen"),
            split: r.derive_seed("split"),
            init: r.derive_seed("init"),
            train: r.derive_seed("train"),
            sample: r.derive_seed("sample"),
            truth: r.derive_seed("truth"),
        }
    }
}

/// Loaded, split and standardized data for one replication.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub data: CausalData,
    pub split: Split,
    pub standardizer: Standardizer,
}

impl Prepared {
    pub fn new(source: &DataSource, fractions: [f64; 3], replication: usize, seeds: &ReplicationSeeds) -> Result<Self> {
        let data = source.load(replication, seeds.gen)?;
        let split = data::split(data.len(), fractions, seeds.split)?;
        let standardizer = Standardizer::fit(&data.subset(&split.train))?;
        Ok(Self { data, split, standardizer })
    }

    pub fn train_data(&self) -> Result<TrainData> {
        TrainData::from_causal(&self.data.subset(&self.split.train), &self.standardizer)
    }

    pub fn val_data(&self) -> Result<TrainData> {
        TrainData::from_causal(&self.data.subset(&self.split.val), &self.standardizer)
    }
}

/// Initializes and trains a model for a variant on prepared data.
pub fn fit(prepared: &Prepared, variant: Variant, widths: &Widths, train_cfg: &FlowConfig, seeds: &ReplicationSeeds) -> Result<TrainState> {
    let dims = widths.dims(prepared.data.d_x());
    let model = FlowModel::init(dims, variant.conditioning(), seeds.init)?;
    let cfg = FlowConfig { seed: seeds.train, ..variant.apply(train_cfg) };
    let val = prepared.val_data()?;
    train(model, &prepared.train_data()?, Some(&val), &cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicationMetrics {
    pub pehe_sqrt_in: f64,
    pub ate_err_in: f64,
    pub pehe_sqrt_out: f64,
    pub ate_err_out: f64,
    pub w1_in: Option<f64>,
    pub w1_out: Option<f64>,
    pub w1_sorted_in: Option<f64>,
    pub w1_sorted_out: Option<f64>,
    /// Latent distance between treatment groups on the test split.
    pub latent_distance: Option<f64>,
}

impl ReplicationMetrics {
    pub fn entries(&self) -> Vec<(&'static str, f64)> {
        let mut v = vec![
            ("pehe_sqrt_in", self.pehe_sqrt_in),
            ("ate_err_in", self.ate_err_in),
            ("pehe_sqrt_out", self.pehe_sqrt_out),
            ("ate_err_out", self.ate_err_out),
        ];
        let optional = [
            ("w1_in", self.w1_in),
            ("w1_out", self.w1_out),
            ("w1_sorted_in", self.w1_sorted_in),
            ("w1_sorted_out", self.w1_sorted_out),
            ("latent_distance", self.latent_distance),
        ];
        v.extend(optional.into_iter().filter_map(|(k, x)| x.map(|x| (k, x))));
        v
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.entries().into_iter().find(|(k, _)| *k == name).map(|(_, v)| v)
    }
}

struct SetScores {
    pehe: f64,
    ate: f64,
    w1: Option<f64>,
    w1_sorted: Option<f64>,
}

/// Effect metrics and the factual-and-counterfactual W1 on units `idx`.
fn score_units(model: &FlowModel, prepared: &Prepared, idx: &[usize], spec: SampleSpec, seeds: &ReplicationSeeds) -> Result<SetScores> {
    let data = &prepared.data;
    let truth = data.truth.as_ref().ok_or_else(|| Error::Unsupported("dataset has no ground-truth response surfaces".into()))?;
    let x = data.x.select_rows(idx);
    let noise = unit_seeds(seeds.sample, idx);
    let st = &prepared.standardizer;
    let d1 = sample_units(model, st, &x, &vec![true; idx.len()], &noise, spec)?;
    let d0 = sample_units(model, st, &x, &vec![false; idx.len()], &noise, spec)?;
    let tau_hat: Vec<f64> = d1.mean().values().iter().zip(d0.mean().values()).map(|(a, b)| a - b).collect();
    let tau_all = truth.tau();
    let tau: Vec<f64> = idx.iter().map(|&i| tau_all[i]).collect();
    let pehe = pehe_sqrt(&tau_hat, &tau)?;
    let ate = ate_error(&tau_hat, &tau)?;

    let (w1, w1_sorted) = match truth.noise_std {
        Some(s) => {
            let truth_seeds = unit_seeds(seeds.truth, idx);
            let (mut gen, mut real) = (Vec::new(), Vec::new());
            let mut sorted_total = 0.0;
            for (arm, draws) in [(false, &d0), (true, &d1)] {
                let mu = truth.mu(arm);
                let g: Vec<f64> = draws.draws[0].values().to_vec();
                let r: Vec<f64> = idx
                    .iter()
                    .zip(&truth_seeds)
                    .map(|(&i, &ts)| mu[i] + s * CounterRng::new(ts).named(if arm { "arm1" } else { "arm0" }).normal())
                    .collect();
                sorted_total += sorted_w1(&g, &r)?;
                gen.extend(g);
                real.extend(r);
            }
            let n = gen.len();
            let w = empirical_w1(&Tensor::from_parts(vec![n, 1], gen), &Tensor::from_parts(vec![n, 1], real))?;
            (Some(w), Some(sorted_total / 2.0))
        }
        None => (None, None),
    };
    Ok(SetScores { pehe, ate, w1, w1_sorted })
}

/// Scores a trained model on the in-sample (train + validation) and test units.
pub fn evaluate(state: &TrainState, prepared: &Prepared, spec: SampleSpec, sinkhorn: &SinkhornOptions, seeds: &ReplicationSeeds) -> Result<ReplicationMetrics> {
    let model = &state.model;
    let ins = score_units(model, prepared, &prepared.split.in_sample(), spec, seeds)?;
    let out = score_units(model, prepared, &prepared.split.test, spec, seeds)?;
    let latent_distance = match model.conditioning {
        Conditioning::Latent => {
            let test = prepared.data.subset(&prepared.split.test);
            let both = test.treated_count() > 0 && test.treated_count() < test.len();
            if both {
                let x = prepared.standardizer.apply_x(&test.x)?;
                Some(latent_group_distance(&model.encoder, &x, &test.treated, sinkhorn)?)
            } else {
                None
            }
        }
        Conditioning::Raw => None,
    };
    Ok(ReplicationMetrics {
        pehe_sqrt_in: ins.pehe,
        ate_err_in: ins.ate,
        pehe_sqrt_out: out.pehe,
        ate_err_out: out.ate,
        w1_in: ins.w1,
        w1_out: out.w1,
        w1_sorted_in: ins.w1_sorted,
        w1_sorted_out: out.w1_sorted,
        latent_distance,
    })
}

/// Full pipeline for one replication.
pub fn run_replication(cfg: &ExperimentConfig, variant: Variant, replication: usize, seed: u64) -> Result<ReplicationMetrics> {
    let seeds = ReplicationSeeds::new(seed, replication);
    let prepared = Prepared::new(&cfg.source, cfg.fractions, replication, &seeds)?;
    if prepared.data.truth.is_none() {
        return Err(Error::Unsupported("dataset has no ground-truth response surfaces".into()));
    }
    let state = fit(&prepared, variant, &cfg.widths, &cfg.train, &seeds)?;
    log::info!("replication {replication}: trained {} steps", state.step);
    evaluate(&state, &prepared, cfg.sample, &cfg.train.sinkhorn, &seeds)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub metric: String,
    pub mean: f64,
    /// Sample standard deviation over replications divided by sqrt(count);
    /// absent with a single replication.
    pub stderr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub variant: Variant,
    pub dataset: String,
    pub replications: Vec<ReplicationMetrics>,
}

impl MetricsReport {
    /// Metric names in first-seen order.
    pub fn metric_names(&self) -> Vec<&'static str> {
        let mut names: Vec<&'static str> = Vec::new();
        for r in &self.replications {
            for (k, _) in r.entries() {
                if !names.contains(&k) {
                    names.push(k);
                }
            }
        }
        names
    }

    pub fn values(&self, metric: &str) -> Vec<f64> {
        self.replications.iter().filter_map(|r| r.get(metric)).collect()
    }

    pub fn summary(&self) -> Vec<MetricSummary> {
        self.metric_names()
            .into_iter()
            .map(|name| {
                let v = self.values(name);
                let n = v.len() as f64;
                let mean = v.iter().sum::<f64>() / n;
                let stderr = (v.len() >= 2).then(|| {
                    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
                    (var / n).sqrt()
                });
                MetricSummary { metric: name.to_string(), mean, stderr }
            })
            .collect()
    }

    /// `variant,dataset,replication,metric,value` rows, then `mean` and
    /// `stderr` rows per metric (empty value when undefined).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,dataset,replication,metric,value\n");
        for (r, m) in self.replications.iter().enumerate() {
            for (k, v) in m.entries() {
                let _ = writeln!(out, "{},{},{},{},{}", self.variant, self.dataset, r, k, v);
            }
        }
        for s in self.summary() {
            let _ = writeln!(out, "{},{},mean,{},{}", self.variant, self.dataset, s.metric, s.mean);
            let se = s.stderr.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},stderr,{},{}", self.variant, self.dataset, s.metric, se);
        }
        out
    }
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::config("--jobs", e.to_string()))
}

/// Runs `replications` independent replications; results are ordered by
/// replication index regardless of `jobs`.
pub fn run_experiment(cfg: &ExperimentConfig, variant: Variant, replications: usize, seed: u64, jobs: usize) -> Result<MetricsReport> {
    if replications == 0 {
        return Err(Error::config("eval.replications", "must be >= 1"));
    }
    cfg.train.validate()?;
    cfg.sample.validate()?;
    let reps = pool(jobs)?.install(|| {
        (0..replications).into_par_iter().map(|r| run_replication(cfg, variant, r, seed)).collect::<Result<Vec<_>>>()
    })?;
    Ok(MetricsReport { variant, dataset: cfg.source.label().to_string(), replications: reps })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Lambda,
    LatentDim,
}

impl SweepParam {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepParam::Lambda => "lambda",
            SweepParam::LatentDim => "latent_dim",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "lambda" => Ok(SweepParam::Lambda),
            "latent_dim" => Ok(SweepParam::LatentDim),
            other => Err(Error::config("sweep.param", format!("unknown parameter {other:?}; expected lambda or latent_dim"))),
        }
    }

    fn configure(self, base: &ExperimentConfig, value: f64) -> Result<ExperimentConfig> {
        let mut cfg = base.clone();
        match self {
            SweepParam::Lambda => {
                if !(value >= 0.0 && value.is_finite()) {
                    return Err(Error::config("sweep.grid", format!("lambda must be >= 0, got {value}")));
                }
                cfg.train.lambda = value;
            }
            SweepParam::LatentDim => {
                if !(value >= 1.0 && value.fract() == 0.0) {
                    return Err(Error::config("sweep.grid", format!("latent_dim must be a positive integer, got {value}")));
                }
                cfg.widths.latent_dim = value as usize;
            }
        }
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub value: f64,
    pub report: MetricsReport,
}

/// One experiment per grid value, all with the same root seed.
pub fn sweep(
    param: SweepParam,
    grid: &[f64],
    base: &ExperimentConfig,
    variant: Variant,
    replications: usize,
    seed: u64,
    jobs: usize,
) -> Result<Vec<SweepPoint>> {
    if grid.is_empty() {
        return Err(Error::config("sweep.grid", "must not be empty"));
    }
    let configs = grid.iter().map(|&v| param.configure(base, v)).collect::<Result<Vec<_>>>()?;
    grid.iter()
        .zip(&configs)
        .map(|(&value, cfg)| Ok(SweepPoint { value, report: run_experiment(cfg, variant, replications, seed, jobs)? }))
        .collect()
}

/// Long format: `param,value,metric,mean,stderr`.
pub fn sweep_csv(param: SweepParam, points: &[SweepPoint]) -> String {
    let mut out = String::from("param,value,metric,mean,stderr\n");
    for p in points {
        for s in p.report.summary() {
            let se = s.stderr.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{},{}", param.as_str(), p.value, s.metric, s.mean, se);
        }
    }
    out
}

pub const BOUND_DRAWS: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundDiagnostic {
    /// Mean over control units of the 1-D W1 between generated and true control outcomes.
    pub factual_loss_control: f64,
    /// Same for treated units under treatment.
    pub factual_loss_treated: f64,
    pub latent_distance: f64,
}

/// Terms of the factual-loss-plus-latent-distance bound on a synthetic split.
/// Each unit gets `draws` generated and `draws` true-noise samples of its
/// factual arm.
pub fn bound_diagnostic(
    model: &FlowModel,
    st: &Standardizer,
    split: &CausalData,
    ode_steps: usize,
    draws: usize,
    sinkhorn: &SinkhornOptions,
    seed: u64,
) -> Result<BoundDiagnostic> {
    let truth = split.truth.as_ref().ok_or_else(|| Error::Unsupported("bound diagnostic needs ground truth".into()))?;
    let noise_std = truth.noise_std.ok_or_else(|| Error::Unsupported("bound diagnostic needs a known noise scale".into()))?;
    if model.conditioning != Conditioning::Latent {
        return Err(Error::Unsupported("bound diagnostic needs a latent encoder".into()));
    }
    let n = split.len();
    let ids: Vec<usize> = (0..n).collect();
    let root = CounterRng::new(seed);
    let noise = unit_seeds(root.derive_seed("generated"), &ids);
    let truth_seeds = unit_seeds(root.derive_seed("true"), &ids);
    let gen = sample_units(model, st, &split.x, &split.treated, &noise, SampleSpec { draws, ode_steps })?;
    let (mut sum, mut count) = ([0.0; 2], [0usize; 2]);
    for i in 0..n {
        let a = split.treated[i];
        let g: Vec<f64> = gen.draws.iter().map(|d| d.values()[i]).collect();
        let mut r = CounterRng::new(truth_seeds[i]);
        let real: Vec<f64> = (0..draws).map(|_| truth.mu(a)[i] + noise_std * r.normal()).collect();
        sum[a as usize] += sorted_w1(&g, &real)?;
        count[a as usize] += 1;
    }
    if count[0] == 0 {
        return Err(Error::EmptyGroup("control"));
    }
    if count[1] == 0 {
        return Err(Error::EmptyGroup("treated"));
    }
    let x = st.apply_x(&split.x)?;
    let latent_distance = latent_group_distance(&model.encoder, &x, &split.treated, sinkhorn)?;
    Ok(BoundDiagnostic {
        factual_loss_control: sum[0] / count[0] as f64,
        factual_loss_treated: sum[1] / count[1] as f64,
        latent_distance,
    })
}
