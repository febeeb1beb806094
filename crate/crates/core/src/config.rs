//! Run configuration, read from a TOML document.
//!
//! Every key is optional; absent keys take the defaults listed in the README.
//! Unknown keys and sections are rejected, and every error names the key
//! as `section.key`.

use std::path::{Path, PathBuf};

use toml::{Table, Value};

use crate::balance::SinkhornOptions;
use crate::data::DEFAULT_FRACTIONS;
use crate::error::{Error, Result};
use crate::eval::{DataSource, ExperimentConfig, SweepParam, Widths};
use crate::flow::{BalanceKind, EarlyStopping, FlowConfig, Variant};
use crate::sampler::SampleSpec;

pub const SCHEMA_VERSION: i64 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    SettingA,
    SettingB,
    Ihdp,
    Csv,
}

impl DatasetKind {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "setting_a" => Ok(DatasetKind::SettingA),
            "setting_b" => Ok(DatasetKind::SettingB),
            "ihdp" => Ok(DatasetKind::Ihdp),
            "csv" => Ok(DatasetKind::Csv),
            other => Err(Error::config("dataset.kind", format!("unknown kind {other:?}; expected setting_a, setting_b, ihdp or csv"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub n: usize,
    pub d: usize,
    /// Mean shift of the treated covariates in setting B.
    pub shift: f64,
    /// Replication file or directory (ihdp) or synthetic CSV (csv).
    pub path: Option<PathBuf>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { kind: DatasetKind::SettingA, n: 1000, d: 10, shift: 0.5, path: None }
    }
}

impl DatasetConfig {
    pub fn source(&self) -> Result<DataSource> {
        let path = || self.path.clone().ok_or_else(|| Error::config("dataset.path", "required for this dataset kind"));
        Ok(match self.kind {
            DatasetKind::SettingA => DataSource::SettingA { n: self.n, d: self.d },
            DatasetKind::SettingB => DataSource::SettingB { n: self.n, d: self.d, shift: self.shift },
            DatasetKind::Csv => DataSource::SyntheticCsv(path()?),
            DatasetKind::Ihdp => DataSource::Ihdp(crate::eval::ihdp_files(&path()?)?),
        })
    }
}

/// Which treatment arm `sample` generates for each unit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arm {
    Factual,
    Control,
    Treated,
}

impl Arm {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "factual" => Ok(Arm::Factual),
            "control" => Ok(Arm::Control),
            "treated" => Ok(Arm::Treated),
            other => Err(Error::config("sample.arm", format!("unknown arm {other:?}; expected factual, control or treated"))),
        }
    }

    pub fn select(self, factual: bool) -> bool {
        match self {
            Arm::Factual => factual,
            Arm::Control => false,
            Arm::Treated => true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    pub param: SweepParam,
    pub grid: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { param: SweepParam::Lambda, grid: vec![0.0, 0.1, 1.0, 10.0] }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub widths: Widths,
    pub train: FlowConfig,
    pub sample: SampleSpec,
    pub arm: Arm,
    pub replications: usize,
    pub variant: Variant,
    pub fractions: [f64; 3],
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset: DatasetConfig::default(),
            widths: Widths::default(),
            train: FlowConfig::default(),
            sample: SampleSpec::default(),
            arm: Arm::Factual,
            replications: 1,
            variant: Variant::Full,
            fractions: DEFAULT_FRACTIONS,
            sweep: SweepConfig::default(),
        }
    }
}

const TOP_KEYS: &[&str] = &["schema_version", "seed", "dataset", "model", "train", "sample", "eval", "sweep"];
const DATASET_KEYS: &[&str] = &["kind", "n", "d", "s", "path"];
const MODEL_KEYS: &[&str] = &["latent_dim", "hidden", "time_embed"];
const TRAIN_KEYS: &[&str] = &[
    "sigma",
    "lambda",
    "batch_size",
    "steps",
    "lr",
    "balance",
    "sinkhorn_epsilon",
    "sinkhorn_max_iter",
    "sinkhorn_tol",
    "early_stopping_every",
    "early_stopping_patience",
];
const SAMPLE_KEYS: &[&str] = &["draws", "ode_steps", "arm"];
const EVAL_KEYS: &[&str] = &["replications", "variant", "split"];
const SWEEP_KEYS: &[&str] = &["param", "grid"];

struct Section<'a> {
    name: &'static str,
    table: Option<&'a Table>,
}

impl<'a> Section<'a> {
    fn new(root: &'a Table, name: &'static str, allowed: &[&str]) -> Result<Self> {
        let table = match root.get(name) {
            None => None,
            Some(Value::Table(t)) => Some(t),
            Some(_) => return Err(Error::config(name, "must be a table")),
        };
        if let Some(t) = table {
            if let Some(k) = t.keys().find(|k| !allowed.contains(&k.as_str())) {
                return Err(Error::config(format!("{name}.{k}"), "unknown key"));
            }
        }
        Ok(Self { name, table })
    }

    fn key(&self, k: &str) -> String {
        format!("{}.{k}", self.name)
    }

    fn raw(&self, k: &str) -> Option<&'a Value> {
        self.table.and_then(|t| t.get(k))
    }

    fn f64(&self, k: &str) -> Result<Option<f64>> {
        self.raw(k).map(|v| as_f64(v).ok_or_else(|| Error::config(self.key(k), "expected a number"))).transpose()
    }

    fn usize(&self, k: &str) -> Result<Option<usize>> {
        self.raw(k)
            .map(|v| match v {
                Value::Integer(i) if *i >= 0 => Ok(*i as usize),
                _ => Err(Error::config(self.key(k), "expected a non-negative integer")),
            })
            .transpose()
    }

    fn str(&self, k: &str) -> Result<Option<&'a str>> {
        self.raw(k).map(|v| v.as_str().ok_or_else(|| Error::config(self.key(k), "expected a string"))).transpose()
    }

    fn f64_list(&self, k: &str) -> Result<Option<Vec<f64>>> {
        self.raw(k)
            .map(|v| {
                let bad = || Error::config(self.key(k), "expected an array of numbers");
                v.as_array().ok_or_else(bad)?.iter().map(|x| as_f64(x).ok_or_else(bad)).collect()
            })
            .transpose()
    }
}

fn as_f64(v: &Value) -> Option<f64> {
    match v {
        Value::Float(f) => Some(*f),
        Value::Integer(i) => Some(*i as f64),
        _ => None,
    }
}

impl RunConfig {
    /// Reads a config file. Relative dataset paths resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent())
    }

    pub fn parse(text: &str, base_dir: Option<&Path>) -> Result<Self> {
        let root: Table = text.parse().map_err(|e: toml::de::Error| Error::parse("config", e.message().to_string()))?;
        if let Some(k) = root.keys().find(|k| !TOP_KEYS.contains(&k.as_str())) {
            return Err(Error::config(k.clone(), "unknown key"));
        }
        match root.get("schema_version") {
            None => return Err(Error::config("schema_version", "missing")),
            Some(Value::Integer(SCHEMA_VERSION)) => {}
            Some(v) => return Err(Error::config("schema_version", format!("unsupported version {v}; expected {SCHEMA_VERSION}"))),
        }
        let mut cfg = RunConfig::default();
        match root.get("seed") {
            None => {}
            Some(Value::Integer(s)) if *s >= 0 => cfg.seed = *s as u64,
            Some(_) => return Err(Error::config("seed", "expected a non-negative integer")),
        }

        let ds = Section::new(&root, "dataset", DATASET_KEYS)?;
        if let Some(k) = ds.str("kind")? {
            cfg.dataset.kind = DatasetKind::parse(k)?;
        }
        cfg.dataset.n = ds.usize("n")?.unwrap_or(cfg.dataset.n);
        cfg.dataset.d = ds.usize("d")?.unwrap_or(cfg.dataset.d);
        cfg.dataset.shift = ds.f64("s")?.unwrap_or(cfg.dataset.shift);
        if let Some(p) = ds.str("path")? {
            let p = PathBuf::from(p);
            cfg.dataset.path = Some(match base_dir {
                Some(base) if p.is_relative() => base.join(p),
                _ => p,
            });
        }

        let model = Section::new(&root, "model", MODEL_KEYS)?;
        cfg.widths.latent_dim = model.usize("latent_dim")?.unwrap_or(cfg.widths.latent_dim);
        cfg.widths.hidden = model.usize("hidden")?.unwrap_or(cfg.widths.hidden);
        cfg.widths.time_embed = model.usize("time_embed")?.unwrap_or(cfg.widths.time_embed);

        let tr = Section::new(&root, "train", TRAIN_KEYS)?;
        let t = &mut cfg.train;
        t.sigma = tr.f64("sigma")?.unwrap_or(t.sigma);
        t.lambda = tr.f64("lambda")?.unwrap_or(t.lambda);
        t.batch_size = tr.usize("batch_size")?.unwrap_or(t.batch_size);
        t.steps = tr.usize("steps")?.unwrap_or(t.steps);
        t.lr = tr.f64("lr")?.unwrap_or(t.lr);
        if let Some(b) = tr.str("balance")? {
            t.balance = match b {
                "sinkhorn" => BalanceKind::Sinkhorn,
                "mmd" => BalanceKind::Mmd,
                other => return Err(Error::config("train.balance", format!("unknown balance {other:?}; expected sinkhorn or mmd"))),
            };
        }
        let sk = SinkhornOptions::default();
        t.sinkhorn = SinkhornOptions {
            epsilon: tr.f64("sinkhorn_epsilon")?.unwrap_or(sk.epsilon),
            max_iter: tr.usize("sinkhorn_max_iter")?.unwrap_or(sk.max_iter),
            tol: tr.f64("sinkhorn_tol")?.unwrap_or(sk.tol),
        };
        t.early_stopping = match (tr.usize("early_stopping_every")?, tr.usize("early_stopping_patience")?) {
            (None, None) => None,
            (Some(every), Some(patience)) => Some(EarlyStopping { every, patience }),
            (Some(_), None) => return Err(Error::config("train.early_stopping_patience", "required with early_stopping_every")),
            (None, Some(_)) => return Err(Error::config("train.early_stopping_every", "required with early_stopping_patience")),
        };

        let sa = Section::new(&root, "sample", SAMPLE_KEYS)?;
        cfg.sample.draws = sa.usize("draws")?.unwrap_or(cfg.sample.draws);
        cfg.sample.ode_steps = sa.usize("ode_steps")?.unwrap_or(cfg.sample.ode_steps);
        if let Some(a) = sa.str("arm")? {
            cfg.arm = Arm::parse(a)?;
        }

        let ev = Section::new(&root, "eval", EVAL_KEYS)?;
        cfg.replications = ev.usize("replications")?.unwrap_or(cfg.replications);
        if let Some(v) = ev.str("variant")? {
            cfg.variant = v.parse().map_err(|_| Error::config("eval.variant", format!("unknown variant {v:?}")))?;
        }
        if let Some(s) = ev.f64_list("split")? {
            cfg.fractions = s.try_into().map_err(|_| Error::config("eval.split", "expected three fractions"))?;
        }

        let sw = Section::new(&root, "sweep", SWEEP_KEYS)?;
        if let Some(p) = sw.str("param")? {
            cfg.sweep.param = SweepParam::parse(p)?;
        }
        cfg.sweep.grid = sw.f64_list("grid")?.unwrap_or(cfg.sweep.grid);

        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dataset.n == 0 {
            return Err(Error::config("dataset.n", "must be positive"));
        }
        if self.dataset.d == 0 {
            return Err(Error::config("dataset.d", "must be positive"));
        }
        if !self.dataset.shift.is_finite() {
            return Err(Error::config("dataset.s", "must be finite"));
        }
        for (key, v) in [("model.latent_dim", self.widths.latent_dim), ("model.hidden", self.widths.hidden), ("model.time_embed", self.widths.time_embed)] {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        self.train.validate()?;
        self.sample.validate()?;
        if self.replications == 0 {
            return Err(Error::config("eval.replications", "must be >= 1"));
        }
        let f = self.fractions;
        if f.iter().any(|x| !(*x >= 0.0)) || f[0] <= 0.0 || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config("eval.split", "fractions must be non-negative, train positive, and sum to 1"));
        }
        if self.sweep.grid.is_empty() {
            return Err(Error::config("sweep.grid", "must not be empty"));
        }
        Ok(())
    }

    pub fn experiment(&self) -> Result<ExperimentConfig> {
        Ok(ExperimentConfig {
            source: self.dataset.source()?,
            widths: self.widths,
            train: self.train.clone(),
            sample: self.sample,
            fractions: self.fractions,
        })
    }
}
