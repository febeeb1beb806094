//! Subcommands behind the `repflow` binary.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::Checkpoint;
use crate::config::{DatasetKind, RunConfig};
use crate::data;
use crate::error::{Error, Result};
use crate::eval::{self, Prepared, ReplicationSeeds};
use crate::flow::{self, Variant};
use crate::sampler;

#[derive(Debug, Parser)]
#[command(name = "repflow", version, about = "Balanced-representation flow matching for treatment effect estimation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub global: GlobalArgs,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config's root seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for replications.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    /// Overrides `eval.variant`: full, no_rep, lambda_zero or mmd_balance.
    #[arg(long, global = true)]
    pub variant: Option<Variant>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset CSV.
    Gen {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on replication 0 of the configured dataset and write a checkpoint.
    Train {
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw potential outcomes for every unit of the configured dataset.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run all replications and write the metrics report.
    Eval {
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one experiment per grid value of `sweep.param`.
    Sweep {
        #[arg(long)]
        out: PathBuf,
    },
}

/// Config with command-line overrides applied.
pub fn resolve_config(global: &GlobalArgs) -> Result<RunConfig> {
    let mut cfg = match &global.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = global.seed {
        cfg.seed = seed;
    }
    if let Some(v) = global.variant {
        cfg.variant = v;
    }
    if global.jobs == 0 {
        return Err(Error::config("--jobs", "must be >= 1"));
    }
    Ok(cfg)
}

/// Runs a parsed command line; returns the summary printed on success.
pub fn run(cli: &Cli) -> Result<String> {
    let cfg = resolve_config(&cli.global)?;
    match &cli.command {
        Command::Gen { out } => cmd_gen(&cfg, out),
        Command::Train { out } => cmd_train(&cfg, out),
        Command::Sample { checkpoint, out } => cmd_sample(&cfg, checkpoint, out),
        Command::Eval { out } => cmd_eval(&cfg, cli.global.jobs, out),
        Command::Sweep { out } => cmd_sweep(&cfg, cli.global.jobs, out),
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn cmd_gen(cfg: &RunConfig, out: &Path) -> Result<String> {
    let seeds = ReplicationSeeds::new(cfg.seed, 0);
    let d = &cfg.dataset;
    let ds = match d.kind {
        DatasetKind::SettingA => data::gen_setting_a(d.n, d.d, seeds.gen)?,
        DatasetKind::SettingB => data::gen_setting_b(d.n, d.d, d.shift, seeds.gen)?,
        _ => return Err(Error::config("dataset.kind", "gen supports setting_a and setting_b only")),
    };
    data::write_synthetic_csv(&ds, out)?;
    let treated = ds.treated.iter().filter(|&&a| a).count();
    Ok(format!("wrote {}: n={} d={} treated={}", out.display(), ds.treated.len(), d.d, treated))
}

/// Loss history path for a checkpoint path: `model.json` -> `model.loss.csv`.
pub fn loss_csv_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("loss.csv")
}

pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<String> {
    let seeds = ReplicationSeeds::new(cfg.seed, 0);
    let prepared = Prepared::new(&cfg.dataset.source()?, cfg.fractions, 0, &seeds)?;
    let state = eval::fit(&prepared, cfg.variant, &cfg.widths, &cfg.train, &seeds)?;
    Checkpoint::new(&state.model, &prepared.standardizer).save(out)?;
    let loss_path = loss_csv_path(out);
    flow::write_loss_csv(&state.history, &loss_path)?;
    let mut msg = format!("wrote {} and {} ({} steps, variant {})", out.display(), loss_path.display(), state.history.len(), cfg.variant);
    if let Some(last) = state.history.last() {
        let _ = write!(msg, "; final L_flow={:.5} L_bal={:.5}", last.l_flow, last.l_bal);
    }
    if let Some(s) = state.stopped_at {
        let _ = write!(msg, "; early stop at step {s}");
    }
    Ok(msg)
}

pub fn cmd_sample(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<String> {
    let (model, st) = Checkpoint::load(checkpoint)?.into_model()?;
    let seeds = ReplicationSeeds::new(cfg.seed, 0);
    let data = cfg.dataset.source()?.load(0, seeds.gen)?;
    if data.d_x() != model.dims.d_x {
        return Err(Error::Input(format!(
            "dataset has {} covariates but the checkpoint expects {}",
            data.d_x(),
            model.dims.d_x
        )));
    }
    let n = data.len();
    let arm: Vec<bool> = data.treated.iter().map(|&a| cfg.arm.select(a)).collect();
    let ids: Vec<usize> = (0..n).collect();
    let unit_seeds = sampler::unit_seeds(seeds.sample, &ids);
    let draws = sampler::sample_units(&model, &st, &data.x, &arm, &unit_seeds, cfg.sample)?;
    let mut csv = String::from("unit_id,a,m,y_hat\n");
    for u in 0..n {
        for (m, d) in draws.draws.iter().enumerate() {
            let _ = writeln!(csv, "{},{},{},{}", u, arm[u] as u8, m, d.get(u, 0));
        }
    }
    write_file(out, &csv)?;
    Ok(format!("wrote {}: {} units x {} draws", out.display(), n, cfg.sample.draws))
}

fn summary_text(report: &eval::MetricsReport) -> String {
    let mut s = String::new();
    for m in report.summary() {
        match m.stderr {
            Some(se) => {
                let _ = writeln!(s, "  {:<16} {:.4} +/- {:.4}", m.metric, m.mean, se);
            }
            None => {
                let _ = writeln!(s, "  {:<16} {:.4}", m.metric, m.mean);
            }
        }
    }
    s
}

pub fn cmd_eval(cfg: &RunConfig, jobs: usize, out: &Path) -> Result<String> {
    let report = eval::run_experiment(&cfg.experiment()?, cfg.variant, cfg.replications, cfg.seed, jobs)?;
    write_file(out, &report.to_csv())?;
    Ok(format!(
        "wrote {} ({} replications, variant {}, dataset {})\n{}",
        out.display(),
        cfg.replications,
        cfg.variant,
        report.dataset,
        summary_text(&report).trim_end()
    ))
}

pub fn cmd_sweep(cfg: &RunConfig, jobs: usize, out: &Path) -> Result<String> {
    let points = eval::sweep(cfg.sweep.param, &cfg.sweep.grid, &cfg.experiment()?, cfg.variant, cfg.replications, cfg.seed, jobs)?;
    write_file(out, &eval::sweep_csv(cfg.sweep.param, &points))?;
    Ok(format!("wrote {} ({} = {:?})", out.display(), cfg.sweep.param.as_str(), cfg.sweep.grid))
}
