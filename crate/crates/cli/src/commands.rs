use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};

use qflow_core::agent::Agent;
use qflow_core::analysis::{
    correlation_experiment, monotonicity_experiment, variance_scaling_experiment, CriticSource,
};
use qflow_core::config::{parse_override, MonotonicityCritic, RunConfig, RESOLVED_CONFIG_FILE};
use qflow_core::envs::EnvConfig;
use qflow_core::trainer::{evaluate, train_with_output, RunOutput, TrainReport};
use qflow_core::QflowError;
use serde::Serialize;

use crate::svg::{line_chart, Series};

pub const OUTDIR_ENV: &str = "QFLOW_OUTDIR";
const DEFAULT_OUTDIR: &str = "runs";

/// An error already mapped onto the exit-code contract.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub const CONFIG: u8 = 1;
    pub const NUMERIC: u8 = 2;
    pub const IO: u8 = 3;

    fn io(path: &Path, e: impl Display) -> Self {
        Failure {
            code: Self::IO,
            message: format!("{}: {e}", path.display()),
        }
    }

    fn config(message: impl Into<String>) -> Self {
        Failure {
            code: Self::CONFIG,
            message: message.into(),
        }
    }
}

impl From<QflowError> for Failure {
    fn from(e: QflowError) -> Self {
        let code = match &e {
            QflowError::NonFinite(_) => Failure::NUMERIC,
            QflowError::Io { .. } | QflowError::Checkpoint { .. } => Failure::IO,
            _ => Failure::CONFIG,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type Outcome = Result<(), Failure>;

pub struct Invocation {
    pub config: Option<PathBuf>,
    pub overrides: Vec<String>,
    pub out: Option<PathBuf>,
}

impl Invocation {
    fn load(&self) -> Result<RunConfig, Failure> {
        let overrides = self
            .overrides
            .iter()
            .map(|o| parse_override(o))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(match &self.config {
            Some(path) => RunConfig::from_file(path, &overrides)?,
            None => RunConfig::from_text("", &overrides)?,
        })
    }

    fn out_dir(&self, cfg: &RunConfig) -> PathBuf {
        self.out
            .clone()
            .or_else(|| cfg.output_dir.clone())
            .or_else(|| std::env::var_os(OUTDIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTDIR))
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Outcome {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Failure::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Failure::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Outcome {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::io(path, e))?;
    write(path, text + "\n")
}

fn write_rows(path: &Path, header: &[String], rows: &[Vec<String>]) -> Outcome {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Failure::io(parent, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Failure::io(path, e))?;
    w.write_record(header).map_err(|e| Failure::io(path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| Failure::io(path, e))?;
    }
    w.flush().map_err(|e| Failure::io(path, e))
}

fn cells<const N: usize>(values: [String; N]) -> Vec<String> {
    values.to_vec()
}

fn f(v: f64) -> String {
    format!("{v:?}")
}

pub fn train(inv: &Invocation) -> Outcome {
    let cfg = inv.load()?;
    let dir = inv.out_dir(&cfg);
    write(&dir.join(RESOLVED_CONFIG_FILE), cfg.resolved_text())?;
    let output = RunOutput {
        dir: dir.clone(),
        resolved_config: cfg.resolved(),
    };
    let (report, _) = train_with_output(&cfg.train, Some(&output))?;
    if cfg.svg {
        write(&dir.join("learning_curve.svg"), learning_curve(&report))?;
    }
    let c = &report.counters;
    println!(
        "trained {} env steps ({} updates); final return {:?}; metrics in {}",
        c.stored_transitions,
        c.critic_updates,
        report.final_return().unwrap_or(f64::NAN),
        dir.display()
    );
    Ok(())
}

fn learning_curve(report: &TrainReport) -> String {
    let pts = report.records.iter().map(|r| (r.env_steps as f64, r.mean_return)).collect();
    line_chart(
        "Evaluation return",
        "environment steps",
        "mean return",
        &[Series::new(report.exploration.tag(), pts)],
    )
}

/// Agent plus the environment recorded in its manifest.
fn load_checkpoint(dir: &Path) -> Result<(Agent, EnvConfig), Failure> {
    if !dir.join("manifest.json").exists() {
        return Err(Failure::io(dir, "no checkpoint manifest found"));
    }
    let (agent, meta) = Agent::load(dir)?;
    if meta.config.is_empty() {
        return Err(Failure::config(format!(
            "checkpoint {} carries no run configuration",
            dir.display()
        )));
    }
    let cfg = RunConfig::from_pairs(&meta.config)?;
    Ok((agent, cfg.train.env))
}

#[derive(Serialize)]
struct EvalSummary<'a> {
    checkpoint: &'a Path,
    seed: u64,
    episodes: usize,
    mean: f64,
    std: f64,
    min: f64,
    max: f64,
    returns: &'a [f64],
}

pub fn eval(checkpoint: &Path, episodes: usize, seed: u64, out: Option<&Path>) -> Outcome {
    if episodes == 0 {
        return Err(Failure::config("eval: episodes must be positive"));
    }
    let (agent, env) = load_checkpoint(checkpoint)?;
    let stats = evaluate(&agent, &env, episodes, seed)?;
    let summary = EvalSummary {
        checkpoint,
        seed,
        episodes,
        mean: stats.mean,
        std: stats.std,
        min: stats.min,
        max: stats.max,
        returns: &stats.returns,
    };
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    println!("{text}");
    write(&out.unwrap_or(checkpoint).join("eval.json"), text + "\n")
}

#[derive(Debug, Clone, Copy)]
pub enum Analysis {
    Variance,
    Monotonicity,
    Correlation,
}

impl Analysis {
    fn name(self) -> &'static str {
        match self {
            Analysis::Variance => "variance",
            Analysis::Monotonicity => "monotonicity",
            Analysis::Correlation => "correlation",
        }
    }
}

pub fn analyze(kind: Analysis, inv: &Invocation, checkpoint: Option<PathBuf>) -> Outcome {
    let mut cfg = inv.load()?;
    if checkpoint.is_some() {
        cfg.analysis.checkpoint = checkpoint;
    }
    let dir = inv.out_dir(&cfg).join("analysis");
    let name = kind.name();
    let base = |ext: &str| dir.join(format!("{name}.{ext}"));
    write(&dir.join(format!("{name}.{RESOLVED_CONFIG_FILE}")), cfg.resolved_text())?;
    let a = &cfg.analysis;
    match kind {
        Analysis::Variance => {
            let r = variance_scaling_experiment(&a.variance)?;
            let rows: Vec<Vec<String>> = (0..r.dims.len())
                .map(|i| {
                    cells([
                        r.dims[i].to_string(),
                        f(r.empirical_variance[i]),
                        f(r.theoretical[i]),
                        f(r.first_order[i]),
                        f(r.loglog_slope),
                    ])
                })
                .collect();
            let header = ["dim", "empirical_variance", "theoretical", "first_order", "loglog_slope"];
            write_rows(&base("csv"), &header.map(String::from), &rows)?;
            write_json(&base("json"), &r)?;
            if cfg.svg {
                let log = |x: &[f64]| -> Vec<f64> { x.iter().map(|v| v.log10()).collect() };
                let dims: Vec<f64> = log(&r.dims.iter().map(|&d| d as f64).collect::<Vec<_>>());
                let svg = line_chart(
                    "End-effector variance",
                    "log10 |A|",
                    "log10 Var",
                    &[
                        Series::new("empirical", dims.iter().copied().zip(log(&r.empirical_variance)).collect()),
                        Series::new("sigma^2 L^2 / |A|", dims.iter().copied().zip(log(&r.theoretical)).collect()),
                    ],
                );
                write(&base("svg"), svg)?;
            }
            println!("variance slope {:?} over dims {:?}", r.loglog_slope, r.dims);
        }
        Analysis::Monotonicity => {
            let source = match a.critic {
                MonotonicityCritic::Quadratic => CriticSource::Quadratic,
                MonotonicityCritic::Zero => CriticSource::Zero,
                MonotonicityCritic::RandomNet => CriticSource::RandomNet {
                    hidden: a.critic_hidden.clone(),
                },
                MonotonicityCritic::Checkpoint => {
                    let path = a
                        .checkpoint
                        .as_ref()
                        .ok_or_else(|| Failure::config("analysis.checkpoint is required for the checkpoint critic"))?;
                    let (agent, env) = load_checkpoint(path)?;
                    CriticSource::Checkpoint {
                        agent: Box::new(agent),
                        env,
                    }
                }
            };
            let r = monotonicity_experiment(&source, &a.monotonicity)?;
            let rows: Vec<Vec<String>> = (0..r.t_grid.len())
                .map(|k| cells([f(r.t_grid[k]), f(r.values[k]), f(r.std_errors[k])]))
                .collect();
            write_rows(&base("csv"), &["t", "advantage", "std_error"].map(String::from), &rows)?;
            write_json(&base("json"), &r)?;
            if cfg.svg {
                let pts = r.t_grid.iter().copied().zip(r.values.iter().copied()).collect();
                write(&base("svg"), line_chart("Advantage curve", "t", "F(t)", &[Series::new(&r.mode, pts)]))?;
            }
            println!("monotonicity ({}) pass: {}", r.mode, r.pass);
        }
        Analysis::Correlation => {
            let path = a
                .checkpoint
                .as_ref()
                .ok_or_else(|| Failure::config("analysis.checkpoint (or --checkpoint) is required for correlation"))?;
            let (agent, env) = load_checkpoint(path)?;
            let r = correlation_experiment(&agent, &env, a.probe_states, a.samples_per_state, a.monotonicity.seed)?;
            let d = r.stds.len();
            let mut header = vec!["dim".to_string(), "std".to_string()];
            header.extend((0..d).map(|j| format!("corr_{j}")));
            let rows: Vec<Vec<String>> = (0..d)
                .map(|i| {
                    let mut row = vec![i.to_string(), f(r.stds[i])];
                    row.extend(r.correlation.row(i).iter().map(|&c| f(c)));
                    row
                })
                .collect();
            write_rows(&base("csv"), &header, &rows)?;
            write_json(&base("json"), &r)?;
            println!("correlation over {} probe states written to {}", r.probe_states, dir.display());
        }
    }
    Ok(())
}
