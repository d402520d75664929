//! `run`, `compare` and `ablate` commands.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::engine::{self, Method, MethodConfig};
use crate::error::Error;
use crate::metrics::RoundReport;
use crate::report;

/// Command failure, split by exit code.
#[derive(Debug)]
pub enum CliError {
    /// Unreadable or invalid configuration / arguments (exit 2).
    Config(Error),
    /// Failure while running (exit 1).
    Runtime(Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(e) => write!(f, "configuration: {e}"),
            CliError::Runtime(e) => write!(f, "run failed: {e}"),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// A named method configuration to run under every seed.
#[derive(Debug, Clone)]
pub struct Variant {
    pub label: String,
    pub method: MethodConfig,
}

/// Files written by a command.
#[derive(Debug, Clone)]
pub struct Outputs {
    pub dir: PathBuf,
    pub reports: Vec<RoundReport>,
}

fn load(path: &Path) -> CliResult<ExperimentConfig> {
    ExperimentConfig::load(path).map_err(CliError::Config)
}

fn runtime<T>(r: crate::Result<T>) -> CliResult<T> {
    r.map_err(CliError::Runtime)
}

/// Runs every (variant, seed) pair; results come back in variant-major,
/// seed-minor order regardless of scheduling.
pub fn run_variants(
    cfg: &ExperimentConfig,
    variants: &[Variant],
) -> crate::Result<Vec<RoundReport>> {
    let jobs: Vec<(usize, u64)> = (0..variants.len())
        .flat_map(|v| cfg.runs.iter().map(move |&s| (v, s)))
        .collect();
    let results: Vec<crate::Result<Vec<RoundReport>>> = jobs
        .par_iter()
        .map(|&(v, seed)| {
            let variant = &variants[v];
            let (dataset, rounds) = cfg.materialize(seed)?;
            let method = MethodConfig {
                seed,
                ..variant.method.clone()
            };
            let ckpt_dir = cfg.output_dir.join("checkpoints");
            let mut reports = engine::run_experiment_with(
                &dataset,
                &rounds,
                &cfg.model.hidden,
                &method,
                |round, state| {
                    if cfg.checkpoints {
                        write_checkpoint(&ckpt_dir, &variant.label, seed, round, state)?;
                    }
                    Ok(())
                },
            )?;
            for r in &mut reports {
                r.method = variant.label.clone();
            }
            Ok(reports)
        })
        .collect();
    let mut all = Vec::new();
    for r in results {
        all.extend(r?);
    }
    Ok(all)
}

fn write_checkpoint(
    dir: &Path,
    label: &str,
    seed: u64,
    round: &engine::RoundSpec,
    state: &engine::LearnerState,
) -> crate::Result<()> {
    std::fs::create_dir_all(dir)?;
    let file = dir.join(format!("{label}_seed{seed}_round{}.bin", round.index + 1));
    let out = std::io::BufWriter::new(std::fs::File::create(file)?);
    state.model()?.write_checkpoint(out)
}

fn write_outputs<C: Serialize>(
    cfg: &ExperimentConfig,
    command: &str,
    echo: &C,
    reports: &[RoundReport],
) -> crate::Result<()> {
    std::fs::create_dir_all(&cfg.output_dir)?;
    report::write_results_json(&cfg.output_dir.join("results.json"), command, echo, reports)?;
    std::fs::write(
        cfg.output_dir.join("curves.csv"),
        report::curves_csv(reports),
    )?;
    Ok(())
}

pub fn cmd_run(config_path: &Path) -> CliResult<Outputs> {
    let cfg = load(config_path)?;
    let variants = [Variant {
        label: cfg.method.method.as_str().to_string(),
        method: cfg.method.clone(),
    }];
    let reports = runtime(run_variants(&cfg, &variants))?;
    runtime(write_outputs(&cfg, "run", &cfg, &reports))?;
    Ok(Outputs {
        dir: cfg.output_dir,
        reports,
    })
}

#[derive(Serialize)]
struct CompareEcho<'a> {
    #[serde(flatten)]
    config: &'a ExperimentConfig,
    methods: Vec<&'static str>,
}

pub fn parse_methods(list: &str) -> CliResult<Vec<Method>> {
    let methods = list
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            Method::parse(s).ok_or_else(|| {
                CliError::Config(Error::Config {
                    path: "--methods".into(),
                    msg: format!("unknown method `{s}`"),
                })
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    Ok(methods)
}

/// Same seeds and rounds for every method; also writes `summary.csv`.
pub fn cmd_compare(config_path: &Path, methods: &[Method]) -> CliResult<(Outputs, String)> {
    if methods.len() < 2 || {
        let mut s = methods.to_vec();
        s.sort_by_key(|m| m.as_str());
        s.windows(2).any(|w| w[0] == w[1])
    } {
        return Err(CliError::Config(Error::Config {
            path: "--methods".into(),
            msg: "compare needs at least two distinct methods".into(),
        }));
    }
    let cfg = load(config_path)?;
    let variants: Vec<Variant> = methods
        .iter()
        .map(|&m| Variant {
            label: m.as_str().to_string(),
            method: MethodConfig {
                method: m,
                ..cfg.method.clone()
            },
        })
        .collect();
    let reports = runtime(run_variants(&cfg, &variants))?;
    let echo = CompareEcho {
        config: &cfg,
        methods: methods.iter().map(|m| m.as_str()).collect(),
    };
    runtime(write_outputs(&cfg, "compare", &echo, &reports))?;
    let rows = report::summarize(&reports);
    runtime(
        std::fs::write(
            cfg.output_dir.join("summary.csv"),
            report::summary_csv(&rows),
        )
        .map_err(Error::from),
    )?;
    let table = report::summary_table(&rows);
    Ok((
        Outputs {
            dir: cfg.output_dir,
            reports,
        },
        table,
    ))
}

pub fn parse_m_values(list: &str) -> CliResult<Vec<usize>> {
    let values = list
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<usize>().map_err(|_| {
                CliError::Config(Error::Config {
                    path: "--m".into(),
                    msg: format!("`{s}` is not a non-negative integer"),
                })
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    Ok(values)
}

#[derive(Serialize)]
struct AblateEcho<'a> {
    #[serde(flatten)]
    config: &'a ExperimentConfig,
    m_values: &'a [usize],
}

/// Label used for the old-distillation baseline in ablation output.
pub const BASELINE_LABEL: &str = "B";

/// Sweeps the number of similar old classes per new class, plus the
/// old-distillation baseline. Writes `ablation.csv` alongside the usual files.
pub fn cmd_ablate(
    config_path: &Path,
    m_values: &[usize],
) -> CliResult<(Outputs, Vec<report::AblationRow>)> {
    if m_values.is_empty() {
        return Err(CliError::Config(Error::Config {
            path: "--m".into(),
            msg: "at least one value is required".into(),
        }));
    }
    let cfg = load(config_path)?;
    let mut variants = vec![Variant {
        label: BASELINE_LABEL.to_string(),
        method: MethodConfig {
            method: Method::DistillOldOnly,
            ..cfg.method.clone()
        },
    }];
    variants.extend(m_values.iter().map(|&m| Variant {
        label: m.to_string(),
        method: MethodConfig {
            method: Method::DistillOldPlusExpert,
            m_similar: m,
            ..cfg.method.clone()
        },
    }));
    let reports = runtime(run_variants(&cfg, &variants))?;
    let echo = AblateEcho {
        config: &cfg,
        m_values,
    };
    runtime(write_outputs(&cfg, "ablate", &echo, &reports))?;
    let rows: Vec<report::AblationRow> = cfg
        .runs
        .iter()
        .flat_map(|&seed| {
            let reports = &reports;
            variants.iter().filter_map(move |v| {
                let runs: Vec<RoundReport> = reports
                    .iter()
                    .filter(|r| r.seed == seed && r.method == v.label)
                    .cloned()
                    .collect();
                report::ablation_row(&v.label, seed, &runs)
            })
        })
        .collect();
    runtime(
        std::fs::write(
            cfg.output_dir.join("ablation.csv"),
            report::ablation_csv(&rows),
        )
        .map_err(Error::from),
    )?;
    Ok((
        Outputs {
            dir: cfg.output_dir,
            reports,
        },
        rows,
    ))
}
