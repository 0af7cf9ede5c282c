//! Library behind the `lasan-sim` binary: experiment files, sweeps and
//! result export.

pub mod config;
pub mod output;

use std::path::{Path, PathBuf};

use lasan::crypto::Backend;
use lasan::netsim::{run_scenario, LayerKind, RunConfig, RunResult, Scenario, ScenarioError};
use lasan::testgen::{generate, GenProfile};
use rayon::prelude::*;
use thiserror::Error;

pub use config::{ConfigError, Experiment, RunSection, SweepSpec, CONFIG_DIR_ENV};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("simulation failed: {0}")]
    Simulation(#[from] ScenarioError),
    #[error("cannot write {path}: {source}")]
    Write {
        path: String,
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Simulation(_) | CliError::Write { .. } => 2,
        }
    }
}

/// Exit code for results that completed: 3 when every run hit the timeout.
pub fn exit_code_for(results: &[RunResult]) -> u8 {
    if !results.is_empty() && results.iter().all(|r| r.timed_out) {
        3
    } else {
        0
    }
}

pub fn run_one(exp: &Experiment, cfg: &RunConfig) -> Result<RunResult, CliError> {
    let arch = exp.arch_for(cfg.seed)?;
    Ok(run_scenario(&arch, cfg, &exp.crypto)?)
}

/// All results of one (layer, backend) pair, ordered by ECU count then repetition.
#[derive(Clone, Debug)]
pub struct SweepSeries {
    pub layer: LayerKind,
    pub backend: Backend,
    pub results: Vec<RunResult>,
}

impl SweepSeries {
    pub fn file_name(&self, exp: &Experiment) -> String {
        let kind = match exp.run.scenario {
            Scenario::FirstStart => "startup",
            Scenario::WarmStart => "streams",
        };
        format!(
            "{kind}_{}_{}.csv",
            self.layer,
            self.backend.to_string().to_ascii_lowercase()
        )
    }
}

/// Runs every point of `spec` in parallel. The output order depends only on
/// the sweep definition, never on scheduling.
pub fn sweep(exp: &Experiment, spec: &SweepSpec) -> Result<Vec<SweepSeries>, CliError> {
    spec.validate()?;
    if exp.architecture.is_some() {
        return Err(ConfigError::Sweep(
            "sweeps generate their architectures; remove `architecture`".into(),
        )
        .into());
    }
    let base = exp.run.to_run_config();
    let mut jobs = Vec::new();
    for &layer in &spec.layers {
        for &backend in &spec.backends {
            for &n in &spec.ecu_counts {
                for rep in 0..spec.repetitions {
                    jobs.push((layer, backend, n, spec.seed(rep)));
                }
            }
        }
    }
    let results: Vec<Result<RunResult, CliError>> = jobs
        .par_iter()
        .map(|&(layer, backend, n, seed)| {
            let profile = GenProfile {
                n_ecus: n,
                seed,
                ..exp.generate.clone()
            };
            let arch = generate(&profile).map_err(ConfigError::from)?;
            let cfg = RunConfig {
                layer,
                backend,
                seed,
                ..base.clone()
            };
            Ok(run_scenario(&arch, &cfg, &exp.crypto)?)
        })
        .collect();
    let per_series = spec.ecu_counts.len() * spec.repetitions;
    let mut it = results.into_iter();
    let mut out = Vec::new();
    for &layer in &spec.layers {
        for &backend in &spec.backends {
            let results = it
                .by_ref()
                .take(per_series)
                .collect::<Result<Vec<_>, _>>()?;
            out.push(SweepSeries {
                layer,
                backend,
                results,
            });
        }
    }
    Ok(out)
}

pub fn write_file(dir: &Path, name: &str, contents: &str) -> Result<PathBuf, CliError> {
    std::fs::create_dir_all(dir).map_err(|source| CliError::Write {
        path: dir.display().to_string(),
        source,
    })?;
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|source| CliError::Write {
        path: path.display().to_string(),
        source,
    })?;
    Ok(path)
}
