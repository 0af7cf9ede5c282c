//! Experiment files.
//!
//! An experiment file is TOML. Every section is optional:
//!
//! ```toml
//! timing = "timing.toml"        # crypto timing table, relative to this file
//! architecture = "vehicle.toml" # fixed architecture, relative to this file
//!
//! [generate]                    # random architecture when none is given
//! n_ecus = 20
//!
//! [run]
//! layer = "lasan"
//! backend = "sw"
//! timeout_s = 7200
//!
//! [sweep]
//! ecu_counts = [20, 40]
//!
//! [attacks.replay]
//! kind = "replay"
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use lasan::adversary::Attack;
use lasan::arch::{ArchError, Architecture};
use lasan::baselines::tls::TlsProfile;
use lasan::crypto::{Backend, Crypto, CryptoError, FieldLedger, TimingTable};
use lasan::netsim::{LayerKind, RunConfig, Scenario, TeslaConfig};
use lasan::protocol::LasanConfig;
use lasan::testgen::{generate, GenError, GenProfile};
use lasan::time::SimDuration;
use serde::Deserialize;
use thiserror::Error;

/// Environment variable naming the directory searched for relative config paths.
pub const CONFIG_DIR_ENV: &str = "LASAN_SIM_CONFIG_DIR";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("timing table: {0}")]
    Timing(#[from] CryptoError),
    #[error("architecture: {0}")]
    Arch(#[from] ArchError),
    #[error("generator: {0}")]
    Generate(#[from] GenError),
    #[error("sweep: {0}")]
    Sweep(String),
    #[error("no attack named `{0}` in the config")]
    UnknownAttack(String),
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub layer: LayerKind,
    pub backend: Backend,
    pub scenario: Scenario,
    pub seed: u64,
    pub timeout_s: f64,
    pub trace: bool,
    pub sm_lanes: usize,
    pub ecu_lanes: usize,
    pub freshness_window_s: f64,
    pub require_signed_hash: bool,
    pub strict_unknown_stream: bool,
    pub tls: TlsProfile,
    pub tesla: TeslaConfig,
    pub data_frames: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        let d = RunConfig::default();
        RunSection {
            layer: d.layer,
            backend: d.backend,
            scenario: d.scenario,
            seed: d.seed,
            timeout_s: d.timeout.as_secs_f64(),
            trace: d.trace,
            sm_lanes: d.sm_lanes,
            ecu_lanes: d.ecu_lanes,
            freshness_window_s: d.lasan.freshness_window.as_secs_f64(),
            require_signed_hash: d.lasan.require_signed_hash,
            strict_unknown_stream: d.lasan.strict_unknown_stream,
            tls: d.tls,
            tesla: d.tesla,
            data_frames: d.data_frames,
        }
    }
}

impl RunSection {
    pub fn to_run_config(&self) -> RunConfig {
        RunConfig {
            layer: self.layer,
            backend: self.backend,
            scenario: self.scenario,
            seed: self.seed,
            timeout: SimDuration::from_secs_f64(self.timeout_s),
            trace: self.trace,
            sm_lanes: self.sm_lanes,
            ecu_lanes: self.ecu_lanes,
            lasan: LasanConfig {
                freshness_window: SimDuration::from_secs_f64(self.freshness_window_s),
                require_signed_hash: self.require_signed_hash,
                strict_unknown_stream: self.strict_unknown_stream,
            },
            tls: self.tls,
            tesla: self.tesla,
            data_frames: self.data_frames,
            ..RunConfig::default()
        }
    }
}

/// ECU counts, layers and backends to cover, each point repeated with its own seed.
#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub ecu_counts: Vec<usize>,
    pub layers: Vec<LayerKind>,
    pub backends: Vec<Backend>,
    pub repetitions: usize,
    /// One seed per repetition. When empty, repetition `r` uses `base_seed + r`.
    pub seeds: Vec<u64>,
    pub base_seed: u64,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            ecu_counts: vec![20, 40, 60, 80, 100],
            layers: LayerKind::ALL.to_vec(),
            backends: vec![Backend::Hw, Backend::Sw],
            repetitions: 5,
            seeds: Vec::new(),
            base_seed: 0,
        }
    }
}

impl SweepSpec {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.repetitions == 0 {
            return Err(ConfigError::Sweep("repetitions must be at least 1".into()));
        }
        if !self.seeds.is_empty() && self.seeds.len() != self.repetitions {
            return Err(ConfigError::Sweep(format!(
                "{} seeds given for {} repetitions",
                self.seeds.len(),
                self.repetitions
            )));
        }
        if self.ecu_counts.is_empty() || self.layers.is_empty() || self.backends.is_empty() {
            return Err(ConfigError::Sweep(
                "ecu_counts, layers and backends must be non-empty".into(),
            ));
        }
        if let Some(n) = self.ecu_counts.iter().find(|n| **n < 2) {
            return Err(ConfigError::Sweep(format!("ECU count {n} is below 2")));
        }
        Ok(())
    }

    pub fn seed(&self, rep: usize) -> u64 {
        self.seeds
            .get(rep)
            .copied()
            .unwrap_or(self.base_seed + rep as u64)
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawExperiment {
    timing: Option<PathBuf>,
    architecture: Option<PathBuf>,
    generate: Option<GenProfile>,
    #[serde(default)]
    run: RunSection,
    #[serde(default)]
    sweep: SweepSpec,
    #[serde(default)]
    attacks: BTreeMap<String, Attack>,
}

/// A loaded experiment with every referenced file resolved.
#[derive(Clone, Debug, Default)]
pub struct Experiment {
    pub crypto: Crypto,
    pub architecture: Option<Architecture>,
    pub generate: GenProfile,
    pub run: RunSection,
    pub sweep: SweepSpec,
    pub attacks: BTreeMap<String, Attack>,
}

impl Experiment {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, &path.display().to_string(), base)
    }

    /// Parses `text`; relative paths inside it resolve against `base`.
    pub fn parse(text: &str, origin: &str, base: &Path) -> Result<Self, ConfigError> {
        let raw: RawExperiment = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_string(),
            message: e.to_string(),
        })?;
        let crypto = match &raw.timing {
            Some(p) => Crypto::new(
                Arc::new(TimingTable::from_file(&base.join(p))?),
                FieldLedger::default(),
            ),
            None => Crypto::default(),
        };
        let architecture = raw
            .architecture
            .as_ref()
            .map(|p| Architecture::load(&base.join(p)))
            .transpose()?;
        let generate = raw.generate.unwrap_or_default();
        raw.sweep.validate()?;
        Ok(Experiment {
            crypto,
            architecture,
            generate,
            run: raw.run,
            sweep: raw.sweep,
            attacks: raw.attacks,
        })
    }

    /// The architecture for a single run: the fixed one, or a generated one.
    pub fn arch_for(&self, seed: u64) -> Result<Architecture, ConfigError> {
        match &self.architecture {
            Some(a) => Ok(a.clone()),
            None => Ok(generate(&GenProfile {
                seed,
                ..self.generate.clone()
            })?),
        }
    }

    pub fn attack(&self, name: &str) -> Result<Attack, ConfigError> {
        self.attacks
            .get(name)
            .copied()
            .ok_or_else(|| ConfigError::UnknownAttack(name.to_string()))
    }
}

/// Resolves a `--config` argument. Relative paths that do not exist from the
/// working directory are looked up in `config_dir`.
pub fn resolve_config_path(arg: &Path, config_dir: Option<&Path>) -> PathBuf {
    if arg.is_absolute() || arg.exists() {
        return arg.to_path_buf();
    }
    match config_dir {
        Some(dir) => dir.join(arg),
        None => arg.to_path_buf(),
    }
}
