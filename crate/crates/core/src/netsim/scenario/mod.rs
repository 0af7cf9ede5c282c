//! Start-up scenarios: build a vehicle from an architecture, run one protocol
//! layer over the simulated network and collect timing results.

mod lasan;
mod tesla;
mod tls;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use lasan::{Intruder, IntruderCtx, LasanEvent};

use super::{GatewayConfig, NetStats, Sim};
use crate::arch::{ArchError, Architecture};
use crate::baselines::tesla::DEFAULT_CHAIN_LENGTH;
use crate::baselines::TlsProfile;
use crate::crypto::{Backend, Crypto, CryptoError};
use crate::ids::{DeviceId, StreamId};
use crate::lifecycle::{LifecycleError, Vehicle};
use crate::protocol::{LasanConfig, MessageTag, ProtoEvent, Reject};
use crate::time::{SimDuration, SimTime};

/// Two hours of simulated time.
pub const DEFAULT_TIMEOUT: SimDuration = SimDuration::from_secs(7200);

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Arch(#[from] ArchError),
    #[error(transparent)]
    Lifecycle(#[from] LifecycleError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Lasan,
    Tls,
    Tesla,
}

impl LayerKind {
    pub const ALL: [LayerKind; 3] = [LayerKind::Lasan, LayerKind::Tls, LayerKind::Tesla];
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LayerKind::Lasan => "lasan",
            LayerKind::Tls => "tls",
            LayerKind::Tesla => "tesla",
        })
    }
}

impl FromStr for LayerKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "lasan" => Ok(LayerKind::Lasan),
            "tls" => Ok(LayerKind::Tls),
            "tesla" => Ok(LayerKind::Tesla),
            other => Err(format!(
                "unknown layer `{other}` (expected lasan, tls or tesla)"
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    /// Every ECU authenticates, then all streams are authorized.
    FirstStart,
    /// ECU keys survive from a previous start; only streams are authorized.
    WarmStart,
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::FirstStart => "first-start",
            Scenario::WarmStart => "warm-start",
        })
    }
}

impl FromStr for Scenario {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "first-start" | "first" => Ok(Scenario::FirstStart),
            "warm-start" | "warm" => Ok(Scenario::WarmStart),
            other => Err(format!(
                "unknown scenario `{other}` (expected first-start or warm-start)"
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeslaConfig {
    /// Keys per chain; sets the generation cost.
    pub chain_length: usize,
    /// Keys actually materialized for the run's functional chain.
    pub functional_length: usize,
}

impl Default for TeslaConfig {
    fn default() -> Self {
        TeslaConfig {
            chain_length: DEFAULT_CHAIN_LENGTH,
            functional_length: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub layer: LayerKind,
    pub backend: Backend,
    pub scenario: Scenario,
    pub seed: u64,
    pub timeout: SimDuration,
    pub trace: bool,
    /// Keep every protocol event in the result.
    pub record_events: bool,
    /// Parallel crypto lanes of the security module.
    pub sm_lanes: usize,
    pub ecu_lanes: usize,
    pub lasan: LasanConfig,
    pub tls: TlsProfile,
    pub tesla: TeslaConfig,
    /// Data frames each LASAN sender transmits once its stream is ready.
    pub data_frames: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            layer: LayerKind::Lasan,
            backend: Backend::Sw,
            scenario: Scenario::FirstStart,
            seed: 0,
            timeout: DEFAULT_TIMEOUT,
            trace: false,
            record_events: false,
            sm_lanes: 4,
            ecu_lanes: 1,
            lasan: LasanConfig::default(),
            tls: TlsProfile::default(),
            tesla: TeslaConfig::default(),
            data_frames: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Rejection {
    pub at: SimTime,
    pub device: DeviceId,
    pub tag: MessageTag,
    pub reason: Reject,
}

/// How a node handled a message injected by an active party.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Injection {
    pub at: SimTime,
    pub device: DeviceId,
    pub tag: MessageTag,
    pub accepted: bool,
    pub reason: Option<Reject>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunResult {
    pub layer: LayerKind,
    pub backend: Backend,
    pub scenario: Scenario,
    pub seed: u64,
    pub n_ecus: usize,
    pub n_streams: usize,
    /// Latest completion event, or the timeout if the run hit it.
    pub total_startup: SimTime,
    pub timed_out: bool,
    /// Every stream was authorized at every endpoint.
    pub complete: bool,
    pub ecu_auth: BTreeMap<DeviceId, SimTime>,
    pub stream_requested: BTreeMap<StreamId, SimTime>,
    pub stream_ready: BTreeMap<StreamId, SimTime>,
    pub rejections: Vec<Rejection>,
    pub injected: Vec<Injection>,
    pub frames: u64,
    pub messages: u64,
    pub deliveries: u64,
    pub lost: u64,
    #[serde(skip)]
    pub events: Vec<(SimTime, ProtoEvent)>,
    #[serde(skip)]
    pub trace: Option<Vec<String>>,
}

impl RunResult {
    pub fn total_startup_s(&self) -> f64 {
        self.total_startup.as_secs_f64()
    }

    /// Authorization latency per stream: ready minus first request.
    pub fn stream_latency(&self) -> BTreeMap<StreamId, SimDuration> {
        self.stream_ready
            .iter()
            .filter_map(|(s, r)| self.stream_requested.get(s).map(|q| (*s, r.since(*q))))
            .collect()
    }
}

/// Completion bookkeeping shared by all layers.
#[derive(Default)]
pub(crate) struct Metrics {
    pub ecu_auth: BTreeMap<DeviceId, SimTime>,
    pub stream_requested: BTreeMap<StreamId, SimTime>,
    pub stream_ready: BTreeMap<StreamId, SimTime>,
    pub rejections: Vec<Rejection>,
    pub injected: Vec<Injection>,
    pub events: Vec<(SimTime, ProtoEvent)>,
}

impl Metrics {
    pub fn requested(&mut self, stream: StreamId, at: SimTime) {
        self.stream_requested.entry(stream).or_insert(at);
    }

    pub fn ready(&mut self, stream: StreamId, at: SimTime) {
        self.stream_ready.entry(stream).or_insert(at);
    }
}

pub(crate) fn build_sim<M: Clone, E>(arch: &Architecture, cfg: &RunConfig) -> Sim<M, E> {
    let mut sim = Sim::new(arch.buses, arch.bus_timing);
    if cfg.trace {
        sim.enable_trace();
    }
    sim.add_node(
        arch.security_module.id,
        arch.security_module.bus,
        cfg.sm_lanes.max(1),
    );
    for e in &arch.ecus {
        sim.add_node(e.id, e.bus, cfg.ecu_lanes.max(1));
    }
    if let Some(g) = arch.gateway {
        sim.add_gateway(GatewayConfig {
            id: g.id,
            buses: (0..arch.buses).collect(),
            latency: SimDuration::from_secs_f64(g.latency_s),
        });
    }
    sim
}

pub(crate) fn finish<M: Clone, E>(
    arch: &Architecture,
    cfg: &RunConfig,
    mut sim: Sim<M, E>,
    metrics: Metrics,
    timed_out: bool,
) -> RunResult {
    let all: BTreeSet<StreamId> = arch.streams.iter().map(|s| s.id).collect();
    let complete = !timed_out && all.iter().all(|s| metrics.stream_ready.contains_key(s));
    let latest = metrics
        .stream_ready
        .values()
        .chain(metrics.ecu_auth.values())
        .copied()
        .max()
        .unwrap_or(SimTime::ZERO);
    let total_startup = if timed_out {
        SimTime::ZERO + cfg.timeout
    } else {
        latest
    };
    let NetStats {
        frames,
        messages,
        deliveries,
        lost,
        ..
    } = sim.stats().clone();
    RunResult {
        layer: cfg.layer,
        backend: cfg.backend,
        scenario: cfg.scenario,
        seed: cfg.seed,
        n_ecus: arch.ecus.len(),
        n_streams: arch.streams.len(),
        total_startup,
        timed_out,
        complete,
        ecu_auth: metrics.ecu_auth,
        stream_requested: metrics.stream_requested,
        stream_ready: metrics.stream_ready,
        rejections: metrics.rejections,
        injected: metrics.injected,
        frames,
        messages,
        deliveries,
        lost,
        events: metrics.events,
        trace: sim.take_trace(),
    }
}

/// Runs one scenario with the given crypto provider.
pub fn run_scenario(
    arch: &Architecture,
    cfg: &RunConfig,
    crypto: &Crypto,
) -> Result<RunResult, ScenarioError> {
    arch.validate()?;
    match cfg.layer {
        LayerKind::Lasan => lasan::run(arch, cfg, crypto, None).map(|(r, _)| r),
        LayerKind::Tls => tls::run(arch, cfg, crypto),
        LayerKind::Tesla => tesla::run(arch, cfg, crypto),
    }
}

/// Runs LASAN with an active party on the bus. Also returns the vehicle in
/// its final state so key material can be inspected.
pub fn run_lasan_with(
    arch: &Architecture,
    cfg: &RunConfig,
    crypto: &Crypto,
    intruder: &mut dyn Intruder,
) -> Result<(RunResult, Vehicle), ScenarioError> {
    arch.validate()?;
    lasan::run(arch, cfg, crypto, Some(intruder))
}
