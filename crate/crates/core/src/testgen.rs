//! Seeded generator of test architectures.
//!
//! Every ECU sends on average `streams_per_ecu` streams. The number of
//! receivers grows by one every `receiver_step` streams, and the sender
//! assignment is steered so that the per-ECU send counts reach a target mean
//! absolute deviation.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{Architecture, GatewaySpec, NodeSpec};
use crate::ids::{DeviceId, StreamId};
use crate::netsim::can::BusTiming;
use crate::protocol::Stream;

/// Stream periods drawn uniformly, in milliseconds.
pub const DEFAULT_PERIODS_MS: [f64; 7] = [20.0, 40.0, 50.0, 100.0, 200.0, 500.0, 1000.0];
/// Upper bound on stream deadlines, in milliseconds.
pub const MAX_DEADLINE_MS: f64 = 80.0;
/// ECUs per bus in automatic bus mode.
pub const ECUS_PER_BUS: usize = 20;

const SM_ID: u16 = 1;
const HILL_CLIMB_STEPS: usize = 20_000;

#[derive(Debug, Error, PartialEq)]
pub enum GenError {
    #[error("profile field `{0}` must be positive")]
    NotPositive(&'static str),
    #[error("MAD target {0} is outside (0, 1]")]
    MadTarget(f64),
    #[error("payload range {0}..={1} is empty or exceeds 64 bytes")]
    Payload(usize, usize),
    #[error("stream {stream} needs {needed} receivers but only {available} other ECUs exist")]
    TooFewEcus {
        stream: usize,
        needed: usize,
        available: usize,
    },
    #[error("{0} ECUs do not fit into 16-bit device ids")]
    TooManyEcus(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BusCount {
    Fixed(usize),
    /// One bus per twenty ECUs, joined by a gateway.
    Auto,
}

impl BusCount {
    pub fn resolve(self, n_ecus: usize) -> usize {
        match self {
            BusCount::Fixed(n) => n,
            BusCount::Auto => n_ecus.div_ceil(ECUS_PER_BUS).max(1),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenProfile {
    pub n_ecus: usize,
    pub streams_per_ecu: usize,
    pub mad_target: f64,
    pub receiver_step: usize,
    pub periods_ms: Vec<f64>,
    pub payload_min: usize,
    pub payload_max: usize,
    pub buses: BusCount,
    pub gateway_latency_s: f64,
    pub seed: u64,
}

impl Default for GenProfile {
    fn default() -> Self {
        GenProfile {
            n_ecus: 20,
            streams_per_ecu: 5,
            mad_target: 0.2,
            receiver_step: 25,
            periods_ms: DEFAULT_PERIODS_MS.to_vec(),
            payload_min: 1,
            payload_max: 8,
            buses: BusCount::Fixed(1),
            gateway_latency_s: 0.0,
            seed: 0,
        }
    }
}

impl GenProfile {
    pub fn new(n_ecus: usize, seed: u64) -> Self {
        GenProfile {
            n_ecus,
            seed,
            ..Self::default()
        }
    }

    pub fn n_streams(&self) -> usize {
        self.n_ecus * self.streams_per_ecu
    }

    /// Receivers of the `k`-th stream.
    pub fn receivers_for(&self, k: usize) -> usize {
        1 + k / self.receiver_step
    }

    pub fn validate(&self) -> Result<(), GenError> {
        for (name, v) in [
            ("n_ecus", self.n_ecus),
            ("streams_per_ecu", self.streams_per_ecu),
            ("receiver_step", self.receiver_step),
            ("periods_ms", self.periods_ms.len()),
            ("buses", self.buses.resolve(self.n_ecus)),
        ] {
            if v == 0 {
                return Err(GenError::NotPositive(name));
            }
        }
        if self.periods_ms.iter().any(|p| p.is_nan() || *p <= 0.0) {
            return Err(GenError::NotPositive("periods_ms"));
        }
        if !(self.mad_target > 0.0 && self.mad_target <= 1.0) {
            return Err(GenError::MadTarget(self.mad_target));
        }
        if self.payload_min == 0 || self.payload_min > self.payload_max || self.payload_max > 64 {
            return Err(GenError::Payload(self.payload_min, self.payload_max));
        }
        if self.n_ecus + 2 > u16::MAX as usize {
            return Err(GenError::TooManyEcus(self.n_ecus));
        }
        let last = self.n_streams() - 1;
        let needed = self.receivers_for(last);
        if needed > self.n_ecus - 1 {
            let stream = (0..=last)
                .find(|k| self.receivers_for(*k) > self.n_ecus - 1)
                .unwrap_or(last);
            return Err(GenError::TooFewEcus {
                stream,
                needed: self.receivers_for(stream),
                available: self.n_ecus - 1,
            });
        }
        Ok(())
    }
}

/// Mean absolute deviation of per-ECU send counts, divided by their mean.
pub fn mad(arch: &Architecture) -> f64 {
    mad_of(&arch.send_counts())
}

fn mad_of(counts: &[usize]) -> f64 {
    if counts.is_empty() {
        return 0.0;
    }
    let n = counts.len() as f64;
    let mean = counts.iter().sum::<usize>() as f64 / n;
    if mean == 0.0 {
        return 0.0;
    }
    counts.iter().map(|c| (*c as f64 - mean).abs()).sum::<f64>() / n / mean
}

/// Moves single streams between ECUs while that brings the MAD closer to the
/// target. Every ECU keeps at least one stream.
fn steer_counts(n: usize, per_ecu: usize, target: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut counts = vec![per_ecu; n];
    if n < 2 {
        return counts;
    }
    let mut err = (mad_of(&counts) - target).abs();
    let tol = 0.5 / (n * per_ecu) as f64;
    for _ in 0..HILL_CLIMB_STEPS {
        if err <= tol {
            break;
        }
        let a = rng.gen_range(0..n);
        let b = rng.gen_range(0..n);
        if a == b || counts[a] <= 1 {
            continue;
        }
        counts[a] -= 1;
        counts[b] += 1;
        let e = (mad_of(&counts) - target).abs();
        if e < err {
            err = e;
        } else {
            counts[a] += 1;
            counts[b] -= 1;
        }
    }
    counts
}

/// Builds a random architecture from `profile`. The same profile always
/// yields the same architecture.
pub fn generate(profile: &GenProfile) -> Result<Architecture, GenError> {
    profile.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(profile.seed);
    let n = profile.n_ecus;
    let buses = profile.buses.resolve(n);
    let ids: Vec<DeviceId> = (0..n).map(|i| DeviceId(SM_ID + 1 + i as u16)).collect();

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut ecus: Vec<NodeSpec> = ids.iter().map(|id| NodeSpec { id: *id, bus: 0 }).collect();
    for (slot, i) in order.iter().enumerate() {
        ecus[*i].bus = slot % buses;
    }

    let counts = steer_counts(n, profile.streams_per_ecu, profile.mad_target, &mut rng);
    let mut senders: Vec<DeviceId> = counts
        .iter()
        .zip(&ids)
        .flat_map(|(c, id)| std::iter::repeat_n(*id, *c))
        .collect();
    senders.shuffle(&mut rng);

    let mut streams = Vec::with_capacity(senders.len());
    for (k, sender) in senders.into_iter().enumerate() {
        let others: Vec<DeviceId> = ids.iter().copied().filter(|d| *d != sender).collect();
        let receivers: BTreeSet<DeviceId> = others
            .choose_multiple(&mut rng, profile.receivers_for(k))
            .copied()
            .collect();
        let period_ms = *profile
            .periods_ms
            .choose(&mut rng)
            .expect("validated non-empty");
        streams.push(Stream {
            id: StreamId(k as u16),
            sender,
            receivers,
            period_ms,
            payload_len: rng.gen_range(profile.payload_min..=profile.payload_max),
            deadline_ms: period_ms.min(MAX_DEADLINE_MS),
        });
    }

    let gateway = (buses > 1).then(|| GatewaySpec {
        id: DeviceId(SM_ID + 1 + n as u16),
        latency_s: profile.gateway_latency_s,
    });
    Ok(Architecture {
        buses,
        bus_timing: BusTiming::default(),
        gateway,
        security_module: NodeSpec {
            id: DeviceId(SM_ID),
            bus: 0,
        },
        ecus,
        streams,
        acl: Vec::new(),
    })
}
