use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    build_sim, finish, Injection, Metrics, Rejection, RunConfig, RunResult, Scenario, ScenarioError,
};
use crate::arch::Architecture;
use crate::crypto::Term;
use crate::crypto::{Crypto, KeyFactory};
use crate::ids::{DeviceId, Nonce, StreamId};
use crate::lifecycle::{Pki, Vehicle};
use crate::netsim::{Action, Envelope, Layer, Sim};
use crate::protocol::{EcuRecord, Effect, Env, MessageTag, Outcome, ProtoEvent, ProtocolMessage};
use crate::time::{SimDuration, SimTime};

#[derive(Clone, Debug)]
pub enum LasanEvent {
    Proto(ProtoEvent),
    Inject(ProtocolMessage),
    /// Re-check deferred grants at the security module.
    Release,
    /// Next data frame of an authorized stream.
    SendData {
        stream: StreamId,
        left: usize,
    },
}

/// What an active party may use when it reacts to traffic.
pub struct IntruderCtx<'a> {
    pub crypto: &'a Crypto,
    pub keys: &'a mut KeyFactory,
    pub rng: &'a mut ChaCha8Rng,
    pub now: SimTime,
    injections: Vec<(SimDuration, ProtocolMessage)>,
}

impl IntruderCtx<'_> {
    /// Puts `msg` on the bus `delay` from now.
    pub fn inject(&mut self, delay: SimDuration, msg: ProtocolMessage) {
        self.injections.push((delay, msg));
    }
}

/// A device on the bus that sees every message and may inject its own.
pub trait Intruder {
    fn id(&self) -> DeviceId;

    fn bus(&self) -> usize {
        0
    }

    fn start(&mut self, _ctx: &mut IntruderCtx) {}

    /// Devices whose long-term secrets are handed over before the run.
    fn leak_targets(&self) -> Vec<DeviceId> {
        Vec::new()
    }

    /// Receives a leaked private key and certificate.
    fn leaked(&mut self, _device: DeviceId, _secrets: Vec<Term>) {}

    fn observe(&mut self, msg: &ProtocolMessage, ctx: &mut IntruderCtx);
}

struct LasanLayer<'a> {
    crypto: Crypto,
    keys: KeyFactory,
    rng: ChaCha8Rng,
    cfg: RunConfig,
    vehicle: Vehicle,
    targets: BTreeMap<StreamId, BTreeSet<DeviceId>>,
    installed: BTreeMap<StreamId, BTreeSet<DeviceId>>,
    metrics: Metrics,
    intruder: Option<&'a mut dyn Intruder>,
    periods: BTreeMap<StreamId, SimDuration>,
}

type LSim = Sim<ProtocolMessage, LasanEvent>;

impl LasanLayer<'_> {
    fn submit(&mut self, node: DeviceId, o: Outcome, sim: &mut LSim) -> Option<SimTime> {
        let idle = o.cost == SimDuration::ZERO
            && o.effects
                .iter()
                .all(|(_, e)| matches!(e, Effect::Event(ProtoEvent::Ignored { .. })));
        if idle {
            return None;
        }
        let actions = o
            .effects
            .into_iter()
            .map(|(at, e)| {
                let a = match e {
                    Effect::Send(m) => Action::Send(envelope(node, m)),
                    Effect::Event(ev) => Action::Event(LasanEvent::Proto(ev)),
                };
                (at, a)
            })
            .collect();
        Some(sim.submit(node, o.cost, actions))
    }

    fn request_streams(&mut self, ecu: DeviceId, sim: &mut LSim) {
        let streams: Vec<_> = self.vehicle.ecus[&ecu]
            .send_streams
            .iter()
            .copied()
            .collect();
        for s in streams {
            let (now, start) = (sim.now(), sim.job_start(ecu));
            let mut env = Env {
                crypto: &self.crypto,
                keys: &mut self.keys,
                rng: &mut self.rng,
                backend: self.cfg.backend,
                arrival: now,
                start,
            };
            let session = self.vehicle.ecus.get_mut(&ecu).expect("known ecu");
            if let Some(o) = session.build_stream_request(s, &mut env) {
                if let Some(at) = self.submit(ecu, o, sim) {
                    self.metrics.requested(s, at);
                }
            }
        }
    }

    fn send_data(&mut self, ecu: DeviceId, stream: StreamId, left: usize, sim: &mut LSim) {
        let (now, start) = (sim.now(), sim.job_start(ecu));
        let mut env = Env {
            crypto: &self.crypto,
            keys: &mut self.keys,
            rng: &mut self.rng,
            backend: self.cfg.backend,
            arrival: now,
            start,
        };
        let payload = vec![(left & 0xff) as u8; 8];
        let session = self.vehicle.ecus.get_mut(&ecu).expect("known ecu");
        let Some((msg, cost)) = session.send_data(stream, payload, &mut env) else {
            return;
        };
        sim.submit(ecu, cost, vec![(cost, Action::Send(envelope(ecu, msg)))]);
        if left > 1 {
            let period = self
                .periods
                .get(&stream)
                .copied()
                .unwrap_or(SimDuration::from_millis(10));
            sim.schedule(
                ecu,
                now + period,
                LasanEvent::SendData {
                    stream,
                    left: left - 1,
                },
            );
        }
    }

    fn intruder_ctx_run(
        &mut self,
        sim: &mut LSim,
        f: impl FnOnce(&mut dyn Intruder, &mut IntruderCtx),
    ) {
        let Some(intruder) = self.intruder.as_deref_mut() else {
            return;
        };
        let mut ctx = IntruderCtx {
            crypto: &self.crypto,
            keys: &mut self.keys,
            rng: &mut self.rng,
            now: sim.now(),
            injections: Vec::new(),
        };
        f(intruder, &mut ctx);
        let id = intruder.id();
        for (delay, msg) in ctx.injections {
            sim.schedule(id, sim.now() + delay, LasanEvent::Inject(msg));
        }
    }
}

fn envelope(node: DeviceId, m: ProtocolMessage) -> Envelope<ProtocolMessage> {
    Envelope {
        src: node,
        dest: m.dest,
        frame_id: m.frame_id(),
        wire_length: m.wire_length,
        payload: m,
    }
}

impl Layer for LasanLayer<'_> {
    type Msg = ProtocolMessage;
    type Event = LasanEvent;

    fn start(&mut self, sim: &mut LSim) {
        if let Some(i) = self.intruder.as_deref_mut() {
            for d in i.leak_targets() {
                if let Some(e) = self.vehicle.ecus.get(&d) {
                    i.leaked(
                        d,
                        vec![
                            Term::AsymKey(e.keypair.private),
                            Term::Cert(Box::new(e.cert.clone())),
                        ],
                    );
                }
            }
        }
        self.intruder_ctx_run(sim, |i, ctx| i.start(ctx));
        match self.cfg.scenario {
            Scenario::FirstStart => {
                let sm = self.vehicle.sm.id;
                let start = sim.job_start(sm);
                let env = Env {
                    crypto: &self.crypto,
                    keys: &mut self.keys,
                    rng: &mut self.rng,
                    backend: self.cfg.backend,
                    arrival: SimTime::ZERO,
                    start,
                };
                let adv = self.vehicle.sm.build_advertisement(&env);
                sim.submit(
                    sm,
                    SimDuration::ZERO,
                    vec![(SimDuration::ZERO, Action::Send(envelope(sm, adv)))],
                );
            }
            Scenario::WarmStart => {
                let ecus: Vec<_> = self.vehicle.ecus.keys().copied().collect();
                for e in ecus {
                    self.metrics.ecu_auth.insert(e, SimTime::ZERO);
                    self.request_streams(e, sim);
                }
            }
        }
    }

    fn deliver(&mut self, node: DeviceId, env: Envelope<ProtocolMessage>, sim: &mut LSim) {
        let injected = self.intruder.as_deref().is_some_and(|i| i.id() == env.src);
        let msg = env.payload;
        let (now, start) = (sim.now(), sim.job_start(node));
        let mut e = Env {
            crypto: &self.crypto,
            keys: &mut self.keys,
            rng: &mut self.rng,
            backend: self.cfg.backend,
            arrival: now,
            start,
        };
        let outcome = if node == self.vehicle.sm.id {
            let sm = &mut self.vehicle.sm;
            match msg.tag {
                MessageTag::Registration => sm.handle_registration(&msg, &mut e),
                MessageTag::StreamRequest => sm.handle_stream_request(&msg, &mut e),
                _ => return,
            }
        } else if let Some(s) = self.vehicle.ecus.get_mut(&node) {
            match msg.tag {
                MessageTag::Advertisement => s.handle_advertisement(&msg, &mut e),
                MessageTag::Confirmation => s.handle_confirmation(&msg, &mut e),
                MessageTag::StreamGrant => s.handle_grant(&msg, &mut e),
                MessageTag::Data => s.receive_data(&msg, &mut e),
                _ => return,
            }
        } else {
            return;
        };
        if injected {
            let ignored = outcome
                .events()
                .any(|e| matches!(e, ProtoEvent::Ignored { .. }));
            let reason = outcome.rejected();
            self.metrics.injected.push(Injection {
                at: now,
                device: node,
                tag: msg.tag,
                accepted: reason.is_none() && !ignored,
                reason,
            });
        }
        self.submit(node, outcome, sim);
    }

    fn event(&mut self, node: DeviceId, ev: LasanEvent, sim: &mut LSim) {
        let now = sim.now();
        let ev = match ev {
            LasanEvent::Inject(msg) => {
                sim.send(envelope(node, msg));
                return;
            }
            LasanEvent::Release => {
                let start = sim.job_start(node);
                let mut env = Env {
                    crypto: &self.crypto,
                    keys: &mut self.keys,
                    rng: &mut self.rng,
                    backend: self.cfg.backend,
                    arrival: now,
                    start,
                };
                let o = self.vehicle.sm.release_due(&mut env);
                self.submit(node, o, sim);
                return;
            }
            LasanEvent::SendData { stream, left } => {
                self.send_data(node, stream, left, sim);
                return;
            }
            LasanEvent::Proto(ev) => ev,
        };
        if self.cfg.record_events {
            self.metrics.events.push((now, ev.clone()));
        }
        match ev {
            ProtoEvent::Confirmed { ecu, .. } => {
                self.metrics.ecu_auth.insert(ecu, now);
                self.request_streams(ecu, sim);
            }
            ProtoEvent::GrantInstalled { ecu, stream, .. } => {
                let got = self.installed.entry(stream).or_default();
                got.insert(ecu);
                if self.targets.get(&stream).is_some_and(|t| t.is_subset(got))
                    && !self.metrics.stream_ready.contains_key(&stream)
                {
                    self.metrics.ready(stream, now);
                    if self.cfg.data_frames > 0 {
                        if let Some(s) = self
                            .vehicle
                            .ecus
                            .values()
                            .find(|e| e.send_streams.contains(&stream))
                        {
                            let left = self.cfg.data_frames;
                            sim.schedule(s.id, now, LasanEvent::SendData { stream, left });
                        }
                    }
                }
            }
            ProtoEvent::GrantsDeferred {
                ref waiting_for, ..
            } => {
                let sm = self.vehicle.sm.id;
                for d in waiting_for {
                    if let Some(t) = self.vehicle.sm.activation_time(*d).filter(|t| *t > now) {
                        sim.schedule(sm, t, LasanEvent::Release);
                    }
                }
            }
            ProtoEvent::Rejected { at, tag, reason } => {
                self.metrics.rejections.push(Rejection {
                    at: now,
                    device: at,
                    tag,
                    reason,
                });
            }
            _ => {}
        }
    }

    fn observe(&mut self, env: &Envelope<ProtocolMessage>, sim: &mut LSim) {
        self.intruder_ctx_run(sim, |i, ctx| i.observe(&env.payload, ctx));
    }
}

pub(super) fn run(
    arch: &Architecture,
    cfg: &RunConfig,
    crypto: &Crypto,
    intruder: Option<&mut dyn Intruder>,
) -> Result<(RunResult, Vehicle), ScenarioError> {
    let mut keys = KeyFactory::new();
    let mut pki = Pki::new(crypto, &mut keys)?;
    let mut vehicle = pki.build_vehicle("VIN-SIM", arch, crypto, &mut keys, cfg.lasan)?;
    if cfg.scenario == Scenario::WarmStart {
        let sm_cert = vehicle.sm.cert.clone();
        for (id, session) in vehicle.ecus.iter_mut() {
            let key = keys.symmetric();
            let record = EcuRecord {
                key,
                serial: session.cert.serial,
                attributes: session.cert.attributes.clone(),
                nonce: Nonce(0),
                timestamp: SimTime::ZERO,
                active_from: SimTime::ZERO,
            };
            vehicle.sm.preinstall(*id, record);
            session.preinstall(key, sm_cert.clone(), BTreeMap::new());
        }
    }
    let targets = arch
        .streams
        .iter()
        .map(|s| {
            let mut t: BTreeSet<DeviceId> = s.receivers.clone();
            t.insert(s.sender);
            t.retain(|d| {
                vehicle
                    .ecus
                    .get(d)
                    .is_some_and(|e| !vehicle.sm.crl.contains(&e.cert.serial))
            });
            (s.id, t)
        })
        .collect();

    let mut sim = build_sim(arch, cfg);
    if let Some(i) = &intruder {
        sim.add_node(i.id(), i.bus(), 1);
    }
    let mut layer = LasanLayer {
        crypto: crypto.clone(),
        keys,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        cfg: cfg.clone(),
        vehicle,
        targets,
        installed: BTreeMap::new(),
        metrics: Metrics::default(),
        intruder,
        periods: arch
            .streams
            .iter()
            .map(|s| (s.id, SimDuration::from_secs_f64(s.period_ms / 1000.0)))
            .collect(),
    };
    let timed_out = sim.run(&mut layer, SimTime::ZERO + cfg.timeout);
    Ok((
        finish(arch, cfg, sim, layer.metrics, timed_out),
        layer.vehicle,
    ))
}
