use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{build_sim, finish, Metrics, Rejection, RunConfig, RunResult, ScenarioError};
use crate::arch::Architecture;
use crate::baselines::tesla::{generation_cost, TeslaChain};
use crate::crypto::{CipherTerm, Crypto, Digest, KeyFactory, KeyPair, Meter, Term};
use crate::ids::{DeviceId, StreamId};
use crate::lifecycle::Pki;
use crate::netsim::{Action, Envelope, Layer, Sim};
use crate::protocol::{
    verify_certificate, Certificate, Destination, MessageTag, Reject, TrustAnchor,
};
use crate::time::{SimDuration, SimTime};

/// CAN identifier of anchor commitments.
pub const COMMIT_FRAME_ID: u16 = 0x070;

/// Signed chain anchors of one sender.
#[derive(Clone, Debug)]
pub struct Commitment {
    sender: DeviceId,
    cert: Certificate,
    anchors: Vec<(StreamId, Digest)>,
    signature: CipherTerm,
}

fn commitment_terms(sender: DeviceId, anchors: &[(StreamId, Digest)]) -> Vec<Term> {
    let mut t = vec![Term::Device(sender)];
    for (s, d) in anchors {
        t.push(Term::Stream(*s));
        t.push(Term::Digest(*d));
    }
    t
}

#[derive(Clone, Debug)]
pub enum TeslaEvent {
    ChainReady { stream: StreamId },
    Verified { streams: Vec<StreamId> },
}

type TSim = Sim<Commitment, TeslaEvent>;

struct Sender {
    keypair: KeyPair,
    cert: Certificate,
    pending: BTreeSet<StreamId>,
    chains: BTreeMap<StreamId, TeslaChain>,
}

struct TeslaLayer {
    crypto: Crypto,
    cfg: RunConfig,
    ecu_ca: TrustAnchor,
    rng: ChaCha8Rng,
    senders: BTreeMap<DeviceId, Sender>,
    period: BTreeMap<StreamId, SimDuration>,
    receivers: BTreeMap<StreamId, BTreeSet<DeviceId>>,
    verified: BTreeMap<StreamId, BTreeSet<DeviceId>>,
    anchors: BTreeMap<(DeviceId, StreamId), Digest>,
    metrics: Metrics,
}

impl TeslaLayer {
    fn commit(&mut self, ecu: DeviceId, sim: &mut TSim) {
        let s = &self.senders[&ecu];
        let anchors: Vec<_> = s.chains.iter().map(|(id, c)| (*id, c.anchor())).collect();
        let mut m = Meter::new();
        let signature = m.take(
            self.crypto
                .sign(
                    &commitment_terms(ecu, &anchors),
                    s.keypair.private,
                    self.cfg.backend,
                )
                .expect("timing table covers signatures"),
        );
        let l = self.crypto.ledger();
        let wire_length =
            l.certificate() + anchors.len() * (l.stream_id + l.digest) + signature.byte_length;
        let msg = Commitment {
            sender: ecu,
            cert: s.cert.clone(),
            anchors,
            signature,
        };
        let env = Envelope {
            src: ecu,
            dest: Destination::Broadcast,
            frame_id: COMMIT_FRAME_ID,
            wire_length,
            payload: msg,
        };
        sim.submit(ecu, m.elapsed(), vec![(m.elapsed(), Action::Send(env))]);
    }
}

impl Layer for TeslaLayer {
    type Msg = Commitment;
    type Event = TeslaEvent;

    fn start(&mut self, sim: &mut TSim) {
        let cost = generation_cost(&self.crypto, self.cfg.tesla.chain_length, self.cfg.backend)
            .expect("timing table covers hashing");
        let ids: Vec<_> = self.senders.keys().copied().collect();
        for ecu in ids {
            let streams: Vec<_> = self.senders[&ecu].pending.iter().copied().collect();
            for stream in streams {
                let at = sim.submit(
                    ecu,
                    cost,
                    vec![(cost, Action::Event(TeslaEvent::ChainReady { stream }))],
                );
                self.metrics.requested(stream, at);
            }
        }
    }

    fn deliver(&mut self, node: DeviceId, env: Envelope<Commitment>, sim: &mut TSim) {
        let c = env.payload;
        let mine: Vec<_> = c
            .anchors
            .iter()
            .map(|(s, _)| *s)
            .filter(|s| self.receivers.get(s).is_some_and(|r| r.contains(&node)))
            .collect();
        if mine.is_empty() {
            return;
        }
        let b = self.cfg.backend;
        let mut m = Meter::new();
        let cert_ok = m.take(
            verify_certificate(&self.crypto, &c.cert, &[self.ecu_ca], b)
                .expect("timing table covers RSA"),
        );
        let sig_ok = cert_ok
            && c.cert.subject == c.sender
            && m.take(
                self.crypto
                    .verify(
                        &c.signature,
                        &commitment_terms(c.sender, &c.anchors),
                        c.cert.public_key,
                        b,
                    )
                    .expect("timing table covers RSA"),
            );
        if !sig_ok {
            let reason = if cert_ok {
                Reject::SignedHashMismatch
            } else {
                Reject::BadCertificate
            };
            self.metrics.rejections.push(Rejection {
                at: sim.now(),
                device: node,
                tag: MessageTag::Advertisement,
                reason,
            });
            sim.submit(node, m.elapsed(), Vec::new());
            return;
        }
        for (s, d) in &c.anchors {
            if mine.contains(s) {
                self.anchors.insert((node, *s), *d);
            }
        }
        let ev = TeslaEvent::Verified { streams: mine };
        sim.submit(node, m.elapsed(), vec![(m.elapsed(), Action::Event(ev))]);
    }

    fn event(&mut self, node: DeviceId, ev: TeslaEvent, sim: &mut TSim) {
        match ev {
            TeslaEvent::ChainReady { stream } => {
                let seed = Digest(self.rng.gen());
                let interval = self.period[&stream];
                let n = self.cfg.tesla.functional_length.max(2);
                let s = self.senders.get_mut(&node).expect("sender");
                s.chains.insert(
                    stream,
                    TeslaChain::generate(node, stream, seed, n, interval),
                );
                s.pending.remove(&stream);
                if s.pending.is_empty() {
                    self.commit(node, sim);
                }
            }
            TeslaEvent::Verified { streams, .. } => {
                for s in streams {
                    let v = self.verified.entry(s).or_default();
                    v.insert(node);
                    if self.receivers.get(&s).is_some_and(|r| r.is_subset(v)) {
                        self.metrics.ready(s, sim.now());
                    }
                }
            }
        }
    }
}

pub(super) fn run(
    arch: &Architecture,
    cfg: &RunConfig,
    crypto: &Crypto,
) -> Result<RunResult, ScenarioError> {
    let mut keys = KeyFactory::new();
    let mut pki = Pki::new(crypto, &mut keys)?;
    let vehicle = pki.build_vehicle("VIN-SIM", arch, crypto, &mut keys, cfg.lasan)?;
    let mut senders = BTreeMap::new();
    for (id, session) in &vehicle.ecus {
        if session.send_streams.is_empty() {
            continue;
        }
        senders.insert(
            *id,
            Sender {
                keypair: session.keypair,
                cert: session.cert.clone(),
                pending: session.send_streams.clone(),
                chains: BTreeMap::new(),
            },
        );
    }
    let mut sim = build_sim(arch, cfg);
    let mut layer = TeslaLayer {
        crypto: crypto.clone(),
        cfg: cfg.clone(),
        ecu_ca: pki.cas.ecus.anchor(),
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        senders,
        period: arch
            .streams
            .iter()
            .map(|s| (s.id, SimDuration::from_secs_f64(s.period_ms / 1000.0)))
            .collect(),
        receivers: arch
            .streams
            .iter()
            .map(|s| (s.id, s.receivers.clone()))
            .collect(),
        verified: BTreeMap::new(),
        anchors: BTreeMap::new(),
        metrics: Metrics::default(),
    };
    let timed_out = sim.run(&mut layer, SimTime::ZERO + cfg.timeout);
    Ok(finish(arch, cfg, sim, layer.metrics, timed_out))
}
