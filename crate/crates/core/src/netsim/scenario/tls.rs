use std::collections::{BTreeMap, VecDeque};

use super::{build_sim, finish, Metrics, RunConfig, RunResult, ScenarioError};
use crate::arch::Architecture;
use crate::baselines::tls::{handshake_pairs, Handshake, Scheduling, TlsSession};
use crate::crypto::{Crypto, KeyFactory};
use crate::ids::{DeviceId, StreamId};
use crate::netsim::{Action, Envelope, Layer, Sim};
use crate::protocol::Destination;
use crate::time::SimTime;

/// CAN identifier of handshake traffic: above LASAN control, below data.
pub const TLS_FRAME_ID: u16 = 0x060;

#[derive(Clone, Copy, Debug)]
pub struct FlightMsg {
    session: usize,
    flight: usize,
}

#[derive(Clone, Copy, Debug)]
pub enum TlsEvent {
    Sent { session: usize, flight: usize },
    Established { session: usize },
}

type TSim = Sim<FlightMsg, TlsEvent>;

struct TlsLayer {
    crypto: Crypto,
    cfg: RunConfig,
    hs: Handshake,
    keys: KeyFactory,
    sessions: Vec<TlsSession>,
    /// Which queue a session belongs to; queues run one handshake at a time.
    queue_of: Vec<usize>,
    queues: Vec<VecDeque<usize>>,
    remaining: BTreeMap<StreamId, usize>,
    metrics: Metrics,
}

impl TlsLayer {
    fn launch(&mut self, session: usize, flight: usize, sim: &mut TSim) {
        let f = &self.hs.flights[flight];
        let s = &self.sessions[session];
        let node = s.device(f.from);
        let peer = s.device(f.from.peer());
        let cost = f
            .cost(&self.crypto, self.cfg.backend)
            .expect("timing table covers TLS ops");
        let env = Envelope {
            src: node,
            dest: Destination::Device(peer),
            frame_id: TLS_FRAME_ID,
            wire_length: f.wire_length,
            payload: FlightMsg { session, flight },
        };
        let at = sim.submit(
            node,
            cost,
            vec![
                (cost, Action::Send(env)),
                (cost, Action::Event(TlsEvent::Sent { session, flight })),
            ],
        );
        if flight == 0 {
            self.metrics.requested(s.stream, at);
        }
    }

    fn next_in_queue(&mut self, q: usize, sim: &mut TSim) {
        if let Some(s) = self.queues[q].pop_front() {
            self.launch(s, 0, sim);
        }
    }
}

impl Layer for TlsLayer {
    type Msg = FlightMsg;
    type Event = TlsEvent;

    fn start(&mut self, sim: &mut TSim) {
        for q in 0..self.queues.len() {
            self.next_in_queue(q, sim);
        }
    }

    fn deliver(&mut self, _node: DeviceId, env: Envelope<FlightMsg>, sim: &mut TSim) {
        let FlightMsg { session, flight } = env.payload;
        let keys = &mut self.keys;
        self.sessions[session].delivered(&self.hs, || keys.symmetric());
        let n = self.hs.flights.len();
        if flight + 1 == n {
            let client = self.sessions[session].client;
            let cost = self
                .hs
                .finish_cost(&self.crypto, self.cfg.backend)
                .expect("timing table covers TLS ops");
            sim.submit(
                client,
                cost,
                vec![(cost, Action::Event(TlsEvent::Established { session }))],
            );
        } else if self.hs.flights[flight + 1].from != self.hs.flights[flight].from {
            self.launch(session, flight + 1, sim);
        }
    }

    fn event(&mut self, _node: DeviceId, ev: TlsEvent, sim: &mut TSim) {
        match ev {
            TlsEvent::Sent { session, flight } => {
                let same_side = self
                    .hs
                    .flights
                    .get(flight + 1)
                    .is_some_and(|f| f.from == self.hs.flights[flight].from);
                if same_side {
                    self.launch(session, flight + 1, sim);
                }
            }
            TlsEvent::Established { session } => {
                let stream = self.sessions[session].stream;
                let left = self
                    .remaining
                    .get_mut(&stream)
                    .expect("stream has sessions");
                *left -= 1;
                if *left == 0 {
                    self.metrics.ready(stream, sim.now());
                }
                self.next_in_queue(self.queue_of[session], sim);
            }
        }
    }
}

pub(super) fn run(
    arch: &Architecture,
    cfg: &RunConfig,
    crypto: &Crypto,
) -> Result<RunResult, ScenarioError> {
    let pairs = handshake_pairs(&arch.streams);
    let sessions: Vec<_> = pairs
        .iter()
        .map(|(s, c, r)| TlsSession::new(*s, *c, *r))
        .collect();
    let mut queues: Vec<VecDeque<usize>> = Vec::new();
    let mut queue_of = Vec::with_capacity(sessions.len());
    let mut by_sender: BTreeMap<DeviceId, usize> = BTreeMap::new();
    for (i, s) in sessions.iter().enumerate() {
        let q = match cfg.tls.scheduling {
            Scheduling::Sequential => 0,
            Scheduling::Concurrent => {
                let next = by_sender.len();
                *by_sender.entry(s.client).or_insert(next)
            }
        };
        if queues.len() <= q {
            queues.resize(q + 1, VecDeque::new());
        }
        queues[q].push_back(i);
        queue_of.push(q);
    }
    let mut remaining = BTreeMap::new();
    for s in &sessions {
        *remaining.entry(s.stream).or_insert(0) += 1;
    }
    let mut metrics = Metrics::default();
    for s in &arch.streams {
        if !remaining.contains_key(&s.id) {
            metrics.ready(s.id, SimTime::ZERO);
        }
    }
    let mut sim = build_sim(arch, cfg);
    let mut layer = TlsLayer {
        crypto: crypto.clone(),
        cfg: cfg.clone(),
        hs: cfg.tls.handshake(crypto.ledger()),
        keys: KeyFactory::new(),
        sessions,
        queue_of,
        queues,
        remaining,
        metrics,
    };
    let timed_out = sim.run(&mut layer, SimTime::ZERO + cfg.timeout);
    Ok(finish(arch, cfg, sim, layer.metrics, timed_out))
}
