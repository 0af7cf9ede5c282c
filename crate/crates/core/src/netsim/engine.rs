use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use super::can::{frame_time, segment, BusTiming, CanFdFrame, Reassembly, ReassemblyStep};
use crate::ids::DeviceId;
use crate::protocol::Destination;
use crate::time::{SimDuration, SimTime};

pub type BusId = usize;

/// A message handed to the network, with CAN-level addressing.
#[derive(Clone, Debug, PartialEq)]
pub struct Envelope<M> {
    pub src: DeviceId,
    pub dest: Destination,
    pub frame_id: u16,
    pub wire_length: usize,
    pub payload: M,
}

/// Something a compute job does once it has run for a given offset.
#[derive(Clone, Debug)]
pub enum Action<M, E> {
    Send(Envelope<M>),
    Event(E),
}

/// A protocol layer driven by the event loop.
pub trait Layer {
    type Msg: Clone;
    type Event;

    fn start(&mut self, sim: &mut Sim<Self::Msg, Self::Event>);
    fn deliver(
        &mut self,
        node: DeviceId,
        env: Envelope<Self::Msg>,
        sim: &mut Sim<Self::Msg, Self::Event>,
    );
    fn event(&mut self, node: DeviceId, ev: Self::Event, sim: &mut Sim<Self::Msg, Self::Event>);
    /// Called once per message when its last frame leaves the originating bus.
    fn observe(&mut self, _env: &Envelope<Self::Msg>, _sim: &mut Sim<Self::Msg, Self::Event>) {}
}

enum Kind<M, E> {
    Transmit(Envelope<M>),
    Arbitrate(BusId),
    FrameEnd(BusId, Pending),
    Forward(BusId, Pending),
    Layer(DeviceId, E),
}

struct Queued<M, E> {
    at: SimTime,
    seq: u64,
    kind: Kind<M, E>,
}

impl<M, E> PartialEq for Queued<M, E> {
    fn eq(&self, o: &Self) -> bool {
        (self.at, self.seq) == (o.at, o.seq)
    }
}
impl<M, E> Eq for Queued<M, E> {}
impl<M, E> PartialOrd for Queued<M, E> {
    fn partial_cmp(&self, o: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(o))
    }
}
impl<M, E> Ord for Queued<M, E> {
    fn cmp(&self, o: &Self) -> std::cmp::Ordering {
        (self.at, self.seq).cmp(&(o.at, o.seq))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Pending {
    frame: CanFdFrame,
    /// Node that put this copy of the frame on the bus.
    tx: DeviceId,
}

#[derive(Debug, Default)]
struct BusState {
    pending: BTreeSet<(u16, u64)>,
    frames: BTreeMap<u64, Pending>,
    busy: bool,
    arbitration_scheduled: bool,
    attached: Vec<DeviceId>,
}

#[derive(Debug)]
struct NodeState {
    bus: Option<BusId>,
    lanes: Vec<SimTime>,
}

#[derive(Clone, Debug)]
pub struct GatewayConfig {
    pub id: DeviceId,
    pub buses: Vec<BusId>,
    pub latency: SimDuration,
}

/// Network counters collected over one run.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct NetStats {
    pub frames: u64,
    pub messages: u64,
    pub deliveries: u64,
    pub lost: u64,
    pub busy_time: Vec<SimDuration>,
}

/// Engine state shared with layers: clock, queue, buses and compute lanes.
pub struct Sim<M, E> {
    now: SimTime,
    seq: u64,
    queue: BinaryHeap<Reverse<Queued<M, E>>>,
    timing: BusTiming,
    buses: Vec<BusState>,
    nodes: BTreeMap<DeviceId, NodeState>,
    gateway: Option<GatewayConfig>,
    messages: BTreeMap<u64, Envelope<M>>,
    next_msg: u64,
    reassembly: BTreeMap<(DeviceId, u64), Reassembly>,
    stats: NetStats,
    trace: Option<Vec<String>>,
}

impl<M: Clone, E> Sim<M, E> {
    pub fn new(n_buses: usize, timing: BusTiming) -> Self {
        Sim {
            now: SimTime::ZERO,
            seq: 0,
            queue: BinaryHeap::new(),
            timing,
            buses: (0..n_buses.max(1)).map(|_| BusState::default()).collect(),
            nodes: BTreeMap::new(),
            gateway: None,
            messages: BTreeMap::new(),
            next_msg: 0,
            reassembly: BTreeMap::new(),
            stats: NetStats {
                busy_time: vec![SimDuration::ZERO; n_buses.max(1)],
                ..NetStats::default()
            },
            trace: None,
        }
    }

    pub fn enable_trace(&mut self) {
        self.trace = Some(Vec::new());
    }

    pub fn take_trace(&mut self) -> Option<Vec<String>> {
        self.trace.take()
    }

    fn log(&mut self, line: impl FnOnce() -> String) {
        let now = self.now;
        if let Some(t) = self.trace.as_mut() {
            t.push(format!("{now} {}", line()));
        }
    }

    pub fn add_node(&mut self, id: DeviceId, bus: BusId, lanes: usize) {
        self.buses[bus].attached.push(id);
        self.nodes.insert(
            id,
            NodeState {
                bus: Some(bus),
                lanes: vec![SimTime::ZERO; lanes.max(1)],
            },
        );
    }

    pub fn add_gateway(&mut self, cfg: GatewayConfig) {
        for b in &cfg.buses {
            self.buses[*b].attached.push(cfg.id);
        }
        self.nodes.insert(
            cfg.id,
            NodeState {
                bus: None,
                lanes: vec![SimTime::ZERO],
            },
        );
        self.gateway = Some(cfg);
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn stats(&self) -> &NetStats {
        &self.stats
    }

    fn push(&mut self, at: SimTime, kind: Kind<M, E>) {
        debug_assert!(at >= self.now, "event scheduled into the past");
        self.seq += 1;
        self.queue.push(Reverse(Queued {
            at,
            seq: self.seq,
            kind,
        }));
    }

    /// When a job submitted now on `node` would start.
    pub fn job_start(&self, node: DeviceId) -> SimTime {
        let lanes = &self.nodes[&node].lanes;
        let free = lanes.iter().copied().min().unwrap_or(SimTime::ZERO);
        free.max(self.now)
    }

    /// Queues a compute job of length `cost` on the earliest free lane of
    /// `node`. Each action fires at job start plus its offset.
    pub fn submit(
        &mut self,
        node: DeviceId,
        cost: SimDuration,
        actions: Vec<(SimDuration, Action<M, E>)>,
    ) -> SimTime {
        let now = self.now;
        let state = self.nodes.get_mut(&node).expect("unknown node");
        let lane = (0..state.lanes.len())
            .min_by_key(|i| (state.lanes[*i], *i))
            .unwrap_or(0);
        let start = state.lanes[lane].max(now);
        state.lanes[lane] = start + cost;
        self.log(|| format!("job {node} lane={lane} start={start} cost={cost}"));
        for (offset, action) in actions {
            debug_assert!(offset <= cost, "action after job end");
            let at = start + offset;
            match action {
                Action::Send(env) => self.push(at, Kind::Transmit(env)),
                Action::Event(ev) => self.push(at, Kind::Layer(node, ev)),
            }
        }
        start
    }

    /// Hands a message to the network at the current time.
    pub fn send(&mut self, env: Envelope<M>) {
        self.push(self.now, Kind::Transmit(env));
    }

    /// Delivers `ev` to the layer at `at` on behalf of `node`.
    pub fn schedule(&mut self, node: DeviceId, at: SimTime, ev: E) {
        let at = at.max(self.now);
        self.push(at, Kind::Layer(node, ev));
    }

    fn enqueue_frame(&mut self, bus: BusId, p: Pending) {
        self.seq += 1;
        let key = self.seq;
        let b = &mut self.buses[bus];
        b.pending.insert((p.frame.frame_id, key));
        b.frames.insert(key, p);
        if !b.busy && !b.arbitration_scheduled {
            b.arbitration_scheduled = true;
            self.push(self.now, Kind::Arbitrate(bus));
        }
    }

    fn transmit(&mut self, env: Envelope<M>) {
        let Some(bus) = self.nodes.get(&env.src).and_then(|n| n.bus) else {
            return;
        };
        let msg_ref = self.next_msg;
        self.next_msg += 1;
        self.stats.messages += 1;
        let frames = segment(msg_ref, env.frame_id, env.wire_length);
        self.log(|| {
            format!(
                "send {} -> {:?} id={:#x} len={} frames={}",
                env.src,
                env.dest,
                env.frame_id,
                env.wire_length,
                frames.len()
            )
        });
        let src = env.src;
        self.messages.insert(msg_ref, env);
        for f in frames {
            self.enqueue_frame(bus, Pending { frame: f, tx: src });
        }
    }

    fn arbitrate(&mut self, bus: BusId) {
        let b = &mut self.buses[bus];
        b.arbitration_scheduled = false;
        if b.busy {
            return;
        }
        let Some(&(id, key)) = b.pending.iter().next() else {
            return;
        };
        b.pending.remove(&(id, key));
        let p = b.frames.remove(&key).expect("frame bookkeeping");
        let dur = frame_time(p.frame.payload_len, &self.timing);
        b.busy = true;
        self.stats.frames += 1;
        self.stats.busy_time[bus] += dur;
        self.log(|| {
            format!(
                "frame bus={bus} id={id:#x} msg={} seg={}/{} len={} dur={}",
                p.frame.segment.msg_ref,
                p.frame.segment.index + 1,
                p.frame.segment.total,
                p.frame.payload_len,
                dur
            )
        });
        let end = self.now + dur;
        self.push(end, Kind::FrameEnd(bus, p));
    }

    fn receivers_on(
        &self,
        bus: BusId,
        p: &Pending,
        dest: Destination,
        origin: DeviceId,
    ) -> Vec<DeviceId> {
        self.buses[bus]
            .attached
            .iter()
            .copied()
            .filter(|d| *d != p.tx && *d != origin)
            .filter(|d| self.gateway.as_ref().is_none_or(|g| g.id != *d))
            .filter(|d| match dest {
                Destination::Broadcast => true,
                Destination::Device(t) => t == *d,
            })
            .collect()
    }

    fn frame_end<L: Layer<Msg = M, Event = E>>(&mut self, bus: BusId, p: Pending, layer: &mut L) {
        {
            let b = &mut self.buses[bus];
            b.busy = false;
            if !b.pending.is_empty() && !b.arbitration_scheduled {
                b.arbitration_scheduled = true;
                self.push(self.now, Kind::Arbitrate(bus));
            }
        }
        let msg_ref = p.frame.segment.msg_ref;
        let Some(env) = self.messages.get(&msg_ref) else {
            return;
        };
        let (dest, origin) = (env.dest, env.src);
        let last = p.frame.segment.index + 1 == p.frame.segment.total;
        if last && p.tx == origin {
            let env = env.clone();
            layer.observe(&env, self);
        }
        if let Some(g) = self.gateway.clone() {
            if g.buses.contains(&bus) {
                for other in g.buses.iter().copied().filter(|b| *b != bus) {
                    let wanted = match dest {
                        Destination::Broadcast => true,
                        Destination::Device(t) => {
                            self.nodes.get(&t).and_then(|n| n.bus) == Some(other)
                        }
                    };
                    if wanted && p.tx != g.id {
                        let fwd = Pending {
                            frame: p.frame,
                            tx: g.id,
                        };
                        self.push(self.now + g.latency, Kind::Forward(other, fwd));
                    }
                }
            }
        }
        for r in self.receivers_on(bus, &p, dest, origin) {
            let key = (r, msg_ref);
            let step = self
                .reassembly
                .entry(key)
                .or_default()
                .accept(p.frame.segment);
            match step {
                ReassemblyStep::Pending => {}
                ReassemblyStep::Broken => {
                    self.log(|| format!("reassembly broken at {r} msg={msg_ref}"));
                }
                ReassemblyStep::Complete => {
                    self.reassembly.remove(&key);
                    self.stats.deliveries += 1;
                    self.log(|| format!("deliver {r} msg={msg_ref}"));
                    let env = self.messages[&msg_ref].clone();
                    layer.deliver(r, env, self);
                }
            }
        }
    }

    /// Runs until no events remain or the next one lies beyond `timeout`.
    /// Returns true if the run hit the timeout.
    pub fn run<L: Layer<Msg = M, Event = E>>(&mut self, layer: &mut L, timeout: SimTime) -> bool {
        layer.start(self);
        let mut timed_out = false;
        while let Some(Reverse(q)) = self.queue.pop() {
            if q.at > timeout {
                timed_out = true;
                self.now = timeout;
                break;
            }
            self.now = q.at;
            match q.kind {
                Kind::Transmit(env) => self.transmit(env),
                Kind::Arbitrate(bus) => self.arbitrate(bus),
                Kind::FrameEnd(bus, p) => self.frame_end(bus, p, layer),
                Kind::Forward(bus, p) => self.enqueue_frame(bus, p),
                Kind::Layer(node, ev) => layer.event(node, ev, self),
            }
        }
        self.stats.lost = self.reassembly.len() as u64;
        if self.stats.lost > 0 {
            let lost = self.stats.lost;
            self.log(|| format!("timer expiry: {lost} partially received messages dropped"));
        }
        timed_out
    }
}
