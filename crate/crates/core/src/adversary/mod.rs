//! Symbolic bus attacker.
//!
//! The [`Adversary`] sits on the bus as a privileged tap. It sees every
//! message, folds it into its [`Knowledge`], and follows a scripted
//! [`Attack`] that may inject replayed or forged messages. [`attempt`] runs one
//! script against a live LASAN simulation and checks the outcome against the
//! key secrecy and replay claims.
//!
//! This is a bounded, trace-level check of known attacks, not a proof.

mod knowledge;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use knowledge::Knowledge;

use crate::arch::Architecture;
use crate::crypto::{digest_of, Backend, Crypto, Digest, KeyHandle, SymmetricKey, Term};
use crate::ids::{DeviceId, Nonce, StreamId};
use crate::netsim::{
    run_lasan_with, Injection, Intruder, IntruderCtx, LayerKind, RunConfig, ScenarioError,
};
use crate::protocol::{Certificate, Destination, MessageTag, ProtoEvent, ProtocolMessage};
use crate::time::SimDuration;

/// Bus address of the attacker node.
pub const ADVERSARY_ID: DeviceId = DeviceId(0x7ff0);

/// Scripted attacks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Attack {
    /// Listen only.
    Eavesdrop,
    /// Re-send every registration, confirmation, request and grant twice: once
    /// right away and once after the freshness window.
    Replay,
    /// Register as `victim` with an attacker-chosen key, without the victim's
    /// private key, then ask for `stream`.
    Impersonate { victim: DeviceId, stream: StreamId },
    /// Ask for `stream` in the name of `victim` without its ECU key.
    UnauthorizedRequest { victim: DeviceId, stream: StreamId },
    /// Given the victim's private key, register as the victim and ask for a
    /// stream the victim may not send.
    LeakedKey { victim: DeviceId, stream: StreamId },
}

impl Attack {
    pub fn name(&self) -> &'static str {
        match self {
            Attack::Eavesdrop => "eavesdrop",
            Attack::Replay => "replay",
            Attack::Impersonate { .. } => "impersonate",
            Attack::UnauthorizedRequest { .. } => "unauthorized-request",
            Attack::LeakedKey { .. } => "leaked-key",
        }
    }

    fn victim(&self) -> Option<DeviceId> {
        match *self {
            Attack::Impersonate { victim, .. }
            | Attack::UnauthorizedRequest { victim, .. }
            | Attack::LeakedKey { victim, .. } => Some(victim),
            _ => None,
        }
    }
}

/// The attacker's state during one run.
pub struct Adversary {
    attack: Attack,
    knowledge: Knowledge,
    /// Keys the attacker generated itself.
    own_keys: BTreeSet<SymmetricKey>,
    certs: BTreeMap<DeviceId, Certificate>,
    sm: Option<Certificate>,
    injected: HashSet<Digest>,
    forged_key: Option<SymmetricKey>,
    forged: bool,
    requested: bool,
    log: Vec<String>,
}

fn fingerprint(m: &ProtocolMessage) -> Digest {
    let mut t = vec![Term::Bytes(vec![m.tag as u8]), Term::Device(m.src)];
    t.extend(m.terms().cloned());
    digest_of(&t)
}

impl Adversary {
    pub fn new(attack: Attack) -> Self {
        Adversary {
            attack,
            knowledge: Knowledge::new(),
            own_keys: BTreeSet::new(),
            certs: BTreeMap::new(),
            sm: None,
            injected: HashSet::new(),
            forged_key: None,
            forged: false,
            requested: false,
            log: Vec::new(),
        }
    }

    pub fn knowledge(&self) -> &Knowledge {
        &self.knowledge
    }

    pub fn knowledge_contains(&self, t: &Term) -> bool {
        self.knowledge.contains(t)
    }

    pub fn own_keys(&self) -> &BTreeSet<SymmetricKey> {
        &self.own_keys
    }

    pub fn log(&self) -> &[String] {
        &self.log
    }

    /// Hands the attacker secrets it did not observe.
    pub fn leak(&mut self, terms: impl IntoIterator<Item = Term>) {
        for t in terms {
            if let Term::Cert(c) = &t {
                self.certs.insert(c.subject, c.as_ref().clone());
            }
            self.knowledge.learn(t);
        }
    }

    fn inject(&mut self, ctx: &mut IntruderCtx, delay: SimDuration, msg: ProtocolMessage) {
        self.injected.insert(fingerprint(&msg));
        let _ = writeln!(
            self.log_line(ctx),
            "inject +{delay} {:?} as {} -> {:?} len={}",
            msg.tag,
            msg.src,
            msg.dest,
            msg.wire_length
        );
        ctx.inject(delay, msg);
    }

    fn log_line(&mut self, ctx: &IntruderCtx) -> &mut String {
        self.log.push(format!("{} ", ctx.now));
        self.log.last_mut().expect("just pushed")
    }

    fn fresh_key(&mut self, ctx: &mut IntruderCtx) -> SymmetricKey {
        let k = ctx.keys.symmetric();
        self.own_keys.insert(k);
        self.knowledge.learn(Term::SymKey(k));
        k
    }

    /// Registration in the name of `victim`. With `sign` the inner tuple is
    /// signed with the best private key the attacker has: the victim's if it
    /// leaked, otherwise one of its own.
    fn forge_registration(
        &mut self,
        victim: DeviceId,
        sign: bool,
        ctx: &mut IntruderCtx,
    ) -> Option<ProtocolMessage> {
        let sm = self.sm.clone()?;
        let cert = self.certs.get(&victim)?.clone();
        let key = match self.forged_key {
            Some(k) => k,
            None => {
                let k = self.fresh_key(ctx);
                self.forged_key = Some(k);
                k
            }
        };
        let inner = vec![
            Term::Device(victim),
            Term::Device(sm.subject),
            Term::SymKey(key),
            Term::Nonce(Nonce(ctx.rng.gen())),
            Term::Time(ctx.now),
        ];
        let enc = ctx
            .crypto
            .asym_encrypt(inner.clone(), sm.public_key, Backend::Sw)
            .ok()?
            .value;
        let mut body = vec![Term::Cipher(enc)];
        if sign {
            let private = if self.knowledge.knows_asym(cert.public_key.paired()) {
                cert.public_key.paired()
            } else {
                ctx.keys
                    .keypair(ADVERSARY_ID, cert.public_key.bits)
                    .ok()?
                    .private
            };
            self.knowledge.learn(Term::AsymKey(private));
            body.push(Term::Cipher(
                ctx.crypto.sign(&inner, private, Backend::Sw).ok()?.value,
            ));
        }
        body.push(Term::Cert(Box::new(cert)));
        Some(ProtocolMessage::new(
            MessageTag::Registration,
            victim,
            Destination::Device(sm.subject),
            Vec::new(),
            body,
            ctx.crypto,
        ))
    }

    fn forge_request(
        &mut self,
        victim: DeviceId,
        stream: StreamId,
        key: SymmetricKey,
        ctx: &mut IntruderCtx,
    ) -> Option<ProtocolMessage> {
        let sm = self.sm.as_ref()?.subject;
        let inner = vec![
            Term::Device(victim),
            Term::Stream(stream),
            Term::Nonce(Nonce(ctx.rng.gen())),
            Term::Time(ctx.now),
        ];
        let c = ctx.crypto.sym_encrypt(inner, key, Backend::Sw).ok()?.value;
        Some(ProtocolMessage::new(
            MessageTag::StreamRequest,
            victim,
            Destination::Device(sm),
            vec![Term::Device(victim)],
            vec![Term::Cipher(c)],
            ctx.crypto,
        ))
    }

    /// True when `m` is a confirmation sealed under the attacker's forged key.
    fn confirms_forgery(&self, m: &ProtocolMessage) -> bool {
        let Some(k) = self.forged_key else {
            return false;
        };
        m.tag == MessageTag::Confirmation
            && matches!(m.body.first(), Some(Term::Cipher(c)) if c.key_ref == Some(crate::crypto::KeyRef::Sym(k)))
    }

    fn react(&mut self, m: &ProtocolMessage, ctx: &mut IntruderCtx) {
        let honest_confirmation =
            |v: DeviceId| m.tag == MessageTag::Confirmation && m.header_device() == Some(v);
        match self.attack {
            Attack::Eavesdrop => {}
            Attack::Replay => {
                let replayable = matches!(
                    m.tag,
                    MessageTag::Registration
                        | MessageTag::Confirmation
                        | MessageTag::StreamRequest
                        | MessageTag::StreamGrant
                );
                if replayable {
                    let late = SimDuration::from_secs(11);
                    self.inject(ctx, SimDuration::from_millis(1), m.clone());
                    self.inject(ctx, late, m.clone());
                }
            }
            Attack::Impersonate { victim, stream } | Attack::LeakedKey { victim, stream } => {
                if !self.forged && honest_confirmation(victim) && !self.confirms_forgery(m) {
                    self.forged = true;
                    if let Some(f) = self.forge_registration(victim, false, ctx) {
                        self.inject(ctx, SimDuration::ZERO, f);
                    }
                    if let Some(f) = self.forge_registration(victim, true, ctx) {
                        self.inject(ctx, SimDuration::from_micros(1), f);
                    }
                } else if !self.requested && self.confirms_forgery(m) {
                    self.requested = true;
                    let key = self.forged_key.expect("confirmed forgery has a key");
                    if let Some(q) = self.forge_request(victim, stream, key, ctx) {
                        self.inject(ctx, SimDuration::ZERO, q);
                    }
                }
            }
            Attack::UnauthorizedRequest { victim, stream } => {
                if !self.requested && honest_confirmation(victim) {
                    self.requested = true;
                    let key = self.fresh_key(ctx);
                    if let Some(q) = self.forge_request(victim, stream, key, ctx) {
                        self.inject(ctx, SimDuration::from_millis(1), q);
                    }
                }
            }
        }
    }
}

impl Intruder for Adversary {
    fn id(&self) -> DeviceId {
        ADVERSARY_ID
    }

    fn leak_targets(&self) -> Vec<DeviceId> {
        match self.attack {
            Attack::LeakedKey { victim, .. } => vec![victim],
            _ => Vec::new(),
        }
    }

    fn leaked(&mut self, _device: DeviceId, secrets: Vec<Term>) {
        self.leak(secrets);
    }

    fn observe(&mut self, m: &ProtocolMessage, ctx: &mut IntruderCtx) {
        let mine = self.injected.contains(&fingerprint(m));
        let _ = write!(
            self.log_line(ctx),
            "{} {:?} {} -> {:?} len={}",
            if mine { "echo" } else { "observe" },
            m.tag,
            m.src,
            m.dest,
            m.wire_length
        );
        for t in m.terms() {
            if let Term::Cert(c) = t {
                self.certs.insert(c.subject, c.as_ref().clone());
                if m.tag == MessageTag::Advertisement {
                    self.sm = Some(c.as_ref().clone());
                }
            }
        }
        self.knowledge.learn_all(m.terms().cloned());
        if !mine {
            self.react(m, ctx);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Blocked,
    Succeeded,
}

/// Result of one scripted attack.
#[derive(Clone, Debug, Serialize)]
pub struct AttackReport {
    pub attack: Attack,
    pub signed_hash: bool,
    pub seed: u64,
    pub verdict: Verdict,
    /// Why the attack counts as successful; empty when blocked.
    pub violations: Vec<String>,
    pub injected: Vec<Injection>,
    pub knowledge_size: usize,
    /// Attacker log followed by the network trace.
    #[serde(skip)]
    pub trace: Vec<String>,
}

impl AttackReport {
    pub fn write_trace(&self, path: &Path) -> std::io::Result<()> {
        let mut out = format!(
            "# attack={} signed_hash={} seed={} verdict={:?}\n",
            self.attack.name(),
            self.signed_hash,
            self.seed,
            self.verdict
        );
        for v in &self.violations {
            out.push_str(&format!("# violation: {v}\n"));
        }
        for l in &self.trace {
            out.push_str(l);
            out.push('\n');
        }
        std::fs::write(path, out)
    }
}

/// Key material that ended up anywhere in the vehicle, by owner.
struct Secrets {
    ecu: BTreeMap<SymmetricKey, DeviceId>,
    stream: BTreeMap<SymmetricKey, StreamId>,
}

fn collect_secrets(
    events: &[(crate::time::SimTime, ProtoEvent)],
    vehicle: &crate::lifecycle::Vehicle,
) -> Secrets {
    let mut ecu = BTreeMap::new();
    let mut stream = BTreeMap::new();
    for (_, e) in events {
        match e {
            ProtoEvent::Registered { ecu: d, key, .. }
            | ProtoEvent::Confirmed { ecu: d, key, .. } => {
                ecu.insert(*key, *d);
            }
            ProtoEvent::GrantInstalled { stream: s, key, .. } => {
                stream.insert(*key, *s);
            }
            _ => {}
        }
    }
    for (d, r) in vehicle.sm.registry() {
        ecu.insert(r.key, *d);
    }
    for (d, s) in &vehicle.ecus {
        if let Some(k) = s.ecu_key() {
            ecu.insert(k, *d);
        }
        for (sid, k) in s.stream_keys() {
            stream.insert(*k, *sid);
        }
    }
    for s in vehicle
        .sm
        .acl
        .rows()
        .map(|(_, s, _)| s)
        .collect::<BTreeSet<_>>()
    {
        if let Some(k) = vehicle.sm.stream_key(s) {
            stream.insert(k, s);
        }
    }
    Secrets { ecu, stream }
}

/// Runs `attack` against LASAN on `arch` and judges the outcome.
pub fn attempt(
    arch: &Architecture,
    cfg: &RunConfig,
    crypto: &Crypto,
    attack: Attack,
) -> Result<AttackReport, ScenarioError> {
    let mut cfg = cfg.clone();
    cfg.layer = LayerKind::Lasan;
    cfg.record_events = true;
    let mut adv = Adversary::new(attack);
    let (result, vehicle) = run_lasan_with(arch, &cfg, crypto, &mut adv)?;
    let secrets = collect_secrets(&result.events, &vehicle);
    let acl = &vehicle.sm.acl;
    let leaked_victim = match attack {
        Attack::LeakedKey { victim, .. } => Some(victim),
        _ => None,
    };
    let mut violations = Vec::new();

    for (k, owner) in &secrets.ecu {
        if !adv.knows_key(*k) {
            continue;
        }
        if adv.own_keys.contains(k) {
            if Some(*owner) != leaked_victim {
                violations.push(format!("security module bound attacker key to {owner}"));
            }
        } else {
            violations.push(format!("ECU key of {owner} known to attacker"));
        }
    }
    for (k, s) in &secrets.stream {
        if !adv.knows_key(*k) {
            continue;
        }
        let excused =
            leaked_victim.is_some_and(|v| acl.alpha(v, *s) || acl.receivers(*s).contains(&v));
        if !excused {
            violations.push(format!("stream key of {s} known to attacker"));
        }
    }
    if attack == Attack::Replay {
        for i in result.injected.iter().filter(|i| i.accepted) {
            violations.push(format!(
                "replayed {:?} accepted by {} at {}",
                i.tag, i.device, i.at
            ));
        }
    }
    if let Some(v) = attack.victim() {
        for (_, e) in &result.events {
            if let ProtoEvent::GrantIssued { to, stream } = e {
                if *to == v && !acl.alpha(v, *stream) && !acl.receivers(*stream).contains(&v) {
                    violations.push(format!("grant for {stream} issued to unauthorized {v}"));
                }
            }
        }
    }
    violations.dedup();

    let mut trace = adv.log.clone();
    if let Some(t) = &result.trace {
        trace.extend(t.iter().cloned());
    }
    Ok(AttackReport {
        attack,
        signed_hash: cfg.lasan.require_signed_hash,
        seed: cfg.seed,
        verdict: if violations.is_empty() {
            Verdict::Blocked
        } else {
            Verdict::Succeeded
        },
        violations,
        injected: result.injected,
        knowledge_size: adv.knowledge.len(),
        trace,
    })
}

impl Adversary {
    fn knows_key(&self, k: SymmetricKey) -> bool {
        self.knowledge.knows_sym(k)
    }

    /// Private keys the attacker holds.
    pub fn knows_private(&self, k: KeyHandle) -> bool {
        self.knowledge.knows_asym(k)
    }
}
