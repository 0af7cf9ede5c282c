//! ECU authentication and stream authorization state machines.
//!
//! The security module advertises its certificate, each ECU registers with a
//! fresh symmetric ECU key (encrypted to the security module and bound to the
//! ECU by a signed hash) and is confirmed. Confirmed ECUs request stream keys,
//! which the security module hands out to every receiver and then to the sender.
//!
//! Handlers are pure with respect to time: they receive the arrival time and
//! the time their compute job will start, and return a list of effects tagged
//! with the offset at which each becomes visible. The simulator turns those
//! offsets into events.

mod ecu;
mod sm;

use std::collections::{BTreeMap, BTreeSet};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use ecu::{EcuPhase, EcuSession};
pub use sm::{EcuRecord, SecurityModule};

use crate::crypto::Backend;
use crate::crypto::{CipherTerm, Crypto, CryptoError, KeyFactory, KeyHandle, Meter, Term, Timed};
use crate::ids::{CaId, DeviceId, DeviceKind, Nonce, StreamId};
use crate::time::{SimDuration, SimTime};

/// Serial number of an issued certificate, unique per CA.
pub type CertSerial = u32;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Certificate {
    pub serial: CertSerial,
    pub subject: DeviceId,
    pub label: String,
    pub kind: DeviceKind,
    pub public_key: KeyHandle,
    pub attributes: BTreeMap<String, String>,
    pub issuer: CaId,
    pub signature: CipherTerm,
}

impl Certificate {
    /// Everything the CA signature covers.
    pub fn tbs_terms(&self) -> Vec<Term> {
        tbs_terms(
            self.serial,
            self.subject,
            &self.label,
            self.kind,
            self.public_key,
            &self.attributes,
            self.issuer,
        )
    }

    pub fn encode(&self, out: &mut Vec<u8>) {
        Term::Tuple(self.tbs_terms()).encode(out);
        Term::Cipher(self.signature.clone()).encode(out);
    }

    #[allow(clippy::too_many_arguments)]
    pub fn issue(
        crypto: &Crypto,
        ca: CaId,
        ca_private: KeyHandle,
        serial: CertSerial,
        subject: DeviceId,
        label: String,
        kind: DeviceKind,
        public_key: KeyHandle,
        attributes: BTreeMap<String, String>,
    ) -> Result<Timed<Certificate>, CryptoError> {
        let tbs = tbs_terms(serial, subject, &label, kind, public_key, &attributes, ca);
        let sig = crypto.sign(&tbs, ca_private, Backend::Sw)?;
        Ok(Timed {
            cost: sig.cost,
            value: Certificate {
                serial,
                subject,
                label,
                kind,
                public_key,
                attributes,
                issuer: ca,
                signature: sig.value,
            },
        })
    }
}

fn tbs_terms(
    serial: CertSerial,
    subject: DeviceId,
    label: &str,
    kind: DeviceKind,
    public_key: KeyHandle,
    attributes: &BTreeMap<String, String>,
    issuer: CaId,
) -> Vec<Term> {
    let mut attrs = Vec::new();
    for (k, v) in attributes {
        attrs.push(Term::Bytes(k.as_bytes().to_vec()));
        attrs.push(Term::Bytes(v.as_bytes().to_vec()));
    }
    vec![
        Term::Bytes(serial.to_be_bytes().to_vec()),
        Term::Device(subject),
        Term::Bytes(label.as_bytes().to_vec()),
        Term::Bytes(kind.to_string().into_bytes()),
        Term::AsymKey(public_key),
        Term::Tuple(attrs),
        Term::Bytes(issuer.0.to_be_bytes().to_vec()),
    ]
}

/// A CA public key a device trusts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrustAnchor {
    pub ca: CaId,
    pub public: KeyHandle,
}

/// Signature check of `cert` against the trusted anchors. Certificates from an
/// unknown CA fail without any crypto cost.
pub fn verify_certificate(
    crypto: &Crypto,
    cert: &Certificate,
    trusted: &[TrustAnchor],
    backend: Backend,
) -> Result<Timed<bool>, CryptoError> {
    let Some(anchor) = trusted.iter().find(|a| a.ca == cert.issuer) else {
        return Ok(Timed {
            value: false,
            cost: SimDuration::ZERO,
        });
    };
    crypto.verify(&cert.signature, &cert.tbs_terms(), anchor.public, backend)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stream {
    pub id: StreamId,
    pub sender: DeviceId,
    pub receivers: BTreeSet<DeviceId>,
    pub period_ms: f64,
    pub payload_len: usize,
    pub deadline_ms: f64,
}

#[derive(Debug, Error, PartialEq)]
pub enum StreamError {
    #[error("stream {0} has no receivers")]
    NoReceivers(StreamId),
    #[error("stream {0}: sender is also a receiver")]
    SenderReceives(StreamId),
    #[error("stream {0}: period and deadline must be positive")]
    BadTiming(StreamId),
}

impl Stream {
    pub fn validate(&self) -> Result<(), StreamError> {
        if self.receivers.is_empty() {
            return Err(StreamError::NoReceivers(self.id));
        }
        if self.receivers.contains(&self.sender) {
            return Err(StreamError::SenderReceives(self.id));
        }
        if !(self.period_ms > 0.0 && self.deadline_ms > 0.0) {
            return Err(StreamError::BadTiming(self.id));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Send,
    Receive,
    None,
}

/// Access control list: which device may send or receive which stream.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Acl {
    entries: BTreeMap<(DeviceId, StreamId), Role>,
}

impl Acl {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_streams<'a>(streams: impl IntoIterator<Item = &'a Stream>) -> Self {
        let mut acl = Acl::new();
        for s in streams {
            acl.grant(s.sender, s.id, Role::Send);
            for r in &s.receivers {
                acl.grant(*r, s.id, Role::Receive);
            }
        }
        acl
    }

    pub fn grant(&mut self, device: DeviceId, stream: StreamId, role: Role) {
        if role == Role::None {
            self.entries.remove(&(device, stream));
        } else {
            self.entries.insert((device, stream), role);
        }
    }

    pub fn role(&self, device: DeviceId, stream: StreamId) -> Role {
        self.entries
            .get(&(device, stream))
            .copied()
            .unwrap_or(Role::None)
    }

    /// The access function: 1 exactly when `device` may send on `stream`.
    pub fn alpha(&self, device: DeviceId, stream: StreamId) -> bool {
        self.role(device, stream) == Role::Send
    }

    pub fn receivers(&self, stream: StreamId) -> BTreeSet<DeviceId> {
        self.entries
            .iter()
            .filter(|((_, s), r)| *s == stream && **r == Role::Receive)
            .map(|((d, _), _)| *d)
            .collect()
    }

    /// Streams `device` participates in, in any role.
    pub fn streams_of(&self, device: DeviceId) -> BTreeSet<StreamId> {
        self.entries
            .keys()
            .filter(|(d, _)| *d == device)
            .map(|(_, s)| *s)
            .collect()
    }

    pub fn remove_device(&mut self, device: DeviceId) {
        self.entries.retain(|(d, _), _| *d != device);
    }

    pub fn rows(&self) -> impl Iterator<Item = (DeviceId, StreamId, Role)> + '_ {
        self.entries.iter().map(|((d, s), r)| (*d, *s, *r))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MessageTag {
    Advertisement,
    Registration,
    Confirmation,
    StreamRequest,
    StreamGrant,
    Data,
}

impl MessageTag {
    /// CAN identifier base. Control traffic sits below every data stream id so it
    /// wins arbitration.
    pub fn frame_id(self, stream: Option<StreamId>) -> u16 {
        match self {
            MessageTag::Advertisement => 0x010,
            MessageTag::Registration => 0x020,
            MessageTag::Confirmation => 0x030,
            MessageTag::StreamRequest => 0x040,
            MessageTag::StreamGrant => 0x050,
            MessageTag::Data => 0x100 + stream.map_or(0, |s| s.0 & 0x6ff),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Destination {
    Broadcast,
    Device(DeviceId),
}

/// A LASAN message. `src` and `dest` model CAN-level addressing and are not
/// authenticated; `header` holds plaintext fields that count towards the wire length.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ProtocolMessage {
    pub tag: MessageTag,
    pub src: DeviceId,
    pub dest: Destination,
    pub header: Vec<Term>,
    pub body: Vec<Term>,
    pub wire_length: usize,
}

impl ProtocolMessage {
    pub fn new(
        tag: MessageTag,
        src: DeviceId,
        dest: Destination,
        header: Vec<Term>,
        body: Vec<Term>,
        crypto: &Crypto,
    ) -> Self {
        let wire_length = crypto.payload_len(&header) + crypto.payload_len(&body);
        ProtocolMessage {
            tag,
            src,
            dest,
            header,
            body,
            wire_length,
        }
    }

    pub fn header_device(&self) -> Option<DeviceId> {
        match self.header.first() {
            Some(Term::Device(d)) => Some(*d),
            _ => None,
        }
    }

    pub fn header_stream(&self) -> Option<StreamId> {
        match self.header.first() {
            Some(Term::Stream(s)) => Some(*s),
            _ => None,
        }
    }

    pub fn frame_id(&self) -> u16 {
        self.tag.frame_id(self.header_stream())
    }

    /// All terms carried, header first.
    pub fn terms(&self) -> impl Iterator<Item = &Term> {
        self.header.iter().chain(self.body.iter())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Reject {
    BadCertificate,
    RevokedCertificate,
    Malformed,
    DecryptFailed,
    MissingSignedHash,
    SignedHashMismatch,
    StaleTimestamp,
    ReplayedNonce,
    UnknownDevice,
    WrongPhase,
    IdentityMismatch,
    AccessDenied,
    UnknownStream,
    ForeignTraffic,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProtoEvent {
    Rejected {
        at: DeviceId,
        tag: MessageTag,
        reason: Reject,
    },
    Ignored {
        at: DeviceId,
        tag: MessageTag,
    },
    Registered {
        ecu: DeviceId,
        key: crate::crypto::SymmetricKey,
        nonce: Nonce,
        timestamp: SimTime,
    },
    Confirmed {
        ecu: DeviceId,
        key: crate::crypto::SymmetricKey,
        nonce: Nonce,
        timestamp: SimTime,
    },
    RequestDenied {
        ecu: DeviceId,
        stream: StreamId,
        reason: Reject,
    },
    GrantsDeferred {
        stream: StreamId,
        waiting_for: Vec<DeviceId>,
    },
    GrantIssued {
        to: DeviceId,
        stream: StreamId,
    },
    GrantInstalled {
        ecu: DeviceId,
        stream: StreamId,
        key: crate::crypto::SymmetricKey,
    },
    DataAccepted {
        ecu: DeviceId,
        stream: StreamId,
    },
    KeyVoided {
        ecu: DeviceId,
        stream: StreamId,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub enum Effect {
    Send(ProtocolMessage),
    Event(ProtoEvent),
}

/// What a handler did: effects at offsets from the job start, and the total
/// compute time the job occupies.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Outcome {
    pub effects: Vec<(SimDuration, Effect)>,
    pub cost: SimDuration,
}

impl Outcome {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn sends(&self) -> impl Iterator<Item = &ProtocolMessage> {
        self.effects.iter().filter_map(|(_, e)| match e {
            Effect::Send(m) => Some(m),
            _ => None,
        })
    }

    pub fn events(&self) -> impl Iterator<Item = &ProtoEvent> {
        self.effects.iter().filter_map(|(_, e)| match e {
            Effect::Event(ev) => Some(ev),
            _ => None,
        })
    }

    pub fn rejected(&self) -> Option<Reject> {
        self.events().find_map(|e| match e {
            ProtoEvent::Rejected { reason, .. } | ProtoEvent::RequestDenied { reason, .. } => {
                Some(*reason)
            }
            _ => None,
        })
    }

    fn push(&mut self, at: SimDuration, effect: Effect) {
        self.effects.push((at, effect));
    }

    fn finish(mut self, meter: &Meter) -> Self {
        self.cost = meter.elapsed();
        self
    }
}

/// Handler context: crypto provider, key and nonce sources, and the two clocks
/// that matter to a job.
pub struct Env<'a> {
    pub crypto: &'a Crypto,
    pub keys: &'a mut KeyFactory,
    pub rng: &'a mut ChaCha8Rng,
    pub backend: Backend,
    /// When the message arrived; freshness is judged against this.
    pub arrival: SimTime,
    /// When the compute job starts; generated timestamps count from here.
    pub start: SimTime,
}

impl Env<'_> {
    pub fn clock(&self, meter: &Meter) -> SimTime {
        self.start + meter.elapsed()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LasanConfig {
    /// Accept a timestamp if it is at most this old on arrival.
    pub freshness_window: SimDuration,
    /// When false the registration message carries no signed hash and the
    /// security module does not ask for one. Only for the flaw regression.
    pub require_signed_hash: bool,
    /// Reject grants for streams the ECU was not configured with.
    pub strict_unknown_stream: bool,
}

impl Default for LasanConfig {
    fn default() -> Self {
        LasanConfig {
            freshness_window: SimDuration::from_secs(10),
            require_signed_hash: true,
            strict_unknown_stream: true,
        }
    }
}

/// Sliding cache of (sender, nonce, timestamp) triples seen within the freshness window.
#[derive(Clone, Debug, Default)]
pub struct NonceCache {
    seen: BTreeSet<(SimTime, DeviceId, Nonce)>,
}

impl NonceCache {
    /// Records the triple. Returns false if it was already present.
    pub fn insert(&mut self, from: DeviceId, nonce: Nonce, ts: SimTime) -> bool {
        self.seen.insert((ts, from, nonce))
    }

    pub fn contains(&self, from: DeviceId, nonce: Nonce, ts: SimTime) -> bool {
        self.seen.contains(&(ts, from, nonce))
    }

    /// Drops entries older than `now - window`; those timestamps fail the
    /// freshness check anyway.
    pub fn evict(&mut self, now: SimTime, window: SimDuration) {
        let cutoff = now.saturating_sub(window);
        self.seen = self.seen.split_off(&(cutoff, DeviceId(0), Nonce(0)));
    }

    pub fn len(&self) -> usize {
        self.seen.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seen.is_empty()
    }
}

pub(crate) fn fresh(ts: SimTime, arrival: SimTime, window: SimDuration) -> bool {
    ts <= arrival && arrival.since(ts) <= window
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn acl_is_total() {
        let mut acl = Acl::new();
        acl.grant(DeviceId(1), StreamId(1), Role::Send);
        acl.grant(DeviceId(2), StreamId(1), Role::Receive);
        assert!(acl.alpha(DeviceId(1), StreamId(1)));
        assert!(!acl.alpha(DeviceId(2), StreamId(1)));
        assert!(!acl.alpha(DeviceId(9), StreamId(9)));
        assert_eq!(acl.role(DeviceId(9), StreamId(9)), Role::None);
        assert_eq!(acl.receivers(StreamId(1)), BTreeSet::from([DeviceId(2)]));
    }

    #[test]
    fn stream_invariants() {
        let mut s = Stream {
            id: StreamId(1),
            sender: DeviceId(1),
            receivers: BTreeSet::from([DeviceId(2)]),
            period_ms: 20.0,
            payload_len: 8,
            deadline_ms: 80.0,
        };
        assert!(s.validate().is_ok());
        s.receivers.insert(DeviceId(1));
        assert_eq!(s.validate(), Err(StreamError::SenderReceives(StreamId(1))));
        s.receivers.clear();
        assert_eq!(s.validate(), Err(StreamError::NoReceivers(StreamId(1))));
    }

    #[test]
    fn nonce_cache_detects_duplicates_and_evicts() {
        let mut c = NonceCache::default();
        let t = SimTime::from_secs_f64(1.0);
        assert!(c.insert(DeviceId(1), Nonce(5), t));
        assert!(!c.insert(DeviceId(1), Nonce(5), t));
        assert!(c.insert(DeviceId(2), Nonce(5), t));
        c.evict(SimTime::from_secs_f64(20.0), SimDuration::from_secs(10));
        assert!(c.is_empty());
    }

    #[test]
    fn freshness_window() {
        let w = SimDuration::from_secs(10);
        let now = SimTime::from_secs_f64(20.0);
        assert!(fresh(SimTime::from_secs_f64(15.0), now, w));
        assert!(fresh(SimTime::from_secs_f64(10.0), now, w));
        assert!(!fresh(SimTime::from_secs_f64(9.0), now, w));
        assert!(!fresh(SimTime::from_secs_f64(21.0), now, w));
    }
}
