use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;

use super::{
    fresh, verify_certificate, Acl, CertSerial, Certificate, Destination, Effect, Env, LasanConfig,
    MessageTag, NonceCache, Outcome, ProtoEvent, ProtocolMessage, Reject, TrustAnchor,
};
use crate::crypto::{CipherTerm, KeyPair, Meter, SymmetricKey, Term};
use crate::ids::{DeviceId, Nonce, StreamId};
use crate::time::{SimDuration, SimTime};

/// What the security module remembers about an authenticated ECU.
#[derive(Clone, Debug, PartialEq)]
pub struct EcuRecord {
    pub key: SymmetricKey,
    pub serial: CertSerial,
    pub attributes: BTreeMap<String, String>,
    pub nonce: Nonce,
    pub timestamp: SimTime,
    /// When the confirmation left; grants wait until then.
    pub active_from: SimTime,
}

/// Grants held back until every target device has registered.
#[derive(Clone, Debug)]
struct PendingStream {
    stream: StreamId,
    sender: DeviceId,
    targets: Vec<DeviceId>,
}

#[derive(Clone, Debug)]
pub struct SecurityModule {
    pub id: DeviceId,
    pub keypair: KeyPair,
    pub cert: Certificate,
    /// CAs whose ECU certificates are accepted.
    pub ecu_authorities: Vec<TrustAnchor>,
    /// Revoked certificate serials, from the last CRL sync.
    pub crl: BTreeSet<CertSerial>,
    /// ECUs expected in this vehicle.
    pub manifest: BTreeSet<DeviceId>,
    pub acl: Acl,
    pub config: LasanConfig,
    registry: BTreeMap<DeviceId, EcuRecord>,
    stream_keys: BTreeMap<StreamId, SymmetricKey>,
    pending: Vec<PendingStream>,
    nonce_cache: NonceCache,
    audit: Vec<(SimTime, DeviceId, StreamId, Reject)>,
}

impl SecurityModule {
    pub fn new(
        keypair: KeyPair,
        cert: Certificate,
        ecu_authorities: Vec<TrustAnchor>,
        acl: Acl,
        config: LasanConfig,
    ) -> Self {
        SecurityModule {
            id: cert.subject,
            keypair,
            cert,
            ecu_authorities,
            crl: BTreeSet::new(),
            manifest: BTreeSet::new(),
            acl,
            config,
            registry: BTreeMap::new(),
            stream_keys: BTreeMap::new(),
            pending: Vec::new(),
            nonce_cache: NonceCache::default(),
            audit: Vec::new(),
        }
    }

    pub fn registry(&self) -> &BTreeMap<DeviceId, EcuRecord> {
        &self.registry
    }

    pub fn is_registered(&self, ecu: DeviceId) -> bool {
        self.registry.contains_key(&ecu)
    }

    pub fn stream_key(&self, stream: StreamId) -> Option<SymmetricKey> {
        self.stream_keys.get(&stream).copied()
    }

    /// Denied stream requests, for the audit log.
    pub fn audit_log(&self) -> &[(SimTime, DeviceId, StreamId, Reject)] {
        &self.audit
    }

    /// Registers an ECU key directly, as after a previous start-up.
    pub fn preinstall(&mut self, ecu: DeviceId, record: EcuRecord) {
        self.registry.insert(ecu, record);
    }

    pub fn forget(&mut self, ecu: DeviceId) {
        self.registry.remove(&ecu);
    }

    pub fn build_advertisement(&self, env: &Env) -> ProtocolMessage {
        ProtocolMessage::new(
            MessageTag::Advertisement,
            self.id,
            Destination::Broadcast,
            Vec::new(),
            vec![Term::Cert(Box::new(self.cert.clone()))],
            env.crypto,
        )
    }

    fn reject(&self, out: &mut Outcome, meter: &Meter, tag: MessageTag, reason: Reject) {
        out.push(
            meter.elapsed(),
            Effect::Event(ProtoEvent::Rejected {
                at: self.id,
                tag,
                reason,
            }),
        );
    }

    pub fn handle_registration(&mut self, msg: &ProtocolMessage, env: &mut Env) -> Outcome {
        let mut meter = Meter::new();
        let mut out = Outcome::none();
        let tag = MessageTag::Registration;
        let (enc, sig, cert): (&CipherTerm, Option<&CipherTerm>, &Certificate) =
            match msg.body.as_slice() {
                [Term::Cipher(e), Term::Cipher(s), Term::Cert(c)] => (e, Some(s), c),
                [Term::Cipher(e), Term::Cert(c)] => (e, None, c),
                _ => {
                    self.reject(&mut out, &meter, tag, Reject::Malformed);
                    return out.finish(&meter);
                }
            };
        let inner = match env
            .crypto
            .asym_decrypt(enc, self.keypair.private, env.backend)
        {
            Ok(t) => meter.take(t),
            Err(_) => Err(crate::crypto::CryptoError::DecryptFailed),
        };
        let Ok(inner) = inner else {
            self.reject(&mut out, &meter, tag, Reject::DecryptFailed);
            return out.finish(&meter);
        };
        let (e, y, key, nonce, ts) = match inner.as_slice() {
            [Term::Device(e), Term::Device(y), Term::SymKey(k), Term::Nonce(n), Term::Time(t)] => {
                (*e, *y, *k, *n, *t)
            }
            _ => {
                self.reject(&mut out, &meter, tag, Reject::Malformed);
                return out.finish(&meter);
            }
        };
        match sig {
            Some(sig) => {
                let ok = match env.crypto.verify(sig, &inner, cert.public_key, env.backend) {
                    Ok(t) => meter.take(t),
                    Err(_) => false,
                };
                if !ok {
                    self.reject(&mut out, &meter, tag, Reject::SignedHashMismatch);
                    return out.finish(&meter);
                }
            }
            None if self.config.require_signed_hash => {
                self.reject(&mut out, &meter, tag, Reject::MissingSignedHash);
                return out.finish(&meter);
            }
            None => {}
        }
        let cert_ok = match verify_certificate(env.crypto, cert, &self.ecu_authorities, env.backend)
        {
            Ok(t) => meter.take(t),
            Err(_) => false,
        };
        if !cert_ok {
            self.reject(&mut out, &meter, tag, Reject::BadCertificate);
            return out.finish(&meter);
        }
        if self.crl.contains(&cert.serial) {
            self.reject(&mut out, &meter, tag, Reject::RevokedCertificate);
            return out.finish(&meter);
        }
        if cert.subject != e || y != self.id {
            self.reject(&mut out, &meter, tag, Reject::IdentityMismatch);
            return out.finish(&meter);
        }
        if !self.manifest.contains(&e) {
            self.reject(&mut out, &meter, tag, Reject::UnknownDevice);
            return out.finish(&meter);
        }
        if !fresh(ts, env.arrival, self.config.freshness_window) {
            self.reject(&mut out, &meter, tag, Reject::StaleTimestamp);
            return out.finish(&meter);
        }
        self.nonce_cache
            .evict(env.arrival, self.config.freshness_window);
        if !self.nonce_cache.insert(e, nonce, ts) {
            self.reject(&mut out, &meter, tag, Reject::ReplayedNonce);
            return out.finish(&meter);
        }
        out.push(
            meter.elapsed(),
            Effect::Event(ProtoEvent::Registered {
                ecu: e,
                key,
                nonce,
                timestamp: ts,
            }),
        );
        let reply = vec![
            Term::Device(e),
            Term::Nonce(nonce),
            Term::Time(env.clock(&meter)),
        ];
        let Ok(c) = env.crypto.sym_encrypt(reply, key, env.backend) else {
            return out.finish(&meter);
        };
        let c = meter.take(c);
        let m_c = ProtocolMessage::new(
            MessageTag::Confirmation,
            self.id,
            Destination::Device(e),
            vec![Term::Device(e), Term::Device(self.id)],
            vec![Term::Cipher(c)],
            env.crypto,
        );
        out.push(meter.elapsed(), Effect::Send(m_c));
        self.registry.insert(
            e,
            EcuRecord {
                key,
                serial: cert.serial,
                attributes: cert.attributes.clone(),
                nonce,
                timestamp: ts,
                active_from: env.clock(&meter),
            },
        );
        self.release_pending(env, &mut meter, &mut out);
        out.finish(&meter)
    }

    pub fn handle_stream_request(&mut self, msg: &ProtocolMessage, env: &mut Env) -> Outcome {
        let mut meter = Meter::new();
        let mut out = Outcome::none();
        let tag = MessageTag::StreamRequest;
        let Some(claimed) = msg.header_device() else {
            self.reject(&mut out, &meter, tag, Reject::Malformed);
            return out.finish(&meter);
        };
        let Some(record) = self.registry.get(&claimed).cloned() else {
            self.reject(&mut out, &meter, tag, Reject::UnknownDevice);
            return out.finish(&meter);
        };
        let Some(Term::Cipher(c)) = msg.body.first() else {
            self.reject(&mut out, &meter, tag, Reject::Malformed);
            return out.finish(&meter);
        };
        let plain = match env.crypto.sym_decrypt(c, record.key, env.backend) {
            Ok(t) => meter.take(t),
            Err(_) => Err(crate::crypto::CryptoError::DecryptFailed),
        };
        let Ok(plain) = plain else {
            self.reject(&mut out, &meter, tag, Reject::DecryptFailed);
            return out.finish(&meter);
        };
        let (e, stream, nonce, ts) = match plain.as_slice() {
            [Term::Device(e), Term::Stream(s), Term::Nonce(n), Term::Time(t)] => (*e, *s, *n, *t),
            _ => {
                self.reject(&mut out, &meter, tag, Reject::Malformed);
                return out.finish(&meter);
            }
        };
        if e != claimed {
            self.reject(&mut out, &meter, tag, Reject::IdentityMismatch);
            return out.finish(&meter);
        }
        if !fresh(ts, env.arrival, self.config.freshness_window) {
            self.reject(&mut out, &meter, tag, Reject::StaleTimestamp);
            return out.finish(&meter);
        }
        self.nonce_cache
            .evict(env.arrival, self.config.freshness_window);
        if !self.nonce_cache.insert(e, nonce, ts) {
            self.reject(&mut out, &meter, tag, Reject::ReplayedNonce);
            return out.finish(&meter);
        }
        let deny = if !self.acl.alpha(e, stream) {
            Some(Reject::AccessDenied)
        } else if self.crl.contains(&record.serial) {
            Some(Reject::RevokedCertificate)
        } else {
            None
        };
        if let Some(reason) = deny {
            self.audit.push((env.arrival, e, stream, reason));
            out.push(
                meter.elapsed(),
                Effect::Event(ProtoEvent::RequestDenied {
                    ecu: e,
                    stream,
                    reason,
                }),
            );
            return out.finish(&meter);
        }
        // Receivers first, the requesting sender last. Revoked receivers get nothing.
        let mut targets: Vec<DeviceId> = self
            .acl
            .receivers(stream)
            .into_iter()
            .filter(|r| {
                self.registry
                    .get(r)
                    .is_none_or(|rec| !self.crl.contains(&rec.serial))
            })
            .collect();
        targets.push(e);
        self.stream_keys.remove(&stream);
        self.pending.retain(|p| p.stream != stream);
        self.pending.push(PendingStream {
            stream,
            sender: e,
            targets,
        });
        let now = env.clock(&meter);
        let waiting: Vec<DeviceId> = self.pending.last().map_or(Vec::new(), |p| {
            p.targets
                .iter()
                .copied()
                .filter(|d| !self.is_active(*d, now))
                .collect()
        });
        if !waiting.is_empty() {
            out.push(
                meter.elapsed(),
                Effect::Event(ProtoEvent::GrantsDeferred {
                    stream,
                    waiting_for: waiting,
                }),
            );
        }
        self.release_pending(env, &mut meter, &mut out);
        out.finish(&meter)
    }

    /// Whether `ecu` has a registration whose confirmation went out by `at`.
    pub fn is_active(&self, ecu: DeviceId, at: SimTime) -> bool {
        self.registry.get(&ecu).is_some_and(|r| r.active_from <= at)
    }

    /// When a registration in progress takes effect.
    pub fn activation_time(&self, ecu: DeviceId) -> Option<SimTime> {
        self.registry.get(&ecu).map(|r| r.active_from)
    }

    /// Re-checks deferred streams, for instance once a registration that was
    /// still in progress has taken effect.
    pub fn release_due(&mut self, env: &mut Env) -> Outcome {
        let mut meter = Meter::new();
        let mut out = Outcome::none();
        self.release_pending(env, &mut meter, &mut out);
        out.finish(&meter)
    }

    /// Issues grants for every pending stream whose targets are all registered.
    fn release_pending(&mut self, env: &mut Env, meter: &mut Meter, out: &mut Outcome) {
        let now = env.clock(meter);
        let (ready, waiting): (Vec<_>, Vec<_>) = std::mem::take(&mut self.pending)
            .into_iter()
            .partition(|p| p.targets.iter().all(|d| self.is_active(*d, now)));
        self.pending = waiting;
        for p in ready {
            debug_assert_eq!(p.targets.last(), Some(&p.sender));
            let skey = env.keys.symmetric();
            self.stream_keys.insert(p.stream, skey);
            let mut used = BTreeSet::new();
            for target in p.targets {
                let Some(rec) = self.registry.get(&target) else {
                    continue;
                };
                let mut n = Nonce(env.rng.gen());
                while !used.insert(n) {
                    n = Nonce(env.rng.gen());
                }
                let body = vec![
                    Term::Device(target),
                    Term::Stream(p.stream),
                    Term::SymKey(skey),
                    Term::Nonce(n),
                    Term::Time(env.clock(meter)),
                ];
                let Ok(c) = env.crypto.sym_encrypt(body, rec.key, env.backend) else {
                    continue;
                };
                let c = meter.take(c);
                let m_g = ProtocolMessage::new(
                    MessageTag::StreamGrant,
                    self.id,
                    Destination::Device(target),
                    Vec::new(),
                    vec![Term::Cipher(c)],
                    env.crypto,
                );
                out.push(meter.elapsed(), Effect::Send(m_g));
                out.push(
                    meter.elapsed(),
                    Effect::Event(ProtoEvent::GrantIssued {
                        to: target,
                        stream: p.stream,
                    }),
                );
            }
        }
    }

    /// Number of streams waiting on unregistered devices.
    pub fn pending_streams(&self) -> usize {
        self.pending.len()
    }

    pub fn freshness_window(&self) -> SimDuration {
        self.config.freshness_window
    }
}
