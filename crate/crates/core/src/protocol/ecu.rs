use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    fresh, verify_certificate, CertSerial, Certificate, Destination, Effect, Env, LasanConfig,
    MessageTag, NonceCache, Outcome, ProtoEvent, ProtocolMessage, Reject, TrustAnchor,
};
use crate::crypto::{CipherKind, CipherTerm, Digest, KeyPair, Meter, SymmetricKey, Term};
use crate::ids::{DeviceId, Nonce, StreamId};
use crate::time::SimTime;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EcuPhase {
    Idle,
    Advertised,
    Registered,
    Confirmed,
}

/// Registration values kept until the confirmation arrives.
#[derive(Clone, Copy, Debug)]
struct PendingRegistration {
    key: SymmetricKey,
    nonce: Nonce,
    timestamp: SimTime,
}

/// Protocol state of one ECU.
#[derive(Clone, Debug)]
pub struct EcuSession {
    pub id: DeviceId,
    pub keypair: KeyPair,
    pub cert: Certificate,
    pub trusted: Vec<TrustAnchor>,
    /// Certificates this ECU has been told are revoked.
    pub known_revoked: BTreeSet<CertSerial>,
    /// Streams this ECU sends.
    pub send_streams: BTreeSet<StreamId>,
    /// Streams this ECU receives.
    pub receive_streams: BTreeSet<StreamId>,
    pub config: LasanConfig,
    phase: EcuPhase,
    ecu_key: Option<SymmetricKey>,
    sm_cert: Option<Certificate>,
    pending: Option<PendingRegistration>,
    nonce_cache: NonceCache,
    last_auth_time: Option<SimTime>,
    stream_keys: BTreeMap<StreamId, SymmetricKey>,
    sent_data: BTreeSet<Digest>,
    data_counter: u64,
}

impl EcuSession {
    pub fn new(
        keypair: KeyPair,
        cert: Certificate,
        trusted: Vec<TrustAnchor>,
        config: LasanConfig,
    ) -> Self {
        EcuSession {
            id: cert.subject,
            keypair,
            cert,
            trusted,
            known_revoked: BTreeSet::new(),
            send_streams: BTreeSet::new(),
            receive_streams: BTreeSet::new(),
            config,
            phase: EcuPhase::Idle,
            ecu_key: None,
            sm_cert: None,
            pending: None,
            nonce_cache: NonceCache::default(),
            last_auth_time: None,
            stream_keys: BTreeMap::new(),
            sent_data: BTreeSet::new(),
            data_counter: 0,
        }
    }

    pub fn phase(&self) -> EcuPhase {
        self.phase
    }

    pub fn ecu_key(&self) -> Option<SymmetricKey> {
        self.ecu_key
    }

    pub fn sm_cert(&self) -> Option<&Certificate> {
        self.sm_cert.as_ref()
    }

    pub fn last_auth_time(&self) -> Option<SimTime> {
        self.last_auth_time
    }

    pub fn stream_key(&self, stream: StreamId) -> Option<SymmetricKey> {
        self.stream_keys.get(&stream).copied()
    }

    pub fn stream_keys(&self) -> &BTreeMap<StreamId, SymmetricKey> {
        &self.stream_keys
    }

    pub fn nonce_cache_len(&self) -> usize {
        self.nonce_cache.len()
    }

    /// Installs keys as if a previous session had completed. Used for warm starts.
    pub fn preinstall(
        &mut self,
        ecu_key: SymmetricKey,
        sm_cert: Certificate,
        stream_keys: BTreeMap<StreamId, SymmetricKey>,
    ) {
        self.phase = EcuPhase::Confirmed;
        self.ecu_key = Some(ecu_key);
        self.sm_cert = Some(sm_cert);
        self.stream_keys = stream_keys;
    }

    /// Drops all session state, as on power loss or before re-authentication.
    pub fn reset(&mut self) {
        self.phase = EcuPhase::Idle;
        self.ecu_key = None;
        self.sm_cert = None;
        self.pending = None;
        self.stream_keys.clear();
    }

    fn knows_stream(&self, stream: StreamId) -> bool {
        self.send_streams.contains(&stream) || self.receive_streams.contains(&stream)
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

    /// Validates the advertised certificate and, on success, registers right away.
    pub fn handle_advertisement(&mut self, msg: &ProtocolMessage, env: &mut Env) -> Outcome {
        let mut meter = Meter::new();
        let mut out = Outcome::none();
        let tag = MessageTag::Advertisement;
        let cert = match msg.body.as_slice() {
            [Term::Cert(c)] if msg.tag == tag => c.as_ref().clone(),
            _ => {
                self.reject(&mut out, &meter, tag, Reject::Malformed);
                return out.finish(&meter);
            }
        };
        let ok = match verify_certificate(env.crypto, &cert, &self.trusted, env.backend) {
            Ok(t) => meter.take(t),
            Err(_) => false,
        };
        if !ok {
            self.reject(&mut out, &meter, tag, Reject::BadCertificate);
            return out.finish(&meter);
        }
        if self.known_revoked.contains(&cert.serial) {
            self.reject(&mut out, &meter, tag, Reject::RevokedCertificate);
            return out.finish(&meter);
        }
        // A fresh advertisement restarts authentication from any phase.
        self.reset();
        self.sm_cert = Some(cert);
        self.phase = EcuPhase::Advertised;
        match self.build_registration_metered(env, &mut meter) {
            Some(m) => out.push(meter.elapsed(), Effect::Send(m)),
            None => self.reject(&mut out, &meter, tag, Reject::WrongPhase),
        }
        out.finish(&meter)
    }

    /// Builds m_r. Requires an accepted advertisement.
    pub fn build_registration(
        &mut self,
        env: &mut Env,
    ) -> Option<(ProtocolMessage, crate::time::SimDuration)> {
        let mut meter = Meter::new();
        let m = self.build_registration_metered(env, &mut meter)?;
        Some((m, meter.elapsed()))
    }

    fn build_registration_metered(
        &mut self,
        env: &mut Env,
        meter: &mut Meter,
    ) -> Option<ProtocolMessage> {
        if self.phase != EcuPhase::Advertised {
            return None;
        }
        let sm = self.sm_cert.as_ref()?;
        let sm_id = sm.subject;
        let sm_pub = sm.public_key;
        let key = env.keys.symmetric();
        let nonce = Nonce(env.rng.gen());
        let timestamp = env.clock(meter);
        let inner = vec![
            Term::Device(self.id),
            Term::Device(sm_id),
            Term::SymKey(key),
            Term::Nonce(nonce),
            Term::Time(timestamp),
        ];
        let enc = meter.take(
            env.crypto
                .asym_encrypt(inner.clone(), sm_pub, env.backend)
                .ok()?,
        );
        let mut body = vec![Term::Cipher(enc)];
        if self.config.require_signed_hash {
            let sig = meter.take(
                env.crypto
                    .sign(&inner, self.keypair.private, env.backend)
                    .ok()?,
            );
            body.push(Term::Cipher(sig));
        }
        body.push(Term::Cert(Box::new(self.cert.clone())));
        self.pending = Some(PendingRegistration {
            key,
            nonce,
            timestamp,
        });
        self.phase = EcuPhase::Registered;
        Some(ProtocolMessage::new(
            MessageTag::Registration,
            self.id,
            Destination::Device(sm_id),
            Vec::new(),
            body,
            env.crypto,
        ))
    }

    pub fn handle_confirmation(&mut self, msg: &ProtocolMessage, env: &mut Env) -> Outcome {
        let mut meter = Meter::new();
        let mut out = Outcome::none();
        let tag = MessageTag::Confirmation;
        if msg.header_device() != Some(self.id) {
            out.push(
                meter.elapsed(),
                Effect::Event(ProtoEvent::Ignored { at: self.id, tag }),
            );
            return out.finish(&meter);
        }
        let (Some(pending), EcuPhase::Registered) = (self.pending, self.phase) else {
            self.reject(&mut out, &meter, tag, Reject::WrongPhase);
            return out.finish(&meter);
        };
        let Some(Term::Cipher(c)) = msg.body.first() else {
            self.reject(&mut out, &meter, tag, Reject::Malformed);
            return out.finish(&meter);
        };
        let plain = match env.crypto.sym_decrypt(c, pending.key, env.backend) {
            Ok(t) => meter.take(t),
            Err(_) => {
                self.reject(&mut out, &meter, tag, Reject::Malformed);
                return out.finish(&meter);
            }
        };
        let Ok(plain) = plain else {
            self.reject(&mut out, &meter, tag, Reject::DecryptFailed);
            return out.finish(&meter);
        };
        let (e, n, ts) = match plain.as_slice() {
            [Term::Device(e), Term::Nonce(n), Term::Time(t)] => (*e, *n, *t),
            _ => {
                self.reject(&mut out, &meter, tag, Reject::Malformed);
                return out.finish(&meter);
            }
        };
        if e != self.id || n != pending.nonce {
            // A wrong echo means the exchange cannot be trusted; start over on the next advertisement.
            self.reset();
            self.reject(&mut out, &meter, tag, Reject::IdentityMismatch);
            return out.finish(&meter);
        }
        if !fresh(ts, env.arrival, self.config.freshness_window) || ts < pending.timestamp {
            self.reject(&mut out, &meter, tag, Reject::StaleTimestamp);
            return out.finish(&meter);
        }
        let sm = self.sm_cert.as_ref().map_or(DeviceId(0), |c| c.subject);
        self.nonce_cache
            .evict(env.arrival, self.config.freshness_window);
        if !self.nonce_cache.insert(sm, n, ts) {
            self.reject(&mut out, &meter, tag, Reject::ReplayedNonce);
            return out.finish(&meter);
        }
        self.phase = EcuPhase::Confirmed;
        self.ecu_key = Some(pending.key);
        self.pending = None;
        self.last_auth_time = Some(env.clock(&meter));
        out.push(
            meter.elapsed(),
            Effect::Event(ProtoEvent::Confirmed {
                ecu: self.id,
                key: pending.key,
                nonce: pending.nonce,
                timestamp: pending.timestamp,
            }),
        );
        out.finish(&meter)
    }

    /// Builds m_q for `stream`. Refused locally before confirmation.
    pub fn build_stream_request(&mut self, stream: StreamId, env: &mut Env) -> Option<Outcome> {
        if self.phase != EcuPhase::Confirmed {
            return None;
        }
        let key = self.ecu_key?;
        let mut meter = Meter::new();
        let sm = self.sm_cert.as_ref()?.subject;
        let inner = vec![
            Term::Device(self.id),
            Term::Stream(stream),
            Term::Nonce(Nonce(env.rng.gen())),
            Term::Time(env.clock(&meter)),
        ];
        let c = meter.take(env.crypto.sym_encrypt(inner, key, env.backend).ok()?);
        let msg = ProtocolMessage::new(
            MessageTag::StreamRequest,
            self.id,
            Destination::Device(sm),
            vec![Term::Device(self.id)],
            vec![Term::Cipher(c)],
            env.crypto,
        );
        let mut out = Outcome::none();
        out.push(meter.elapsed(), Effect::Send(msg));
        Some(out.finish(&meter))
    }

    pub fn handle_grant(&mut self, msg: &ProtocolMessage, env: &mut Env) -> Outcome {
        let mut meter = Meter::new();
        let mut out = Outcome::none();
        let tag = MessageTag::StreamGrant;
        let (EcuPhase::Confirmed, Some(key)) = (self.phase, self.ecu_key) else {
            self.reject(&mut out, &meter, tag, Reject::WrongPhase);
            return out.finish(&meter);
        };
        let Some(Term::Cipher(c)) = msg.body.first() else {
            self.reject(&mut out, &meter, tag, Reject::Malformed);
            return out.finish(&meter);
        };
        let plain = match env.crypto.sym_decrypt(c, key, env.backend) {
            Ok(t) => meter.take(t),
            Err(_) => Err(crate::crypto::CryptoError::DecryptFailed),
        };
        let Ok(plain) = plain else {
            self.reject(&mut out, &meter, tag, Reject::DecryptFailed);
            return out.finish(&meter);
        };
        let (target, stream, skey, n, ts) = match plain.as_slice() {
            [Term::Device(d), Term::Stream(s), Term::SymKey(k), Term::Nonce(n), Term::Time(t)] => {
                (*d, *s, *k, *n, *t)
            }
            _ => {
                self.reject(&mut out, &meter, tag, Reject::Malformed);
                return out.finish(&meter);
            }
        };
        if target != self.id {
            self.reject(&mut out, &meter, tag, Reject::IdentityMismatch);
            return out.finish(&meter);
        }
        if !fresh(ts, env.arrival, self.config.freshness_window) {
            self.reject(&mut out, &meter, tag, Reject::StaleTimestamp);
            return out.finish(&meter);
        }
        let sm = self.sm_cert.as_ref().map_or(DeviceId(0), |c| c.subject);
        self.nonce_cache
            .evict(env.arrival, self.config.freshness_window);
        if self.nonce_cache.contains(sm, n, ts) {
            self.reject(&mut out, &meter, tag, Reject::ReplayedNonce);
            return out.finish(&meter);
        }
        if self.config.strict_unknown_stream && !self.knows_stream(stream) {
            self.reject(&mut out, &meter, tag, Reject::UnknownStream);
            return out.finish(&meter);
        }
        self.nonce_cache.insert(sm, n, ts);
        self.stream_keys.insert(stream, skey);
        out.push(
            meter.elapsed(),
            Effect::Event(ProtoEvent::GrantInstalled {
                ecu: self.id,
                stream,
                key: skey,
            }),
        );
        out.finish(&meter)
    }

    /// Encrypts one data payload. Refused locally without a key or send right.
    pub fn send_data(
        &mut self,
        stream: StreamId,
        payload: Vec<u8>,
        env: &mut Env,
    ) -> Option<(ProtocolMessage, crate::time::SimDuration)> {
        if !self.send_streams.contains(&stream) {
            return None;
        }
        let key = *self.stream_keys.get(&stream)?;
        self.data_counter += 1;
        let plain = vec![Term::Bytes(payload)];
        let c = env.crypto.sym_encrypt(plain, key, env.backend).ok()?;
        let msg = data_message(self.id, stream, c.value, env);
        if let Some(Term::Cipher(ct)) = msg.body.first() {
            self.sent_data
                .insert(crate::crypto::digest_of(&[Term::Cipher(ct.clone())]));
        }
        Some((msg, c.cost))
    }

    /// Handles a data frame. Receivers decrypt; the sender watches its own
    /// stream for frames it did not produce and voids the key when it sees one.
    pub fn receive_data(&mut self, msg: &ProtocolMessage, env: &mut Env) -> Outcome {
        let mut meter = Meter::new();
        let mut out = Outcome::none();
        let tag = MessageTag::Data;
        let Some(stream) = msg.header_stream() else {
            self.reject(&mut out, &meter, tag, Reject::Malformed);
            return out.finish(&meter);
        };
        let Some(Term::Cipher(c)) = msg.body.first() else {
            self.reject(&mut out, &meter, tag, Reject::Malformed);
            return out.finish(&meter);
        };
        if self.send_streams.contains(&stream) {
            let d = crate::crypto::digest_of(&[Term::Cipher(c.clone())]);
            if !self.sent_data.contains(&d) && self.stream_keys.remove(&stream).is_some() {
                out.push(
                    meter.elapsed(),
                    Effect::Event(ProtoEvent::KeyVoided {
                        ecu: self.id,
                        stream,
                    }),
                );
                if let Some(req) = self.build_stream_request(stream, env) {
                    let base = meter.elapsed();
                    for (at, e) in req.effects {
                        out.push(base + at, e);
                    }
                    meter.add(req.cost);
                }
            }
            return out.finish(&meter);
        }
        let Some(key) = self.stream_keys.get(&stream).copied() else {
            out.push(
                meter.elapsed(),
                Effect::Event(ProtoEvent::Ignored { at: self.id, tag }),
            );
            return out.finish(&meter);
        };
        match env.crypto.sym_decrypt(c, key, env.backend) {
            Ok(t) => {
                if meter.take(t).is_ok() {
                    out.push(
                        meter.elapsed(),
                        Effect::Event(ProtoEvent::DataAccepted {
                            ecu: self.id,
                            stream,
                        }),
                    );
                } else {
                    self.reject(&mut out, &meter, tag, Reject::DecryptFailed);
                }
            }
            Err(_) => self.reject(&mut out, &meter, tag, Reject::Malformed),
        }
        out.finish(&meter)
    }
}

pub(crate) fn data_message(
    src: DeviceId,
    stream: StreamId,
    c: CipherTerm,
    env: &Env,
) -> ProtocolMessage {
    debug_assert_eq!(c.kind, CipherKind::SymEnc);
    ProtocolMessage::new(
        MessageTag::Data,
        src,
        Destination::Broadcast,
        vec![Term::Stream(stream)],
        vec![Term::Cipher(c)],
        env.crypto,
    )
}
