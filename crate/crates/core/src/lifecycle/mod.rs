//! Certificate authorities, the validation policy, and the vehicle life cycle:
//! system setup, ECU exchange in a workshop, and firmware updates.

mod ca;
mod manifest;
mod policy;
mod validation;

use std::collections::{BTreeMap, BTreeSet};

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use ca::{CertificateAuthority, Crl};
pub use manifest::{
    AuditEntry, InstalledEcu, InstalledRegistry, ManifestChange, OwnerState, VehicleManifest,
};
pub use policy::{Authority, Method, Rule, ValidationPolicy};
pub use validation::{Authorities, ValidationError, Validator, Verdict};

use crate::arch::Architecture;
use crate::crypto::{Backend, CipherTerm, Crypto, CryptoError, KeyFactory, KeyPair, Term};
use crate::ids::{CaId, DeviceId, DeviceKind, StreamId};
use crate::protocol::{
    Acl, Certificate, EcuPhase, EcuSession, Env, LasanConfig, MessageTag, Outcome, ProtoEvent,
    ProtocolMessage, Reject, Role, SecurityModule,
};
use crate::time::SimTime;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LifecycleError {
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error(transparent)]
    Validation(#[from] ValidationError),
    #[error("vehicle is not in maintenance state")]
    NotInMaintenance,
    #[error("device label {0} is already installed")]
    DuplicateId(String),
    #[error("printed label {printed} does not match certificate label {digital}")]
    LabelMismatch { printed: String, digital: String },
    #[error("unknown device {0}")]
    UnknownDevice(DeviceId),
    #[error("unknown certificate serial {0}")]
    UnknownCertificate(u32),
    #[error("{who} certificate check returned {verdict:?}")]
    NotValid { who: &'static str, verdict: Verdict },
    #[error("authentication failed: {0:?}")]
    AuthFailed(Reject),
    #[error("persistence: {0}")]
    Persist(String),
    #[error("architecture: {0}")]
    Arch(String),
}

/// Output of provisioning: identity, keys, certificate and, for security
/// modules, the signed ACL.
#[derive(Clone, Debug, PartialEq)]
pub struct ProvisionedDevice {
    pub id: DeviceId,
    pub label: String,
    pub kind: DeviceKind,
    pub keypair: KeyPair,
    pub cert: Certificate,
    pub acl: Option<Acl>,
}

/// The fleet-side infrastructure: CAs and the installed-label registry.
#[derive(Clone, Debug)]
pub struct Pki {
    pub cas: Authorities,
    pub registry: InstalledRegistry,
    pub policy: ValidationPolicy,
    next_label: u32,
    next_id: u16,
}

impl Pki {
    pub fn new(crypto: &Crypto, keys: &mut KeyFactory) -> Result<Self, LifecycleError> {
        let bits = crypto.ledger().rsa_key_bits;
        let cas = Authorities {
            security_modules: CertificateAuthority::new(CaId(1), "security-module-ca", keys, bits)?,
            ecus: CertificateAuthority::new(CaId(2), "ecu-ca", keys, bits)?,
            workshops: CertificateAuthority::new(CaId(3), "workshop-ca", keys, bits)?,
        };
        Ok(Pki {
            cas,
            registry: InstalledRegistry::new(),
            policy: ValidationPolicy::standard(),
            next_label: 1,
            next_id: 0x400,
        })
    }

    fn ca_for(&mut self, kind: DeviceKind) -> &mut CertificateAuthority {
        match kind {
            DeviceKind::Ecu => &mut self.cas.ecus,
            DeviceKind::SecurityModule => &mut self.cas.security_modules,
            DeviceKind::Workshop => &mut self.cas.workshops,
        }
    }

    /// Issues a fresh key pair, a unique printed label and a certificate.
    /// Security modules also receive `acl`.
    pub fn provision(
        &mut self,
        kind: DeviceKind,
        id: Option<DeviceId>,
        crypto: &Crypto,
        keys: &mut KeyFactory,
        acl: Option<&Acl>,
    ) -> Result<ProvisionedDevice, LifecycleError> {
        let id = id.unwrap_or_else(|| {
            self.next_id += 1;
            DeviceId(self.next_id)
        });
        let prefix = match kind {
            DeviceKind::Ecu => "ECU",
            DeviceKind::SecurityModule => "SM",
            DeviceKind::Workshop => "WS",
        };
        let label = format!("{prefix}-{:06}", self.next_label);
        self.next_label += 1;
        let keypair = keys.keypair(id, crypto.ledger().rsa_key_bits)?;
        let attributes = BTreeMap::from([
            ("manufacturer".to_string(), "oem".to_string()),
            ("kind".to_string(), kind.to_string()),
        ]);
        let cert =
            self.ca_for(kind)
                .issue(crypto, id, label.clone(), kind, keypair.public, attributes)?;
        let acl = (kind == DeviceKind::SecurityModule).then(|| acl.cloned().unwrap_or_default());
        Ok(ProvisionedDevice {
            id,
            label,
            kind,
            keypair,
            cert,
            acl,
        })
    }

    pub fn provision_workshop(
        &mut self,
        crypto: &Crypto,
        keys: &mut KeyFactory,
    ) -> Result<Workshop, LifecycleError> {
        let p = self.provision(DeviceKind::Workshop, None, crypto, keys, None)?;
        Ok(Workshop {
            id: p.id,
            label: p.label,
            keypair: p.keypair,
            cert: p.cert,
            validator: Validator::new(DeviceKind::Workshop),
        })
    }

    pub fn revoke(&mut self, cert: &Certificate, at: SimTime) -> Result<(), LifecycleError> {
        let ca = self
            .cas
            .by_id_mut(cert.issuer)
            .ok_or(LifecycleError::UnknownCertificate(cert.serial))?;
        ca.revoke(cert.serial, at)
    }

    /// Provisions every device of `arch` and assembles the vehicle.
    pub fn build_vehicle(
        &mut self,
        name: &str,
        arch: &Architecture,
        crypto: &Crypto,
        keys: &mut KeyFactory,
        config: LasanConfig,
    ) -> Result<Vehicle, LifecycleError> {
        arch.validate()
            .map_err(|e| LifecycleError::Arch(e.to_string()))?;
        let acl = arch.acl();
        let sm_dev = self.provision(
            DeviceKind::SecurityModule,
            Some(arch.security_module.id),
            crypto,
            keys,
            Some(&acl),
        )?;
        let mut sm = SecurityModule::new(
            sm_dev.keypair,
            sm_dev.cert.clone(),
            vec![self.cas.ecus.anchor()],
            sm_dev.acl.clone().unwrap_or_default(),
            config,
        );
        let mut ecus = BTreeMap::new();
        let mut installed = Vec::new();
        for spec in &arch.ecus {
            let dev = self.provision(DeviceKind::Ecu, Some(spec.id), crypto, keys, None)?;
            self.registry.publish(&dev.label, name)?;
            installed.push(InstalledEcu {
                id: dev.id,
                label: dev.label.clone(),
                serial: dev.cert.serial,
            });
            ecus.insert(dev.id, self.ecu_session(&dev, &acl, config));
        }
        let manifest = VehicleManifest::new(name, installed, acl);
        sm.manifest = manifest.expected();
        let ecu_validators = ecus
            .keys()
            .map(|id| (*id, Validator::new(DeviceKind::Ecu)))
            .collect();
        Ok(Vehicle {
            sm,
            sm_validator: Validator::new(DeviceKind::SecurityModule),
            ecus,
            ecu_validators,
            manifest,
            firmware: BTreeMap::new(),
            connected: true,
        })
    }

    fn ecu_session(&self, dev: &ProvisionedDevice, acl: &Acl, config: LasanConfig) -> EcuSession {
        let mut s = EcuSession::new(
            dev.keypair,
            dev.cert.clone(),
            vec![self.cas.security_modules.anchor()],
            config,
        );
        for stream in acl.streams_of(dev.id) {
            match acl.role(dev.id, stream) {
                Role::Send => {
                    s.send_streams.insert(stream);
                }
                Role::Receive => {
                    s.receive_streams.insert(stream);
                }
                Role::None => {}
            }
        }
        s
    }
}

/// A service workshop's identity and its validation cache.
#[derive(Clone, Debug)]
pub struct Workshop {
    pub id: DeviceId,
    pub label: String,
    pub keypair: KeyPair,
    pub cert: Certificate,
    pub validator: Validator,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FirmwareState {
    pub version: u32,
    /// Images that reached the ECU, installed or not.
    pub received: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FirmwareImage {
    pub target: DeviceId,
    pub version: u32,
    pub content: Vec<u8>,
}

impl FirmwareImage {
    pub fn terms(&self) -> Vec<Term> {
        vec![
            Term::Device(self.target),
            Term::Bytes(self.version.to_be_bytes().to_vec()),
            Term::Bytes(self.content.clone()),
        ]
    }

    pub fn sign(&self, crypto: &Crypto, signer: &KeyPair) -> Result<CipherTerm, CryptoError> {
        Ok(crypto
            .sign(&self.terms(), signer.private, Backend::Sw)?
            .value)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum FirmwareOutcome {
    Installed { version: u32, at: SimTime },
    Rejected(LifecycleError),
}

/// Randomness, keys and crypto for running protocol steps directly, without a bus.
pub struct Direct<'a> {
    pub crypto: &'a Crypto,
    pub keys: &'a mut KeyFactory,
    pub rng: &'a mut ChaCha8Rng,
    pub backend: Backend,
}

impl Direct<'_> {
    fn env(&mut self, at: SimTime) -> Env<'_> {
        Env {
            crypto: self.crypto,
            keys: &mut *self.keys,
            rng: &mut *self.rng,
            backend: self.backend,
            arrival: at,
            start: at,
        }
    }
}

fn sends(o: &Outcome) -> Vec<ProtocolMessage> {
    o.sends().cloned().collect()
}

fn end(now: SimTime, o: &Outcome) -> SimTime {
    now + o.cost
}

/// A vehicle: its security module, ECUs, manifest and validation caches.
#[derive(Clone, Debug)]
pub struct Vehicle {
    pub sm: SecurityModule,
    pub sm_validator: Validator,
    pub ecus: BTreeMap<DeviceId, EcuSession>,
    pub ecu_validators: BTreeMap<DeviceId, Validator>,
    pub manifest: VehicleManifest,
    pub firmware: BTreeMap<DeviceId, FirmwareState>,
    /// Whether the vehicle can currently reach the CAs.
    pub connected: bool,
}

impl Vehicle {
    /// Pulls the CA's current CRL for this vehicle's ECUs into the security module.
    pub fn crl_sync(&mut self, pki: &Pki, now: SimTime) {
        let relevant: BTreeSet<_> = self.manifest.ecus().map(|e| e.serial).collect();
        self.sm_validator.crl_sync(&pki.cas.ecus, &relevant, now);
        self.sm.crl = self.sm_validator.revoked_serials();
    }

    /// Periodic refresh of every cached single-check verdict.
    pub fn tick(&mut self, pki: &Pki, now: SimTime) {
        self.sm_validator.tick(&pki.cas, self.connected, now);
        for (id, v) in self.ecu_validators.iter_mut() {
            if v.tick(&pki.cas, self.connected, now) {
                if let Some(e) = self.ecus.get_mut(id) {
                    e.known_revoked.extend(v.cached_revocations());
                }
            }
        }
    }

    /// Full ECU authentication of `ecu`, message by message, without bus
    /// delays. The ECU first re-checks the security module certificate under
    /// its policy row. Returns the completion time.
    pub fn authenticate(
        &mut self,
        ecu: DeviceId,
        pki: &Pki,
        d: &mut Direct,
        now: SimTime,
    ) -> Result<SimTime, LifecycleError> {
        let connected = self.connected;
        let validator = self
            .ecu_validators
            .entry(ecu)
            .or_insert_with(|| Validator::new(DeviceKind::Ecu));
        let verdict = validator.validate(
            &self.sm.cert,
            DeviceKind::SecurityModule,
            &pki.policy,
            &pki.cas,
            d.crypto,
            connected,
            now,
        )?;
        let session = self
            .ecus
            .get_mut(&ecu)
            .ok_or(LifecycleError::UnknownDevice(ecu))?;
        if verdict == Verdict::Revoked {
            session.known_revoked.insert(self.sm.cert.serial);
        }
        let adv = self.sm.build_advertisement(&d.env(now));
        let o = session.handle_advertisement(&adv, &mut d.env(now));
        if let Some(r) = o.rejected() {
            return Err(LifecycleError::AuthFailed(r));
        }
        let mut t = end(now, &o);
        let m_r = sends(&o)
            .pop()
            .ok_or(LifecycleError::AuthFailed(Reject::WrongPhase))?;
        let o = self.sm.handle_registration(&m_r, &mut d.env(t));
        if let Some(r) = o.rejected() {
            return Err(LifecycleError::AuthFailed(r));
        }
        t = end(t, &o);
        let grants: Vec<_> = sends(&o);
        let session = self
            .ecus
            .get_mut(&ecu)
            .ok_or(LifecycleError::UnknownDevice(ecu))?;
        let mut other = Vec::new();
        for m in grants {
            if m.tag == MessageTag::Confirmation {
                let o = session.handle_confirmation(&m, &mut d.env(t));
                if let Some(r) = o.rejected() {
                    return Err(LifecycleError::AuthFailed(r));
                }
                t = end(t, &o);
            } else {
                other.push(m);
            }
        }
        // Grants released by this registration go to their targets.
        t = self.deliver_grants(other, d, t);
        Ok(t)
    }

    fn deliver_grants(
        &mut self,
        msgs: Vec<ProtocolMessage>,
        d: &mut Direct,
        mut t: SimTime,
    ) -> SimTime {
        for m in msgs {
            if let crate::protocol::Destination::Device(target) = m.dest {
                if let Some(e) = self.ecus.get_mut(&target) {
                    let o = e.handle_grant(&m, &mut d.env(t));
                    t = end(t, &o);
                }
            }
        }
        t
    }

    /// Requests `stream` from `ecu` and delivers the resulting grants.
    /// Returns the devices that installed the key.
    pub fn request_stream(
        &mut self,
        ecu: DeviceId,
        stream: StreamId,
        d: &mut Direct,
        now: SimTime,
    ) -> Vec<DeviceId> {
        let Some(session) = self.ecus.get_mut(&ecu) else {
            return Vec::new();
        };
        let Some(o) = session.build_stream_request(stream, &mut d.env(now)) else {
            return Vec::new();
        };
        let t = end(now, &o);
        let Some(m_q) = sends(&o).pop() else {
            return Vec::new();
        };
        let o = self.sm.handle_stream_request(&m_q, &mut d.env(t));
        let mut t = end(t, &o);
        let mut installed = Vec::new();
        for m in sends(&o) {
            if let crate::protocol::Destination::Device(target) = m.dest {
                if let Some(e) = self.ecus.get_mut(&target) {
                    let g = e.handle_grant(&m, &mut d.env(t));
                    t = end(t, &g);
                    if g.events()
                        .any(|ev| matches!(ev, ProtoEvent::GrantInstalled { .. }))
                    {
                        installed.push(target);
                    }
                }
            }
        }
        installed
    }

    /// Replaces `old` with `new` on behalf of `workshop`.
    #[allow(clippy::too_many_arguments)]
    pub fn exchange_ecu(
        &mut self,
        pki: &mut Pki,
        workshop: &mut Workshop,
        old: DeviceId,
        new: &ProvisionedDevice,
        printed_label: &str,
        crypto: &Crypto,
        now: SimTime,
    ) -> Result<(), LifecycleError> {
        if self.manifest.state() != OwnerState::Maintenance {
            return Err(LifecycleError::NotInMaintenance);
        }
        let connected = self.connected;
        let v = self.sm_validator.validate(
            &workshop.cert,
            DeviceKind::Workshop,
            &pki.policy,
            &pki.cas,
            crypto,
            connected,
            now,
        )?;
        if v != Verdict::Valid {
            return Err(LifecycleError::NotValid {
                who: "workshop",
                verdict: v,
            });
        }
        let v = workshop.validator.validate(
            &self.sm.cert,
            DeviceKind::SecurityModule,
            &pki.policy,
            &pki.cas,
            crypto,
            connected,
            now,
        )?;
        if v != Verdict::Valid {
            return Err(LifecycleError::NotValid {
                who: "security module",
                verdict: v,
            });
        }
        let v = workshop.validator.validate(
            &new.cert,
            DeviceKind::Ecu,
            &pki.policy,
            &pki.cas,
            crypto,
            connected,
            now,
        )?;
        if v != Verdict::Valid {
            return Err(LifecycleError::NotValid {
                who: "new ECU",
                verdict: v,
            });
        }
        if printed_label != new.cert.label {
            return Err(LifecycleError::LabelMismatch {
                printed: printed_label.to_string(),
                digital: new.cert.label.clone(),
            });
        }
        if pki.registry.vehicle_of(&new.label).is_some() {
            return Err(LifecycleError::DuplicateId(new.label.clone()));
        }
        let old_label = self
            .manifest
            .ecu(old)
            .ok_or(LifecycleError::UnknownDevice(old))?
            .label
            .clone();
        let rows = self.manifest.remove(old, now)?;
        self.sm.forget(old);
        self.sm.acl.remove_device(old);
        self.sm.manifest.remove(&old);
        self.ecus.remove(&old);
        self.ecu_validators.remove(&old);
        pki.registry.withdraw(&old_label);

        self.manifest.add(
            InstalledEcu {
                id: new.id,
                label: new.label.clone(),
                serial: new.cert.serial,
            },
            &rows,
            now,
        )?;
        pki.registry.publish(&new.label, &self.manifest.vehicle)?;
        for (s, r) in &rows {
            self.sm.acl.grant(new.id, *s, *r);
        }
        self.sm.manifest.insert(new.id);
        let session = pki.ecu_session(new, &self.sm.acl, self.sm.config);
        self.ecus.insert(new.id, session);
        self.ecu_validators
            .insert(new.id, Validator::new(DeviceKind::Ecu));
        Ok(())
    }

    /// Runs a firmware update for `image.target` through the security module.
    #[allow(clippy::too_many_arguments)]
    pub fn firmware_update(
        &mut self,
        pki: &Pki,
        source: &Workshop,
        image: &FirmwareImage,
        signature: &CipherTerm,
        d: &mut Direct,
        now: SimTime,
    ) -> FirmwareOutcome {
        let connected = self.connected;
        match self.sm_validator.validate(
            &source.cert,
            DeviceKind::Workshop,
            &pki.policy,
            &pki.cas,
            d.crypto,
            connected,
            now,
        ) {
            Ok(Verdict::Valid) => {}
            Ok(v) => {
                return FirmwareOutcome::Rejected(LifecycleError::NotValid {
                    who: "update source",
                    verdict: v,
                })
            }
            Err(e) => return FirmwareOutcome::Rejected(e.into()),
        }
        let ok = d
            .crypto
            .verify(signature, &image.terms(), source.cert.public_key, d.backend)
            .map(|t| t.value)
            .unwrap_or(false);
        if !ok {
            return FirmwareOutcome::Rejected(LifecycleError::AuthFailed(
                Reject::SignedHashMismatch,
            ));
        }
        let Some(ecu) = self.ecus.get_mut(&image.target) else {
            return FirmwareOutcome::Rejected(LifecycleError::UnknownDevice(image.target));
        };
        self.firmware.entry(image.target).or_default().received += 1;
        // Reprogramming restarts the ECU, which must authenticate again.
        ecu.reset();
        match self.authenticate(image.target, pki, d, now) {
            Ok(t) => {
                self.firmware.entry(image.target).or_default().version = image.version;
                FirmwareOutcome::Installed {
                    version: image.version,
                    at: t,
                }
            }
            Err(e) => FirmwareOutcome::Rejected(e),
        }
    }

    pub fn is_confirmed(&self, ecu: DeviceId) -> bool {
        self.ecus
            .get(&ecu)
            .is_some_and(|e| e.phase() == EcuPhase::Confirmed)
    }
}
