use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::ca::{CertificateAuthority, Crl};
use super::policy::{Authority, Method, ValidationPolicy};
use crate::crypto::Crypto;
use crate::ids::{CaId, DeviceKind};
use crate::protocol::{CertSerial, Certificate};
use crate::time::{SimDuration, SimTime};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Valid,
    Revoked,
    Unknown,
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum ValidationError {
    #[error("no validation rule for {verifier} checking {target}")]
    NoRule {
        verifier: DeviceKind,
        target: DeviceKind,
    },
    #[error("validation unavailable: a live check needs connectivity")]
    Unavailable,
    #[error("certificate signature does not verify under the responsible CA")]
    BadSignature,
}

/// The three certificate authorities behind a fleet.
#[derive(Clone, Debug)]
pub struct Authorities {
    pub security_modules: CertificateAuthority,
    pub ecus: CertificateAuthority,
    pub workshops: CertificateAuthority,
}

impl Authorities {
    pub fn by_id(&self, id: CaId) -> Option<&CertificateAuthority> {
        [&self.security_modules, &self.ecus, &self.workshops]
            .into_iter()
            .find(|c| c.id == id)
    }

    pub fn by_id_mut(&mut self, id: CaId) -> Option<&mut CertificateAuthority> {
        [
            &mut self.security_modules,
            &mut self.ecus,
            &mut self.workshops,
        ]
        .into_iter()
        .find(|c| c.id == id)
    }

    /// The CA that answers for `authority` about `cert`. The security module
    /// relays questions to whichever CA issued the certificate.
    pub fn resolve(
        &self,
        authority: Authority,
        cert: &Certificate,
    ) -> Option<&CertificateAuthority> {
        match authority {
            Authority::SecurityModuleCa => Some(&self.security_modules),
            Authority::EcuCa => Some(&self.ecus),
            Authority::WorkshopCa => Some(&self.workshops),
            Authority::SecurityModule => self.by_id(cert.issuer),
        }
    }
}

/// Validation state held by one device: cached CRLs and cached single-check verdicts.
#[derive(Clone, Debug, PartialEq)]
pub struct Validator {
    pub kind: DeviceKind,
    pub refresh_period: SimDuration,
    crls: BTreeMap<CaId, Crl>,
    verdicts: BTreeMap<(CaId, CertSerial), Verdict>,
    last_refresh: Option<SimTime>,
}

impl Validator {
    pub fn new(kind: DeviceKind) -> Self {
        Validator {
            kind,
            refresh_period: SimDuration::from_secs(24 * 3600),
            crls: BTreeMap::new(),
            verdicts: BTreeMap::new(),
            last_refresh: None,
        }
    }

    /// Replaces the cached CRL of `ca` with its current list, filtered to `relevant`.
    pub fn crl_sync(
        &mut self,
        ca: &CertificateAuthority,
        relevant: &BTreeSet<CertSerial>,
        now: SimTime,
    ) {
        self.crls.insert(ca.id, ca.filtered_crl(relevant, now));
    }

    pub fn crl(&self, ca: CaId) -> Option<&Crl> {
        self.crls.get(&ca)
    }

    pub fn revoked_serials(&self) -> BTreeSet<CertSerial> {
        self.crls
            .values()
            .flat_map(|c| c.revoked.iter().copied())
            .collect()
    }

    /// Serials whose cached single-check verdict is revoked.
    pub fn cached_revocations(&self) -> BTreeSet<CertSerial> {
        self.verdicts
            .iter()
            .filter(|(_, v)| **v == Verdict::Revoked)
            .map(|((_, s), _)| *s)
            .collect()
    }

    pub fn refresh_due(&self, now: SimTime) -> bool {
        self.last_refresh
            .is_none_or(|t| now.since(t) >= self.refresh_period)
    }

    /// Periodic refresh of cached single-check verdicts. Does nothing when not
    /// due or offline. Returns whether a refresh happened.
    pub fn tick(&mut self, cas: &Authorities, connected: bool, now: SimTime) -> bool {
        if !connected || !self.refresh_due(now) {
            return false;
        }
        for ((ca, serial), verdict) in self.verdicts.iter_mut() {
            if let Some(c) = cas.by_id(*ca) {
                *verdict = if c.is_revoked(*serial) {
                    Verdict::Revoked
                } else {
                    Verdict::Valid
                };
            }
        }
        self.last_refresh = Some(now);
        true
    }

    fn live(
        ca: &CertificateAuthority,
        cert: &Certificate,
        connected: bool,
    ) -> Result<Verdict, ValidationError> {
        if !connected {
            return Err(ValidationError::Unavailable);
        }
        Ok(if ca.is_revoked(cert.serial) {
            Verdict::Revoked
        } else {
            Verdict::Valid
        })
    }

    fn by_crl(&self, ca: CaId, cert: &Certificate) -> Verdict {
        match self.crls.get(&ca) {
            Some(crl) if crl.revoked.contains(&cert.serial) => Verdict::Revoked,
            Some(_) => Verdict::Valid,
            None => Verdict::Unknown,
        }
    }

    /// Checks `target` of kind `target_kind` with the method the policy assigns.
    #[allow(clippy::too_many_arguments)]
    pub fn validate(
        &mut self,
        target: &Certificate,
        target_kind: DeviceKind,
        policy: &ValidationPolicy,
        cas: &Authorities,
        crypto: &Crypto,
        connected: bool,
        now: SimTime,
    ) -> Result<Verdict, ValidationError> {
        let rule = policy
            .rule(self.kind, target_kind)
            .ok_or(ValidationError::NoRule {
                verifier: self.kind,
                target: target_kind,
            })?;
        let ca = cas
            .resolve(rule.authority, target)
            .ok_or(ValidationError::BadSignature)?;
        if target.issuer != ca.id || !ca.verifies(crypto, target) {
            return Err(ValidationError::BadSignature);
        }
        match rule.method {
            Method::Crl => Ok(self.by_crl(ca.id, target)),
            Method::SingleSync => Self::live(ca, target, connected),
            Method::SingleAsync => {
                let key = (ca.id, target.serial);
                if let Some(v) = self.verdicts.get(&key) {
                    return Ok(*v);
                }
                if !connected {
                    return Ok(Verdict::Unknown);
                }
                let v = Self::live(ca, target, connected)?;
                self.verdicts.insert(key, v);
                if self.last_refresh.is_none() {
                    self.last_refresh = Some(now);
                }
                Ok(v)
            }
            Method::CrlOrSingleSync => {
                let fresh = self
                    .crls
                    .get(&ca.id)
                    .is_some_and(|c| now.since(c.issued_at) <= self.refresh_period);
                if fresh {
                    Ok(self.by_crl(ca.id, target))
                } else {
                    Self::live(ca, target, connected)
                }
            }
        }
    }
}
