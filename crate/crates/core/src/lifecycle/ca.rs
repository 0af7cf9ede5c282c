use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::LifecycleError;
use crate::crypto::{Crypto, KeyFactory, KeyHandle, KeyPair};
use crate::ids::{CaId, DeviceId, DeviceKind};
use crate::protocol::{verify_certificate, CertSerial, Certificate, TrustAnchor};
use crate::time::SimTime;

/// A revocation list snapshot, possibly filtered down to one vehicle.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Crl {
    pub issuer: Option<CaId>,
    pub issued_at: SimTime,
    pub revoked: BTreeSet<CertSerial>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CertificateAuthority {
    pub id: CaId,
    pub name: String,
    pub keypair: KeyPair,
    issued: BTreeMap<CertSerial, Certificate>,
    /// Revoked serials with the time of revocation.
    crl: BTreeMap<CertSerial, SimTime>,
    next_serial: CertSerial,
}

impl CertificateAuthority {
    pub fn new(
        id: CaId,
        name: impl Into<String>,
        keys: &mut KeyFactory,
        bits: u32,
    ) -> Result<Self, LifecycleError> {
        let keypair = keys.keypair(DeviceId(u16::MAX - id.0), bits)?;
        Ok(CertificateAuthority {
            id,
            name: name.into(),
            keypair,
            issued: BTreeMap::new(),
            crl: BTreeMap::new(),
            next_serial: 1,
        })
    }

    pub fn anchor(&self) -> TrustAnchor {
        TrustAnchor {
            ca: self.id,
            public: self.keypair.public,
        }
    }

    pub fn issue(
        &mut self,
        crypto: &Crypto,
        subject: DeviceId,
        label: String,
        kind: DeviceKind,
        public_key: KeyHandle,
        attributes: BTreeMap<String, String>,
    ) -> Result<Certificate, LifecycleError> {
        let serial = self.next_serial;
        self.next_serial += 1;
        let cert = Certificate::issue(
            crypto,
            self.id,
            self.keypair.private,
            serial,
            subject,
            label,
            kind,
            public_key,
            attributes,
        )?
        .value;
        self.issued.insert(serial, cert.clone());
        Ok(cert)
    }

    pub fn issued(&self) -> impl Iterator<Item = &Certificate> {
        self.issued.values()
    }

    pub fn certificate(&self, serial: CertSerial) -> Option<&Certificate> {
        self.issued.get(&serial)
    }

    /// Adds `serial` to the revocation list. Revocation is permanent.
    pub fn revoke(&mut self, serial: CertSerial, at: SimTime) -> Result<(), LifecycleError> {
        if !self.issued.contains_key(&serial) {
            return Err(LifecycleError::UnknownCertificate(serial));
        }
        self.crl.entry(serial).or_insert(at);
        Ok(())
    }

    pub fn is_revoked(&self, serial: CertSerial) -> bool {
        self.crl.contains_key(&serial)
    }

    pub fn revocation_time(&self, serial: CertSerial) -> Option<SimTime> {
        self.crl.get(&serial).copied()
    }

    /// The CRL restricted to `relevant` serials, as handed to one vehicle.
    pub fn filtered_crl(&self, relevant: &BTreeSet<CertSerial>, now: SimTime) -> Crl {
        Crl {
            issuer: Some(self.id),
            issued_at: now,
            revoked: self
                .crl
                .keys()
                .filter(|s| relevant.contains(s))
                .copied()
                .collect(),
        }
    }

    pub fn full_crl(&self, now: SimTime) -> Crl {
        Crl {
            issuer: Some(self.id),
            issued_at: now,
            revoked: self.crl.keys().copied().collect(),
        }
    }

    /// Signature check only; revocation is the policy's business.
    pub fn verifies(&self, crypto: &Crypto, cert: &Certificate) -> bool {
        verify_certificate(crypto, cert, &[self.anchor()], crate::crypto::Backend::Sw)
            .map(|t| t.value)
            .unwrap_or(false)
    }

    pub fn to_toml_string(&self) -> Result<String, LifecycleError> {
        let file = CaFile {
            id: self.id,
            name: self.name.clone(),
            keypair: self.keypair,
            next_serial: self.next_serial,
            issued: self.issued.values().cloned().collect(),
            revoked: self
                .crl
                .iter()
                .map(|(serial, at)| Revocation {
                    serial: *serial,
                    at: *at,
                })
                .collect(),
        };
        toml::to_string(&file).map_err(|e| LifecycleError::Persist(e.to_string()))
    }

    pub fn from_toml_str(s: &str) -> Result<Self, LifecycleError> {
        let f: CaFile = toml::from_str(s).map_err(|e| LifecycleError::Persist(e.to_string()))?;
        let issued: BTreeMap<_, _> = f.issued.into_iter().map(|c| (c.serial, c)).collect();
        let crl: BTreeMap<_, _> = f.revoked.into_iter().map(|r| (r.serial, r.at)).collect();
        if crl.keys().any(|s| !issued.contains_key(s)) {
            return Err(LifecycleError::Persist(
                "CRL lists a certificate that was never issued".into(),
            ));
        }
        Ok(CertificateAuthority {
            id: f.id,
            name: f.name,
            keypair: f.keypair,
            issued,
            crl,
            next_serial: f.next_serial,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), LifecycleError> {
        std::fs::write(path, self.to_toml_string()?)
            .map_err(|e| LifecycleError::Persist(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, LifecycleError> {
        let s =
            std::fs::read_to_string(path).map_err(|e| LifecycleError::Persist(e.to_string()))?;
        Self::from_toml_str(&s)
    }
}

/// On-disk layout of a CA: issued certificates and the revocation list.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CaFile {
    id: CaId,
    name: String,
    keypair: KeyPair,
    next_serial: CertSerial,
    #[serde(default)]
    issued: Vec<Certificate>,
    #[serde(default)]
    revoked: Vec<Revocation>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Revocation {
    serial: CertSerial,
    at: SimTime,
}
