use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::LifecycleError;
use crate::arch::AclRow;
use crate::ids::{DeviceId, StreamId};
use crate::protocol::{Acl, CertSerial, Role};
use crate::time::SimTime;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OwnerState {
    Normal,
    Maintenance,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ManifestChange {
    Added,
    Removed,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub at: SimTime,
    pub change: ManifestChange,
    pub ecu: DeviceId,
    pub label: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstalledEcu {
    pub id: DeviceId,
    pub label: String,
    pub serial: CertSerial,
}

/// The vehicle's record of which ECUs belong to it and what they may do.
///
/// Stored as TOML:
///
/// ```toml
/// vehicle = "VIN-0001"
/// state = "normal"
///
/// [[ecus]]
/// id = 2
/// label = "ECU-000002"
/// serial = 1
///
/// [[acl]]
/// device = 2
/// stream = 0
/// role = "send"
///
/// [[audit]]
/// at = 0
/// change = "added"
/// ecu = 2
/// label = "ECU-000002"
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct VehicleManifest {
    pub vehicle: String,
    state: OwnerState,
    ecus: BTreeMap<DeviceId, InstalledEcu>,
    acl: Acl,
    audit: Vec<AuditEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    vehicle: String,
    state: OwnerState,
    #[serde(default)]
    ecus: Vec<InstalledEcu>,
    #[serde(default)]
    acl: Vec<AclRow>,
    #[serde(default)]
    audit: Vec<AuditEntry>,
}

impl VehicleManifest {
    /// A factory-fresh manifest. Initial installation is not an audited mutation.
    pub fn new(
        vehicle: impl Into<String>,
        ecus: impl IntoIterator<Item = InstalledEcu>,
        acl: Acl,
    ) -> Self {
        VehicleManifest {
            vehicle: vehicle.into(),
            state: OwnerState::Normal,
            ecus: ecus.into_iter().map(|e| (e.id, e)).collect(),
            acl,
            audit: Vec::new(),
        }
    }

    pub fn state(&self) -> OwnerState {
        self.state
    }

    /// Owner authorization toggles the maintenance state.
    pub fn set_state(&mut self, state: OwnerState) {
        self.state = state;
    }

    pub fn expected(&self) -> BTreeSet<DeviceId> {
        self.ecus.keys().copied().collect()
    }

    pub fn ecu(&self, id: DeviceId) -> Option<&InstalledEcu> {
        self.ecus.get(&id)
    }

    pub fn ecus(&self) -> impl Iterator<Item = &InstalledEcu> {
        self.ecus.values()
    }

    pub fn acl(&self) -> &Acl {
        &self.acl
    }

    pub fn audit(&self) -> &[AuditEntry] {
        &self.audit
    }

    fn require_maintenance(&self) -> Result<(), LifecycleError> {
        if self.state != OwnerState::Maintenance {
            return Err(LifecycleError::NotInMaintenance);
        }
        Ok(())
    }

    /// Removes an ECU together with its ACL rows, returning the rows it held.
    pub fn remove(
        &mut self,
        id: DeviceId,
        at: SimTime,
    ) -> Result<Vec<(StreamId, Role)>, LifecycleError> {
        self.require_maintenance()?;
        let ecu = self
            .ecus
            .remove(&id)
            .ok_or(LifecycleError::UnknownDevice(id))?;
        let rows: Vec<_> = self
            .acl
            .rows()
            .filter(|(d, _, _)| *d == id)
            .map(|(_, s, r)| (s, r))
            .collect();
        self.acl.remove_device(id);
        self.audit.push(AuditEntry {
            at,
            change: ManifestChange::Removed,
            ecu: id,
            label: ecu.label,
        });
        Ok(rows)
    }

    pub fn add(
        &mut self,
        ecu: InstalledEcu,
        rows: &[(StreamId, Role)],
        at: SimTime,
    ) -> Result<(), LifecycleError> {
        self.require_maintenance()?;
        if self.ecus.contains_key(&ecu.id) {
            return Err(LifecycleError::DuplicateId(ecu.label));
        }
        for (s, r) in rows {
            self.acl.grant(ecu.id, *s, *r);
        }
        self.audit.push(AuditEntry {
            at,
            change: ManifestChange::Added,
            ecu: ecu.id,
            label: ecu.label.clone(),
        });
        self.ecus.insert(ecu.id, ecu);
        Ok(())
    }

    pub fn to_toml_string(&self) -> Result<String, LifecycleError> {
        let f = ManifestFile {
            vehicle: self.vehicle.clone(),
            state: self.state,
            ecus: self.ecus.values().cloned().collect(),
            acl: self
                .acl
                .rows()
                .map(|(device, stream, role)| AclRow {
                    device,
                    stream,
                    role,
                })
                .collect(),
            audit: self.audit.clone(),
        };
        toml::to_string(&f).map_err(|e| LifecycleError::Persist(e.to_string()))
    }

    pub fn from_toml_str(s: &str) -> Result<Self, LifecycleError> {
        let f: ManifestFile =
            toml::from_str(s).map_err(|e| LifecycleError::Persist(e.to_string()))?;
        let mut acl = Acl::new();
        for r in f.acl {
            acl.grant(r.device, r.stream, r.role);
        }
        Ok(VehicleManifest {
            vehicle: f.vehicle,
            state: f.state,
            ecus: f.ecus.into_iter().map(|e| (e.id, e)).collect(),
            acl,
            audit: f.audit,
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

/// Published lists of installed ECU labels across all vehicles. A label that
/// shows up twice means two devices share one private key.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct InstalledRegistry {
    installed: BTreeMap<String, String>,
}

impl InstalledRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn vehicle_of(&self, label: &str) -> Option<&str> {
        self.installed.get(label).map(String::as_str)
    }

    pub fn publish(&mut self, label: &str, vehicle: &str) -> Result<(), LifecycleError> {
        if self.installed.contains_key(label) {
            return Err(LifecycleError::DuplicateId(label.to_string()));
        }
        self.installed
            .insert(label.to_string(), vehicle.to_string());
        Ok(())
    }

    pub fn withdraw(&mut self, label: &str) {
        self.installed.remove(label);
    }
}
