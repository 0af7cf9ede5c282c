//! Vehicle architecture description: buses, nodes, streams and access rules.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::{DeviceId, StreamId};
use crate::netsim::can::BusTiming;
use crate::protocol::{Acl, Role, Stream, StreamError};

#[derive(Debug, Error)]
pub enum ArchError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{0}")]
    Parse(String),
    #[error("invalid architecture: {0}")]
    Invalid(String),
    #[error(transparent)]
    Stream(#[from] StreamError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub id: DeviceId,
    #[serde(default)]
    pub bus: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GatewaySpec {
    pub id: DeviceId,
    #[serde(default)]
    pub latency_s: f64,
}

/// One row of an explicit access control list.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AclRow {
    pub device: DeviceId,
    pub stream: StreamId,
    pub role: Role,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    #[serde(default = "one")]
    pub buses: usize,
    #[serde(default)]
    pub bus_timing: BusTiming,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gateway: Option<GatewaySpec>,
    pub security_module: NodeSpec,
    pub ecus: Vec<NodeSpec>,
    #[serde(default)]
    pub streams: Vec<Stream>,
    /// Explicit ACL rows. When empty the ACL follows the stream definitions.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub acl: Vec<AclRow>,
}

fn one() -> usize {
    1
}

impl Architecture {
    pub fn from_toml_str(s: &str) -> Result<Self, ArchError> {
        let a: Architecture = toml::from_str(s).map_err(|e| ArchError::Parse(e.to_string()))?;
        a.validate()?;
        Ok(a)
    }

    pub fn load(path: &Path) -> Result<Self, ArchError> {
        let s = std::fs::read_to_string(path).map_err(|source| ArchError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&s).map_err(|e| match e {
            ArchError::Parse(m) => ArchError::Parse(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("architecture serializes")
    }

    pub fn ecu_ids(&self) -> Vec<DeviceId> {
        self.ecus.iter().map(|e| e.id).collect()
    }

    pub fn acl(&self) -> Acl {
        if self.acl.is_empty() {
            return Acl::from_streams(&self.streams);
        }
        let mut acl = Acl::new();
        for r in &self.acl {
            acl.grant(r.device, r.stream, r.role);
        }
        acl
    }

    pub fn stream(&self, id: StreamId) -> Option<&Stream> {
        self.streams.iter().find(|s| s.id == id)
    }

    pub fn bus_of(&self, id: DeviceId) -> Option<usize> {
        if self.security_module.id == id {
            return Some(self.security_module.bus);
        }
        self.ecus.iter().find(|e| e.id == id).map(|e| e.bus)
    }

    /// Streams each ECU sends, as counts indexed like `ecus`.
    pub fn send_counts(&self) -> Vec<usize> {
        self.ecus
            .iter()
            .map(|e| self.streams.iter().filter(|s| s.sender == e.id).count())
            .collect()
    }

    pub fn validate(&self) -> Result<(), ArchError> {
        let bad = |m: String| Err(ArchError::Invalid(m));
        if self.buses == 0 {
            return bad("at least one bus is required".into());
        }
        if self.buses > 1 && self.gateway.is_none() {
            return bad("more than one bus needs a gateway".into());
        }
        let mut ids = BTreeSet::new();
        for n in std::iter::once(&self.security_module).chain(&self.ecus) {
            if !ids.insert(n.id) {
                return bad(format!("duplicate device id {}", n.id));
            }
            if n.bus >= self.buses {
                return bad(format!(
                    "device {} on bus {} but only {} buses",
                    n.id, n.bus, self.buses
                ));
            }
        }
        if let Some(g) = &self.gateway {
            if ids.contains(&g.id) {
                return bad(format!("gateway id {} collides with a device", g.id));
            }
            if g.latency_s.is_nan() || g.latency_s < 0.0 {
                return bad("gateway latency must be non-negative".into());
            }
        }
        let ecus: BTreeSet<_> = self.ecu_ids().into_iter().collect();
        let mut sids = BTreeSet::new();
        for s in &self.streams {
            s.validate()?;
            if !sids.insert(s.id) {
                return bad(format!("duplicate stream id {}", s.id));
            }
            for d in std::iter::once(&s.sender).chain(&s.receivers) {
                if !ecus.contains(d) {
                    return bad(format!("stream {} references unknown ECU {d}", s.id));
                }
            }
        }
        for r in &self.acl {
            if !ecus.contains(&r.device) {
                return bad(format!("ACL row references unknown ECU {}", r.device));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
security_module = { id = 1 }
ecus = [{ id = 2 }, { id = 3 }]

[[streams]]
id = 0
sender = 2
receivers = [3]
period_ms = 20.0
payload_len = 8
deadline_ms = 80.0
"#;

    #[test]
    fn parses_minimal_config() {
        let a = Architecture::from_toml_str(MINIMAL).unwrap();
        assert_eq!(a.buses, 1);
        assert_eq!(a.ecus.len(), 2);
        assert!(a.acl().alpha(DeviceId(2), StreamId(0)));
        let back = Architecture::from_toml_str(&a.to_toml_string()).unwrap();
        assert_eq!(a, back);
    }

    #[test]
    fn reports_bad_field_with_location() {
        let err = Architecture::from_toml_str("security_module = { id = \"x\" }\necus = []\n")
            .unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
    }

    #[test]
    fn rejects_unknown_receiver() {
        let s = MINIMAL.replace("receivers = [3]", "receivers = [9]");
        assert!(matches!(
            Architecture::from_toml_str(&s),
            Err(ArchError::Invalid(_))
        ));
    }

    #[test]
    fn explicit_acl_rows_override_streams() {
        let s = format!("{MINIMAL}\n[[acl]]\ndevice = 3\nstream = 0\nrole = \"send\"\n");
        let a = Architecture::from_toml_str(&s).unwrap();
        assert!(a.acl().alpha(DeviceId(3), StreamId(0)));
        assert!(!a.acl().alpha(DeviceId(2), StreamId(0)));
    }
}
