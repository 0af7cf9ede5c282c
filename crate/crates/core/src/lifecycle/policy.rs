use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::ids::DeviceKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Cached verdict, refreshed periodically when connected.
    SingleAsync,
    /// Live query; needs connectivity at the time of the check.
    SingleSync,
    /// Local revocation list.
    Crl,
    /// CRL while the cached list is fresh, a live query otherwise.
    CrlOrSingleSync,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::SingleAsync => "single-async",
            Method::SingleSync => "single-sync",
            Method::Crl => "crl",
            Method::CrlOrSingleSync => "single/crl",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Authority {
    SecurityModuleCa,
    EcuCa,
    WorkshopCa,
    /// The vehicle's own security module answers.
    SecurityModule,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rule {
    pub method: Method,
    pub authority: Authority,
}

/// Who checks whom, how, and against which authority.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ValidationPolicy {
    rules: BTreeMap<(DeviceKind, DeviceKind), Rule>,
}

impl Default for ValidationPolicy {
    fn default() -> Self {
        Self::standard()
    }
}

impl ValidationPolicy {
    pub fn standard() -> Self {
        use DeviceKind::{Ecu, SecurityModule as Sm, Workshop};
        use Method::*;
        let rows = [
            (Ecu, Sm, SingleAsync, Authority::SecurityModuleCa),
            (Sm, Ecu, Crl, Authority::EcuCa),
            (Ecu, Workshop, SingleSync, Authority::SecurityModule),
            (Sm, Workshop, SingleAsync, Authority::WorkshopCa),
            (Workshop, Sm, CrlOrSingleSync, Authority::SecurityModuleCa),
            (Workshop, Ecu, CrlOrSingleSync, Authority::EcuCa),
        ];
        ValidationPolicy {
            rules: rows
                .into_iter()
                .map(|(v, t, method, authority)| ((v, t), Rule { method, authority }))
                .collect(),
        }
    }

    /// The rule for `verifier` checking `target`. Pairs that never
    /// authenticate each other (for example ECU to ECU) have no rule.
    pub fn rule(&self, verifier: DeviceKind, target: DeviceKind) -> Option<Rule> {
        self.rules.get(&(verifier, target)).copied()
    }

    pub fn rows(&self) -> impl Iterator<Item = (DeviceKind, DeviceKind, Rule)> + '_ {
        self.rules.iter().map(|((v, t), r)| (*v, *t, *r))
    }
}
