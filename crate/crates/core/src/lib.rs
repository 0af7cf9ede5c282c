//! Simulation of lightweight authentication and stream authorization for
//! in-vehicle networks, with TLS and TESLA baselines for comparison.

pub mod adversary;
pub mod arch;
pub mod baselines;
pub mod crypto;
pub mod ids;
pub mod lifecycle;
pub mod netsim;
pub mod protocol;
pub mod testgen;
pub mod time;
