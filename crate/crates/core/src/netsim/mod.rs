//! Discrete-event simulation of CAN FD buses, gateways and device compute.

pub mod can;
mod engine;
pub mod scenario;

pub use engine::{Action, BusId, Envelope, GatewayConfig, Layer, NetStats, Sim};
pub use scenario::{
    run_lasan_with, run_scenario, Injection, Intruder, IntruderCtx, LasanEvent, LayerKind,
    Rejection, RunConfig, RunResult, Scenario, ScenarioError, TeslaConfig,
};
