use std::collections::BTreeSet;

use lasan::arch::{Architecture, NodeSpec};
use lasan::crypto::{Backend, Crypto};
use lasan::ids::{DeviceId, StreamId};
use lasan::netsim::{run_scenario, LayerKind, RunConfig, Scenario};
use lasan::protocol::Stream;
use lasan::time::{SimDuration, SimTime};

fn single_stream() -> Architecture {
    Architecture {
        buses: 1,
        bus_timing: Default::default(),
        gateway: None,
        security_module: NodeSpec {
            id: DeviceId(1),
            bus: 0,
        },
        ecus: vec![
            NodeSpec {
                id: DeviceId(2),
                bus: 0,
            },
            NodeSpec {
                id: DeviceId(3),
                bus: 0,
            },
        ],
        streams: vec![Stream {
            id: StreamId(0),
            sender: DeviceId(2),
            receivers: BTreeSet::from([DeviceId(3)]),
            period_ms: 10.0,
            payload_len: 8,
            deadline_ms: 10.0,
        }],
        acl: Vec::new(),
    }
}

fn run(layer: LayerKind, backend: Backend, scenario: Scenario) -> lasan::netsim::RunResult {
    let cfg = RunConfig {
        layer,
        backend,
        scenario,
        ..Default::default()
    };
    run_scenario(&single_stream(), &cfg, &Crypto::default()).unwrap()
}

#[test]
fn every_layer_completes_a_single_stream() {
    for layer in LayerKind::ALL {
        for backend in [Backend::Sw, Backend::Hw] {
            for scenario in [Scenario::FirstStart, Scenario::WarmStart] {
                let r = run(layer, backend, scenario);
                assert!(r.complete, "{layer} {backend} {scenario}");
                assert!(!r.timed_out);
                assert!(r.rejections.is_empty(), "{:?}", r.rejections);
                assert_eq!(r.stream_ready.len(), 1);
            }
        }
    }
}

#[test]
fn lasan_first_start_is_dominated_by_ecu_authentication() {
    let sw = run(LayerKind::Lasan, Backend::Sw, Scenario::FirstStart);
    let hw = run(LayerKind::Lasan, Backend::Hw, Scenario::FirstStart);
    assert!(
        (2.3 * 0.8..=2.3 * 1.2).contains(&sw.total_startup_s()),
        "{}",
        sw.total_startup_s()
    );
    assert!(
        (1.4 * 0.8..=1.4 * 1.2).contains(&hw.total_startup_s()),
        "{}",
        hw.total_startup_s()
    );
    let auth = sw.ecu_auth.values().max().unwrap();
    let latency = sw.stream_latency()[&StreamId(0)];
    assert!(latency.as_secs_f64() < 0.01);
    assert!(*auth <= sw.total_startup);
}

#[test]
fn lasan_warm_start_only_authorizes_streams() {
    let sw = run(LayerKind::Lasan, Backend::Sw, Scenario::WarmStart);
    let hw = run(LayerKind::Lasan, Backend::Hw, Scenario::WarmStart);
    assert!(sw.total_startup_s() < 0.01);
    assert!(hw.total_startup < sw.total_startup);
    assert_eq!(sw.frames, 3, "request plus two grants");
}

#[test]
fn baselines_cost_more_than_lasan() {
    for backend in [Backend::Sw, Backend::Hw] {
        let lasan = run(LayerKind::Lasan, backend, Scenario::FirstStart).total_startup;
        let tls = run(LayerKind::Tls, backend, Scenario::FirstStart).total_startup;
        let tesla = run(LayerKind::Tesla, backend, Scenario::FirstStart).total_startup;
        assert!(lasan < tls && tls < tesla, "{lasan} {tls} {tesla}");
    }
}

#[test]
fn tesla_is_one_chain_plus_commitment() {
    let crypto = Crypto::default();
    let chain = crypto.table().hash(Backend::Sw).unwrap() * 400_000;
    let r = run(LayerKind::Tesla, Backend::Sw, Scenario::FirstStart);
    let extra = r.total_startup_s() - chain.as_secs_f64();
    assert!(extra > 0.0 && extra < 2.0, "{extra}");
}

#[test]
fn runs_are_deterministic() {
    for layer in LayerKind::ALL {
        let cfg = RunConfig {
            layer,
            seed: 7,
            record_events: true,
            ..Default::default()
        };
        let a = run_scenario(&single_stream(), &cfg, &Crypto::default()).unwrap();
        let b = run_scenario(&single_stream(), &cfg, &Crypto::default()).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn short_timeout_marks_run_incomplete() {
    let cfg = RunConfig {
        layer: LayerKind::Tls,
        timeout: SimDuration::from_secs(1),
        ..Default::default()
    };
    let r = run_scenario(&single_stream(), &cfg, &Crypto::default()).unwrap();
    assert!(r.timed_out && !r.complete);
    assert_eq!(r.total_startup, SimTime::ZERO + SimDuration::from_secs(1));
}
