//! Acceptance checks. Prints one PASS or FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use lasan::adversary::{attempt, Attack, Verdict};
use lasan::arch::Architecture;
use lasan::crypto::{Backend, Crypto, KeyFactory};
use lasan::ids::{DeviceId, DeviceKind, StreamId};
use lasan::lifecycle::{
    Direct, FirmwareImage, FirmwareOutcome, LifecycleError, OwnerState, Pki, ValidationPolicy,
    Validator, Verdict as CertVerdict,
};
use lasan::netsim::{run_scenario, LayerKind, RunConfig, RunResult, Scenario};
use lasan::protocol::LasanConfig;
use lasan::testgen::{generate, GenProfile};
use lasan::time::SimTime;
use lasan_cli::output::sweep_csv;
use lasan_cli::{sweep, Experiment, SweepSpec};
use lasan_eval::{send_skew, single_stream};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Report {
    failed: usize,
}

impl Report {
    fn line(&mut self, n: usize, ok: bool, detail: String) {
        if !ok {
            self.failed += 1;
        }
        println!(
            "criterion {n:>2}: {} {detail}",
            if ok { "PASS" } else { "FAIL" }
        );
    }
}

fn within(x: f64, target: f64, tol: f64) -> bool {
    (x - target).abs() <= target * tol
}

fn run(
    arch: &Architecture,
    crypto: &Crypto,
    layer: LayerKind,
    backend: Backend,
    scenario: Scenario,
) -> RunResult {
    let cfg = RunConfig {
        layer,
        backend,
        scenario,
        ..RunConfig::default()
    };
    run_scenario(arch, &cfg, crypto).expect("scenario runs")
}

fn c1(r: &mut Report, crypto: &Crypto) {
    let t0 = Instant::now();
    let res = run(
        &single_stream(),
        crypto,
        LayerKind::Lasan,
        Backend::Sw,
        Scenario::FirstStart,
    );
    let wall = t0.elapsed().as_secs_f64();
    let t = res.total_startup_s();
    r.line(
        1,
        res.complete && within(t, 2.3, 0.20) && wall < 1.0,
        format!("SW first start {t:.4} s (2.3 +-20%), wall {wall:.3} s"),
    );
}

fn c2(r: &mut Report, crypto: &Crypto) {
    let a = single_stream();
    let sw = run(
        &a,
        crypto,
        LayerKind::Lasan,
        Backend::Sw,
        Scenario::WarmStart,
    )
    .total_startup_s();
    let hw = run(
        &a,
        crypto,
        LayerKind::Lasan,
        Backend::Hw,
        Scenario::WarmStart,
    )
    .total_startup_s();
    let ok = within(sw, 0.0046, 0.30) && within(hw, 0.0016, 0.30);
    r.line(
        2,
        ok,
        format!("warm start SW {sw:.5} s (0.0046 +-30%), HW {hw:.5} s (0.0016 +-30%)"),
    );
}

type Grid = BTreeMap<(LayerKind, Backend, usize, u64), RunResult>;

fn startup_grid(exp: &Experiment, counts: &[usize], backends: &[Backend]) -> Grid {
    let spec = SweepSpec {
        ecu_counts: counts.to_vec(),
        layers: LayerKind::ALL.to_vec(),
        backends: backends.to_vec(),
        repetitions: 5,
        seeds: Vec::new(),
        base_seed: 0,
    };
    let mut grid = Grid::new();
    for s in sweep(exp, &spec).expect("sweep runs") {
        for res in s.results {
            grid.insert((s.layer, s.backend, res.n_ecus, res.seed), res);
        }
    }
    grid
}

fn c3(r: &mut Report, grid: &Grid, wall: f64) {
    let mut bad = Vec::new();
    let mut checked = 0;
    for (&(layer, backend, n, seed), lasan) in grid.iter().filter(|(k, _)| k.0 == LayerKind::Lasan)
    {
        let _ = layer;
        let tesla = &grid[&(LayerKind::Tesla, backend, n, seed)];
        let tls = &grid[&(LayerKind::Tls, backend, n, seed)];
        checked += 1;
        let (l, te, tl) = (lasan.total_startup, tesla.total_startup, tls.total_startup);
        if !(l < te && te < tl) {
            bad.push(format!(
                "{backend} n={n} seed={seed}: {:.1} {:.1} {:.1}",
                l.as_secs_f64(),
                te.as_secs_f64(),
                tl.as_secs_f64()
            ));
        }
    }
    r.line(
        3,
        bad.is_empty() && checked == 50 && wall <= 120.0,
        format!(
            "LASAN < TESLA < TLS in {}/{checked} points, sweep wall {wall:.1} s {bad:?}",
            checked - bad.len()
        ),
    );
}

fn c4(r: &mut Report, exp: &Experiment) {
    let counts: Vec<usize> = (20..=100).step_by(10).collect();
    let spec = SweepSpec {
        ecu_counts: counts.clone(),
        layers: vec![LayerKind::Tls],
        backends: vec![Backend::Sw],
        repetitions: 5,
        seeds: Vec::new(),
        base_seed: 0,
    };
    let series = sweep(exp, &spec).expect("sweep runs");
    let res = &series[0].results;
    // Smallest size at which most seeds hit the timeout.
    let threshold = counts
        .iter()
        .copied()
        .find(|n| res.iter().filter(|x| x.n_ecus == *n && x.timed_out).count() >= 3);
    let below: Vec<String> = counts
        .iter()
        .map(|n| {
            let v: Vec<&RunResult> = res.iter().filter(|x| x.n_ecus == *n).collect();
            let m = v.iter().map(|x| x.total_startup_s()).sum::<f64>() / v.len() as f64;
            format!("{n}:{m:.0}")
        })
        .collect();
    let ok = threshold.is_some_and(|n| (40..=70).contains(&n));
    r.line(
        4,
        ok,
        format!("TLS SW timeout threshold {threshold:?} ECUs (40..=70); mean s per size {below:?}"),
    );
}

fn c5(r: &mut Report, grid: &Grid) {
    let mut ratios = BTreeMap::new();
    for backend in [Backend::Sw, Backend::Hw] {
        let mean = |layer, n| {
            let v: Vec<f64> = (0..5)
                .map(|s| grid[&(layer, backend, n, s)].total_startup_s())
                .collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        let (mut te, mut tl) = (0.0, 0.0);
        for n in [60, 80, 100] {
            let l = mean(LayerKind::Lasan, n);
            te += mean(LayerKind::Tesla, n) / l / 3.0;
            tl += mean(LayerKind::Tls, n) / l / 3.0;
        }
        ratios.insert(backend, (te, tl));
    }
    let (te, tl) = ratios[&Backend::Sw];
    let (hte, htl) = ratios[&Backend::Hw];
    let ok = (25.0..=100.0).contains(&te) && (100.0..=500.0).contains(&tl);
    r.line(5, ok, format!("SW TESLA/LASAN {te:.1} (25..100), TLS/LASAN {tl:.1} (100..500); HW {hte:.1} and {htl:.1}"));
}

fn c6(r: &mut Report, crypto: &Crypto) {
    let mut sw = 0.0;
    let mut hw = 0.0;
    for seed in 0..5 {
        let a = generate(&GenProfile::new(100, seed)).unwrap();
        assert_eq!(a.streams.len(), 500);
        let max = |b| {
            let res = run(&a, crypto, LayerKind::Lasan, b, Scenario::WarmStart);
            assert!(res.complete);
            res.stream_latency()
                .into_values()
                .max()
                .unwrap()
                .as_secs_f64()
        };
        sw += max(Backend::Sw) / 5.0;
        hw += max(Backend::Hw) / 5.0;
    }
    let ok = within(sw, 13.18, 0.30) && within(hw, 2.97, 0.30) && hw < sw;
    r.line(
        6,
        ok,
        format!("500-stream setup SW {sw:.3} s (13.18 +-30%), HW {hw:.3} s (2.97 +-30%)"),
    );
}

fn c7(r: &mut Report, crypto: &Crypto) {
    let mut ok = true;
    let mut detail = Vec::new();
    for backend in [Backend::Sw, Backend::Hw] {
        let chain = crypto.table().hash(backend).unwrap().as_secs_f64() * 400_000.0;
        let t: Vec<f64> = (1..=4)
            .map(|k| {
                run(
                    &send_skew(k, 0),
                    crypto,
                    LayerKind::Tesla,
                    backend,
                    Scenario::FirstStart,
                )
                .total_startup_s()
            })
            .collect();
        let steps: Vec<f64> = t.windows(2).map(|w| w[1] - w[0]).collect();
        ok &= steps.iter().all(|s| within(*s, chain, 0.02));
        // Raising a non-maximal ECU to the current maximum adds no step.
        let flat = run(
            &send_skew(4, 2),
            crypto,
            LayerKind::Tesla,
            backend,
            Scenario::FirstStart,
        )
        .total_startup_s();
        ok &= (flat - t[3]).abs() < 0.02 * chain;
        detail.push(format!(
            "{backend} chain {chain:.1} s, steps {steps:.1?}, flat delta {:.2}",
            flat - t[3]
        ));
    }
    r.line(7, ok, detail.join("; "));
}

fn c8(r: &mut Report, crypto: &Crypto) {
    let mut runs = 0;
    let mut failures = Vec::new();
    let mut flaw_found = 0;
    for seed in 0..20u64 {
        let a = generate(&GenProfile::new(6, seed)).unwrap();
        let s = &a.streams[0];
        let foreign = a.streams.iter().find(|o| o.sender != s.sender).unwrap().id;
        let cfg = |signed| RunConfig {
            seed,
            data_frames: 3,
            lasan: LasanConfig {
                require_signed_hash: signed,
                ..LasanConfig::default()
            },
            ..RunConfig::default()
        };
        for attack in [
            Attack::Eavesdrop,
            Attack::Replay,
            Attack::Impersonate {
                victim: s.sender,
                stream: s.id,
            },
            Attack::UnauthorizedRequest {
                victim: s.sender,
                stream: s.id,
            },
            Attack::LeakedKey {
                victim: s.sender,
                stream: foreign,
            },
        ] {
            let rep = attempt(&a, &cfg(true), crypto, attack).unwrap();
            runs += 1;
            if rep.verdict != Verdict::Blocked {
                failures.push(format!(
                    "seed {seed} {}: {:?}",
                    attack.name(),
                    rep.violations
                ));
            }
        }
        let flawed = attempt(
            &a,
            &cfg(false),
            crypto,
            Attack::Impersonate {
                victim: s.sender,
                stream: s.id,
            },
        )
        .unwrap();
        runs += 1;
        if flawed.verdict == Verdict::Succeeded {
            flaw_found += 1;
        }
    }
    let ok = runs >= 100 && failures.is_empty() && flaw_found == 20;
    r.line(
        8,
        ok,
        format!(
            "{runs} runs, {} violations, flaw reproduced in {flaw_found}/20 seeds {failures:?}",
            failures.len()
        ),
    );
}

fn c9(r: &mut Report, exp: &Experiment) {
    let spec = SweepSpec {
        ecu_counts: vec![20, 40],
        layers: LayerKind::ALL.to_vec(),
        backends: vec![Backend::Hw, Backend::Sw],
        repetitions: 3,
        seeds: vec![11, 12, 13],
        base_seed: 0,
    };
    let render = || -> Vec<String> {
        sweep(exp, &spec)
            .unwrap()
            .iter()
            .map(|s| sweep_csv(Scenario::FirstStart, &s.results))
            .collect()
    };
    let (a, b) = (render(), render());
    r.line(
        9,
        a == b,
        format!("{} CSVs compared, identical: {}", a.len(), a == b),
    );
}

fn c10(r: &mut Report) {
    let crypto = Crypto::default();
    let mut keys = KeyFactory::new();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = single_stream();
    let (e1, e2) = (DeviceId(2), DeviceId(3));
    let fresh = |keys: &mut KeyFactory| {
        let mut pki = Pki::new(&crypto, keys).unwrap();
        let mut v = pki
            .build_vehicle("VIN-1", &a, &crypto, keys, LasanConfig::default())
            .unwrap();
        v.crl_sync(&pki, SimTime::ZERO);
        let ws = pki.provision_workshop(&crypto, keys).unwrap();
        (pki, v, ws)
    };
    let t1 = SimTime::from_secs_f64(1.0);
    let mut checks: Vec<(&str, bool)> = Vec::new();

    let (mut pki, mut v, mut ws) = fresh(&mut keys);
    let new = pki
        .provision(DeviceKind::Ecu, Some(DeviceId(9)), &crypto, &mut keys, None)
        .unwrap();
    let label = new.label.clone();
    let r1 = v.exchange_ecu(&mut pki, &mut ws, e2, &new, &label, &crypto, t1);
    checks.push((
        "exchange outside maintenance",
        r1 == Err(LifecycleError::NotInMaintenance),
    ));
    v.manifest.set_state(OwnerState::Maintenance);
    pki.registry.publish(&label, "VIN-2").unwrap();
    let r2 = v.exchange_ecu(&mut pki, &mut ws, e2, &new, &label, &crypto, t1);
    checks.push((
        "duplicate printed id",
        r2 == Err(LifecycleError::DuplicateId(label.clone())),
    ));

    let (_pki, mut v, ws) = fresh(&mut keys);
    let image = FirmwareImage {
        target: e1,
        version: 2,
        content: vec![1, 2, 3],
    };
    let rogue = keys.keypair(DeviceId(77), 512).unwrap();
    let sig = image.sign(&crypto, &rogue).unwrap();
    let d = &mut Direct {
        crypto: &crypto,
        keys: &mut keys,
        rng: &mut rng,
        backend: Backend::Sw,
    };
    let out = v.firmware_update(&_pki, &ws, &image, &sig, d, t1);
    checks.push((
        "bad firmware signature",
        matches!(out, FirmwareOutcome::Rejected(_)) && !v.firmware.contains_key(&e1),
    ));

    for (verifier, target, _) in ValidationPolicy::standard().rows() {
        let (mut pki, mut v, mut ws) = fresh(&mut keys);
        let s0 = StreamId(0);
        let no_grant = match (verifier, target) {
            (DeviceKind::Ecu, DeviceKind::SecurityModule) => {
                let c = v.sm.cert.clone();
                pki.revoke(&c, SimTime::ZERO).unwrap();
                let d = &mut Direct {
                    crypto: &crypto,
                    keys: &mut keys,
                    rng: &mut rng,
                    backend: Backend::Sw,
                };
                v.authenticate(e1, &pki, d, t1).is_err()
                    && v.request_stream(e1, s0, d, t1).is_empty()
            }
            (DeviceKind::SecurityModule, DeviceKind::Ecu) => {
                let c = v.ecus[&e2].cert.clone();
                pki.revoke(&c, SimTime::ZERO).unwrap();
                v.crl_sync(&pki, SimTime::ZERO);
                let d = &mut Direct {
                    crypto: &crypto,
                    keys: &mut keys,
                    rng: &mut rng,
                    backend: Backend::Sw,
                };
                let now = v.authenticate(e1, &pki, d, t1).unwrap();
                v.authenticate(e2, &pki, d, now).is_err()
                    && !v
                        .request_stream(e1, s0, d, now + lasan::time::SimDuration::from_secs(2))
                        .contains(&e2)
            }
            (DeviceKind::Ecu, DeviceKind::Workshop) => {
                let c = ws.cert.clone();
                pki.revoke(&c, SimTime::ZERO).unwrap();
                let got = Validator::new(DeviceKind::Ecu).validate(
                    &c,
                    DeviceKind::Workshop,
                    &pki.policy,
                    &pki.cas,
                    &crypto,
                    true,
                    t1,
                );
                got == Ok(CertVerdict::Revoked)
            }
            (DeviceKind::SecurityModule, DeviceKind::Workshop)
            | (DeviceKind::Workshop, DeviceKind::SecurityModule)
            | (DeviceKind::Workshop, DeviceKind::Ecu) => {
                v.manifest.set_state(OwnerState::Maintenance);
                let new = pki
                    .provision(DeviceKind::Ecu, Some(DeviceId(9)), &crypto, &mut keys, None)
                    .unwrap();
                let c = match target {
                    DeviceKind::Workshop => ws.cert.clone(),
                    DeviceKind::SecurityModule => v.sm.cert.clone(),
                    _ => new.cert.clone(),
                };
                pki.revoke(&c, SimTime::ZERO).unwrap();
                let label = new.label.clone();
                let refused = v
                    .exchange_ecu(&mut pki, &mut ws, e2, &new, &label, &crypto, t1)
                    .is_err();
                refused && !v.ecus.contains_key(&new.id)
            }
            _ => false,
        };
        checks.push((
            Box::leak(format!("revoked {verifier}->{target}").into_boxed_str()),
            no_grant,
        ));
    }
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    r.line(
        10,
        failed.is_empty() && checks.len() == 9,
        format!("{} lifecycle checks, failed {failed:?}", checks.len()),
    );
}

fn main() {
    let crypto = Crypto::default();
    let exp = Experiment::parse("", "acceptance", Path::new(".")).unwrap();
    let mut r = Report { failed: 0 };
    c1(&mut r, &crypto);
    c2(&mut r, &crypto);
    let t0 = Instant::now();
    let grid = startup_grid(&exp, &[20, 40, 60, 80, 100], &[Backend::Hw, Backend::Sw]);
    let wall = t0.elapsed().as_secs_f64();
    c3(&mut r, &grid, wall);
    c4(&mut r, &exp);
    c5(&mut r, &grid);
    c6(&mut r, &crypto);
    c7(&mut r, &crypto);
    c8(&mut r, &crypto);
    c9(&mut r, &exp);
    c10(&mut r);
    println!("acceptance: {} of 10 criteria failed", r.failed);
    if r.failed > 0 {
        std::process::exit(1);
    }
}
