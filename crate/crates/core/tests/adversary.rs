use lasan::adversary::{attempt, Attack, Knowledge, Verdict};
use lasan::arch::Architecture;
use lasan::crypto::{Backend, Crypto, KeyFactory, Term};
use lasan::ids::{DeviceId, StreamId};
use lasan::netsim::RunConfig;
use lasan::protocol::LasanConfig;
use lasan::testgen::{generate, GenProfile};

fn arch(seed: u64) -> Architecture {
    generate(&GenProfile::new(6, seed)).unwrap()
}

fn cfg(seed: u64, signed_hash: bool) -> RunConfig {
    RunConfig {
        seed,
        data_frames: 3,
        lasan: LasanConfig {
            require_signed_hash: signed_hash,
            ..LasanConfig::default()
        },
        ..RunConfig::default()
    }
}

/// The sender of the first stream, one of its streams and one it may not send.
fn victim(a: &Architecture) -> (DeviceId, StreamId, StreamId) {
    let s = &a.streams[0];
    let other = a.streams.iter().find(|o| o.sender != s.sender).unwrap();
    (s.sender, s.id, other.id)
}

fn scripts(a: &Architecture) -> Vec<Attack> {
    let (v, own, foreign) = victim(a);
    vec![
        Attack::Eavesdrop,
        Attack::Replay,
        Attack::Impersonate {
            victim: v,
            stream: own,
        },
        Attack::UnauthorizedRequest {
            victim: v,
            stream: own,
        },
        Attack::LeakedKey {
            victim: v,
            stream: foreign,
        },
    ]
}

#[test]
fn observing_terms_closes_over_known_keys() {
    let crypto = Crypto::default();
    let mut keys = KeyFactory::new();
    let sm = keys.keypair(DeviceId(1), 512).unwrap();
    let k_e = keys.symmetric();
    let inner = vec![Term::Device(DeviceId(2)), Term::SymKey(k_e)];
    let m_r = crypto
        .asym_encrypt(inner, sm.public, Backend::Sw)
        .unwrap()
        .value;

    let mut kn = Knowledge::new();
    kn.learn(Term::AsymKey(sm.public));
    kn.learn(Term::Cipher(m_r.clone()));
    assert!(kn.contains(&Term::AsymKey(sm.public)));
    assert!(
        !kn.contains(&Term::SymKey(k_e)),
        "sealed under the SM public key"
    );
    assert_eq!(kn.sealed().len(), 1);

    let data = crypto
        .sym_encrypt(vec![Term::Bytes(vec![7])], k_e, Backend::Sw)
        .unwrap()
        .value;
    kn.learn(Term::Cipher(data.clone()));
    assert!(!kn.contains(&Term::Bytes(vec![7])));

    kn.learn(Term::AsymKey(sm.private));
    assert!(kn.contains(&Term::SymKey(k_e)));
    assert!(
        kn.contains(&Term::Bytes(vec![7])),
        "earlier ciphertext reopened with the new key"
    );
    assert!(kn.sealed().is_empty());
}

#[test]
fn derivation_needs_keys_and_nonces() {
    let crypto = Crypto::default();
    let mut keys = KeyFactory::new();
    let k = keys.symmetric();
    let fresh = keys.symmetric();
    let mut kn = Knowledge::new();
    assert!(!kn.contains(&Term::SymKey(fresh)));
    let c = crypto
        .sym_encrypt(vec![Term::Device(DeviceId(3))], k, Backend::Sw)
        .unwrap()
        .value;
    assert!(!kn.can_derive(&Term::Cipher(c.clone())));
    kn.learn(Term::SymKey(k));
    assert!(kn.can_derive(&Term::Cipher(c)));
    assert!(kn.can_derive(&Term::Tuple(vec![
        Term::Device(DeviceId(9)),
        Term::SymKey(k)
    ])));
    assert!(!kn.can_derive(&Term::Nonce(lasan::ids::Nonce(5))));
}

#[test]
fn eavesdropper_learns_certificates_but_no_keys() {
    let a = arch(0);
    let r = attempt(&a, &cfg(0, true), &Crypto::default(), Attack::Eavesdrop).unwrap();
    assert_eq!(r.verdict, Verdict::Blocked, "{:?}", r.violations);
    assert!(r.injected.is_empty());
    assert!(r.knowledge_size > 0);
    assert!(
        r.trace.iter().any(|l| l.contains("observe Data")),
        "data frames were on the bus"
    );
}

#[test]
fn every_replay_is_rejected() {
    let a = arch(1);
    let r = attempt(&a, &cfg(1, true), &Crypto::default(), Attack::Replay).unwrap();
    assert_eq!(r.verdict, Verdict::Blocked, "{:?}", r.violations);
    assert!(r.injected.len() > 10);
    assert!(r.injected.iter().all(|i| !i.accepted));
}

#[test]
fn impersonation_is_blocked_by_the_signed_hash() {
    let a = arch(2);
    let (v, own, _) = victim(&a);
    let r = attempt(
        &a,
        &cfg(2, true),
        &Crypto::default(),
        Attack::Impersonate {
            victim: v,
            stream: own,
        },
    )
    .unwrap();
    assert_eq!(r.verdict, Verdict::Blocked, "{:?}", r.violations);
    assert!(r
        .injected
        .iter()
        .any(|i| i.tag == lasan::protocol::MessageTag::Registration));
}

#[test]
fn impersonation_succeeds_without_the_signed_hash() {
    let a = arch(2);
    let (v, own, _) = victim(&a);
    let r = attempt(
        &a,
        &cfg(2, false),
        &Crypto::default(),
        Attack::Impersonate {
            victim: v,
            stream: own,
        },
    )
    .unwrap();
    assert_eq!(r.verdict, Verdict::Succeeded);
    assert!(
        r.violations
            .iter()
            .any(|m| m.contains("bound attacker key")),
        "{:?}",
        r.violations
    );
    assert!(
        r.violations.iter().any(|m| m.contains("stream key")),
        "{:?}",
        r.violations
    );
}

#[test]
fn leaked_key_cannot_reach_foreign_streams() {
    let a = arch(3);
    let (v, _, foreign) = victim(&a);
    let r = attempt(
        &a,
        &cfg(3, true),
        &Crypto::default(),
        Attack::LeakedKey {
            victim: v,
            stream: foreign,
        },
    )
    .unwrap();
    assert_eq!(r.verdict, Verdict::Blocked, "{:?}", r.violations);
    assert!(r
        .injected
        .iter()
        .any(|i| i.tag == lasan::protocol::MessageTag::Registration && i.accepted));
    let req = r
        .injected
        .iter()
        .find(|i| i.tag == lasan::protocol::MessageTag::StreamRequest)
        .unwrap();
    assert_eq!(req.reason, Some(lasan::protocol::Reject::AccessDenied));
}

#[test]
fn falsifying_trace_is_exported() {
    let a = arch(4);
    let (v, own, _) = victim(&a);
    let run = RunConfig {
        trace: true,
        ..cfg(4, false)
    };
    let r = attempt(
        &a,
        &run,
        &Crypto::default(),
        Attack::Impersonate {
            victim: v,
            stream: own,
        },
    )
    .unwrap();
    let dir = std::env::temp_dir().join(format!("lasan-trace-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("impersonate.trace");
    r.write_trace(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("# attack=impersonate signed_hash=false"));
    assert!(text.contains("# violation:"));
    assert!(text.contains("inject"));
    assert!(text.contains("frame bus=0"));
    std::fs::remove_dir_all(dir).unwrap();
}

#[test]
fn attack_scripts_parse_from_config() {
    let a: Attack = toml::from_str("kind = \"impersonate\"\nvictim = 3\nstream = 1\n").unwrap();
    assert_eq!(
        a,
        Attack::Impersonate {
            victim: DeviceId(3),
            stream: StreamId(1)
        }
    );
}

#[test]
fn one_hundred_seeded_runs_hold_the_security_claims() {
    let crypto = Crypto::default();
    let mut runs = 0;
    for seed in 0..20 {
        let a = arch(seed);
        for attack in scripts(&a) {
            let r = attempt(&a, &cfg(seed, true), &crypto, attack).unwrap();
            assert_eq!(
                r.verdict,
                Verdict::Blocked,
                "seed {seed} {attack:?}: {:?}",
                r.violations
            );
            runs += 1;
        }
        let (v, own, _) = victim(&a);
        let flawed = attempt(
            &a,
            &cfg(seed, false),
            &crypto,
            Attack::Impersonate {
                victim: v,
                stream: own,
            },
        )
        .unwrap();
        assert_eq!(flawed.verdict, Verdict::Succeeded, "seed {seed}");
    }
    assert!(runs >= 100);
}
