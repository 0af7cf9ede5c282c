use lasan::arch::Architecture;
use lasan::testgen::{generate, mad, BusCount, GenError, GenProfile};
use proptest::prelude::*;

#[test]
fn twenty_ecus_give_one_hundred_streams() {
    let a = generate(&GenProfile::new(20, 3)).unwrap();
    assert_eq!(a.streams.len(), 100);
    for (k, s) in a.streams.iter().enumerate() {
        assert_eq!(s.receivers.len(), 1 + k / 25, "stream {k}");
    }
    assert_eq!(a.streams[24].receivers.len(), 1);
    assert_eq!(a.streams[25].receivers.len(), 2);
    assert_eq!(a.streams[99].receivers.len(), 4);
}

#[test]
fn sixty_ecus_give_three_hundred_streams() {
    assert_eq!(
        generate(&GenProfile::new(60, 0)).unwrap().streams.len(),
        300
    );
}

#[test]
fn same_seed_same_architecture() {
    let p = GenProfile::new(40, 11);
    assert_eq!(generate(&p).unwrap(), generate(&p).unwrap());
    assert_ne!(
        generate(&p).unwrap(),
        generate(&GenProfile::new(40, 12)).unwrap()
    );
}

#[test]
fn mad_of_equal_counts_is_zero() {
    let mut a = generate(&GenProfile::new(4, 0)).unwrap();
    let ids = a.ecu_ids();
    for (k, s) in a.streams.iter_mut().enumerate() {
        s.sender = ids[k % 4];
        s.receivers = [ids[(k + 1) % 4]].into();
    }
    assert_eq!(mad(&a), 0.0);
}

#[test]
fn mad_of_single_sender_by_hand() {
    let mut a = generate(&GenProfile::new(2, 0)).unwrap();
    let ids = a.ecu_ids();
    for s in &mut a.streams {
        s.sender = ids[0];
        s.receivers = [ids[1]].into();
    }
    // counts (10, 0): mean 5, deviations 5 and 5, MAD 5 / mean 5 = 1
    assert_eq!(mad(&a), 1.0);
}

#[test]
fn too_many_receivers_is_an_error() {
    let p = GenProfile {
        receiver_step: 2,
        ..GenProfile::new(3, 0)
    };
    let err = generate(&p).unwrap_err();
    assert_eq!(
        err,
        GenError::TooFewEcus {
            stream: 4,
            needed: 3,
            available: 2
        }
    );
}

#[test]
fn auto_buses_add_a_gateway() {
    let p = GenProfile {
        buses: BusCount::Auto,
        ..GenProfile::new(45, 0)
    };
    let a = generate(&p).unwrap();
    assert_eq!(a.buses, 3);
    assert!(a.gateway.is_some());
    assert!(a.validate().is_ok());
    let single = generate(&GenProfile::new(45, 0)).unwrap();
    assert_eq!(single.buses, 1);
    assert!(single.gateway.is_none());
}

#[test]
fn architecture_round_trips_through_toml() {
    let a = generate(&GenProfile {
        buses: BusCount::Auto,
        ..GenProfile::new(30, 5)
    })
    .unwrap();
    assert_eq!(Architecture::from_toml_str(&a.to_toml_string()).unwrap(), a);
}

#[test]
fn profile_parses_from_toml() {
    let p: GenProfile = toml::from_str("n_ecus = 25\nbuses = \"auto\"\nseed = 4\n").unwrap();
    assert_eq!(p.n_ecus, 25);
    assert_eq!(p.buses, BusCount::Auto);
    assert_eq!(p.streams_per_ecu, 5);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn generated_architectures_obey_the_laws(n in 20usize..=100, seed in any::<u64>()) {
        let p = GenProfile::new(n, seed);
        let a = generate(&p).unwrap();
        prop_assert!(a.validate().is_ok());
        prop_assert_eq!(a.streams.len(), 5 * n);
        for (k, s) in a.streams.iter().enumerate() {
            prop_assert_eq!(s.receivers.len(), 1 + k / 25);
            prop_assert!(s.period_ms >= 20.0);
            prop_assert!(s.deadline_ms <= 80.0);
            prop_assert!((1..=8).contains(&s.payload_len));
        }
        prop_assert!((mad(&a) - 0.2).abs() <= 0.05, "mad {}", mad(&a));
    }
}
