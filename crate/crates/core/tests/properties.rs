use lasan::crypto::{aes_blocks, rsa_blocks, Backend, Crypto, KeyFactory, Term};
use lasan::ids::DeviceId;
use lasan::netsim::can::{
    dlc_len, frame_time, segment, segment_count, BusTiming, Reassembly, ReassemblyStep,
    MAX_PAYLOAD, SEGMENT_CAPACITY,
};
use lasan::time::SimDuration;
use proptest::prelude::*;

proptest! {
    #[test]
    fn aes_blocks_cover_the_payload(len in 0usize..4096) {
        let b = aes_blocks(len) as usize;
        prop_assert!(b >= 1);
        prop_assert!(b * 16 >= len);
        prop_assert!(len == 0 || (b - 1) * 16 < len);
    }

    #[test]
    fn rsa_blocks_respect_padding_overhead(len in 0usize..2048, bits in prop::sample::select(vec![512u32, 1024, 2048])) {
        let cap = (bits / 8) as usize - 11;
        let b = rsa_blocks(len, bits) as usize;
        prop_assert!(b * cap >= len);
        prop_assert!(len == 0 || (b - 1) * cap < len);
    }

    #[test]
    fn sym_cost_grows_with_blocks(a in 1usize..200, extra in 0usize..200) {
        let crypto = Crypto::default();
        let mut keys = KeyFactory::new();
        let k = keys.symmetric();
        for backend in [Backend::Hw, Backend::Sw] {
            let small = crypto.sym_encrypt(vec![Term::Bytes(vec![0; a])], k, backend).unwrap();
            let big = crypto.sym_encrypt(vec![Term::Bytes(vec![0; a + extra])], k, backend).unwrap();
            prop_assert!(small.cost <= big.cost);
        }
        let hw = crypto.sym_encrypt(vec![Term::Bytes(vec![0; a])], k, Backend::Hw).unwrap();
        let sw = crypto.sym_encrypt(vec![Term::Bytes(vec![0; a])], k, Backend::Sw).unwrap();
        prop_assert!(hw.cost < sw.cost);
    }

    #[test]
    fn sym_round_trip_only_with_the_right_key(n in 0usize..64) {
        let crypto = Crypto::default();
        let mut keys = KeyFactory::new();
        let (k, other) = (keys.symmetric(), keys.symmetric());
        let body = vec![Term::Device(DeviceId(4)), Term::Bytes(vec![9; n])];
        let c = crypto.sym_encrypt(body.clone(), k, Backend::Sw).unwrap().value;
        prop_assert_eq!(crypto.sym_decrypt(&c, k, Backend::Sw).unwrap().value.unwrap(), body);
        prop_assert!(crypto.sym_decrypt(&c, other, Backend::Sw).unwrap().value.is_err());
    }

    #[test]
    fn dlc_is_the_smallest_valid_length(len in 0usize..=MAX_PAYLOAD) {
        const VALID: [usize; 16] = [0, 1, 2, 3, 4, 5, 6, 7, 8, 12, 16, 20, 24, 32, 48, 64];
        let d = dlc_len(len);
        prop_assert!(VALID.contains(&d));
        prop_assert_eq!(d, *VALID.iter().find(|v| **v >= len).unwrap());
    }

    #[test]
    fn frame_time_is_monotone(a in 0usize..=MAX_PAYLOAD, b in 0usize..=MAX_PAYLOAD) {
        let t = BusTiming::default();
        let (lo, hi) = (a.min(b), a.max(b));
        prop_assert!(frame_time(lo, &t) <= frame_time(hi, &t));
        prop_assert!(frame_time(lo, &t) > SimDuration::ZERO);
    }

    #[test]
    fn segments_carry_the_message_and_reassemble_in_order(len in 0usize..2000) {
        let frames = segment(7, 0x10, len);
        prop_assert_eq!(frames.len(), segment_count(len));
        let body: usize = frames.iter().map(|f| f.payload_len - 1).sum();
        prop_assert_eq!(body, len);
        prop_assert!(frames.iter().all(|f| f.payload_len <= MAX_PAYLOAD));
        prop_assert!(frames[..frames.len() - 1].iter().all(|f| f.payload_len - 1 == SEGMENT_CAPACITY));
        let mut r = Reassembly::default();
        let steps: Vec<ReassemblyStep> = frames.iter().map(|f| r.accept(f.segment)).collect();
        prop_assert_eq!(*steps.last().unwrap(), ReassemblyStep::Complete);
        prop_assert!(steps[..steps.len() - 1].iter().all(|s| *s == ReassemblyStep::Pending));
    }

    #[test]
    fn out_of_order_segment_breaks_reassembly(len in 64usize..2000, swap in 0usize..100) {
        let frames = segment(1, 0x10, len);
        let i = swap % (frames.len() - 1);
        let mut r = Reassembly::default();
        for f in &frames[..i] {
            r.accept(f.segment);
        }
        prop_assert_eq!(r.accept(frames[i + 1].segment), ReassemblyStep::Broken);
        prop_assert!(r.is_broken());
        prop_assert_eq!(r.accept(frames[i].segment), ReassemblyStep::Broken);
    }

    #[test]
    fn durations_round_trip_through_seconds(ps in 0u64..(1u64 << 52)) {
        let d = SimDuration::from_ps(ps);
        let back = SimDuration::from_secs_f64(d.as_secs_f64());
        prop_assert!(back.as_ps().abs_diff(ps) <= 1 + ps / (1u64 << 40));
    }
}
