use serde::{Deserialize, Serialize};

use crate::time::SimDuration;

/// Largest CAN FD payload.
pub const MAX_PAYLOAD: usize = 64;
/// Bytes of each frame taken by the segmentation header.
pub const SEGMENT_HEADER: usize = 1;
/// Protocol bytes carried per frame.
pub const SEGMENT_CAPACITY: usize = MAX_PAYLOAD - SEGMENT_HEADER;

/// Bits sent at the nominal rate: SOF, 11-bit id, RRS, IDE, FDF and res before
/// the switch, CRC delimiter, ACK, EOF and intermission after it.
pub const ARBITRATION_BITS: u64 = 29;
/// Data-phase overhead: BRS, ESI, DLC, stuff count and CRC with its leading
/// fixed stuff bit. Dynamic stuffing is not modelled.
pub const DATA_OVERHEAD_BITS: u64 = 28;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BusTiming {
    pub arbitration_bps: u64,
    pub data_bps: u64,
    /// Round payloads up to the next valid data length code.
    pub pad_to_dlc: bool,
}

impl Default for BusTiming {
    fn default() -> Self {
        BusTiming {
            arbitration_bps: 500_000,
            data_bps: 2_000_000,
            pad_to_dlc: true,
        }
    }
}

/// Smallest valid CAN FD data length that holds `len` bytes.
pub fn dlc_len(len: usize) -> usize {
    match len {
        0..=8 => len,
        9..=12 => 12,
        13..=16 => 16,
        17..=20 => 20,
        21..=24 => 24,
        25..=32 => 32,
        33..=48 => 48,
        _ => 64,
    }
}

fn bits_time(bits: u64, bps: u64) -> SimDuration {
    // Round up so a frame never finishes early.
    let ps = (bits as u128 * 1_000_000_000_000u128).div_ceil(bps as u128);
    SimDuration::from_ps(ps as u64)
}

/// Time on the wire for a frame carrying `payload_len` bytes.
pub fn frame_time(payload_len: usize, timing: &BusTiming) -> SimDuration {
    assert!(
        payload_len <= MAX_PAYLOAD,
        "CAN FD payload is at most 64 bytes"
    );
    let len = if timing.pad_to_dlc {
        dlc_len(payload_len)
    } else {
        payload_len
    };
    bits_time(ARBITRATION_BITS, timing.arbitration_bps)
        + bits_time(DATA_OVERHEAD_BITS + 8 * len as u64, timing.data_bps)
}

/// Number of frames needed for a message of `wire_length` bytes.
pub fn segment_count(wire_length: usize) -> usize {
    wire_length.div_ceil(SEGMENT_CAPACITY).max(1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Segment {
    pub msg_ref: u64,
    pub index: u16,
    pub total: u16,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CanFdFrame {
    pub frame_id: u16,
    pub payload_len: usize,
    pub segment: Segment,
}

/// Splits a message into frames, each with a one-byte segment header.
pub fn segment(msg_ref: u64, frame_id: u16, wire_length: usize) -> Vec<CanFdFrame> {
    let total = segment_count(wire_length);
    (0..total)
        .map(|i| {
            let body = wire_length
                .saturating_sub(i * SEGMENT_CAPACITY)
                .min(SEGMENT_CAPACITY);
            CanFdFrame {
                frame_id,
                payload_len: body + SEGMENT_HEADER,
                segment: Segment {
                    msg_ref,
                    index: i as u16,
                    total: total as u16,
                },
            }
        })
        .collect()
}

/// In-order reassembly of one message at one receiver.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Reassembly {
    next: u16,
    broken: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReassemblyStep {
    Pending,
    Complete,
    Broken,
}

impl Reassembly {
    pub fn accept(&mut self, seg: Segment) -> ReassemblyStep {
        if self.broken || seg.index != self.next {
            self.broken = true;
            return ReassemblyStep::Broken;
        }
        self.next += 1;
        if self.next == seg.total {
            ReassemblyStep::Complete
        } else {
            ReassemblyStep::Pending
        }
    }

    pub fn is_broken(&self) -> bool {
        self.broken
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Counts bits field by field, independently of the formula above.
    fn oracle_bits(payload: usize) -> (u64, u64) {
        let (sof, id, rrs, ide, fdf, res) = (1, 11, 1, 1, 1, 1);
        let (crc_delim, ack_slot, ack_delim, eof, ifs) = (1, 1, 1, 7, 3);
        let arb = sof + id + rrs + ide + fdf + res + crc_delim + ack_slot + ack_delim + eof + ifs;
        let (brs, esi, dlc, stuff_count, crc17, fixed_stuff) = (1, 1, 4, 4, 17, 1);
        let data = brs + esi + dlc + stuff_count + crc17 + fixed_stuff + 8 * payload as u64;
        (arb, data)
    }

    #[test]
    fn overhead_only_frame() {
        let t = BusTiming::default();
        assert_eq!(
            frame_time(0, &t),
            SimDuration::from_ps(58_000_000 + 14_000_000)
        );
    }

    #[test]
    fn full_frame_matches_bit_count_oracle() {
        let t = BusTiming::default();
        let (arb, data) = oracle_bits(64);
        let expect = arb as f64 / 500_000.0 + data as f64 / 2_000_000.0;
        assert!((frame_time(64, &t).as_secs_f64() - expect).abs() < 1e-12);
    }

    #[test]
    fn doubling_data_rate_is_faster() {
        let slow = BusTiming::default();
        let fast = BusTiming {
            data_bps: 4_000_000,
            ..slow
        };
        for len in 1..=64 {
            assert!(frame_time(len, &fast) < frame_time(len, &slow));
        }
    }

    #[test]
    fn dlc_padding() {
        assert_eq!(dlc_len(8), 8);
        assert_eq!(dlc_len(9), 12);
        assert_eq!(dlc_len(49), 64);
        let t = BusTiming::default();
        assert_eq!(frame_time(49, &t), frame_time(64, &t));
        let raw = BusTiming {
            pad_to_dlc: false,
            ..t
        };
        assert!(frame_time(49, &raw) < frame_time(64, &raw));
    }

    #[test]
    fn segmentation_counts() {
        assert_eq!(segment_count(288), 5);
        assert_eq!(segment_count(63), 1);
        assert_eq!(segment_count(64), 2);
        assert_eq!(segment_count(0), 1);
        let f = segment(7, 0x20, 288);
        assert_eq!(f.len(), 5);
        assert_eq!(f.iter().map(|x| x.payload_len - 1).sum::<usize>(), 288);
        assert!(f.iter().all(|x| x.payload_len <= MAX_PAYLOAD));
    }

    #[test]
    fn reassembly_needs_every_segment_in_order() {
        let f = segment(1, 0x20, 130);
        let mut r = Reassembly::default();
        assert_eq!(r.accept(f[0].segment), ReassemblyStep::Pending);
        assert_eq!(r.accept(f[2].segment), ReassemblyStep::Broken);
        assert_eq!(r.accept(f[1].segment), ReassemblyStep::Broken);
        let mut ok = Reassembly::default();
        let steps: Vec<_> = f.iter().map(|x| ok.accept(x.segment)).collect();
        assert_eq!(steps.last(), Some(&ReassemblyStep::Complete));
    }
}
