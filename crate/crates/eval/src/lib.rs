//! Small hand-built architectures used by the acceptance harness.

use std::collections::BTreeSet;

use lasan::arch::{Architecture, NodeSpec};
use lasan::ids::{DeviceId, StreamId};
use lasan::protocol::Stream;

/// A 100 ms stream with one receiver and an 8-byte payload.
pub fn stream(id: u16, from: u16, to: u16) -> Stream {
    Stream {
        id: StreamId(id),
        sender: DeviceId(from),
        receivers: BTreeSet::from([DeviceId(to)]),
        period_ms: 100.0,
        payload_len: 8,
        deadline_ms: 80.0,
    }
}

/// One bus with the security module `d1` and ECUs `d2..=d{last}`.
pub fn single_bus(last: u16, streams: Vec<Stream>) -> Architecture {
    Architecture {
        buses: 1,
        bus_timing: Default::default(),
        gateway: None,
        security_module: NodeSpec {
            id: DeviceId(1),
            bus: 0,
        },
        ecus: (2..=last)
            .map(|id| NodeSpec {
                id: DeviceId(id),
                bus: 0,
            })
            .collect(),
        streams,
        acl: Vec::new(),
    }
}

/// Two ECUs and a single stream from `d2` to `d3`.
pub fn single_stream() -> Architecture {
    single_bus(3, vec![stream(0, 2, 3)])
}

/// Five ECUs. `d2` sends `k` streams, `d3..=d6` one each, and `d3` sends
/// `extra` more. The largest per-ECU send count is `max(k, extra + 1)`.
pub fn send_skew(k: u16, extra: u16) -> Architecture {
    let mut streams: Vec<Stream> = (0..k).map(|i| stream(i, 2, 3)).collect();
    streams.extend((3..=6).map(|e| stream(100 + e, e, 2)));
    streams.extend((0..extra).map(|i| stream(200 + i, 3, 4)));
    single_bus(6, streams)
}
