//! Space-delimited result files.

use std::fmt::Write as _;

use lasan::netsim::{RunResult, Scenario};
use lasan::time::SimDuration;

pub const STARTUP_HEADER: &str = "ecus time";
pub const STREAMS_HEADER: &str = "streams time";
pub const HIST_HEADER: &str = "Bin Frequency";
pub const SUMMARY_HEADER: &str =
    "layer backend scenario seed ecus streams time timed_out complete frames";

/// Time column of a result row. Runs that hit the timeout are written as
/// `nan` so plotting tools skip them instead of drawing the cap.
pub fn time_cell(r: &RunResult) -> String {
    if r.timed_out {
        "nan".to_string()
    } else {
        format!("{:.6}", r.total_startup_s())
    }
}

/// Header for a sweep over `scenario`: start-ups are plotted against the
/// ECU count, warm starts against the stream count.
pub fn sweep_header(scenario: Scenario) -> &'static str {
    match scenario {
        Scenario::FirstStart => STARTUP_HEADER,
        Scenario::WarmStart => STREAMS_HEADER,
    }
}

pub fn sweep_csv(scenario: Scenario, rows: &[RunResult]) -> String {
    let mut out = String::from(sweep_header(scenario));
    out.push('\n');
    for r in rows {
        let x = match scenario {
            Scenario::FirstStart => r.n_ecus,
            Scenario::WarmStart => r.n_streams,
        };
        let _ = writeln!(out, "{x} {}", time_cell(r));
    }
    out
}

pub fn summary_csv(rows: &[RunResult]) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{} {} {} {} {} {} {} {} {} {}",
            r.layer,
            r.backend,
            r.scenario,
            r.seed,
            r.n_ecus,
            r.n_streams,
            time_cell(r),
            r.timed_out,
            r.complete,
            r.frames
        );
    }
    out
}

/// One histogram bin. The first bin is closed on both sides, the rest
/// are open on the left: `(lo, hi]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bin {
    pub lo: SimDuration,
    pub hi: SimDuration,
    pub count: usize,
    pub percent: f64,
}

/// Equal-width histogram over `[min, max]` of `values`. Equal values give a
/// single bin.
pub fn histogram(values: &[SimDuration], bins: usize) -> Vec<Bin> {
    let (Some(min), Some(max)) = (values.iter().min().copied(), values.iter().max().copied())
    else {
        return Vec::new();
    };
    let bins = if min == max { 1 } else { bins.max(1) };
    let lo = min.as_ps() as u128;
    let span = (max.as_ps() - min.as_ps()) as u128;
    let edge = |i: usize| SimDuration::from_ps((lo + span * i as u128 / bins as u128) as u64);
    let mut counts = vec![0usize; bins];
    for v in values {
        let off = (v.as_ps() as u128) - lo;
        // Smallest bin whose upper edge reaches the value.
        let idx = if span == 0 {
            0
        } else {
            (off * bins as u128).div_ceil(span).max(1) as usize - 1
        };
        counts[idx.min(bins - 1)] += 1;
    }
    let total = values.len() as f64;
    counts
        .into_iter()
        .enumerate()
        .map(|(i, count)| Bin {
            lo: edge(i),
            hi: edge(i + 1),
            count,
            percent: 100.0 * count as f64 / total,
        })
        .collect()
}

pub fn hist_csv(bins: &[Bin]) -> String {
    let mut out = String::from(HIST_HEADER);
    out.push('\n');
    for (i, b) in bins.iter().enumerate() {
        let open = if i == 0 { '[' } else { '(' };
        let _ = writeln!(
            out,
            "{open}{:.3},{:.3}] {:.2}",
            b.lo.as_millis_f64(),
            b.hi.as_millis_f64(),
            b.percent
        );
    }
    out
}
