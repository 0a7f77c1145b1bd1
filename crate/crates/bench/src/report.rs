use std::fmt::Write as _;
use std::io;
use std::path::Path;

use mosden_core::decide;

use crate::run::PointResult;
use crate::scenario::{Axis, ClockMode, Scenario};

pub const CSV_HEADER: [&str; 12] = [
    "point",
    "samples_ok",
    "messages_sent",
    "bytes_sent",
    "mean_l1_ms",
    "p95_l1_ms",
    "mean_l2_ms",
    "p95_l2_ms",
    "e_alpha_realized",
    "e_beta_realized",
    "wall_cpu_ms",
    "status",
];

fn fixed(v: f64) -> String {
    format!("{v:.3}")
}

fn record(r: &PointResult) -> [String; 12] {
    [
        r.point.to_string(),
        r.samples_ok.to_string(),
        r.messages_sent.to_string(),
        r.bytes_sent.to_string(),
        fixed(r.l1.mean_ms),
        fixed(r.l1.p95_ms),
        fixed(r.l2.mean_ms),
        fixed(r.l2.p95_ms),
        fixed(r.energy.e_alpha),
        fixed(r.energy.e_beta),
        fixed(r.wall_cpu_ms),
        r.status.clone(),
    ]
}

/// RFC 4180 CSV: the fixed header, then one row per point.
pub fn to_csv(rows: &[PointResult]) -> Vec<u8> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::CRLF)
        .from_writer(Vec::new());
    w.write_record(CSV_HEADER).expect("writing to memory");
    for r in rows {
        w.write_record(record(r)).expect("writing to memory");
    }
    w.into_inner().expect("writing to memory")
}

pub fn write_csv(rows: &[PointResult], path: &Path) -> io::Result<()> {
    std::fs::write(path, to_csv(rows))
}

/// Human-readable report: setup caveats, then one verdict line per point.
pub fn summary(scn: &Scenario, rows: &[PointResult]) -> String {
    let mut s = String::new();
    let clock = match scn.clock {
        ClockMode::Mock => "mock clock, in-process HTTP",
        ClockMode::System => "system clock, loopback TCP",
    };
    let axis = match scn.axis {
        Axis::Sensors => "sensors",
        Axis::Queries => "queries",
    };
    let _ = writeln!(
        s,
        "# mosden bench: axis={axis}, {}s per point, sampling {} ms ({clock})",
        scn.duration_s, scn.sampling_ms
    );
    let _ = writeln!(
        s,
        "# node and registry share one host; no real network variability is modeled"
    );
    let _ = writeln!(
        s,
        "# cpu is process CPU time in ms; energy is the declared synthetic cost model, unitless"
    );
    for r in rows {
        let verdict = decide(r.energy.e_alpha, r.energy.e_beta);
        let _ = writeln!(
            s,
            "point {:>4}: sensors={} queries={} samples_ok={} messages={} bytes={} e_alpha={:.3} e_beta={:.3} -> {} | healthz p95 {:.3} ms | l2 p95 {:.3} ms | {}",
            r.point,
            r.sensors,
            r.queries,
            r.samples_ok,
            r.messages_sent,
            r.bytes_sent,
            r.energy.e_alpha,
            r.energy.e_beta,
            verdict,
            r.healthz.p95_ms,
            r.l2.p95_ms,
            r.status
        );
    }
    if scn.axis == Axis::Queries && rows.len() > 1 {
        let rising = rows.windows(2).all(|w| w[0].l2.p95_ms <= w[1].l2.p95_ms);
        let _ = writeln!(
            s,
            "# p95 L2 non-decreasing in query count: {}",
            if rising { "yes" } else { "no" }
        );
    }
    s
}
