//! Report files. Column orders are fixed:
//!
//! | file | columns |
//! |------|---------|
//! | `samples.csv` | `request_id,stream,node,sensor,seq,t_sent_us,t_received_us,duration_ms` |
//! | `shares.csv` | `stream,node,sensor,completions,share_pct` |
//! | `storage.csv` | `t_ms,bytes` |
//! | `work.csv` | `node,elements_processed,points_served,queries_answered,queries_rejected,connections_opened,connections_accepted,connections_rejected,bytes_in,bytes_out` |
//!
//! `summary.txt` holds one `key = value` line per figure, including
//! `avg_time_per_request_ms`. Undefined values are written as `undefined`.
//! Emitting the same report twice gives byte-identical files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{ExperimentReport, HarnessError, PairedReport};

fn unwritable(path: &Path) -> impl Fn(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Unwritable {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_file<R: serde::Serialize>(path: &Path, header: &[&str], rows: impl IntoIterator<Item = R>) -> Result<(), HarnessError> {
    let err = unwritable(path);
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| err(e.into()))?;
    w.write_record(header).map_err(|e| err(e.into()))?;
    for r in rows {
        w.serialize(r).map_err(|e| err(e.into()))?;
    }
    w.flush().map_err(&err)
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".into(), |v| format!("{v:.3}"))
}

pub fn summary_text(r: &ExperimentReport) -> String {
    let mut s = String::new();
    let mut line = |k: &str, v: String| {
        let _ = writeln!(s, "{k} = {v}");
    };
    line("mode", r.spec.mode.as_str().into());
    line("complete", r.complete.to_string());
    line("clients", r.spec.clients.to_string());
    line("requests_per_client", r.spec.requests_per_client.to_string());
    line("streams", r.completion_shares.len().to_string());
    line("duration_s", r.spec.duration_s.to_string());
    line("window_ms", format!("{:.3}", r.window_ms));
    line("completions", r.completions.to_string());
    line("avg_time_per_request_ms", opt(r.avg_time_per_request_ms));
    line("throughput_points_per_min", format!("{:.3}", r.throughput_points_per_min));
    line("share_cv", opt(r.share_cv));
    line("round_trip_mean_ms", format!("{:.3}", r.round_trip.mean_ms));
    line("round_trip_p50_ms", format!("{:.3}", r.round_trip.p50_ms));
    line("round_trip_p95_ms", format!("{:.3}", r.round_trip.p95_ms));
    line("round_trip_max_ms", format!("{:.3}", r.round_trip.max_ms));
    let c = &r.connections;
    line("subscriptions", c.subscriptions.to_string());
    line("delivered", c.delivered.to_string());
    line("push_connections", c.push_connections.to_string());
    line("stream_connections", c.stream_connections.to_string());
    line("pull_connections", c.pull_connections.to_string());
    line("wire_overhead_per_element", opt(c.wire_overhead_per_element));
    for l in &r.client_load {
        line(
            &format!("{}.points_served_per_min", l.node),
            format!("{:.3}", l.points_served_per_min),
        );
        line(
            &format!("{}.elements_sampled_per_min", l.node),
            format!("{:.3}", l.elements_sampled_per_min),
        );
    }
    for n in &r.notes {
        line("note", n.clone());
    }
    s
}

/// Writes the four CSVs and `summary.txt` into `out_dir`.
pub fn emit_report(r: &ExperimentReport, out_dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    std::fs::create_dir_all(out_dir).map_err(unwritable(out_dir))?;
    let p = |name: &str| out_dir.join(name);
    csv_file(
        &p("samples.csv"),
        &["request_id", "stream", "node", "sensor", "seq", "t_sent_us", "t_received_us", "duration_ms"],
        &r.samples,
    )?;
    csv_file(
        &p("shares.csv"),
        &["stream", "node", "sensor", "completions", "share_pct"],
        &r.completion_shares,
    )?;
    csv_file(
        &p("storage.csv"),
        &["t_ms", "bytes"],
        r.storage_series.iter().map(|s| (s.t_ms, s.bytes)),
    )?;
    csv_file(
        &p("work.csv"),
        &[
            "node",
            "elements_processed",
            "points_served",
            "queries_answered",
            "queries_rejected",
            "connections_opened",
            "connections_accepted",
            "connections_rejected",
            "bytes_in",
            "bytes_out",
        ],
        r.work.iter().map(|(node, w)| {
            (
                node,
                w.elements_processed,
                w.points_served,
                w.queries_answered,
                w.queries_rejected,
                w.connections_opened,
                w.connections_accepted,
                w.connections_rejected,
                w.bytes_in,
                w.bytes_out,
            )
        }),
    )?;
    let summary = p("summary.txt");
    std::fs::write(&summary, summary_text(r)).map_err(unwritable(&summary))?;
    Ok(["samples.csv", "shares.csv", "storage.csv", "work.csv", "summary.txt"]
        .iter()
        .map(|n| p(n))
        .collect())
}

pub fn comparison_text(pair: &PairedReport) -> String {
    let mut s = String::from("metric,persistent_stream,push\n");
    let (a, b) = (&pair.persistent, &pair.push);
    let mut row = |k: &str, x: String, y: String| {
        let _ = writeln!(s, "{k},{x},{y}");
    };
    row("completions", a.completions.to_string(), b.completions.to_string());
    row(
        "round_trip_mean_ms",
        format!("{:.3}", a.round_trip.mean_ms),
        format!("{:.3}", b.round_trip.mean_ms),
    );
    row(
        "round_trip_p95_ms",
        format!("{:.3}", a.round_trip.p95_ms),
        format!("{:.3}", b.round_trip.p95_ms),
    );
    row("share_cv", opt(a.share_cv), opt(b.share_cv));
    row(
        "connections",
        a.connections.stream_connections.to_string(),
        b.connections.push_connections.to_string(),
    );
    row(
        "delivered",
        a.connections.delivered.to_string(),
        b.connections.delivered.to_string(),
    );
    row(
        "wire_overhead_per_element",
        opt(a.connections.wire_overhead_per_element),
        opt(b.connections.wire_overhead_per_element),
    );
    s
}

/// Writes each run into its own subdirectory plus `comparison.csv`.
pub fn emit_paired(pair: &PairedReport, out_dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    let mut files = emit_report(&pair.persistent, &out_dir.join("persistent_stream"))?;
    files.extend(emit_report(&pair.push, &out_dir.join("push"))?);
    let cmp = out_dir.join("comparison.csv");
    std::fs::write(&cmp, comparison_text(pair)).map_err(unwritable(&cmp))?;
    files.push(cmp);
    Ok(files)
}
