//! Independent recomputation of the average time per request and the
//! completion shares straight from the raw event-log text.
//!
//! Shares nothing with [`super::metrics`] beyond the file format: no CSV
//! reader, no record type, integer arithmetic wherever it can be used.

use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct Recomputed {
    pub streams: Vec<String>,
    pub completions: Vec<u64>,
    pub shares: Vec<f64>,
    pub duration_us: u64,
    /// Rounded to the nearest millisecond; `None` without completions.
    pub avg_time_per_request_ms: Option<u64>,
}

#[derive(Debug, thiserror::Error)]
pub enum OracleError {
    #[error("cannot read log: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed log: {0}")]
    Malformed(String),
}

pub fn recompute_file(path: &Path) -> Result<Recomputed, OracleError> {
    recompute(&std::fs::read_to_string(path)?)
}

pub fn recompute(text: &str) -> Result<Recomputed, OracleError> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| OracleError::Malformed("empty".into()))?
        .split(',')
        .collect();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| *h == name)
            .ok_or_else(|| OracleError::Malformed(format!("no column {name}")))
    };
    let (ev, st, recv, sent) = (col("event")?, col("stream")?, col("t_received_us")?, col("t_sent_us")?);
    let rows: Vec<Vec<&str>> = lines.filter(|l| !l.is_empty()).map(|l| l.split(',').collect()).collect();
    let num = |row: &Vec<&str>, i: usize| -> Result<u64, OracleError> {
        row.get(i)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| OracleError::Malformed(format!("bad number in {row:?}")))
    };

    let mut start = None;
    let mut end = None;
    for row in &rows {
        match row[ev] {
            "start" if start.is_none() => start = Some(num(row, sent)?),
            "end" if end.is_none() => end = Some(num(row, sent)?),
            _ => {}
        }
    }
    let start = start.ok_or_else(|| OracleError::Malformed("no start".into()))?;
    let end = end.ok_or_else(|| OracleError::Malformed("no end".into()))?;

    let mut per_stream: BTreeMap<String, u64> = BTreeMap::new();
    for row in rows.iter().filter(|r| r[ev] == "stream") {
        per_stream.insert(row[st].to_string(), 0);
    }
    for row in rows.iter().filter(|r| r[ev] == "complete") {
        let t = num(row, recv)?;
        if t < start || t > end {
            continue;
        }
        if let Some(n) = per_stream.get_mut(row[st]) {
            *n += 1;
        }
    }
    let total: u64 = per_stream.values().sum();
    let duration_us = end - start;
    let avg = (total > 0).then(|| {
        // round(duration_us / 1000 / total) without floating point
        let den = 1000 * total as u128;
        ((duration_us as u128 + den / 2) / den) as u64
    });
    let shares = per_stream
        .values()
        .map(|&n| if total == 0 { 0.0 } else { n as f64 / total as f64 * 100.0 })
        .collect();
    Ok(Recomputed {
        streams: per_stream.keys().cloned().collect(),
        completions: per_stream.values().copied().collect(),
        shares,
        duration_us,
        avg_time_per_request_ms: avg,
    })
}
