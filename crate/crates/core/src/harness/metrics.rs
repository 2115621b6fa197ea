//! Metrics over an aggregator event log.
//!
//! Only `complete` rows whose receive time falls inside the
//! `[start, end]` window count. Streams are the ones declared by `stream`
//! rows, in id order, so a stream that never completed still gets a share
//! of zero.

use std::collections::BTreeMap;

use crate::node::events::{EventKind, EventRecord};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricsError {
    #[error("NO_COMPLETIONS: the log has no completed round trips")]
    NoCompletions,
    #[error("INCOMPLETE_LOG: {0}")]
    Incomplete(&'static str),
}

impl MetricsError {
    pub fn code(&self) -> &'static str {
        match self {
            MetricsError::NoCompletions => "NO_COMPLETIONS",
            MetricsError::Incomplete(_) => "INCOMPLETE_LOG",
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct StreamShare {
    pub stream: String,
    pub node: String,
    pub sensor: String,
    pub completions: u64,
    pub share_pct: f64,
}

/// Per-stream completion counts inside the experiment window.
#[derive(Debug, Clone, PartialEq)]
pub struct LogSummary {
    pub start_us: u64,
    pub end_us: u64,
    pub streams: Vec<StreamShare>,
    pub completions: u64,
    pub failures: u64,
}

impl LogSummary {
    pub fn duration_ms(&self) -> f64 {
        (self.end_us - self.start_us) as f64 / 1000.0
    }

    pub fn avg_time_per_request_ms(&self) -> Result<f64, MetricsError> {
        avg_time_per_request(self.duration_ms(), self.completions)
    }

    pub fn shares(&self) -> Vec<f64> {
        self.streams.iter().map(|s| s.share_pct).collect()
    }
}

/// Experiment duration divided by completed round trips.
pub fn avg_time_per_request(duration_ms: f64, completions: u64) -> Result<f64, MetricsError> {
    if completions == 0 {
        return Err(MetricsError::NoCompletions);
    }
    Ok(duration_ms / completions as f64)
}

/// `100 · s_i / Σ s`.
pub fn completion_shares(counts: &[u64]) -> Result<Vec<f64>, MetricsError> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(MetricsError::NoCompletions);
    }
    Ok(counts.iter().map(|&c| 100.0 * c as f64 / total as f64).collect())
}

/// Population standard deviation over the mean.
pub fn coefficient_of_variation(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if mean == 0.0 {
        return None;
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    Some(var.sqrt() / mean)
}

pub fn in_window(r: &EventRecord, start_us: u64, end_us: u64) -> bool {
    r.kind() == Some(EventKind::Complete) && (start_us..=end_us).contains(&r.t_received_us)
}

pub fn summarize(events: &[EventRecord]) -> Result<LogSummary, MetricsError> {
    let start = events
        .iter()
        .find(|r| r.kind() == Some(EventKind::Start))
        .ok_or(MetricsError::Incomplete("no start marker"))?
        .t_sent_us;
    let end = events
        .iter()
        .find(|r| r.kind() == Some(EventKind::End))
        .ok_or(MetricsError::Incomplete("no end marker"))?
        .t_sent_us;
    let mut declared: BTreeMap<&str, (&str, &str, u64)> = BTreeMap::new();
    for r in events.iter().filter(|r| r.kind() == Some(EventKind::Stream)) {
        declared.insert(&r.stream, (&r.node, &r.sensor, 0));
    }
    let mut failures = 0;
    for r in events {
        if in_window(r, start, end) {
            if let Some(entry) = declared.get_mut(r.stream.as_str()) {
                entry.2 += 1;
            }
        } else if r.kind() == Some(EventKind::Fail) && (start..=end).contains(&r.t_received_us) {
            failures += 1;
        }
    }
    let counts: Vec<u64> = declared.values().map(|v| v.2).collect();
    let completions = counts.iter().sum();
    let shares = completion_shares(&counts).unwrap_or_else(|_| vec![0.0; counts.len()]);
    let streams = declared
        .into_iter()
        .zip(shares)
        .map(|((stream, (node, sensor, completions)), share_pct)| StreamShare {
            stream: stream.into(),
            node: node.into(),
            sensor: sensor.into(),
            completions,
            share_pct,
        })
        .collect();
    Ok(LogSummary {
        start_us: start,
        end_us: end,
        streams,
        completions,
        failures,
    })
}

/// Mean and percentiles of a set of durations.
#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize)]
pub struct RoundTripStats {
    pub count: u64,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub max_ms: f64,
}

pub fn round_trip_stats(durations_ms: &[f64]) -> RoundTripStats {
    if durations_ms.is_empty() {
        return RoundTripStats::default();
    }
    let mut v = durations_ms.to_vec();
    v.sort_by(f64::total_cmp);
    // nearest rank
    let pct = |p: f64| v[((p * v.len() as f64).ceil() as usize).clamp(1, v.len()) - 1];
    RoundTripStats {
        count: v.len() as u64,
        mean_ms: v.iter().sum::<f64>() / v.len() as f64,
        p50_ms: pct(0.5),
        p95_ms: pct(0.95),
        max_ms: v[v.len() - 1],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn average_is_duration_over_completions() {
        assert_eq!(avg_time_per_request(60_000.0, 120).unwrap(), 500.0);
        assert_eq!(avg_time_per_request(60_000.0, 1).unwrap(), 60_000.0);
        assert_eq!(avg_time_per_request(60_000.0, 0), Err(MetricsError::NoCompletions));
    }

    #[test]
    fn shares_examples() {
        assert_eq!(completion_shares(&[25, 25, 25, 25]).unwrap(), vec![25.0; 4]);
        assert_eq!(completion_shares(&[90, 10]).unwrap(), vec![90.0, 10.0]);
        assert_eq!(completion_shares(&[0, 0]), Err(MetricsError::NoCompletions));
        assert_eq!(coefficient_of_variation(&[25.0; 4]), Some(0.0));
        let cv = coefficient_of_variation(&[90.0, 10.0]).unwrap();
        assert!((cv - 0.8).abs() < 1e-12);
    }

    #[test]
    fn summary_uses_the_window_and_declared_streams() {
        let c = |stream: &str, t: u64| EventRecord {
            event: Some(EventKind::Complete),
            stream: stream.into(),
            t_received_us: t,
            ..Default::default()
        };
        let log = vec![
            EventRecord::stream("a", "n", "s0"),
            EventRecord::stream("b", "n", "s1"),
            EventRecord::stream("c", "n", "s2"),
            c("a", 50),
            EventRecord::boundary(EventKind::Start, 100),
            c("a", 150),
            c("a", 160),
            c("b", 170),
            EventRecord::boundary(EventKind::End, 1_000_100),
            c("b", 2_000_000),
        ];
        let s = summarize(&log).unwrap();
        assert_eq!(s.completions, 3);
        assert_eq!(s.duration_ms(), 1000.0);
        assert_eq!(s.streams.iter().map(|x| x.completions).collect::<Vec<_>>(), vec![2, 1, 0]);
        assert!((s.shares().iter().sum::<f64>() - 100.0).abs() < 1e-9);
        assert!((s.avg_time_per_request_ms().unwrap() - 1000.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn percentiles_use_nearest_rank() {
        let xs: Vec<f64> = (1..=100).map(f64::from).collect();
        let s = round_trip_stats(&xs);
        assert_eq!((s.p50_ms, s.p95_ms, s.max_ms), (50.0, 95.0, 100.0));
        assert_eq!(s.mean_ms, 50.5);
    }
}
