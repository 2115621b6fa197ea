//! Experiment orchestration: spawns an aggregator and its clients as
//! separate processes, lets the aggregator drive load for the configured
//! duration, then turns its event log into a report.
//!
//! ```text
//! bench run --spec topo.toml --out results/
//! bench compare-modes --spec topo.toml
//! bench storage --history 10000 --duration 600
//! bench recompute --log results/events.csv
//! ```

pub mod metrics;
pub mod oracle;
pub mod outage;
pub mod process;
pub mod report;
pub mod storage_bench;

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::model::{FieldSchema, ParamValue, SourceSpec, VirtualSensorConfig, MIN_SAMPLING_INTERVAL_MS};
use crate::node::config::{AggregatorConfig, LoadMode};
use crate::node::events::{read_log, EventKind};
use crate::node::NodeConfig;
use crate::storage::{StoragePoint, StorageSeries};
use crate::wire::frame::{StatusReport, WorkCounters};
use crate::wire::{text::TextError, WireError};

use metrics::{RoundTripStats, StreamShare};
use process::NodeProcess;

pub use report::{emit_paired, emit_report};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("SPAWN_FAILED: {0}")]
    SpawnFailed(String),
    #[error("SPEC_INVALID: {0}")]
    SpecInvalid(String),
    #[error("IO_UNWRITABLE: {path}: {source}")]
    Unwritable { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("unexpected reply: {0}")]
    Unexpected(String),
}

impl HarnessError {
    pub fn code(&self) -> &str {
        match self {
            HarnessError::SpawnFailed(_) => "SPAWN_FAILED",
            HarnessError::SpecInvalid(_) => "SPEC_INVALID",
            HarnessError::Unwritable { .. } => "IO_UNWRITABLE",
            HarnessError::Wire(e) => e.code(),
            HarnessError::Unexpected(_) => "UNEXPECTED",
        }
    }
}

fn d_sensors_per_client() -> usize {
    13
}
fn d_interval() -> u64 {
    1000
}
fn d_history() -> u64 {
    600
}
fn d_seed() -> u64 {
    1
}

/// An experiment topology. Written in the same TOML dialect as node
/// configs.
///
/// With `sensors` empty, each client gets `sensors_per_client` seeded
/// random walks named `s00`, `s01`, ...
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologySpec {
    pub clients: usize,
    #[serde(default = "d_sensors_per_client")]
    pub sensors_per_client: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sensors: Vec<VirtualSensorConfig>,
    pub mode: LoadMode,
    pub requests_per_client: usize,
    pub duration_s: u64,
    #[serde(default = "d_interval")]
    pub sampling_interval_ms: u64,
    #[serde(default = "d_history")]
    pub history_size: u64,
    #[serde(default = "d_seed")]
    pub seed: u64,
    /// Aggregator capacity limit in operations per second.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub throttle_ops_per_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plugin_dir: Option<PathBuf>,
    #[serde(default = "d_interval")]
    pub storage_interval_ms: u64,
}

impl TopologySpec {
    pub fn new(clients: usize, mode: LoadMode, requests_per_client: usize, duration_s: u64) -> Self {
        TopologySpec {
            clients,
            sensors_per_client: d_sensors_per_client(),
            sensors: vec![],
            mode,
            requests_per_client,
            duration_s,
            sampling_interval_ms: d_interval(),
            history_size: d_history(),
            seed: d_seed(),
            throttle_ops_per_s: None,
            plugin_dir: None,
            storage_interval_ms: d_interval(),
        }
    }

    pub fn parse(s: &str) -> Result<Self, TextError> {
        crate::wire::text::parse(s)
    }

    pub fn encode(&self) -> Result<String, TextError> {
        crate::wire::text::encode(self)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::SpecInvalid(format!("{}: {e}", path.display())))?;
        let mut spec = Self::parse(&text).map_err(|e| HarnessError::SpecInvalid(e.to_string()))?;
        if let (Some(p), Some(dir)) = (&spec.plugin_dir, path.parent()) {
            if p.is_relative() {
                spec.plugin_dir = Some(dir.join(p));
            }
        }
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |s: &str| Err(HarnessError::SpecInvalid(s.into()));
        if self.clients == 0 {
            return bad("at least one client is needed");
        }
        if self.requests_per_client == 0 {
            return bad("requests_per_client must be at least 1");
        }
        if self.duration_s < 10 {
            return bad("duration_s must be at least 10");
        }
        if self.sensors.is_empty() && self.sensors_per_client == 0 {
            return bad("clients need at least one sensor");
        }
        if self.sampling_interval_ms < MIN_SAMPLING_INTERVAL_MS {
            return bad("sampling_interval_ms is below the minimum");
        }
        Ok(())
    }

    pub fn client_id(i: usize) -> String {
        format!("client-{i}")
    }

    pub fn client_sensors(&self, i: usize) -> Vec<VirtualSensorConfig> {
        if !self.sensors.is_empty() {
            return self.sensors.clone();
        }
        (0..self.sensors_per_client)
            .map(|j| VirtualSensorConfig {
                name: format!("s{j:02}"),
                history_size: self.history_size,
                sampling_interval: self.sampling_interval_ms,
                source: SourceSpec {
                    plugin: "random_walk".into(),
                    params: [(
                        "seed".to_string(),
                        ParamValue::Int((self.seed as i64).wrapping_mul(10_007) + (i * 100 + j) as i64),
                    )]
                    .into_iter()
                    .collect(),
                },
                processors: vec![],
                output_schema: vec![FieldSchema::numeric("value", "")],
            })
            .collect()
    }

    pub fn client_config(&self, i: usize, coordinator: &str) -> NodeConfig {
        let mut cfg = NodeConfig::new(Self::client_id(i));
        cfg.listen = "127.0.0.1:0".into();
        cfg.coordinator = Some(coordinator.into());
        cfg.plugin_dir = self.plugin_dir.clone();
        cfg.sensors = self.client_sensors(i);
        cfg
    }

    pub fn aggregator_config(&self, event_log: &Path) -> NodeConfig {
        let mut cfg = NodeConfig::new("aggregator");
        cfg.listen = "127.0.0.1:0".into();
        cfg.aggregator = Some(AggregatorConfig {
            mode: self.mode,
            requests_per_client: self.requests_per_client,
            expected_clients: self.clients,
            duration_s: self.duration_s,
            interval_ms: self.sampling_interval_ms,
            event_log: event_log.to_path_buf(),
            throttle_ops_per_s: self.throttle_ops_per_s,
        });
        cfg
    }
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub node_bin: Option<PathBuf>,
    /// Configs, node logs and the event log go here.
    pub work_dir: PathBuf,
    /// Kills every client right after it has started, before any request
    /// reaches it.
    pub kill_clients: bool,
    pub registration_timeout: Duration,
}

impl RunOptions {
    pub fn in_dir(dir: impl Into<PathBuf>) -> Self {
        RunOptions {
            node_bin: None,
            work_dir: dir.into(),
            kill_clients: false,
            registration_timeout: Duration::from_secs(30),
        }
    }
}

/// One completed round trip as logged by the aggregator.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleRow {
    pub request_id: String,
    pub stream: String,
    pub node: String,
    pub sensor: String,
    pub seq: Option<u64>,
    pub t_sent_us: u64,
    pub t_received_us: u64,
    pub duration_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct ConnectionCounts {
    pub subscriptions: u64,
    /// Elements accepted by the aggregator's inbox, duplicates included.
    pub delivered: u64,
    pub push_connections: u64,
    pub stream_connections: u64,
    pub pull_connections: u64,
    /// Bytes on the wire beyond the element payload, per delivered
    /// element, summed over the publishers.
    pub wire_overhead_per_element: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct ClientLoad {
    pub node: String,
    pub points_served_per_min: f64,
    pub elements_sampled_per_min: f64,
    pub completions_per_min: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub spec: TopologySpec,
    /// False when anything went wrong; `notes` says what.
    pub complete: bool,
    pub notes: Vec<String>,
    pub event_log: Option<PathBuf>,
    pub samples: Vec<SampleRow>,
    pub window_ms: f64,
    pub completions: u64,
    pub avg_time_per_request_ms: Option<f64>,
    pub completion_shares: Vec<StreamShare>,
    pub share_cv: Option<f64>,
    pub round_trip: RoundTripStats,
    pub storage_series: Vec<StoragePoint>,
    pub throughput_points_per_min: f64,
    pub client_load: Vec<ClientLoad>,
    pub connections: ConnectionCounts,
    pub work: Vec<(String, WorkCounters)>,
}

impl ExperimentReport {
    pub fn empty(spec: TopologySpec) -> Self {
        ExperimentReport {
            spec,
            complete: false,
            notes: vec![],
            event_log: None,
            samples: vec![],
            window_ms: 0.0,
            completions: 0,
            avg_time_per_request_ms: None,
            completion_shares: vec![],
            share_cv: None,
            round_trip: RoundTripStats::default(),
            storage_series: vec![],
            throughput_points_per_min: 0.0,
            client_load: vec![],
            connections: ConnectionCounts::default(),
            work: vec![],
        }
    }

    /// Fills in every metric that comes from the event log.
    pub fn absorb_log(&mut self, path: &Path) {
        self.event_log = Some(path.to_path_buf());
        let events = match read_log(path) {
            Ok(e) => e,
            Err(e) => {
                self.notes.push(format!("event log unreadable: {e}"));
                return;
            }
        };
        let summary = match metrics::summarize(&events) {
            Ok(s) => s,
            Err(e) => {
                self.notes.push(e.to_string());
                return;
            }
        };
        self.samples = events
            .iter()
            .filter(|r| metrics::in_window(r, summary.start_us, summary.end_us))
            .map(|r| SampleRow {
                request_id: r.request_id.clone(),
                stream: r.stream.clone(),
                node: r.node.clone(),
                sensor: r.sensor.clone(),
                seq: r.seq,
                t_sent_us: r.t_sent_us,
                t_received_us: r.t_received_us,
                duration_ms: r.t_received_us.saturating_sub(r.t_sent_us) as f64 / 1000.0,
            })
            .collect();
        self.window_ms = summary.duration_ms();
        self.completions = summary.completions;
        match summary.avg_time_per_request_ms() {
            Ok(v) => self.avg_time_per_request_ms = Some(v),
            Err(e) => self.notes.push(e.to_string()),
        }
        self.share_cv = if summary.completions > 0 {
            metrics::coefficient_of_variation(&summary.shares())
        } else {
            None
        };
        self.completion_shares = summary.streams;
        let durations: Vec<f64> = self.samples.iter().map(|s| s.duration_ms).collect();
        self.round_trip = metrics::round_trip_stats(&durations);
        let minutes = self.window_ms / 60_000.0;
        if minutes > 0.0 {
            self.throughput_points_per_min = self.completions as f64 / minutes;
        }
        let fails = events.iter().filter(|r| r.kind() == Some(EventKind::Fail)).count();
        if fails > 0 {
            tracing::debug!(fails, "failed requests in log");
        }
    }

    fn completions_by_node(&self, node: &str) -> u64 {
        self.samples.iter().filter(|s| s.node == node).count() as u64
    }
}

/// Both runs of a [`compare_modes`] pair.
#[derive(Debug, Clone)]
pub struct PairedReport {
    pub persistent: ExperimentReport,
    pub push: ExperimentReport,
}

struct Snapshot {
    at: Instant,
    clients: Vec<Option<StatusReport>>,
}

async fn client_statuses(clients: &[NodeProcess]) -> Vec<Option<StatusReport>> {
    let mut out = Vec::with_capacity(clients.len());
    for c in clients {
        out.push(c.status().await.ok());
    }
    out
}

/// Runs one experiment end to end.
pub async fn run_experiment(spec: &TopologySpec, opts: &RunOptions) -> Result<ExperimentReport, HarnessError> {
    spec.validate()?;
    let bin = process::node_binary(opts.node_bin.as_deref())?;
    let dir = std::path::absolute(&opts.work_dir).map_err(|source| HarnessError::Unwritable {
        path: opts.work_dir.clone(),
        source,
    })?;
    std::fs::create_dir_all(&dir).map_err(|source| HarnessError::Unwritable {
        path: dir.clone(),
        source,
    })?;
    let events = dir.join("events.csv");
    let _ = std::fs::remove_file(&events);

    let mut aggregator = NodeProcess::spawn(&bin, &spec.aggregator_config(&events), &dir, None).await?;
    let mut clients = Vec::new();
    for i in 0..spec.clients {
        match NodeProcess::spawn(&bin, &spec.client_config(i, &aggregator.address), &dir, None).await {
            Ok(mut c) => {
                if opts.kill_clients {
                    c.kill().await;
                }
                clients.push(c);
            }
            Err(e) => {
                for c in &mut clients {
                    c.kill().await;
                }
                aggregator.kill().await;
                return Err(e);
            }
        }
    }

    let mut report = ExperimentReport::empty(spec.clone());
    let mut series = StorageSeries::new(spec.storage_interval_ms);
    let spawned = Instant::now();
    let deadline = opts.registration_timeout + Duration::from_secs(spec.duration_s + 30);
    let mut baseline: Option<Vec<Option<StatusReport>>> = None;
    let mut began: Option<Snapshot> = None;
    let mut ended: Option<Snapshot> = None;
    let mut last_clients: Vec<Option<StatusReport>> = vec![None; clients.len()];
    let mut lost = vec![false; clients.len()];
    loop {
        let poll = if began.is_some() { 250 } else { 50 };
        tokio::time::sleep(Duration::from_millis(poll)).await;
        for (c, gone) in clients.iter_mut().zip(lost.iter_mut()) {
            if !*gone && !c.is_running() {
                *gone = true;
                report.notes.push(format!("{} exited during the run", c.node_id));
            }
        }
        let agg = match aggregator.status().await {
            Ok(s) => s,
            Err(e) => {
                if !aggregator.is_running() {
                    report.notes.push("aggregator exited during the run".into());
                    break;
                }
                tracing::debug!("aggregator status: {e}");
                continue;
            }
        };
        let state = agg.aggregator.map(|a| a.state).unwrap_or_default();
        let now = client_statuses(&clients).await;
        for (slot, s) in last_clients.iter_mut().zip(&now) {
            if s.is_some() {
                slot.clone_from(s);
            }
        }
        if state == "failed" {
            report.notes.push("aggregator could not open its event log".into());
            break;
        }
        if state == "waiting" {
            // no load is driven before the run starts, so the last
            // waiting poll is an exact baseline for the counters
            baseline = Some(now.clone());
        }
        if state != "waiting" && began.is_none() {
            began = Some(Snapshot {
                at: Instant::now(),
                clients: baseline.take().unwrap_or_else(|| now.clone()),
            });
        }
        if let Some(b) = &began {
            let bytes = now.iter().flatten().map(|s| s.storage_bytes).sum();
            series.observe(b.at.elapsed().as_millis() as u64, bytes);
        }
        if state == "done" {
            ended = Some(Snapshot {
                at: Instant::now(),
                clients: now,
            });
            break;
        }
        if state == "waiting" && spawned.elapsed() > opts.registration_timeout {
            report.notes.push("clients did not register in time".into());
            break;
        }
        if spawned.elapsed() > deadline {
            report.notes.push("run did not finish in time".into());
            break;
        }
    }

    for c in &mut clients {
        c.kill().await;
    }
    // let in-flight deliveries land before reading the counters
    tokio::time::sleep(Duration::from_millis(300)).await;
    let agg_final = aggregator.status().await.ok();
    aggregator.kill().await;

    report.storage_series = series.into_points();
    report.absorb_log(&events);

    let mut conns = ConnectionCounts::default();
    let mut overhead = (0u64, 0u64, 0u64);
    for s in last_clients.iter().flatten() {
        for sub in &s.subscriptions {
            conns.subscriptions += 1;
            overhead.0 += sub.wire_bytes;
            overhead.1 += sub.payload_bytes;
            overhead.2 += sub.delivered;
        }
        report.work.push((s.node_id.clone(), s.work.clone()));
    }
    if overhead.2 > 0 {
        conns.wire_overhead_per_element = Some((overhead.0 as f64 - overhead.1 as f64) / overhead.2 as f64);
    }
    if let Some(a) = &agg_final {
        if let Some(st) = &a.aggregator {
            conns.delivered = st.deliveries + st.duplicate_deliveries;
            conns.push_connections = st.push_connections;
            conns.stream_connections = st.stream_connections;
        }
        if spec.mode == LoadMode::Pull {
            conns.pull_connections = a.work.connections_opened;
        }
        report.work.push((a.node_id.clone(), a.work.clone()));
    }
    report.connections = conns;

    if let (Some(b), Some(e)) = (&began, &ended) {
        let window_min = report.window_ms / 60_000.0;
        let minutes = if window_min > 0.0 {
            window_min
        } else {
            (e.at - b.at).as_secs_f64() / 60.0
        };
        for (i, (s0, s1)) in b.clients.iter().zip(&e.clients).enumerate() {
            let node = TopologySpec::client_id(i);
            let (Some(s0), Some(s1)) = (s0, s1) else {
                continue;
            };
            let completions = report.completions_by_node(&node) as f64;
            report.client_load.push(ClientLoad {
                points_served_per_min: (s1.work.points_served - s0.work.points_served) as f64 / minutes,
                elements_sampled_per_min: (s1.work.elements_processed - s0.work.elements_processed) as f64 / minutes,
                completions_per_min: if window_min > 0.0 { completions / window_min } else { 0.0 },
                node,
            });
        }
    }
    report.complete = report.notes.is_empty() && report.avg_time_per_request_ms.is_some();
    Ok(report)
}

/// Runs the same topology and seeds once with persistent streams and once
/// with push delivery.
pub async fn compare_modes(spec: &TopologySpec, opts: &RunOptions) -> Result<PairedReport, HarnessError> {
    let run = |mode: LoadMode| {
        let mut s = spec.clone();
        s.mode = mode;
        let mut o = opts.clone();
        o.work_dir = opts.work_dir.join(mode.as_str());
        async move { run_experiment(&s, &o).await }
    };
    let persistent = run(LoadMode::PersistentStream).await?;
    let push = run(LoadMode::Push).await?;
    Ok(PairedReport { persistent, push })
}
