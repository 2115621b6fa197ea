//! Subscriber outage scenario.
//!
//! A client pushes every sensor to a sink node with `persistent_delivery`.
//! The sink is killed, left down for a while, then restarted on the same
//! address and appending to the same delivery log. A twin client with the
//! same seeds runs untouched alongside. Afterwards the client's windows are
//! compared with the twin's by seq, and the delivery log is checked for
//! every element produced during the outage.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use serde::Deserialize;

use crate::model::{FieldSchema, ParamValue, SourceSpec, StreamElement, Value, VirtualSensorConfig};
use crate::node::{now_ms, NodeConfig};
use crate::wire::frame::{DeliveryMode, SubscribeRequest};
use crate::wire::http::Method;
use crate::wire::{self, Message};

use super::process::{self, NodeProcess};
use super::{HarnessError, RunOptions};

#[derive(Debug, Clone, PartialEq)]
pub struct OutageSpec {
    pub sensors: usize,
    pub sampling_interval_ms: u64,
    pub history_size: u64,
    pub warmup_s: u64,
    pub outage_s: u64,
    pub recovery_timeout_s: u64,
    pub seed: i64,
}

impl Default for OutageSpec {
    fn default() -> Self {
        OutageSpec {
            sensors: 3,
            sampling_interval_ms: 1000,
            history_size: 120,
            warmup_s: 10,
            outage_s: 60,
            recovery_timeout_s: 30,
            seed: 7,
        }
    }
}

impl OutageSpec {
    fn sensors(&self) -> Vec<VirtualSensorConfig> {
        (0..self.sensors)
            .map(|j| VirtualSensorConfig {
                name: format!("s{j:02}"),
                history_size: self.history_size,
                sampling_interval: self.sampling_interval_ms,
                source: SourceSpec {
                    plugin: "random_walk".into(),
                    params: [("seed".to_string(), ParamValue::Int(self.seed * 100 + j as i64))]
                        .into_iter()
                        .collect(),
                },
                processors: vec![],
                output_schema: vec![FieldSchema::numeric("value", "")],
            })
            .collect()
    }
}

/// What the sink's log shows for one subscription.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayCheck {
    pub sensor: String,
    pub subscription: String,
    pub received: usize,
    /// Seqs the client produced while the sink was down.
    pub produced_during_outage: Vec<u64>,
    pub missing: Vec<u64>,
    /// Log order never goes backwards; a re-delivery of the same seq is
    /// allowed.
    pub in_order: bool,
    /// Received seqs form one unbroken run.
    pub contiguous: bool,
    pub gap_total: u64,
}

impl ReplayCheck {
    pub fn ok(&self) -> bool {
        !self.produced_during_outage.is_empty() && self.missing.is_empty() && self.in_order && self.contiguous && self.gap_total == 0
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct OutageReport {
    pub compared_elements: usize,
    pub mismatches: Vec<String>,
    pub replays: Vec<ReplayCheck>,
    pub notes: Vec<String>,
}

impl OutageReport {
    pub fn windows_match(&self) -> bool {
        self.compared_elements > 0 && self.mismatches.is_empty()
    }

    pub fn replay_ok(&self) -> bool {
        !self.replays.is_empty() && self.replays.iter().all(ReplayCheck::ok)
    }
}

#[derive(Debug, Deserialize)]
struct LogRow {
    subscription: String,
    sensor: String,
    seq: u64,
    gap: u64,
}

async fn window(address: &str, sensor: &str, n: u64) -> Result<Vec<StreamElement>, HarnessError> {
    let target = format!("/sensor/{sensor}/latest?n={n}");
    let (_, frame) = wire::request_once(address, Method::Get, &target, None, Duration::from_secs(5)).await?;
    match frame.message {
        Message::QueryResult(r) => Ok(r.elements),
        other => Err(HarnessError::Unexpected(format!("{other:?}"))),
    }
}

pub async fn run_outage(spec: &OutageSpec, opts: &RunOptions) -> Result<OutageReport, HarnessError> {
    let bin = process::node_binary(opts.node_bin.as_deref())?;
    let dir = std::path::absolute(&opts.work_dir).map_err(|source| HarnessError::Unwritable {
        path: opts.work_dir.clone(),
        source,
    })?;
    std::fs::create_dir_all(&dir).map_err(|source| HarnessError::Unwritable {
        path: dir.clone(),
        source,
    })?;
    let log: PathBuf = dir.join("deliveries.csv");
    let _ = std::fs::remove_file(&log);

    let mut sink_cfg = NodeConfig::new("sink");
    sink_cfg.listen = "127.0.0.1:0".into();
    sink_cfg.delivery_log = Some(log.clone());
    let mut sink = NodeProcess::spawn(&bin, &sink_cfg, &dir, None).await?;

    let mut client_cfg = NodeConfig::new("client");
    client_cfg.listen = "127.0.0.1:0".into();
    client_cfg.sensors = spec.sensors();
    client_cfg.subscriptions = client_cfg
        .sensors
        .iter()
        .map(|s| SubscribeRequest {
            sensor: s.name.clone(),
            subscriber: sink.address.clone(),
            mode: DeliveryMode::Push,
            persistent_delivery: true,
        })
        .collect();
    let mut twin_cfg = NodeConfig::new("twin");
    twin_cfg.listen = "127.0.0.1:0".into();
    twin_cfg.sensors = spec.sensors();
    let mut client = NodeProcess::spawn(&bin, &client_cfg, &dir, None).await?;
    let mut twin = NodeProcess::spawn(&bin, &twin_cfg, &dir, None).await?;

    let mut report = OutageReport::default();
    tokio::time::sleep(Duration::from_secs(spec.warmup_s)).await;
    sink.kill().await;
    let down_at = now_ms();
    tokio::time::sleep(Duration::from_secs(spec.outage_s)).await;
    let up_at = now_ms();
    let address = sink.address.clone();
    let mut sink = NodeProcess::spawn(&bin, &sink_cfg, &dir, Some(&address)).await?;

    // recovered once every subscription is past what existed at restart
    let targets: BTreeMap<String, u64> = client
        .status()
        .await?
        .sensors
        .iter()
        .map(|s| (s.name.clone(), s.latest_seq.unwrap_or(0)))
        .collect();
    let started = Instant::now();
    let subs = loop {
        let st = client.status().await?;
        let caught_up = st
            .subscriptions
            .iter()
            .all(|s| s.cursor.is_some_and(|c| c > targets.get(&s.sensor).copied().unwrap_or(0)));
        if caught_up {
            break st.subscriptions;
        }
        if started.elapsed() > Duration::from_secs(spec.recovery_timeout_s) {
            report.notes.push("subscriber did not catch up in time".into());
            break st.subscriptions;
        }
        tokio::time::sleep(Duration::from_millis(250)).await;
    };

    for s in &client_cfg.sensors {
        let mine = window(&client.address, &s.name, spec.history_size).await?;
        let theirs = window(&twin.address, &s.name, spec.history_size).await?;
        let theirs: BTreeMap<u64, Vec<Value>> = theirs.into_iter().map(|e| (e.seq, e.values)).collect();
        for e in &mine {
            if let Some(v) = theirs.get(&e.seq) {
                report.compared_elements += 1;
                if *v != e.values {
                    report.mismatches.push(format!("{} seq {}", s.name, e.seq));
                }
            }
        }
        let outage: Vec<u64> = mine
            .iter()
            .filter(|e| (down_at..=up_at).contains(&e.timestamp))
            .map(|e| e.seq)
            .rev()
            .collect();
        let Some(sub) = subs.iter().find(|x| x.sensor == s.name) else {
            report.notes.push(format!("no subscription for {}", s.name));
            continue;
        };
        report.replays.push(ReplayCheck {
            sensor: s.name.clone(),
            subscription: sub.id.clone(),
            received: 0,
            produced_during_outage: outage,
            missing: vec![],
            in_order: true,
            contiguous: true,
            gap_total: 0,
        });
    }
    sink.kill().await;
    client.kill().await;
    twin.kill().await;

    let rows: Vec<LogRow> = match csv::Reader::from_path(&log) {
        Ok(mut r) => r.deserialize().collect::<Result<_, _>>().unwrap_or_else(|e| {
            report.notes.push(format!("delivery log: {e}"));
            vec![]
        }),
        Err(e) => {
            report.notes.push(format!("delivery log: {e}"));
            vec![]
        }
    };
    for check in &mut report.replays {
        let seqs: Vec<u64> = rows
            .iter()
            .filter(|r| r.subscription == check.subscription && r.sensor == check.sensor)
            .map(|r| {
                check.gap_total += r.gap;
                r.seq
            })
            .collect();
        check.received = seqs.len();
        check.in_order = seqs.windows(2).all(|w| w[1] >= w[0]);
        let unique: BTreeSet<u64> = seqs.iter().copied().collect();
        check.contiguous = match (unique.first(), unique.last()) {
            (Some(a), Some(b)) => (b - a + 1) as usize == unique.len(),
            _ => false,
        };
        check.missing = check
            .produced_during_outage
            .iter()
            .filter(|s| !unique.contains(s))
            .copied()
            .collect();
    }
    Ok(report)
}
