//! The aggregator role: waits for its clients to register, opens the
//! request streams, and logs every completed round trip for the duration
//! of the experiment.
//!
//! Stream `j` of a client targets that client's sensor `j mod n`, with the
//! client's sensors sorted by name, so 30 streams over 13 sensors give 13
//! primary views and 17 duplicates.

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use tokio::sync::mpsc;

use crate::wire::frame::{AggregatorStatus, QueryResult};
use crate::wire::http::Method;
use crate::wire::{self, Frame, Message};

use super::backoff::{seed_for, Backoff};
use super::config::{AggregatorConfig, LoadMode};
use super::events::{EventKind, EventLog, EventRecord};
use super::{delivery, now_us, subscribe_remote, NodeShared, RoundTripSample};

/// One request stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamPlan {
    pub id: String,
    pub node: String,
    pub address: String,
    pub sensor: String,
}

/// Assigns `per_client` streams to each `(node_id, address, sensor names)`.
pub fn plan_streams(clients: &[(String, String, Vec<String>)], per_client: usize) -> Vec<StreamPlan> {
    let mut plans = Vec::new();
    for (node, address, sensors) in clients {
        let mut sensors = sensors.clone();
        sensors.sort();
        if sensors.is_empty() {
            continue;
        }
        for j in 0..per_client {
            plans.push(StreamPlan {
                id: format!("{node}/{j:02}"),
                node: node.clone(),
                address: address.clone(),
                sensor: sensors[j % sensors.len()].clone(),
            });
        }
    }
    plans
}

fn set_state(shared: &NodeShared, f: impl FnOnce(&mut AggregatorStatus)) {
    if let Some(s) = shared.aggregator.lock().as_mut() {
        f(s);
    }
}

pub(crate) async fn run(shared: Arc<NodeShared>, cfg: AggregatorConfig) {
    *shared.aggregator.lock() = Some(AggregatorStatus {
        state: "waiting".into(),
        mode: cfg.mode.as_str().into(),
        ..Default::default()
    });
    let path = shared.config.resolve(&cfg.event_log);
    let mut log = match EventLog::open(&path) {
        Ok(l) => l,
        Err(e) => {
            tracing::error!(path = %path.display(), "cannot open event log: {e}");
            set_state(&shared, |s| s.state = "failed".into());
            return;
        }
    };

    let clients: Vec<(String, String, Vec<String>)> = loop {
        {
            let peers = shared.peers.lock();
            if peers.len() >= cfg.expected_clients {
                break peers
                    .values()
                    .take(cfg.expected_clients)
                    .map(|p| {
                        let names = p.sensors.iter().map(|s| s.name.clone()).collect();
                        (p.node_id.clone(), p.address.clone(), names)
                    })
                    .collect();
            }
        }
        tokio::time::sleep(Duration::from_millis(100)).await;
    };
    let plans = plan_streams(&clients, cfg.requests_per_client);
    set_state(&shared, |s| s.streams = plans.len() as u64);

    let (tx, mut rx) = mpsc::unbounded_channel::<EventRecord>();
    let writer = tokio::spawn(async move {
        while let Some(r) = rx.recv().await {
            if let Err(e) = log.append(&r) {
                tracing::error!("event log write failed: {e}");
            }
        }
    });
    for p in &plans {
        let _ = tx.send(EventRecord::stream(&p.id, &p.node, &p.sensor));
    }

    let running = Arc::new(AtomicBool::new(false));
    let mut tasks = Vec::new();
    if let Some(mode) = cfg.mode.delivery() {
        let mut by_sub: HashMap<String, StreamPlan> = HashMap::new();
        for p in &plans {
            let mut backoff = Backoff::new(seed_for(&p.id));
            let sub = loop {
                match subscribe_remote(&shared, &p.address, &p.sensor, mode, true).await {
                    Ok(sub) => break sub,
                    Err(e) => {
                        tracing::warn!(stream = %p.id, "subscribe failed: {e}");
                        tokio::time::sleep(backoff.next_delay()).await;
                    }
                }
            };
            if cfg.mode == LoadMode::PersistentStream {
                tasks.push(shared.spawn(delivery::follow_loop(
                    shared.clone(),
                    p.address.clone(),
                    sub.clone(),
                )));
            }
            by_sub.insert(sub.id, p.clone());
        }
        let mut deliveries = shared.inbox.tap();
        let (shared2, tx2, running2) = (shared.clone(), tx.clone(), running.clone());
        tasks.push(shared.spawn(async move {
            while let Some(d) = deliveries.recv().await {
                set_state(&shared2, |s| {
                    s.deliveries += 1;
                    s.duplicate_deliveries = shared2.inbox.duplicates.load(Ordering::Relaxed);
                });
                let Some(plan) = by_sub.get(&d.subscription) else {
                    continue;
                };
                if !running2.load(Ordering::Relaxed) {
                    continue;
                }
                set_state(&shared2, |s| s.completions += 1);
                let _ = tx2.send(EventRecord {
                    event: Some(EventKind::Complete),
                    stream: plan.id.clone(),
                    node: plan.node.clone(),
                    sensor: plan.sensor.clone(),
                    request_id: format!("{}:{}", d.subscription, d.element.seq),
                    seq: Some(d.element.seq),
                    t_sent_us: d.element.timestamp * 1000,
                    t_received_us: d.received_us,
                    gap: d.gap,
                });
            }
        }));
    }

    let _ = tx.send(EventRecord::boundary(EventKind::Start, now_us()));
    running.store(true, Ordering::Relaxed);
    set_state(&shared, |s| s.state = "running".into());
    if cfg.mode == LoadMode::Pull {
        for p in &plans {
            tasks.push(shared.spawn(pull_stream(
                shared.clone(),
                p.clone(),
                cfg.interval_ms,
                tx.clone(),
            )));
        }
    }

    tokio::time::sleep(Duration::from_secs(cfg.duration_s)).await;
    running.store(false, Ordering::Relaxed);
    let _ = tx.send(EventRecord::boundary(EventKind::End, now_us()));
    for t in &tasks {
        t.abort();
    }
    drop(tx);
    let _ = writer.await;
    set_state(&shared, |s| s.state = "done".into());
}

/// One pull request stream: a keep-alive connection issuing
/// `latest?n=1` once per interval.
async fn pull_stream(shared: Arc<NodeShared>, plan: StreamPlan, interval_ms: u64, tx: mpsc::UnboundedSender<EventRecord>) {
    let mut ticker = tokio::time::interval(Duration::from_millis(interval_ms));
    ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    let mut conn: Option<wire::Connection> = None;
    let mut k: u64 = 0;
    loop {
        ticker.tick().await;
        if let Some(t) = &shared.throttle {
            t.acquire().await;
        }
        let request_id = format!("{}#{k}", plan.id);
        k += 1;
        let t_sent = now_us();
        let record = |event, seq, t_received_us| EventRecord {
            event: Some(event),
            stream: plan.id.clone(),
            node: plan.node.clone(),
            sensor: plan.sensor.clone(),
            request_id: request_id.clone(),
            seq,
            t_sent_us: t_sent,
            t_received_us,
            gap: 0,
        };
        if conn.is_none() {
            match wire::Connection::connect(&plan.address, shared.timeout(), vec![shared.meter.clone()]).await {
                Ok(c) => {
                    shared.work.connections_opened.fetch_add(1, Ordering::Relaxed);
                    conn = Some(c);
                }
                Err(_) => {
                    set_state(&shared, |s| s.failures += 1);
                    let _ = tx.send(record(EventKind::Fail, None, now_us()));
                    continue;
                }
            }
        }
        let Some(c) = conn.as_mut() else { continue };
        let target = format!("/sensor/{}/latest?n=1&id={request_id}", plan.sensor);
        let reply = c.call(Method::Get, &target, None).await;
        let t_received = now_us();
        match reply {
            Ok((
                _,
                Frame {
                    message: Message::QueryResult(QueryResult { elements, .. }),
                    ..
                },
            )) if !elements.is_empty() => {
                set_state(&shared, |s| s.completions += 1);
                shared.record_sample(RoundTripSample {
                    request_id: request_id.clone(),
                    sensor: plan.sensor.clone(),
                    t_sent,
                    t_received,
                });
                let _ = tx.send(record(EventKind::Complete, Some(elements[0].seq), t_received));
            }
            other => {
                if other.is_err() {
                    conn = None;
                }
                set_state(&shared, |s| s.failures += 1);
                let _ = tx.send(record(EventKind::Fail, None, t_received));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thirty_streams_over_thirteen_sensors() {
        let sensors: Vec<String> = (0..13).map(|i| format!("s{i:02}")).collect();
        let plans = plan_streams(&[("c1".into(), "a:1".into(), sensors)], 30);
        assert_eq!(plans.len(), 30);
        assert_eq!(plans[0].sensor, "s00");
        assert_eq!(plans[13].sensor, "s00");
        assert_eq!(plans[29].sensor, "s03");
        assert_eq!(plans[29].id, "c1/29");
    }
}
