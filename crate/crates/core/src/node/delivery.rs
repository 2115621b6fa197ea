//! Subscription delivery on both sides of the wire.
//!
//! Publisher side: push subscriptions get a task that opens one connection
//! per element; persistent-stream subscriptions are served when the
//! subscriber opens `GET /sensor/{name}/stream`. Both read undelivered
//! elements straight from the sensor's window, so the window is the only
//! buffer. The cursor advances only on acknowledgment.
//!
//! Subscriber side: [`Inbox`] drops duplicates by `(subscription, seq)`,
//! optionally logs every delivery, and fans out to taps.

use std::collections::HashMap;
use std::fs::OpenOptions;
use std::io::BufWriter;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use serde::Serialize;
use tokio::sync::mpsc;

use crate::model::StreamElement;
use crate::wire::frame::{DeliveryMode, StatusReport, Subscription, SubscriptionStatus};
use crate::wire::http::Method;
use crate::wire::{self, ConnInfo, Frame, Message, StreamOut, StreamRequest, WireError};

use super::backoff::{seed_for, Backoff};
use super::config::HEARTBEAT_MS;
use super::{now_us, NodeShared, SensorSlot};

/// Elements written per window read on a persistent stream.
const STREAM_BATCH: usize = 64;

#[derive(Default)]
pub(crate) struct SubCounters {
    pub delivered: AtomicU64,
    pub attempts: AtomicU64,
    pub connections: AtomicU64,
    pub gaps: AtomicU64,
    pub wire_bytes: AtomicU64,
    pub payload_bytes: AtomicU64,
}

pub(crate) struct SubEntry {
    pub sub: Subscription,
    /// First seq owed to the subscriber.
    pub start_seq: u64,
    cursor: Mutex<Option<u64>>,
    pub counters: SubCounters,
}

impl SubEntry {
    pub fn new(sub: Subscription, start_seq: u64) -> Self {
        SubEntry {
            sub,
            start_seq,
            cursor: Mutex::new(None),
            counters: SubCounters::default(),
        }
    }

    pub fn cursor(&self) -> Option<u64> {
        *self.cursor.lock()
    }

    /// Never moves the cursor backwards.
    fn advance(&self, seq: u64) {
        let mut c = self.cursor.lock();
        *c = Some(c.map_or(seq, |old| old.max(seq)));
    }

    fn next_owed(&self) -> u64 {
        self.cursor().map_or(self.start_seq, |c| c + 1)
    }

    pub fn status(&self) -> SubscriptionStatus {
        let c = &self.counters;
        let load = |a: &AtomicU64| a.load(Ordering::Relaxed);
        SubscriptionStatus {
            id: self.sub.id.clone(),
            sensor: self.sub.sensor.clone(),
            subscriber: self.sub.subscriber.clone(),
            mode: Some(self.sub.mode),
            cursor: self.cursor(),
            delivered: load(&c.delivered),
            attempts: load(&c.attempts),
            connections: load(&c.connections),
            gaps: load(&c.gaps),
            wire_bytes: load(&c.wire_bytes),
            payload_bytes: load(&c.payload_bytes),
        }
    }
}

fn deliver_frame(sub: &str, e: &StreamElement, gap: u64) -> Frame {
    Frame::new(
        format!("{sub}:{}", e.seq),
        Message::Deliver {
            subscription: sub.to_string(),
            element: e.clone(),
        },
    )
    .with_gap(gap)
}

enum PushFailure {
    /// No connection was established.
    Unreachable,
    /// Connected, but no acknowledgment came back.
    Refused,
}

/// One push attempt: fresh connection, POST /deliver, wait for the ack.
async fn push_once(shared: &NodeShared, entry: &SubEntry, frame: &Frame) -> Result<(), PushFailure> {
    let mut conn = wire::Connection::connect(&entry.sub.subscriber, shared.timeout(), vec![shared.meter.clone()])
        .await
        .map_err(|_| PushFailure::Unreachable)?;
    shared.work.connections_opened.fetch_add(1, Ordering::Relaxed);
    entry.counters.connections.fetch_add(1, Ordering::Relaxed);
    let result = conn.call(Method::Post, "/deliver", Some(frame)).await;
    entry
        .counters
        .wire_bytes
        .fetch_add(conn.meter().total(), Ordering::Relaxed);
    match result {
        Ok((_, Frame {
            message: Message::DeliverAck { .. },
            ..
        })) => Ok(()),
        _ => Err(PushFailure::Refused),
    }
}

pub(crate) async fn push_loop(shared: Arc<NodeShared>, slot: Arc<SensorSlot>, entry: Arc<SubEntry>) {
    let mut seq_rx = slot.seq_tx.subscribe();
    let mut backoff = Backoff::new(seed_for(&entry.sub.id));
    let mut next = entry.next_owed();
    let mut pending_gap = 0u64;
    loop {
        seq_rx.borrow_and_update();
        let backlog = slot.store.read().read_from(next, 1);
        let Some(e) = backlog.elements.into_iter().next() else {
            if seq_rx.changed().await.is_err() {
                return;
            }
            continue;
        };
        if backlog.gap > 0 {
            pending_gap += backlog.gap;
            entry.counters.gaps.fetch_add(backlog.gap, Ordering::Relaxed);
        }
        next = e.seq;
        let frame = deliver_frame(&entry.sub.id, &e, pending_gap);
        entry.counters.attempts.fetch_add(1, Ordering::Relaxed);
        match push_once(&shared, &entry, &frame).await {
            Ok(()) => {
                entry.advance(e.seq);
                entry.counters.delivered.fetch_add(1, Ordering::Relaxed);
                entry
                    .counters
                    .payload_bytes
                    .fetch_add(e.wire_size() as u64, Ordering::Relaxed);
                pending_gap = 0;
                next = e.seq + 1;
                backoff.reset();
            }
            Err(why) if entry.sub.persistent_delivery => {
                if matches!(why, PushFailure::Unreachable) {
                    tracing::debug!(sub = %entry.sub.id, "subscriber unreachable");
                }
                tokio::time::sleep(backoff.next_delay()).await;
            }
            Err(_) => {
                // not buffered: the element is skipped and reported as a gap
                pending_gap += 1;
                entry.counters.gaps.fetch_add(1, Ordering::Relaxed);
                next = e.seq + 1;
            }
        }
    }
}

/// Publisher side of `GET /sensor/{name}/stream`.
pub(crate) async fn serve_stream(
    shared: &NodeShared,
    req: StreamRequest,
    conn: &ConnInfo,
    out: StreamOut<'_>,
) -> Result<(), WireError> {
    let Some(sub_id) = req.subscription.as_deref() else {
        return out
            .reject(&Frame::error("", "BAD_REQUEST", "stream needs a subscription parameter"))
            .await;
    };
    let Some(entry) = shared.subs.lock().get(sub_id).cloned() else {
        return out
            .reject(&Frame::error("", "SUBSCRIPTION_UNKNOWN", format!("no subscription {sub_id:?}")))
            .await;
    };
    if entry.sub.sensor != req.sensor || entry.sub.mode != DeliveryMode::PersistentStream {
        return out
            .reject(&Frame::error(
                "",
                "BAD_REQUEST",
                format!("subscription {sub_id:?} is not a stream of {:?}", req.sensor),
            ))
            .await;
    }
    let Some(slot) = shared.sensors.get(&req.sensor).cloned() else {
        return out
            .reject(&Frame::error("", "SENSOR_UNKNOWN", format!("no sensor {:?}", req.sensor)))
            .await;
    };
    let mut sink = out.start().await?;
    entry.counters.connections.fetch_add(1, Ordering::Relaxed);

    let owed = entry.next_owed();
    let (mut next, mut pending_gap) = if entry.sub.persistent_delivery {
        // resending what the subscriber says it lacks is at-least-once
        (req.resume.map_or(owed, |r| r + 1), 0)
    } else {
        let live = slot.store.read().total_inserted().max(owed);
        (live, live - owed)
    };
    if pending_gap > 0 {
        entry.counters.gaps.fetch_add(pending_gap, Ordering::Relaxed);
    }

    let heartbeat = Duration::from_millis(HEARTBEAT_MS);
    let mut seq_rx = slot.seq_tx.subscribe();
    let mut last_write = Instant::now();
    let mut bytes_seen = conn.meter.total();
    loop {
        seq_rx.borrow_and_update();
        let backlog = slot.store.read().read_from(next, STREAM_BATCH);
        if backlog.elements.is_empty() {
            let wait = heartbeat.saturating_sub(last_write.elapsed());
            match tokio::time::timeout(wait, seq_rx.changed()).await {
                Ok(Ok(())) => {}
                Ok(Err(_)) => return Ok(()),
                Err(_) => {
                    let beat = Frame::new(
                        "heartbeat",
                        Message::Status(Box::new(StatusReport {
                            node_id: shared.config.node_id.clone(),
                            ..Default::default()
                        })),
                    );
                    sink.send(&beat).await?;
                    last_write = Instant::now();
                }
            }
            continue;
        }
        if backlog.gap > 0 {
            pending_gap += backlog.gap;
            entry.counters.gaps.fetch_add(backlog.gap, Ordering::Relaxed);
        }
        for e in &backlog.elements {
            sink.send(&deliver_frame(&entry.sub.id, e, pending_gap)).await?;
            pending_gap = 0;
            next = e.seq + 1;
            entry.advance(e.seq);
            entry.counters.delivered.fetch_add(1, Ordering::Relaxed);
            entry
                .counters
                .payload_bytes
                .fetch_add(e.wire_size() as u64, Ordering::Relaxed);
            let total = conn.meter.total();
            entry
                .counters
                .wire_bytes
                .fetch_add(total - bytes_seen, Ordering::Relaxed);
            bytes_seen = total;
        }
        last_write = Instant::now();
    }
}

/// A delivery as seen by the subscriber.
#[derive(Debug, Clone, PartialEq)]
pub struct Delivered {
    pub subscription: String,
    pub element: StreamElement,
    pub gap: u64,
    /// Epoch microseconds at receipt.
    pub received_us: u64,
    pub via: DeliveryMode,
}

#[derive(Serialize)]
struct DeliveryRow<'a> {
    subscription: &'a str,
    sensor: &'a str,
    seq: u64,
    gap: u64,
    timestamp: u64,
    received_us: u64,
}

/// Subscriber-side receipt point for both transports.
pub(crate) struct Inbox {
    last: Mutex<HashMap<String, u64>>,
    taps: Mutex<Vec<mpsc::UnboundedSender<Delivered>>>,
    log: Option<Mutex<csv::Writer<BufWriter<std::fs::File>>>>,
    pub received: AtomicU64,
    pub duplicates: AtomicU64,
}

impl Inbox {
    pub fn open(log: Option<&Path>) -> std::io::Result<Self> {
        let log = match log {
            Some(path) => {
                if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                    std::fs::create_dir_all(dir)?;
                }
                let file = OpenOptions::new().create(true).append(true).open(path)?;
                let fresh = file.metadata()?.len() == 0;
                let w = csv::WriterBuilder::new()
                    .has_headers(fresh)
                    .from_writer(BufWriter::new(file));
                Some(Mutex::new(w))
            }
            None => None,
        };
        Ok(Inbox {
            last: Mutex::new(HashMap::new()),
            taps: Mutex::new(Vec::new()),
            log,
            received: AtomicU64::new(0),
            duplicates: AtomicU64::new(0),
        })
    }

    pub fn tap(&self) -> mpsc::UnboundedReceiver<Delivered> {
        let (tx, rx) = mpsc::unbounded_channel();
        self.taps.lock().push(tx);
        rx
    }

    /// Highest seq received for a subscription.
    pub fn last_seq(&self, subscription: &str) -> Option<u64> {
        self.last.lock().get(subscription).copied()
    }

    /// Returns false for a duplicate.
    pub fn accept(&self, d: Delivered) -> bool {
        {
            let mut last = self.last.lock();
            match last.get(&d.subscription) {
                Some(&seen) if d.element.seq <= seen => {
                    self.duplicates.fetch_add(1, Ordering::Relaxed);
                    return false;
                }
                _ => {
                    last.insert(d.subscription.clone(), d.element.seq);
                }
            }
        }
        self.received.fetch_add(1, Ordering::Relaxed);
        if let Some(log) = &self.log {
            let mut w = log.lock();
            let row = DeliveryRow {
                subscription: &d.subscription,
                sensor: &d.element.sensor,
                seq: d.element.seq,
                gap: d.gap,
                timestamp: d.element.timestamp,
                received_us: d.received_us,
            };
            if w.serialize(row).and_then(|_| w.flush().map_err(Into::into)).is_err() {
                tracing::warn!("delivery log write failed");
            }
        }
        self.taps.lock().retain(|tx| tx.send(d.clone()).is_ok());
        true
    }
}

/// Subscriber side of a persistent stream: keeps one connection open and
/// reopens it with backoff, resuming after the last seq received.
pub(crate) async fn follow_loop(shared: Arc<NodeShared>, publisher: String, sub: Subscription) {
    let mut backoff = Backoff::new(seed_for(&sub.id));
    loop {
        let mut target = format!("/sensor/{}/stream?subscription={}", sub.sensor, sub.id);
        if let Some(last) = shared.inbox.last_seq(&sub.id) {
            target.push_str(&format!("&resume={last}"));
        }
        let opened = async {
            let conn = wire::Connection::connect(&publisher, shared.timeout(), vec![shared.meter.clone()]).await?;
            shared.work.connections_opened.fetch_add(1, Ordering::Relaxed);
            conn.into_stream(&target).await
        }
        .await;
        let mut stream = match opened {
            Ok(s) => s,
            Err(e) => {
                tracing::debug!(sub = %sub.id, "stream open failed: {e}");
                tokio::time::sleep(backoff.next_delay()).await;
                continue;
            }
        };
        if let Some(agg) = shared.aggregator.lock().as_mut() {
            agg.stream_connections += 1;
        }
        backoff.reset();
        loop {
            match stream.next().await {
                Ok(Some(Frame {
                    gap,
                    message: Message::Deliver { subscription, element },
                    ..
                })) => {
                    if let Some(t) = &shared.throttle {
                        t.acquire().await;
                    }
                    shared.inbox.accept(Delivered {
                        subscription,
                        element,
                        gap: gap.unwrap_or(0),
                        received_us: now_us(),
                        via: DeliveryMode::PersistentStream,
                    });
                }
                Ok(Some(_)) => {}
                Ok(None) | Err(_) => break,
            }
        }
        tokio::time::sleep(backoff.next_delay()).await;
    }
}
