//! The per-device engine.
//!
//! A [`Node`] runs one sampling task per virtual sensor, a FIFO query queue
//! drained by a single task, one delivery task per push subscription, and a
//! registration loop when a coordinator is configured. Every node also acts
//! as a coordinator for peers that register with it, and optionally as an
//! aggregator that drives an experiment against its registered clients.

pub mod aggregator;
pub mod backoff;
pub mod config;
mod delivery;
pub mod events;
mod handler;
pub mod queue;
mod sampler;
pub mod throttle;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use parking_lot::{Mutex, RwLock};
use thiserror::Error;
use tokio::sync::{mpsc, watch};
use tokio::task::AbortHandle;

use crate::model::{validate_config, KnownNames, StreamElement, VirtualSensorConfig};
use crate::processing::{Chain, ProcessorRegistry};
use crate::sources::{discover_plugins, PluginRegistry, SourceContext};
use crate::storage::{SpillLog, StorageError, WindowStore};
use crate::wire::frame::{
    AggregatorStatus, PeerRegistration, PeerSummary, QueryKind, QueryRequest, SensorInfo, SensorStatus,
    StatusReport, SubscribeRequest, Subscription, SubscriptionStatus, WorkCounters,
};
use crate::wire::http::{Meter, Method};
use crate::wire::{self, Frame, Message, WireError, PROTOCOL_VERSION};

pub use config::{AggregatorConfig, LoadMode, NodeConfig};
pub use delivery::Delivered;
pub use queue::{QueryJob, QueryQueue, QueueFull};

use delivery::{Inbox, SubEntry};
use throttle::Throttle;

pub fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

pub fn now_us() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_micros() as u64)
}

/// One rule a node configuration broke.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigProblem {
    pub sensor: String,
    pub code: String,
    pub detail: String,
}

impl fmt::Display for ConfigProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}: {}", self.sensor, self.code, self.detail)
    }
}

#[derive(Debug, Error)]
pub enum NodeError {
    #[error("address {0} already in use")]
    AddressInUse(String),
    #[error("invalid configuration: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    ConfigInvalid(Vec<ConfigProblem>),
    #[error("unknown sensor {0:?}")]
    SensorUnknown(String),
    #[error(transparent)]
    QueueFull(#[from] QueueFull),
    #[error("peer unreachable: {0}")]
    PeerUnreachable(String),
    #[error("timed out")]
    Timeout,
    #[error("peer answered {code}: {message}")]
    Remote { code: String, message: String },
    #[error(transparent)]
    Storage(#[from] StorageError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl NodeError {
    pub fn code(&self) -> &str {
        match self {
            NodeError::AddressInUse(_) => "ADDRESS_IN_USE",
            NodeError::ConfigInvalid(_) => "CONFIG_INVALID",
            NodeError::SensorUnknown(_) => "SENSOR_UNKNOWN",
            NodeError::QueueFull(_) => "QUEUE_FULL",
            NodeError::PeerUnreachable(_) => "PEER_UNREACHABLE",
            NodeError::Timeout => "TIMEOUT",
            NodeError::Remote { code, .. } => code,
            NodeError::Storage(e) => e.code(),
            NodeError::Io(_) => "IO_ERROR",
        }
    }

    fn from_frame(frame: &Frame) -> Option<NodeError> {
        match &frame.message {
            Message::Error { code, message } => Some(NodeError::Remote {
                code: code.clone(),
                message: message.clone(),
            }),
            _ => None,
        }
    }
}

impl From<WireError> for NodeError {
    fn from(e: WireError) -> Self {
        match e {
            WireError::Timeout => NodeError::Timeout,
            WireError::Unreachable(s) => NodeError::PeerUnreachable(s),
            WireError::Io(e) => NodeError::PeerUnreachable(e.to_string()),
            WireError::AddressInUse(a) => NodeError::AddressInUse(a),
            WireError::Rejected { frame, .. } => NodeError::from_frame(&frame).unwrap_or(NodeError::Remote {
                code: "BAD_REQUEST".into(),
                message: "rejected".into(),
            }),
            other => NodeError::Remote {
                code: other.code().to_string(),
                message: other.to_string(),
            },
        }
    }
}

/// One requester-side round trip measurement.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoundTripSample {
    pub request_id: String,
    pub sensor: String,
    /// Epoch microseconds on the requester's clock.
    pub t_sent: u64,
    pub t_received: u64,
}

impl RoundTripSample {
    pub fn duration_ms(&self) -> f64 {
        self.t_received.saturating_sub(self.t_sent) as f64 / 1000.0
    }
}

const MAX_SAMPLES: usize = 100_000;

#[derive(Default)]
pub(crate) struct SensorCounters {
    pub filtered: AtomicU64,
    pub unavailable: AtomicU64,
    pub errors: AtomicU64,
    pub failed: AtomicBool,
}

pub(crate) struct SensorSlot {
    pub config: RwLock<VirtualSensorConfig>,
    pub store: RwLock<WindowStore>,
    /// Carries `total_inserted` after every insert.
    pub seq_tx: watch::Sender<u64>,
    pub counters: SensorCounters,
}

#[derive(Default)]
pub(crate) struct Work {
    pub elements_processed: AtomicU64,
    pub points_served: AtomicU64,
    pub queries_answered: AtomicU64,
    pub queries_rejected: AtomicU64,
    pub connections_opened: AtomicU64,
    pub connections_accepted: AtomicU64,
    pub connections_rejected: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Registration {
    None,
    Pending,
    Registered,
}

impl Registration {
    pub fn as_str(self) -> &'static str {
        match self {
            Registration::None => "none",
            Registration::Pending => "pending",
            Registration::Registered => "registered",
        }
    }
}

pub(crate) struct NodeShared {
    pub config: NodeConfig,
    pub address: OnceLock<String>,
    pub started: Instant,
    pub sensors: BTreeMap<String, Arc<SensorSlot>>,
    pub queue: QueryQueue,
    pub next_job: AtomicU64,
    pub subs: Mutex<BTreeMap<String, Arc<SubEntry>>>,
    pub next_sub: AtomicU64,
    pub peers: Mutex<BTreeMap<String, PeerRegistration>>,
    pub registration: Mutex<Registration>,
    pub retry_queue: AtomicU64,
    pub work: Work,
    pub meter: Arc<Meter>,
    pub inbox: Inbox,
    pub samples: Mutex<Vec<RoundTripSample>>,
    pub throttle: Option<Throttle>,
    pub aggregator: Mutex<Option<AggregatorStatus>>,
    pub tasks: Mutex<Vec<AbortHandle>>,
}

impl NodeShared {
    pub fn address(&self) -> &str {
        self.address.get().map(String::as_str).unwrap_or("")
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_millis(self.config.query_timeout_ms)
    }

    /// Spawns a task that dies with the node.
    pub fn spawn(&self, fut: impl std::future::Future<Output = ()> + Send + 'static) -> AbortHandle {
        let handle = tokio::spawn(fut).abort_handle();
        let mut tasks = self.tasks.lock();
        tasks.retain(|t| !t.is_finished());
        tasks.push(handle.clone());
        handle
    }

    pub fn sensor_infos(&self) -> Vec<SensorInfo> {
        self.sensors
            .values()
            .map(|slot| {
                let c = slot.config.read();
                SensorInfo {
                    name: c.name.clone(),
                    output_schema: c.output_schema.clone(),
                    history_size: c.history_size,
                    sampling_interval: c.sampling_interval,
                }
            })
            .collect()
    }

    pub fn registration_record(&self) -> PeerRegistration {
        PeerRegistration {
            node_id: self.config.node_id.clone(),
            address: self.address().to_string(),
            sensors: self.sensor_infos(),
            registered_at: now_ms(),
        }
    }

    pub fn record_sample(&self, s: RoundTripSample) {
        let mut samples = self.samples.lock();
        if samples.len() < MAX_SAMPLES {
            samples.push(s);
        }
    }

    pub fn subscribe(self: &Arc<Self>, req: SubscribeRequest) -> Result<Subscription, NodeError> {
        let slot = self
            .sensors
            .get(&req.sensor)
            .ok_or_else(|| NodeError::SensorUnknown(req.sensor.clone()))?;
        let n = self.next_sub.fetch_add(1, Ordering::Relaxed);
        let sub = Subscription {
            id: format!("{}-sub-{n}", self.config.node_id),
            sensor: req.sensor,
            subscriber: req.subscriber,
            mode: req.mode,
            persistent_delivery: req.persistent_delivery,
            created_at: now_ms(),
            cursor: None,
        };
        let start_seq = slot.store.read().total_inserted();
        let entry = Arc::new(SubEntry::new(sub.clone(), start_seq));
        self.subs.lock().insert(sub.id.clone(), entry.clone());
        if sub.mode == wire::frame::DeliveryMode::Push {
            let shared = self.clone();
            let slot = slot.clone();
            let _ = self.spawn(delivery::push_loop(shared, slot, entry));
        }
        Ok(sub)
    }

    pub fn register_peer(&self, reg: PeerRegistration) -> Result<u64, String> {
        if reg.node_id.is_empty() {
            return Err("node_id must not be empty".into());
        }
        if reg.sensors.is_empty() {
            return Err("a registration must list at least one sensor".into());
        }
        let n = reg.sensors.len() as u64;
        self.peers.lock().insert(reg.node_id.clone(), reg);
        Ok(n)
    }

    pub fn answer_query(&self, job: &QueryJob) -> Frame {
        let t = Instant::now();
        let Some(slot) = self.sensors.get(&job.request.sensor) else {
            return Frame::error(
                job.id.as_str(),
                "SENSOR_UNKNOWN",
                format!("no sensor {:?}", job.request.sensor),
            );
        };
        let elements = {
            let store = slot.store.read();
            match job.request.kind {
                QueryKind::LatestN { n } => Ok(store.query_latest(n)),
                QueryKind::Range { from, to } => store.query_range(from, to),
            }
        };
        match elements {
            Ok(elements) => {
                self.work.queries_answered.fetch_add(1, Ordering::Relaxed);
                self.work
                    .points_served
                    .fetch_add(elements.len() as u64, Ordering::Relaxed);
                Frame::new(
                    job.id.as_str(),
                    Message::QueryResult(wire::frame::QueryResult {
                        job: job.id.clone(),
                        sensor: job.request.sensor.clone(),
                        elements,
                        processing_us: t.elapsed().as_micros() as u64,
                    }),
                )
            }
            Err(e) => Frame::error(job.id.as_str(), e.code(), e.to_string()),
        }
    }

    /// Puts a query on the FIFO queue.
    pub fn enqueue(
        &self,
        id: Option<String>,
        request: QueryRequest,
        requester: String,
    ) -> Result<(String, tokio::sync::oneshot::Receiver<Frame>), NodeError> {
        let id = id
            .filter(|s| !s.is_empty())
            .unwrap_or_else(|| format!("job-{}", self.next_job.fetch_add(1, Ordering::Relaxed)));
        let job = QueryJob {
            id: id.clone(),
            request,
            enqueued_at: now_ms(),
            requester,
        };
        match self.queue.try_enqueue(job) {
            Ok(rx) => Ok((id, rx)),
            Err(e) => {
                self.work.queries_rejected.fetch_add(1, Ordering::Relaxed);
                Err(e.into())
            }
        }
    }

    pub fn status(&self) -> StatusReport {
        let sensors: Vec<SensorStatus> = self
            .sensors
            .values()
            .map(|slot| {
                let store = slot.store.read();
                SensorStatus {
                    name: store.sensor().to_string(),
                    history_size: store.capacity() as u64,
                    stored: store.len() as u64,
                    total_inserted: store.total_inserted(),
                    latest_seq: store.latest_seq(),
                    bytes: store.bytes_estimate(),
                    filtered: slot.counters.filtered.load(Ordering::Relaxed),
                    unavailable: slot.counters.unavailable.load(Ordering::Relaxed),
                    errors: slot.counters.errors.load(Ordering::Relaxed),
                    failed: slot.counters.failed.load(Ordering::Relaxed),
                }
            })
            .collect();
        let subscriptions = self.subs.lock().values().map(|e| e.status()).collect();
        let peers = self
            .peers
            .lock()
            .values()
            .map(|p| PeerSummary {
                node_id: p.node_id.clone(),
                address: p.address.clone(),
                sensors: p.sensors.len() as u64,
            })
            .collect();
        let w = &self.work;
        let load = |a: &AtomicU64| a.load(Ordering::Relaxed);
        StatusReport {
            node_id: self.config.node_id.clone(),
            address: self.address().to_string(),
            version: PROTOCOL_VERSION.to_string(),
            uptime_ms: self.started.elapsed().as_millis() as u64,
            active_sensors: sensors.iter().filter(|s| !s.failed).count() as u64,
            storage_bytes: sensors.iter().map(|s| s.bytes).sum(),
            sensors,
            queue_depth: self.queue.depth(),
            subscriptions,
            registration: self.registration.lock().as_str().to_string(),
            retry_queue: load(&self.retry_queue),
            peers,
            work: WorkCounters {
                elements_processed: load(&w.elements_processed),
                points_served: load(&w.points_served),
                queries_answered: load(&w.queries_answered),
                queries_rejected: load(&w.queries_rejected),
                connections_opened: load(&w.connections_opened),
                connections_accepted: load(&w.connections_accepted),
                connections_rejected: load(&w.connections_rejected),
                bytes_in: self.meter.bytes_in.load(Ordering::Relaxed),
                bytes_out: self.meter.bytes_out.load(Ordering::Relaxed),
            },
            aggregator: self.aggregator.lock().clone(),
        }
    }
}

/// Everything that must be built before a sensor can start sampling.
struct PreparedSensor {
    config: VirtualSensorConfig,
    runtime: sampler::SensorRuntime,
}

fn prepare_sensors(cfg: &NodeConfig) -> Result<Vec<PreparedSensor>, NodeError> {
    let mut plugins = PluginRegistry::builtin();
    if let Some(dir) = &cfg.plugin_dir {
        let dir = cfg.resolve(dir);
        match discover_plugins(&dir) {
            Ok(found) => {
                for d in &found.diagnostics {
                    tracing::warn!(file = %d.file.display(), "skipping plugin descriptor: {}", d.message);
                }
                plugins.merge_discovered(found.descriptors);
            }
            Err(e) => {
                return Err(NodeError::ConfigInvalid(vec![ConfigProblem {
                    sensor: String::new(),
                    code: e.code().into(),
                    detail: e.to_string(),
                }]))
            }
        }
    }
    let processors = ProcessorRegistry::builtin();
    let known = KnownNames::new(plugins.names(), processors.names());
    let ctx = SourceContext::new(cfg.base_dir.clone());
    let names: BTreeSet<&str> = cfg.sensors.iter().map(|s| s.name.as_str()).collect();

    let mut problems = Vec::new();
    let mut seen = BTreeSet::new();
    let mut prepared = Vec::new();
    for sc in &cfg.sensors {
        let mut problem = |code: &str, detail: String| {
            problems.push(ConfigProblem {
                sensor: sc.name.clone(),
                code: code.into(),
                detail,
            })
        };
        if !seen.insert(sc.name.as_str()) {
            problem("SENSOR_DUPLICATE", format!("sensor {:?} is declared twice", sc.name));
            continue;
        }
        let v = validate_config(sc, &known);
        if !v.is_ok() {
            for violation in &v.violations {
                problem(violation.code.as_str(), violation.detail.clone());
            }
            continue;
        }
        let source = match plugins.instantiate_by_name(&sc.source.plugin, &sc.source.params, &ctx) {
            Ok(s) => s,
            Err(e) => {
                problem(e.code(), e.to_string());
                continue;
            }
        };
        let chain = match Chain::build(&sc.processors, &processors) {
            Ok(c) => c,
            Err(e) => {
                problem(e.code(), e.to_string());
                continue;
            }
        };
        match chain.output_arity(source.arity()) {
            Ok(n) if n == sc.output_schema.len() => {}
            Ok(n) => {
                problem(
                    "ARITY_MISMATCH",
                    format!("chain emits {n} values but the output schema has {}", sc.output_schema.len()),
                );
                continue;
            }
            Err(e) => {
                problem(e.code(), e.to_string());
                continue;
            }
        }
        let deps = chain.dependencies();
        if let Some(bad) = deps.iter().find(|d| !names.contains(d.as_str()) || **d == sc.name) {
            problem("SENSOR_UNKNOWN", format!("fuse_mean refers to {bad:?}"));
            continue;
        }
        prepared.push(PreparedSensor {
            config: sc.clone(),
            runtime: sampler::SensorRuntime { source, chain, deps },
        });
    }
    if problems.is_empty() {
        Ok(prepared)
    } else {
        Err(NodeError::ConfigInvalid(problems))
    }
}

/// A running node. Dropping it stops every task and closes the listener.
pub struct Node {
    shared: Arc<NodeShared>,
    server: wire::Server,
}

impl Node {
    pub async fn start(config: NodeConfig) -> Result<Node, NodeError> {
        let prepared = prepare_sensors(&config)?;
        let (queue, drain) = QueryQueue::new(config.queue_bound);
        let mut sensors = BTreeMap::new();
        let mut runtimes = Vec::new();
        for p in prepared {
            let store = WindowStore::new(p.config.name.clone(), p.config.history_size as usize)?;
            let (seq_tx, _) = watch::channel(0);
            let slot = Arc::new(SensorSlot {
                config: RwLock::new(p.config.clone()),
                store: RwLock::new(store),
                seq_tx,
                counters: SensorCounters::default(),
            });
            sensors.insert(p.config.name.clone(), slot.clone());
            runtimes.push((slot, p.runtime));
        }
        let inbox = Inbox::open(config.delivery_log.as_ref().map(|p| config.resolve(p)).as_deref())?;
        let throttle = config
            .aggregator
            .as_ref()
            .and_then(|a| a.throttle_ops_per_s)
            .map(Throttle::new);
        let shared = Arc::new(NodeShared {
            address: OnceLock::new(),
            started: Instant::now(),
            sensors,
            queue,
            next_job: AtomicU64::new(0),
            subs: Mutex::new(BTreeMap::new()),
            next_sub: AtomicU64::new(0),
            peers: Mutex::new(BTreeMap::new()),
            registration: Mutex::new(Registration::None),
            retry_queue: AtomicU64::new(0),
            work: Work::default(),
            meter: Arc::new(Meter::default()),
            inbox,
            samples: Mutex::new(Vec::new()),
            throttle,
            aggregator: Mutex::new(None),
            tasks: Mutex::new(Vec::new()),
            config,
        });

        let handler = Arc::new(handler::NodeHandler::new(shared.clone()));
        let server = wire::serve(&shared.config.listen, handler, shared.meter.clone()).await?;
        let bound = server.local_addr();
        let advertised = shared.config.advertise.clone().unwrap_or_else(|| {
            if bound.ip().is_unspecified() {
                format!("127.0.0.1:{}", bound.port())
            } else {
                bound.to_string()
            }
        });
        let _ = shared.address.set(advertised);

        let s = shared.clone();
        let _ = shared.spawn(drain.run(async move |job: QueryJob| s.answer_query(&job)));

        let start_ms = now_ms();
        for (slot, runtime) in runtimes {
            let spill = match &shared.config.spill_dir {
                Some(dir) => Some(SpillLog::open(&shared.config.resolve(dir), &slot.config.read().name)?),
                None => None,
            };
            let _ = shared.spawn(sampler::run(shared.clone(), slot, runtime, start_ms, spill));
        }
        if let Some(coordinator) = shared.config.coordinator.clone() {
            *shared.registration.lock() = Registration::Pending;
            shared.retry_queue.store(1, Ordering::Relaxed);
            let _ = shared.spawn(registration_loop(shared.clone(), coordinator));
        }
        for req in shared.config.subscriptions.clone() {
            shared.subscribe(req)?;
        }
        if let Some(agg) = shared.config.aggregator.clone() {
            let _ = shared.spawn(aggregator::run(shared.clone(), agg));
        }
        Ok(Node { shared, server })
    }

    pub fn node_id(&self) -> &str {
        &self.shared.config.node_id
    }

    /// The address peers should use.
    pub fn address(&self) -> &str {
        self.shared.address()
    }

    pub fn local_addr(&self) -> std::net::SocketAddr {
        self.server.local_addr()
    }

    pub fn config(&self) -> &NodeConfig {
        &self.shared.config
    }

    pub fn status(&self) -> StatusReport {
        self.shared.status()
    }

    pub fn sensors(&self) -> Vec<SensorInfo> {
        self.shared.sensor_infos()
    }

    /// Current window contents, oldest first.
    pub fn window(&self, sensor: &str) -> Result<Vec<StreamElement>, NodeError> {
        let slot = self
            .shared
            .sensors
            .get(sensor)
            .ok_or_else(|| NodeError::SensorUnknown(sensor.into()))?;
        let store = slot.store.read();
        Ok(store.iter().cloned().collect())
    }

    /// Resizes a window at runtime. Shrinking evicts immediately.
    pub fn set_history_size(&self, sensor: &str, history_size: usize) -> Result<Vec<StreamElement>, NodeError> {
        let slot = self
            .shared
            .sensors
            .get(sensor)
            .ok_or_else(|| NodeError::SensorUnknown(sensor.into()))?;
        let evicted = slot.store.write().set_capacity(history_size)?;
        slot.config.write().history_size = history_size as u64;
        Ok(evicted)
    }

    pub fn subscribe(&self, req: SubscribeRequest) -> Result<Subscription, NodeError> {
        self.shared.subscribe(req)
    }

    pub fn subscription(&self, id: &str) -> Option<SubscriptionStatus> {
        self.shared.subs.lock().get(id).map(|e| e.status())
    }

    /// Queues a query; the receiver resolves with the response frame.
    pub fn enqueue_query(
        &self,
        request: QueryRequest,
        requester: &str,
    ) -> Result<(String, tokio::sync::oneshot::Receiver<Frame>), NodeError> {
        self.shared.enqueue(None, request, requester.to_string())
    }

    /// Queries a peer (possibly this node) and records the round trip.
    pub async fn fetch_remote(
        &self,
        peer: &str,
        sensor: &str,
        kind: QueryKind,
    ) -> Result<(Vec<StreamElement>, RoundTripSample), NodeError> {
        fetch_remote(&self.shared, peer, sensor, kind).await
    }

    pub fn round_trips(&self) -> Vec<RoundTripSample> {
        self.shared.samples.lock().clone()
    }

    /// Registers once with `coordinator`, outside the background loop.
    pub async fn register_with(&self, coordinator: &str) -> Result<u64, NodeError> {
        register_once(&self.shared, coordinator).await
    }

    pub fn peers(&self) -> Vec<PeerRegistration> {
        self.shared.peers.lock().values().cloned().collect()
    }

    /// Deliveries this node receives as a subscriber, duplicates removed.
    pub fn deliveries(&self) -> mpsc::UnboundedReceiver<Delivered> {
        self.shared.inbox.tap()
    }

    /// Opens a persistent stream for a subscription held at `publisher` and
    /// keeps it open, reconnecting with backoff. Elements arrive through
    /// [`deliveries`](Self::deliveries).
    pub fn follow(&self, publisher: &str, subscription: &Subscription) {
        let fut = delivery::follow_loop(self.shared.clone(), publisher.to_string(), subscription.clone());
        let _ = self.shared.spawn(fut);
    }

    /// Subscribes at `publisher` on behalf of this node.
    pub async fn subscribe_remote(
        &self,
        publisher: &str,
        sensor: &str,
        mode: wire::frame::DeliveryMode,
        persistent_delivery: bool,
    ) -> Result<Subscription, NodeError> {
        subscribe_remote(&self.shared, publisher, sensor, mode, persistent_delivery).await
    }

    /// Stops all tasks and the listener.
    pub fn shutdown(&self) {
        self.server.shutdown();
        for t in self.shared.tasks.lock().drain(..) {
            t.abort();
        }
    }
}

impl Drop for Node {
    fn drop(&mut self) {
        self.shutdown();
    }
}

pub(crate) async fn fetch_remote(
    shared: &NodeShared,
    peer: &str,
    sensor: &str,
    kind: QueryKind,
) -> Result<(Vec<StreamElement>, RoundTripSample), NodeError> {
    let target = match kind {
        QueryKind::LatestN { n } => format!("/sensor/{sensor}/latest?n={n}"),
        QueryKind::Range { from, to } => format!("/sensor/{sensor}/range?from={from}&to={to}"),
    };
    let t_sent = now_us();
    shared.work.connections_opened.fetch_add(1, Ordering::Relaxed);
    let mut conn = wire::Connection::connect(peer, shared.timeout(), vec![shared.meter.clone()]).await?;
    let frame = conn.call_ok(Method::Get, &target, None).await?;
    let t_received = now_us();
    let Message::QueryResult(result) = frame.message else {
        return Err(NodeError::Remote {
            code: "BAD_REQUEST".into(),
            message: format!("expected query_result, got {}", frame.frame_type().as_str()),
        });
    };
    let sample = RoundTripSample {
        request_id: result.job,
        sensor: sensor.to_string(),
        t_sent,
        t_received,
    };
    shared.record_sample(sample.clone());
    Ok((result.elements, sample))
}

pub(crate) async fn subscribe_remote(
    shared: &NodeShared,
    publisher: &str,
    sensor: &str,
    mode: wire::frame::DeliveryMode,
    persistent_delivery: bool,
) -> Result<Subscription, NodeError> {
    let req = Frame::new(
        "",
        Message::Subscribe(SubscribeRequest {
            sensor: sensor.to_string(),
            subscriber: shared.address().to_string(),
            mode,
            persistent_delivery,
        }),
    );
    shared.work.connections_opened.fetch_add(1, Ordering::Relaxed);
    let mut conn = wire::Connection::connect(publisher, shared.timeout(), vec![shared.meter.clone()]).await?;
    match conn.call_ok(Method::Post, "/subscribe", Some(&req)).await?.message {
        Message::SubscribeAck(sub) => Ok(sub),
        other => Err(NodeError::Remote {
            code: "BAD_REQUEST".into(),
            message: format!("expected subscribe_ack, got {}", other.frame_type().as_str()),
        }),
    }
}

async fn register_once(shared: &NodeShared, coordinator: &str) -> Result<u64, NodeError> {
    let frame = Frame::new(shared.config.node_id.as_str(), Message::Register(shared.registration_record()));
    shared.work.connections_opened.fetch_add(1, Ordering::Relaxed);
    let mut conn = wire::Connection::connect(coordinator, shared.timeout(), vec![shared.meter.clone()])
        .await
        .map_err(|e| match e {
            WireError::Unreachable(s) => NodeError::PeerUnreachable(s),
            other => other.into(),
        })?;
    match conn.call_ok(Method::Post, "/register", Some(&frame)).await?.message {
        Message::RegisterAck { sensors, .. } => Ok(sensors),
        other => Err(NodeError::Remote {
            code: "BAD_REQUEST".into(),
            message: format!("expected register_ack, got {}", other.frame_type().as_str()),
        }),
    }
}

/// Registers, refreshes the registration periodically and retries forever
/// while the coordinator is away.
async fn registration_loop(shared: Arc<NodeShared>, coordinator: String) {
    let mut backoff = backoff::Backoff::new(backoff::seed_for(&shared.config.node_id));
    loop {
        match register_once(&shared, &coordinator).await {
            Ok(_) => {
                *shared.registration.lock() = Registration::Registered;
                shared.retry_queue.store(0, Ordering::Relaxed);
                backoff.reset();
                tokio::time::sleep(Duration::from_millis(config::REGISTRATION_REFRESH_MS)).await;
            }
            Err(e) => {
                tracing::debug!(%coordinator, "registration failed: {e}");
                *shared.registration.lock() = Registration::Pending;
                shared.retry_queue.store(1, Ordering::Relaxed);
                tokio::time::sleep(backoff.next_delay()).await;
            }
        }
    }
}
