use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use async_trait::async_trait;
use tokio::io::{AsyncWriteExt, BufReader};
use tokio::net::TcpStream;

use vsense::model::{FieldSchema, ParamMap, ParamValue, ProcessorSpec, SourceSpec, VirtualSensorConfig};
use vsense::node::{Node, NodeConfig};
use vsense::wire::frame::{DeliveryMode, QueryKind, QueryRequest, SubscribeRequest};
use vsense::wire::http::{self, Method};
use vsense::wire::{self, ConnInfo, Connection, Frame, Handler, Message};

fn params(items: &[(&str, ParamValue)]) -> ParamMap {
    items.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

fn walk(name: &str, seed: i64, interval_ms: u64, history: u64) -> VirtualSensorConfig {
    VirtualSensorConfig {
        name: name.into(),
        history_size: history,
        sampling_interval: interval_ms,
        source: SourceSpec {
            plugin: "random_walk".into(),
            params: params(&[("seed", ParamValue::Int(seed))]),
        },
        processors: vec![],
        output_schema: vec![FieldSchema::numeric("value", "")],
    }
}

fn node_config(id: &str, sensors: Vec<VirtualSensorConfig>) -> NodeConfig {
    let mut cfg = NodeConfig::new(id);
    cfg.listen = "127.0.0.1:0".into();
    cfg.sensors = sensors;
    cfg
}

async fn wait_until(limit: Duration, mut cond: impl FnMut() -> bool) -> bool {
    let start = Instant::now();
    while start.elapsed() < limit {
        if cond() {
            return true;
        }
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
    cond()
}

fn inserted(node: &Node, sensor: &str) -> u64 {
    node.status()
        .sensors
        .iter()
        .find(|s| s.name == sensor)
        .map_or(0, |s| s.total_inserted)
}

async fn get(addr: &str, target: &str) -> (u16, Frame) {
    wire::request_once(addr, Method::Get, target, None, Duration::from_secs(5))
        .await
        .unwrap()
}

fn free_addr() -> String {
    let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    l.local_addr().unwrap().to_string()
}

#[tokio::test]
async fn thirteen_sensors_are_active_and_listed() {
    let sensors = (0..13).map(|i| walk(&format!("s{i:02}"), i, 1000, 10)).collect();
    let node = Node::start(node_config("n13", sensors)).await.unwrap();
    assert_eq!(node.status().active_sensors, 13);
    let (status, frame) = get(node.address(), "/sensors").await;
    assert_eq!(status, 200);
    let Message::SensorList { sensors } = frame.message else {
        panic!("expected sensor_list")
    };
    assert_eq!(sensors.len(), 13);
}

#[tokio::test]
async fn zero_sensor_node_serves_status() {
    let node = Node::start(node_config("empty", vec![])).await.unwrap();
    let (status, frame) = get(node.address(), "/status").await;
    assert_eq!(status, 200);
    let Message::Status(report) = frame.message else {
        panic!("expected status")
    };
    assert_eq!(report.active_sensors, 0);
    assert_eq!(report.node_id, "empty");
    assert_eq!(report.registration, "none");
}

#[tokio::test]
async fn duplicate_sensor_names_are_rejected() {
    let cfg = node_config("dup", vec![walk("a", 1, 1000, 5), walk("a", 2, 1000, 5)]);
    let err = Node::start(cfg).await.err().unwrap();
    assert_eq!(err.code(), "CONFIG_INVALID");
    assert!(err.to_string().contains("SENSOR_DUPLICATE"));
}

#[tokio::test]
async fn address_in_use_is_reported() {
    let first = Node::start(node_config("a", vec![])).await.unwrap();
    let mut cfg = node_config("b", vec![]);
    cfg.listen = first.local_addr().to_string();
    assert_eq!(Node::start(cfg).await.err().unwrap().code(), "ADDRESS_IN_USE");
}

#[tokio::test]
async fn arity_mismatch_is_a_config_error() {
    let mut s = walk("a", 1, 1000, 5);
    s.output_schema.push(FieldSchema::numeric("extra", ""));
    let err = Node::start(node_config("x", vec![s])).await.err().unwrap();
    assert!(err.to_string().contains("ARITY_MISMATCH"), "{err}");
}

#[tokio::test]
async fn reregistration_replaces_the_sensor_list() {
    let coordinator = Node::start(node_config("coord", vec![])).await.unwrap();
    let a13 = Node::start(node_config(
        "A",
        (0..13).map(|i| walk(&format!("s{i:02}"), i, 1000, 5)).collect(),
    ))
    .await
    .unwrap();
    assert_eq!(a13.register_with(coordinator.address()).await.unwrap(), 13);
    let peers = coordinator.peers();
    assert_eq!(peers.len(), 1);
    assert_eq!(peers[0].sensors.len(), 13);

    let a14 = Node::start(node_config(
        "A",
        (0..14).map(|i| walk(&format!("s{i:02}"), i, 1000, 5)).collect(),
    ))
    .await
    .unwrap();
    assert_eq!(a14.register_with(coordinator.address()).await.unwrap(), 14);
    let peers = coordinator.peers();
    assert_eq!(peers.len(), 1);
    assert_eq!(peers[0].sensors.len(), 14);
    assert_eq!(coordinator.status().peers[0].sensors, 14);
}

#[tokio::test]
async fn background_registration_and_offline_coordinator() {
    let coordinator = Node::start(node_config("coord", vec![])).await.unwrap();
    let mut cfg = node_config("A", vec![walk("w", 1, 50, 100)]);
    cfg.coordinator = Some(coordinator.address().to_string());
    let a = Node::start(cfg).await.unwrap();
    assert!(wait_until(Duration::from_secs(5), || a.status().registration == "registered").await);
    assert_eq!(coordinator.peers()[0].node_id, "A");

    let mut cfg = node_config("B", vec![walk("w", 1, 50, 100)]);
    cfg.coordinator = Some(free_addr());
    let b = Node::start(cfg).await.unwrap();
    tokio::time::sleep(Duration::from_millis(600)).await;
    let st = b.status();
    assert_eq!(st.registration, "pending");
    assert_eq!(st.retry_queue, 1);
    assert!(st.sensors[0].total_inserted >= 5, "sampling continues offline");
}

#[tokio::test]
async fn latest_query_is_newest_first() {
    let node = Node::start(node_config("q", vec![walk("w", 3, 20, 50)])).await.unwrap();
    assert!(wait_until(Duration::from_secs(5), || inserted(&node, "w") >= 6).await);
    let (status, frame) = get(node.address(), "/sensor/w/latest?n=3&id=r1").await;
    assert_eq!(status, 200);
    assert_eq!(frame.id, "r1");
    let Message::QueryResult(r) = frame.message else {
        panic!("expected query_result")
    };
    assert_eq!(r.job, "r1");
    assert_eq!(r.elements.len(), 3);
    assert!(r.elements[0].seq > r.elements[1].seq && r.elements[1].seq > r.elements[2].seq);

    let (status, frame) = get(node.address(), "/sensor/nope/latest?n=1").await;
    assert_eq!(status, 404);
    assert_eq!(frame.error_code(), Some("SENSOR_UNKNOWN"));
    let (status, frame) = get(node.address(), "/sensor/w/range?from=10&to=5").await;
    assert_eq!(status, 400);
    assert_eq!(frame.error_code(), Some("RANGE_INVERTED"));
}

#[tokio::test]
async fn queue_answers_in_fifo_order_and_survives_unknown_sensors() {
    let node = Node::start(node_config("fifo", vec![walk("w", 3, 20, 50)])).await.unwrap();
    let q = |sensor: &str| QueryRequest {
        sensor: sensor.into(),
        kind: QueryKind::LatestN { n: 1 },
    };
    let (a, ra) = node.enqueue_query(q("w"), "t").unwrap();
    let (b, rb) = node.enqueue_query(q("missing"), "t").unwrap();
    let (c, rc) = node.enqueue_query(q("w"), "t").unwrap();
    let fa = ra.await.unwrap();
    let fb = rb.await.unwrap();
    let fc = rc.await.unwrap();
    assert_eq!((fa.id.as_str(), fb.id.as_str(), fc.id.as_str()), (a.as_str(), b.as_str(), c.as_str()));
    assert_eq!(fb.error_code(), Some("SENSOR_UNKNOWN"));
    assert!(matches!(fc.message, Message::QueryResult(_)));
}

#[tokio::test]
async fn fetch_remote_records_round_trips() {
    let peer = Node::start(node_config("peer", vec![walk("w", 1, 20, 10)])).await.unwrap();
    let me = Node::start(node_config("me", vec![walk("mine", 2, 20, 10)])).await.unwrap();
    assert!(wait_until(Duration::from_secs(5), || inserted(&peer, "w") >= 1 && inserted(&me, "mine") >= 1).await);

    let (elements, sample) = me.fetch_remote(peer.address(), "w", QueryKind::LatestN { n: 1 }).await.unwrap();
    assert_eq!(elements.len(), 1);
    assert!(sample.t_received >= sample.t_sent);
    assert_eq!(me.round_trips().len(), 1);

    // a node can query itself
    let (own, _) = me.fetch_remote(me.address(), "mine", QueryKind::LatestN { n: 10 }).await.unwrap();
    let window = me.window("mine").unwrap();
    assert!(own.len() <= window.len() + 1 && !own.is_empty());

    let err = me
        .fetch_remote(&free_addr(), "w", QueryKind::LatestN { n: 1 })
        .await
        .unwrap_err();
    assert_eq!(err.code(), "PEER_UNREACHABLE");
}

async fn raw_exchange(addr: &str, raw: &[u8]) -> (BufReader<TcpStream>, u16, Frame) {
    let stream = TcpStream::connect(addr).await.unwrap();
    let mut io = BufReader::new(stream);
    io.get_mut().write_all(raw).await.unwrap();
    let (status, frame) = http::read_response(&mut io).await.unwrap();
    (io, status, frame)
}

#[tokio::test]
async fn malformed_body_leaves_the_connection_usable() {
    let node = Node::start(node_config("m", vec![])).await.unwrap();
    let body = "{not json";
    let req = format!(
        "POST /frame HTTP/1.1\r\nHost: x\r\nContent-Length: {}\r\n\r\n{body}",
        body.len()
    );
    let (mut io, status, frame) = raw_exchange(node.address(), req.as_bytes()).await;
    assert_eq!(status, 400);
    assert_eq!(frame.error_code(), Some("BAD_REQUEST"));

    let unknown = r#"{"type":"teleport","id":"u1","body":{}}"#;
    let req = format!(
        "POST /frame HTTP/1.1\r\nHost: x\r\nContent-Length: {}\r\n\r\n{unknown}",
        unknown.len()
    );
    io.get_mut().write_all(req.as_bytes()).await.unwrap();
    let (status, frame) = http::read_response(&mut io).await.unwrap();
    assert_eq!(status, 400);
    assert_eq!(frame.error_code(), Some("UNKNOWN_TYPE"));
    assert_eq!(frame.id, "u1");

    http::write_request(&mut io, Method::Get, "/status", None).await.unwrap();
    let (status, frame) = http::read_response(&mut io).await.unwrap();
    assert_eq!(status, 200);
    assert!(matches!(frame.message, Message::Status(_)));
}

#[tokio::test]
async fn hello_checks_the_protocol_version() {
    let node = Node::start(node_config("h", vec![])).await.unwrap();
    let mut conn = Connection::connect(node.address(), Duration::from_secs(5), vec![]).await.unwrap();
    let ok = Frame::new("h1", Message::Hello { version: "1".into() });
    let (status, reply) = conn.call(Method::Post, "/hello", Some(&ok)).await.unwrap();
    assert_eq!((status, reply), (200, ok));
    let bad = Frame::new("h2", Message::Hello { version: "2".into() });
    let (status, reply) = conn.call(Method::Post, "/hello", Some(&bad)).await.unwrap();
    assert_eq!(status, 400);
    assert_eq!(reply.error_code(), Some("VERSION_MISMATCH"));
}

#[tokio::test]
async fn history_shrink_evicts_immediately() {
    let node = Node::start(node_config("h", vec![walk("w", 1, 10, 100)])).await.unwrap();
    assert!(wait_until(Duration::from_secs(5), || inserted(&node, "w") >= 20).await);
    let evicted = node.set_history_size("w", 5).unwrap();
    assert!(evicted.len() >= 15);
    assert!(node.window("w").unwrap().len() <= 5);
    assert_eq!(node.status().sensors[0].history_size, 5);
}

/// Subscriber stand-in that answers BUSY a fixed number of times, then acks.
struct Flaky {
    refuse: AtomicU64,
    connections: AtomicU64,
    seqs: parking_lot::Mutex<Vec<(u64, Option<u64>)>>,
}

#[async_trait]
impl Handler for Flaky {
    async fn handle(&self, request: Frame, _conn: &ConnInfo) -> Frame {
        self.connections.fetch_add(1, Ordering::Relaxed);
        let Message::Deliver { subscription, element } = request.message else {
            return Frame::error(request.id, "BAD_REQUEST", "deliveries only");
        };
        if self
            .refuse
            .fetch_update(Ordering::Relaxed, Ordering::Relaxed, |n| n.checked_sub(1))
            .is_ok()
        {
            return Frame::error(request.id, "BUSY", "not yet");
        }
        self.seqs.lock().push((element.seq, request.gap));
        Frame::new(
            request.id,
            Message::DeliverAck {
                subscription,
                seq: element.seq,
            },
        )
    }
}

async fn flaky(refuse: u64) -> (Arc<Flaky>, wire::Server) {
    let h = Arc::new(Flaky {
        refuse: AtomicU64::new(refuse),
        connections: AtomicU64::new(0),
        seqs: parking_lot::Mutex::new(Vec::new()),
    });
    let server = wire::serve("127.0.0.1:0", h.clone(), Arc::default()).await.unwrap();
    (h, server)
}

fn push_request(sensor: &str, subscriber: &str, persistent: bool) -> SubscribeRequest {
    SubscribeRequest {
        sensor: sensor.into(),
        subscriber: subscriber.into(),
        mode: DeliveryMode::Push,
        persistent_delivery: persistent,
    }
}

#[tokio::test]
async fn push_delivers_in_order_one_connection_each() {
    let (sink, server) = flaky(0).await;
    let node = Node::start(node_config("p", vec![walk("w", 1, 30, 100)])).await.unwrap();
    let sub = node
        .subscribe(push_request("w", &server.local_addr().to_string(), true))
        .unwrap();
    assert!(wait_until(Duration::from_secs(10), || sink.seqs.lock().len() >= 5).await);
    tokio::time::sleep(Duration::from_millis(5)).await;
    let got: Vec<u64> = sink.seqs.lock().iter().map(|s| s.0).collect();
    assert!(got.windows(2).all(|w| w[1] == w[0] + 1), "{got:?}");
    let st = node.subscription(&sub.id).unwrap();
    assert!(st.cursor.unwrap() >= got[4]);
    // one connection per delivered element
    assert_eq!(sink.connections.load(Ordering::Relaxed), sink.seqs.lock().len() as u64);
    assert!(st.connections - st.delivered <= 1);
}

#[tokio::test]
async fn push_retries_refusals_and_acks_once() {
    let (sink, server) = flaky(2).await;
    let node = Node::start(node_config("p", vec![walk("w", 1, 5000, 10)])).await.unwrap();
    assert!(wait_until(Duration::from_secs(5), || inserted(&node, "w") == 1).await);
    let sub = node
        .subscribe(push_request("w", &server.local_addr().to_string(), true))
        .unwrap();
    assert!(wait_until(Duration::from_secs(8), || sink.seqs.lock().len() == 1).await);
    tokio::time::sleep(Duration::from_millis(20)).await;
    let st = node.subscription(&sub.id).unwrap();
    assert_eq!(st.attempts, 3);
    assert_eq!(st.delivered, 1);
    assert_eq!(st.cursor, Some(1));
    assert_eq!(sink.connections.load(Ordering::Relaxed), 3);
}

#[tokio::test]
async fn offline_subscriber_gets_the_buffered_elements_first() {
    let addr = free_addr();
    let node = Node::start(node_config("p", vec![walk("w", 1, 50, 100)])).await.unwrap();
    let sub = node.subscribe(push_request("w", &addr, true)).unwrap();
    let first = node.window("w").unwrap().len() as u64;
    // three elements are produced while nobody listens
    assert!(wait_until(Duration::from_secs(5), || inserted(&node, "w") >= first + 3).await);
    let mut cfg = node_config("sub", vec![]);
    cfg.listen = addr.clone();
    let subscriber = Node::start(cfg).await.unwrap();
    let mut rx = subscriber.deliveries();
    let mut seqs = Vec::new();
    while seqs.len() < 8 {
        let d = tokio::time::timeout(Duration::from_secs(10), rx.recv()).await.unwrap().unwrap();
        assert_eq!(d.gap, 0);
        seqs.push(d.element.seq);
    }
    assert_eq!(seqs[0], first, "delivery starts at the first element after subscribing");
    assert!(seqs.windows(2).all(|w| w[1] == w[0] + 1), "{seqs:?}");
    assert_eq!(node.subscription(&sub.id).unwrap().gaps, 0);
}

#[tokio::test]
async fn outage_longer_than_the_window_reports_a_gap() {
    let addr = free_addr();
    let node = Node::start(node_config("p", vec![walk("w", 1, 20, 3)])).await.unwrap();
    let start = node.window("w").unwrap().len() as u64;
    node.subscribe(push_request("w", &addr, true)).unwrap();
    assert!(wait_until(Duration::from_secs(5), || inserted(&node, "w") >= start + 12).await);
    let mut cfg = node_config("sub", vec![]);
    cfg.listen = addr;
    let subscriber = Node::start(cfg).await.unwrap();
    let mut rx = subscriber.deliveries();
    let d = tokio::time::timeout(Duration::from_secs(15), rx.recv()).await.unwrap().unwrap();
    assert!(d.gap > 0, "first delivery after eviction carries the gap");
    assert_eq!(d.element.seq, start + d.gap);
}

#[tokio::test]
async fn non_persistent_push_skips_while_offline() {
    let addr = free_addr();
    let node = Node::start(node_config("p", vec![walk("w", 1, 50, 100)])).await.unwrap();
    let sub = node.subscribe(push_request("w", &addr, false)).unwrap();
    tokio::time::sleep(Duration::from_millis(300)).await;
    let mut cfg = node_config("sub", vec![]);
    cfg.listen = addr;
    let subscriber = Node::start(cfg).await.unwrap();
    let mut rx = subscriber.deliveries();
    let d = tokio::time::timeout(Duration::from_secs(5), rx.recv()).await.unwrap().unwrap();
    assert!(d.gap > 0);
    assert!(node.subscription(&sub.id).unwrap().gaps > 0);
}

async fn stream_frames(addr: &str, target: &str, count: usize) -> Vec<Frame> {
    let conn = Connection::connect(addr, Duration::from_secs(5), vec![]).await.unwrap();
    let mut s = conn.into_stream(target).await.unwrap();
    let mut frames = Vec::new();
    while frames.len() < count {
        let f = tokio::time::timeout(Duration::from_secs(15), s.next())
            .await
            .unwrap()
            .unwrap()
            .unwrap();
        frames.push(f);
    }
    frames
}

fn stream_request(sensor: &str) -> SubscribeRequest {
    SubscribeRequest {
        sensor: sensor.into(),
        subscriber: "observer".into(),
        mode: DeliveryMode::PersistentStream,
        persistent_delivery: true,
    }
}

#[tokio::test]
async fn persistent_stream_uses_one_connection() {
    let node = Node::start(node_config("s", vec![walk("w", 1, 30, 100)])).await.unwrap();
    let sub = node.subscribe(stream_request("w")).unwrap();
    let target = format!("/sensor/w/stream?subscription={}", sub.id);
    let frames = stream_frames(node.address(), &target, 5).await;
    let seqs: Vec<u64> = frames
        .iter()
        .map(|f| match &f.message {
            Message::Deliver { element, .. } => element.seq,
            _ => panic!("unexpected {f:?}"),
        })
        .collect();
    assert!(seqs.windows(2).all(|w| w[1] == w[0] + 1));
    let st = node.subscription(&sub.id).unwrap();
    assert_eq!(st.connections, 1);
    assert!(st.delivered >= 5);
}

#[tokio::test]
async fn silent_stream_sends_heartbeats() {
    let node = Node::start(node_config("s", vec![walk("w", 1, 60_000, 10)])).await.unwrap();
    assert!(wait_until(Duration::from_secs(5), || inserted(&node, "w") == 1).await);
    let sub = node.subscribe(stream_request("w")).unwrap();
    let target = format!("/sensor/w/stream?subscription={}", sub.id);
    let start = Instant::now();
    let frames = stream_frames(node.address(), &target, 1).await;
    assert!(matches!(frames[0].message, Message::Status(_)));
    let waited = start.elapsed();
    assert!(waited >= Duration::from_secs(9) && waited <= Duration::from_secs(12), "{waited:?}");
}

#[tokio::test]
async fn stream_resume_loses_nothing() {
    let node = Node::start(node_config("s", vec![walk("w", 1, 30, 200)])).await.unwrap();
    let sub = node.subscribe(stream_request("w")).unwrap();
    let target = format!("/sensor/w/stream?subscription={}", sub.id);
    let seq_of = |f: &Frame| match &f.message {
        Message::Deliver { element, .. } => (element.seq, f.gap),
        _ => panic!("unexpected {f:?}"),
    };
    let first: Vec<(u64, Option<u64>)> = stream_frames(node.address(), &target, 3).await.iter().map(seq_of).collect();
    // connection dropped; elements keep coming
    tokio::time::sleep(Duration::from_millis(300)).await;
    let last = first.last().unwrap().0;
    let resumed = format!("{target}&resume={last}");
    let second: Vec<(u64, Option<u64>)> = stream_frames(node.address(), &resumed, 10).await.iter().map(seq_of).collect();
    let all: Vec<(u64, Option<u64>)> = first.into_iter().chain(second).collect();
    assert!(all.windows(2).all(|w| w[1].0 == w[0].0 + 1), "{all:?}");
    assert!(all.iter().all(|(_, gap)| gap.is_none()));
    assert_eq!(node.subscription(&sub.id).unwrap().connections, 2);
}

#[tokio::test]
async fn stream_needs_a_known_subscription() {
    let node = Node::start(node_config("s", vec![walk("w", 1, 30, 10)])).await.unwrap();
    let conn = Connection::connect(node.address(), Duration::from_secs(5), vec![]).await.unwrap();
    let err = conn.into_stream("/sensor/w/stream?subscription=nope").await.err().unwrap();
    assert_eq!(err.code(), "SUBSCRIPTION_UNKNOWN");
    let err = node.subscribe(stream_request("nope")).unwrap_err();
    assert_eq!(err.code(), "SENSOR_UNKNOWN");
}

#[tokio::test]
async fn follow_reconnects_and_fills_in() {
    let publisher = Node::start(node_config("pub", vec![walk("w", 1, 30, 200)])).await.unwrap();
    let subscriber = Node::start(node_config("sub", vec![])).await.unwrap();
    let sub = subscriber
        .subscribe_remote(publisher.address(), "w", DeliveryMode::PersistentStream, true)
        .await
        .unwrap();
    let mut rx = subscriber.deliveries();
    subscriber.follow(publisher.address(), &sub);
    let mut seqs = Vec::new();
    while seqs.len() < 10 {
        let d = tokio::time::timeout(Duration::from_secs(5), rx.recv()).await.unwrap().unwrap();
        assert_eq!(d.gap, 0);
        seqs.push(d.element.seq);
    }
    assert!(seqs.windows(2).all(|w| w[1] == w[0] + 1));
}

#[tokio::test]
async fn push_and_stream_carry_identical_payloads() {
    let a = Node::start(node_config("a", vec![walk("w", 9, 30, 200)])).await.unwrap();
    let b = Node::start(node_config("b", vec![walk("w", 9, 30, 200)])).await.unwrap();
    let subscriber = Node::start(node_config("sub", vec![])).await.unwrap();
    let mut rx = subscriber.deliveries();
    let pushed = a
        .subscribe(SubscribeRequest {
            sensor: "w".into(),
            subscriber: subscriber.address().into(),
            mode: DeliveryMode::Push,
            persistent_delivery: true,
        })
        .unwrap();
    let streamed = subscriber
        .subscribe_remote(b.address(), "w", DeliveryMode::PersistentStream, true)
        .await
        .unwrap();
    subscriber.follow(b.address(), &streamed);
    let mut by_sub: BTreeMap<String, BTreeMap<u64, String>> = BTreeMap::new();
    let enough = |m: &BTreeMap<String, BTreeMap<u64, String>>| m.len() == 2 && m.values().all(|v| v.len() >= 15);
    while !enough(&by_sub) {
        let d = tokio::time::timeout(Duration::from_secs(10), rx.recv()).await.unwrap().unwrap();
        let body = serde_json::to_string(&d.element.values).unwrap();
        by_sub.entry(d.subscription).or_default().insert(d.element.seq, body);
    }
    let p = &by_sub[&pushed.id];
    let s = &by_sub[&streamed.id];
    let common: Vec<u64> = p.keys().filter(|k| s.contains_key(k)).copied().collect();
    assert!(common.len() >= 10);
    for k in common {
        assert_eq!(p[&k], s[&k], "seq {k}");
    }
    let ps = a.subscription(&pushed.id).unwrap();
    let ss = b.subscription(&streamed.id).unwrap();
    let per_element = |st: &vsense::wire::frame::SubscriptionStatus| {
        (st.wire_bytes as f64 - st.payload_bytes as f64) / st.delivered as f64
    };
    assert!(
        per_element(&ps) > per_element(&ss),
        "push overhead {} vs stream {}",
        per_element(&ps),
        per_element(&ss)
    );
    assert_eq!(ss.connections, 1);
    // one push may be in flight when the counters are read
    assert!(ps.connections - ps.delivered <= 1, "{} vs {}", ps.connections, ps.delivered);
}

#[tokio::test]
async fn windows_are_unaffected_by_a_missing_coordinator() {
    let twin = Node::start(node_config("twin", vec![walk("w", 4, 20, 500)])).await.unwrap();
    let mut cfg = node_config("lonely", vec![walk("w", 4, 20, 500)]);
    cfg.coordinator = Some(free_addr());
    cfg.subscriptions = vec![push_request("w", &free_addr(), true)];
    let lonely = Node::start(cfg).await.unwrap();
    tokio::time::sleep(Duration::from_millis(800)).await;
    let a = twin.window("w").unwrap();
    let b = lonely.window("w").unwrap();
    let b: BTreeMap<u64, _> = b.into_iter().map(|e| (e.seq, e.values)).collect();
    let mut matched = 0;
    for e in a {
        if let Some(v) = b.get(&e.seq) {
            assert_eq!(&e.values, v, "seq {}", e.seq);
            matched += 1;
        }
    }
    assert!(matched >= 20);
}

#[tokio::test]
async fn processing_chain_filters_without_consuming_seqs() {
    let mut s = walk("w", 1, 10, 500);
    s.source = SourceSpec {
        plugin: "sine".into(),
        params: params(&[("amplitude", ParamValue::Float(1.0)), ("freq_hz", ParamValue::Float(2.0))]),
    };
    s.processors = vec![ProcessorSpec::new("filter_range")
        .with("min", ParamValue::Float(0.0))
        .with("max", ParamValue::Float(1.0))];
    let node = Node::start(node_config("f", vec![s])).await.unwrap();
    assert!(wait_until(Duration::from_secs(5), || node.status().sensors[0].filtered >= 5).await);
    let window = node.window("w").unwrap();
    assert!(window.iter().all(|e| e.values[0].as_f64().unwrap() >= 0.0));
    assert!(window.windows(2).all(|w| w[1].seq == w[0].seq + 1));
}
