//! The endpoint table and the connection loop that serves it.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use async_trait::async_trait;
use tokio::io::{AsyncWrite, BufReader};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::watch;
use tokio::task::JoinHandle;

use super::frame::{Frame, Message, QueryKind, QueryRequest};
use super::http::{self, Meter, Method, Metered, Request};
use super::WireError;

/// Per-connection context passed to handlers.
pub struct ConnInfo {
    /// Unique per server, in accept order.
    pub id: u64,
    pub peer: SocketAddr,
    /// Bytes moved on this connection so far.
    pub meter: Arc<Meter>,
    /// Requests read on this connection so far, including the current one.
    pub requests: AtomicU64,
}

/// Parameters of `GET /sensor/{name}/stream`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamRequest {
    pub sensor: String,
    pub subscription: Option<String>,
    /// Last seq the subscriber holds; delivery restarts after it.
    pub resume: Option<u64>,
}

/// Writes frames of an accepted streaming response.
pub struct FrameSink<'a> {
    out: &'a mut (dyn AsyncWrite + Unpin + Send),
}

impl FrameSink<'_> {
    /// Writes and flushes one frame.
    pub async fn send(&mut self, frame: &Frame) -> Result<(), WireError> {
        http::write_frame_line(&mut self.out, frame).await
    }
}

/// The response side of a stream request: either reject it with a single
/// frame or start the stream.
pub struct StreamOut<'a> {
    out: &'a mut (dyn AsyncWrite + Unpin + Send),
}

impl<'a> StreamOut<'a> {
    pub async fn reject(mut self, frame: &Frame) -> Result<(), WireError> {
        http::write_response(&mut self.out, status_for(frame), frame).await
    }

    pub async fn start(mut self) -> Result<FrameSink<'a>, WireError> {
        http::write_stream_head(&mut self.out).await?;
        Ok(FrameSink { out: self.out })
    }
}

#[async_trait]
pub trait Handler: Send + Sync + 'static {
    /// Decides whether a fresh connection is served. A refused connection
    /// gets a `BUSY` error for its first request and is closed.
    async fn admit(&self, _peer: SocketAddr) -> bool {
        true
    }

    /// Answers one request frame with exactly one response frame.
    async fn handle(&self, request: Frame, conn: &ConnInfo) -> Frame;

    /// Serves a persistent stream until it ends or the peer goes away.
    async fn stream(&self, request: StreamRequest, _conn: &ConnInfo, out: StreamOut<'_>) -> Result<(), WireError> {
        let err = Frame::error("", "NOT_FOUND", format!("no stream for {}", request.sensor));
        out.reject(&err).await
    }
}

/// HTTP status used for a response frame.
pub fn status_for(frame: &Frame) -> u16 {
    match frame.error_code() {
        None => 200,
        Some("SENSOR_UNKNOWN" | "NOT_FOUND" | "SUBSCRIPTION_UNKNOWN") => 404,
        Some("QUEUE_FULL" | "BUSY") => 503,
        Some("TIMEOUT") => 504,
        Some(_) => 400,
    }
}

enum Routed {
    Frame(Frame),
    Stream(StreamRequest),
    Reply(Frame),
}

fn bad_request(id: &str, message: impl Into<String>) -> Routed {
    Routed::Reply(Frame::error(id, "BAD_REQUEST", message))
}

fn parse_u64(req: &Request, key: &str) -> Result<Option<u64>, String> {
    req.query
        .get(key)
        .map(|v| v.parse::<u64>().map_err(|_| format!("query parameter {key} must be an integer")))
        .transpose()
}

/// Maps a request onto the frame it stands for.
fn route(req: &Request) -> Routed {
    let id = req.query.get("id").cloned().unwrap_or_default();
    let segments: Vec<&str> = req.path.trim_matches('/').split('/').collect();
    let body_frame = |expected: Option<&'static str>| -> Routed {
        let text = match std::str::from_utf8(&req.body) {
            Ok(t) if !t.trim().is_empty() => t,
            Ok(_) => return bad_request(&id, "missing frame body"),
            Err(_) => return bad_request(&id, "body is not UTF-8"),
        };
        match Frame::decode(text) {
            Ok(f) => match expected {
                Some(ty) if f.frame_type().as_str() != ty => {
                    bad_request(&f.id, format!("expected a {ty} frame, got {}", f.frame_type().as_str()))
                }
                _ => Routed::Frame(f),
            },
            Err(e) => Routed::Reply(e.to_frame()),
        }
    };
    match (req.method, segments.as_slice()) {
        (Method::Get, ["sensors"]) => Routed::Frame(Frame::new(id, Message::ListSensors)),
        (Method::Get, ["status"]) => Routed::Frame(Frame::new(id, Message::Status(Box::default()))),
        (Method::Get, ["sensor", name, "latest"]) => match parse_u64(req, "n") {
            Ok(Some(0)) => bad_request(&id, "n must be at least 1"),
            Ok(n) => Routed::Frame(Frame::new(
                id,
                Message::Query(QueryRequest {
                    sensor: name.to_string(),
                    kind: QueryKind::LatestN {
                        n: n.unwrap_or(1) as usize,
                    },
                }),
            )),
            Err(e) => bad_request(&id, e),
        },
        (Method::Get, ["sensor", name, "range"]) => match (parse_u64(req, "from"), parse_u64(req, "to")) {
            (Ok(Some(from)), Ok(Some(to))) => Routed::Frame(Frame::new(
                id,
                Message::Query(QueryRequest {
                    sensor: name.to_string(),
                    kind: QueryKind::Range { from, to },
                }),
            )),
            _ => bad_request(&id, "range needs integer from and to"),
        },
        (Method::Get, ["sensor", name, "stream"]) => match parse_u64(req, "resume") {
            Ok(resume) => Routed::Stream(StreamRequest {
                sensor: name.to_string(),
                subscription: req.query.get("subscription").cloned(),
                resume,
            }),
            Err(e) => bad_request(&id, e),
        },
        (Method::Post, ["register"]) => body_frame(Some("register")),
        (Method::Post, ["subscribe"]) => body_frame(Some("subscribe")),
        (Method::Post, ["deliver"]) => body_frame(Some("deliver")),
        (Method::Post, ["hello"]) => body_frame(Some("hello")),
        (Method::Post, ["frame"]) => body_frame(None),
        _ => Routed::Reply(Frame::error(
            id,
            "NOT_FOUND",
            format!("no endpoint {} {}", req.method.as_str(), req.path),
        )),
    }
}

/// A running listener.
pub struct Server {
    local_addr: SocketAddr,
    shutdown: watch::Sender<bool>,
    accept_task: JoinHandle<()>,
    accepted: Arc<AtomicU64>,
}

impl Server {
    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    /// Connections accepted so far.
    pub fn connections_accepted(&self) -> u64 {
        self.accepted.load(Ordering::Relaxed)
    }

    /// Stops accepting and drops every open connection.
    pub fn shutdown(&self) {
        let _ = self.shutdown.send(true);
        self.accept_task.abort();
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// Binds `addr` and serves the endpoint table with `handler`. Every byte
/// moved is also counted into `node_meter`.
pub async fn serve(addr: &str, handler: Arc<dyn Handler>, node_meter: Arc<Meter>) -> Result<Server, WireError> {
    let listener = TcpListener::bind(addr).await.map_err(|e| {
        if e.kind() == std::io::ErrorKind::AddrInUse {
            WireError::AddressInUse(addr.to_string())
        } else {
            WireError::Io(e)
        }
    })?;
    let local_addr = listener.local_addr()?;
    let (shutdown, rx) = watch::channel(false);
    let accepted = Arc::new(AtomicU64::new(0));
    let counter = accepted.clone();
    let accept_task = tokio::spawn(async move {
        loop {
            let Ok((stream, peer)) = listener.accept().await else {
                continue;
            };
            let id = counter.fetch_add(1, Ordering::Relaxed);
            let _ = stream.set_nodelay(true);
            let handler = handler.clone();
            let node_meter = node_meter.clone();
            let mut rx = rx.clone();
            tokio::spawn(async move {
                tokio::select! {
                    _ = serve_connection(id, stream, peer, handler, node_meter) => {}
                    _ = rx.wait_for(|stop| *stop) => {}
                }
            });
        }
    });
    Ok(Server {
        local_addr,
        shutdown,
        accept_task,
        accepted,
    })
}

async fn serve_connection(
    id: u64,
    stream: TcpStream,
    peer: SocketAddr,
    handler: Arc<dyn Handler>,
    node_meter: Arc<Meter>,
) {
    let meter = Arc::new(Meter::default());
    let conn = ConnInfo {
        id,
        peer,
        meter: meter.clone(),
        requests: AtomicU64::new(0),
    };
    let mut io = BufReader::new(Metered::new(stream, vec![meter, node_meter]));
    let admitted = handler.admit(peer).await;
    loop {
        let req = match http::read_request(&mut io).await {
            Ok(Some(req)) => req,
            Ok(None) | Err(WireError::Io(_)) => return,
            Err(e) => {
                // the byte stream cannot be resynchronized after a bad head
                let _ = http::write_response(&mut io, 400, &Frame::error("", "BAD_REQUEST", e.to_string())).await;
                return;
            }
        };
        conn.requests.fetch_add(1, Ordering::Relaxed);
        if !admitted {
            let _ = http::write_response(&mut io, 503, &Frame::error("", "BUSY", "server at capacity")).await;
            return;
        }
        let reply = match route(&req) {
            Routed::Reply(f) => f,
            Routed::Frame(f) => handler.handle(f, &conn).await,
            Routed::Stream(s) => {
                let _ = handler.stream(s, &conn, StreamOut { out: &mut io }).await;
                return;
            }
        };
        if http::write_response(&mut io, status_for(&reply), &reply).await.is_err() {
            return;
        }
    }
}
