//! The frame codec.
//!
//! A frame is one line of UTF-8 JSON with the fixed top-level field order
//! `type`, `id`, `gap` (omitted when absent), `body`:
//!
//! ```text
//! {"type":"deliver","id":"sub-1:7","gap":2,"body":{"subscription":"sub-1","element":{...}}}
//! ```
//!
//! Body fields follow the declaration order of the payload structs below.
//! Numbers use the shortest decimal form that round-trips, and timestamps
//! are integer epoch milliseconds.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;
use thiserror::Error;

use crate::model::{FieldSchema, StreamElement};

pub const PROTOCOL_VERSION: &str = "1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameType {
    Hello,
    Register,
    RegisterAck,
    ListSensors,
    SensorList,
    Query,
    QueryResult,
    Subscribe,
    SubscribeAck,
    Deliver,
    DeliverAck,
    Error,
    Status,
}

impl FrameType {
    pub const ALL: [FrameType; 13] = [
        FrameType::Hello,
        FrameType::Register,
        FrameType::RegisterAck,
        FrameType::ListSensors,
        FrameType::SensorList,
        FrameType::Query,
        FrameType::QueryResult,
        FrameType::Subscribe,
        FrameType::SubscribeAck,
        FrameType::Deliver,
        FrameType::DeliverAck,
        FrameType::Error,
        FrameType::Status,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FrameType::Hello => "hello",
            FrameType::Register => "register",
            FrameType::RegisterAck => "register_ack",
            FrameType::ListSensors => "list_sensors",
            FrameType::SensorList => "sensor_list",
            FrameType::Query => "query",
            FrameType::QueryResult => "query_result",
            FrameType::Subscribe => "subscribe",
            FrameType::SubscribeAck => "subscribe_ack",
            FrameType::Deliver => "deliver",
            FrameType::DeliverAck => "deliver_ack",
            FrameType::Error => "error",
            FrameType::Status => "status",
        }
    }

    pub fn parse(s: &str) -> Option<FrameType> {
        FrameType::ALL.into_iter().find(|t| t.as_str() == s)
    }

    /// The response type for a request type; `None` for response-only types.
    pub fn response(self) -> Option<FrameType> {
        match self {
            FrameType::Hello => Some(FrameType::Hello),
            FrameType::Register => Some(FrameType::RegisterAck),
            FrameType::ListSensors => Some(FrameType::SensorList),
            FrameType::Query => Some(FrameType::QueryResult),
            FrameType::Subscribe => Some(FrameType::SubscribeAck),
            FrameType::Deliver => Some(FrameType::DeliverAck),
            FrameType::Status => Some(FrameType::Status),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorInfo {
    pub name: String,
    pub output_schema: Vec<FieldSchema>,
    pub history_size: u64,
    pub sampling_interval: u64,
}

/// A node's announcement of itself and its sensors to a coordinator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeerRegistration {
    pub node_id: String,
    pub address: String,
    pub sensors: Vec<SensorInfo>,
    pub registered_at: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeliveryMode {
    /// Many elements over one long-lived connection.
    PersistentStream,
    /// One fresh connection per element.
    Push,
}

impl DeliveryMode {
    pub fn as_str(self) -> &'static str {
        match self {
            DeliveryMode::PersistentStream => "persistent_stream",
            DeliveryMode::Push => "push",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubscribeRequest {
    pub sensor: String,
    pub subscriber: String,
    pub mode: DeliveryMode,
    pub persistent_delivery: bool,
}

/// A peer's registered interest in one sensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subscription {
    pub id: String,
    pub sensor: String,
    pub subscriber: String,
    pub mode: DeliveryMode,
    pub persistent_delivery: bool,
    pub created_at: u64,
    /// Last acknowledged seq.
    pub cursor: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum QueryKind {
    LatestN { n: usize },
    Range { from: u64, to: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRequest {
    pub sensor: String,
    #[serde(flatten)]
    pub kind: QueryKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub job: String,
    pub sensor: String,
    pub elements: Vec<StreamElement>,
    /// Time from enqueue to answer on the serving node, microseconds.
    pub processing_us: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SensorStatus {
    pub name: String,
    pub history_size: u64,
    pub stored: u64,
    pub total_inserted: u64,
    pub latest_seq: Option<u64>,
    pub bytes: u64,
    /// Elements dropped by a filtering processor.
    pub filtered: u64,
    /// Ticks skipped because the source had no data.
    pub unavailable: u64,
    /// Ticks lost to processing or storage errors.
    pub errors: u64,
    pub failed: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SubscriptionStatus {
    pub id: String,
    pub sensor: String,
    pub subscriber: String,
    pub mode: Option<DeliveryMode>,
    pub cursor: Option<u64>,
    pub delivered: u64,
    pub attempts: u64,
    pub connections: u64,
    pub gaps: u64,
    pub wire_bytes: u64,
    pub payload_bytes: u64,
}

/// Work-count proxies for resource use.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct WorkCounters {
    pub elements_processed: u64,
    pub points_served: u64,
    pub queries_answered: u64,
    pub queries_rejected: u64,
    pub connections_opened: u64,
    pub connections_accepted: u64,
    pub connections_rejected: u64,
    pub bytes_in: u64,
    pub bytes_out: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PeerSummary {
    pub node_id: String,
    pub address: String,
    pub sensors: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct AggregatorStatus {
    /// `waiting`, `running` or `done`.
    pub state: String,
    pub mode: String,
    pub streams: u64,
    pub completions: u64,
    pub failures: u64,
    pub deliveries: u64,
    pub duplicate_deliveries: u64,
    pub stream_connections: u64,
    pub push_connections: u64,
}

/// Node status. Heartbeat frames carry a status with only `node_id` set.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct StatusReport {
    pub node_id: String,
    pub address: String,
    pub version: String,
    pub uptime_ms: u64,
    pub active_sensors: u64,
    pub sensors: Vec<SensorStatus>,
    pub queue_depth: u64,
    pub subscriptions: Vec<SubscriptionStatus>,
    /// `none`, `pending` or `registered`.
    pub registration: String,
    pub retry_queue: u64,
    pub peers: Vec<PeerSummary>,
    pub storage_bytes: u64,
    pub work: WorkCounters,
    pub aggregator: Option<AggregatorStatus>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Hello { version: String },
    Register(PeerRegistration),
    RegisterAck { node_id: String, sensors: u64 },
    ListSensors,
    SensorList { sensors: Vec<SensorInfo> },
    Query(QueryRequest),
    QueryResult(QueryResult),
    Subscribe(SubscribeRequest),
    SubscribeAck(Subscription),
    Deliver { subscription: String, element: StreamElement },
    DeliverAck { subscription: String, seq: u64 },
    Error { code: String, message: String },
    Status(Box<StatusReport>),
}

#[derive(Serialize, Deserialize)]
struct HelloBody {
    version: String,
}

#[derive(Serialize, Deserialize)]
struct RegisterAckBody {
    node_id: String,
    sensors: u64,
}

#[derive(Serialize, Deserialize)]
struct Empty {}

#[derive(Serialize, Deserialize)]
struct SensorListBody {
    sensors: Vec<SensorInfo>,
}

#[derive(Serialize, Deserialize)]
struct DeliverBody {
    subscription: String,
    element: StreamElement,
}

#[derive(Serialize, Deserialize)]
struct DeliverAckBody {
    subscription: String,
    seq: u64,
}

#[derive(Serialize, Deserialize)]
struct ErrorBody {
    code: String,
    message: String,
}

impl Message {
    pub fn frame_type(&self) -> FrameType {
        match self {
            Message::Hello { .. } => FrameType::Hello,
            Message::Register(_) => FrameType::Register,
            Message::RegisterAck { .. } => FrameType::RegisterAck,
            Message::ListSensors => FrameType::ListSensors,
            Message::SensorList { .. } => FrameType::SensorList,
            Message::Query(_) => FrameType::Query,
            Message::QueryResult(_) => FrameType::QueryResult,
            Message::Subscribe(_) => FrameType::Subscribe,
            Message::SubscribeAck(_) => FrameType::SubscribeAck,
            Message::Deliver { .. } => FrameType::Deliver,
            Message::DeliverAck { .. } => FrameType::DeliverAck,
            Message::Error { .. } => FrameType::Error,
            Message::Status(_) => FrameType::Status,
        }
    }

    pub fn error(code: impl Into<String>, message: impl Into<String>) -> Message {
        Message::Error {
            code: code.into(),
            message: message.into(),
        }
    }

    fn body_json(&self) -> String {
        fn j<T: Serialize>(v: &T) -> String {
            serde_json::to_string(v).expect("frame bodies serialize")
        }
        match self {
            Message::Hello { version } => j(&HelloBody {
                version: version.clone(),
            }),
            Message::Register(r) => j(r),
            Message::RegisterAck { node_id, sensors } => j(&RegisterAckBody {
                node_id: node_id.clone(),
                sensors: *sensors,
            }),
            Message::ListSensors => j(&Empty {}),
            Message::SensorList { sensors } => j(&SensorListBody {
                sensors: sensors.clone(),
            }),
            Message::Query(q) => j(q),
            Message::QueryResult(r) => j(r),
            Message::Subscribe(s) => j(s),
            Message::SubscribeAck(s) => j(s),
            Message::Deliver { subscription, element } => {
                // the element is spliced in verbatim so that its bytes match
                // the storage size estimate
                format!(
                    "{{\"subscription\":{},\"element\":{}}}",
                    j(subscription),
                    element.to_json()
                )
            }
            Message::DeliverAck { subscription, seq } => j(&DeliverAckBody {
                subscription: subscription.clone(),
                seq: *seq,
            }),
            Message::Error { code, message } => j(&ErrorBody {
                code: code.clone(),
                message: message.clone(),
            }),
            Message::Status(s) => j(s),
        }
    }

    fn from_body(ty: FrameType, body: &str) -> Result<Message, serde_json::Error> {
        fn p<T: DeserializeOwned>(s: &str) -> Result<T, serde_json::Error> {
            serde_json::from_str(s)
        }
        Ok(match ty {
            FrameType::Hello => Message::Hello {
                version: p::<HelloBody>(body)?.version,
            },
            FrameType::Register => Message::Register(p(body)?),
            FrameType::RegisterAck => {
                let b: RegisterAckBody = p(body)?;
                Message::RegisterAck {
                    node_id: b.node_id,
                    sensors: b.sensors,
                }
            }
            FrameType::ListSensors => {
                p::<Empty>(body)?;
                Message::ListSensors
            }
            FrameType::SensorList => Message::SensorList {
                sensors: p::<SensorListBody>(body)?.sensors,
            },
            FrameType::Query => Message::Query(p(body)?),
            FrameType::QueryResult => Message::QueryResult(p(body)?),
            FrameType::Subscribe => Message::Subscribe(p(body)?),
            FrameType::SubscribeAck => Message::SubscribeAck(p(body)?),
            FrameType::Deliver => {
                let b: DeliverBody = p(body)?;
                Message::Deliver {
                    subscription: b.subscription,
                    element: b.element,
                }
            }
            FrameType::DeliverAck => {
                let b: DeliverAckBody = p(body)?;
                Message::DeliverAck {
                    subscription: b.subscription,
                    seq: b.seq,
                }
            }
            FrameType::Error => {
                let b: ErrorBody = p(body)?;
                Message::Error {
                    code: b.code,
                    message: b.message,
                }
            }
            FrameType::Status => Message::Status(Box::new(p(body)?)),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    /// Correlation token; a response carries its request's id.
    pub id: String,
    /// Elements dropped before this one, when any were.
    pub gap: Option<u64>,
    pub message: Message,
}

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("malformed frame: {0}")]
    Malformed(String),
    #[error("unknown frame type {ty:?}")]
    UnknownType { ty: String, id: String },
    #[error("bad {ty} body: {reason}")]
    BadBody { ty: &'static str, id: String, reason: String },
}

impl DecodeError {
    pub fn code(&self) -> &'static str {
        match self {
            DecodeError::Malformed(_) | DecodeError::BadBody { .. } => "BAD_REQUEST",
            DecodeError::UnknownType { .. } => "UNKNOWN_TYPE",
        }
    }

    /// The correlation id, when the frame got far enough to have one.
    pub fn id(&self) -> &str {
        match self {
            DecodeError::Malformed(_) => "",
            DecodeError::UnknownType { id, .. } | DecodeError::BadBody { id, .. } => id,
        }
    }

    /// The error frame a server answers with.
    pub fn to_frame(&self) -> Frame {
        Frame::new(self.id(), Message::error(self.code(), self.to_string()))
    }
}

#[derive(Deserialize)]
struct RawFrame<'a> {
    #[serde(rename = "type")]
    ty: String,
    #[serde(default)]
    id: String,
    #[serde(default)]
    gap: Option<u64>,
    #[serde(borrow)]
    body: Option<&'a RawValue>,
}

impl Frame {
    pub fn new(id: impl Into<String>, message: Message) -> Frame {
        Frame {
            id: id.into(),
            gap: None,
            message,
        }
    }

    pub fn with_gap(mut self, gap: u64) -> Frame {
        self.gap = (gap > 0).then_some(gap);
        self
    }

    pub fn frame_type(&self) -> FrameType {
        self.message.frame_type()
    }

    pub fn error(id: impl Into<String>, code: &str, message: impl Into<String>) -> Frame {
        Frame::new(id, Message::error(code, message))
    }

    /// The error code if this is an error frame.
    pub fn error_code(&self) -> Option<&str> {
        match &self.message {
            Message::Error { code, .. } => Some(code),
            _ => None,
        }
    }

    /// Encodes without the trailing newline.
    pub fn encode(&self) -> String {
        let mut out = String::with_capacity(128);
        out.push_str("{\"type\":\"");
        out.push_str(self.frame_type().as_str());
        out.push_str("\",\"id\":");
        out.push_str(&serde_json::to_string(&self.id).expect("strings serialize"));
        if let Some(gap) = self.gap {
            out.push_str(",\"gap\":");
            out.push_str(&gap.to_string());
        }
        out.push_str(",\"body\":");
        out.push_str(&self.message.body_json());
        out.push('}');
        out
    }

    pub fn decode(line: &str) -> Result<Frame, DecodeError> {
        let raw: RawFrame<'_> =
            serde_json::from_str(line.trim_end()).map_err(|e| DecodeError::Malformed(e.to_string()))?;
        let ty = FrameType::parse(&raw.ty).ok_or_else(|| DecodeError::UnknownType {
            ty: raw.ty.clone(),
            id: raw.id.clone(),
        })?;
        let body = raw.body.map(RawValue::get).unwrap_or("{}");
        let message = Message::from_body(ty, body).map_err(|e| DecodeError::BadBody {
            ty: ty.as_str(),
            id: raw.id.clone(),
            reason: e.to_string(),
        })?;
        Ok(Frame {
            id: raw.id,
            gap: raw.gap.filter(|g| *g > 0),
            message,
        })
    }
}
