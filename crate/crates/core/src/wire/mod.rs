//! The API layer: frame codec, config file formats, and the HTTP transport
//! that carries request/response exchanges, persistent streams and push
//! deliveries between peers.
//!
//! Endpoints served by every node:
//!
//! | method | path                                   | request frame | response frame |
//! |--------|----------------------------------------|---------------|----------------|
//! | POST   | `/hello`                               | hello         | hello          |
//! | POST   | `/register`                            | register      | register_ack   |
//! | GET    | `/sensors`                             | (list_sensors)| sensor_list    |
//! | GET    | `/sensor/{name}/latest?n=`             | (query)       | query_result   |
//! | GET    | `/sensor/{name}/range?from=&to=`       | (query)       | query_result   |
//! | POST   | `/subscribe`                           | subscribe     | subscribe_ack  |
//! | POST   | `/deliver`                             | deliver       | deliver_ack    |
//! | GET    | `/status`                              | (status)      | status         |
//! | POST   | `/frame`                               | any request   | its response   |
//! | GET    | `/sensor/{name}/stream?subscription=&resume=` | none | stream of deliver/status frames |

pub mod client;
pub mod frame;
pub mod http;
pub mod server;
pub mod text;

use thiserror::Error;

pub use client::{request_once, Connection, FrameStream};
pub use frame::{DecodeError, Frame, FrameType, Message, PROTOCOL_VERSION};
pub use server::{serve, ConnInfo, FrameSink, Handler, Server, StreamOut, StreamRequest};

/// Default listen port of a node.
pub const DEFAULT_PORT: u16 = 9100;

/// Environment variable that overrides a node's listen address.
pub const LISTEN_ENV: &str = "VSENSE_LISTEN";

#[derive(Debug, Error)]
pub enum WireError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("peer unreachable: {0}")]
    Unreachable(String),
    #[error("timed out")]
    Timeout,
    #[error("protocol error: {0}")]
    Http(String),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error("address {0} already in use")]
    AddressInUse(String),
    #[error("peer answered {status} with {frame:?}")]
    Rejected { status: u16, frame: Box<Frame> },
}

impl WireError {
    pub fn code(&self) -> &str {
        match self {
            WireError::Io(_) | WireError::Unreachable(_) => "PEER_UNREACHABLE",
            WireError::Timeout => "TIMEOUT",
            WireError::Http(_) => "BAD_REQUEST",
            WireError::Decode(e) => e.code(),
            WireError::AddressInUse(_) => "ADDRESS_IN_USE",
            WireError::Rejected { frame, .. } => frame.error_code().unwrap_or("REJECTED"),
        }
    }
}
