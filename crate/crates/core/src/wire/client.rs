//! Outgoing connections.

use std::io::ErrorKind;
use std::sync::Arc;
use std::time::Duration;

use tokio::io::BufReader;
use tokio::net::TcpStream;

use super::frame::Frame;
use super::http::{self, Meter, Method, Metered};
use super::WireError;

type Io = BufReader<Metered<TcpStream>>;

/// A keep-alive connection to a peer.
pub struct Connection {
    io: Io,
    meter: Arc<Meter>,
    timeout: Duration,
}

impl Connection {
    /// Opens a connection. `meters` additionally count its bytes.
    pub async fn connect(addr: &str, timeout: Duration, mut meters: Vec<Arc<Meter>>) -> Result<Connection, WireError> {
        let stream = match tokio::time::timeout(timeout, TcpStream::connect(addr)).await {
            Err(_) => return Err(WireError::Timeout),
            Ok(Err(e))
                if matches!(
                    e.kind(),
                    ErrorKind::ConnectionRefused | ErrorKind::ConnectionReset | ErrorKind::AddrNotAvailable
                ) =>
            {
                return Err(WireError::Unreachable(format!("{addr}: {e}")))
            }
            Ok(Err(e)) => return Err(WireError::Io(e)),
            Ok(Ok(s)) => s,
        };
        let _ = stream.set_nodelay(true);
        let meter = Arc::new(Meter::default());
        meters.push(meter.clone());
        Ok(Connection {
            io: BufReader::new(Metered::new(stream, meters)),
            meter,
            timeout,
        })
    }

    /// Bytes moved on this connection.
    pub fn meter(&self) -> &Arc<Meter> {
        &self.meter
    }

    /// Sends a request and waits for its single-frame response.
    pub async fn call(&mut self, method: Method, target: &str, body: Option<&Frame>) -> Result<(u16, Frame), WireError> {
        let timeout = self.timeout;
        let exchange = async {
            http::write_request(&mut self.io, method, target, body).await?;
            http::read_response(&mut self.io).await
        };
        tokio::time::timeout(timeout, exchange)
            .await
            .map_err(|_| WireError::Timeout)?
    }

    /// Like [`call`](Self::call), but an error frame becomes `Err(Rejected)`.
    pub async fn call_ok(&mut self, method: Method, target: &str, body: Option<&Frame>) -> Result<Frame, WireError> {
        let (status, frame) = self.call(method, target, body).await?;
        if frame.error_code().is_some() {
            return Err(WireError::Rejected { status, frame: Box::new(frame) });
        }
        Ok(frame)
    }

    /// Opens a persistent stream on this connection.
    pub async fn into_stream(mut self, target: &str) -> Result<FrameStream, WireError> {
        let timeout = self.timeout;
        let open = async {
            http::write_request(&mut self.io, Method::Get, target, None).await?;
            http::read_response_head(&mut self.io).await
        };
        let head = tokio::time::timeout(timeout, open)
            .await
            .map_err(|_| WireError::Timeout)??;
        if head.status != 200 {
            let frame = match head.content_length {
                Some(_) => http::read_frame_line(&mut self.io).await?,
                None => None,
            };
            let frame = frame.unwrap_or_else(|| Frame::error("", "BAD_REQUEST", "stream refused"));
            return Err(WireError::Rejected {
                status: head.status,
                frame: Box::new(frame),
            });
        }
        Ok(FrameStream {
            io: self.io,
            meter: self.meter,
        })
    }
}

/// Frames arriving on a persistent stream.
pub struct FrameStream {
    io: Io,
    meter: Arc<Meter>,
}

impl FrameStream {
    /// Next frame, or `None` when the server closed the stream.
    pub async fn next(&mut self) -> Result<Option<Frame>, WireError> {
        http::read_frame_line(&mut self.io).await
    }

    pub fn meter(&self) -> &Arc<Meter> {
        &self.meter
    }
}

/// Opens a connection, performs one exchange and closes it.
pub async fn request_once(
    addr: &str,
    method: Method,
    target: &str,
    body: Option<&Frame>,
    timeout: Duration,
) -> Result<(u16, Frame), WireError> {
    let mut conn = Connection::connect(addr, timeout, Vec::new()).await?;
    conn.call(method, target, body).await
}
