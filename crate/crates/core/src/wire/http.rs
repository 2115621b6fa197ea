//! The HTTP/1.1 subset the peers speak: `Content-Length` framed requests and
//! responses with keep-alive, plus close-delimited streaming responses whose
//! body is a sequence of newline-terminated frames.

use std::collections::BTreeMap;
use std::io;
use std::pin::Pin;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::task::{Context, Poll};

use tokio::io::{AsyncBufRead, AsyncBufReadExt, AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt, ReadBuf};

use super::frame::Frame;
use super::WireError;

const MAX_HEAD: usize = 16 * 1024;
const MAX_BODY: usize = 64 * 1024 * 1024;
const MAX_HEADERS: usize = 32;

/// Byte counters shared by every connection of a node.
#[derive(Debug, Default)]
pub struct Meter {
    pub bytes_in: AtomicU64,
    pub bytes_out: AtomicU64,
}

impl Meter {
    pub fn total(&self) -> u64 {
        self.bytes_in.load(Ordering::Relaxed) + self.bytes_out.load(Ordering::Relaxed)
    }
}

/// A stream wrapper that counts bytes in both directions into one or two
/// meters (typically the connection's own and the node-wide one).
pub struct Metered<S> {
    inner: S,
    meters: Vec<Arc<Meter>>,
}

impl<S> Metered<S> {
    pub fn new(inner: S, meters: Vec<Arc<Meter>>) -> Self {
        Metered { inner, meters }
    }
}

impl<S: AsyncRead + Unpin> AsyncRead for Metered<S> {
    fn poll_read(mut self: Pin<&mut Self>, cx: &mut Context<'_>, buf: &mut ReadBuf<'_>) -> Poll<io::Result<()>> {
        let before = buf.filled().len();
        let res = Pin::new(&mut self.inner).poll_read(cx, buf);
        let n = (buf.filled().len() - before) as u64;
        for m in &self.meters {
            m.bytes_in.fetch_add(n, Ordering::Relaxed);
        }
        res
    }
}

impl<S: AsyncWrite + Unpin> AsyncWrite for Metered<S> {
    fn poll_write(mut self: Pin<&mut Self>, cx: &mut Context<'_>, buf: &[u8]) -> Poll<io::Result<usize>> {
        let res = Pin::new(&mut self.inner).poll_write(cx, buf);
        if let Poll::Ready(Ok(n)) = &res {
            for m in &self.meters {
                m.bytes_out.fetch_add(*n as u64, Ordering::Relaxed);
            }
        }
        res
    }

    fn poll_flush(mut self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<io::Result<()>> {
        Pin::new(&mut self.inner).poll_flush(cx)
    }

    fn poll_shutdown(mut self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<io::Result<()>> {
        Pin::new(&mut self.inner).poll_shutdown(cx)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Get,
    Post,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Get => "GET",
            Method::Post => "POST",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Request {
    pub method: Method,
    pub path: String,
    pub query: BTreeMap<String, String>,
    pub body: Vec<u8>,
}

async fn read_head<R: AsyncBufRead + Unpin>(r: &mut R) -> Result<Option<Vec<u8>>, WireError> {
    let mut head = Vec::with_capacity(256);
    loop {
        let before = head.len();
        let n = r.read_until(b'\n', &mut head).await?;
        if n == 0 {
            return if head.is_empty() {
                Ok(None)
            } else {
                Err(WireError::Http("connection closed inside header".into()))
            };
        }
        if head.len() > MAX_HEAD {
            return Err(WireError::Http("header too large".into()));
        }
        let line = &head[before..];
        if line == b"\r\n" || line == b"\n" {
            if before == 0 {
                // tolerate stray blank lines between requests
                head.clear();
                continue;
            }
            return Ok(Some(head));
        }
    }
}

fn content_length(headers: &[httparse::Header<'_>]) -> Result<usize, WireError> {
    for h in headers {
        if h.name.eq_ignore_ascii_case("content-length") {
            let n = std::str::from_utf8(h.value)
                .ok()
                .and_then(|v| v.trim().parse::<usize>().ok())
                .ok_or_else(|| WireError::Http("bad content-length".into()))?;
            if n > MAX_BODY {
                return Err(WireError::Http("body too large".into()));
            }
            return Ok(n);
        }
    }
    Ok(0)
}

fn split_target(target: &str) -> (String, BTreeMap<String, String>) {
    let (path, query) = target.split_once('?').unwrap_or((target, ""));
    let params = query
        .split('&')
        .filter(|kv| !kv.is_empty())
        .map(|kv| {
            let (k, v) = kv.split_once('=').unwrap_or((kv, ""));
            (k.to_string(), v.to_string())
        })
        .collect();
    (path.to_string(), params)
}

/// Reads one request. `Ok(None)` means the peer closed the connection
/// cleanly between requests.
pub async fn read_request<R: AsyncBufRead + Unpin>(r: &mut R) -> Result<Option<Request>, WireError> {
    let Some(head) = read_head(r).await? else {
        return Ok(None);
    };
    let mut headers = [httparse::EMPTY_HEADER; MAX_HEADERS];
    let mut req = httparse::Request::new(&mut headers);
    match req.parse(&head) {
        Ok(httparse::Status::Complete(_)) => {}
        _ => return Err(WireError::Http("malformed request head".into())),
    }
    let method = match req.method {
        Some("GET") => Method::Get,
        Some("POST") => Method::Post,
        other => return Err(WireError::Http(format!("unsupported method {other:?}"))),
    };
    let (path, query) = split_target(req.path.unwrap_or("/"));
    let len = content_length(req.headers)?;
    let mut body = vec![0; len];
    r.read_exact(&mut body).await?;
    Ok(Some(Request {
        method,
        path,
        query,
        body,
    }))
}

pub async fn write_request<W: AsyncWrite + Unpin>(
    w: &mut W,
    method: Method,
    target: &str,
    body: Option<&Frame>,
) -> Result<(), WireError> {
    let payload = body.map(|f| {
        let mut s = f.encode();
        s.push('\n');
        s
    });
    let mut out = format!("{} {} HTTP/1.1\r\nHost: peer\r\n", method.as_str(), target);
    if let Some(p) = &payload {
        out.push_str("Content-Type: application/x-ndjson\r\n");
        out.push_str(&format!("Content-Length: {}\r\n", p.len()));
    }
    out.push_str("\r\n");
    if let Some(p) = payload {
        out.push_str(&p);
    }
    w.write_all(out.as_bytes()).await?;
    w.flush().await?;
    Ok(())
}

fn reason(status: u16) -> &'static str {
    match status {
        200 => "OK",
        400 => "Bad Request",
        404 => "Not Found",
        409 => "Conflict",
        503 => "Service Unavailable",
        504 => "Gateway Timeout",
        _ => "Error",
    }
}

/// Writes a complete single-frame response and flushes.
pub async fn write_response<W: AsyncWrite + Unpin>(w: &mut W, status: u16, frame: &Frame) -> Result<(), WireError> {
    let mut body = frame.encode();
    body.push('\n');
    let out = format!(
        "HTTP/1.1 {status} {}\r\nContent-Type: application/x-ndjson\r\nContent-Length: {}\r\n\r\n{body}",
        reason(status),
        body.len()
    );
    w.write_all(out.as_bytes()).await?;
    w.flush().await?;
    Ok(())
}

/// Starts a close-delimited streaming response.
pub async fn write_stream_head<W: AsyncWrite + Unpin>(w: &mut W) -> Result<(), WireError> {
    w.write_all(b"HTTP/1.1 200 OK\r\nContent-Type: application/x-ndjson\r\nConnection: close\r\n\r\n")
        .await?;
    w.flush().await?;
    Ok(())
}

/// Writes one frame line of a streaming response and flushes.
pub async fn write_frame_line<W: AsyncWrite + Unpin>(w: &mut W, frame: &Frame) -> Result<(), WireError> {
    let mut line = frame.encode();
    line.push('\n');
    w.write_all(line.as_bytes()).await?;
    w.flush().await?;
    Ok(())
}

#[derive(Debug)]
pub struct ResponseHead {
    pub status: u16,
    /// `None` for close-delimited (streaming) bodies.
    pub content_length: Option<usize>,
}

pub async fn read_response_head<R: AsyncBufRead + Unpin>(r: &mut R) -> Result<ResponseHead, WireError> {
    let head = read_head(r)
        .await?
        .ok_or_else(|| WireError::Http("connection closed before response".into()))?;
    let mut headers = [httparse::EMPTY_HEADER; MAX_HEADERS];
    let mut resp = httparse::Response::new(&mut headers);
    match resp.parse(&head) {
        Ok(httparse::Status::Complete(_)) => {}
        _ => return Err(WireError::Http("malformed response head".into())),
    }
    let status = resp.code.unwrap_or(0);
    let has_length = resp
        .headers
        .iter()
        .any(|h| h.name.eq_ignore_ascii_case("content-length"));
    let content_length = if has_length {
        Some(content_length(resp.headers)?)
    } else {
        None
    };
    Ok(ResponseHead { status, content_length })
}

/// Reads a complete single-frame response.
pub async fn read_response<R: AsyncBufRead + Unpin>(r: &mut R) -> Result<(u16, Frame), WireError> {
    let head = read_response_head(r).await?;
    let len = head
        .content_length
        .ok_or_else(|| WireError::Http("expected a content-length response".into()))?;
    let mut body = vec![0; len];
    r.read_exact(&mut body).await?;
    let text = String::from_utf8(body).map_err(|_| WireError::Http("response is not UTF-8".into()))?;
    Ok((head.status, Frame::decode(&text)?))
}

/// Reads the next frame line of a streaming body; `Ok(None)` at end of stream.
pub async fn read_frame_line<R: AsyncBufRead + Unpin>(r: &mut R) -> Result<Option<Frame>, WireError> {
    let mut line = String::new();
    loop {
        line.clear();
        if r.read_line(&mut line).await? == 0 {
            return Ok(None);
        }
        if !line.trim().is_empty() {
            return Ok(Some(Frame::decode(&line)?));
        }
    }
}
