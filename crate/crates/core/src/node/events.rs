//! The aggregator's event log.
//!
//! One CSV row per event with the columns
//! `event,stream,node,sensor,request_id,seq,t_sent_us,t_received_us,gap`.
//! Event kinds:
//!
//! - `stream`: declares a request stream, written once before `start`.
//! - `start`, `end`: experiment boundaries, time in `t_sent_us`.
//! - `complete`: one finished round trip.
//! - `fail`: a request that got no data back.
//!
//! Times are microseconds since the Unix epoch on the aggregator's clock.

use std::fs::{File, OpenOptions};
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Stream,
    Start,
    End,
    Complete,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EventRecord {
    pub event: Option<EventKind>,
    pub stream: String,
    pub node: String,
    pub sensor: String,
    pub request_id: String,
    pub seq: Option<u64>,
    pub t_sent_us: u64,
    pub t_received_us: u64,
    pub gap: u64,
}

impl EventRecord {
    pub fn kind(&self) -> Option<EventKind> {
        self.event
    }

    pub fn boundary(kind: EventKind, t_us: u64) -> Self {
        EventRecord {
            event: Some(kind),
            t_sent_us: t_us,
            t_received_us: t_us,
            ..Default::default()
        }
    }

    pub fn stream(stream: &str, node: &str, sensor: &str) -> Self {
        EventRecord {
            event: Some(EventKind::Stream),
            stream: stream.into(),
            node: node.into(),
            sensor: sensor.into(),
            ..Default::default()
        }
    }
}

/// Appends records and flushes after each one, so a killed process loses
/// at most the row being written.
pub struct EventLog {
    out: csv::Writer<BufWriter<File>>,
}

impl EventLog {
    /// Opens `path` for appending; a header goes in only when it is empty.
    pub fn open(path: &Path) -> std::io::Result<Self> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let fresh = file.metadata()?.len() == 0;
        let out = csv::WriterBuilder::new()
            .has_headers(fresh)
            .from_writer(BufWriter::new(file));
        Ok(EventLog { out })
    }

    pub fn append(&mut self, r: &EventRecord) -> std::io::Result<()> {
        self.out.serialize(r).map_err(std::io::Error::other)?;
        self.out.flush()
    }
}

/// Reads a whole log.
pub fn read_log(path: &Path) -> Result<Vec<EventRecord>, csv::Error> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().collect()
}
