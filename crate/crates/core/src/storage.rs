//! Count-bounded sliding windows of stream elements.
//!
//! Each sensor owns one [`WindowStore`]. Inserting into a full window evicts
//! exactly the oldest element, so memory use is bounded by `history_size`
//! elements and the byte estimate stops growing once the window saturates.

use std::collections::VecDeque;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use thiserror::Error;

use crate::model::StreamElement;
use crate::wire::frame::{Frame, Message};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StorageError {
    #[error("element for sensor {got:?} inserted into window of {expected:?}")]
    SensorMismatch { expected: String, got: String },
    #[error("sequence gap: expected seq {expected}, got {got}")]
    SeqGap { expected: u64, got: u64 },
    #[error("range start {from} is after range end {to}")]
    RangeInverted { from: u64, to: u64 },
    #[error("window capacity must be at least 1")]
    CapacityZero,
}

impl StorageError {
    pub fn code(&self) -> &'static str {
        match self {
            StorageError::SensorMismatch { .. } => "SENSOR_MISMATCH",
            StorageError::SeqGap { .. } => "SEQ_GAP",
            StorageError::RangeInverted { .. } => "RANGE_INVERTED",
            StorageError::CapacityZero => "HISTORY_SIZE_NONPOSITIVE",
        }
    }
}

/// Elements still owed to a reader that last saw `seq - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Backlog {
    /// Elements evicted before they could be read.
    pub gap: u64,
    pub elements: Vec<StreamElement>,
}

#[derive(Debug, Clone)]
pub struct WindowStore {
    sensor: String,
    capacity: usize,
    elements: VecDeque<(StreamElement, usize)>,
    total_inserted: u64,
    bytes_estimate: u64,
}

impl WindowStore {
    pub fn new(sensor: impl Into<String>, capacity: usize) -> Result<Self, StorageError> {
        if capacity == 0 {
            return Err(StorageError::CapacityZero);
        }
        Ok(WindowStore {
            sensor: sensor.into(),
            capacity,
            elements: VecDeque::with_capacity(capacity.min(4096)),
            total_inserted: 0,
            bytes_estimate: 0,
        })
    }

    pub fn sensor(&self) -> &str {
        &self.sensor
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn total_inserted(&self) -> u64 {
        self.total_inserted
    }

    /// Sum of the wire sizes of the retained elements.
    pub fn bytes_estimate(&self) -> u64 {
        self.bytes_estimate
    }

    pub fn oldest_seq(&self) -> Option<u64> {
        self.elements.front().map(|(e, _)| e.seq)
    }

    pub fn latest_seq(&self) -> Option<u64> {
        self.elements.back().map(|(e, _)| e.seq)
    }

    pub fn latest(&self) -> Option<&StreamElement> {
        self.elements.back().map(|(e, _)| e)
    }

    pub fn iter(&self) -> impl DoubleEndedIterator<Item = &StreamElement> {
        self.elements.iter().map(|(e, _)| e)
    }

    /// Appends `e`, which must carry the next sequence number. Returns the
    /// evicted element when the window was full.
    pub fn insert(&mut self, e: StreamElement) -> Result<Option<StreamElement>, StorageError> {
        if e.sensor != self.sensor {
            return Err(StorageError::SensorMismatch {
                expected: self.sensor.clone(),
                got: e.sensor,
            });
        }
        if e.seq != self.total_inserted {
            return Err(StorageError::SeqGap {
                expected: self.total_inserted,
                got: e.seq,
            });
        }
        let size = e.wire_size();
        self.elements.push_back((e, size));
        self.bytes_estimate += size as u64;
        self.total_inserted += 1;
        Ok(if self.elements.len() > self.capacity {
            self.pop_oldest()
        } else {
            None
        })
    }

    fn pop_oldest(&mut self) -> Option<StreamElement> {
        let (old, size) = self.elements.pop_front()?;
        self.bytes_estimate -= size as u64;
        Some(old)
    }

    /// Changes the window size. Shrinking evicts the surplus immediately,
    /// oldest first, and returns it.
    pub fn set_capacity(&mut self, capacity: usize) -> Result<Vec<StreamElement>, StorageError> {
        if capacity == 0 {
            return Err(StorageError::CapacityZero);
        }
        self.capacity = capacity;
        let mut evicted = Vec::new();
        while self.elements.len() > capacity {
            evicted.extend(self.pop_oldest());
        }
        Ok(evicted)
    }

    /// Up to `n` newest elements, newest first.
    pub fn query_latest(&self, n: usize) -> Vec<StreamElement> {
        self.iter().rev().take(n).cloned().collect()
    }

    /// Retained elements with `from_ts <= timestamp <= to_ts`, oldest first.
    pub fn query_range(&self, from_ts: u64, to_ts: u64) -> Result<Vec<StreamElement>, StorageError> {
        if from_ts > to_ts {
            return Err(StorageError::RangeInverted { from: from_ts, to: to_ts });
        }
        // timestamps are non-decreasing, so the match is one contiguous run
        let start = self.elements.partition_point(|(e, _)| e.timestamp < from_ts);
        let end = self.elements.partition_point(|(e, _)| e.timestamp <= to_ts);
        Ok(self.elements.range(start..end.max(start)).map(|(e, _)| e.clone()).collect())
    }

    /// Elements with seq >= `from_seq`, at most `limit` of them, plus the
    /// number of wanted elements that were already evicted.
    pub fn read_from(&self, from_seq: u64, limit: usize) -> Backlog {
        let Some(oldest) = self.oldest_seq() else {
            return Backlog {
                gap: self.total_inserted.saturating_sub(from_seq),
                elements: Vec::new(),
            };
        };
        let gap = oldest.saturating_sub(from_seq);
        let skip = from_seq.saturating_sub(oldest) as usize;
        Backlog {
            gap,
            elements: self.iter().skip(skip).take(limit).cloned().collect(),
        }
    }
}

/// Total byte estimate across a set of windows.
pub fn total_bytes<'a>(stores: impl IntoIterator<Item = &'a WindowStore>) -> u64 {
    stores.into_iter().map(WindowStore::bytes_estimate).sum()
}

/// One storage snapshot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StoragePoint {
    pub t_ms: u64,
    pub bytes: u64,
}

/// Records periodic snapshots of total storage.
#[derive(Debug, Clone)]
pub struct StorageSeries {
    interval_ms: u64,
    next_due: Option<u64>,
    points: Vec<StoragePoint>,
}

impl StorageSeries {
    pub fn new(interval_ms: u64) -> Self {
        StorageSeries {
            interval_ms: interval_ms.max(1),
            next_due: None,
            points: Vec::new(),
        }
    }

    /// Offers the current total at `now_ms`; it is recorded if a snapshot is
    /// due. Returns whether it was recorded.
    pub fn observe(&mut self, now_ms: u64, bytes: u64) -> bool {
        let due = *self.next_due.get_or_insert(now_ms);
        if now_ms < due {
            return false;
        }
        self.points.push(StoragePoint { t_ms: now_ms, bytes });
        let mut next = due + self.interval_ms;
        while next <= now_ms {
            next += self.interval_ms;
        }
        self.next_due = Some(next);
        true
    }

    pub fn points(&self) -> &[StoragePoint] {
        &self.points
    }

    pub fn into_points(self) -> Vec<StoragePoint> {
        self.points
    }
}

/// Optional append-only log of every stored element, one `deliver` frame per
/// line.
pub struct SpillLog {
    out: BufWriter<File>,
}

impl SpillLog {
    pub fn open(dir: &Path, sensor: &str) -> std::io::Result<Self> {
        std::fs::create_dir_all(dir)?;
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(dir.join(format!("{sensor}.spill")))?;
        Ok(SpillLog {
            out: BufWriter::new(file),
        })
    }

    pub fn append(&mut self, e: &StreamElement) -> std::io::Result<()> {
        let frame = Frame::new(
            e.seq.to_string(),
            Message::Deliver {
                subscription: String::new(),
                element: e.clone(),
            },
        );
        self.out.write_all(frame.encode().as_bytes())?;
        self.out.write_all(b"\n")?;
        self.out.flush()
    }
}
