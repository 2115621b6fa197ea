//! The bounded FIFO query queue.
//!
//! Jobs are answered strictly in arrival order by a single drain task. A full
//! queue rejects the newest job instead of dropping anything silently.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use tokio::sync::{mpsc, oneshot};

use crate::wire::frame::QueryRequest;
use crate::wire::Frame;

#[derive(Debug)]
pub struct QueryJob {
    pub id: String,
    pub request: QueryRequest,
    /// Epoch milliseconds.
    pub enqueued_at: u64,
    pub requester: String,
}

struct Queued {
    job: QueryJob,
    reply: oneshot::Sender<Frame>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("query queue is full ({bound} jobs)")]
pub struct QueueFull {
    pub bound: usize,
}

/// Producer side; cheap to clone.
#[derive(Clone)]
pub struct QueryQueue {
    tx: mpsc::Sender<Queued>,
    depth: Arc<AtomicU64>,
    bound: usize,
}

/// Consumer side, owned by the drain task.
pub struct QueryDrain {
    rx: mpsc::Receiver<Queued>,
    depth: Arc<AtomicU64>,
}

impl QueryQueue {
    pub fn new(bound: usize) -> (QueryQueue, QueryDrain) {
        let (tx, rx) = mpsc::channel(bound.max(1));
        let depth = Arc::new(AtomicU64::new(0));
        (
            QueryQueue {
                tx,
                depth: depth.clone(),
                bound,
            },
            QueryDrain { rx, depth },
        )
    }

    /// Appends a job; the receiver resolves with its response frame.
    pub fn try_enqueue(&self, job: QueryJob) -> Result<oneshot::Receiver<Frame>, QueueFull> {
        let (reply, rx) = oneshot::channel();
        self.depth.fetch_add(1, Ordering::Relaxed);
        match self.tx.try_send(Queued { job, reply }) {
            Ok(()) => Ok(rx),
            Err(_) => {
                self.depth.fetch_sub(1, Ordering::Relaxed);
                Err(QueueFull { bound: self.bound })
            }
        }
    }

    /// Jobs waiting or in progress.
    pub fn depth(&self) -> u64 {
        self.depth.load(Ordering::Relaxed)
    }
}

impl QueryDrain {
    /// Answers jobs one at a time, in order, until every producer is gone.
    pub async fn run<F>(mut self, mut answer: F)
    where
        F: AsyncFnMut(QueryJob) -> Frame,
    {
        while let Some(q) = self.rx.recv().await {
            let frame = answer(q.job).await;
            self.depth.fetch_sub(1, Ordering::Relaxed);
            let _ = q.reply.send(frame);
        }
    }
}
