//! Per-sensor sampling loop: acquire, process, validate, store.

use std::collections::BTreeMap;
use std::sync::atomic::Ordering;
use std::sync::Arc;
use std::time::Duration;

use crate::model::{validate_element, StreamElement, Value};
use crate::processing::{Chain, Outcome};
use crate::sources::SourceInstance;
use crate::storage::SpillLog;

use super::{NodeShared, SensorSlot};

pub(crate) struct SensorRuntime {
    pub source: SourceInstance,
    pub chain: Chain,
    /// Sensors whose latest values the chain reads.
    pub deps: Vec<String>,
}

/// Ticks are scheduled at `start_ms + k * interval` and that scheduled time
/// becomes the element timestamp, so a sensor's values depend only on its
/// seeds and tick count, never on how late a tick actually ran.
pub(crate) async fn run(
    shared: Arc<NodeShared>,
    slot: Arc<SensorSlot>,
    mut rt: SensorRuntime,
    start_ms: u64,
    mut spill: Option<SpillLog>,
) {
    let (name, interval_ms, schema) = {
        let c = slot.config.read();
        (c.name.clone(), c.sampling_interval, c.output_schema.clone())
    };
    let mut ticker = tokio::time::interval(Duration::from_millis(interval_ms));
    let mut tick: u64 = 0;
    loop {
        ticker.tick().await;
        let ts = start_ms + tick * interval_ms;
        tick += 1;

        let raw = match rt.source.sample(ts) {
            Ok(v) => v,
            Err(_) => {
                slot.counters.unavailable.fetch_add(1, Ordering::Relaxed);
                continue;
            }
        };
        let lookup: BTreeMap<String, Vec<Value>> = rt
            .deps
            .iter()
            .filter_map(|d| {
                let other = shared.sensors.get(d)?;
                let values = other.store.read().latest()?.values.clone();
                Some((d.clone(), values))
            })
            .collect();
        let values = match rt.chain.apply(raw, &lookup) {
            Ok(Outcome::Values(v)) => v,
            Ok(Outcome::Filtered) => {
                slot.counters.filtered.fetch_add(1, Ordering::Relaxed);
                continue;
            }
            Err(e) => {
                tracing::debug!(sensor = %name, "processing failed: {e}");
                slot.counters.errors.fetch_add(1, Ordering::Relaxed);
                continue;
            }
        };
        let inserted = {
            let mut store = slot.store.write();
            let element = StreamElement {
                sensor: name.clone(),
                seq: store.total_inserted(),
                timestamp: ts,
                values,
            };
            if !validate_element(&element, &schema).is_ok() {
                slot.counters.errors.fetch_add(1, Ordering::Relaxed);
                continue;
            }
            let copy = spill.as_ref().map(|_| element.clone());
            match store.insert(element) {
                Ok(_) => Ok((store.total_inserted(), copy)),
                Err(e) => Err(e),
            }
        };
        match inserted {
            Ok((total, copy)) => {
                shared.work.elements_processed.fetch_add(1, Ordering::Relaxed);
                if let (Some(log), Some(e)) = (spill.as_mut(), copy) {
                    if let Err(err) = log.append(&e) {
                        tracing::warn!(sensor = %name, "spill log write failed: {err}");
                        spill = None;
                    }
                }
                slot.seq_tx.send_replace(total);
            }
            Err(e) => {
                // only this sensor stops
                tracing::error!(sensor = %name, "sensor stopped: {e}");
                slot.counters.failed.store(true, Ordering::Relaxed);
                return;
            }
        }
    }
}
