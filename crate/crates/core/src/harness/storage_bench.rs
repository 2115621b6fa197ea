//! Storage growth on a simulated clock: one sensor sampled at a fixed
//! interval into a window, with the byte estimate recorded after every
//! insert. Runs in milliseconds regardless of the simulated duration.

use crate::model::{ParamValue, SourceSpec, StreamElement};
use crate::sources::{PluginRegistry, SourceContext};
use crate::storage::{StoragePoint, WindowStore};

/// Element timestamps start here so they have the width a node's wall
/// clock gives them. `StoragePoint::t_ms` stays relative to the start.
pub const EPOCH_MS: u64 = 1_700_000_000_000;

/// Seeded random walk: element sizes vary with the printed width of the
/// value.
pub fn random_walk(seed: i64) -> SourceSpec {
    SourceSpec {
        plugin: "random_walk".into(),
        params: [("seed".to_string(), ParamValue::Int(seed))].into_iter().collect(),
    }
}

/// Constant value: every element has the same payload.
pub fn fixed_width() -> SourceSpec {
    SourceSpec {
        plugin: "constant".into(),
        params: [("value".to_string(), ParamValue::Float(0.5))].into_iter().collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StorageBench {
    pub history_size: usize,
    pub interval_ms: u64,
    pub points: Vec<StoragePoint>,
    /// Simulated time of the first insert that evicted.
    pub saturated_at_ms: Option<u64>,
    pub max_element_bytes: u64,
    /// Window length after every insert never exceeded the capacity.
    pub within_capacity: bool,
}

/// Panics if `source` is not a built-in plugin with valid params or the
/// source fails to sample.
pub fn simulate(history_size: usize, duration_s: u64, interval_ms: u64, source: &SourceSpec) -> StorageBench {
    let mut source = PluginRegistry::builtin()
        .instantiate_by_name(&source.plugin, &source.params, &SourceContext::new("."))
        .expect("built-in source");
    let mut store = WindowStore::new("bench", history_size).expect("history_size is positive");
    let mut bench = StorageBench {
        history_size,
        interval_ms,
        points: Vec::new(),
        saturated_at_ms: None,
        max_element_bytes: 0,
        within_capacity: true,
    };
    let steps = duration_s * 1000 / interval_ms;
    for k in 0..steps {
        let t = k * interval_ms;
        let values = source.sample(EPOCH_MS + t).expect("source yields");
        let e = StreamElement {
            sensor: "bench".into(),
            seq: store.total_inserted(),
            timestamp: EPOCH_MS + t,
            values,
        };
        bench.max_element_bytes = bench.max_element_bytes.max(e.wire_size() as u64);
        let evicted = store.insert(e).expect("element fits its own window");
        if evicted.is_some() && bench.saturated_at_ms.is_none() {
            bench.saturated_at_ms = Some(t);
        }
        bench.within_capacity &= store.len() <= history_size;
        bench.points.push(StoragePoint {
            t_ms: t,
            bytes: store.bytes_estimate(),
        });
    }
    bench
}

impl StorageBench {
    pub fn pre_saturation(&self) -> &[StoragePoint] {
        match self.saturated_at_ms {
            Some(t) => &self.points[..self.points.partition_point(|p| p.t_ms < t)],
            None => &self.points,
        }
    }

    pub fn post_saturation(&self) -> &[StoragePoint] {
        match self.saturated_at_ms {
            Some(t) => &self.points[self.points.partition_point(|p| p.t_ms < t)..],
            None => &[],
        }
    }

    /// Largest distance from the least-squares line, relative to the
    /// largest value in the pre-saturation series.
    pub fn linear_fit_residual(&self) -> Option<f64> {
        linear_fit_residual(self.pre_saturation())
    }

    /// `max - min` of bytes once the window is full.
    pub fn post_saturation_range(&self) -> Option<u64> {
        let post = self.post_saturation();
        let max = post.iter().map(|p| p.bytes).max()?;
        let min = post.iter().map(|p| p.bytes).min()?;
        Some(max - min)
    }
}

pub fn linear_fit_residual(points: &[StoragePoint]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.t_ms as f64).sum::<f64>() / n;
    let my = points.iter().map(|p| p.bytes as f64).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.t_ms as f64 - mx) * (p.bytes as f64 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.t_ms as f64 - mx).powi(2)).sum();
    let slope = sxy / sxx;
    let worst = points
        .iter()
        .map(|p| (p.bytes as f64 - (my + slope * (p.t_ms as f64 - mx))).abs())
        .fold(0.0, f64::max);
    let top = points.iter().map(|p| p.bytes).max()? as f64;
    Some(worst / top)
}
