//! Per-sensor processing chains.
//!
//! A chain runs its processors in declared order, each consuming the previous
//! output. Any processor may filter the element out, which ends the chain for
//! that tick; the element is then dropped without consuming a sequence number.

use std::collections::{BTreeMap, VecDeque};

use thiserror::Error;

use crate::model::{ParamMap, ParamValue, ProcessorSpec, Value};

/// Silence guard applied by `rms_db` when no floor is configured.
pub const DEFAULT_FLOOR_DB: f64 = -120.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProcessError {
    #[error("processor {0:?} is not registered")]
    Unknown(String),
    #[error("processor {processor}: parameter {name:?} {reason}")]
    BadParam {
        processor: &'static str,
        name: &'static str,
        reason: &'static str,
    },
    #[error("processor {processor} cannot take {arity} input values")]
    Arity { processor: &'static str, arity: usize },
    #[error("processor {0} needs numeric input")]
    NonNumeric(&'static str),
    #[error("empty audio frame")]
    EmptyFrame,
}

impl ProcessError {
    pub fn code(&self) -> &'static str {
        match self {
            ProcessError::Unknown(_) => "PROCESSOR_UNKNOWN",
            ProcessError::BadParam { .. } => "PROCESSOR_PARAM_INVALID",
            ProcessError::Arity { .. } => "PROCESSOR_ARITY",
            ProcessError::NonNumeric(_) => "NON_NUMERIC_INPUT",
            ProcessError::EmptyFrame => "EMPTY_FRAME",
        }
    }
}

/// What a processor (or a whole chain) produced for one input.
#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Values(Vec<Value>),
    Filtered,
}

impl Outcome {
    pub fn values(self) -> Option<Vec<Value>> {
        match self {
            Outcome::Values(v) => Some(v),
            Outcome::Filtered => None,
        }
    }
}

/// Read access to the newest values of other sensors on the same node.
pub trait SensorLookup {
    fn latest_values(&self, sensor: &str) -> Option<Vec<Value>>;
}

/// Lookup that knows no sensors.
pub struct NoSensors;

impl SensorLookup for NoSensors {
    fn latest_values(&self, _sensor: &str) -> Option<Vec<Value>> {
        None
    }
}

impl SensorLookup for BTreeMap<String, Vec<Value>> {
    fn latest_values(&self, sensor: &str) -> Option<Vec<Value>> {
        self.get(sensor).cloned()
    }
}

pub trait Processor: Send {
    /// Output arity for a given input arity, or an error if unsupported.
    fn output_arity(&self, input: usize) -> Result<usize, ProcessError>;

    fn process(&mut self, input: Vec<Value>, lookup: &dyn SensorLookup) -> Result<Outcome, ProcessError>;

    /// Names of other sensors this processor reads.
    fn dependencies(&self) -> Vec<String> {
        Vec::new()
    }
}

pub type ProcessorFactory = fn(&ParamMap) -> Result<Box<dyn Processor>, ProcessError>;

#[derive(Clone)]
pub struct ProcessorRegistry {
    factories: BTreeMap<String, ProcessorFactory>,
}

impl Default for ProcessorRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

impl ProcessorRegistry {
    pub fn builtin() -> Self {
        let mut r = ProcessorRegistry {
            factories: BTreeMap::new(),
        };
        r.register("passthrough", Passthrough::create);
        r.register("moving_average", MovingAverage::create);
        r.register("rms_db", RmsDb::create);
        r.register("filter_range", FilterRange::create);
        r.register("fuse_mean", FuseMean::create);
        r
    }

    /// Registers (or replaces) a processor implementation, e.g. an FFT or
    /// stream-mining stage.
    pub fn register(&mut self, name: &str, factory: ProcessorFactory) {
        self.factories.insert(name.to_string(), factory);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }

    pub fn create(&self, spec: &ProcessorSpec) -> Result<Box<dyn Processor>, ProcessError> {
        let factory = self
            .factories
            .get(&spec.name)
            .ok_or_else(|| ProcessError::Unknown(spec.name.clone()))?;
        factory(&spec.params)
    }
}

/// An instantiated processing chain together with its per-stage state.
#[derive(Default)]
pub struct Chain {
    stages: Vec<(String, Box<dyn Processor>)>,
}

impl std::fmt::Debug for Chain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list().entries(self.stages.iter().map(|(n, _)| n)).finish()
    }
}

impl Chain {
    pub fn build(specs: &[ProcessorSpec], registry: &ProcessorRegistry) -> Result<Chain, ProcessError> {
        let stages = specs
            .iter()
            .map(|s| Ok((s.name.clone(), registry.create(s)?)))
            .collect::<Result<_, ProcessError>>()?;
        Ok(Chain { stages })
    }

    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    pub fn output_arity(&self, input: usize) -> Result<usize, ProcessError> {
        self.stages.iter().try_fold(input, |n, (_, p)| p.output_arity(n))
    }

    pub fn dependencies(&self) -> Vec<String> {
        self.stages.iter().flat_map(|(_, p)| p.dependencies()).collect()
    }

    pub fn apply(&mut self, input: Vec<Value>, lookup: &dyn SensorLookup) -> Result<Outcome, ProcessError> {
        let mut current = input;
        for (_, stage) in &mut self.stages {
            match stage.process(current, lookup)? {
                Outcome::Values(v) => current = v,
                Outcome::Filtered => return Ok(Outcome::Filtered),
            }
        }
        Ok(Outcome::Values(current))
    }
}

/// Builds `chain` and runs a single input through it.
pub fn apply_chain(
    chain: &[ProcessorSpec],
    input: Vec<Value>,
    registry: &ProcessorRegistry,
) -> Result<Outcome, ProcessError> {
    Chain::build(chain, registry)?.apply(input, &NoSensors)
}

fn numbers(input: &[Value], processor: &'static str) -> Result<Vec<f64>, ProcessError> {
    input
        .iter()
        .map(|v| v.as_f64().ok_or(ProcessError::NonNumeric(processor)))
        .collect()
}

fn float_param(
    params: &ParamMap,
    processor: &'static str,
    name: &'static str,
    default: Option<f64>,
) -> Result<f64, ProcessError> {
    let bad = |reason| ProcessError::BadParam {
        processor,
        name,
        reason,
    };
    match params.get(name) {
        Some(v) => v.as_f64().filter(|x| x.is_finite()).ok_or(bad("must be a finite number")),
        None => default.ok_or(bad("is required")),
    }
}

/// Decibel level of an audio frame relative to `reference`, clamped below
/// at `floor_db`: `max(floor_db, 20 log10(rms / reference))`.
pub fn rms_db(frame: &[f64], floor_db: f64, reference: f64) -> Result<f64, ProcessError> {
    if frame.is_empty() {
        return Err(ProcessError::EmptyFrame);
    }
    let mean_square = frame.iter().map(|x| x * x).sum::<f64>() / frame.len() as f64;
    let db = 20.0 * (mean_square.sqrt() / reference).log10();
    // log10(0) is -inf; the floor also absorbs it
    Ok(if db.is_nan() || db < floor_db { floor_db } else { db })
}

/// Passes `input` unchanged iff every value lies in the closed interval.
pub fn filter_range(input: Vec<Value>, min: f64, max: f64) -> Outcome {
    let inside = input
        .iter()
        .all(|v| v.as_f64().is_some_and(|x| (min..=max).contains(&x)));
    if inside {
        Outcome::Values(input)
    } else {
        Outcome::Filtered
    }
}

struct Passthrough;

impl Passthrough {
    fn create(_: &ParamMap) -> Result<Box<dyn Processor>, ProcessError> {
        Ok(Box::new(Passthrough))
    }
}

impl Processor for Passthrough {
    fn output_arity(&self, input: usize) -> Result<usize, ProcessError> {
        Ok(input)
    }

    fn process(&mut self, input: Vec<Value>, _: &dyn SensorLookup) -> Result<Outcome, ProcessError> {
        Ok(Outcome::Values(input))
    }
}

/// Element-wise mean over the last `n` inputs.
struct MovingAverage {
    n: usize,
    history: VecDeque<Vec<f64>>,
}

impl MovingAverage {
    fn create(p: &ParamMap) -> Result<Box<dyn Processor>, ProcessError> {
        let n = match p.get("n") {
            None => 5,
            Some(v) => v
                .as_i64()
                .filter(|n| *n >= 1)
                .ok_or(ProcessError::BadParam {
                    processor: "moving_average",
                    name: "n",
                    reason: "must be a positive integer",
                })? as usize,
        };
        Ok(Box::new(MovingAverage {
            n,
            history: VecDeque::with_capacity(n),
        }))
    }
}

impl Processor for MovingAverage {
    fn output_arity(&self, input: usize) -> Result<usize, ProcessError> {
        Ok(input)
    }

    fn process(&mut self, input: Vec<Value>, _: &dyn SensorLookup) -> Result<Outcome, ProcessError> {
        let xs = numbers(&input, "moving_average")?;
        if self.history.front().is_some_and(|h| h.len() != xs.len()) {
            return Err(ProcessError::Arity {
                processor: "moving_average",
                arity: xs.len(),
            });
        }
        if self.history.len() == self.n {
            self.history.pop_front();
        }
        self.history.push_back(xs);
        let count = self.history.len() as f64;
        let width = self.history[0].len();
        let out = (0..width)
            .map(|i| Value::Number(self.history.iter().map(|h| h[i]).sum::<f64>() / count))
            .collect();
        Ok(Outcome::Values(out))
    }
}

struct RmsDb {
    floor_db: f64,
    reference: f64,
}

impl RmsDb {
    fn create(p: &ParamMap) -> Result<Box<dyn Processor>, ProcessError> {
        let floor_db = float_param(p, "rms_db", "floor_db", Some(DEFAULT_FLOOR_DB))?;
        let reference = float_param(p, "rms_db", "ref", Some(1.0))?;
        if reference <= 0.0 {
            return Err(ProcessError::BadParam {
                processor: "rms_db",
                name: "ref",
                reason: "must be positive",
            });
        }
        Ok(Box::new(RmsDb { floor_db, reference }))
    }
}

impl Processor for RmsDb {
    fn output_arity(&self, input: usize) -> Result<usize, ProcessError> {
        if input == 0 {
            Err(ProcessError::EmptyFrame)
        } else {
            Ok(1)
        }
    }

    fn process(&mut self, input: Vec<Value>, _: &dyn SensorLookup) -> Result<Outcome, ProcessError> {
        let frame = numbers(&input, "rms_db")?;
        let db = rms_db(&frame, self.floor_db, self.reference)?;
        Ok(Outcome::Values(vec![Value::Number(db)]))
    }
}

struct FilterRange {
    min: f64,
    max: f64,
}

impl FilterRange {
    fn create(p: &ParamMap) -> Result<Box<dyn Processor>, ProcessError> {
        let min = float_param(p, "filter_range", "min", None)?;
        let max = float_param(p, "filter_range", "max", None)?;
        if min > max {
            return Err(ProcessError::BadParam {
                processor: "filter_range",
                name: "min",
                reason: "must not exceed max",
            });
        }
        Ok(Box::new(FilterRange { min, max }))
    }
}

impl Processor for FilterRange {
    fn output_arity(&self, input: usize) -> Result<usize, ProcessError> {
        Ok(input)
    }

    fn process(&mut self, input: Vec<Value>, _: &dyn SensorLookup) -> Result<Outcome, ProcessError> {
        numbers(&input, "filter_range")?;
        Ok(filter_range(input, self.min, self.max))
    }
}

/// Element-wise mean of the current input and the newest values of the
/// sensors listed in `sensors` (comma separated). While any of them has no
/// data yet, the tick is skipped.
struct FuseMean {
    sensors: Vec<String>,
}

impl FuseMean {
    fn create(p: &ParamMap) -> Result<Box<dyn Processor>, ProcessError> {
        let sensors: Vec<String> = p
            .get("sensors")
            .and_then(ParamValue::as_str)
            .map(|s| s.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect())
            .unwrap_or_default();
        if sensors.is_empty() {
            return Err(ProcessError::BadParam {
                processor: "fuse_mean",
                name: "sensors",
                reason: "must list at least one sensor",
            });
        }
        Ok(Box::new(FuseMean { sensors }))
    }
}

impl Processor for FuseMean {
    fn output_arity(&self, input: usize) -> Result<usize, ProcessError> {
        Ok(input)
    }

    fn dependencies(&self) -> Vec<String> {
        self.sensors.clone()
    }

    fn process(&mut self, input: Vec<Value>, lookup: &dyn SensorLookup) -> Result<Outcome, ProcessError> {
        let mut sum = numbers(&input, "fuse_mean")?;
        let mut count = 1.0;
        for name in &self.sensors {
            // an input that has nothing yet skips the tick
            let Some(other) = lookup.latest_values(name) else {
                return Ok(Outcome::Filtered);
            };
            let other = numbers(&other, "fuse_mean")?;
            if other.len() != sum.len() {
                return Err(ProcessError::Arity {
                    processor: "fuse_mean",
                    arity: other.len(),
                });
            }
            sum.iter_mut().zip(other).for_each(|(s, o)| *s += o);
            count += 1.0;
        }
        Ok(Outcome::Values(sum.into_iter().map(|s| Value::Number(s / count)).collect()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nums(xs: &[f64]) -> Vec<Value> {
        xs.iter().copied().map(Value::Number).collect()
    }

    fn reg() -> ProcessorRegistry {
        ProcessorRegistry::builtin()
    }

    #[test]
    fn empty_chain_is_identity() {
        assert_eq!(apply_chain(&[], nums(&[3.1]), &reg()).unwrap(), Outcome::Values(nums(&[3.1])));
    }

    #[test]
    fn passthrough_twice() {
        let chain = [ProcessorSpec::new("passthrough"), ProcessorSpec::new("passthrough")];
        let out = apply_chain(&chain, nums(&[1.0, 2.0, 3.0]), &reg()).unwrap();
        assert_eq!(out, Outcome::Values(nums(&[1.0, 2.0, 3.0])));
    }

    #[test]
    fn moving_average_of_two() {
        let spec = [ProcessorSpec::new("moving_average").with("n", ParamValue::Int(2))];
        let mut chain = Chain::build(&spec, &reg()).unwrap();
        assert_eq!(chain.apply(nums(&[4.0]), &NoSensors).unwrap(), Outcome::Values(nums(&[4.0])));
        assert_eq!(chain.apply(nums(&[6.0]), &NoSensors).unwrap(), Outcome::Values(nums(&[5.0])));
        assert_eq!(chain.apply(nums(&[8.0]), &NoSensors).unwrap(), Outcome::Values(nums(&[7.0])));
    }

    #[test]
    fn moving_average_rejects_arity_change() {
        let mut chain = Chain::build(&[ProcessorSpec::new("moving_average")], &reg()).unwrap();
        chain.apply(nums(&[1.0]), &NoSensors).unwrap();
        let err = chain.apply(nums(&[1.0, 2.0]), &NoSensors).unwrap_err();
        assert_eq!(err.code(), "PROCESSOR_ARITY");
    }

    #[test]
    fn rms_db_reference_cases() {
        assert_eq!(rms_db(&[1.0; 64], DEFAULT_FLOOR_DB, 1.0).unwrap(), 0.0);
        assert_eq!(rms_db(&[0.0; 64], -120.0, 1.0).unwrap(), -120.0);
        assert_eq!(rms_db(&[], -120.0, 1.0).unwrap_err(), ProcessError::EmptyFrame);
        // 0.1 is -20 dB, below a -10 dB floor
        assert_eq!(rms_db(&[0.1; 8], -10.0, 1.0).unwrap(), -10.0);
    }

    #[test]
    fn rms_db_in_chain_outputs_one_value() {
        let chain = Chain::build(&[ProcessorSpec::new("rms_db")], &reg()).unwrap();
        assert_eq!(chain.output_arity(256).unwrap(), 1);
        assert_eq!(chain.output_arity(0).unwrap_err().code(), "EMPTY_FRAME");
        let bad = ProcessorSpec::new("rms_db").with("ref", ParamValue::Float(0.0));
        assert!(Chain::build(&[bad], &reg()).is_err());
    }

    #[test]
    fn filter_range_is_closed() {
        assert_eq!(filter_range(nums(&[5.0]), 0.0, 10.0), Outcome::Values(nums(&[5.0])));
        assert_eq!(filter_range(nums(&[11.0]), 0.0, 10.0), Outcome::Filtered);
        assert_eq!(filter_range(nums(&[0.0]), 0.0, 10.0), Outcome::Values(nums(&[0.0])));
        assert_eq!(filter_range(nums(&[10.0]), 0.0, 10.0), Outcome::Values(nums(&[10.0])));
    }

    #[test]
    fn filtered_out_short_circuits() {
        let chain = [
            ProcessorSpec::new("filter_range")
                .with("min", ParamValue::Int(0))
                .with("max", ParamValue::Int(1)),
            ProcessorSpec::new("rms_db"),
        ];
        assert_eq!(apply_chain(&chain, nums(&[2.0]), &reg()).unwrap(), Outcome::Filtered);
        let inverted = ProcessorSpec::new("filter_range")
            .with("min", ParamValue::Int(2))
            .with("max", ParamValue::Int(1));
        assert!(Chain::build(&[inverted], &reg()).is_err());
    }

    #[test]
    fn fuse_mean_averages_named_sensors() {
        let spec = [ProcessorSpec::new("fuse_mean").with("sensors", ParamValue::Text("a, b,c".into()))];
        let mut chain = Chain::build(&spec, &reg()).unwrap();
        assert_eq!(chain.dependencies(), ["a", "b", "c"]);
        let mut latest = BTreeMap::new();
        latest.insert("a".to_string(), nums(&[2.0, 4.0]));
        latest.insert("b".to_string(), nums(&[6.0, 8.0]));
        assert_eq!(chain.apply(nums(&[1.0, 0.0]), &latest).unwrap(), Outcome::Filtered);
        latest.insert("c".to_string(), nums(&[3.0, 0.0]));
        let out = chain.apply(nums(&[0.0, 4.0]), &latest).unwrap();
        assert_eq!(out, Outcome::Values(nums(&[2.75, 4.0])));
        latest.insert("c".to_string(), nums(&[1.0]));
        assert_eq!(chain.apply(nums(&[1.0, 0.0]), &latest).unwrap_err().code(), "PROCESSOR_ARITY");
    }

    #[test]
    fn unknown_processor() {
        let err = apply_chain(&[ProcessorSpec::new("fft")], nums(&[1.0]), &reg()).unwrap_err();
        assert_eq!(err.code(), "PROCESSOR_UNKNOWN");
    }

    #[test]
    fn text_input_is_rejected_by_numeric_stages() {
        let err = apply_chain(&[ProcessorSpec::new("rms_db")], vec![Value::Text("x".into())], &reg())
            .unwrap_err();
        assert_eq!(err.code(), "NON_NUMERIC_INPUT");
    }
}
