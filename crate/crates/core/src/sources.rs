//! Plugin registry, descriptor discovery and the built-in simulated sources.
//!
//! A plugin is described by a [`PluginDescriptor`] and realized in-process by
//! a factory registered under the same name. Descriptor files named
//! `<plugin_name>.plugin` can be discovered from a directory; they refine the
//! descriptions of registered implementations.
//!
//! Random sources draw from ChaCha8 (`rand_chacha::ChaCha8Rng`) seeded with
//! `seed_from_u64`, and convert 64-bit outputs to uniform floats as
//! `(x >> 11) * 2^-53`. Both steps are fixed algorithms, so seeded sequences
//! are bit-identical on every platform.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::model::{
    FieldSchema, ParamMap, ParamSpec, ParamType, ParamValue, PluginDescriptor, Value,
};
use crate::wire::text;

pub const PLUGIN_FILE_EXTENSION: &str = "plugin";

#[derive(Debug, Error)]
pub enum SourceError {
    #[error("plugin directory {path} is unreadable: {source}")]
    DirectoryUnreadable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("plugin {0:?} is not registered")]
    PluginUnknown(String),
    #[error("required parameter {0:?} is missing")]
    ParamMissing(String),
    #[error("parameter {name:?} must be {expected:?}")]
    ParamTypeMismatch { name: String, expected: ParamType },
    #[error("parameter {0:?} is not accepted by this plugin")]
    ParamUnknown(String),
    #[error("parameter {name:?} out of range: {reason}")]
    ParamOutOfRange { name: String, reason: String },
    #[error("replay file {path}: {reason}")]
    ReplayFile { path: PathBuf, reason: String },
    #[error("source exhausted")]
    Exhausted,
}

impl SourceError {
    pub fn code(&self) -> &'static str {
        match self {
            SourceError::DirectoryUnreadable { .. } => "DIRECTORY_UNREADABLE",
            SourceError::PluginUnknown(_) => "PLUGIN_UNKNOWN",
            SourceError::ParamMissing(_) => "PARAM_MISSING",
            SourceError::ParamTypeMismatch { .. } => "PARAM_TYPE_MISMATCH",
            SourceError::ParamUnknown(_) => "PARAM_UNKNOWN",
            SourceError::ParamOutOfRange { .. } => "PARAM_OUT_OF_RANGE",
            SourceError::ReplayFile { .. } => "REPLAY_FILE_INVALID",
            SourceError::Exhausted => "SOURCE_EXHAUSTED",
        }
    }
}

/// A live data source. Implementations own all of their mutable state.
pub trait Source: Send {
    /// The fields of every vector this source emits.
    fn fields(&self) -> &[FieldSchema];

    /// Acquires one reading at `now_ms` (epoch milliseconds).
    fn sample(&mut self, now_ms: u64) -> Result<Vec<Value>, SourceError>;
}

/// Environment handed to factories, e.g. for resolving relative file paths.
#[derive(Debug, Clone, Default)]
pub struct SourceContext {
    pub base_dir: PathBuf,
}

impl SourceContext {
    pub fn new(base_dir: impl Into<PathBuf>) -> Self {
        SourceContext {
            base_dir: base_dir.into(),
        }
    }

    fn resolve(&self, p: &str) -> PathBuf {
        let path = Path::new(p);
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }
}

pub type SourceFactory = fn(&ParamMap, &SourceContext) -> Result<Box<dyn Source>, SourceError>;

/// An instantiated plugin, ready to sample.
pub struct SourceInstance {
    plugin_name: String,
    params: ParamMap,
    inner: Box<dyn Source>,
}

impl std::fmt::Debug for SourceInstance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SourceInstance")
            .field("plugin_name", &self.plugin_name)
            .field("params", &self.params)
            .finish_non_exhaustive()
    }
}

impl SourceInstance {
    pub fn plugin_name(&self) -> &str {
        &self.plugin_name
    }

    /// Parameters after defaults were applied.
    pub fn params(&self) -> &ParamMap {
        &self.params
    }

    pub fn fields(&self) -> &[FieldSchema] {
        self.inner.fields()
    }

    pub fn arity(&self) -> usize {
        self.inner.fields().len()
    }

    pub fn sample(&mut self, now_ms: u64) -> Result<Vec<Value>, SourceError> {
        let values = self.inner.sample(now_ms)?;
        debug_assert_eq!(values.len(), self.arity(), "{} broke its arity", self.plugin_name);
        Ok(values)
    }
}

/// Result of scanning a plugin directory.
#[derive(Debug, Default)]
pub struct Discovery {
    pub descriptors: Vec<PluginDescriptor>,
    pub diagnostics: Vec<Diagnostic>,
}

#[derive(Debug, Clone)]
pub struct Diagnostic {
    pub file: PathBuf,
    pub message: String,
}

/// Reads every `*.plugin` file in `dir`. Malformed files are skipped and
/// reported; only an unlistable directory is an error.
pub fn discover_plugins(dir: &Path) -> Result<Discovery, SourceError> {
    let unreadable = |source| SourceError::DirectoryUnreadable {
        path: dir.to_path_buf(),
        source,
    };
    let mut paths = Vec::new();
    for entry in fs::read_dir(dir).map_err(unreadable)? {
        let path = entry.map_err(unreadable)?.path();
        if path.extension().and_then(|e| e.to_str()) == Some(PLUGIN_FILE_EXTENSION) {
            paths.push(path);
        }
    }
    paths.sort();

    let mut out = Discovery::default();
    let mut by_name: BTreeMap<String, PluginDescriptor> = BTreeMap::new();
    for path in paths {
        let parsed = fs::read_to_string(&path)
            .map_err(|e| e.to_string())
            .and_then(|s| text::parse_descriptor(&s).map_err(|e| e.to_string()))
            .and_then(|d| {
                let v = d.validate();
                if v.is_ok() {
                    Ok(d)
                } else {
                    Err(v.to_string())
                }
            });
        match parsed {
            Ok(d) if by_name.contains_key(&d.plugin_name) => out.diagnostics.push(Diagnostic {
                file: path,
                message: format!("duplicate plugin name {:?}", d.plugin_name),
            }),
            Ok(d) => {
                by_name.insert(d.plugin_name.clone(), d);
            }
            Err(message) => out.diagnostics.push(Diagnostic { file: path, message }),
        }
    }
    out.descriptors = by_name.into_values().collect();
    Ok(out)
}

/// Known plugins: descriptors plus the factories that realize them.
#[derive(Clone)]
pub struct PluginRegistry {
    descriptors: BTreeMap<String, PluginDescriptor>,
    factories: BTreeMap<String, SourceFactory>,
}

impl Default for PluginRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

impl PluginRegistry {
    pub fn empty() -> Self {
        PluginRegistry {
            descriptors: BTreeMap::new(),
            factories: BTreeMap::new(),
        }
    }

    /// Registry holding the built-in simulated sources.
    pub fn builtin() -> Self {
        let mut r = Self::empty();
        for (descriptor, factory) in builtin_plugins() {
            r.register(descriptor, factory);
        }
        r
    }

    pub fn register(&mut self, descriptor: PluginDescriptor, factory: SourceFactory) {
        self.factories.insert(descriptor.plugin_name.clone(), factory);
        self.descriptors.insert(descriptor.plugin_name.clone(), descriptor);
    }

    /// Adds discovered descriptors. A discovered descriptor replaces the
    /// description of an existing plugin of the same name.
    pub fn merge_discovered(&mut self, descriptors: impl IntoIterator<Item = PluginDescriptor>) {
        for d in descriptors {
            self.descriptors.insert(d.plugin_name.clone(), d);
        }
    }

    pub fn descriptor(&self, name: &str) -> Option<&PluginDescriptor> {
        self.descriptors.get(name)
    }

    pub fn descriptors(&self) -> impl Iterator<Item = &PluginDescriptor> {
        self.descriptors.values()
    }

    /// Names of plugins that can actually be instantiated.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.descriptors
            .keys()
            .filter(|k| self.factories.contains_key(*k))
            .map(String::as_str)
    }

    pub fn instantiate(
        &self,
        descriptor: &PluginDescriptor,
        params: &ParamMap,
        ctx: &SourceContext,
    ) -> Result<SourceInstance, SourceError> {
        let factory = self
            .factories
            .get(&descriptor.plugin_name)
            .ok_or_else(|| SourceError::PluginUnknown(descriptor.plugin_name.clone()))?;
        let resolved = resolve_params(descriptor, params)?;
        let inner = factory(&resolved, ctx)?;
        Ok(SourceInstance {
            plugin_name: descriptor.plugin_name.clone(),
            params: resolved,
            inner,
        })
    }

    pub fn instantiate_by_name(
        &self,
        name: &str,
        params: &ParamMap,
        ctx: &SourceContext,
    ) -> Result<SourceInstance, SourceError> {
        let d = self
            .descriptor(name)
            .ok_or_else(|| SourceError::PluginUnknown(name.to_string()))?;
        self.instantiate(d, params, ctx)
    }
}

/// Applies defaults and checks required parameters and types.
pub fn resolve_params(descriptor: &PluginDescriptor, params: &ParamMap) -> Result<ParamMap, SourceError> {
    for key in params.keys() {
        if descriptor.parameter(key).is_none() {
            return Err(SourceError::ParamUnknown(key.clone()));
        }
    }
    let mut out = ParamMap::new();
    for spec in &descriptor.parameters {
        match params.get(&spec.name).or(spec.default.as_ref()) {
            Some(v) if v.conforms_to(spec.ty) => {
                out.insert(spec.name.clone(), v.clone());
            }
            Some(_) => {
                return Err(SourceError::ParamTypeMismatch {
                    name: spec.name.clone(),
                    expected: spec.ty,
                })
            }
            None if spec.required => return Err(SourceError::ParamMissing(spec.name.clone())),
            None => {}
        }
    }
    Ok(out)
}

fn num(params: &ParamMap, name: &str) -> f64 {
    params.get(name).and_then(ParamValue::as_f64).unwrap_or(0.0)
}

fn int(params: &ParamMap, name: &str) -> i64 {
    params.get(name).and_then(ParamValue::as_i64).unwrap_or(0)
}

fn out_of_range(name: &str, reason: &str) -> SourceError {
    SourceError::ParamOutOfRange {
        name: name.to_string(),
        reason: reason.to_string(),
    }
}

fn finite(params: &ParamMap, name: &str) -> Result<f64, SourceError> {
    let v = num(params, name);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(out_of_range(name, "must be finite"))
    }
}

/// Seeded uniform generator shared by the random sources.
#[derive(Debug, Clone)]
pub struct UniformRng(ChaCha8Rng);

impl UniformRng {
    pub fn new(seed: u64) -> Self {
        UniformRng(ChaCha8Rng::seed_from_u64(seed))
    }

    /// Uniform in `[0, 1)`.
    pub fn unit(&mut self) -> f64 {
        (self.0.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }
}

fn param(name: &str, ty: ParamType, default: Option<ParamValue>) -> ParamSpec {
    ParamSpec {
        name: name.into(),
        ty,
        required: default.is_none(),
        default,
    }
}

fn descriptor(name: &str, description: &str, fields: Vec<FieldSchema>, parameters: Vec<ParamSpec>) -> PluginDescriptor {
    PluginDescriptor {
        plugin_name: name.into(),
        description: description.into(),
        fields,
        parameters,
    }
}

fn builtin_plugins() -> Vec<(PluginDescriptor, SourceFactory)> {
    use ParamType::*;
    use ParamValue as P;
    vec![
        (
            descriptor(
                "constant",
                "Emits the same value on every read.",
                vec![FieldSchema::numeric("value", "")],
                vec![param("value", Number, None)],
            ),
            Constant::create,
        ),
        (
            descriptor(
                "sine",
                "Emits amplitude * sin(2 pi freq_hz t), t in seconds since the first read.",
                vec![FieldSchema::numeric("value", "")],
                vec![
                    param("amplitude", Number, Some(P::Float(1.0))),
                    param("freq_hz", Number, None),
                ],
            ),
            Sine::create,
        ),
        (
            descriptor(
                "random_walk",
                "Emits the previous value plus a seeded uniform step in [-step, step).",
                vec![FieldSchema::numeric("value", "")],
                vec![
                    param("step", Number, Some(P::Float(0.1))),
                    param("seed", Integer, Some(P::Int(0))),
                    param("start", Number, Some(P::Float(0.0))),
                ],
            ),
            RandomWalk::create,
        ),
        (
            descriptor(
                "sine_audio",
                "Simulated microphone: frames of `frame` audio samples of a pure tone. \
                 The single declared field repeats once per sample (sample_0 .. sample_{frame-1}).",
                vec![FieldSchema::numeric("sample", "")],
                vec![
                    param("amplitude", Number, Some(P::Float(1.0))),
                    param("freq_hz", Number, None),
                    param("frame", Integer, Some(P::Int(256))),
                    param("rate", Integer, Some(P::Int(8000))),
                ],
            ),
            SineAudio::create,
        ),
        (
            descriptor(
                "replay",
                "Replays rows of a CSV file (header of field names, numeric rows). \
                 Fields are taken from the header.",
                vec![FieldSchema::numeric("value", "")],
                vec![param("file", Text, None), param("loop", Bool, Some(P::Bool(false)))],
            ),
            Replay::create,
        ),
        (
            descriptor(
                "multi_axis",
                "Accelerometer-like source producing x, y and z per read.",
                vec![
                    FieldSchema::numeric("x", "m/s2"),
                    FieldSchema::numeric("y", "m/s2"),
                    FieldSchema::numeric("z", "m/s2"),
                ],
                vec![
                    param("seed", Integer, Some(P::Int(0))),
                    param("noise", Number, Some(P::Float(0.05))),
                ],
            ),
            MultiAxis::create,
        ),
    ]
}

fn single_field() -> Vec<FieldSchema> {
    vec![FieldSchema::numeric("value", "")]
}

struct Constant {
    fields: Vec<FieldSchema>,
    value: f64,
}

impl Constant {
    fn create(p: &ParamMap, _: &SourceContext) -> Result<Box<dyn Source>, SourceError> {
        Ok(Box::new(Constant {
            fields: single_field(),
            value: finite(p, "value")?,
        }))
    }
}

impl Source for Constant {
    fn fields(&self) -> &[FieldSchema] {
        &self.fields
    }

    fn sample(&mut self, _now_ms: u64) -> Result<Vec<Value>, SourceError> {
        Ok(vec![Value::Number(self.value)])
    }
}

struct Sine {
    fields: Vec<FieldSchema>,
    amplitude: f64,
    freq_hz: f64,
    t0_ms: Option<u64>,
}

impl Sine {
    fn create(p: &ParamMap, _: &SourceContext) -> Result<Box<dyn Source>, SourceError> {
        Ok(Box::new(Sine {
            fields: single_field(),
            amplitude: finite(p, "amplitude")?,
            freq_hz: finite(p, "freq_hz")?,
            t0_ms: None,
        }))
    }
}

impl Source for Sine {
    fn fields(&self) -> &[FieldSchema] {
        &self.fields
    }

    fn sample(&mut self, now_ms: u64) -> Result<Vec<Value>, SourceError> {
        let t0 = *self.t0_ms.get_or_insert(now_ms);
        let t = now_ms.saturating_sub(t0) as f64 / 1000.0;
        Ok(vec![Value::Number(self.amplitude * (2.0 * PI * self.freq_hz * t).sin())])
    }
}

struct RandomWalk {
    fields: Vec<FieldSchema>,
    rng: UniformRng,
    step: f64,
    current: f64,
}

impl RandomWalk {
    fn create(p: &ParamMap, _: &SourceContext) -> Result<Box<dyn Source>, SourceError> {
        let step = finite(p, "step")?;
        if step < 0.0 {
            return Err(out_of_range("step", "must be non-negative"));
        }
        Ok(Box::new(RandomWalk {
            fields: single_field(),
            rng: UniformRng::new(int(p, "seed") as u64),
            step,
            current: finite(p, "start")?,
        }))
    }
}

impl Source for RandomWalk {
    fn fields(&self) -> &[FieldSchema] {
        &self.fields
    }

    fn sample(&mut self, _now_ms: u64) -> Result<Vec<Value>, SourceError> {
        self.current += self.rng.range(-self.step, self.step);
        Ok(vec![Value::Number(self.current)])
    }
}

struct SineAudio {
    fields: Vec<FieldSchema>,
    amplitude: f64,
    freq_hz: f64,
    rate: f64,
    next_index: u64,
}

impl SineAudio {
    fn create(p: &ParamMap, _: &SourceContext) -> Result<Box<dyn Source>, SourceError> {
        let frame = int(p, "frame");
        if !(1..=65_536).contains(&frame) {
            return Err(out_of_range("frame", "must be in 1..=65536"));
        }
        let rate = int(p, "rate");
        if rate < 1 {
            return Err(out_of_range("rate", "must be positive"));
        }
        Ok(Box::new(SineAudio {
            fields: (0..frame).map(|i| FieldSchema::numeric(format!("sample_{i}"), "")).collect(),
            amplitude: finite(p, "amplitude")?,
            freq_hz: finite(p, "freq_hz")?,
            rate: rate as f64,
            next_index: 0,
        }))
    }
}

impl Source for SineAudio {
    fn fields(&self) -> &[FieldSchema] {
        &self.fields
    }

    fn sample(&mut self, _now_ms: u64) -> Result<Vec<Value>, SourceError> {
        let start = self.next_index;
        let n = self.fields.len() as u64;
        self.next_index += n;
        Ok((start..start + n)
            .map(|k| Value::Number(self.amplitude * (2.0 * PI * self.freq_hz * k as f64 / self.rate).sin()))
            .collect())
    }
}

struct Replay {
    fields: Vec<FieldSchema>,
    rows: Vec<Vec<f64>>,
    cursor: usize,
    looping: bool,
}

impl Replay {
    fn create(p: &ParamMap, ctx: &SourceContext) -> Result<Box<dyn Source>, SourceError> {
        let file = p.get("file").and_then(ParamValue::as_str).unwrap_or_default();
        let path = ctx.resolve(file);
        let bad = |reason: String| SourceError::ReplayFile {
            path: path.clone(),
            reason,
        };
        let content = fs::read_to_string(&path).map_err(|e| bad(e.to_string()))?;
        let (fields, rows) = parse_replay(&content).map_err(bad)?;
        Ok(Box::new(Replay {
            fields,
            rows,
            cursor: 0,
            looping: p.get("loop").and_then(ParamValue::as_bool).unwrap_or(false),
        }))
    }
}

/// Parses a replay file: a header row of field names followed by
/// comma-separated numeric rows. Blank lines are ignored.
pub fn parse_replay(content: &str) -> Result<(Vec<FieldSchema>, Vec<Vec<f64>>), String> {
    let mut lines = content.lines().map(str::trim).filter(|l| !l.is_empty());
    let header = lines.next().ok_or("missing header row")?;
    let fields: Vec<FieldSchema> = header
        .split(',')
        .map(|name| FieldSchema::numeric(name.trim(), ""))
        .collect();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let row = line
            .split(',')
            .map(|c| c.trim().parse::<f64>().ok().filter(|v| v.is_finite()))
            .collect::<Option<Vec<f64>>>()
            .ok_or_else(|| format!("row {} is not numeric", i + 1))?;
        if row.len() != fields.len() {
            return Err(format!("row {} has {} columns, header has {}", i + 1, row.len(), fields.len()));
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err("no data rows".into());
    }
    Ok((fields, rows))
}

impl Source for Replay {
    fn fields(&self) -> &[FieldSchema] {
        &self.fields
    }

    fn sample(&mut self, _now_ms: u64) -> Result<Vec<Value>, SourceError> {
        if self.cursor == self.rows.len() {
            if !self.looping {
                return Err(SourceError::Exhausted);
            }
            self.cursor = 0;
        }
        let row = &self.rows[self.cursor];
        self.cursor += 1;
        Ok(row.iter().copied().map(Value::Number).collect())
    }
}

const STANDARD_GRAVITY: f64 = 9.806_65;

struct MultiAxis {
    fields: Vec<FieldSchema>,
    rng: UniformRng,
    noise: f64,
}

impl MultiAxis {
    fn create(p: &ParamMap, _: &SourceContext) -> Result<Box<dyn Source>, SourceError> {
        Ok(Box::new(MultiAxis {
            fields: vec![
                FieldSchema::numeric("x", "m/s2"),
                FieldSchema::numeric("y", "m/s2"),
                FieldSchema::numeric("z", "m/s2"),
            ],
            rng: UniformRng::new(int(p, "seed") as u64),
            noise: finite(p, "noise")?,
        }))
    }
}

impl Source for MultiAxis {
    fn fields(&self) -> &[FieldSchema] {
        &self.fields
    }

    fn sample(&mut self, _now_ms: u64) -> Result<Vec<Value>, SourceError> {
        let n = self.noise;
        let x = self.rng.range(-n, n);
        let y = self.rng.range(-n, n);
        let z = STANDARD_GRAVITY + self.rng.range(-n, n);
        Ok(vec![x.into(), y.into(), z.into()])
    }
}
