//! Domain types shared by every layer: schemas, stream elements, virtual
//! sensor configurations and plugin descriptors, plus their validation.
//!
//! Nothing in here performs I/O. Validation never fails; it reports a list of
//! [`Violation`]s, each carrying a stable machine-readable [`ViolationCode`].

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

/// Default acquisition period for a virtual sensor, in milliseconds.
pub const DEFAULT_SAMPLING_INTERVAL_MS: u64 = 1000;
/// Shortest acquisition period a sensor may request.
pub const MIN_SAMPLING_INTERVAL_MS: u64 = 10;

/// Returns true when `s` matches `[A-Za-z_][A-Za-z0-9_]*`.
pub fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldKind {
    Numeric,
    Text,
}

/// One named column of a sensor's output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldSchema {
    pub name: String,
    pub kind: FieldKind,
    #[serde(default)]
    pub unit: String,
}

impl FieldSchema {
    pub fn numeric(name: impl Into<String>, unit: impl Into<String>) -> Self {
        FieldSchema {
            name: name.into(),
            kind: FieldKind::Numeric,
            unit: unit.into(),
        }
    }

    pub fn text(name: impl Into<String>) -> Self {
        FieldSchema {
            name: name.into(),
            kind: FieldKind::Text,
            unit: String::new(),
        }
    }
}

/// A single reading value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Number(f64),
    Text(String),
}

impl Value {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Number(v) => Some(*v),
            Value::Text(_) => None,
        }
    }
}

impl From<f64> for Value {
    fn from(v: f64) -> Self {
        Value::Number(v)
    }
}

impl From<&str> for Value {
    fn from(v: &str) -> Self {
        Value::Text(v.to_string())
    }
}

/// One timestamped reading of a virtual sensor.
///
/// `seq` starts at 0 and grows by exactly one per stored element of a
/// sensor. `timestamp` is epoch milliseconds, assigned by the sampling
/// scheduler rather than the source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamElement {
    pub sensor: String,
    pub seq: u64,
    pub timestamp: u64,
    pub values: Vec<Value>,
}

impl StreamElement {
    /// The element's canonical JSON form. This is the payload carried by
    /// `deliver` and `query_result` frames, and its length is the storage
    /// size estimate.
    pub fn to_json(&self) -> String {
        // values are finite by construction, so serialization cannot fail
        serde_json::to_string(self).expect("finite element serializes")
    }

    pub fn wire_size(&self) -> usize {
        self.to_json().len()
    }
}

/// A typed parameter value as written in config and descriptor files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Bool(bool),
    Int(i64),
    Float(f64),
    Text(String),
}

impl ParamValue {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            ParamValue::Int(i) => Some(*i as f64),
            ParamValue::Float(f) => Some(*f),
            _ => None,
        }
    }

    pub fn as_i64(&self) -> Option<i64> {
        match self {
            ParamValue::Int(i) => Some(*i),
            _ => None,
        }
    }

    pub fn as_bool(&self) -> Option<bool> {
        match self {
            ParamValue::Bool(b) => Some(*b),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            ParamValue::Text(s) => Some(s),
            _ => None,
        }
    }

    pub fn conforms_to(&self, ty: ParamType) -> bool {
        match ty {
            ParamType::Number => matches!(self, ParamValue::Int(_) | ParamValue::Float(_)),
            ParamType::Integer => matches!(self, ParamValue::Int(_)),
            ParamType::Text => matches!(self, ParamValue::Text(_)),
            ParamType::Bool => matches!(self, ParamValue::Bool(_)),
        }
    }
}

impl fmt::Display for ParamValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamValue::Bool(b) => write!(f, "{b}"),
            ParamValue::Int(i) => write!(f, "{i}"),
            ParamValue::Float(x) => write!(f, "{x}"),
            ParamValue::Text(s) => write!(f, "{s:?}"),
        }
    }
}

/// Parameter maps are ordered by key so that equality, hashing and
/// serialization never depend on insertion order.
pub type ParamMap = BTreeMap<String, ParamValue>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamType {
    Number,
    Integer,
    Text,
    Bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    #[serde(rename = "type")]
    pub ty: ParamType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<ParamValue>,
    #[serde(default)]
    pub required: bool,
}

/// Declarative description of a sensor source: what it emits and which
/// parameters it accepts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PluginDescriptor {
    pub plugin_name: String,
    #[serde(default)]
    pub description: String,
    pub fields: Vec<FieldSchema>,
    #[serde(default)]
    pub parameters: Vec<ParamSpec>,
}

impl PluginDescriptor {
    pub fn parameter(&self, name: &str) -> Option<&ParamSpec> {
        self.parameters.iter().find(|p| p.name == name)
    }

    pub fn validate(&self) -> Validation {
        let mut out = Validation::default();
        if !is_identifier(&self.plugin_name) {
            out.push(
                ViolationCode::NameInvalid,
                format!("plugin name {:?} is not an identifier", self.plugin_name),
            );
        }
        if self.fields.is_empty() {
            out.push(ViolationCode::DescriptorFieldsEmpty, "descriptor declares no fields");
        }
        check_fields(&self.fields, &mut out);
        let mut seen = BTreeSet::new();
        for p in &self.parameters {
            if !seen.insert(p.name.as_str()) {
                out.push(ViolationCode::ParamDuplicate, format!("parameter {:?} declared twice", p.name));
            }
            if p.required && p.default.is_some() {
                out.push(
                    ViolationCode::RequiredParamHasDefault,
                    format!("required parameter {:?} has a default", p.name),
                );
            }
            if let Some(d) = &p.default {
                if !d.conforms_to(p.ty) {
                    out.push(
                        ViolationCode::ParamTypeMismatch,
                        format!("default of {:?} does not match its type", p.name),
                    );
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceSpec {
    pub plugin: String,
    #[serde(default)]
    pub params: ParamMap,
}

/// A named processor plus its parameters, one link of a processing chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessorSpec {
    pub name: String,
    #[serde(default)]
    pub params: ParamMap,
}

impl ProcessorSpec {
    pub fn new(name: impl Into<String>) -> Self {
        ProcessorSpec {
            name: name.into(),
            params: ParamMap::new(),
        }
    }

    pub fn with(mut self, key: &str, value: ParamValue) -> Self {
        self.params.insert(key.to_string(), value);
        self
    }
}

fn default_sampling_interval() -> u64 {
    DEFAULT_SAMPLING_INTERVAL_MS
}

/// Binds one source plugin, a processing chain, a retention window and an
/// output schema into a named, queryable stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VirtualSensorConfig {
    pub name: String,
    /// Number of most recent elements retained.
    pub history_size: u64,
    #[serde(default = "default_sampling_interval")]
    pub sampling_interval: u64,
    pub source: SourceSpec,
    #[serde(default)]
    pub processors: Vec<ProcessorSpec>,
    pub output_schema: Vec<FieldSchema>,
}

/// The names a configuration may refer to.
#[derive(Debug, Clone, Default)]
pub struct KnownNames {
    pub plugins: BTreeSet<String>,
    pub processors: BTreeSet<String>,
}

impl KnownNames {
    pub fn new<P, Q>(plugins: P, processors: Q) -> Self
    where
        P: IntoIterator,
        P::Item: Into<String>,
        Q: IntoIterator,
        Q::Item: Into<String>,
    {
        KnownNames {
            plugins: plugins.into_iter().map(Into::into).collect(),
            processors: processors.into_iter().map(Into::into).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ViolationCode {
    NameInvalid,
    HistorySizeNonpositive,
    SamplingIntervalTooShort,
    PluginUnknown,
    ProcessorUnknown,
    OutputSchemaEmpty,
    FieldNameInvalid,
    FieldNameDuplicate,
    DescriptorFieldsEmpty,
    ParamDuplicate,
    RequiredParamHasDefault,
    ParamTypeMismatch,
    ArityMismatch,
    NonFiniteValue,
    KindMismatch,
    SensorDuplicate,
}

impl ViolationCode {
    pub fn as_str(self) -> &'static str {
        match self {
            ViolationCode::NameInvalid => "NAME_INVALID",
            ViolationCode::HistorySizeNonpositive => "HISTORY_SIZE_NONPOSITIVE",
            ViolationCode::SamplingIntervalTooShort => "SAMPLING_INTERVAL_TOO_SHORT",
            ViolationCode::PluginUnknown => "PLUGIN_UNKNOWN",
            ViolationCode::ProcessorUnknown => "PROCESSOR_UNKNOWN",
            ViolationCode::OutputSchemaEmpty => "OUTPUT_SCHEMA_EMPTY",
            ViolationCode::FieldNameInvalid => "FIELD_NAME_INVALID",
            ViolationCode::FieldNameDuplicate => "FIELD_NAME_DUPLICATE",
            ViolationCode::DescriptorFieldsEmpty => "DESCRIPTOR_FIELDS_EMPTY",
            ViolationCode::ParamDuplicate => "PARAM_DUPLICATE",
            ViolationCode::RequiredParamHasDefault => "REQUIRED_PARAM_HAS_DEFAULT",
            ViolationCode::ParamTypeMismatch => "PARAM_TYPE_MISMATCH",
            ViolationCode::ArityMismatch => "ARITY_MISMATCH",
            ViolationCode::NonFiniteValue => "NON_FINITE_VALUE",
            ViolationCode::KindMismatch => "KIND_MISMATCH",
            ViolationCode::SensorDuplicate => "SENSOR_DUPLICATE",
        }
    }
}

impl fmt::Display for ViolationCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub code: ViolationCode,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.code, self.detail)
    }
}

/// Outcome of a validation pass. Empty means ok.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Validation {
    pub violations: Vec<Violation>,
}

impl Validation {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn codes(&self) -> Vec<ViolationCode> {
        self.violations.iter().map(|v| v.code).collect()
    }

    pub fn has(&self, code: ViolationCode) -> bool {
        self.violations.iter().any(|v| v.code == code)
    }

    pub fn push(&mut self, code: ViolationCode, detail: impl Into<String>) {
        self.violations.push(Violation {
            code,
            detail: detail.into(),
        });
    }

    pub fn extend(&mut self, other: Validation) {
        self.violations.extend(other.violations);
    }
}

impl fmt::Display for Validation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_ok() {
            return f.write_str("ok");
        }
        let parts: Vec<String> = self.violations.iter().map(ToString::to_string).collect();
        f.write_str(&parts.join("; "))
    }
}

fn check_fields(fields: &[FieldSchema], out: &mut Validation) {
    let mut seen = BTreeSet::new();
    for f in fields {
        if !is_identifier(&f.name) {
            out.push(
                ViolationCode::FieldNameInvalid,
                format!("field name {:?} is not an identifier", f.name),
            );
        }
        if !seen.insert(f.name.as_str()) {
            out.push(ViolationCode::FieldNameDuplicate, format!("field {:?} declared twice", f.name));
        }
    }
}

/// Checks every invariant of a virtual sensor configuration and that the
/// plugin and processor names it references are known.
pub fn validate_config(cfg: &VirtualSensorConfig, known: &KnownNames) -> Validation {
    let mut out = Validation::default();
    if !is_identifier(&cfg.name) {
        out.push(
            ViolationCode::NameInvalid,
            format!("sensor name {:?} is not an identifier", cfg.name),
        );
    }
    if cfg.history_size == 0 {
        out.push(ViolationCode::HistorySizeNonpositive, "history_size must be at least 1");
    }
    if cfg.sampling_interval < MIN_SAMPLING_INTERVAL_MS {
        out.push(
            ViolationCode::SamplingIntervalTooShort,
            format!(
                "sampling_interval {} ms is below {} ms",
                cfg.sampling_interval, MIN_SAMPLING_INTERVAL_MS
            ),
        );
    }
    if !known.plugins.contains(&cfg.source.plugin) {
        out.push(
            ViolationCode::PluginUnknown,
            format!("plugin {:?} is not registered", cfg.source.plugin),
        );
    }
    for p in &cfg.processors {
        if !known.processors.contains(&p.name) {
            out.push(
                ViolationCode::ProcessorUnknown,
                format!("processor {:?} is not registered", p.name),
            );
        }
    }
    if cfg.output_schema.is_empty() {
        out.push(ViolationCode::OutputSchemaEmpty, "output_schema declares no fields");
    }
    check_fields(&cfg.output_schema, &mut out);
    out
}

/// Checks an element against the schema of the sensor that produced it.
pub fn validate_element(e: &StreamElement, schema: &[FieldSchema]) -> Validation {
    let mut out = Validation::default();
    if e.values.len() != schema.len() {
        out.push(
            ViolationCode::ArityMismatch,
            format!("{} values for {} fields", e.values.len(), schema.len()),
        );
    }
    for (i, v) in e.values.iter().enumerate() {
        match v {
            Value::Number(x) if !x.is_finite() => {
                out.push(ViolationCode::NonFiniteValue, format!("value {i} is {x}"));
            }
            Value::Text(_) if schema.get(i).is_some_and(|f| f.kind == FieldKind::Numeric) => {
                out.push(ViolationCode::KindMismatch, format!("value {i} is text in a numeric field"));
            }
            Value::Number(_) if schema.get(i).is_some_and(|f| f.kind == FieldKind::Text) => {
                out.push(ViolationCode::KindMismatch, format!("value {i} is numeric in a text field"));
            }
            _ => {}
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn known() -> KnownNames {
        KnownNames::new(
            ["sine_audio", "random_walk", "constant"],
            ["rms_db", "passthrough", "moving_average"],
        )
    }

    pub(crate) fn noise_sensor() -> VirtualSensorConfig {
        let mut params = ParamMap::new();
        params.insert("amplitude".into(), ParamValue::Float(0.5));
        params.insert("freq_hz".into(), ParamValue::Int(440));
        VirtualSensorConfig {
            name: "noise".into(),
            history_size: 60,
            sampling_interval: 1000,
            source: SourceSpec {
                plugin: "sine_audio".into(),
                params,
            },
            processors: vec![ProcessorSpec::new("rms_db")],
            output_schema: vec![FieldSchema::numeric("level", "dB")],
        }
    }

    #[test]
    fn identifiers() {
        assert!(is_identifier("a"));
        assert!(is_identifier("_x9"));
        assert!(!is_identifier(""));
        assert!(!is_identifier("9a"));
        assert!(!is_identifier("a-b"));
        assert!(!is_identifier("é"));
    }

    #[test]
    fn noise_sensor_is_valid() {
        let v = validate_config(&noise_sensor(), &known());
        assert!(v.is_ok(), "{v}");
    }

    #[test]
    fn zero_history_is_rejected() {
        let mut cfg = noise_sensor();
        cfg.history_size = 0;
        assert_eq!(
            validate_config(&cfg, &known()).codes(),
            vec![ViolationCode::HistorySizeNonpositive]
        );
    }

    #[test]
    fn unknown_plugin_is_rejected() {
        let mut cfg = noise_sensor();
        cfg.source.plugin = "sonar".into();
        assert_eq!(validate_config(&cfg, &known()).codes(), vec![ViolationCode::PluginUnknown]);
    }

    #[test]
    fn short_interval_and_unknown_processor() {
        let mut cfg = noise_sensor();
        cfg.sampling_interval = 9;
        cfg.processors.push(ProcessorSpec::new("fft"));
        let v = validate_config(&cfg, &known());
        assert!(v.has(ViolationCode::SamplingIntervalTooShort));
        assert!(v.has(ViolationCode::ProcessorUnknown));
        cfg.sampling_interval = 10;
        assert!(!validate_config(&cfg, &known()).has(ViolationCode::SamplingIntervalTooShort));
    }

    #[test]
    fn duplicate_output_fields() {
        let mut cfg = noise_sensor();
        cfg.output_schema.push(FieldSchema::numeric("level", ""));
        cfg.output_schema.push(FieldSchema::numeric("bad name", ""));
        let v = validate_config(&cfg, &known());
        assert!(v.has(ViolationCode::FieldNameDuplicate));
        assert!(v.has(ViolationCode::FieldNameInvalid));
    }

    #[test]
    fn element_checks() {
        let schema = vec![
            FieldSchema::numeric("x", ""),
            FieldSchema::numeric("y", ""),
            FieldSchema::numeric("z", ""),
        ];
        let mut e = StreamElement {
            sensor: "acc".into(),
            seq: 0,
            timestamp: 0,
            values: vec![1.0.into(), 2.0.into()],
        };
        assert_eq!(validate_element(&e, &schema).codes(), vec![ViolationCode::ArityMismatch]);
        e.values.push(f64::NAN.into());
        assert_eq!(validate_element(&e, &schema).codes(), vec![ViolationCode::NonFiniteValue]);
        e.values[2] = 3.0.into();
        assert!(validate_element(&e, &schema).is_ok());
        e.values[1] = "up".into();
        assert_eq!(validate_element(&e, &schema).codes(), vec![ViolationCode::KindMismatch]);
    }

    #[test]
    fn descriptor_rules() {
        let mut d = PluginDescriptor {
            plugin_name: "sine".into(),
            description: String::new(),
            fields: vec![],
            parameters: vec![
                ParamSpec {
                    name: "a".into(),
                    ty: ParamType::Number,
                    default: Some(ParamValue::Float(1.0)),
                    required: true,
                },
                ParamSpec {
                    name: "a".into(),
                    ty: ParamType::Integer,
                    default: Some(ParamValue::Text("x".into())),
                    required: false,
                },
            ],
        };
        let v = d.validate();
        for code in [
            ViolationCode::DescriptorFieldsEmpty,
            ViolationCode::ParamDuplicate,
            ViolationCode::RequiredParamHasDefault,
            ViolationCode::ParamTypeMismatch,
        ] {
            assert!(v.has(code), "missing {code}");
        }
        d.fields.push(FieldSchema::numeric("value", ""));
        d.parameters.truncate(1);
        d.parameters[0].default = None;
        assert!(d.validate().is_ok());
    }

    #[test]
    fn element_json_field_order() {
        let e = StreamElement {
            sensor: "t".into(),
            seq: 3,
            timestamp: 1_700_000_000_000,
            values: vec![Value::Number(21.5), Value::Number(5.0), Value::Text("ok".into())],
        };
        assert_eq!(
            e.to_json(),
            r#"{"sensor":"t","seq":3,"timestamp":1700000000000,"values":[21.5,5.0,"ok"]}"#
        );
    }
}
