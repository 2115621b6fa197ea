//! Structured-text files: virtual sensor configs, plugin descriptors, node
//! configs and experiment specs all use TOML with the field names of the
//! corresponding types.
//!
//! A virtual sensor:
//!
//! ```toml
//! name = "noise"
//! history_size = 60
//! sampling_interval = 1000
//!
//! [source]
//! plugin = "sine_audio"
//! params = { amplitude = 0.5, freq_hz = 440 }
//!
//! [[processors]]
//! name = "rms_db"
//!
//! [[output_schema]]
//! name = "level"
//! kind = "numeric"
//! unit = "dB"
//! ```

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use crate::model::{PluginDescriptor, VirtualSensorConfig};

#[derive(Debug, Error)]
pub enum TextError {
    #[error("parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("encode error: {0}")]
    Encode(#[from] toml::ser::Error),
}

pub fn parse<T: DeserializeOwned>(s: &str) -> Result<T, TextError> {
    Ok(toml::from_str(s)?)
}

pub fn encode<T: Serialize>(value: &T) -> Result<String, TextError> {
    Ok(toml::to_string(value)?)
}

pub fn parse_sensor_config(s: &str) -> Result<VirtualSensorConfig, TextError> {
    parse(s)
}

pub fn encode_sensor_config(cfg: &VirtualSensorConfig) -> Result<String, TextError> {
    encode(cfg)
}

pub fn parse_descriptor(s: &str) -> Result<PluginDescriptor, TextError> {
    parse(s)
}

pub fn encode_descriptor(d: &PluginDescriptor) -> Result<String, TextError> {
    encode(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FieldKind, ParamValue};

    #[test]
    fn module_example_parses() {
        let doc = r#"
name = "noise"
history_size = 60
sampling_interval = 1000

[source]
plugin = "sine_audio"
params = { amplitude = 0.5, freq_hz = 440 }

[[processors]]
name = "rms_db"

[[output_schema]]
name = "level"
kind = "numeric"
unit = "dB"
"#;
        let cfg = parse_sensor_config(doc).unwrap();
        assert_eq!(cfg.history_size, 60);
        assert_eq!(cfg.source.params["freq_hz"], ParamValue::Int(440));
        assert_eq!(cfg.source.params["amplitude"], ParamValue::Float(0.5));
        assert_eq!(cfg.output_schema[0].kind, FieldKind::Numeric);
        let again = parse_sensor_config(&encode_sensor_config(&cfg).unwrap()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn sampling_interval_defaults_to_one_second() {
        let doc = r#"
name = "t"
history_size = 5
source = { plugin = "constant", params = { value = 1.0 } }
output_schema = [{ name = "value", kind = "numeric" }]
"#;
        let cfg = parse_sensor_config(doc).unwrap();
        assert_eq!(cfg.sampling_interval, 1000);
        assert!(cfg.processors.is_empty());
        assert_eq!(cfg.output_schema[0].unit, "");
    }
}
