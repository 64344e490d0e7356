//! Plain-text `key = value` configuration files.
//!
//! Lines are `key = value`; `#` starts a comment; blank lines are
//! ignored. Unknown keys are rejected so typos fail loudly before any
//! I/O happens. See the README for the full key list.

use crate::memory::UpdateStrategy;
use crate::train::TrainConfig;
use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub enum ConfigError {
    Io(String),
    Parse { line: usize, text: String },
    UnknownKey(String),
    BadValue { key: String, value: String, expected: &'static str },
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Io(m) => write!(f, "config io: {m}"),
            ConfigError::Parse { line, text } => {
                write!(f, "config line {line}: expected 'key = value', got '{text}'")
            }
            ConfigError::UnknownKey(k) => write!(f, "unknown config key '{k}'"),
            ConfigError::BadValue { key, value, expected } => {
                write!(f, "config key '{key}': '{value}' is not {expected}")
            }
        }
    }
}

impl std::error::Error for ConfigError {}

pub fn parse_config_text(text: &str) -> Result<BTreeMap<String, String>, ConfigError> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or(ConfigError::Parse { line: i + 1, text: raw.to_string() })?;
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

pub fn parse_config_file(path: &Path) -> Result<BTreeMap<String, String>, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
    parse_config_text(&text)
}

fn parse_num<T: std::str::FromStr>(
    key: &str,
    value: &str,
    expected: &'static str,
) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        expected,
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" | "on" | "1" | "yes" => Ok(true),
        "false" | "off" | "0" | "no" => Ok(false),
        _ => Err(ConfigError::BadValue {
            key: key.to_string(),
            value: value.to_string(),
            expected: "a boolean (on/off)",
        }),
    }
}

/// Overlay config-file entries onto a base [`TrainConfig`].
pub fn apply_to_train_config(
    map: &BTreeMap<String, String>,
    mut config: TrainConfig,
) -> Result<TrainConfig, ConfigError> {
    for (key, value) in map {
        match key.as_str() {
            "steps" => config.steps = parse_num(key, value, "an integer")?,
            "batch" => config.batch = parse_num(key, value, "an integer")?,
            "resolution" => config.resolution = parse_num(key, value, "an integer")?,
            "frames" => config.frames = parse_num(key, value, "an integer")?,
            "c_k" => config.c_k = parse_num(key, value, "an integer")?,
            "c_v" => config.c_v = parse_num(key, value, "an integer")?,
            "hidden" => config.hidden = parse_num(key, value, "an integer")?,
            "lr" => config.lr = parse_num(key, value, "a number")?,
            "weight_decay" => config.weight_decay = parse_num(key, value, "a number")?,
            "clip" => config.clip = parse_num(key, value, "a number")?,
            "strategy" => {
                config.strategy = value.parse::<UpdateStrategy>().map_err(|_| {
                    ConfigError::BadValue {
                        key: key.clone(),
                        value: value.clone(),
                        expected: "baseline|sanity|noalpha|nobeta|gdr",
                    }
                })?
            }
            "kpff" => config.kpff = parse_bool(key, value)?,
            "normalize" => config.normalize = parse_bool(key, value)?,
            "augment" => config.augment = parse_bool(key, value)?,
            "speckle" => config.speckle = parse_num(key, value, "a number")?,
            "drift" => config.drift = parse_num(key, value, "a number")?,
            "amp" => config.amp = parse_num(key, value, "a number")?,
            "eval_every" => config.eval_every = parse_num(key, value, "an integer")?,
            "eval_sequences" => config.eval_sequences = parse_num(key, value, "an integer")?,
            "checkpoint" => config.checkpoint = Some(value.into()),
            _ => return Err(ConfigError::UnknownKey(key.clone())),
        }
    }
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_blanks() {
        let text = "\n# a comment\nsteps = 12\nlr=0.005 # trailing\n\nstrategy = nobeta\n";
        let map = parse_config_text(text).unwrap();
        assert_eq!(map.get("steps").unwrap(), "12");
        assert_eq!(map.get("lr").unwrap(), "0.005");
        let cfg = apply_to_train_config(&map, TrainConfig::default()).unwrap();
        assert_eq!(cfg.steps, 12);
        assert_eq!(cfg.lr, 0.005);
        assert_eq!(cfg.strategy, UpdateStrategy::NoBeta);
    }

    #[test]
    fn unknown_key_rejected() {
        let map = parse_config_text("stepz = 5").unwrap();
        assert!(matches!(
            apply_to_train_config(&map, TrainConfig::default()),
            Err(ConfigError::UnknownKey(_))
        ));
    }

    #[test]
    fn bad_value_rejected() {
        let map = parse_config_text("steps = many").unwrap();
        assert!(matches!(
            apply_to_train_config(&map, TrainConfig::default()),
            Err(ConfigError::BadValue { .. })
        ));
    }

    #[test]
    fn malformed_line_rejected() {
        assert!(matches!(
            parse_config_text("steps"),
            Err(ConfigError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn boolean_forms() {
        for (text, want) in [("kpff = on", true), ("kpff = off", false), ("kpff = 1", true)] {
            let map = parse_config_text(text).unwrap();
            let cfg = apply_to_train_config(&map, TrainConfig::default()).unwrap();
            assert_eq!(cfg.kpff, want);
        }
    }
}
