//! Flat `key = value` run configuration files.
//!
//! Unknown keys are rejected. Every model key has a full-size default;
//! `desk_scale = true` switches the baseline to the desk preset before the
//! file's explicit keys are applied, so partial files stay readable.

use std::path::{Path, PathBuf};

use crate::loss::MarginSchedule;
use crate::model::{ModelConfig, RoutingScheme};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("unknown config key '{0}'")]
    UnknownKey(String),
    #[error("invalid value '{value}' for key '{key}'")]
    BadValue { key: String, value: String },
    #[error("malformed line {line}: '{text}' (expected key = value)")]
    BadLine { line: usize, text: String },
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// How the dataset is split between train and test.
#[derive(Debug, Clone, PartialEq)]
pub enum SplitConfig {
    /// Explicit id list files relative to the dataset root.
    Lists { train: String, test: String },
    /// Seeded stratified split by fraction.
    Fraction { train_fraction: f64 },
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig::Lists {
            train: "train.txt".to_string(),
            test: "test.txt".to_string(),
        }
    }
}

/// Everything a run needs: the model configuration plus dataset, output,
/// and training-loop options.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data_root: PathBuf,
    pub output_dir: PathBuf,
    pub epochs: usize,
    pub peekaboo: bool,
    pub augment: bool,
    pub val_fraction: f64,
    pub split: SplitConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::paper(),
            data_root: PathBuf::from("data"),
            output_dir: PathBuf::from("out"),
            epochs: 30,
            peekaboo: true,
            augment: true,
            val_fraction: 0.1,
            split: SplitConfig::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(ConfigError::BadValue {
            key: key.to_string(),
            value: value.to_string(),
        }),
    }
}

/// Apply one model key. Returns false when the key is not a model key.
pub fn apply_model_key(
    cfg: &mut ModelConfig,
    key: &str,
    value: &str,
) -> Result<bool, ConfigError> {
    match key {
        "input_size" => cfg.input_size = parse(key, value)?,
        "backbone_channels" => cfg.backbone_channels = parse(key, value)?,
        "projection_channels" => cfg.projection_channels = parse(key, value)?,
        "primary_heads" => cfg.primary_heads = parse(key, value)?,
        "conv1_heads" => cfg.conv1_heads = parse(key, value)?,
        "conv2_heads" => cfg.conv2_heads = parse(key, value)?,
        "pose_dim" => cfg.pose_dim = parse(key, value)?,
        "kernel_size" => cfg.kernel_size = parse(key, value)?,
        "stride" => cfg.stride = parse(key, value)?,
        "routing_iters" => cfg.routing_iters = parse(key, value)?,
        "classes" => cfg.classes = parse(key, value)?,
        "crop_threshold" => cfg.crop_threshold = parse(key, value)?,
        "drop_threshold" => cfg.drop_threshold = parse(key, value)?,
        "margin_initial" => cfg.margin.initial = parse(key, value)?,
        "margin_step" => cfg.margin.step = parse(key, value)?,
        "margin_period" => cfg.margin.period = parse(key, value)?,
        "margin_cap" => cfg.margin.cap = parse(key, value)?,
        "learning_rate" => cfg.learning_rate = parse(key, value)?,
        "beta1" => cfg.beta1 = parse(key, value)?,
        "beta2" => cfg.beta2 = parse(key, value)?,
        "batch_size" => cfg.batch_size = parse(key, value)?,
        "seed" => cfg.seed = parse(key, value)?,
        "desk_scale" => cfg.desk_scale = parse_bool(key, value)?,
        "routing" => {
            cfg.routing = RoutingScheme::parse(value).ok_or_else(|| ConfigError::BadValue {
                key: key.to_string(),
                value: value.to_string(),
            })?
        }
        "stop_gradient_routing" => cfg.stop_gradient_routing = parse_bool(key, value)?,
        "coordinate_addition" => cfg.coordinate_addition = parse_bool(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

/// Every model key as (key, value) pairs in canonical order.
pub fn model_config_pairs(cfg: &ModelConfig) -> Vec<(String, String)> {
    let MarginSchedule {
        initial,
        step,
        period,
        cap,
    } = cfg.margin;
    vec![
        ("input_size", cfg.input_size.to_string()),
        ("backbone_channels", cfg.backbone_channels.to_string()),
        ("projection_channels", cfg.projection_channels.to_string()),
        ("primary_heads", cfg.primary_heads.to_string()),
        ("conv1_heads", cfg.conv1_heads.to_string()),
        ("conv2_heads", cfg.conv2_heads.to_string()),
        ("pose_dim", cfg.pose_dim.to_string()),
        ("kernel_size", cfg.kernel_size.to_string()),
        ("stride", cfg.stride.to_string()),
        ("routing_iters", cfg.routing_iters.to_string()),
        ("classes", cfg.classes.to_string()),
        ("crop_threshold", cfg.crop_threshold.to_string()),
        ("drop_threshold", cfg.drop_threshold.to_string()),
        ("margin_initial", initial.to_string()),
        ("margin_step", step.to_string()),
        ("margin_period", period.to_string()),
        ("margin_cap", cap.to_string()),
        ("learning_rate", cfg.learning_rate.to_string()),
        ("beta1", cfg.beta1.to_string()),
        ("beta2", cfg.beta2.to_string()),
        ("batch_size", cfg.batch_size.to_string()),
        ("seed", cfg.seed.to_string()),
        ("desk_scale", cfg.desk_scale.to_string()),
        ("routing", cfg.routing.as_str().to_string()),
        (
            "stop_gradient_routing",
            cfg.stop_gradient_routing.to_string(),
        ),
        ("coordinate_addition", cfg.coordinate_addition.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

fn split_pairs(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut pairs = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let Some(eq) = line.find('=') else {
            return Err(ConfigError::BadLine {
                line: lineno + 1,
                text: raw.to_string(),
            });
        };
        let key = line[..eq].trim().to_string();
        let value = line[eq + 1..].trim().to_string();
        if key.is_empty() {
            return Err(ConfigError::BadLine {
                line: lineno + 1,
                text: raw.to_string(),
            });
        }
        pairs.push((key, value));
    }
    Ok(pairs)
}

impl RunConfig {
    pub fn parse_str(text: &str) -> Result<RunConfig, ConfigError> {
        let pairs = split_pairs(text)?;
        // The desk flag switches the baseline before explicit keys apply.
        let desk = pairs
            .iter()
            .rev()
            .find(|(k, _)| k == "desk_scale")
            .map(|(_, v)| parse_bool("desk_scale", v))
            .transpose()?
            .unwrap_or(false);
        let mut cfg = RunConfig {
            model: if desk {
                ModelConfig::desk()
            } else {
                ModelConfig::paper()
            },
            ..RunConfig::default()
        };
        let mut train_list: Option<String> = None;
        let mut test_list: Option<String> = None;
        let mut train_fraction: Option<f64> = None;
        for (key, value) in &pairs {
            if apply_model_key(&mut cfg.model, key, value)? {
                continue;
            }
            match key.as_str() {
                "data_root" => cfg.data_root = PathBuf::from(value),
                "output_dir" => cfg.output_dir = PathBuf::from(value),
                "epochs" => cfg.epochs = parse(key, value)?,
                "peekaboo" => cfg.peekaboo = parse_bool(key, value)?,
                "augment" => cfg.augment = parse_bool(key, value)?,
                "val_fraction" => cfg.val_fraction = parse(key, value)?,
                "train_list" => train_list = Some(value.clone()),
                "test_list" => test_list = Some(value.clone()),
                "train_fraction" => train_fraction = Some(parse(key, value)?),
                _ => return Err(ConfigError::UnknownKey(key.clone())),
            }
        }
        cfg.split = match (train_fraction, train_list, test_list) {
            (Some(f), None, None) => SplitConfig::Fraction { train_fraction: f },
            (None, t, s) => {
                let d = SplitConfig::default();
                let (dt, ds) = match d {
                    SplitConfig::Lists { train, test } => (train, test),
                    _ => unreachable!(),
                };
                SplitConfig::Lists {
                    train: t.unwrap_or(dt),
                    test: s.unwrap_or(ds),
                }
            }
            _ => {
                return Err(ConfigError::BadValue {
                    key: "train_fraction".to_string(),
                    value: "cannot combine list files with a fraction split".to_string(),
                })
            }
        };
        Ok(cfg)
    }

    pub fn parse_file(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse_str(&text)
    }

    /// Serialize every key (canonical order, parseable back).
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in model_config_pairs(&self.model) {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out.push_str(&format!("data_root = {}\n", self.data_root.display()));
        out.push_str(&format!("output_dir = {}\n", self.output_dir.display()));
        out.push_str(&format!("epochs = {}\n", self.epochs));
        out.push_str(&format!("peekaboo = {}\n", self.peekaboo));
        out.push_str(&format!("augment = {}\n", self.augment));
        out.push_str(&format!("val_fraction = {}\n", self.val_fraction));
        match &self.split {
            SplitConfig::Lists { train, test } => {
                out.push_str(&format!("train_list = {train}\n"));
                out.push_str(&format!("test_list = {test}\n"));
            }
            SplitConfig::Fraction { train_fraction } => {
                out.push_str(&format!("train_fraction = {train_fraction}\n"));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_full_size_values() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.model.input_size, 448);
        assert_eq!(cfg.model.primary_heads, 32);
        assert!((cfg.model.crop_threshold - 0.5).abs() < 1e-15);
        assert!((cfg.model.drop_threshold - 0.3).abs() < 1e-15);
        assert!((cfg.model.learning_rate - 1e-4).abs() < 1e-20);
        assert!((cfg.model.beta1 - 0.5).abs() < 1e-15);
        assert!((cfg.model.beta2 - 0.999).abs() < 1e-15);
        assert_eq!(cfg.model.batch_size, 16);
        assert_eq!(cfg.model.routing_iters, 3);
    }

    #[test]
    fn desk_preset_applies_before_overrides() {
        let cfg = RunConfig::parse_str("desk_scale = true\nseed = 9\n").unwrap();
        assert_eq!(cfg.model.input_size, 96);
        assert_eq!(cfg.model.primary_heads, 8);
        assert_eq!(cfg.model.seed, 9);
        // desk flag position in the file does not matter
        let cfg2 = RunConfig::parse_str("seed = 9\ndesk_scale = true\n").unwrap();
        assert_eq!(cfg, cfg2);
    }

    #[test]
    fn unknown_key_rejected() {
        match RunConfig::parse_str("not_a_key = 3\n") {
            Err(ConfigError::UnknownKey(k)) => assert_eq!(k, "not_a_key"),
            other => panic!("expected unknown key, got {other:?}"),
        }
    }

    #[test]
    fn round_trip_through_text() {
        let mut cfg = RunConfig::default();
        cfg.model = ModelConfig::desk();
        cfg.model.seed = 1234;
        cfg.epochs = 7;
        cfg.peekaboo = false;
        cfg.split = SplitConfig::Fraction {
            train_fraction: 0.8,
        };
        let parsed = RunConfig::parse_str(&cfg.to_text()).unwrap();
        assert_eq!(cfg, parsed);
    }

    #[test]
    fn comments_and_blanks_ignored() {
        let cfg = RunConfig::parse_str("# full config\n\nepochs = 3 # short run\n").unwrap();
        assert_eq!(cfg.epochs, 3);
    }

    #[test]
    fn malformed_line_reported_with_number() {
        match RunConfig::parse_str("epochs = 1\nbogus line\n") {
            Err(ConfigError::BadLine { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected bad line, got {other:?}"),
        }
    }

    #[test]
    fn routing_values() {
        let cfg = RunConfig::parse_str("routing = baseline\n").unwrap();
        assert_eq!(cfg.model.routing, RoutingScheme::Baseline);
        assert!(RunConfig::parse_str("routing = middle\n").is_err());
    }
}
