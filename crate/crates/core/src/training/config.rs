//! `key = value` training configuration.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::losses::LossWeights;
use crate::network::{NetConfig, DEFAULT_ENCODER_SEED, INPUT_MULTIPLE, MIN_INPUT_EXTENT};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: key {key:?} given twice")]
    DuplicateKey { line: usize, key: String },
    #[error("line {line}: invalid value {value:?} for {key}")]
    BadValue {
        line: usize,
        key: String,
        value: String,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Content/style pairs per step.
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    pub image_size: usize,
    pub feat_channels: usize,
    pub attn_channels: usize,
    pub encoder_seed: u64,
    pub weights: LossWeights,
    /// Images per synthetic pool (content and style each).
    pub pool_size: usize,
    /// Train on the first `batch_size` pool pairs every step, uncropped.
    pub fixed_batch: bool,
    pub checkpoint_every: u64,
    pub checkpoint_path: Option<PathBuf>,
    pub report_path: Option<PathBuf>,
    pub resume_from: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 2,
            steps: 500,
            seed: 7,
            image_size: 32,
            feat_channels: 32,
            attn_channels: 16,
            encoder_seed: DEFAULT_ENCODER_SEED,
            weights: LossWeights::default(),
            pool_size: 16,
            fixed_batch: false,
            checkpoint_every: 100,
            checkpoint_path: None,
            report_path: None,
            resume_from: None,
        }
    }
}

const KEYS: &[&str] = &[
    "learning_rate",
    "batch_size",
    "steps",
    "seed",
    "image_size",
    "feat_channels",
    "attn_channels",
    "encoder_seed",
    "lambda_c",
    "lambda_s",
    "lambda_identity1",
    "lambda_identity2",
    "style_layers",
    "pool_size",
    "fixed_batch",
    "checkpoint_every",
    "checkpoint_path",
    "report_path",
    "resume_from",
];

fn parse<V: FromStr>(line: usize, key: &str, value: &str) -> Result<V, ConfigError> {
    value.parse().map_err(|_| ConfigError::BadValue {
        line,
        key: key.to_owned(),
        value: value.to_owned(),
    })
}

impl TrainConfig {
    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            feat_channels: self.feat_channels,
            attn_channels: self.attn_channels,
            encoder_seed: self.encoder_seed,
        }
    }

    /// Parses config text; relative paths are resolved against `base`.
    pub fn parse(text: &str, base: Option<&Path>) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut seen = HashSet::new();
        let mut attn_given = false;
        let path = |v: &str| match base {
            Some(b) if Path::new(v).is_relative() => b.join(v),
            _ => PathBuf::from(v),
        };
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(ConfigError::Syntax {
                    line,
                    text: raw.to_owned(),
                });
            };
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(ConfigError::UnknownKey {
                    line,
                    key: key.to_owned(),
                });
            }
            if !seen.insert(key.to_owned()) {
                return Err(ConfigError::DuplicateKey {
                    line,
                    key: key.to_owned(),
                });
            }
            match key {
                "learning_rate" => cfg.learning_rate = parse(line, key, value)?,
                "batch_size" => cfg.batch_size = parse(line, key, value)?,
                "steps" => cfg.steps = parse(line, key, value)?,
                "seed" => cfg.seed = parse(line, key, value)?,
                "image_size" => cfg.image_size = parse(line, key, value)?,
                "feat_channels" => cfg.feat_channels = parse(line, key, value)?,
                "attn_channels" => {
                    cfg.attn_channels = parse(line, key, value)?;
                    attn_given = true;
                }
                "encoder_seed" => cfg.encoder_seed = parse(line, key, value)?,
                "lambda_c" => cfg.weights.lambda_c = parse(line, key, value)?,
                "lambda_s" => cfg.weights.lambda_s = parse(line, key, value)?,
                "lambda_identity1" => cfg.weights.lambda_identity1 = parse(line, key, value)?,
                "lambda_identity2" => cfg.weights.lambda_identity2 = parse(line, key, value)?,
                "style_layers" => {
                    cfg.weights.style_layers = value
                        .split(',')
                        .map(|s| parse(line, key, s.trim()))
                        .collect::<Result<_, _>>()?;
                }
                "pool_size" => cfg.pool_size = parse(line, key, value)?,
                "fixed_batch" => cfg.fixed_batch = parse(line, key, value)?,
                "checkpoint_every" => cfg.checkpoint_every = parse(line, key, value)?,
                "checkpoint_path" => cfg.checkpoint_path = Some(path(value)),
                "report_path" => cfg.report_path = Some(path(value)),
                "resume_from" => cfg.resume_from = Some(path(value)),
                _ => unreachable!("key list checked"),
            }
        }
        if !attn_given {
            cfg.attn_channels = NetConfig::with_feat(cfg.feat_channels).attn_channels;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_owned(),
            source,
        })?;
        Self::parse(&text, path.parent())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            ));
        }
        if !self.image_size.is_multiple_of(INPUT_MULTIPLE) || self.image_size < MIN_INPUT_EXTENT {
            return bad(format!(
                "image_size must be a multiple of {INPUT_MULTIPLE} and at least {MIN_INPUT_EXTENT}, got {}",
                self.image_size
            ));
        }
        if self.batch_size == 0 || self.feat_channels == 0 || self.attn_channels == 0 {
            return bad("batch_size, feat_channels and attn_channels must be positive".into());
        }
        if self.pool_size == 0 || (self.fixed_batch && self.pool_size < self.batch_size) {
            return bad(format!(
                "pool_size {} too small for batch_size {}",
                self.pool_size, self.batch_size
            ));
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be positive".into());
        }
        self.weights
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_desk_settings() {
        let c = TrainConfig::parse("", None).unwrap();
        assert_eq!(c.learning_rate, 1e-4);
        assert_eq!(c.batch_size, 2);
        assert_eq!(c.image_size, 32);
        assert_eq!(c.attn_channels, 16);
        assert_eq!(c.weights, LossWeights::default());
    }

    #[test]
    fn parses_keys_comments_and_paths() {
        let text = "\
# smoke run
steps = 20   # short
learning_rate=0.001
feat_channels = 8
style_layers = 0, 2,4
fixed_batch = true
report_path = out/report.csv
checkpoint_path = /tmp/x.sanc
";
        let c = TrainConfig::parse(text, Some(Path::new("/work"))).unwrap();
        assert_eq!(c.steps, 20);
        assert_eq!(c.learning_rate, 0.001);
        assert_eq!(c.attn_channels, 4);
        assert_eq!(c.weights.style_layers, vec![0, 2, 4]);
        assert!(c.fixed_batch);
        assert_eq!(c.report_path, Some(PathBuf::from("/work/out/report.csv")));
        assert_eq!(c.checkpoint_path, Some(PathBuf::from("/tmp/x.sanc")));
    }

    #[test]
    fn rejects_unknown_duplicate_and_malformed() {
        assert!(matches!(
            TrainConfig::parse("steps = 1\nmomentum = 0.9", None),
            Err(ConfigError::UnknownKey { line: 2, .. })
        ));
        assert!(matches!(
            TrainConfig::parse("steps = 1\nsteps = 2", None),
            Err(ConfigError::DuplicateKey { line: 2, .. })
        ));
        assert!(matches!(
            TrainConfig::parse("steps 3", None),
            Err(ConfigError::Syntax { line: 1, .. })
        ));
        assert!(matches!(
            TrainConfig::parse("steps = many", None),
            Err(ConfigError::BadValue { .. })
        ));
    }

    #[test]
    fn rejects_invalid_values() {
        for text in [
            "learning_rate = 0",
            "learning_rate = -1e-3",
            "image_size = 40",
            "image_size = 16",
            "batch_size = 0",
            "lambda_s = -3",
            "style_layers = 5",
            "checkpoint_every = 0",
        ] {
            assert!(
                matches!(TrainConfig::parse(text, None), Err(ConfigError::Invalid(_))),
                "{text}"
            );
        }
    }
}
