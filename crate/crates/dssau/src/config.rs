//! Run configuration: a documented `key = value` text format covering the
//! model, the optimizer and the data. Unknown keys are rejected; omitted
//! keys fall back to the reference defaults (256x256 input, 8x8 regions,
//! channels [96, 192, 384, 768], decoder width 64, λ = 1/8, lr 1e-4).

use crate::net::ModelConfig;
use std::fmt;
use std::path::PathBuf;

#[derive(Debug, Clone, PartialEq)]
pub enum ConfigError {
    UnknownKey(String),
    BadValue { key: String, value: String, expect: &'static str },
    Malformed { line: usize, text: String },
    Io(String),
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::UnknownKey(k) => write!(f, "unknown configuration key '{k}'"),
            Self::BadValue { key, value, expect } => {
                write!(f, "bad value '{value}' for '{key}': expected {expect}")
            }
            Self::Malformed { line, text } => {
                write!(f, "line {line} is not 'key = value': '{text}'")
            }
            Self::Io(msg) => write!(f, "config io: {msg}"),
        }
    }
}

impl std::error::Error for ConfigError {}

/// Full run configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    /// Initial (and constant) learning rate.
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    /// Training/inference resolution; inputs are resized to this extent.
    pub image_size: usize,
    /// Millimetres per pixel for metric reports.
    pub spacing: f64,
    pub train_dir: Option<PathBuf>,
    pub val_dir: Option<PathBuf>,
    /// Validation DSC every this many steps (also at the final step).
    pub val_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            lr: 1e-4,
            steps: 200,
            batch: 4,
            seed: 0,
            image_size: 256,
            spacing: 1.0,
            train_dir: None,
            val_dir: None,
            val_every: 50,
        }
    }
}

fn parse_list<const N: usize>(key: &str, v: &str) -> Result<[usize; N], ConfigError> {
    let parts: Vec<usize> = v
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| ConfigError::BadValue {
            key: key.into(),
            value: v.into(),
            expect: "comma-separated positive integers",
        })?;
    parts.try_into().map_err(|_| ConfigError::BadValue {
        key: key.into(),
        value: v.into(),
        expect: "exactly four comma-separated integers",
    })
}

/// Accepts decimals and simple fractions ("1/8").
fn parse_fraction(key: &str, v: &str) -> Result<f64, ConfigError> {
    let bad = || ConfigError::BadValue {
        key: key.into(),
        value: v.into(),
        expect: "a number or fraction like 1/8",
    };
    if let Some((num, den)) = v.split_once('/') {
        let n: f64 = num.trim().parse().map_err(|_| bad())?;
        let d: f64 = den.trim().parse().map_err(|_| bad())?;
        if d == 0.0 {
            return Err(bad());
        }
        Ok(n / d)
    } else {
        v.trim().parse().map_err(|_| bad())
    }
}

/// Skip set: `none`, `all`, or a comma list drawn from {1/4, 1/8, 1/16}.
fn parse_skips(v: &str) -> Result<[bool; 3], ConfigError> {
    match v.trim() {
        "none" => return Ok([false, false, false]),
        "all" => return Ok([true, true, true]),
        _ => {}
    }
    let mut mask = [false, false, false];
    for part in v.split(',') {
        match part.trim() {
            "1/4" => mask[0] = true,
            "1/8" => mask[1] = true,
            "1/16" => mask[2] = true,
            other => {
                return Err(ConfigError::BadValue {
                    key: "skips".into(),
                    value: other.into(),
                    expect: "none, all, or a list of 1/4, 1/8, 1/16",
                })
            }
        }
    }
    Ok(mask)
}

fn parse_bool(key: &str, v: &str) -> Result<bool, ConfigError> {
    match v.trim() {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(ConfigError::BadValue {
            key: key.into(),
            value: v.into(),
            expect: "true or false",
        }),
    }
}

impl RunConfig {
    /// Parse the text form. Recognized keys:
    ///
    /// model: `channels`, `depths`, `c_d`, `num_classes`, `k1`, `lambda`,
    ///        `skips`, `mff`, `head_dim`, `regions`
    /// optimizer: `lr`, `steps`, `batch`, `seed`
    /// data: `train_dir`, `val_dir`, `image_size`, `spacing`
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ConfigError::Malformed {
                line: ln + 1,
                text: raw.into(),
            })?;
            let (key, v) = (key.trim(), value.trim());
            let num = |expect: &'static str| ConfigError::BadValue {
                key: key.into(),
                value: v.into(),
                expect,
            };
            match key {
                "channels" => cfg.model.channels = parse_list::<4>(key, v)?,
                "depths" => cfg.model.depths = parse_list::<4>(key, v)?,
                "c_d" => cfg.model.decoder_width = v.parse().map_err(|_| num("an integer"))?,
                "num_classes" => cfg.model.num_classes = v.parse().map_err(|_| num("an integer"))?,
                "k1" => cfg.model.k1_schedule = parse_list::<4>(key, v)?,
                "lambda" => cfg.model.lambda = parse_fraction(key, v)?,
                "skips" => cfg.model.skip_mask = parse_skips(v)?,
                "mff" => cfg.model.mff_enabled = parse_bool(key, v)?,
                "head_dim" => cfg.model.head_dim = v.parse().map_err(|_| num("an integer"))?,
                "regions" => cfg.model.regions = v.parse().map_err(|_| num("an integer"))?,
                "lr" => cfg.lr = v.parse().map_err(|_| num("a float"))?,
                "steps" => cfg.steps = v.parse().map_err(|_| num("an integer"))?,
                "batch" => cfg.batch = v.parse().map_err(|_| num("an integer"))?,
                "seed" => cfg.seed = v.parse().map_err(|_| num("an integer"))?,
                "image_size" => cfg.image_size = v.parse().map_err(|_| num("an integer"))?,
                "spacing" => cfg.spacing = v.parse().map_err(|_| num("a float"))?,
                "train_dir" => cfg.train_dir = Some(PathBuf::from(v)),
                "val_dir" => cfg.val_dir = Some(PathBuf::from(v)),
                "val_every" => cfg.val_every = v.parse().map_err(|_| num("an integer"))?,
                other => return Err(ConfigError::UnknownKey(other.into())),
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(e.to_string()))?;
        Self::parse(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_reference_setup() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg.lr, 1e-4);
        assert_eq!(cfg.image_size, 256);
        assert_eq!(cfg.model.channels, [96, 192, 384, 768]);
        assert_eq!(cfg.model.depths, [2, 2, 8, 2]);
        assert_eq!(cfg.model.decoder_width, 64);
        assert_eq!(cfg.model.lambda, 0.125);
        assert_eq!(cfg.model.regions, 8);
        assert_eq!(cfg.model.k1_schedule, [1, 4, 16, 64]);
        assert_eq!(cfg.model.skip_mask, [true, true, true]);
        assert!(cfg.model.mff_enabled);
    }

    #[test]
    fn parses_a_full_file_with_comments() {
        let text = "\
# small run
channels = 8, 16, 32, 64
depths = 1,1,1,1
c_d = 8
k1 = 1,4,16,64
lambda = 1/4          # fraction form
skips = 1/4, 1/16
mff = false
head_dim = 4
lr = 0.001
steps = 10
batch = 2
seed = 42
image_size = 64
spacing = 0.5
train_dir = /tmp/data/train
";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.model.channels, [8, 16, 32, 64]);
        assert_eq!(cfg.model.lambda, 0.25);
        assert_eq!(cfg.model.skip_mask, [true, false, true]);
        assert!(!cfg.model.mff_enabled);
        assert_eq!(cfg.lr, 0.001);
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.spacing, 0.5);
        assert_eq!(cfg.train_dir.as_deref(), Some(std::path::Path::new("/tmp/data/train")));
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert_eq!(
            RunConfig::parse("learning_rate = 0.1"),
            Err(ConfigError::UnknownKey("learning_rate".into()))
        );
        assert!(matches!(
            RunConfig::parse("lambda = fast"),
            Err(ConfigError::BadValue { .. })
        ));
        assert!(matches!(
            RunConfig::parse("just some words"),
            Err(ConfigError::Malformed { line: 1, .. })
        ));
        assert!(matches!(
            RunConfig::parse("skips = 1/2"),
            Err(ConfigError::BadValue { .. })
        ));
    }
}
