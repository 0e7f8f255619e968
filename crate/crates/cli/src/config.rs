//! Flat `key = value` run configuration.

use std::fs;
use std::path::{Path, PathBuf};

use dadu::network::ModelConfig;
use dadu::train::TrainConfig;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("cannot read config {0}: {1}")]
    Read(PathBuf, #[source] std::io::Error),
}

/// Everything a training run needs. Keys mirror the field names.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Dataset directory (`images/`, `masks/`, optional `manifest.txt`).
    pub data: Option<PathBuf>,
    /// Separate validation directory; when set, folds are not used.
    pub val_data: Option<PathBuf>,
    pub out: PathBuf,
    /// Resize every image to `size x size` on load.
    pub size: Option<usize>,
    /// Train only this fold instead of all of them.
    pub fold: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig {
                checkpoint_every: 1,
                ..TrainConfig::default()
            },
            data: None,
            val_data: None,
            out: PathBuf::from("runs"),
            size: None,
            fold: None,
        }
    }
}

pub const KEYS: &[&str] = &[
    "levels",
    "base_channels",
    "dense_layers",
    "growth_rate",
    "num_classes",
    "input_channels",
    "supervision_paths",
    "attention",
    "epochs",
    "batch_size",
    "lr",
    "fold",
    "folds",
    "eta",
    "seed",
    "checkpoint_every",
    "clip",
    "data",
    "val_data",
    "out",
    "size",
];

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("`{key}`: cannot parse `{v}`"))
}

fn flag(key: &str, v: &str) -> Result<bool, String> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(format!("`{key}`: expected true/false, got `{v}`")),
    }
}

/// `none`/empty means unset.
fn optional<T: std::str::FromStr>(key: &str, v: &str) -> Result<Option<T>, String> {
    if v.is_empty() || v == "none" {
        Ok(None)
    } else {
        num(key, v).map(Some)
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "levels" => {
                m.levels = num(key, v)?;
                m.supervision_paths = m.supervision_paths.min(m.levels.saturating_sub(1));
            }
            "base_channels" => m.base_channels = num(key, v)?,
            "dense_layers" => m.dense_layers_per_block = num(key, v)?,
            "growth_rate" => m.growth_rate = optional(key, v)?,
            "num_classes" => m.num_classes = num(key, v)?,
            "input_channels" => m.input_channels = num(key, v)?,
            "supervision_paths" => m.supervision_paths = num(key, v)?,
            "attention" => m.attention = flag(key, v)?,
            "epochs" => t.epochs = num(key, v)?,
            "batch_size" => t.batch_size = num(key, v)?,
            "lr" => t.lr = num(key, v)?,
            "fold" => {
                t.fold = num(key, v)?;
                self.fold = Some(t.fold);
            }
            "folds" => t.folds = num(key, v)?,
            "eta" => t.eta = num(key, v)?,
            "seed" => t.seed = num(key, v)?,
            "checkpoint_every" => t.checkpoint_every = num(key, v)?,
            "clip" => t.clip = optional(key, v)?,
            "data" => self.data = (!v.is_empty()).then(|| PathBuf::from(v)),
            "val_data" => self.val_data = (!v.is_empty()).then(|| PathBuf::from(v)),
            "out" => self.out = PathBuf::from(v),
            "size" => self.size = optional(key, v)?,
            _ => return Err(format!("unknown key `{key}` (known: {})", KEYS.join(", "))),
        }
        Ok(())
    }

    /// Parse `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        let err = |line: usize, msg: String| ConfigError::Parse {
            path: origin.to_string(),
            line,
            msg,
        };
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(err(i + 1, format!("expected `key = value`, got `{line}`")));
            };
            cfg.set(k.trim(), v.trim()).map_err(|m| err(i + 1, m))?;
        }
        Ok(cfg)
    }

    /// Read a config file; relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| ConfigError::Read(path.to_path_buf(), e))?;
        let mut cfg = Self::parse(&text, &path.display().to_string())?;
        if let Some(base) = path.parent().filter(|b| !b.as_os_str().is_empty()) {
            let rebase = |p: &mut PathBuf| {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            };
            for p in [cfg.data.as_mut(), cfg.val_data.as_mut(), Some(&mut cfg.out)]
                .into_iter()
                .flatten()
            {
                rebase(p);
            }
        }
        Ok(cfg)
    }

    /// Apply `key=value` overrides from the command line.
    pub fn apply(&mut self, overrides: &[String]) -> Result<(), ConfigError> {
        for (i, o) in overrides.iter().enumerate() {
            let err = |msg: String| ConfigError::Parse {
                path: "--set".into(),
                line: i + 1,
                msg,
            };
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| err(format!("expected KEY=VALUE, got `{o}`")))?;
            self.set(k.trim(), v.trim()).map_err(err)?;
        }
        Ok(())
    }
}
