//! Run configuration files.
//!
//! A run file is TOML with optional `[policy]`, `[train]`, `[env]`,
//! `[env.noise]`, `[data]`, `[eval]` and `[bench]` tables. Every key is
//! optional and unknown keys are rejected. See `docs/config.md` for the
//! full grammar.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sta_core::env::{EnvConfig, N_JOINTS};
use sta_core::policy::PolicyConfig;
use sta_core::training::{Regime, TrainConfig};

pub const CONFIG_FORMAT_VERSION: u32 = 1;

/// File name of the resolved-config echo written next to outputs.
pub const RESOLVED_CONFIG: &str = "resolved_config.toml";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{field}: {reason}")]
    Range { field: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_episodes: usize,
    /// Inject perception-noise segments into the demonstrations.
    pub noise: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_episodes: 1000,
            noise: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Past steps visible during evaluation.
    pub history: usize,
    pub regime: Regime,
    pub masked_inference: bool,
    /// Histories swept by `ablate-history`.
    pub histories: Vec<usize>,
    pub resample_probability: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            history: 15,
            regime: Regime::Natural,
            masked_inference: false,
            histories: vec![15, 7, 3, 1],
            resample_probability: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub histories: Vec<usize>,
    /// Timed steps per measurement, after the window has filled.
    pub steps: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            histories: vec![0, 3, 7, 15, 31],
            steps: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub format_version: u32,
    pub policy: PolicyConfig,
    pub train: TrainConfig,
    pub env: EnvConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            format_version: CONFIG_FORMAT_VERSION,
            policy: PolicyConfig::default(),
            train: TrainConfig::default(),
            env: EnvConfig::default(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

fn range(field: impl Into<String>, reason: impl Into<String>) -> ConfigError {
    ConfigError::Range {
        field: field.into(),
        reason: reason.into(),
    }
}

fn core_range(section: &str, e: sta_core::Error) -> ConfigError {
    match e {
        sta_core::Error::Config { field, reason } => range(format!("{section}.{field}"), reason),
        other => range(section, other.to_string()),
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.format_version != CONFIG_FORMAT_VERSION {
            return Err(range(
                "format_version",
                format!("unsupported version {} (expected {CONFIG_FORMAT_VERSION})", self.format_version),
            ));
        }
        self.policy.validate().map_err(|e| core_range("policy", e))?;
        self.train.validate().map_err(|e| core_range("train", e))?;
        self.env.validate().map_err(|e| core_range("env", e))?;
        if self.policy.n_joints != N_JOINTS {
            return Err(range(
                "policy.n_joints",
                format!("must equal the arm's joint count {N_JOINTS}"),
            ));
        }
        let g = self.env.grid_size;
        if self.policy.obs_grid != [1, g, g] {
            return Err(range(
                "policy.obs_grid",
                format!("must be [1, {g}, {g}] to match env.grid_size"),
            ));
        }
        let k = self.policy.k_max;
        if self.eval.history > k {
            return Err(range("eval.history", format!("must be <= policy.k_max = {k}")));
        }
        if let Some(h) = self.eval.histories.iter().find(|&&h| h > k) {
            return Err(range("eval.histories", format!("{h} exceeds policy.k_max = {k}")));
        }
        if !(0.0..=1.0).contains(&self.eval.resample_probability) {
            return Err(range("eval.resample_probability", "must lie in [0, 1]"));
        }
        if self.bench.steps == 0 {
            return Err(range("bench.steps", "must be >= 1"));
        }
        Ok(())
    }

    /// Parses and validates TOML text; `path` only labels errors.
    pub fn from_toml(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
                .unwrap_or(1);
            ConfigError::Parse {
                path: path.to_path_buf(),
                line,
                message: e.message().to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every field, defaults included, as TOML.
    pub fn resolved(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn write_resolved(&self, dir: &Path) -> std::io::Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let path = dir.join(RESOLVED_CONFIG);
        fs::write(&path, self.resolved())?;
        Ok(path)
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    RunConfig::from_toml(&text, path)
}
