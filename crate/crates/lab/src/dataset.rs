//! Demonstration datasets on disk.
//!
//! A dataset directory holds three files:
//!
//! - `episodes.jsonl`: one JSON record per episode, steps without grids
//! - `obs.bin`: every observation grid in step order, little-endian `f64`
//! - `manifest.json`: version, seed, environment, counts and file digests

use std::fs;
use std::io::{self, BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use sta_core::env::{generate_episodes, EnvConfig, Episode, NoiseSegment, StepRecord, N_JOINTS};
use sta_core::Tensor;

pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const EPISODES_FILE: &str = "episodes.jsonl";
pub const OBS_FILE: &str = "obs.bin";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("{path}: unsupported dataset format_version {found} (expected {expected})")]
    Version {
        path: PathBuf,
        found: u32,
        expected: u32,
    },
    #[error(transparent)]
    Generation(#[from] sta_core::Error),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn corrupt(path: &Path, reason: impl Into<String>) -> DatasetError {
    DatasetError::Corrupt {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuccessStats {
    /// Expert rollouts attempted, failures included.
    pub attempted: usize,
    pub kept: usize,
    pub discarded: usize,
    pub expert_success_rate: f64,
    pub with_noise: usize,
    pub occluded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    pub n_episodes: usize,
    pub noise_on: bool,
    pub env: EnvConfig,
    /// SHA-256 of the environment configuration as JSON.
    pub config_hash: String,
    pub obs_shape: [usize; 3],
    pub total_steps: usize,
    pub stats: SuccessStats,
    pub episodes_sha256: String,
    pub obs_sha256: String,
}

impl Manifest {
    /// Digest identifying the dataset contents.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(format!("{}:{}", self.episodes_sha256, self.obs_sha256)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub episodes: Vec<Episode>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StepLine {
    proprio: [f64; N_JOINTS],
    expert_action: [f64; N_JOINTS],
    noise_active: bool,
    success_so_far: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EpisodeLine {
    index: usize,
    seed: u64,
    success: bool,
    occluded: bool,
    noise_segments: Vec<NoiseSegment>,
    /// Index of the episode's first grid in `obs.bin`.
    first_obs: usize,
    steps: Vec<StepLine>,
}

pub fn config_hash(env: &EnvConfig) -> String {
    hex::encode(Sha256::digest(serde_json::to_vec(env).expect("env config serializes")))
}

/// Rolls the expert and writes the dataset to `dir`.
pub fn generate_dataset(
    env: &EnvConfig,
    n_episodes: usize,
    noise_on: bool,
    seed: u64,
    dir: &Path,
) -> Result<Dataset, DatasetError> {
    let (episodes, stats) = generate_episodes(env, n_episodes, noise_on, seed)?;
    let stats = SuccessStats {
        attempted: stats.attempted,
        kept: stats.kept,
        discarded: stats.attempted - stats.kept,
        expert_success_rate: if stats.attempted == 0 {
            1.0
        } else {
            stats.kept as f64 / stats.attempted as f64
        },
        with_noise: stats.with_noise,
        occluded: stats.occluded,
    };
    write_dataset(dir, env, seed, noise_on, stats, episodes)
}

fn encode(episodes: &[Episode]) -> (Vec<u8>, Vec<u8>) {
    let mut lines = Vec::new();
    let mut obs = Vec::new();
    let mut first_obs = 0;
    for (index, ep) in episodes.iter().enumerate() {
        let line = EpisodeLine {
            index,
            seed: ep.seed,
            success: ep.success,
            occluded: ep.occluded,
            noise_segments: ep.noise_segments.clone(),
            first_obs,
            steps: ep
                .steps
                .iter()
                .map(|s| StepLine {
                    proprio: s.proprio,
                    expert_action: s.expert_action,
                    noise_active: s.noise_active,
                    success_so_far: s.success_so_far,
                })
                .collect(),
        };
        serde_json::to_writer(&mut lines, &line).expect("episode serializes");
        lines.push(b'\n');
        for s in &ep.steps {
            for v in s.obs_grid.data() {
                obs.extend_from_slice(&v.to_le_bytes());
            }
        }
        first_obs += ep.steps.len();
    }
    (lines, obs)
}

pub fn write_dataset(
    dir: &Path,
    env: &EnvConfig,
    seed: u64,
    noise_on: bool,
    stats: SuccessStats,
    episodes: Vec<Episode>,
) -> Result<Dataset, DatasetError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let (lines, obs) = encode(&episodes);
    let g = env.grid_size;
    let manifest = Manifest {
        format_version: DATASET_FORMAT_VERSION,
        seed,
        n_episodes: episodes.len(),
        noise_on,
        env: env.clone(),
        config_hash: config_hash(env),
        obs_shape: [1, g, g],
        total_steps: episodes.iter().map(|e| e.steps.len()).sum(),
        stats,
        episodes_sha256: hex::encode(Sha256::digest(&lines)),
        obs_sha256: hex::encode(Sha256::digest(&obs)),
    };
    let write = |name: &str, bytes: &[u8]| {
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(io_err(&path))
    };
    write(EPISODES_FILE, &lines)?;
    write(OBS_FILE, &obs)?;
    let mut m = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    m.push(b'\n');
    write(MANIFEST_FILE, &m)?;
    Ok(Dataset { manifest, episodes })
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, DatasetError> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    let value: serde_json::Value =
        serde_json::from_slice(&bytes).map_err(|e| corrupt(&path, e.to_string()))?;
    let found = value
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| corrupt(&path, "missing format_version"))?;
    if found != u64::from(DATASET_FORMAT_VERSION) {
        return Err(DatasetError::Version {
            path,
            found: found as u32,
            expected: DATASET_FORMAT_VERSION,
        });
    }
    serde_json::from_value(value).map_err(|e| corrupt(&path, e.to_string()))
}

pub fn read_dataset(dir: &Path) -> Result<Dataset, DatasetError> {
    let manifest = read_manifest(dir)?;
    let obs_path = dir.join(OBS_FILE);
    let obs = fs::read(&obs_path).map_err(io_err(&obs_path))?;
    let cells: usize = manifest.obs_shape.iter().product();
    let grid_bytes = cells * 8;
    if obs.len() != manifest.total_steps * grid_bytes {
        return Err(corrupt(
            &obs_path,
            format!(
                "expected {} bytes for {} grids, found {}",
                manifest.total_steps * grid_bytes,
                manifest.total_steps,
                obs.len()
            ),
        ));
    }
    let ep_path = dir.join(EPISODES_FILE);
    let file = fs::File::open(&ep_path).map_err(io_err(&ep_path))?;
    let mut episodes = Vec::with_capacity(manifest.n_episodes);
    let mut next_obs = 0;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(&ep_path))?;
        let rec: EpisodeLine = serde_json::from_str(&line)
            .map_err(|e| corrupt(&ep_path, format!("line {}: {e}", i + 1)))?;
        if rec.index != i || rec.first_obs != next_obs {
            return Err(corrupt(&ep_path, format!("line {}: episodes out of order", i + 1)));
        }
        let mut steps = Vec::with_capacity(rec.steps.len());
        for s in rec.steps {
            let start = next_obs * grid_bytes;
            let bytes = obs
                .get(start..start + grid_bytes)
                .ok_or_else(|| corrupt(&obs_path, format!("grid {next_obs} is missing")))?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let obs_grid = Tensor::new(manifest.obs_shape.to_vec(), data)
                .map_err(|e| corrupt(&obs_path, e.to_string()))?;
            steps.push(StepRecord {
                obs_grid,
                proprio: s.proprio,
                expert_action: s.expert_action,
                noise_active: s.noise_active,
                success_so_far: s.success_so_far,
            });
            next_obs += 1;
        }
        episodes.push(Episode {
            steps,
            success: rec.success,
            seed: rec.seed,
            occluded: rec.occluded,
            noise_segments: rec.noise_segments,
        });
    }
    if episodes.len() != manifest.n_episodes || next_obs != manifest.total_steps {
        return Err(corrupt(
            &ep_path,
            format!(
                "manifest lists {} episodes and {} steps, found {} and {next_obs}",
                manifest.n_episodes,
                manifest.total_steps,
                episodes.len()
            ),
        ));
    }
    Ok(Dataset { manifest, episodes })
}
