//! A 16x16 reach-grasp-place task with a two-joint arm.
//!
//! Joint 0 moves the end-effector along x, joint 1 along y. Grasping is
//! automatic within `grasp_radius` of the object. Episodes run to the horizon,
//! or end once the held object reaches the goal when `stop_on_success` is set.
//! Occluded episodes show the object on the first frame only, so a policy
//! that wants to find it later has to remember it.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, from_seed, SimRng};
use crate::tensor::Tensor;

/// The arm has exactly one joint per end-effector axis.
pub const N_JOINTS: usize = 2;

pub const CELL_ARM: u8 = 1;
pub const CELL_OBJECT: u8 = 2;
pub const CELL_GOAL: u8 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    /// Probability that an episode receives a perception-noise segment.
    pub probability: f64,
    pub start_min: usize,
    pub start_max: usize,
    pub len_min: usize,
    pub len_max: usize,
    pub offset_min: f64,
    pub offset_max: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            probability: 0.7,
            start_min: 2,
            start_max: 30,
            len_min: 3,
            len_max: 8,
            offset_min: 2.0,
            offset_max: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub grid_size: usize,
    pub horizon: usize,
    pub grasp_radius: f64,
    pub expert_gain: f64,
    pub home: [f64; 2],
    pub min_object_goal_distance: f64,
    /// Probability that an episode hides the object after the first frame.
    pub occlusion_probability: f64,
    /// End an episode as soon as the object reaches the goal rather than at
    /// the horizon.
    pub stop_on_success: bool,
    pub noise: NoiseConfig,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            grid_size: 16,
            horizon: 60,
            grasp_radius: 0.75,
            expert_gain: 0.5,
            home: [7.5, 7.5],
            min_object_goal_distance: 3.0,
            occlusion_probability: 0.5,
            stop_on_success: false,
            noise: NoiseConfig::default(),
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_size < 6 {
            return Err(Error::config("grid_size", "must be at least 6"));
        }
        if self.horizon == 0 {
            return Err(Error::config("horizon", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.occlusion_probability) {
            return Err(Error::config("occlusion_probability", "must lie in [0, 1]"));
        }
        let n = &self.noise;
        if !(0.0..=1.0).contains(&n.probability) {
            return Err(Error::config("noise.probability", "must lie in [0, 1]"));
        }
        if n.start_min < 2 || n.start_min > n.start_max {
            return Err(Error::config("noise.start_min", "needs 2 <= start_min <= start_max"));
        }
        if n.len_min == 0 || n.len_min > n.len_max {
            return Err(Error::config("noise.len_min", "needs 1 <= len_min <= len_max"));
        }
        if n.offset_min < 0.0 || n.offset_min > n.offset_max {
            return Err(Error::config("noise.offset_min", "needs 0 <= offset_min <= offset_max"));
        }
        let hi = (self.grid_size - 1) as f64;
        if self.home.iter().any(|h| !(0.0..=hi).contains(h)) {
            return Err(Error::config("home", "must lie inside the workspace"));
        }
        Ok(())
    }

    pub fn upper(&self) -> f64 {
        (self.grid_size - 1) as f64
    }

    fn clamp_pos(&self, p: [f64; 2]) -> [f64; 2] {
        [p[0].clamp(0.0, self.upper()), p[1].clamp(0.0, self.upper())]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub arm: [f64; N_JOINTS],
    pub object_pos: [f64; 2],
    pub goal_pos: [f64; 2],
    pub holding: bool,
    pub success: bool,
    pub step_index: usize,
    /// Whether the object is hidden from the rendered grid, per step.
    pub occlusion_schedule: Vec<bool>,
    pub rng_seed: u64,
}

impl EnvState {
    pub fn end_effector(&self) -> [f64; 2] {
        self.arm
    }

    pub fn object_visible(&self) -> bool {
        !self
            .occlusion_schedule
            .get(self.step_index)
            .copied()
            .unwrap_or(true)
    }

    pub fn is_occluded_episode(&self) -> bool {
        self.occlusion_schedule.iter().any(|&b| b)
    }

    /// The world element the arm should currently move to.
    pub fn current_target(&self) -> [f64; 2] {
        if self.holding {
            self.goal_pos
        } else {
            self.object_pos
        }
    }
}

pub fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    libm::hypot(a[0] - b[0], a[1] - b[1])
}

pub fn env_reset(cfg: &EnvConfig, seed: u64) -> EnvState {
    env_reset_with_occlusion(cfg, seed, None)
}

/// Like [`env_reset`], optionally forcing the occlusion regime. The forced
/// flag does not change object or goal placement for a given seed.
pub fn env_reset_with_occlusion(cfg: &EnvConfig, seed: u64, occluded: Option<bool>) -> EnvState {
    let mut rng = from_seed(seed);
    let lo = 1usize;
    let hi = cfg.grid_size - 2;
    let cell = |rng: &mut SimRng| {
        [
            rng.random_range(lo..=hi) as f64,
            rng.random_range(lo..=hi) as f64,
        ]
    };
    let object = loop {
        let c = cell(&mut rng);
        if distance(c, cfg.home) > cfg.grasp_radius {
            break c;
        }
    };
    let goal = loop {
        let c = cell(&mut rng);
        if distance(c, object) >= cfg.min_object_goal_distance {
            break c;
        }
    };
    let drawn = rng.random_bool(cfg.occlusion_probability);
    let occluded = occluded.unwrap_or(drawn);
    let mut schedule = vec![occluded; cfg.horizon + 1];
    schedule[0] = false;
    EnvState {
        arm: cfg.home,
        object_pos: object,
        goal_pos: goal,
        holding: false,
        success: false,
        step_index: 0,
        occlusion_schedule: schedule,
        rng_seed: seed,
    }
}

/// Advances one step. Returns `(state, done, success)`; an episode is done at
/// the horizon, or on success with `stop_on_success`.
pub fn env_step(cfg: &EnvConfig, state: &EnvState, action: &[f64]) -> (EnvState, bool, bool) {
    let mut next = state.clone();
    for (j, q) in next.arm.iter_mut().enumerate() {
        let a = action.get(j).copied().unwrap_or(0.0);
        let a = if a.is_finite() { a.clamp(-1.0, 1.0) } else { 0.0 };
        *q = (*q + a).clamp(0.0, cfg.upper());
    }
    let ee = next.end_effector();
    if !next.holding && distance(ee, next.object_pos) <= cfg.grasp_radius {
        next.holding = true;
    }
    if next.holding {
        next.object_pos = ee;
        if distance(ee, next.goal_pos) <= cfg.grasp_radius {
            next.success = true;
        }
    }
    next.step_index += 1;
    let done = (cfg.stop_on_success && next.success) || next.step_index >= cfg.horizon;
    let success = next.success;
    (next, done, success)
}

/// What the expert believes about the world this step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Perception {
    pub object_pos: [f64; 2],
    pub goal_pos: [f64; 2],
}

impl Perception {
    pub fn truth(state: &EnvState) -> Self {
        Perception {
            object_pos: state.object_pos,
            goal_pos: state.goal_pos,
        }
    }
}

/// Proportional step toward the perceived object (or goal once holding).
pub fn expert_action(cfg: &EnvConfig, state: &EnvState, perceived: &Perception) -> [f64; N_JOINTS] {
    let target = if state.holding {
        perceived.goal_pos
    } else {
        perceived.object_pos
    };
    let ee = state.end_effector();
    let mut out = [0.0; N_JOINTS];
    for j in 0..N_JOINTS {
        out[j] = (cfg.expert_gain * (target[j] - ee[j])).clamp(-1.0, 1.0);
    }
    out
}

/// One perception-noise segment: steps `start..start + len` see every world
/// element shifted by `offset`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSegment {
    pub start: usize,
    pub len: usize,
    pub offset: [f64; 2],
}

impl NoiseSegment {
    pub fn covers(&self, step: usize) -> bool {
        step >= self.start && step < self.start + self.len
    }
}

pub fn inject_noise_schedule(rng: &mut SimRng, noise: &NoiseConfig, enabled: bool) -> Vec<NoiseSegment> {
    if !enabled || !rng.random_bool(noise.probability) {
        return Vec::new();
    }
    let start = rng.random_range(noise.start_min..=noise.start_max);
    let len = rng.random_range(noise.len_min..=noise.len_max);
    let magnitude = if noise.offset_max > noise.offset_min {
        rng.random_range(noise.offset_min..=noise.offset_max)
    } else {
        noise.offset_min
    };
    let angle = rng.random_range(0.0..core::f64::consts::TAU);
    let offset = [magnitude * libm::cos(angle), magnitude * libm::sin(angle)];
    vec![NoiseSegment { start, len, offset }]
}

/// Renders the `1 x grid x grid` occupancy grid: each cell holds the sum of
/// [`CELL_ARM`], [`CELL_OBJECT`] (when visible) and [`CELL_GOAL`].
pub fn render(cfg: &EnvConfig, state: &EnvState) -> Tensor {
    let g = cfg.grid_size;
    let mut grid = vec![0.0; g * g];
    let cell = |p: [f64; 2]| {
        let x = libm::floor(p[0] + 0.5).clamp(0.0, (g - 1) as f64) as usize;
        let y = libm::floor(p[1] + 0.5).clamp(0.0, (g - 1) as f64) as usize;
        y * g + x
    };
    grid[cell(state.end_effector())] += f64::from(CELL_ARM);
    if state.object_visible() {
        grid[cell(state.object_pos)] += f64::from(CELL_OBJECT);
    }
    grid[cell(state.goal_pos)] += f64::from(CELL_GOAL);
    Tensor::new(vec![1, g, g], grid).expect("grid shape")
}

/// Cells `(x, y)` that carry `flag` in a rendered grid.
pub fn decode_cells(grid: &Tensor, flag: u8) -> Vec<(usize, usize)> {
    let g = grid.shape()[2];
    grid.data()
        .iter()
        .enumerate()
        .filter(|(_, &v)| (v as u8) & flag != 0)
        .map(|(i, _)| (i % g, i / g))
        .collect()
}

/// One recorded transition.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub obs_grid: Tensor,
    pub proprio: [f64; N_JOINTS],
    pub expert_action: [f64; N_JOINTS],
    pub noise_active: bool,
    pub success_so_far: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub steps: Vec<StepRecord>,
    pub success: bool,
    pub seed: u64,
    pub occluded: bool,
    pub noise_segments: Vec<NoiseSegment>,
}

const NOISE_STREAM: u64 = 0x6e6f_6973_65;

/// Rolls the scripted expert for a full horizon. Also returns the state
/// before every recorded step.
pub fn rollout_expert_with_states(
    cfg: &EnvConfig,
    seed: u64,
    noise_on: bool,
) -> (Episode, Vec<EnvState>) {
    let mut state = env_reset(cfg, seed);
    let mut noise_rng = from_seed(derive_seed(seed, NOISE_STREAM));
    let segments = inject_noise_schedule(&mut noise_rng, &cfg.noise, noise_on);
    let mut steps = Vec::with_capacity(cfg.horizon);
    let mut states = Vec::with_capacity(cfg.horizon);
    for i in 0..cfg.horizon {
        let seg = segments.iter().find(|s| s.covers(i));
        let perceived = match seg {
            None => Perception::truth(&state),
            Some(s) => {
                let shift = |p: [f64; 2]| cfg.clamp_pos([p[0] + s.offset[0], p[1] + s.offset[1]]);
                Perception {
                    object_pos: shift(state.object_pos),
                    goal_pos: shift(state.goal_pos),
                }
            }
        };
        let action = expert_action(cfg, &state, &perceived);
        steps.push(StepRecord {
            obs_grid: render(cfg, &state),
            proprio: state.arm,
            expert_action: action,
            noise_active: seg.is_some(),
            success_so_far: state.success,
        });
        states.push(state.clone());
        let (next, done, _) = env_step(cfg, &state, &action);
        state = next;
        if done {
            break;
        }
    }
    let episode = Episode {
        steps,
        success: state.success,
        seed,
        occluded: states[0].is_occluded_episode(),
        noise_segments: segments,
    };
    (episode, states)
}

pub fn rollout_expert(cfg: &EnvConfig, seed: u64, noise_on: bool) -> Episode {
    rollout_expert_with_states(cfg, seed, noise_on).0
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GenerationStats {
    pub attempted: usize,
    pub kept: usize,
    pub with_noise: usize,
    pub occluded: usize,
}

/// Collects `n_episodes` successful expert episodes, trying seeds
/// `seed, seed + 1, ...` in order and discarding failures.
pub fn generate_episodes(
    cfg: &EnvConfig,
    n_episodes: usize,
    noise_on: bool,
    seed: u64,
) -> Result<(Vec<Episode>, GenerationStats)> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(n_episodes);
    let mut stats = GenerationStats::default();
    let max_attempts = 20 * n_episodes + 100;
    while out.len() < n_episodes {
        if stats.attempted >= max_attempts {
            return Err(Error::usage("expert fails too often to fill the dataset"));
        }
        let ep = rollout_expert(cfg, seed.wrapping_add(stats.attempted as u64), noise_on);
        stats.attempted += 1;
        if ep.success {
            stats.kept += 1;
            stats.with_noise += usize::from(!ep.noise_segments.is_empty());
            stats.occluded += usize::from(ep.occluded);
            out.push(ep);
        }
    }
    Ok((out, stats))
}

/// Whether the distance to the pursued element ever grows while the
/// grasp state stays the same.
pub fn has_detour(states: &[EnvState]) -> bool {
    states.windows(2).any(|w| {
        w[0].holding == w[1].holding
            && distance(w[1].end_effector(), w[1].current_target())
                > distance(w[0].end_effector(), w[0].current_target()) + 1e-9
    })
}
