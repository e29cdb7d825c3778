use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{env_reset_with_occlusion, env_step, render, EnvConfig};
use crate::error::{Error, Result};
use crate::policy::{Policy, StepInput};
use crate::rng::{derive_seed, from_seed, SimRng};

/// Which episodes the evaluator draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    /// Occlusion drawn with the environment's own probability.
    #[default]
    Natural,
    /// Every episode hides the object after the first frame.
    Occluded,
    /// The object is always visible.
    Unoccluded,
}

impl Regime {
    pub fn forced(self) -> Option<bool> {
        match self {
            Regime::Natural => None,
            Regime::Occluded => Some(true),
            Regime::Unoccluded => Some(false),
        }
    }
}

impl core::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "natural" => Ok(Regime::Natural),
            "occluded" => Ok(Regime::Occluded),
            "unoccluded" => Ok(Regime::Unoccluded),
            other => Err(Error::config("regime", alloc::format!("unknown regime {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub n_episodes: usize,
    pub n_seeds: usize,
    /// Past steps visible to the policy.
    pub history: usize,
    pub masked_inference: bool,
    pub regime: Regime,
    /// `L`; masked-inference spans are drawn from `[0, L - 1]`.
    pub sequence_length: usize,
    pub resample_probability: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            n_episodes: 100,
            n_seeds: 3,
            history: 15,
            masked_inference: false,
            regime: Regime::Natural,
            sequence_length: 16,
            resample_probability: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean over seeds.
    pub success_rate: f64,
    pub per_seed: Vec<f64>,
    pub successes: usize,
    pub episodes: usize,
}

/// Visual-masking schedule for masked inference. Step 0 and the step at which
/// a span runs out always keep their observation; a span of
/// `n ~ U[0, L - 1]` steps is drawn after step 0 and then redrawn with the
/// resample probability at each later unmasked step.
#[derive(Debug, Clone)]
pub struct MaskScheduler {
    rng: SimRng,
    remaining: usize,
    max_span: usize,
    resample: f64,
    started: bool,
}

impl MaskScheduler {
    pub fn new(seed: u64, sequence_length: usize, resample_probability: f64) -> Self {
        MaskScheduler {
            rng: from_seed(seed),
            remaining: 0,
            max_span: sequence_length.saturating_sub(1),
            resample: resample_probability.clamp(0.0, 1.0),
            started: false,
        }
    }

    /// Whether the next step's observation is hidden.
    pub fn next_masked(&mut self) -> bool {
        if !self.started {
            self.started = true;
            self.remaining = self.rng.random_range(0..=self.max_span);
            return false;
        }
        if self.remaining > 0 {
            self.remaining -= 1;
            return true;
        }
        if self.rng.random_bool(self.resample) {
            self.remaining = self.rng.random_range(0..=self.max_span);
        }
        false
    }
}

const EVAL_STREAM: u64 = 0x6576_616c;
const MASK_STREAM: u64 = 0x6d61_736b;

/// Seed of episode `episode` in evaluation seed `seed_index`.
pub fn eval_episode_seed(seed: u64, seed_index: usize, episode: usize) -> u64 {
    derive_seed(derive_seed(seed, EVAL_STREAM + seed_index as u64), episode as u64)
}

/// Closed-loop success rate; an episode counts once success is reached
/// within the horizon.
pub fn evaluate_policy(policy: &Policy, env: &EnvConfig, opts: &EvalOptions, seed: u64) -> Result<EvalReport> {
    env.validate()?;
    if opts.history > policy.config().k_max {
        return Err(Error::usage(alloc::format!(
            "inference history {} exceeds k_max {}",
            opts.history,
            policy.config().k_max
        )));
    }
    let mut per_seed = Vec::with_capacity(opts.n_seeds);
    let mut successes = 0;
    for s in 0..opts.n_seeds {
        let mut hits = 0;
        for e in 0..opts.n_episodes {
            let ep_seed = eval_episode_seed(seed, s, e);
            if run_episode(policy, env, opts, ep_seed)? {
                hits += 1;
            }
        }
        successes += hits;
        per_seed.push(if opts.n_episodes == 0 {
            0.0
        } else {
            hits as f64 / opts.n_episodes as f64
        });
    }
    let success_rate = if per_seed.is_empty() {
        0.0
    } else {
        per_seed.iter().sum::<f64>() / per_seed.len() as f64
    };
    Ok(EvalReport {
        success_rate,
        per_seed,
        successes,
        episodes: opts.n_episodes * opts.n_seeds,
    })
}

/// Rolls one episode; returns whether it succeeded.
pub fn run_episode(policy: &Policy, env: &EnvConfig, opts: &EvalOptions, seed: u64) -> Result<bool> {
    let mut state = env_reset_with_occlusion(env, seed, opts.regime.forced());
    let mut session = policy.session(opts.history);
    let mut masks = MaskScheduler::new(
        derive_seed(seed, MASK_STREAM),
        opts.sequence_length,
        opts.resample_probability,
    );
    for _ in 0..env.horizon {
        let obs = render(env, &state);
        let masked = opts.masked_inference && masks.next_masked();
        let out = session.step(StepInput {
            obs: &obs,
            proprio: &state.arm,
            visual_masked: masked,
        })?;
        let (next, _, success) = env_step(env, &state, &out.action);
        state = next;
        if success {
            return Ok(true);
        }
    }
    Ok(false)
}
