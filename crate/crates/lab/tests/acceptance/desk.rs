use std::collections::HashMap;
use std::path::Path;
use std::sync::{Mutex, OnceLock};
use std::time::Instant;

use sta_core::env::{distance, Episode, EnvState};
use sta_core::policy::{Policy, Variant};
use sta_core::training::{evaluate_policy, EvalOptions, Regime};
use sta_lab::ablation::ablate_history;
use sta_lab::bench::{bench_inference, Method};
use sta_lab::config::{load_config, RunConfig};
use sta_lab::dataset::generate_dataset;
use sta_lab::run::{eval_options, train_run};
use sta_lab::trace::{record_rollout, InspectOptions};

use crate::common::Verdict;

const DATA_SEED: u64 = 1000;
const TRAIN_SEED: u64 = 7;
const EVAL_SEED: u64 = 99;

pub fn desk_config() -> RunConfig {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/desk.toml");
    load_config(Path::new(path)).expect("desk config")
}

fn episodes() -> &'static [Episode] {
    static DATA: OnceLock<Vec<Episode>> = OnceLock::new();
    DATA.get_or_init(|| {
        let run = desk_config();
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(&run.env, run.data.n_episodes, run.data.noise, DATA_SEED, dir.path())
            .unwrap()
            .episodes
    })
}

/// Best checkpoint of each trained desk policy, trained once per process.
fn trained(variant: Variant, mask: bool) -> &'static Policy {
    static RUNS: OnceLock<Mutex<HashMap<(Variant, bool), &'static Policy>>> = OnceLock::new();
    let runs = RUNS.get_or_init(Default::default);
    if let Some(p) = runs.lock().unwrap().get(&(variant, mask)) {
        return p;
    }
    let mut run = desk_config();
    run.policy.variant = variant;
    run.train.mask_enabled = mask;
    let start = Instant::now();
    let outcome = train_run(&run, episodes(), TRAIN_SEED, "", None).unwrap();
    eprintln!(
        "  trained {} mask={mask} in {:.0}s, best epoch {}",
        variant.name(),
        start.elapsed().as_secs_f64(),
        outcome.best_epoch
    );
    let p: &'static Policy = Box::leak(Box::new(outcome.best));
    runs.lock().unwrap().insert((variant, mask), p);
    p
}

fn success(policy: &Policy, opts: &EvalOptions) -> f64 {
    let run = desk_config();
    evaluate_policy(policy, &run.env, opts, EVAL_SEED).unwrap().success_rate
}

fn occluded(masked_inference: bool) -> EvalOptions {
    EvalOptions {
        regime: Regime::Occluded,
        masked_inference,
        ..eval_options(&desk_config())
    }
}

fn pts(x: f64) -> String {
    format!("{:.1}", 100.0 * x)
}

pub fn directional() -> Verdict {
    let start = Instant::now();
    let opts = occluded(false);
    let sta = success(trained(Variant::Sta, true), &opts);
    let none = success(trained(Variant::NoHistory, true), &opts);
    let standard = success(trained(Variant::StandardXattn, true), &opts);
    let secs = start.elapsed().as_secs_f64();
    Verdict::all(vec![
        (
            sta >= none + 0.15,
            format!("STA {} vs NO_HISTORY {} (needs +15)", pts(sta), pts(none)),
        ),
        (
            sta >= standard - 0.03,
            format!("STA {} vs STANDARD_XATTN {} (tolerance 3)", pts(sta), pts(standard)),
        ),
        (true, format!("{:.1} min", secs / 60.0)),
    ])
}

pub fn masking_ablation() -> Verdict {
    let opts = occluded(true);
    let with = success(trained(Variant::Sta, true), &opts);
    let without = success(trained(Variant::Sta, false), &opts);
    let std_with = success(trained(Variant::StandardXattn, true), &opts);
    let std_without = success(trained(Variant::StandardXattn, false), &opts);
    Verdict::check(
        with >= without + 0.05,
        format!(
            "STA masked-inference {} with masking vs {} without (needs +5); STANDARD_XATTN delta {:+.1} (reported)",
            pts(with),
            pts(without),
            100.0 * (std_with - std_without)
        ),
    )
}

pub fn history_robustness() -> Verdict {
    let run = desk_config();
    let base = EvalOptions {
        regime: Regime::Unoccluded,
        masked_inference: false,
        ..eval_options(&run)
    };
    let rows = ablate_history(trained(Variant::Sta, true), &run.env, &base, &[15, 7, 3, 1], EVAL_SEED).unwrap();
    let full = rows[0].success;
    let worst = rows.iter().map(|r| full - r.success).fold(0.0, f64::max);
    let listing = rows
        .iter()
        .map(|r| format!("h={} {}", r.history, pts(r.success)))
        .collect::<Vec<_>>()
        .join(", ");
    Verdict::check(worst <= 0.20, format!("{listing}; largest drop {} (limit 20)", pts(worst)))
}

/// First step at which the arm moves away from its current target.
fn detour_step(states: &[EnvState]) -> Option<usize> {
    states.windows(2).position(|w| {
        w[0].holding == w[1].holding
            && distance(w[1].end_effector(), w[1].current_target())
                > distance(w[0].end_effector(), w[0].current_target()) + 1e-9
    })
}

/// Share of absolute transition score mass on offsets `>= 5`, averaged over
/// the heads of one step.
fn far_share(traces: &[sta_core::policy::AttentionTrace]) -> f64 {
    let shares: Vec<f64> = traces
        .iter()
        .map(|t| {
            let mass: Vec<f64> = (0..=t.max_offset())
                .map(|d| t.contributions[d].data().iter().map(|v| v.abs()).sum())
                .collect();
            let total: f64 = mass.iter().sum();
            if total == 0.0 {
                0.0
            } else {
                mass.iter().skip(5).sum::<f64>() / total
            }
        })
        .collect();
    shares.iter().sum::<f64>() / shares.len() as f64
}

pub fn trace_direction() -> Verdict {
    let run = desk_config();
    let policy = trained(Variant::Sta, true);
    let opts = InspectOptions {
        regime: Regime::Occluded,
        history: 15,
        identical_start: true,
        standard: false,
    };
    let (mut early, mut late) = (Vec::new(), Vec::new());
    let mut used = 0;
    for seed in 0..200u64 {
        if used == 10 {
            break;
        }
        let r = record_rollout(policy, &run.env, 5000 + seed, &opts).unwrap();
        let Some(d) = detour_step(&r.states) else { continue };
        let post: Vec<f64> = (d.max(4) + 1..r.steps.len()).map(|t| far_share(&r.steps[t])).collect();
        if post.is_empty() || r.steps.len() < 5 {
            continue;
        }
        early.extend((0..5).map(|t| far_share(&r.steps[t])));
        late.extend(post);
        used += 1;
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    let (e, l) = (mean(&early), mean(&late));
    Verdict::check(
        used > 0 && l > e,
        format!("offsets >= 5 hold {:.3} of score mass after detours vs {:.3} in steps 0-4 ({used} episodes)", l, e),
    )
}

pub fn cache_speed() -> Verdict {
    let run = desk_config();
    let mut wins = 0u64;
    let rounds = 3;
    let mut detail = Vec::new();
    for round in 0..rounds {
        let report = bench_inference(&run.policy, &run.env, &[15], run.bench.steps, round).unwrap();
        let cached = report.row(15, Method::StaCached).unwrap().wall_us_per_step;
        let scratch = report.row(15, Method::StaScratch).unwrap().wall_us_per_step;
        wins += u64::from(cached <= scratch);
        detail.push(format!("{cached:.0}us vs {scratch:.0}us"));
    }
    Verdict::check(
        wins == rounds,
        format!("cached vs scratch STA per step at k=15: {}", detail.join(", ")),
    )
}
