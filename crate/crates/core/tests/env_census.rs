use std::collections::HashSet;

use sta_core::env::*;

const SEEDS: u64 = 1000;

fn l1(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).abs() + (a[1] - b[1]).abs()
}

#[test]
fn expert_succeeds_without_noise() {
    let cfg = EnvConfig::default();
    let ok = (0..SEEDS).filter(|&s| rollout_expert(&cfg, s, false).success).count();
    assert!(ok as f64 >= 0.99 * SEEDS as f64, "{ok}/{SEEDS}");
}

#[test]
fn placements_cover_the_interior() {
    let cfg = EnvConfig::default();
    let g = cfg.grid_size;
    let mut objects = HashSet::new();
    let mut goals = HashSet::new();
    for seed in 0..SEEDS {
        let s = env_reset(&cfg, seed);
        for p in [s.object_pos, s.goal_pos] {
            assert!(p.iter().all(|&c| c >= 1.0 && c <= (g - 2) as f64));
        }
        assert!(distance(s.object_pos, s.goal_pos) >= cfg.min_object_goal_distance);
        assert!(distance(s.object_pos, cfg.home) > cfg.grasp_radius);
        objects.insert((s.object_pos[0] as i64, s.object_pos[1] as i64));
        goals.insert((s.goal_pos[0] as i64, s.goal_pos[1] as i64));
    }
    let interior = ((g - 2) * (g - 2)) as f64;
    assert!(objects.len() as f64 >= 0.8 * interior, "{}", objects.len());
    assert!(goals.len() as f64 >= 0.8 * interior, "{}", goals.len());
}

#[test]
fn noise_rate_and_detours_in_the_dataset() {
    let cfg = EnvConfig::default();
    let mut kept = 0;
    let mut noisy = 0;
    let mut detours = 0;
    let mut seed = 0;
    while kept < SEEDS {
        let (ep, states) = rollout_expert_with_states(&cfg, seed, true);
        seed += 1;
        if !ep.success {
            continue;
        }
        kept += 1;
        noisy += u64::from(!ep.noise_segments.is_empty());
        detours += u64::from(has_detour(&states));
    }
    let rate = noisy as f64 / kept as f64;
    assert!((rate - cfg.noise.probability).abs() <= 0.05, "noise rate {rate}");
    let detour = detours as f64 / kept as f64;
    assert!(detour >= 0.6, "detour rate {detour}");
}

#[test]
fn noise_segments_respect_their_ranges() {
    let cfg = EnvConfig::default();
    let n = &cfg.noise;
    for seed in 0..SEEDS {
        let ep = rollout_expert(&cfg, seed, true);
        assert!(ep.noise_segments.len() <= 1);
        for s in &ep.noise_segments {
            assert!(s.start >= 2 && (n.start_min..=n.start_max).contains(&s.start));
            assert!((n.len_min..=n.len_max).contains(&s.len));
            let m = s.offset[0].hypot(s.offset[1]);
            assert!(m >= n.offset_min - 1e-12 && m <= n.offset_max + 1e-12);
        }
        for (i, step) in ep.steps.iter().enumerate() {
            let covered = ep.noise_segments.iter().any(|s| s.covers(i));
            assert_eq!(step.noise_active, covered, "seed {seed} step {i}");
        }
        assert!(rollout_expert(&cfg, seed, false).noise_segments.is_empty());
    }
}

#[test]
fn recorded_actions_follow_the_perceived_world() {
    let cfg = EnvConfig::default();
    for seed in 0..200 {
        let (ep, states) = rollout_expert_with_states(&cfg, seed, true);
        for (i, (step, state)) in ep.steps.iter().zip(&states).enumerate() {
            let perceived = match ep.noise_segments.iter().find(|s| s.covers(i)) {
                None => Perception::truth(state),
                Some(_) => continue,
            };
            assert_eq!(step.expert_action, expert_action(&cfg, state, &perceived));
            assert_eq!(step.proprio, state.arm);
            assert_eq!(step.obs_grid, render(&cfg, state));
        }
    }
}

#[test]
fn clean_paths_are_short() {
    let cfg = EnvConfig {
        stop_on_success: true,
        ..EnvConfig::default()
    };
    for seed in 0..SEEDS {
        let (ep, states) = rollout_expert_with_states(&cfg, seed, false);
        if !ep.success {
            continue;
        }
        let s0 = &states[0];
        let straight = l1(s0.end_effector(), s0.object_pos) + l1(s0.object_pos, s0.goal_pos);
        let steps = ep.steps.len() as f64;
        assert!(steps <= 2.0 * straight + 4.0, "seed {seed}: {steps} steps for {straight}");
    }
}

#[test]
fn stopping_on_success_truncates_the_same_trajectory() {
    let full = EnvConfig::default();
    let stop = EnvConfig {
        stop_on_success: true,
        ..EnvConfig::default()
    };
    for seed in 0..100 {
        let a = rollout_expert(&full, seed, true);
        let b = rollout_expert(&stop, seed, true);
        assert_eq!(a.steps.len(), full.horizon);
        assert_eq!(a.success, b.success);
        assert_eq!(&a.steps[..b.steps.len()], &b.steps[..]);
        if b.success {
            assert!(b.steps.len() < full.horizon || !a.steps[full.horizon - 1].success_so_far);
        }
    }
}

#[test]
fn arm_moves_at_most_one_cell_per_joint() {
    let cfg = EnvConfig::default();
    for seed in 0..100 {
        let (_, states) = rollout_expert_with_states(&cfg, seed, true);
        for w in states.windows(2) {
            for j in 0..2 {
                assert!((w[1].arm[j] - w[0].arm[j]).abs() <= 1.0 + 1e-12);
            }
            assert_eq!(w[1].step_index, w[0].step_index + 1);
            assert!(!w[0].holding || w[1].holding);
        }
    }
}

#[test]
fn generation_keeps_only_successes_in_seed_order() {
    let cfg = EnvConfig::default();
    let (eps, stats) = generate_episodes(&cfg, 50, true, 7).unwrap();
    assert_eq!(eps.len(), 50);
    assert_eq!(stats.kept, 50);
    assert!(eps.iter().all(|e| e.success));
    assert!(eps.windows(2).all(|w| w[0].seed < w[1].seed));
    assert!(eps[0].seed >= 7);
    let again = generate_episodes(&cfg, 50, true, 7).unwrap();
    assert_eq!(again.1, stats);
    assert_eq!(again.0[49].steps, eps[49].steps);
}

#[test]
fn rendered_grids_decode_back_to_the_world() {
    let cfg = EnvConfig::default();
    let cell = |p: [f64; 2]| ((p[0] + 0.5).floor() as usize, (p[1] + 0.5).floor() as usize);
    for seed in 0..100 {
        let (_, states) = rollout_expert_with_states(&cfg, seed, true);
        for s in &states {
            let grid = render(&cfg, s);
            assert_eq!(decode_cells(&grid, CELL_GOAL), vec![cell(s.goal_pos)]);
            assert_eq!(decode_cells(&grid, CELL_ARM), vec![cell(s.end_effector())]);
            let objects = decode_cells(&grid, CELL_OBJECT);
            if s.object_visible() {
                assert_eq!(objects, vec![cell(s.object_pos)]);
            } else {
                assert!(objects.is_empty());
            }
        }
        let s0 = env_reset(&cfg, seed);
        let g = render(&cfg, &s0);
        assert_eq!(decode_cells(&g, CELL_OBJECT), vec![(s0.object_pos[0] as usize, s0.object_pos[1] as usize)]);
        assert_ne!(s0.object_pos, s0.goal_pos);
    }
}
