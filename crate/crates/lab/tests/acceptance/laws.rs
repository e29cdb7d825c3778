use std::fs;
use std::sync::Arc;

use rand::Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use sta_core::attention::{
    causal_self_attention, same_time_affinity, sta_attention, standard_cross_attention, AttentionConfig,
    AttentionWeights, KvEntry, RelativePositionTable, StaEntry,
};
use sta_core::env::{env_reset, generate_episodes, render, rollout_expert, EnvConfig};
use sta_core::policy::{Policy, PolicyConfig, StepInput, Variant};
use sta_core::rng::from_seed;
use sta_core::training::{apply_temporal_mask, loss_and_gradients, sample_training_sequences, sequence_at, TrainConfig};
use sta_core::{Tape, Tensor};
use sta_lab::bench::kernel_counts;
use sta_lab::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, TrainingMeta};
use sta_lab::config::RunConfig;
use sta_lab::dataset::generate_dataset;

use crate::common::{gradient_error, random_tensor, rng, weighted_sum, Verdict};

const OP_TOL: f64 = 1e-4;
const MODEL_TOL: f64 = 1e-3;

fn op(name: &str, err: f64) -> (bool, String) {
    (err < OP_TOL, format!("{name} {err:.1e}"))
}

fn op_gradients() -> Vec<(bool, String)> {
    let mut r = rng(1);
    let mut out = Vec::new();
    let a = random_tensor(&mut r, &[3, 4], 1.0);
    let b = random_tensor(&mut r, &[4, 2], 1.0);
    out.push(op("matmul", gradient_error(&[a, b], 1e-5, 1e-6, |t, v| {
        let c = t.matmul(v[0], v[1]).unwrap();
        weighted_sum(t, c, 2)
    })));
    let a = random_tensor(&mut r, &[3, 4], 1.0);
    let b = random_tensor(&mut r, &[5, 4], 1.0);
    out.push(op("matmul_nt", gradient_error(&[a, b], 1e-5, 1e-6, |t, v| {
        let c = t.matmul_nt(v[0], v[1]).unwrap();
        weighted_sum(t, c, 3)
    })));
    let x = random_tensor(&mut r, &[3, 5], 3.0);
    out.push(op("softmax", gradient_error(&[x], 1e-5, 1e-6, |t, v| {
        let y = t.softmax_rows(v[0]).unwrap();
        weighted_sum(t, y, 4)
    })));
    let x = random_tensor(&mut r, &[3, 4], 2.0);
    let mask: Vec<bool> = (0..12).map(|i| i % 4 <= i / 4 + 1).collect();
    out.push(op("masked softmax", gradient_error(&[x], 1e-5, 1e-6, |t, v| {
        let y = t.softmax_rows_masked(v[0], &mask).unwrap();
        weighted_sum(t, y, 5)
    })));
    let x = random_tensor(&mut r, &[4, 6], 2.0);
    let g = random_tensor(&mut r, &[6], 1.5);
    out.push(op("rmsnorm", gradient_error(&[x, g], 1e-5, 1e-6, |t, v| {
        let y = t.rmsnorm(v[0], v[1]).unwrap();
        weighted_sum(t, y, 6)
    })));
    let x = random_tensor(&mut r, &[1, 20], 4.0);
    out.push(op("gelu", gradient_error(&[x], 1e-5, 1e-6, |t, v| {
        let y = t.gelu(v[0]);
        weighted_sum(t, y, 7)
    })));
    for stride in [1, 2] {
        let x = random_tensor(&mut r, &[2, 5, 4], 1.0);
        let k = random_tensor(&mut r, &[3, 2, 3, 3], 1.0);
        out.push(op(&format!("conv2d/{stride}"), gradient_error(&[x, k], 1e-5, 1e-6, |t, v| {
            let y = t.conv2d(v[0], v[1], stride).unwrap();
            weighted_sum(t, y, 8)
        })));
    }
    let a = random_tensor(&mut r, &[4, 3], 1.0);
    let b = random_tensor(&mut r, &[2, 3], 1.0);
    let bias = random_tensor(&mut r, &[3], 1.0);
    out.push(op("structural", gradient_error(&[a, b, bias], 1e-5, 1e-6, |t, v| {
        let rows = t.concat_rows(&[v[0], v[1]]).unwrap();
        let shifted = t.add_row(rows, v[2]).unwrap();
        let top = t.slice_rows(shifted, 1, 4).unwrap();
        let left = t.slice_cols(top, 0, 2).unwrap();
        let right = t.slice_cols(top, 1, 2).unwrap();
        let both = t.concat_cols(&[left, right]).unwrap();
        let picked = t.gather_rows(both, &[3, 0, 3]).unwrap();
        let flat = t.reshape(picked, &[2, 6]).unwrap();
        let sq = t.mul(flat, flat).unwrap();
        let d = t.sub(sq, flat).unwrap();
        let d = t.add(d, flat).unwrap();
        let s = t.scale(d, 0.7);
        weighted_sum(t, s, 11)
    })));

    let (m, n, d, k) = (2, 3, 4, 2);
    let mut inputs = Vec::new();
    for _ in 0..=k {
        inputs.push(random_tensor(&mut r, &[m, d], 1.0));
        inputs.push(random_tensor(&mut r, &[n, d], 1.0));
        inputs.push(random_tensor(&mut r, &[n, d], 1.0));
    }
    inputs.push(random_tensor(&mut r, &[n, d], 1.0));
    inputs.push(random_tensor(&mut r, &[k + 1, d], 0.5));
    out.push(op("sta_attention", gradient_error(&inputs, 1e-5, 1e-6, |t, v| {
        let mut pos = RelativePositionTable::new(t, v[3 * (k + 1) + 1], 1).unwrap();
        let window: Vec<StaEntry> = (0..=k)
            .map(|i| StaEntry {
                timestep: i,
                affinity: same_time_affinity(t, v[3 * i], v[3 * i + 1]).unwrap(),
                s: v[3 * i + 2],
            })
            .collect();
        let (o, _) = sta_attention(t, &window, v[3 * (k + 1)], &mut pos, 0).unwrap();
        weighted_sum(t, o.out, 13)
    })));

    let mut inputs = vec![random_tensor(&mut r, &[m, d], 1.0)];
    for _ in 0..=k {
        inputs.push(random_tensor(&mut r, &[n, d], 1.0));
        inputs.push(random_tensor(&mut r, &[n, d], 1.0));
    }
    inputs.push(random_tensor(&mut r, &[k + 1, d], 0.5));
    out.push(op("standard attention", gradient_error(&inputs, 1e-5, 1e-6, |t, v| {
        let mut pos = RelativePositionTable::new(t, v[2 * (k + 1) + 1], 1).unwrap();
        let window: Vec<KvEntry> = (0..=k)
            .map(|i| KvEntry {
                timestep: i,
                k: v[1 + 2 * i],
                v: v[2 + 2 * i],
            })
            .collect();
        let o = standard_cross_attention(t, v[0], &window, &mut pos, 0).unwrap();
        weighted_sum(t, o.out, 15)
    })));

    let cfg = AttentionConfig {
        d_model: 4,
        n_heads: 2,
        max_history: 2,
    };
    let mut inputs = vec![random_tensor(&mut r, &[6, 4], 1.0)];
    for _ in 0..4 {
        inputs.push(random_tensor(&mut r, &[4, 4], 0.7));
    }
    out.push(op("self-attention", gradient_error(&inputs, 1e-5, 1e-6, |t, v| {
        let w = AttentionWeights {
            wq: v[1],
            wk: v[2],
            wv: v[3],
            wo: v[4],
        };
        let y = causal_self_attention(t, v[0], 2, &w, &cfg).unwrap();
        weighted_sum(t, y, 17)
    })));
    out
}

fn tiny_env() -> EnvConfig {
    EnvConfig {
        grid_size: 6,
        horizon: 6,
        home: [2.5, 2.5],
        min_object_goal_distance: 2.0,
        ..EnvConfig::default()
    }
}

fn tiny_policy(variant: Variant) -> PolicyConfig {
    PolicyConfig {
        variant,
        n_layers: 2,
        d_model: 8,
        n_heads: 2,
        k_max: 3,
        obs_grid: [1, 6, 6],
        cnn_channels: [2, 2],
        ffn_mult: 2,
        head_hidden: 4,
        ..PolicyConfig::default()
    }
}

/// A policy whose residual output projections are nonzero, so every sublayer
/// carries gradient and signal.
fn perturbed(cfg: PolicyConfig, seed: u64) -> Policy {
    let mut p = Policy::new(cfg, seed).unwrap();
    let mut r = rng(seed + 1);
    for i in p.residual_output_params() {
        let shape = p.params().get(i).shape().to_vec();
        *p.params_mut().get_mut(i) = random_tensor(&mut r, &shape, 0.3);
    }
    p
}

fn model_gradient_error(variant: Variant) -> f64 {
    let ep = rollout_expert(&tiny_env(), 3, false);
    let mut seq = sequence_at(std::slice::from_ref(&ep), 0, 1, 2).unwrap();
    seq.mask_span = Some((1, 1));
    let batch = vec![seq];
    let policy = perturbed(tiny_policy(variant), 21);
    let grads = loss_and_gradients(&batch, &policy).unwrap().grads.unwrap();
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for i in 0..policy.params().len() {
        for j in 0..policy.params().get(i).numel() {
            let mut p = policy.clone();
            let x = p.params().get(i).data()[j];
            p.params_mut().get_mut(i).data_mut()[j] = x + h;
            let up = loss_and_gradients(&batch, &p).unwrap().loss;
            p.params_mut().get_mut(i).data_mut()[j] = x - h;
            let down = loss_and_gradients(&batch, &p).unwrap().loss;
            let numeric = (up - down) / (2.0 * h);
            let a = grads[i][j];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-5));
        }
    }
    worst
}

pub fn gradients() -> Verdict {
    let start = std::time::Instant::now();
    let mut parts = op_gradients();
    for v in Variant::ALL {
        let err = model_gradient_error(v);
        parts.push((err < MODEL_TOL, format!("{} model {err:.1e}", v.name())));
    }
    let secs = start.elapsed().as_secs_f64();
    parts.push((secs < 60.0, format!("{secs:.1}s")));
    Verdict::all(parts)
}

struct Instance {
    affinity: Vec<Tensor>,
    s: Vec<Tensor>,
    table: Tensor,
    v: Tensor,
}

fn instance(seed: u64, m: usize, n: usize, k: usize, d: usize) -> Instance {
    let mut r = rng(seed);
    Instance {
        affinity: (0..=k).map(|_| random_tensor(&mut r, &[m, n], 1.0)).collect(),
        s: (0..=k).map(|_| random_tensor(&mut r, &[n, d], 1.0)).collect(),
        table: random_tensor(&mut r, &[k + 1, d], 0.5),
        v: random_tensor(&mut r, &[n, d], 1.0),
    }
}

/// Scores and output of one head by explicit loops over offsets, past tokens,
/// current tokens and feature columns.
fn brute_force(x: &Instance) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let k = x.s.len() - 1;
    let (m, n) = (x.affinity[0].rows(), x.affinity[0].cols());
    let d = x.s[0].cols();
    let shifted = |tau: usize, row: usize, c: usize| x.s[tau].get(row, c) + x.table.get(k - tau, c);
    let scale = 1.0 / ((d * d * k.max(1)) as f64).sqrt();
    let mut z = vec![vec![0.0; n]; m];
    for tau in 0..=k {
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for l in 0..n {
                    let mut tr = 0.0;
                    for c in 0..d {
                        tr += shifted(tau, l, c) * shifted(k, j, c);
                    }
                    acc += x.affinity[tau].get(i, l) * tr;
                }
                z[i][j] += acc * scale;
            }
        }
    }
    let out = z
        .iter()
        .map(|row| {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
            let s: f64 = e.iter().sum();
            (0..d).map(|c| (0..n).map(|j| e[j] / s * x.v.get(j, c)).sum()).collect()
        })
        .collect();
    (z, out)
}

fn run_sta(x: &Instance) -> (Tensor, Tensor, Tensor) {
    let mut tape = Tape::inference();
    let table = tape.constant(x.table.clone());
    let mut pos = RelativePositionTable::new(&tape, table, 1).unwrap();
    let window: Vec<StaEntry> = x
        .affinity
        .iter()
        .zip(&x.s)
        .enumerate()
        .map(|(t, (a, s))| StaEntry {
            timestep: t + 3,
            affinity: tape.constant(a.clone()),
            s: tape.constant(s.clone()),
        })
        .collect();
    let v = tape.constant(x.v.clone());
    let (o, scores) = sta_attention(&mut tape, &window, v, &mut pos, 0).unwrap();
    (
        tape.value(scores.z).clone(),
        tape.value(o.weights).clone(),
        tape.value(o.out).clone(),
    )
}

fn max_err(t: &Tensor, rows: &[Vec<f64>]) -> f64 {
    rows.iter()
        .enumerate()
        .flat_map(|(i, r)| r.iter().enumerate().map(move |(j, v)| (t.get(i, j) - v).abs()))
        .fold(0.0, f64::max)
}

pub fn oracle() -> Verdict {
    let mut r = rng(2024);
    let cases = 200;
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let (m, n, k, d) = (
            r.random_range(1..=3),
            r.random_range(1..=3),
            r.random_range(0..=4),
            r.random_range(1..=4),
        );
        let x = instance(1000 + case, m, n, k, d);
        let (z_ref, out_ref) = brute_force(&x);
        let (z, _, out) = run_sta(&x);
        worst = worst.max(max_err(&z, &z_ref)).max(max_err(&out, &out_ref));
    }
    Verdict::check(worst <= 1e-12, format!("{cases} instances, max abs error {worst:.1e}"))
}

pub fn degenerate_laws() -> Verdict {
    let mut parts = Vec::new();
    let mut exact = true;
    for k in 0..5 {
        let x = instance(k as u64, 3, 1, k, 4);
        let (_, _, out) = run_sta(&x);
        exact &= (0..3).all(|i| out.row(i) == x.v.row(0));
    }
    parts.push((exact, "n=1 returns V_t exactly".to_string()));

    let (m, n, k, d) = (3, 3, 3, 4);
    let mut x = instance(5, m, n, k, d);
    for s in &mut x.s {
        let first = s.row(0).to_vec();
        for i in 0..n {
            s.data_mut()[i * d..(i + 1) * d].copy_from_slice(&first);
        }
    }
    x.table = Tensor::zeros(&[k + 1, d]);
    let (_, w, out) = run_sta(&x);
    let mut err: f64 = w.data().iter().map(|v| (v - 1.0 / n as f64).abs()).fold(0.0, f64::max);
    for i in 0..m {
        for c in 0..d {
            let mean = (0..n).map(|j| x.v.get(j, c)).sum::<f64>() / n as f64;
            err = err.max((out.get(i, c) - mean).abs());
        }
    }
    parts.push((err <= 1e-12, format!("identical rows give the mean of V_t ({err:.1e})")));

    let mut r = rng(3);
    let mut tape = Tape::inference();
    let table = tape.constant(random_tensor(&mut r, &[1, 4], 1.0));
    let mut pos = RelativePositionTable::new(&tape, table, 1).unwrap();
    let q = tape.constant(random_tensor(&mut r, &[2, 4], 1.0));
    let v = random_tensor(&mut r, &[1, 4], 1.0);
    let entry = KvEntry {
        timestep: 0,
        k: tape.constant(random_tensor(&mut r, &[1, 4], 1.0)),
        v: tape.constant(v.clone()),
    };
    let o = standard_cross_attention(&mut tape, q, &[entry], &mut pos, 0).unwrap();
    let out = tape.value(o.out);
    let single = out.row(0) == v.row(0) && out.row(1) == v.row(0);
    parts.push((single, "single-key standard attention returns the value".to_string()));
    Verdict::all(parts)
}

fn micro(variant: Variant, k_max: usize) -> PolicyConfig {
    PolicyConfig {
        variant,
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        k_max,
        n_state_tokens: 3,
        cnn_channels: [4, 4],
        ffn_mult: 2,
        head_hidden: 8,
        ..PolicyConfig::default()
    }
}

type Frame = (Tensor, Vec<f64>, bool);

fn frames(n: usize, seed: u64) -> Vec<Frame> {
    let env = EnvConfig::default();
    (0..n)
        .map(|i| {
            let s = env_reset(&env, seed * 1000 + i as u64);
            (render(&env, &s), s.arm.to_vec(), i % 5 == 3)
        })
        .collect()
}

fn inputs(f: &[Frame]) -> Vec<StepInput<'_>> {
    f.iter()
        .map(|(o, p, m)| StepInput {
            obs: o,
            proprio: p,
            visual_masked: *m,
        })
        .collect()
}

pub fn cache_equivalence() -> Verdict {
    let data = frames(20, 1);
    let mut parts = Vec::new();
    for variant in [Variant::Sta, Variant::StandardXattn] {
        let mut worst: f64 = 0.0;
        for history in [3, 15] {
            let p = perturbed(micro(variant, 15), 4);
            let full = p.forward_trajectory(&inputs(&data), history).unwrap();
            let mut session = p.session(history);
            for (t, x) in inputs(&data).into_iter().enumerate() {
                let out = session.step(x).unwrap();
                for (j, v) in out.raw.iter().enumerate() {
                    worst = worst.max((v - full.get(t, j)).abs());
                }
            }
        }
        parts.push((worst < 1e-10, format!("{} max diff {worst:.1e}", variant.name())));
    }
    Verdict::all(parts)
}

pub fn causality() -> Verdict {
    let mut parts = Vec::new();
    let cfg = AttentionConfig {
        d_model: 4,
        n_heads: 2,
        max_history: 2,
    };
    let (steps, per) = (6, 2);
    let mut r = rng(8);
    let w: Vec<Tensor> = (0..4).map(|_| random_tensor(&mut r, &[4, 4], 1.0)).collect();
    let base = random_tensor(&mut r, &[steps * per, 4], 1.0);
    let eval = |x: &Tensor| {
        let mut tape = Tape::inference();
        let weights = AttentionWeights {
            wq: tape.constant(w[0].clone()),
            wk: tape.constant(w[1].clone()),
            wv: tape.constant(w[2].clone()),
            wo: tape.constant(w[3].clone()),
        };
        let t = tape.constant(x.clone());
        let out = causal_self_attention(&mut tape, t, per, &weights, &cfg).unwrap();
        tape.value(out).clone()
    };
    let before = eval(&base);
    let mut ok = true;
    for step in 0..steps {
        let mut x = base.clone();
        for c in 0..4 {
            x.data_mut()[step * per * 4 + c] += 1.0;
        }
        let after = eval(&x);
        ok &= (0..step * per).all(|row| before.row(row) == after.row(row));
    }
    parts.push((ok, "self-attention kernel".to_string()));

    let mut ok = true;
    let n = 2;
    let d = 4;
    for k in 1..5usize {
        let mut r = rng(40 + k as u64);
        let a: Vec<Tensor> = (0..=k + 2).map(|_| random_tensor(&mut r, &[2, n], 1.0)).collect();
        let s: Vec<Tensor> = (0..=k + 2).map(|_| random_tensor(&mut r, &[n, d], 1.0)).collect();
        let v: Vec<Tensor> = (0..=k + 2).map(|_| random_tensor(&mut r, &[n, d], 1.0)).collect();
        let table = random_tensor(&mut r, &[k + 1, d], 0.5);
        let run = |a: &[Tensor], s: &[Tensor], v: &[Tensor], t: usize| {
            let mut tape = Tape::inference();
            let tv = tape.constant(table.clone());
            let mut pos = RelativePositionTable::new(&tape, tv, 1).unwrap();
            let lo = t.saturating_sub(k);
            let window: Vec<StaEntry> = (lo..=t)
                .map(|i| StaEntry {
                    timestep: i,
                    affinity: tape.constant(a[i].clone()),
                    s: tape.constant(s[i].clone()),
                })
                .collect();
            let vt = tape.constant(v[t].clone());
            let (o, _) = sta_attention(&mut tape, &window, vt, &mut pos, 0).unwrap();
            tape.value(o.out).clone()
        };
        for future in 1..=k + 2 {
            let (mut a2, mut s2, mut v2) = (a.clone(), s.clone(), v.clone());
            a2[future].data_mut()[0] += 1.0;
            s2[future].data_mut()[0] += 1.0;
            v2[future].data_mut()[0] += 1.0;
            for t in 0..future {
                ok &= run(&a, &s, &v, t) == run(&a2, &s2, &v2, t);
            }
        }
    }
    parts.push((ok, "STA kernel".to_string()));

    let mut ok = true;
    let data = frames(8, 2);
    let other = frames(8, 3);
    for variant in Variant::ALL {
        let p = perturbed(micro(variant, 4), 6);
        let base = p.forward_trajectory(&inputs(&data), 4).unwrap();
        for t in 0..8 {
            let mut changed = data.clone();
            changed[t] = other[t].clone();
            changed[t].2 = !changed[t].2;
            let out = p.forward_trajectory(&inputs(&changed), 4).unwrap();
            ok &= (0..t).all(|s| base.row(s) == out.row(s));
            ok &= base.row(t) != out.row(t);
        }
    }
    parts.push((ok, "full policy, all variants".to_string()));
    Verdict::all(parts)
}

pub fn softmax_widths() -> Verdict {
    let (m, n, d) = (2, 3, 4);
    let mut bad = Vec::new();
    for k in 0..=31usize {
        let mut r = rng(k as u64);
        let mut tape = Tape::inference();
        let table = tape.constant(random_tensor(&mut r, &[k + 1, d], 1.0));
        let mut pos = RelativePositionTable::new(&tape, table, 1).unwrap();
        let sta: Vec<StaEntry> = (0..=k)
            .map(|t| StaEntry {
                timestep: t,
                affinity: tape.shared(Arc::new(random_tensor(&mut r, &[m, n], 1.0)), false),
                s: tape.shared(Arc::new(random_tensor(&mut r, &[n, d], 1.0)), false),
            })
            .collect();
        let v = tape.constant(random_tensor(&mut r, &[n, d], 1.0));
        tape.reset_stats();
        sta_attention(&mut tape, &sta, v, &mut pos, 0).unwrap();
        let s = tape.stats();
        if (s.min_softmax_width, s.max_softmax_width) != (Some(n), Some(n)) {
            bad.push(format!("STA k={k}"));
        }
        let q = tape.constant(random_tensor(&mut r, &[m, d], 1.0));
        let kv: Vec<KvEntry> = (0..=k)
            .map(|t| KvEntry {
                timestep: t,
                k: tape.constant(random_tensor(&mut r, &[n, d], 1.0)),
                v: tape.constant(random_tensor(&mut r, &[n, d], 1.0)),
            })
            .collect();
        tape.reset_stats();
        standard_cross_attention(&mut tape, q, &kv, &mut pos, 0).unwrap();
        let s = tape.stats();
        if (s.min_softmax_width, s.max_softmax_width) != (Some((k + 1) * n), Some((k + 1) * n)) {
            bad.push(format!("standard k={k}"));
        }
    }
    let pc = PolicyConfig {
        k_max: 31,
        ..micro(Variant::Sta, 31)
    };
    for k in [0, 1, 7, 15, 31] {
        match kernel_counts(&pc, k, 1) {
            Ok((sta, standard)) => {
                let n = pc.n_state_tokens;
                if (sta.min_softmax_width, sta.max_softmax_width) != (Some(n), Some(n))
                    || (standard.min_softmax_width, standard.max_softmax_width) != (Some((k + 1) * n), Some((k + 1) * n))
                {
                    bad.push(format!("policy-shape counters k={k}"));
                }
            }
            Err(e) => bad.push(format!("policy-shape counters k={k}: {e}")),
        }
    }
    let data = frames(32, 4);
    for variant in [Variant::Sta, Variant::StandardXattn] {
        let p = Policy::new(micro(variant, 31), 3).unwrap();
        let n = p.config().n_state_tokens;
        for k in [0, 1, 7, 15, 31] {
            let mut session = p.session(k);
            for x in inputs(&data[..k]) {
                session.step(x).unwrap();
            }
            session.record_traces(None);
            session.step(inputs(&data[k..k + 1])[0]).unwrap();
            let expected = if variant == Variant::Sta { n } else { (k + 1) * n };
            let traces = session.take_traces();
            if traces.len() != 4 || traces.iter().any(|t| t.weights.cols() != expected) {
                bad.push(format!("{} policy k={k}", variant.name()));
            }
        }
    }
    Verdict::check(
        bad.is_empty(),
        if bad.is_empty() {
            format!("STA width n={n}, standard (k+1)n for k in 0..=31; policy sessions agree")
        } else {
            format!("mismatches: {}", bad.join(", "))
        },
    )
}

pub fn masking_laws() -> Verdict {
    let cfg = TrainConfig::default();
    let l = cfg.sequence_length;
    let env = EnvConfig::default();
    let (eps, _) = generate_episodes(&env, 12, true, 3).unwrap();
    let base = sequence_at(&eps, 0, 0, l).unwrap();
    let mut rng = from_seed(17);
    let (lo, hi) = cfg.mask_span_range();
    let mut counts = vec![0usize; hi - lo + 1];
    let mut step0 = 0;
    let draws = 10_000;
    let mut in_range = true;
    for _ in 0..draws {
        let mut seq = base.clone();
        apply_temporal_mask(&mut seq, &mut rng, &cfg).unwrap();
        let (start, k) = seq.mask_span.unwrap();
        in_range &= (lo..=hi).contains(&k) && start >= 1 && start + k <= l;
        counts[k - lo] += 1;
        step0 += usize::from(seq.visual_masked(0));
    }
    let expected = draws as f64 / counts.len() as f64;
    let chi: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new((counts.len() - 1) as f64).unwrap().cdf(chi);

    let policy = perturbed(micro(Variant::Sta, 15), 32);
    let batch_cfg = TrainConfig {
        batch_size: 8,
        ..TrainConfig::default()
    };
    let mut r = from_seed(2);
    let mut batch = sample_training_sequences(&eps, &mut r, &batch_cfg).unwrap();
    for seq in &mut batch {
        apply_temporal_mask(seq, &mut r, &cfg).unwrap();
    }
    let noisy: usize = batch.iter().map(|s| s.steps.iter().filter(|x| x.noise_active).count()).sum();
    let mut garbage = batch.clone();
    for seq in &mut garbage {
        for s in seq.steps.iter_mut().filter(|s| s.noise_active) {
            s.expert_action = [1e6, -3e7];
        }
    }
    let a = loss_and_gradients(&batch, &policy).unwrap();
    let b = loss_and_gradients(&garbage, &policy).unwrap();
    let sound = noisy > 0 && a.loss.to_bits() == b.loss.to_bits() && a.grads == b.grads;
    Verdict::all(vec![
        (p > 0.01 && in_range, format!("k over [{lo},{hi}] chi-square p = {p:.3} ({draws} draws)")),
        (step0 == 0, format!("step 0 masked {step0} times")),
        (sound, format!("garbage on {noisy} noise steps leaves the loss bitwise unchanged")),
    ])
}

pub fn round_trips() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let mut parts = Vec::new();

    let policy = perturbed(micro(Variant::Sta, 15), 50);
    let path = dir.path().join("p.ckpt");
    let meta = TrainingMeta {
        epoch: 3,
        seed: 9,
        dataset_fingerprint: "abc".into(),
    };
    save_checkpoint(&path, &Checkpoint::new(policy.clone(), None, meta)).unwrap();
    let loaded = load_checkpoint(&path).unwrap().policy;
    let bitwise = policy
        .params()
        .tensors()
        .zip(loaded.params().tensors())
        .all(|(a, b)| a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    let data = frames(4, 1);
    let same_action = policy.forward_policy(&inputs(&data)).unwrap() == loaded.forward_policy(&inputs(&data)).unwrap();
    parts.push((bitwise && same_action, "checkpoint parameters bitwise equal".to_string()));

    let env = EnvConfig::default();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    generate_dataset(&env, 20, true, 5, &a).unwrap();
    generate_dataset(&env, 20, true, 5, &b).unwrap();
    let mut identical = true;
    let mut names = Vec::new();
    for entry in fs::read_dir(&a).unwrap() {
        let name = entry.unwrap().file_name();
        identical &= fs::read(a.join(&name)).unwrap() == fs::read(b.join(&name)).unwrap();
        names.push(name);
    }
    identical &= names.len() == fs::read_dir(&b).unwrap().count();
    parts.push((identical, format!("dataset regeneration byte-identical ({} files)", names.len())));

    let mut fix = true;
    for cfg in [RunConfig::default(), crate::desk::desk_config()] {
        let text = cfg.resolved();
        let back = RunConfig::from_toml(&text, std::path::Path::new("resolved_config.toml")).unwrap();
        fix &= back == cfg && back.resolved() == text;
    }
    parts.push((fix, "config resolve/re-parse fixpoint".to_string()));
    Verdict::all(parts)
}
