//! Acceptance suite. Runs every criterion and prints one verdict line each;
//! pass criterion numbers as arguments to run a subset.

mod common;
mod desk;
mod laws;

use std::process::ExitCode;
use std::time::Instant;

use common::Verdict;

type Criterion = (&'static str, &'static str, fn() -> Verdict);

const CRITERIA: &[Criterion] = &[
    ("1", "gradient suite", laws::gradients),
    ("2", "oracle equivalence", laws::oracle),
    ("3", "degenerate laws", laws::degenerate_laws),
    ("4", "cache equivalence", laws::cache_equivalence),
    ("5", "causality", laws::causality),
    ("6", "softmax width", laws::softmax_widths),
    ("7", "masking laws", laws::masking_laws),
    ("8", "desk directional result", desk::directional),
    ("9", "masking ablation", desk::masking_ablation),
    ("10", "history robustness", desk::history_robustness),
    ("11", "round-trips", laws::round_trips),
    ("trace", "attention moves to older offsets after detours", desk::trace_direction),
    ("bench", "cached STA faster than scratch", desk::cache_speed),
];

fn main() -> ExitCode {
    let wanted: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (id, name, run) in CRITERIA {
        if !wanted.is_empty() && !wanted.iter().any(|w| w == id) {
            continue;
        }
        let start = Instant::now();
        let v = run();
        let label = if v.pass { "PASS" } else { "FAIL" };
        println!(
            "criterion {id} [{label}] {name}: {} ({:.1}s)",
            v.detail,
            start.elapsed().as_secs_f64()
        );
        failed += usize::from(!v.pass);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
