//! Acceptance suite. Runs every criterion in order and prints one line each.
//!
//! `cargo test -p partseg-cli --test acceptance -- 4 7` runs a subset.

mod experiments;
mod pipeline;
mod properties;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Result;

type Check = fn() -> Result<Outcome>;

/// Result of a criterion: whether it held and a one-line account.
pub struct Outcome {
    pub passed: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(passed: bool, detail: impl Into<String>) -> Self {
        Outcome {
            passed,
            detail: detail.into(),
        }
    }
}

const CRITERIA: [(u32, &str, Check); 12] = [
    (1, "gradient correctness", properties::gradients),
    (2, "masking exactness", properties::masking),
    (3, "loss oracle equivalence", properties::loss_oracle),
    (4, "batch dice pooling", properties::batch_dice_pooling),
    (5, "sampler fidelity", properties::sampler),
    (6, "schedule fidelity", properties::schedule),
    (7, "overlap capability", experiments::overlap),
    (8, "protocol retention", experiments::protocol_retention),
    (9, "joint vs single-dataset baseline", experiments::joint_vs_single),
    (10, "transfer from pretraining", experiments::transfer),
    (11, "determinism across workers", pipeline::determinism),
    (12, "paired t-test", properties::t_test),
];

fn main() -> ExitCode {
    let wanted: Vec<u32> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with("--"))
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = 0;
    for (id, name, check) in CRITERIA {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let outcome = match catch_unwind(AssertUnwindSafe(check)) {
            Ok(Ok(o)) => o,
            Ok(Err(e)) => Outcome::new(false, format!("error: {e:#}")),
            Err(p) => {
                let msg = p
                    .downcast_ref::<String>()
                    .map(String::as_str)
                    .or_else(|| p.downcast_ref::<&str>().copied())
                    .unwrap_or("panic");
                Outcome::new(false, format!("panicked: {msg}"))
            }
        };
        let tag = if outcome.passed { "PASS" } else { "FAIL" };
        println!(
            "[{tag}] {id:>2} {name} ({:.1}s): {}",
            start.elapsed().as_secs_f64(),
            outcome.detail
        );
        if !outcome.passed {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
