//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria that need resources this build cannot reach (the real HyperRED
//! files, live model endpoints) report BLOCKED or SKIP unless configured
//! through environment variables, and do not affect the exit status.

mod common;
mod e2e;
mod graph;
mod hyperred;
mod live;
mod metrics;
mod optimizer;
mod parser;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

pub enum Outcome {
    Pass(String),
    Fail(String),
    /// Not checkable here; never counts as a pass.
    Blocked(String),
    Skip(String),
}

type Check = fn() -> Outcome;

fn main() {
    // `cargo test -- --list` and filters are not supported by this harness
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let criteria: [(u32, &str, Check); 9] = [
        (1, "soft metric matches brute-force oracle", metrics::soft_oracle),
        (2, "strict metric matches naive set intersection", metrics::strict_oracle),
        (3, "parser fixture corpus", parser::fixtures),
        (4, "parser fuzz robustness", parser::fuzz),
        (5, "canonical-json graph round trip", graph::round_trip),
        (6, "end-to-end mock run determinism and resume", e2e::mock_run),
        (7, "optimizer properties on mock", optimizer::properties),
        (8, "HyperRED ingestion spot-check", hyperred::spot_check),
        (9, "live reproduction (manual)", live::reproduction),
    ];
    let mut failed = 0;
    for (n, name, check) in criteria {
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check))
            .unwrap_or_else(|e| Outcome::Fail(format!("panicked: {}", panic_message(&e))));
        let secs = started.elapsed().as_secs_f64();
        let (status, detail) = match outcome {
            Outcome::Pass(d) => ("PASS", d),
            Outcome::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Outcome::Blocked(d) => ("BLOCKED", d),
            Outcome::Skip(d) => ("SKIP", d),
        };
        println!("criterion {n} [{status}] {name} ({secs:.2}s): {detail}");
    }
    if failed > 0 {
        println!("{failed} criterion check(s) failed");
        std::process::exit(1);
    }
}

fn panic_message(e: &Box<dyn std::any::Any + Send>) -> String {
    e.downcast_ref::<String>()
        .cloned()
        .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "unknown panic".into())
}
