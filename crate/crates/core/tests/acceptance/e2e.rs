use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use llhkg::pipeline::{RECORDS_FILE, REPORT_FILE};
use llhkg::ScoreReport;

use crate::common::copy_mock;
use crate::Outcome;

struct Run {
    code: i32,
    stderr: String,
}

fn llhkg(config: &Path, args: &[&str]) -> Run {
    let out = Command::new(env!("CARGO_BIN_EXE_llhkg"))
        .arg("--config")
        .arg(config)
        .args(args)
        .output()
        .expect("binary runs");
    Run {
        code: out.status.code().unwrap_or(-1),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

fn normalized_report(dir: &Path) -> Vec<u8> {
    let bytes = std::fs::read(dir.join("work").join(REPORT_FILE)).expect("report written");
    ScoreReport::from_json(&bytes).unwrap().normalized().to_json()
}

fn expect_run(run: &Run, summary: &str) -> Result<(), String> {
    if run.code != 0 {
        return Err(format!("exit {}: {}", run.code, run.stderr));
    }
    if !run.stderr.contains(summary) {
        return Err(format!("expected `{summary}` in stderr, got: {}", run.stderr));
    }
    Ok(())
}

fn check() -> Result<String, String> {
    let dirs: Vec<_> = (0..4).map(|_| tempfile::tempdir().unwrap()).collect();
    let configs: Vec<_> = dirs.iter().map(|d| copy_mock(d.path())).collect();

    let started = Instant::now();
    expect_run(&llhkg(&configs[0], &["run"]), "10 processed, 0 resumed")?;
    let first_secs = started.elapsed().as_secs_f64();
    expect_run(&llhkg(&configs[1], &["run"]), "10 processed, 0 resumed")?;
    let reference = normalized_report(dirs[0].path());
    if normalized_report(dirs[1].path()) != reference {
        return Err("two fresh runs produced different reports".into());
    }
    let report = ScoreReport::from_json(&reference).unwrap();
    if report.documents.len() != 10 {
        return Err(format!("report covers {} documents", report.documents.len()));
    }

    // interrupted after four documents, then resumed
    expect_run(&llhkg(&configs[2], &["--limit", "4", "run"]), "4 processed, 0 resumed")?;
    expect_run(&llhkg(&configs[2], &["run"]), "6 processed, 4 resumed")?;
    if normalized_report(dirs[2].path()) != reference {
        return Err("resumed run report differs from the uninterrupted one".into());
    }

    // same, with a torn final record left by the interruption
    expect_run(&llhkg(&configs[3], &["--limit", "4", "run"]), "4 processed")?;
    let records = dirs[3].path().join("work").join(RECORDS_FILE);
    let mut file = std::fs::OpenOptions::new().append(true).open(&records).unwrap();
    file.write_all(br#"{"doc_id":"doc-000004","stage":"extr"#).unwrap();
    drop(file);
    let resumed = llhkg(&configs[3], &["run"]);
    expect_run(&resumed, "6 processed, 4 resumed")?;
    if !resumed.stderr.contains("incomplete") {
        return Err(format!("no torn-line warning: {}", resumed.stderr));
    }
    if normalized_report(dirs[3].path()) != reference {
        return Err("report after torn-line recovery differs".into());
    }

    let total = started.elapsed().as_secs_f64();
    if first_secs >= 10.0 {
        return Err(format!("single run took {first_secs:.2}s"));
    }
    Ok(format!(
        "identical normalized reports over 10 docs (soft macro F1 {:.4}); run {first_secs:.2}s, all six invocations {total:.2}s",
        report.macro_avg.soft.f1
    ))
}

pub fn mock_run() -> Outcome {
    match check() {
        Ok(d) => Outcome::Pass(d),
        Err(e) => Outcome::Fail(e),
    }
}
