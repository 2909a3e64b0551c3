//! Live run against real endpoints. Set `LLHKG_LIVE_CONFIG` to a pipeline
//! config whose extractor, corrector and embedder point at running servers
//! and whose corpus holds HyperRED test documents (`ingest` is run when the
//! corpus file is missing). `LLHKG_LIVE_DOCS` picks the sample size
//! (default and minimum 200).

use std::path::PathBuf;

use llhkg::pipeline::{resume_run, Overrides, Selection, Session};

use crate::Outcome;

const TARGET_F1: f64 = 0.53;
const BAND: f64 = 0.08;

fn check(config: PathBuf) -> Result<String, String> {
    let session = Session::load(&config, &Overrides::default()).map_err(|e| e.to_string())?;
    if !session.config.paths.corpus.exists() {
        session.ingest(false, None).map_err(|e| e.to_string())?;
    }
    let n: usize = std::env::var("LLHKG_LIVE_DOCS").ok().and_then(|v| v.parse().ok()).unwrap_or(200).max(200);
    let docs = session
        .select(&Selection {
            limit: Some(n),
            ..Selection::default()
        })
        .map_err(|e| e.to_string())?;
    if docs.len() < 200 {
        return Err(format!("corpus has {} documents, need 200", docs.len()));
    }
    let run = session.run(&docs).map_err(|e| e.to_string())?;
    let state = resume_run(&session.config.paths.work_dir).map_err(|e| e.to_string())?;
    let parseable = docs
        .iter()
        .filter(|d| {
            state.extracted.get(&d.id).and_then(|r| r.parse.as_ref()).is_some_and(|p| p.failure.is_none())
        })
        .count();
    let rate = parseable as f64 / docs.len() as f64;
    let f1 = run.report.macro_avg.soft.f1;
    let detail = format!("{} docs, parseable {:.1}%, soft macro F1 {f1:.4}", docs.len(), rate * 100.0);
    if rate < 0.95 {
        return Err(format!("{detail}: parseable rate below 95%"));
    }
    if (f1 - TARGET_F1).abs() > BAND {
        return Err(format!("{detail}: outside {TARGET_F1} ± {BAND}"));
    }
    Ok(detail)
}

pub fn reproduction() -> Outcome {
    let Some(config) = std::env::var_os("LLHKG_LIVE_CONFIG").map(PathBuf::from) else {
        return Outcome::Skip("manual check; set LLHKG_LIVE_CONFIG to run against live endpoints".into());
    };
    match check(config) {
        Ok(d) => Outcome::Pass(d),
        Err(e) => Outcome::Fail(e),
    }
}
