//! Spot-check of the loader against hand-inspected records of the real
//! dataset. Needs two files supplied through the environment:
//!
//! * `LLHKG_HYPERRED_FILE`: a HyperRED split file (JSON lines or array).
//! * `LLHKG_HYPERRED_ORACLE`: expectations written by reading the raw
//!   records, not by running the loader:
//!   `{"records": [{"id": "doc-000012", "facts": ["s | r | o | k=v", ...]}]}`
//!   where `id` is the record's own id or `doc-NNNNNN` by 0-based position.

use std::path::PathBuf;

use llhkg::corpus::load_hyperred;
use serde::Deserialize;

use crate::Outcome;

#[derive(Deserialize)]
struct Oracle {
    records: Vec<Expected>,
}

#[derive(Deserialize)]
struct Expected {
    id: String,
    facts: Vec<String>,
}

fn env_path(name: &str) -> Option<PathBuf> {
    std::env::var_os(name).map(PathBuf::from).filter(|p| p.exists())
}

pub fn spot_check() -> Outcome {
    let (Some(data), Some(oracle)) = (env_path("LLHKG_HYPERRED_FILE"), env_path("LLHKG_HYPERRED_ORACLE")) else {
        return Outcome::Blocked(
            "real HyperRED records and their hand-written oracle are not available offline; \
             set LLHKG_HYPERRED_FILE and LLHKG_HYPERRED_ORACLE"
                .into(),
        );
    };
    let oracle: Oracle = match serde_json::from_slice(&std::fs::read(&oracle).unwrap()) {
        Ok(o) => o,
        Err(e) => return Outcome::Fail(format!("oracle file: {e}")),
    };
    if oracle.records.len() < 5 {
        return Outcome::Fail(format!("oracle holds {} records, need 5", oracle.records.len()));
    }
    let docs = match load_hyperred(&data) {
        Ok(d) => d,
        Err(e) => return Outcome::Fail(format!("{}: {e}", data.display())),
    };
    for expected in &oracle.records {
        let Some(doc) = docs.iter().find(|d| d.id == expected.id) else {
            return Outcome::Fail(format!("record `{}` not loaded", expected.id));
        };
        let mut got: Vec<String> = doc.gold.iter().map(|f| f.canonical()).collect();
        let mut want = expected.facts.clone();
        got.sort();
        want.sort();
        if got != want {
            return Outcome::Fail(format!("record `{}`: loader {got:?}, oracle {want:?}", expected.id));
        }
    }
    Outcome::Pass(format!("{} records match", oracle.records.len()))
}
