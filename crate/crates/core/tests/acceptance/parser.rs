use std::collections::HashSet;
use std::panic::{catch_unwind, AssertUnwindSafe};

use llhkg::extraction::{ParseError, ParsedOutput};
use llhkg::{parse_llm_output, HyperRelationalFact};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use crate::common::manifest_dir;
use crate::Outcome;

fn check_fixture(fixture: &Value) -> Result<(), String> {
    let input = fixture["input"].as_str().ok_or("fixture without input")?;
    let expect = &fixture["expect"];
    match (parse_llm_output(input), expect.get("error")) {
        (Err(ParseError::Unparseable { raw }), Some(_)) => {
            if raw == input {
                Ok(())
            } else {
                Err("error does not carry the raw text".into())
            }
        }
        (Ok(parsed), Some(_)) => Err(format!("expected an error, got {:?}", parsed.facts)),
        (Err(e), None) => Err(format!("unexpected error: {e}")),
        (Ok(parsed), None) => {
            let facts: Vec<String> = parsed.facts.iter().map(|f| f.canonical()).collect();
            let want: Vec<String> = serde_json::from_value(expect["facts"].clone()).map_err(|e| e.to_string())?;
            if facts != want {
                return Err(format!("facts {facts:?}, expected {want:?}"));
            }
            let tier = serde_json::to_value(parsed.diagnostics.tier).unwrap();
            if tier != expect["tier"] {
                return Err(format!("tier {tier}, expected {}", expect["tier"]));
            }
            let dropped = serde_json::to_value(&parsed.diagnostics.dropped).unwrap();
            if dropped != expect["dropped"] {
                return Err(format!("dropped {dropped}, expected {}", expect["dropped"]));
            }
            Ok(())
        }
    }
}

pub fn fixtures() -> Outcome {
    let path = manifest_dir().join("tests/data/parser_fixtures.json");
    let corpus: Value = serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
    let fixtures = corpus["fixtures"].as_array().unwrap();
    let mut failures = Vec::new();
    for fixture in fixtures {
        if let Err(e) = check_fixture(fixture) {
            failures.push(format!("`{}`: {e}", fixture["name"].as_str().unwrap_or("?")));
        }
    }
    if fixtures.len() < 20 {
        return Outcome::Fail(format!("only {} fixtures", fixtures.len()));
    }
    if failures.is_empty() {
        Outcome::Pass(format!("{}/{} fixtures", fixtures.len(), fixtures.len()))
    } else {
        Outcome::Fail(failures.join("; "))
    }
}

/// Valid output: non-empty normalized fields, no duplicates, canonical
/// strings that parse back to the same fact, sorted unique drop indices.
fn well_formed(parsed: &ParsedOutput) -> Result<(), String> {
    let mut seen = HashSet::new();
    for fact in &parsed.facts {
        let canonical = fact.canonical();
        if !seen.insert(canonical.clone()) {
            return Err(format!("duplicate fact {canonical}"));
        }
        if [fact.subject(), fact.relation(), fact.object()].iter().any(|s| s.trim().is_empty()) {
            return Err(format!("empty field in {canonical}"));
        }
        let back = HyperRelationalFact::parse_canonical(&canonical).map_err(|e| e.to_string())?;
        if back.canonical() != canonical {
            return Err(format!("canonical round trip changed {canonical}"));
        }
    }
    let idx: Vec<usize> = parsed.diagnostics.dropped.iter().map(|d| d.index).collect();
    if idx.windows(2).any(|w| w[0] >= w[1]) {
        return Err(format!("drop indices not increasing: {idx:?}"));
    }
    Ok(())
}

const PIECES: &[&str] = &[
    "[", "]", "{", "}", "\"", ",", ":", "//", "\n", "\\", "```", "```json\n", "\"subject\"", "\"relation\"",
    "\"object\"", "\"qualifiers\"", "\"key\"", "\"value\"", "\"A\"", "\"r\"", "null", "1", " ", "é", "|", "=",
];

fn random_input(rng: &mut ChaCha8Rng) -> Vec<u8> {
    let len = rng.random_range(0..200);
    if rng.random_bool(0.5) {
        (0..len).map(|_| rng.random()).collect()
    } else {
        // structured noise: fragments of the expected JSON shape
        (0..len / 3)
            .flat_map(|_| PIECES[rng.random_range(0..PIECES.len())].bytes())
            .collect()
    }
}

pub fn fuzz() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xF022);
    let (mut ok, mut unparseable) = (0, 0);
    for case in 0..10_000 {
        let bytes = random_input(&mut rng);
        let text = String::from_utf8_lossy(&bytes).into_owned();
        let result = match catch_unwind(AssertUnwindSafe(|| parse_llm_output(&text))) {
            Ok(r) => r,
            Err(_) => return Outcome::Fail(format!("case {case} panicked on {text:?}")),
        };
        match result {
            Ok(parsed) => {
                if let Err(e) = well_formed(&parsed) {
                    return Outcome::Fail(format!("case {case} on {text:?}: {e}"));
                }
                ok += 1;
            }
            Err(ParseError::Unparseable { raw }) => {
                if raw != text {
                    return Outcome::Fail(format!("case {case}: error lost the raw text"));
                }
                unparseable += 1;
            }
        }
    }
    Outcome::Pass(format!("10000 inputs, no crashes ({ok} parsed, {unparseable} unparseable)"))
}
