//! Randomized comparisons of the metrics against independent
//! reimplementations written from the definitions.

use std::time::Instant;

use llhkg::evaluation::{soft_scores, strict_scores};
use llhkg::gateway::StubEmbedder;
use llhkg::{HyperRelationalFact, StrictMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::Outcome;

const VOCAB: &[&str] = &[
    "Obama", "obama", "president", "United", "States", "2009", "Curie", "Nobel", "prize", "physics", "Paris",
    "France", "capital", "of", "the", "in", "Berlin", "1903", "award", "team",
];
const RELATIONS: &[&str] = &["position held", "award received", "capital", "member of"];
const KEYS: &[&str] = &["start time", "end time", "point in time", "location"];

/// Plain tuple form: (subject, relation, object, qualifiers as given).
type RawFact = (String, String, String, Vec<(String, String)>);

fn phrase(rng: &mut ChaCha8Rng) -> String {
    let n = rng.random_range(1..=4);
    (0..n)
        .map(|_| VOCAB[rng.random_range(0..VOCAB.len())])
        .collect::<Vec<_>>()
        .join(" ")
}

fn raw_fact(rng: &mut ChaCha8Rng) -> RawFact {
    let qualifiers = (0..rng.random_range(0..=2))
        .map(|_| (KEYS[rng.random_range(0..KEYS.len())].to_string(), phrase(rng)))
        .collect();
    (
        phrase(rng),
        RELATIONS[rng.random_range(0..RELATIONS.len())].to_string(),
        phrase(rng),
        qualifiers,
    )
}

fn raw_facts(rng: &mut ChaCha8Rng, pool: &[RawFact]) -> Vec<RawFact> {
    (0..rng.random_range(0..=6))
        .map(|_| {
            // reuse pool entries so exact and partial matches are common
            if !pool.is_empty() && rng.random_bool(0.5) {
                pool[rng.random_range(0..pool.len())].clone()
            } else {
                raw_fact(rng)
            }
        })
        .collect()
}

fn to_fact(raw: &RawFact) -> HyperRelationalFact {
    HyperRelationalFact::new(&raw.0, &raw.1, &raw.2, raw.3.iter().map(|(k, v)| (k.as_str(), v.as_str()))).unwrap()
}

/// Sorted, deduplicated qualifiers.
fn oracle_qualifiers(raw: &RawFact) -> Vec<(String, String)> {
    let mut q = raw.3.clone();
    q.sort();
    q.dedup();
    q
}

/// Canonical line as documented: fields joined by " | ", qualifiers as key=value.
fn oracle_canonical(raw: &RawFact) -> String {
    let mut parts = vec![raw.0.clone(), raw.1.clone(), raw.2.clone()];
    parts.extend(oracle_qualifiers(raw).into_iter().map(|(k, v)| format!("{k}={v}")));
    parts.join(" | ")
}

fn oracle_fnv(bytes: &[u8]) -> u64 {
    let mut h: u64 = 14695981039346656037;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(1099511628211);
    }
    h
}

fn oracle_embed(text: &str) -> Vec<f64> {
    let mut v = vec![0.0f64; 256];
    for token in text.to_lowercase().split_whitespace() {
        v[(oracle_fnv(token.as_bytes()) % 256) as usize] += 1.0;
    }
    let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in &mut v {
            *x /= norm;
        }
    }
    v
}

fn oracle_sim(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    for i in 0..a.len() {
        dot += a[i] * b[i];
    }
    dot.clamp(0.0, 1.0)
}

fn oracle_f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Each predicted fact takes its best gold similarity (precision), each gold
/// fact its best predicted similarity (recall).
fn oracle_soft(pred: &[RawFact], gold: &[RawFact]) -> (f64, f64, f64) {
    if pred.is_empty() && gold.is_empty() {
        return (1.0, 1.0, 1.0);
    }
    if pred.is_empty() || gold.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    let pe: Vec<Vec<f64>> = pred.iter().map(|f| oracle_embed(&oracle_canonical(f))).collect();
    let ge: Vec<Vec<f64>> = gold.iter().map(|f| oracle_embed(&oracle_canonical(f))).collect();
    let mut p_total = 0.0;
    for a in &pe {
        let mut best = 0.0;
        for b in &ge {
            let s = oracle_sim(a, b);
            if s > best {
                best = s;
            }
        }
        p_total += best;
    }
    let mut r_total = 0.0;
    for b in &ge {
        let mut best = 0.0;
        for a in &pe {
            let s = oracle_sim(a, b);
            if s > best {
                best = s;
            }
        }
        r_total += best;
    }
    let p = p_total / pred.len() as f64;
    let r = r_total / gold.len() as f64;
    (p, r, oracle_f1(p, r))
}

pub fn soft_oracle() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(20_241_001);
    let mut worst: f64 = 0.0;
    for case in 0..1000 {
        let gold_raw = raw_facts(&mut rng, &[]);
        let pred_raw = raw_facts(&mut rng, &gold_raw);
        let pred: Vec<_> = pred_raw.iter().map(to_fact).collect();
        let gold: Vec<_> = gold_raw.iter().map(to_fact).collect();
        let got = soft_scores(&pred, &gold, &StubEmbedder).unwrap();
        let (p, r, f) = oracle_soft(&pred_raw, &gold_raw);
        let diff = (got.precision - p).abs().max((got.recall - r).abs()).max((got.f1 - f).abs());
        worst = worst.max(diff);
        if diff > 1e-9 {
            return Outcome::Fail(format!(
                "case {case}: got {got:?}, oracle ({p}, {r}, {f}); pred {pred_raw:?} gold {gold_raw:?}"
            ));
        }
    }
    let secs = started.elapsed().as_secs_f64();
    if secs >= 10.0 {
        return Outcome::Fail(format!("1000 instances took {secs:.2}s"));
    }
    Outcome::Pass(format!("1000 instances, max deviation {worst:.1e}, {secs:.2}s"))
}

fn oracle_strict(pred: &[RawFact], gold: &[RawFact], with_qualifiers: bool) -> (f64, f64, f64) {
    let key = |f: &RawFact| {
        let q = if with_qualifiers { oracle_qualifiers(f) } else { Vec::new() };
        (f.0.clone(), f.1.clone(), f.2.clone(), q)
    };
    let mut p_set: Vec<_> = Vec::new();
    for f in pred {
        let k = key(f);
        if !p_set.contains(&k) {
            p_set.push(k);
        }
    }
    let mut g_set: Vec<_> = Vec::new();
    for f in gold {
        let k = key(f);
        if !g_set.contains(&k) {
            g_set.push(k);
        }
    }
    if p_set.is_empty() && g_set.is_empty() {
        return (1.0, 1.0, 1.0);
    }
    if p_set.is_empty() || g_set.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    let hits = p_set.iter().filter(|k| g_set.contains(k)).count() as f64;
    let p = hits / p_set.len() as f64;
    let r = hits / g_set.len() as f64;
    (p, r, oracle_f1(p, r))
}

pub fn strict_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut nonzero = 0;
    for case in 0..1000 {
        let gold_raw = raw_facts(&mut rng, &[]);
        let pred_raw = raw_facts(&mut rng, &gold_raw);
        let pred: Vec<_> = pred_raw.iter().map(to_fact).collect();
        let gold: Vec<_> = gold_raw.iter().map(to_fact).collect();
        for (mode, quals) in [(StrictMode::Full, true), (StrictMode::TripleOnly, false)] {
            let got = strict_scores(&pred, &gold, mode);
            let want = oracle_strict(&pred_raw, &gold_raw, quals);
            if (got.precision, got.recall, got.f1) != want {
                return Outcome::Fail(format!("case {case} {mode:?}: got {got:?}, naive {want:?}"));
            }
            if want.2 > 0.0 && want.2 < 1.0 {
                nonzero += 1;
            }
        }
    }
    Outcome::Pass(format!("1000 instances x 2 modes exact ({nonzero} with partial overlap)"))
}
