use llhkg::hrkg::{ExportFormat, Provenance};
use llhkg::{HrkGraph, HyperRelationalFact};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::Outcome;

const ATOMS: &[&str] = &[
    "Obama", "Nobel Prize", "a|b", "k=v", "back\\slash", "tab\there", "  padded  ", "Ünïcödé", "e\u{301}", "東京",
    "\"quoted\"", "2009", "|", "=", "\\", "x",
];

fn field(rng: &mut ChaCha8Rng) -> String {
    (0..rng.random_range(1..=3))
        .map(|_| ATOMS[rng.random_range(0..ATOMS.len())])
        .collect::<Vec<_>>()
        .join(" ")
}

fn random_graph(rng: &mut ChaCha8Rng) -> HrkGraph {
    let mut graph = HrkGraph::new();
    for _ in 0..rng.random_range(0..3) {
        graph.add_source_id(format!("doc-{:06}", rng.random_range(0..50)));
    }
    let facts: Vec<HyperRelationalFact> = (0..rng.random_range(0..12))
        .map(|_| {
            let quals: Vec<(String, String)> =
                (0..rng.random_range(0..4)).map(|_| (field(rng), field(rng))).collect();
            let fact = HyperRelationalFact::new(&field(rng), &field(rng), &field(rng), quals).unwrap();
            if rng.random_bool(0.5) {
                fact.with_provenance(Provenance::new(format!("doc-{}", rng.random_range(0..9)), rng.random_range(0..3)))
            } else {
                fact
            }
        })
        .collect();
    graph.insert(facts)
}

pub fn round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut total_facts = 0;
    for case in 0..100 {
        let graph = random_graph(&mut rng);
        total_facts += graph.len();
        let first = graph.export(ExportFormat::CanonicalJson);
        let back = match HrkGraph::import(&first, ExportFormat::CanonicalJson) {
            Ok(g) => g,
            Err(e) => return Outcome::Fail(format!("graph {case}: import failed: {e}")),
        };
        let second = back.export(ExportFormat::CanonicalJson);
        if first != second {
            return Outcome::Fail(format!(
                "graph {case}: exports differ\n{}\n---\n{}",
                String::from_utf8_lossy(&first),
                String::from_utf8_lossy(&second)
            ));
        }
    }
    Outcome::Pass(format!("100 graphs ({total_facts} facts) byte-identical"))
}
