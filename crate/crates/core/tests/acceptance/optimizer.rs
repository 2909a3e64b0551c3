use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use llhkg::corpus::split_dataset;
use llhkg::extraction::{last_delimited_text, render_fact_array, BEGIN_TEXT};
use llhkg::gateway::{ChatRequest, FnBackend, StubEmbedder};
use llhkg::pipeline::{Overrides, Session};
use llhkg::prompt_opt::{Optimizer, OptimizerConfig, SearchTrace};
use llhkg::stages::StageSettings;
use llhkg::{Document, EndpointConfig, ExemplarStrategy, Gateway, HyperRelationalFact, PromptSpec, Role};

use crate::common::copy_mock;
use crate::Outcome;

fn monotone(trace: &SearchTrace) -> bool {
    trace.best_so_far.windows(2).all(|w| w[1] >= w[0])
}

fn synthetic_corpus() -> Vec<Document> {
    let orgs = ["Acme Corp", "Globex", "Initech", "Umbrella", "Hooli"];
    (0..40)
        .map(|i| {
            let person = format!("Person{i}");
            let org = orgs[i % orgs.len()];
            let year = 1980 + i;
            let text = format!("{person} joined {org} in {year} .");
            let mut gold = vec![HyperRelationalFact::new(&person, "employer", org, [("start time", year.to_string())]).unwrap()];
            if i % 3 == 0 {
                gold.push(HyperRelationalFact::triple(org, "employee", &person).unwrap());
            }
            Document::new(format!("doc-{i:06}"), text, gold)
        })
        .collect()
}

/// Extractor whose answer quality depends on the prompt: qualifiers only
/// when the instruction mentions them, exact objects only with two or more
/// exemplars.
fn quality_backend(docs: &[Document], calls: Arc<AtomicU64>) -> FnBackend<impl Fn(&ChatRequest) -> Result<String, llhkg::gateway::GatewayError> + Send + Sync> {
    let gold: HashMap<String, Vec<HyperRelationalFact>> = docs.iter().map(|d| (d.text.clone(), d.gold.clone())).collect();
    FnBackend(move |req: &ChatRequest| {
        calls.fetch_add(1, Ordering::SeqCst);
        let text = last_delimited_text(&req.user).unwrap_or_default();
        let exemplars = req.user.matches(BEGIN_TEXT).count().saturating_sub(1);
        let instruction = req.system.split("\n\n").next().unwrap_or_default();
        let keep_qualifiers = instruction.contains("qualifier");
        let facts: Vec<HyperRelationalFact> = gold
            .get(&text)
            .cloned()
            .unwrap_or_default()
            .into_iter()
            .map(|f| {
                let object = if exemplars >= 2 { f.object().to_string() } else { format!("{} group", f.object()) };
                let quals: Vec<(String, String)> = if keep_qualifiers {
                    f.qualifiers().iter().map(|q| (q.key().to_string(), q.value().to_string())).collect()
                } else {
                    Vec::new()
                };
                HyperRelationalFact::new(f.subject(), f.relation(), &object, quals).unwrap()
            })
            .collect();
        Ok(render_fact_array(&facts))
    })
}

fn quality_run(docs: &[Document], config: &OptimizerConfig) -> (SearchTrace, u64) {
    let calls = Arc::new(AtomicU64::new(0));
    let gateway = Gateway::new(Arc::new(quality_backend(docs, calls.clone())))
        .with_role(Role::Extractor, EndpointConfig::new("http://mock", "extractor"));
    let split = split_dataset(docs, 3, (0.6, 0.2, 0.2)).unwrap();
    let optimizer = Optimizer {
        gateway: &gateway,
        embedder: &StubEmbedder,
        settings: StageSettings {
            max_attempts: 1,
            correction: None,
            concurrency: 4,
        },
        base: PromptSpec::default(),
    };
    let (_, trace) = optimizer.optimize(&split.train, &split.dev, config).unwrap();
    (trace, calls.load(Ordering::SeqCst))
}

fn check_quality() -> Result<String, String> {
    let docs = synthetic_corpus();
    let config = OptimizerConfig {
        beam_width: 2,
        max_iterations: 4,
        dev_subset_size: 5,
        call_budget: 75,
        mutation_seed: 11,
        instruction_bank: vec![
            "Extract facts as JSON.".into(),
            "Extract facts with every qualifier as JSON.".into(),
            "List the relations in the text.".into(),
        ],
        exemplar_strategies: vec![ExemplarStrategy::FirstK, ExemplarStrategy::QualifierRich],
        exemplar_counts: vec![0, 2],
    };
    let (a, calls_a) = quality_run(&docs, &config);
    let (b, calls_b) = quality_run(&docs, &config);
    if a.to_json() != b.to_json() || calls_a != calls_b {
        return Err("repeated prompt-sensitive searches differ".into());
    }
    if !monotone(&a) {
        return Err(format!("best-so-far not monotone: {:?}", a.best_so_far));
    }
    if calls_a > config.call_budget || a.calls_used != calls_a {
        return Err(format!("{calls_a} backend calls, trace says {}, budget {}", a.calls_used, config.call_budget));
    }
    let mut distinct: Vec<f64> = a.candidates.iter().filter_map(|c| c.score).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 2 {
        return Err("candidate scores do not vary; the property would hold trivially".into());
    }
    Ok(format!(
        "prompt-sensitive backend: best-so-far {:?}, {} of {} calls, {:?}",
        a.best_so_far.iter().map(|s| format!("{s:.3}")).collect::<Vec<_>>(),
        calls_a,
        config.call_budget,
        a.stop_reason
    ))
}

fn check_bundled() -> Result<String, String> {
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let config = copy_mock(dir.path());
        let session = Session::load(&config, &Overrides::default()).map_err(|e| e.to_string())?;
        let (_, trace) = session.optimize().map_err(|e| e.to_string())?;
        let used = session.gateway().stats().chat_requests;
        Ok::<_, String>((trace, used, session.config.optimizer.call_budget))
    };
    let (a, used, budget) = run()?;
    let (b, _, _) = run()?;
    if a.to_json() != b.to_json() {
        return Err("bundled mock traces differ".into());
    }
    if !monotone(&a) || used > budget {
        return Err(format!("bundled mock: best-so-far {:?}, {used} calls of {budget}", a.best_so_far));
    }
    Ok(format!("bundled mock: {used} of {budget} calls"))
}

pub fn properties() -> Outcome {
    match check_quality().and_then(|q| check_bundled().map(|b| format!("{q}; {b}"))) {
        Ok(d) => Outcome::Pass(d),
        Err(e) => Outcome::Fail(e),
    }
}
