//! Budgeted beam search over extraction prompts.
//!
//! The search space is instruction × exemplar strategy × exemplar count.
//! Candidates are scored by the macro soft F1 of the full extraction (and
//! correction, when enabled) pipeline on a fixed, seeded dev subset.

use std::collections::HashSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{rank_exemplar_pool, Document, Exemplar, ExemplarStrategy};
use crate::evaluation::{score_corpus, EvalError, ReportMetadata};
use crate::extraction::PromptSpec;
use crate::gateway::{Embedder, Gateway, GatewayError};
use crate::hrkg::FORMAT_VERSION;
use crate::stages::{run_documents, StageSettings};

#[derive(Debug, thiserror::Error)]
pub enum OptError {
    #[error("training split is empty")]
    EmptyTrain,
    #[error("dev split is empty")]
    EmptyDev,
    #[error("invalid optimizer config: {0}")]
    Config(String),
    #[error("call budget of {budget} exhausted before any candidate was scored")]
    BudgetExhausted { budget: u64 },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

fn default_beam() -> usize {
    3
}
fn default_iterations() -> u32 {
    4
}
fn default_subset() -> usize {
    20
}
fn default_budget() -> u64 {
    2000
}
fn default_strategies() -> Vec<ExemplarStrategy> {
    vec![ExemplarStrategy::FirstK, ExemplarStrategy::QualifierRich]
}
fn default_counts() -> Vec<usize> {
    vec![2, 4, 6]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "default_beam")]
    pub beam_width: usize,
    #[serde(default = "default_iterations")]
    pub max_iterations: u32,
    #[serde(default = "default_subset")]
    pub dev_subset_size: usize,
    #[serde(default = "default_budget")]
    pub call_budget: u64,
    #[serde(default)]
    pub mutation_seed: u64,
    #[serde(default)]
    pub instruction_bank: Vec<String>,
    #[serde(default = "default_strategies")]
    pub exemplar_strategies: Vec<ExemplarStrategy>,
    #[serde(default = "default_counts")]
    pub exemplar_counts: Vec<usize>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            beam_width: default_beam(),
            max_iterations: default_iterations(),
            dev_subset_size: default_subset(),
            call_budget: default_budget(),
            mutation_seed: 0,
            instruction_bank: vec![crate::extraction::DEFAULT_INSTRUCTION.to_string()],
            exemplar_strategies: default_strategies(),
            exemplar_counts: default_counts(),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), OptError> {
        let fail = |m: &str| Err(OptError::Config(m.to_string()));
        if self.beam_width == 0 {
            return fail("beam_width must be >= 1");
        }
        if self.call_budget == 0 {
            return fail("call_budget must be > 0");
        }
        if self.dev_subset_size == 0 {
            return fail("dev_subset_size must be >= 1");
        }
        if self.instruction_bank.is_empty() || self.instruction_bank.iter().any(|i| i.trim().is_empty()) {
            return fail("instruction_bank must hold at least one non-empty instruction");
        }
        if self.exemplar_strategies.is_empty() {
            return fail("exemplar_strategies must not be empty");
        }
        if self.exemplar_counts.is_empty() {
            return fail("exemplar_counts must not be empty");
        }
        Ok(())
    }

    fn count_range(&self) -> (usize, usize) {
        let min = self.exemplar_counts.iter().copied().min().unwrap_or(0);
        let max = self.exemplar_counts.iter().copied().max().unwrap_or(0);
        (min, max)
    }
}

/// The searchable part of a prompt.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Genome {
    pub instruction: usize,
    pub strategy: ExemplarStrategy,
    pub count: usize,
    pub exemplar_ids: Vec<String>,
}

impl Genome {
    fn id(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("genome serialization is infallible");
        format!("c{}", &hex::encode(Sha256::digest(bytes))[..12])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lineage {
    pub parent: String,
    pub mutation: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub id: String,
    pub genome: Genome,
    pub spec: PromptSpec,
    pub score: Option<f64>,
    pub lineage: Option<Lineage>,
    pub iteration: u32,
}

impl Candidate {
    fn build(genome: Genome, base: &PromptSpec, config: &OptimizerConfig, train: &[Document], lineage: Option<Lineage>, iteration: u32) -> Self {
        let exemplars: Vec<Exemplar> = genome
            .exemplar_ids
            .iter()
            .filter_map(|id| train.iter().find(|d| &d.id == id))
            .map(Exemplar::from)
            .collect();
        let mut spec = base.clone();
        spec.instruction = config.instruction_bank[genome.instruction].clone();
        spec.exemplars = exemplars;
        Self {
            id: genome.id(),
            genome,
            spec,
            score: None,
            lineage,
            iteration,
        }
    }
}

fn ranked_ids(train: &[Document], strategy: ExemplarStrategy) -> Vec<String> {
    rank_exemplar_pool(train, strategy).into_iter().map(|d| d.id.clone()).collect()
}

/// Cartesian product of instructions, strategies and counts, sampled down
/// to `4 * beam_width` candidates when larger.
pub fn seed_candidates(config: &OptimizerConfig, base: &PromptSpec, train: &[Document]) -> Result<Vec<Candidate>, OptError> {
    config.validate()?;
    if train.is_empty() {
        return Err(OptError::EmptyTrain);
    }
    let mut genomes = Vec::new();
    for instruction in 0..config.instruction_bank.len() {
        for &strategy in &config.exemplar_strategies {
            let ranked = ranked_ids(train, strategy);
            for &count in &config.exemplar_counts {
                genomes.push(Genome {
                    instruction,
                    strategy,
                    count,
                    exemplar_ids: ranked.iter().take(count).cloned().collect(),
                });
            }
        }
    }
    let limit = config.beam_width.saturating_mul(4);
    if genomes.len() > limit {
        let mut rng = ChaCha8Rng::seed_from_u64(config.mutation_seed);
        let mut picked: Vec<usize> = (0..genomes.len()).collect::<Vec<_>>().choose_multiple(&mut rng, limit).copied().collect();
        picked.sort_unstable();
        genomes = picked.into_iter().map(|i| genomes[i].clone()).collect();
    }
    let mut seen = HashSet::new();
    Ok(genomes
        .into_iter()
        .map(|g| Candidate::build(g, base, config, train, None, 0))
        .filter(|c| seen.insert(c.id.clone()))
        .collect())
}

fn mutation_rng(candidate_id: &str, seed: u64, iteration: u32) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(candidate_id.as_bytes());
    h.update(seed.to_le_bytes());
    h.update(iteration.to_le_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 32];
    bytes.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(bytes)
}

/// Up to three children: exemplar swap, exemplar count ±2 (clamped to the
/// configured range), and the next instruction in the bank.
pub fn mutate(candidate: &Candidate, config: &OptimizerConfig, base: &PromptSpec, train: &[Document], iteration: u32) -> Vec<Candidate> {
    let mut rng = mutation_rng(&candidate.id, config.mutation_seed, iteration);
    let parent = &candidate.genome;
    let mut children = Vec::new();
    let mut child = |genome: Genome, label: &str| {
        if genome != *parent {
            children.push(Candidate::build(
                genome,
                base,
                config,
                train,
                Some(Lineage {
                    parent: candidate.id.clone(),
                    mutation: label.to_string(),
                }),
                iteration,
            ));
        }
    };

    let ranked = ranked_ids(train, parent.strategy);
    let unused: Vec<&String> = ranked.iter().filter(|id| !parent.exemplar_ids.contains(id)).collect();

    if !parent.exemplar_ids.is_empty() && !unused.is_empty() {
        let mut genome = parent.clone();
        let slot = rng.random_range(0..genome.exemplar_ids.len());
        let replacement = unused.choose(&mut rng).expect("non-empty");
        genome.exemplar_ids[slot] = (*replacement).clone();
        child(genome, "exemplar-swap");
    }

    let (min, max) = config.count_range();
    let mut options: Vec<usize> = [(parent.count + 2).min(max), parent.count.saturating_sub(2).max(min)]
        .into_iter()
        .filter(|c| *c != parent.count)
        .collect();
    options.dedup();
    if let Some(&count) = options.choose(&mut rng) {
        let mut genome = parent.clone();
        genome.count = count;
        if count > parent.count {
            let extra = count - parent.count;
            genome.exemplar_ids.extend(unused.iter().take(extra).map(|s| (*s).clone()));
        } else {
            genome.exemplar_ids.truncate(count);
        }
        let label = if count > parent.count { "count+2" } else { "count-2" };
        child(genome, label);
    }

    if config.instruction_bank.len() > 1 {
        let mut genome = parent.clone();
        genome.instruction = (parent.instruction + 1) % config.instruction_bank.len();
        child(genome, "instruction-swap");
    }
    children
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub id: String,
    pub iteration: u32,
    #[serde(default)]
    pub lineage: Option<Lineage>,
    pub instruction: usize,
    pub strategy: String,
    pub count: usize,
    pub exemplar_ids: Vec<String>,
    pub score: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    MaxIterations,
    BudgetExhausted,
    NoNewCandidates,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchTrace {
    pub format_version: String,
    pub dev_subset: Vec<String>,
    pub call_budget: u64,
    pub calls_used: u64,
    pub stop_reason: StopReason,
    pub best_id: String,
    pub best_score: f64,
    /// Best score seen so far, one entry per completed iteration (0 = seeds).
    pub best_so_far: Vec<f64>,
    pub candidates: Vec<TraceEntry>,
}

impl SearchTrace {
    pub fn to_json(&self) -> Vec<u8> {
        let mut bytes = serde_json::to_vec_pretty(self).expect("trace serialization is infallible");
        bytes.push(b'\n');
        bytes
    }
}

/// Seeded sample of the dev split, kept in dev order.
pub fn dev_subset(dev: &[Document], size: usize, seed: u64) -> Vec<Document> {
    if dev.len() <= size {
        return dev.to_vec();
    }
    let mut idx: Vec<usize> = (0..dev.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_d3f5));
    let mut picked = idx[..size].to_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| dev[i].clone()).collect()
}

fn rank(a: &Candidate, b: &Candidate) -> std::cmp::Ordering {
    let sa = a.score.unwrap_or(f64::NEG_INFINITY);
    let sb = b.score.unwrap_or(f64::NEG_INFINITY);
    sb.total_cmp(&sa).then_with(|| a.id.cmp(&b.id))
}

pub struct Optimizer<'a> {
    pub gateway: &'a Gateway,
    pub embedder: &'a dyn Embedder,
    pub settings: StageSettings,
    pub base: PromptSpec,
}

impl Optimizer<'_> {
    fn score(&self, candidate: &Candidate, subset: &[Document]) -> Result<f64, OptError> {
        let outcomes = run_documents(self.gateway, subset, &candidate.spec, &self.settings)?;
        let results: Vec<_> = subset
            .iter()
            .cloned()
            .zip(outcomes.iter().map(|o| o.final_facts().to_vec()))
            .collect();
        let mut meta = ReportMetadata::new(self.embedder.model_id());
        meta.timestamp = None;
        let report = score_corpus(&results, self.embedder, meta)?;
        Ok(report.macro_avg.soft.f1)
    }

    /// Beam search; returns the best prompt seen and the full trace.
    pub fn optimize(&self, train: &[Document], dev: &[Document], config: &OptimizerConfig) -> Result<(PromptSpec, SearchTrace), OptError> {
        config.validate()?;
        if dev.is_empty() {
            return Err(OptError::EmptyDev);
        }
        let subset = dev_subset(dev, config.dev_subset_size, config.mutation_seed);
        let cost = subset.len() as u64 * self.settings.max_calls_per_document();
        let start_calls = self.gateway.stats().chat_requests;
        let used = || self.gateway.stats().chat_requests - start_calls;

        let mut pending = seed_candidates(config, &self.base, train)?;
        let mut seen: HashSet<String> = pending.iter().map(|c| c.id.clone()).collect();
        let mut trace: Vec<Candidate> = Vec::new();
        let mut beam: Vec<Candidate> = Vec::new();
        let mut best_so_far = Vec::new();
        let mut stop = StopReason::MaxIterations;

        'search: for iteration in 0..=config.max_iterations {
            if iteration > 0 {
                pending = beam
                    .iter()
                    .flat_map(|c| mutate(c, config, &self.base, train, iteration))
                    .filter(|c| seen.insert(c.id.clone()))
                    .collect();
                if pending.is_empty() {
                    stop = StopReason::NoNewCandidates;
                    break;
                }
            }
            let mut scored = Vec::with_capacity(pending.len());
            let mut exhausted = false;
            for mut candidate in std::mem::take(&mut pending) {
                if used() + cost > config.call_budget {
                    exhausted = true;
                    trace.push(candidate);
                    continue;
                }
                candidate.score = Some(self.score(&candidate, &subset)?);
                log::info!(
                    "iteration {iteration}: {} scored {:.4}",
                    candidate.id,
                    candidate.score.unwrap_or_default()
                );
                trace.push(candidate.clone());
                scored.push(candidate);
            }
            beam.extend(scored);
            beam.sort_by(rank);
            beam.truncate(config.beam_width);
            if let Some(best) = trace.iter().filter(|c| c.score.is_some()).min_by(|a, b| rank(a, b)) {
                best_so_far.push(best.score.unwrap_or_default());
            }
            if exhausted {
                stop = StopReason::BudgetExhausted;
                break 'search;
            }
        }

        let best = trace
            .iter()
            .filter(|c| c.score.is_some())
            .min_by(|a, b| rank(a, b))
            .cloned()
            .ok_or(OptError::BudgetExhausted {
                budget: config.call_budget,
            })?;
        let search = SearchTrace {
            format_version: FORMAT_VERSION.into(),
            dev_subset: subset.iter().map(|d| d.id.clone()).collect(),
            call_budget: config.call_budget,
            calls_used: used(),
            stop_reason: stop,
            best_id: best.id.clone(),
            best_score: best.score.unwrap_or_default(),
            best_so_far,
            candidates: trace
                .iter()
                .map(|c| TraceEntry {
                    id: c.id.clone(),
                    iteration: c.iteration,
                    lineage: c.lineage.clone(),
                    instruction: c.genome.instruction,
                    strategy: c.genome.strategy.label(),
                    count: c.genome.count,
                    exemplar_ids: c.genome.exemplar_ids.clone(),
                    score: c.score,
                })
                .collect(),
        };
        Ok((best.spec, search))
    }
}
