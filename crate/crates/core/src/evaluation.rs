//! Fact-level precision, recall and F1.
//!
//! The soft metric embeds each canonical fact string and greedily matches
//! every predicted fact to its most similar gold fact (and vice versa), the
//! way BERTScore matches tokens. Strict metrics use exact canonical-string
//! matching, optionally ignoring qualifiers.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::Document;
use crate::gateway::{Embedder, GatewayError, UnitVector};
use crate::hrkg::{HyperRelationalFact, CANONICAL_VERSION, FORMAT_VERSION};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Embedding(#[from] GatewayError),
    #[error("embedder returned {got} vectors for {expected} texts")]
    EmbeddingCount { expected: usize, got: usize },
    #[error("document `{0}` appears more than once")]
    DuplicateDocument(String),
    #[error("cannot score an empty corpus")]
    EmptyCorpus,
    #[error("score report: {0}")]
    Report(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn new(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            precision,
            recall,
            f1,
        }
    }

    pub const PERFECT: Prf = Prf {
        precision: 1.0,
        recall: 1.0,
        f1: 1.0,
    };

    pub const ZERO: Prf = Prf {
        precision: 0.0,
        recall: 0.0,
        f1: 0.0,
    };

    fn from_counts(matches: usize, predicted: usize, gold: usize) -> Self {
        match (predicted, gold) {
            (0, 0) => Prf::PERFECT,
            (0, _) | (_, 0) => Prf::ZERO,
            _ => Prf::new(matches as f64 / predicted as f64, matches as f64 / gold as f64),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrictMode {
    Full,
    TripleOnly,
}

fn strict_key(fact: &HyperRelationalFact, mode: StrictMode) -> String {
    match mode {
        StrictMode::Full => fact.canonical(),
        StrictMode::TripleOnly => fact.triple_key(),
    }
}

fn strict_counts(pred: &[HyperRelationalFact], gold: &[HyperRelationalFact], mode: StrictMode) -> (usize, usize, usize) {
    let p: HashSet<String> = pred.iter().map(|f| strict_key(f, mode)).collect();
    let g: HashSet<String> = gold.iter().map(|f| strict_key(f, mode)).collect();
    (p.intersection(&g).count(), p.len(), g.len())
}

/// Exact-match scores over deduplicated fact sets.
pub fn strict_scores(pred: &[HyperRelationalFact], gold: &[HyperRelationalFact], mode: StrictMode) -> Prf {
    let (m, p, g) = strict_counts(pred, gold, mode);
    Prf::from_counts(m, p, g)
}

/// Clamped cosine between two embeddings.
pub fn similarity(a: &UnitVector, b: &UnitVector) -> f64 {
    a.cosine(b).clamp(0.0, 1.0)
}

/// Greedy max-matching scores from precomputed embeddings.
pub fn soft_scores_from_vectors(pred: &[&UnitVector], gold: &[&UnitVector]) -> Prf {
    if pred.is_empty() && gold.is_empty() {
        return Prf::PERFECT;
    }
    if pred.is_empty() || gold.is_empty() {
        return Prf::ZERO;
    }
    let sim: Vec<Vec<f64>> = pred
        .iter()
        .map(|p| gold.iter().map(|g| similarity(p, g)).collect())
        .collect();
    let precision = sim
        .iter()
        .map(|row| row.iter().copied().fold(0.0, f64::max))
        .sum::<f64>()
        / pred.len() as f64;
    let recall = (0..gold.len())
        .map(|j| sim.iter().map(|row| row[j]).fold(0.0, f64::max))
        .sum::<f64>()
        / gold.len() as f64;
    Prf::new(precision, recall)
}

fn embed_checked(embedder: &dyn Embedder, texts: &[String]) -> Result<Vec<UnitVector>, EvalError> {
    if texts.is_empty() {
        return Ok(Vec::new());
    }
    let vectors = embedder.embed(texts)?;
    if vectors.len() != texts.len() {
        return Err(EvalError::EmbeddingCount {
            expected: texts.len(),
            got: vectors.len(),
        });
    }
    Ok(vectors)
}

/// Soft precision/recall/F1 between predicted and gold facts.
pub fn soft_scores(
    pred: &[HyperRelationalFact],
    gold: &[HyperRelationalFact],
    embedder: &dyn Embedder,
) -> Result<Prf, EvalError> {
    let texts: Vec<String> = pred.iter().chain(gold).map(|f| f.canonical()).collect();
    let vectors = embed_checked(embedder, &texts)?;
    let (p, g) = vectors.split_at(pred.len());
    Ok(soft_scores_from_vectors(
        &p.iter().collect::<Vec<_>>(),
        &g.iter().collect::<Vec<_>>(),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MatchCounts {
    pub predicted: usize,
    pub gold: usize,
    pub strict_matches: usize,
    pub predicted_triples: usize,
    pub gold_triples: usize,
    pub triple_matches: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocScores {
    pub doc_id: String,
    pub strict: Prf,
    pub strict_triple: Prf,
    pub soft: Prf,
    pub counts: MatchCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub strict: Prf,
    pub strict_triple: Prf,
    pub soft: Prf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub framework: String,
    pub extractor_model: String,
    #[serde(default)]
    pub corrector_model: Option<String>,
    pub embedder_model: String,
    pub canonicalization_version: String,
    /// `None` in normalized reports.
    #[serde(default)]
    pub timestamp: Option<String>,
    pub config_digest: String,
}

impl ReportMetadata {
    pub fn new(embedder_model: impl Into<String>) -> Self {
        Self {
            framework: "LLHKG".into(),
            extractor_model: String::new(),
            corrector_model: None,
            embedder_model: embedder_model.into(),
            canonicalization_version: CANONICAL_VERSION.into(),
            timestamp: Some(chrono::Utc::now().to_rfc3339()),
            config_digest: String::new(),
        }
    }

    /// `extractor&corrector`, or just the extractor without correction.
    pub fn model_label(&self) -> String {
        match &self.corrector_model {
            Some(c) => format!("{}&{}", self.extractor_model, c),
            None => self.extractor_model.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub format_version: String,
    pub documents: Vec<DocScores>,
    pub macro_avg: Aggregate,
    pub micro_strict: Prf,
    pub micro_strict_triple: Prf,
    pub metadata: ReportMetadata,
}

impl ScoreReport {
    /// Drops the timestamp so reports from different runs compare byte-equal.
    pub fn normalized(mut self) -> Self {
        self.metadata.timestamp = None;
        self
    }

    pub fn to_json(&self) -> Vec<u8> {
        let mut bytes = serde_json::to_vec_pretty(self).expect("report serialization is infallible");
        bytes.push(b'\n');
        bytes
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, EvalError> {
        let report: ScoreReport = serde_json::from_slice(bytes)
            .map_err(|e| EvalError::Report(format!("line {}, column {}: {e}", e.line(), e.column())))?;
        if report.format_version != FORMAT_VERSION {
            return Err(EvalError::Report(format!(
                "unsupported format_version `{}`",
                report.format_version
            )));
        }
        Ok(report)
    }

    /// Text table with Framework / Model / Precision / Recall / F1 columns
    /// (macro soft scores), followed by the strict baselines.
    pub fn render_table(&self) -> String {
        let rows = [
            ("Framework", "Model", "Precision".to_string(), "Recall".to_string(), "F1".to_string()),
            (
                self.metadata.framework.as_str(),
                "",
                fmt2(self.macro_avg.soft.precision),
                fmt2(self.macro_avg.soft.recall),
                fmt2(self.macro_avg.soft.f1),
            ),
        ];
        let model = self.metadata.model_label();
        let widths = [
            rows.iter().map(|r| r.0.len()).max().unwrap_or(0),
            model.len().max("Model".len()),
            "Precision".len(),
            "Recall".len(),
            "F1".len().max(4),
        ];
        let line = |cells: [&str; 5]| {
            let mut s = String::from("|");
            for (cell, w) in cells.iter().zip(widths) {
                let _ = write!(s, " {cell:^w$} |");
            }
            s.push('\n');
            s
        };
        let rule = {
            let mut s = String::from("+");
            for w in widths {
                s.push_str(&"-".repeat(w + 2));
                s.push('+');
            }
            s.push('\n');
            s
        };
        let mut out = String::new();
        out.push_str(&rule);
        out.push_str(&line(["Framework", "Model", "Precision", "Recall", "F1"]));
        out.push_str(&rule);
        let r = &rows[1];
        out.push_str(&line([r.0, &model, &r.2, &r.3, &r.4]));
        out.push_str(&rule);
        let _ = writeln!(
            out,
            "documents: {}  embedder: {}",
            self.documents.len(),
            self.metadata.embedder_model
        );
        for (label, prf) in [
            ("strict (macro)", self.macro_avg.strict),
            ("strict triple (macro)", self.macro_avg.strict_triple),
            ("strict (micro)", self.micro_strict),
            ("strict triple (micro)", self.micro_strict_triple),
        ] {
            let _ = writeln!(
                out,
                "{label:<22} P {:.4}  R {:.4}  F1 {:.4}",
                prf.precision, prf.recall, prf.f1
            );
        }
        let _ = writeln!(
            out,
            "{:<22} P {:.4}  R {:.4}  F1 {:.4}",
            "soft (macro)", self.macro_avg.soft.precision, self.macro_avg.soft.recall, self.macro_avg.soft.f1
        );
        out
    }
}

fn fmt2(v: f64) -> String {
    format!("{v:.2}")
}

fn mean(values: impl Iterator<Item = Prf>) -> Prf {
    let mut n = 0usize;
    let (mut p, mut r, mut f) = (0.0, 0.0, 0.0);
    for v in values {
        n += 1;
        p += v.precision;
        r += v.recall;
        f += v.f1;
    }
    if n == 0 {
        return Prf::ZERO;
    }
    let n = n as f64;
    Prf {
        precision: p / n,
        recall: r / n,
        f1: f / n,
    }
}

/// Scores every document and aggregates. Each distinct canonical string is
/// embedded once per call; documents are reported in id order.
pub fn score_corpus(
    results: &[(Document, Vec<HyperRelationalFact>)],
    embedder: &dyn Embedder,
    metadata: ReportMetadata,
) -> Result<ScoreReport, EvalError> {
    if results.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let mut seen = HashSet::new();
    for (doc, _) in results {
        if !seen.insert(doc.id.as_str()) {
            return Err(EvalError::DuplicateDocument(doc.id.clone()));
        }
    }

    let unique: BTreeSet<String> = results
        .iter()
        .flat_map(|(doc, pred)| pred.iter().chain(&doc.gold))
        .map(|f| f.canonical())
        .collect();
    let texts: Vec<String> = unique.into_iter().collect();
    let vectors = embed_checked(embedder, &texts)?;
    let lookup: HashMap<&str, &UnitVector> = texts.iter().map(String::as_str).zip(vectors.iter()).collect();

    let mut ordered: Vec<&(Document, Vec<HyperRelationalFact>)> = results.iter().collect();
    ordered.sort_by(|a, b| a.0.id.cmp(&b.0.id));

    let mut documents = Vec::with_capacity(ordered.len());
    let mut pooled = BTreeMap::<&str, usize>::new();
    for (doc, pred) in ordered {
        let vec_of = |facts: &[HyperRelationalFact]| -> Vec<&UnitVector> {
            facts.iter().map(|f| lookup[f.canonical().as_str()]).collect()
        };
        let soft = soft_scores_from_vectors(&vec_of(pred), &vec_of(&doc.gold));
        let (m, p, g) = strict_counts(pred, &doc.gold, StrictMode::Full);
        let (tm, tp, tg) = strict_counts(pred, &doc.gold, StrictMode::TripleOnly);
        for (k, v) in [("m", m), ("p", p), ("g", g), ("tm", tm), ("tp", tp), ("tg", tg)] {
            *pooled.entry(k).or_default() += v;
        }
        documents.push(DocScores {
            doc_id: doc.id.clone(),
            strict: Prf::from_counts(m, p, g),
            strict_triple: Prf::from_counts(tm, tp, tg),
            soft,
            counts: MatchCounts {
                predicted: p,
                gold: g,
                strict_matches: m,
                predicted_triples: tp,
                gold_triples: tg,
                triple_matches: tm,
            },
        });
    }

    let macro_avg = Aggregate {
        strict: mean(documents.iter().map(|d| d.strict)),
        strict_triple: mean(documents.iter().map(|d| d.strict_triple)),
        soft: mean(documents.iter().map(|d| d.soft)),
    };
    Ok(ScoreReport {
        format_version: FORMAT_VERSION.into(),
        micro_strict: Prf::from_counts(pooled["m"], pooled["p"], pooled["g"]),
        micro_strict_triple: Prf::from_counts(pooled["tm"], pooled["tp"], pooled["tg"]),
        documents,
        macro_avg,
        metadata,
    })
}
