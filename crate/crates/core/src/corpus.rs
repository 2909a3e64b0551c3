//! HyperRED ingestion, deterministic splits and few-shot exemplar selection.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::hrkg::{FactError, HyperRelationalFact, Provenance, Qualifier, FORMAT_VERSION};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("record {line}: malformed field `{field}`: {message}")]
    Malformed {
        line: usize,
        field: String,
        message: String,
    },
    #[error("record {line}: {message}")]
    Validation { line: usize, message: String },
    #[error("duplicate document id `{0}`")]
    DuplicateId(String),
    #[error("invalid split fractions: {0}")]
    Fractions(String),
    #[error("corpus document: {0}")]
    Interchange(String),
}

/// A source text with optional tokenization and gold facts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<Vec<String>>,
    #[serde(default)]
    pub gold: Vec<HyperRelationalFact>,
}

impl Document {
    /// Builds a document and stamps provenance on every gold fact.
    pub fn new(id: impl Into<String>, text: impl Into<String>, gold: Vec<HyperRelationalFact>) -> Self {
        let id = id.into();
        let gold = gold
            .into_iter()
            .map(|f| f.with_provenance(Provenance::new(id.clone(), 0)))
            .collect();
        Self {
            id,
            text: text.into(),
            tokens: None,
            gold,
        }
    }

    pub fn qualifier_count(&self) -> usize {
        self.gold.iter().map(|f| f.qualifiers().len()).sum()
    }

    fn validate(&self) -> Result<(), String> {
        if self.text.trim().is_empty() {
            return Err(format!("document `{}` has empty text", self.id));
        }
        if let Some(tokens) = &self.tokens {
            if tokens.join(" ") != self.text {
                return Err(format!("document `{}` text does not match its tokens", self.id));
            }
        }
        for fact in &self.gold {
            match fact.provenance() {
                Some(p) if p.document_id == self.id => {}
                _ => return Err(format!("document `{}` has a gold fact with foreign provenance", self.id)),
            }
        }
        Ok(())
    }
}

/// Record-level failure policy for [`load_hyperred`].
#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    /// Skip records with invalid spans instead of failing.
    pub lenient: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkippedRecord {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct LoadedCorpus {
    pub documents: Vec<Document>,
    pub skipped: Vec<SkippedRecord>,
}

#[derive(Debug, Deserialize)]
struct HyperRedRecord {
    #[serde(default)]
    id: Option<String>,
    tokens: Vec<String>,
    #[serde(default)]
    relations: Vec<HyperRedRelation>,
}

#[derive(Debug, Deserialize)]
struct HyperRedRelation {
    head: Vec<i64>,
    tail: Vec<i64>,
    label: String,
    #[serde(default)]
    qualifiers: Vec<HyperRedQualifier>,
}

#[derive(Debug, Deserialize)]
struct HyperRedQualifier {
    span: Vec<i64>,
    label: String,
}

/// Loads a HyperRED file in strict mode.
pub fn load_hyperred(path: &Path) -> Result<Vec<Document>, CorpusError> {
    load_hyperred_with(path, LoadOptions::default()).map(|c| c.documents)
}

/// Loads a HyperRED file (JSON lines or a JSON array, autodetected).
///
/// Record numbers in errors are 1-based line numbers for JSON lines input
/// and 1-based element positions for array input.
pub fn load_hyperred_with(path: &Path, options: LoadOptions) -> Result<LoadedCorpus, CorpusError> {
    let raw = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_hyperred(&raw, options)
}

pub fn parse_hyperred(raw: &str, options: LoadOptions) -> Result<LoadedCorpus, CorpusError> {
    let records: Vec<(usize, serde_json::Value)> = if raw.trim_start().starts_with('[') {
        let values: Vec<serde_json::Value> =
            serde_json::from_str(raw).map_err(|e| CorpusError::Malformed {
                line: e.line(),
                field: "<array>".into(),
                message: e.to_string(),
            })?;
        values.into_iter().enumerate().map(|(i, v)| (i + 1, v)).collect()
    } else {
        let mut out = Vec::new();
        for (i, line) in raw.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let value = serde_json::from_str(line).map_err(|e| CorpusError::Malformed {
                line: i + 1,
                field: "<record>".into(),
                message: e.to_string(),
            })?;
            out.push((i + 1, value));
        }
        out
    };

    let mut documents = Vec::with_capacity(records.len());
    let mut skipped = Vec::new();
    let mut ids = HashSet::new();
    for (ordinal, (line, value)) in records.into_iter().enumerate() {
        let record: HyperRedRecord =
            serde_json::from_value(value).map_err(|e| CorpusError::Malformed {
                line,
                field: malformed_field(&e.to_string()),
                message: e.to_string(),
            })?;
        let id = record
            .id
            .clone()
            .unwrap_or_else(|| format!("doc-{ordinal:06}"));
        match convert_record(&id, record, line) {
            Ok(doc) => {
                if !ids.insert(doc.id.clone()) {
                    return Err(CorpusError::DuplicateId(doc.id));
                }
                documents.push(doc);
            }
            Err(CorpusError::Validation { line, message }) if options.lenient => {
                log::warn!("skipping record {line}: {message}");
                skipped.push(SkippedRecord { line, reason: message });
            }
            Err(e) => return Err(e),
        }
    }
    Ok(LoadedCorpus { documents, skipped })
}

fn malformed_field(message: &str) -> String {
    // serde reports "missing field `x`" / "invalid type ... expected ..."
    message
        .split('`')
        .nth(1)
        .map(str::to_string)
        .unwrap_or_else(|| "<record>".into())
}

fn span_text(tokens: &[String], span: &[i64], what: &str, line: usize) -> Result<String, CorpusError> {
    let invalid = |message: String| CorpusError::Validation { line, message };
    if span.len() != 2 {
        return Err(invalid(format!("{what} span must have 2 indices, found {}", span.len())));
    }
    let (start, end) = (span[0], span[1]);
    if start < 0 || end <= start || end as usize > tokens.len() {
        return Err(invalid(format!(
            "{what} span [{start}, {end}) is out of range for {} tokens",
            tokens.len()
        )));
    }
    Ok(tokens[start as usize..end as usize].join(" "))
}

fn convert_record(id: &str, record: HyperRedRecord, line: usize) -> Result<Document, CorpusError> {
    let text = record.tokens.join(" ");
    if text.trim().is_empty() {
        return Err(CorpusError::Validation {
            line,
            message: "record has no tokens".into(),
        });
    }
    let fact_error = |e: FactError| CorpusError::Validation {
        line,
        message: e.to_string(),
    };
    let mut gold = Vec::with_capacity(record.relations.len());
    for (r, rel) in record.relations.iter().enumerate() {
        let head = span_text(&record.tokens, &rel.head, &format!("relations[{r}].head"), line)?;
        let tail = span_text(&record.tokens, &rel.tail, &format!("relations[{r}].tail"), line)?;
        let mut qualifiers = Vec::with_capacity(rel.qualifiers.len());
        for (q, qual) in rel.qualifiers.iter().enumerate() {
            let value = span_text(
                &record.tokens,
                &qual.span,
                &format!("relations[{r}].qualifiers[{q}].span"),
                line,
            )?;
            qualifiers.push(Qualifier::new(&qual.label, &value).map_err(fact_error)?);
        }
        let fact = HyperRelationalFact::from_parts(&head, &rel.label, &tail, qualifiers)
            .map_err(fact_error)?;
        gold.push(fact.with_provenance(Provenance::new(id, 0)));
    }
    Ok(Document {
        id: id.to_string(),
        text,
        tokens: Some(record.tokens),
        gold,
    })
}

#[derive(Serialize, Deserialize)]
struct CorpusFile {
    format_version: String,
    documents: Vec<Document>,
}

/// Serializes documents as the versioned interchange corpus.
pub fn write_corpus(docs: &[Document]) -> Vec<u8> {
    let file = CorpusFile {
        format_version: FORMAT_VERSION.to_string(),
        documents: docs.to_vec(),
    };
    let mut bytes = serde_json::to_vec_pretty(&file).expect("corpus serialization is infallible");
    bytes.push(b'\n');
    bytes
}

/// Reads an interchange corpus and checks document invariants.
pub fn read_corpus(bytes: &[u8]) -> Result<Vec<Document>, CorpusError> {
    let file: CorpusFile = serde_json::from_slice(bytes).map_err(|e| {
        CorpusError::Interchange(format!("line {}, column {}: {e}", e.line(), e.column()))
    })?;
    if file.format_version != FORMAT_VERSION {
        return Err(CorpusError::Interchange(format!(
            "unsupported format_version `{}`",
            file.format_version
        )));
    }
    let mut ids = HashSet::new();
    for doc in &file.documents {
        doc.validate().map_err(CorpusError::Interchange)?;
        if !ids.insert(doc.id.as_str()) {
            return Err(CorpusError::DuplicateId(doc.id.clone()));
        }
    }
    Ok(file.documents)
}

pub fn read_corpus_file(path: &Path) -> Result<Vec<Document>, CorpusError> {
    let bytes = std::fs::read(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_corpus(&bytes)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetSplit {
    pub train: Vec<Document>,
    pub dev: Vec<Document>,
    pub test: Vec<Document>,
}

impl DatasetSplit {
    pub fn ids(&self) -> SplitIds {
        let ids = |docs: &[Document]| docs.iter().map(|d| d.id.clone()).collect();
        SplitIds {
            format_version: FORMAT_VERSION.to_string(),
            train: ids(&self.train),
            dev: ids(&self.dev),
            test: ids(&self.test),
        }
    }
}

/// Persisted form of a split: document ids only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitIds {
    pub format_version: String,
    pub train: Vec<String>,
    pub dev: Vec<String>,
    pub test: Vec<String>,
}

impl SplitIds {
    pub fn resolve(&self, docs: &[Document]) -> Result<DatasetSplit, CorpusError> {
        let by_id: std::collections::HashMap<&str, &Document> =
            docs.iter().map(|d| (d.id.as_str(), d)).collect();
        let pick = |ids: &[String]| {
            ids.iter()
                .map(|id| {
                    by_id.get(id.as_str()).map(|d| (*d).clone()).ok_or_else(|| {
                        CorpusError::Interchange(format!("split references unknown document `{id}`"))
                    })
                })
                .collect::<Result<Vec<_>, _>>()
        };
        Ok(DatasetSplit {
            train: pick(&self.train)?,
            dev: pick(&self.dev)?,
            test: pick(&self.test)?,
        })
    }
}

/// Seeded shuffle, then floor cuts for dev and test with the remainder in
/// train. Each part keeps the source order of its documents.
pub fn split_dataset(docs: &[Document], seed: u64, fractions: (f64, f64, f64)) -> Result<DatasetSplit, CorpusError> {
    let (train_f, dev_f, test_f) = fractions;
    if [train_f, dev_f, test_f].iter().any(|f| !f.is_finite() || *f < 0.0) {
        return Err(CorpusError::Fractions(format!(
            "fractions must be non-negative, got {fractions:?}"
        )));
    }
    let sum = train_f + dev_f + test_f;
    if (sum - 1.0).abs() > 1e-9 {
        return Err(CorpusError::Fractions(format!("fractions sum to {sum}, expected 1.0")));
    }
    let n = docs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let n_dev = (n as f64 * dev_f).floor() as usize;
    let n_test = ((n as f64 * test_f).floor() as usize).min(n - n_dev);
    let n_train = n - n_dev - n_test;

    let part = |range: std::ops::Range<usize>| {
        let mut idx = order[range].to_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| docs[i].clone()).collect::<Vec<_>>()
    };
    Ok(DatasetSplit {
        train: part(0..n_train),
        dev: part(n_train..n_train + n_dev),
        test: part(n_train + n_dev..n),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum ExemplarStrategy {
    FirstK,
    SeededRandom { seed: u64 },
    QualifierRich,
}

impl ExemplarStrategy {
    pub fn label(&self) -> String {
        match self {
            ExemplarStrategy::FirstK => "first-k".into(),
            ExemplarStrategy::SeededRandom { seed } => format!("seeded-random:{seed}"),
            ExemplarStrategy::QualifierRich => "qualifier-rich".into(),
        }
    }
}

/// A worked example shown to the extractor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exemplar {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_id: Option<String>,
    pub text: String,
    pub facts: Vec<HyperRelationalFact>,
}

impl From<&Document> for Exemplar {
    fn from(doc: &Document) -> Self {
        Self {
            source_id: Some(doc.id.clone()),
            text: doc.text.clone(),
            facts: doc.gold.clone(),
        }
    }
}

/// Eligible documents (at least one gold fact) in the strategy's preference order.
pub fn rank_exemplar_pool<'a>(train: &'a [Document], strategy: ExemplarStrategy) -> Vec<&'a Document> {
    let mut eligible: Vec<&Document> = train.iter().filter(|d| !d.gold.is_empty()).collect();
    match strategy {
        ExemplarStrategy::FirstK => {}
        ExemplarStrategy::SeededRandom { seed } => {
            eligible.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
        ExemplarStrategy::QualifierRich => {
            eligible.sort_by(|a, b| {
                b.qualifier_count()
                    .cmp(&a.qualifier_count())
                    .then_with(|| a.id.cmp(&b.id))
            });
        }
    }
    eligible
}

/// Up to `k` exemplars from documents with at least one gold fact.
pub fn select_exemplars(train: &[Document], k: usize, strategy: ExemplarStrategy) -> Vec<Exemplar> {
    rank_exemplar_pool(train, strategy)
        .into_iter()
        .take(k)
        .map(Exemplar::from)
        .collect()
}
