//! Hyper-relational fact model, canonical serialization and graph exports.
//!
//! A [`HyperRelationalFact`] is one hyperedge: a base `(subject, relation,
//! object)` triple plus any number of qualifier key/value pairs. Facts are
//! normalized on construction, so two facts compare equal exactly when their
//! canonical strings are equal.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::hash::{Hash, Hasher};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

/// Version tag written into every canonical-json document.
pub const FORMAT_VERSION: &str = "1";

/// Version of the canonical fact string layout.
pub const CANONICAL_VERSION: &str = "1";

const SEPARATOR: &str = " | ";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FactError {
    #[error("fact field `{0}` is empty")]
    EmptyField(&'static str),
    #[error("malformed canonical string: {0}")]
    MalformedCanonical(String),
}

#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error("unknown graph format `{0}` (expected canonical-json or flat-tsv)")]
    UnknownFormat(String),
    #[error("format `{0}` cannot be imported")]
    ImportUnsupported(ExportFormat),
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("unsupported format_version `{0}`")]
    Version(String),
    #[error("invalid fact at index {index}: {source}")]
    Validation {
        index: usize,
        #[source]
        source: FactError,
    },
}

/// Trims, collapses internal whitespace runs to one space and applies NFC.
pub fn normalize_field(raw: &str) -> String {
    let nfc: String = raw.nfc().collect();
    nfc.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn checked_field(raw: &str, name: &'static str) -> Result<String, FactError> {
    let field = normalize_field(raw);
    if field.is_empty() {
        Err(FactError::EmptyField(name))
    } else {
        Ok(field)
    }
}

fn escape_into(out: &mut String, field: &str) {
    for c in field.chars() {
        if matches!(c, '|' | '=' | '\\') {
            out.push('\\');
        }
        out.push(c);
    }
}

/// A qualifier attached to a base triple, e.g. `start time=2009`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct Qualifier {
    key: String,
    value: String,
}

impl Qualifier {
    pub fn new(key: &str, value: &str) -> Result<Self, FactError> {
        Ok(Self {
            key: checked_field(key, "qualifier key")?,
            value: checked_field(value, "qualifier value")?,
        })
    }

    pub fn key(&self) -> &str {
        &self.key
    }

    pub fn value(&self) -> &str {
        &self.value
    }
}

impl<'de> Deserialize<'de> for Qualifier {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            key: String,
            value: String,
        }
        let raw = Raw::deserialize(deserializer)?;
        Qualifier::new(&raw.key, &raw.value).map_err(serde::de::Error::custom)
    }
}

/// Where a fact came from: the document and the extraction attempt that produced it.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Provenance {
    pub document_id: String,
    pub attempt: u32,
}

impl Provenance {
    pub fn new(document_id: impl Into<String>, attempt: u32) -> Self {
        Self {
            document_id: document_id.into(),
            attempt,
        }
    }
}

/// Base triple plus sorted, deduplicated qualifiers.
///
/// Equality, ordering and hashing ignore provenance and follow the
/// canonical string.
#[derive(Debug, Clone, Serialize)]
pub struct HyperRelationalFact {
    subject: String,
    relation: String,
    object: String,
    qualifiers: Vec<Qualifier>,
    #[serde(skip_serializing_if = "Option::is_none")]
    provenance: Option<Provenance>,
}

impl HyperRelationalFact {
    pub fn new<I, K, V>(
        subject: &str,
        relation: &str,
        object: &str,
        qualifiers: I,
    ) -> Result<Self, FactError>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        let qualifiers = qualifiers
            .into_iter()
            .map(|(k, v)| Qualifier::new(k.as_ref(), v.as_ref()))
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_parts(subject, relation, object, qualifiers)
    }

    /// Builds a fact without qualifiers.
    pub fn triple(subject: &str, relation: &str, object: &str) -> Result<Self, FactError> {
        Self::from_parts(subject, relation, object, Vec::new())
    }

    pub fn from_parts(
        subject: &str,
        relation: &str,
        object: &str,
        mut qualifiers: Vec<Qualifier>,
    ) -> Result<Self, FactError> {
        qualifiers.sort();
        qualifiers.dedup();
        Ok(Self {
            subject: checked_field(subject, "subject")?,
            relation: checked_field(relation, "relation")?,
            object: checked_field(object, "object")?,
            qualifiers,
            provenance: None,
        })
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = Some(provenance);
        self
    }

    pub fn set_provenance(&mut self, provenance: Option<Provenance>) {
        self.provenance = provenance;
    }

    pub fn subject(&self) -> &str {
        &self.subject
    }

    pub fn relation(&self) -> &str {
        &self.relation
    }

    pub fn object(&self) -> &str {
        &self.object
    }

    pub fn qualifiers(&self) -> &[Qualifier] {
        &self.qualifiers
    }

    pub fn provenance(&self) -> Option<&Provenance> {
        self.provenance.as_ref()
    }

    /// `subject | relation | object | key1=value1 | ...` with `|`, `=` and `\` escaped.
    pub fn canonical(&self) -> String {
        let mut out = String::with_capacity(64);
        escape_into(&mut out, &self.subject);
        out.push_str(SEPARATOR);
        escape_into(&mut out, &self.relation);
        out.push_str(SEPARATOR);
        escape_into(&mut out, &self.object);
        for q in &self.qualifiers {
            out.push_str(SEPARATOR);
            escape_into(&mut out, &q.key);
            out.push('=');
            escape_into(&mut out, &q.value);
        }
        out
    }

    /// Canonical string of the base triple only.
    pub fn triple_key(&self) -> String {
        let mut out = String::with_capacity(48);
        escape_into(&mut out, &self.subject);
        out.push_str(SEPARATOR);
        escape_into(&mut out, &self.relation);
        out.push_str(SEPARATOR);
        escape_into(&mut out, &self.object);
        out
    }

    /// Inverse of [`HyperRelationalFact::canonical`].
    pub fn parse_canonical(text: &str) -> Result<Self, FactError> {
        let parts = split_unescaped(text, '|')?;
        if parts.len() < 3 {
            return Err(FactError::MalformedCanonical(format!(
                "expected at least 3 fields, found {}",
                parts.len()
            )));
        }
        let mut fields = Vec::with_capacity(3);
        for part in &parts[..3] {
            let pieces = split_unescaped(part, '=')?;
            if pieces.len() != 1 {
                return Err(FactError::MalformedCanonical(format!(
                    "unescaped `=` in `{part}`"
                )));
            }
            fields.push(unescape(&pieces[0]));
        }
        let mut qualifiers = Vec::new();
        for part in &parts[3..] {
            let pieces = split_unescaped(part, '=')?;
            if pieces.len() != 2 {
                return Err(FactError::MalformedCanonical(format!(
                    "qualifier `{part}` must contain exactly one unescaped `=`"
                )));
            }
            qualifiers.push(Qualifier::new(&unescape(&pieces[0]), &unescape(&pieces[1]))?);
        }
        Self::from_parts(&fields[0], &fields[1], &fields[2], qualifiers)
    }
}

/// Splits on unescaped `sep`, keeping escapes in the pieces.
fn split_unescaped(text: &str, sep: char) -> Result<Vec<String>, FactError> {
    let mut parts = Vec::new();
    let mut current = String::new();
    let mut chars = text.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            match chars.next() {
                Some(next) => {
                    current.push('\\');
                    current.push(next);
                }
                None => {
                    return Err(FactError::MalformedCanonical(
                        "dangling escape at end of input".into(),
                    ))
                }
            }
        } else if c == sep {
            parts.push(std::mem::take(&mut current));
        } else {
            current.push(c);
        }
    }
    parts.push(current);
    Ok(parts)
}

fn unescape(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut chars = text.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            if let Some(next) = chars.next() {
                out.push(next);
            }
        } else {
            out.push(c);
        }
    }
    out
}

impl PartialEq for HyperRelationalFact {
    fn eq(&self, other: &Self) -> bool {
        self.subject == other.subject
            && self.relation == other.relation
            && self.object == other.object
            && self.qualifiers == other.qualifiers
    }
}

impl Eq for HyperRelationalFact {}

impl Hash for HyperRelationalFact {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.subject.hash(state);
        self.relation.hash(state);
        self.object.hash(state);
        self.qualifiers.hash(state);
    }
}

impl PartialOrd for HyperRelationalFact {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for HyperRelationalFact {
    fn cmp(&self, other: &Self) -> Ordering {
        self.canonical().cmp(&other.canonical())
    }
}

impl fmt::Display for HyperRelationalFact {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical())
    }
}

impl<'de> Deserialize<'de> for HyperRelationalFact {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = RawFact::deserialize(deserializer)?;
        raw.into_fact().map_err(serde::de::Error::custom)
    }
}

/// Wire shape of a fact before validation.
#[derive(Debug, Deserialize)]
struct RawFact {
    #[serde(default)]
    subject: Option<String>,
    #[serde(default)]
    relation: Option<String>,
    #[serde(default)]
    object: Option<String>,
    #[serde(default)]
    qualifiers: Vec<RawQualifier>,
    #[serde(default)]
    provenance: Option<Provenance>,
}

#[derive(Debug, Deserialize)]
struct RawQualifier {
    #[serde(default)]
    key: Option<String>,
    #[serde(default)]
    value: Option<String>,
}

impl RawFact {
    fn into_fact(self) -> Result<HyperRelationalFact, FactError> {
        let qualifiers = self
            .qualifiers
            .iter()
            .map(|q| {
                Qualifier::new(
                    q.key.as_deref().unwrap_or_default(),
                    q.value.as_deref().unwrap_or_default(),
                )
            })
            .collect::<Result<Vec<_>, _>>()?;
        let fact = HyperRelationalFact::from_parts(
            self.subject.as_deref().unwrap_or_default(),
            self.relation.as_deref().unwrap_or_default(),
            self.object.as_deref().unwrap_or_default(),
            qualifiers,
        )?;
        Ok(match self.provenance {
            Some(p) => fact.with_provenance(p),
            None => fact,
        })
    }
}

/// True iff both facts have the same canonical string.
pub fn fact_equal_strict(a: &HyperRelationalFact, b: &HyperRelationalFact) -> bool {
    a.canonical() == b.canonical()
}

/// Removes later duplicates while keeping first-seen order.
pub fn dedup_facts(facts: Vec<HyperRelationalFact>) -> (Vec<HyperRelationalFact>, usize) {
    let mut seen = std::collections::HashSet::new();
    let before = facts.len();
    let kept: Vec<_> = facts.into_iter().filter(|f| seen.insert(f.canonical())).collect();
    let removed = before - kept.len();
    (kept, removed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExportFormat {
    CanonicalJson,
    FlatTsv,
}

impl fmt::Display for ExportFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExportFormat::CanonicalJson => "canonical-json",
            ExportFormat::FlatTsv => "flat-tsv",
        })
    }
}

impl FromStr for ExportFormat {
    type Err = GraphError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "canonical-json" => Ok(ExportFormat::CanonicalJson),
            "flat-tsv" => Ok(ExportFormat::FlatTsv),
            other => Err(GraphError::UnknownFormat(other.to_string())),
        }
    }
}

/// A set of facts keyed by canonical string, plus the documents that contributed them.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct HrkGraph {
    facts: BTreeMap<String, HyperRelationalFact>,
    source_ids: BTreeSet<String>,
}

impl HrkGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns the union of this graph and `facts`. The first-seen provenance
    /// of a fact is kept; every provenance document id is recorded.
    pub fn insert<I>(mut self, facts: I) -> Self
    where
        I: IntoIterator<Item = HyperRelationalFact>,
    {
        self.extend(facts);
        self
    }

    /// In-place form of [`HrkGraph::insert`] for single-writer accumulation.
    pub fn extend<I>(&mut self, facts: I)
    where
        I: IntoIterator<Item = HyperRelationalFact>,
    {
        for fact in facts {
            if let Some(p) = fact.provenance() {
                self.source_ids.insert(p.document_id.clone());
            }
            self.facts.entry(fact.canonical()).or_insert(fact);
        }
    }

    pub fn add_source_id(&mut self, id: impl Into<String>) {
        self.source_ids.insert(id.into());
    }

    pub fn len(&self) -> usize {
        self.facts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.facts.is_empty()
    }

    /// Facts in canonical-string order.
    pub fn facts(&self) -> impl Iterator<Item = &HyperRelationalFact> {
        self.facts.values()
    }

    pub fn source_ids(&self) -> &BTreeSet<String> {
        &self.source_ids
    }

    /// Fact-set equality, ignoring provenance and source ids.
    pub fn same_facts(&self, other: &HrkGraph) -> bool {
        self.facts.keys().eq(other.facts.keys())
    }

    pub fn export(&self, format: ExportFormat) -> Vec<u8> {
        match format {
            ExportFormat::CanonicalJson => self.export_json(),
            ExportFormat::FlatTsv => self.export_tsv(),
        }
    }

    fn export_json(&self) -> Vec<u8> {
        let doc = GraphDocumentRef {
            format_version: FORMAT_VERSION,
            source_ids: self.source_ids.iter().collect(),
            facts: self.facts.values().collect(),
        };
        let mut bytes = serde_json::to_vec_pretty(&doc).expect("graph serialization is infallible");
        bytes.push(b'\n');
        bytes
    }

    fn export_tsv(&self) -> Vec<u8> {
        let mut out = String::from(
            "subject\trelation\tobject\tqualifier_key\tqualifier_value\tdocument_id\tattempt\n",
        );
        for fact in self.facts.values() {
            let (doc, attempt) = match fact.provenance() {
                Some(p) => (p.document_id.as_str(), p.attempt.to_string()),
                None => ("", String::new()),
            };
            let base = format!("{}\t{}\t{}", fact.subject, fact.relation, fact.object);
            if fact.qualifiers.is_empty() {
                out.push_str(&format!("{base}\t\t\t{doc}\t{attempt}\n"));
            }
            for q in &fact.qualifiers {
                out.push_str(&format!("{base}\t{}\t{}\t{doc}\t{attempt}\n", q.key, q.value));
            }
        }
        out.into_bytes()
    }

    pub fn import(bytes: &[u8], format: ExportFormat) -> Result<Self, GraphError> {
        if format != ExportFormat::CanonicalJson {
            return Err(GraphError::ImportUnsupported(format));
        }
        let doc: GraphDocument = serde_json::from_slice(bytes).map_err(|e| GraphError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        if doc.format_version != FORMAT_VERSION {
            return Err(GraphError::Version(doc.format_version));
        }
        let mut graph = HrkGraph::new();
        for (index, raw) in doc.facts.into_iter().enumerate() {
            let fact = raw
                .into_fact()
                .map_err(|source| GraphError::Validation { index, source })?;
            graph.extend([fact]);
        }
        graph.source_ids.extend(doc.source_ids);
        Ok(graph)
    }
}

#[derive(Serialize)]
struct GraphDocumentRef<'a> {
    format_version: &'a str,
    source_ids: Vec<&'a String>,
    facts: Vec<&'a HyperRelationalFact>,
}

#[derive(Deserialize)]
struct GraphDocument {
    format_version: String,
    #[serde(default)]
    source_ids: Vec<String>,
    facts: Vec<RawFact>,
}
