//! Extraction prompts, tolerant parsing of LLM output, and the per-document
//! extract/re-ask loop.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::corpus::{Document, Exemplar};
use crate::gateway::{ChatRequest, Gateway, GatewayError, Role};
use crate::hrkg::{dedup_facts, HyperRelationalFact, Provenance, Qualifier, FORMAT_VERSION};

pub const BEGIN_TEXT: &str = "<<<BEGIN TEXT>>>";
pub const END_TEXT: &str = "<<<END TEXT>>>";

pub const DEFAULT_OUTPUT_BUDGET: usize = 16;

pub const DEFAULT_INSTRUCTION: &str = "You are an information extraction system. Read the text and extract every \
hyper-relational fact it states: a subject entity, a relation, an object entity, and any qualifiers \
(such as time, location, role or quantity) that refine the fact. Use the exact surface forms from the text.";

pub const DEFAULT_SCHEMA_NOTE: &str = "Answer with a JSON array only. Each element is an object with string fields \
\"subject\", \"relation\" and \"object\", and a \"qualifiers\" array of {\"key\": string, \"value\": string} \
objects (empty when the fact has no qualifiers). Return [] when the text states no facts.";

/// User message template; `{instruction}`, `{exemplars}` and `{input}` are substituted.
pub const DEFAULT_TEMPLATE: &str = "{exemplars}Extract the facts from the following text.\n{input}\nOutput:\n";

const FORMAT_REMINDER: &str = "Your previous answer could not be read. Respond with nothing but a JSON array \
of fact objects as described, without commentary.";

/// Wraps text in sentinel lines. Lines starting with `<<<` or `\` get a
/// leading backslash so the block boundaries stay unambiguous.
pub fn delimit_text(text: &str) -> String {
    let mut out = String::with_capacity(text.len() + 40);
    out.push_str(BEGIN_TEXT);
    out.push('\n');
    for line in text.lines() {
        if line.starts_with("<<<") || line.starts_with('\\') {
            out.push('\\');
        }
        out.push_str(line);
        out.push('\n');
    }
    out.push_str(END_TEXT);
    out
}

/// Text of the last complete sentinel block in `message`.
pub fn last_delimited_text(message: &str) -> Option<String> {
    let mut last = None;
    let mut current: Option<Vec<&str>> = None;
    for line in message.lines() {
        if line == BEGIN_TEXT {
            current = Some(Vec::new());
        } else if line == END_TEXT {
            if let Some(lines) = current.take() {
                last = Some(
                    lines
                        .iter()
                        .map(|l| l.strip_prefix('\\').unwrap_or(l))
                        .collect::<Vec<_>>()
                        .join("\n"),
                );
            }
        } else if let Some(lines) = current.as_mut() {
            lines.push(line);
        }
    }
    last
}

#[derive(Serialize)]
struct QualifierView<'a> {
    key: &'a str,
    value: &'a str,
}

#[derive(Serialize)]
struct FactView<'a> {
    subject: &'a str,
    relation: &'a str,
    object: &'a str,
    qualifiers: Vec<QualifierView<'a>>,
}

/// The JSON array form of facts used in prompts and expected back from the LLM.
pub fn render_fact_array(facts: &[HyperRelationalFact]) -> String {
    let views: Vec<FactView<'_>> = facts
        .iter()
        .map(|f| FactView {
            subject: f.subject(),
            relation: f.relation(),
            object: f.object(),
            qualifiers: f
                .qualifiers()
                .iter()
                .map(|q| QualifierView {
                    key: q.key(),
                    value: q.value(),
                })
                .collect(),
        })
        .collect();
    serde_json::to_string_pretty(&views).expect("fact rendering is infallible")
}

/// Instruction, output schema and worked examples for the extractor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSpec {
    #[serde(default = "spec_version")]
    pub format_version: String,
    pub instruction: String,
    #[serde(default = "default_schema_note")]
    pub schema_note: String,
    #[serde(default)]
    pub exemplars: Vec<Exemplar>,
    #[serde(default = "default_budget")]
    pub output_budget: usize,
    #[serde(default = "default_template")]
    pub template: String,
}

fn spec_version() -> String {
    FORMAT_VERSION.to_string()
}
fn default_schema_note() -> String {
    DEFAULT_SCHEMA_NOTE.to_string()
}
fn default_budget() -> usize {
    DEFAULT_OUTPUT_BUDGET
}
fn default_template() -> String {
    DEFAULT_TEMPLATE.to_string()
}

impl Default for PromptSpec {
    fn default() -> Self {
        Self::new(DEFAULT_INSTRUCTION)
    }
}

impl PromptSpec {
    pub fn new(instruction: impl Into<String>) -> Self {
        Self {
            format_version: spec_version(),
            instruction: instruction.into(),
            schema_note: default_schema_note(),
            exemplars: Vec::new(),
            output_budget: DEFAULT_OUTPUT_BUDGET,
            template: default_template(),
        }
    }

    pub fn with_exemplars(mut self, exemplars: Vec<Exemplar>) -> Self {
        self.exemplars = exemplars;
        self
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.instruction.trim().is_empty() {
            return Err("prompt instruction is empty".into());
        }
        if !self.template.contains("{input}") {
            return Err("prompt template has no {input} placeholder".into());
        }
        if self.exemplars.iter().any(|e| e.text.trim().is_empty()) {
            return Err("prompt exemplar with empty text".into());
        }
        Ok(())
    }

    pub fn to_json(&self) -> Vec<u8> {
        let mut bytes = serde_json::to_vec_pretty(self).expect("prompt serialization is infallible");
        bytes.push(b'\n');
        bytes
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, String> {
        let spec: PromptSpec = serde_json::from_slice(bytes).map_err(|e| e.to_string())?;
        spec.validate()?;
        Ok(spec)
    }
}

fn render_exemplars(exemplars: &[Exemplar]) -> String {
    let mut out = String::new();
    for (i, ex) in exemplars.iter().enumerate() {
        out.push_str(&format!("Example {}\n", i + 1));
        out.push_str(&delimit_text(&ex.text));
        out.push_str("\nOutput:\n");
        out.push_str(&render_fact_array(&ex.facts));
        out.push_str("\n\n");
    }
    out
}

/// Single-pass placeholder substitution; substituted text is never rescanned.
fn fill_template(template: &str, instruction: &str, exemplars: &str, input: &str) -> String {
    let mut out = String::with_capacity(template.len() + exemplars.len() + input.len());
    let mut rest = template;
    while let Some(start) = rest.find('{') {
        out.push_str(&rest[..start]);
        let tail = &rest[start..];
        let (value, len) = if tail.starts_with("{instruction}") {
            (instruction, "{instruction}".len())
        } else if tail.starts_with("{exemplars}") {
            (exemplars, "{exemplars}".len())
        } else if tail.starts_with("{input}") {
            (input, "{input}".len())
        } else {
            ("{", 1)
        };
        out.push_str(value);
        rest = &tail[len..];
    }
    out.push_str(rest);
    out
}

pub fn render_extraction_prompt(spec: &PromptSpec, doc: &Document) -> ChatRequest {
    let system = format!("{}\n\n{}", spec.instruction.trim(), spec.schema_note.trim());
    let user = fill_template(
        &spec.template,
        &spec.instruction,
        &render_exemplars(&spec.exemplars),
        &delimit_text(&doc.text),
    );
    ChatRequest::new(Role::Extractor, system, user)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RepairTier {
    #[default]
    None,
    FenceStrip,
    JsonRepair,
    ReAsk,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum DropReason {
    NotAnObject,
    MissingField { field: String },
    NotAString { field: String },
    EmptyField { field: String },
    InvalidQualifiers,
    Duplicate,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DroppedItem {
    pub index: usize,
    pub reason: DropReason,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ParseDiagnostics {
    pub attempts: u32,
    pub tier: RepairTier,
    #[serde(default)]
    pub dropped: Vec<DroppedItem>,
    /// Facts cut by the output budget.
    #[serde(default)]
    pub truncated: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ParseError {
    #[error("no parseable JSON array in LLM output")]
    Unparseable { raw: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedOutput {
    pub facts: Vec<HyperRelationalFact>,
    pub diagnostics: ParseDiagnostics,
}

/// Bodies of markdown code fences; an unterminated fence runs to the end.
fn fenced_blocks(text: &str) -> Vec<&str> {
    let mut blocks = Vec::new();
    let mut rest = text;
    while let Some(open) = rest.find("```") {
        let after = &rest[open + 3..];
        // skip the info string (e.g. `json`) up to the end of the line
        let body_start = after.find('\n').map(|i| i + 1).unwrap_or(after.len());
        let body = &after[body_start..];
        match body.find("```") {
            Some(close) => {
                blocks.push(&body[..close]);
                rest = &body[close + 3..];
            }
            None => {
                blocks.push(body);
                break;
            }
        }
    }
    blocks
}

/// Index of the `]` closing the `[` at `start`, skipping strings and `//` comments.
fn balanced_end(bytes: &[u8], start: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut i = start;
    let mut in_string = false;
    while i < bytes.len() {
        let b = bytes[i];
        if in_string {
            match b {
                b'\\' => i += 1,
                b'"' => in_string = false,
                _ => {}
            }
        } else {
            match b {
                b'"' => in_string = true,
                b'/' if bytes.get(i + 1) == Some(&b'/') => {
                    while i < bytes.len() && bytes[i] != b'\n' {
                        i += 1;
                    }
                    continue;
                }
                b'[' => depth += 1,
                b']' => {
                    depth -= 1;
                    if depth == 0 {
                        return Some(i);
                    }
                }
                _ => {}
            }
        }
        i += 1;
    }
    None
}

/// Strips `//` line comments and trailing commas outside strings.
pub fn mechanical_repair(text: &str) -> String {
    let mut no_comments = String::with_capacity(text.len());
    let mut chars = text.chars().peekable();
    let mut in_string = false;
    while let Some(c) = chars.next() {
        if in_string {
            no_comments.push(c);
            match c {
                '\\' => {
                    if let Some(n) = chars.next() {
                        no_comments.push(n);
                    }
                }
                '"' => in_string = false,
                _ => {}
            }
        } else if c == '/' && chars.peek() == Some(&'/') {
            while let Some(&n) = chars.peek() {
                if n == '\n' {
                    break;
                }
                chars.next();
            }
        } else {
            if c == '"' {
                in_string = true;
            }
            no_comments.push(c);
        }
    }

    let chars: Vec<char> = no_comments.chars().collect();
    let mut out = String::with_capacity(no_comments.len());
    let mut in_string = false;
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if in_string {
            out.push(c);
            if c == '\\' {
                if let Some(&n) = chars.get(i + 1) {
                    out.push(n);
                    i += 1;
                }
            } else if c == '"' {
                in_string = false;
            }
        } else if c == ',' {
            let next = chars[i + 1..].iter().find(|ch| !ch.is_whitespace());
            if !matches!(next, Some(']') | Some('}')) {
                out.push(c);
            }
        } else {
            if c == '"' {
                in_string = true;
            }
            out.push(c);
        }
        i += 1;
    }
    out
}

/// First balanced `[...]` span that parses as a JSON array, strictly or after
/// mechanical repair. Returns the elements and whether repair was needed.
fn first_array(text: &str) -> Option<(Vec<Value>, bool)> {
    let bytes = text.as_bytes();
    for start in memchr_all(bytes, b'[') {
        let Some(end) = balanced_end(bytes, start) else {
            continue;
        };
        let candidate = &text[start..=end];
        if let Ok(Value::Array(items)) = serde_json::from_str::<Value>(candidate) {
            return Some((items, false));
        }
        if let Ok(Value::Array(items)) = serde_json::from_str::<Value>(&mechanical_repair(candidate)) {
            return Some((items, true));
        }
    }
    None
}

fn memchr_all(bytes: &[u8], needle: u8) -> impl Iterator<Item = usize> + '_ {
    bytes.iter().enumerate().filter(move |(_, b)| **b == needle).map(|(i, _)| i)
}

fn string_field(obj: &serde_json::Map<String, Value>, field: &str) -> Result<String, DropReason> {
    match obj.get(field) {
        None | Some(Value::Null) => Err(DropReason::MissingField { field: field.into() }),
        Some(Value::String(s)) if s.trim().is_empty() => Err(DropReason::EmptyField { field: field.into() }),
        Some(Value::String(s)) => Ok(s.clone()),
        Some(_) => Err(DropReason::NotAString { field: field.into() }),
    }
}

fn element_to_fact(value: &Value) -> Result<HyperRelationalFact, DropReason> {
    let Value::Object(obj) = value else {
        return Err(DropReason::NotAnObject);
    };
    let subject = string_field(obj, "subject")?;
    let relation = string_field(obj, "relation")?;
    let object = string_field(obj, "object")?;
    let qualifiers = match obj.get("qualifiers") {
        None | Some(Value::Null) => Vec::new(),
        Some(Value::Array(items)) => items
            .iter()
            .map(|item| {
                let Value::Object(q) = item else {
                    return Err(DropReason::InvalidQualifiers);
                };
                match (q.get("key"), q.get("value")) {
                    (Some(Value::String(k)), Some(Value::String(v))) => {
                        Qualifier::new(k, v).map_err(|_| DropReason::InvalidQualifiers)
                    }
                    _ => Err(DropReason::InvalidQualifiers),
                }
            })
            .collect::<Result<Vec<_>, _>>()?,
        Some(_) => return Err(DropReason::InvalidQualifiers),
    };
    // fields were checked non-empty above, so construction cannot fail
    HyperRelationalFact::from_parts(&subject, &relation, &object, qualifiers)
        .map_err(|_| DropReason::EmptyField { field: "subject".into() })
}

/// Finds the first JSON array of facts in `text`, looking inside code fences
/// first. Schema-violating elements are dropped and counted; duplicates are
/// dropped after their first occurrence.
pub fn parse_llm_output(text: &str) -> Result<ParsedOutput, ParseError> {
    let found = fenced_blocks(text)
        .into_iter()
        .find_map(|block| {
            first_array(block).map(|(items, repaired)| {
                (items, if repaired { RepairTier::JsonRepair } else { RepairTier::FenceStrip })
            })
        })
        .or_else(|| {
            first_array(text).map(|(items, repaired)| {
                (items, if repaired { RepairTier::JsonRepair } else { RepairTier::None })
            })
        });
    let Some((items, tier)) = found else {
        return Err(ParseError::Unparseable { raw: text.to_string() });
    };

    let mut facts = Vec::with_capacity(items.len());
    let mut dropped = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (index, item) in items.iter().enumerate() {
        match element_to_fact(item) {
            Ok(fact) if seen.insert(fact.canonical()) => facts.push(fact),
            Ok(_) => dropped.push(DroppedItem {
                index,
                reason: DropReason::Duplicate,
            }),
            Err(reason) => dropped.push(DroppedItem { index, reason }),
        }
    }
    Ok(ParsedOutput {
        facts,
        diagnostics: ParseDiagnostics {
            attempts: 1,
            tier,
            dropped,
            truncated: 0,
            failure: None,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttemptLog {
    pub prompt_digest: String,
    pub raw_response: String,
    pub from_cache: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractionOutcome {
    pub facts: Vec<HyperRelationalFact>,
    pub diagnostics: ParseDiagnostics,
    pub attempts: Vec<AttemptLog>,
}

fn reask_request(base: &ChatRequest, attempt: u32) -> ChatRequest {
    if attempt == 0 {
        return base.clone();
    }
    let mut req = base.clone();
    req.user = format!("{}\n\n[retry {}] {}\n", base.user.trim_end(), attempt, FORMAT_REMINDER);
    req
}

/// Render, call the extractor, parse; re-asks on unparseable output. A final
/// parse failure yields zero facts with the failure recorded.
pub fn extract_document(
    gateway: &Gateway,
    doc: &Document,
    spec: &PromptSpec,
    max_attempts: u32,
) -> Result<ExtractionOutcome, GatewayError> {
    let max_attempts = max_attempts.max(1);
    let base = render_extraction_prompt(spec, doc);
    let mut attempts = Vec::new();
    for attempt in 0..max_attempts {
        let request = reask_request(&base, attempt);
        let reply = gateway.chat(&request)?;
        attempts.push(AttemptLog {
            prompt_digest: reply.digest,
            raw_response: reply.text.clone(),
            from_cache: reply.from_cache,
        });
        match parse_llm_output(&reply.text) {
            Ok(parsed) => {
                let mut diagnostics = parsed.diagnostics;
                let (mut facts, _) = dedup_facts(parsed.facts);
                diagnostics.truncated = facts.len().saturating_sub(spec.output_budget);
                facts.truncate(spec.output_budget);
                for fact in &mut facts {
                    fact.set_provenance(Some(Provenance::new(doc.id.clone(), attempt)));
                }
                diagnostics.attempts = attempt + 1;
                if attempt > 0 {
                    diagnostics.tier = RepairTier::ReAsk;
                }
                return Ok(ExtractionOutcome {
                    facts,
                    diagnostics,
                    attempts,
                });
            }
            Err(ParseError::Unparseable { .. }) => {
                log::debug!("{}: attempt {} unparseable", doc.id, attempt + 1);
            }
        }
    }
    log::warn!("{}: no parseable output after {max_attempts} attempt(s)", doc.id);
    Ok(ExtractionOutcome {
        facts: Vec::new(),
        diagnostics: ParseDiagnostics {
            attempts: max_attempts,
            tier: if max_attempts > 1 { RepairTier::ReAsk } else { RepairTier::None },
            dropped: Vec::new(),
            truncated: 0,
            failure: Some(format!("unparseable output after {max_attempts} attempt(s)")),
        },
        attempts,
    })
}
