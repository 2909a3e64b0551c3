//! Second LLM pass that repairs extracted facts against the source text,
//! followed by deterministic policy filtering.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::corpus::Document;
use crate::extraction::{delimit_text, parse_llm_output, render_fact_array, AttemptLog, ParseDiagnostics};
use crate::gateway::{ChatRequest, Gateway, GatewayError, Role};
use crate::hrkg::{HyperRelationalFact, Provenance};

pub const CORRECTOR_INSTRUCTION: &str = "You review hyper-relational facts extracted from a text. Using only the \
text as evidence, fix wrong entities, relations and qualifiers, fix formatting problems, and remove facts the \
text does not support. Answer with a JSON array only, in the same format as the input facts.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroundingMode {
    Off,
    #[default]
    Warn,
    Strict,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorrectionPolicy {
    pub grounding: GroundingMode,
    pub allow_additions: bool,
    pub allow_deletions: bool,
    /// Treat a changed fact sharing (subject, relation) or (relation, object)
    /// with an input fact as an edit rather than an addition.
    pub edit_heuristic: bool,
}

impl Default for CorrectionPolicy {
    fn default() -> Self {
        Self {
            grounding: GroundingMode::Warn,
            allow_additions: false,
            allow_deletions: true,
            edit_heuristic: true,
        }
    }
}

impl CorrectionPolicy {
    /// No filtering at all: the corrector output is taken as-is.
    pub fn passthrough() -> Self {
        Self {
            grounding: GroundingMode::Off,
            allow_additions: true,
            allow_deletions: true,
            edit_heuristic: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundingViolation {
    pub fact: String,
    /// `subject` and/or `object`.
    pub fields: Vec<String>,
    pub dropped: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CorrectionDiagnostics {
    pub kept: usize,
    pub edited: usize,
    pub added: usize,
    /// Additions rejected by policy plus facts removed by strict grounding.
    pub dropped: usize,
    /// Input facts with no counterpart in the corrector output.
    pub deleted: usize,
    /// Deleted input facts put back because deletions are disallowed.
    pub restored: usize,
    pub fail_open: bool,
    #[serde(default)]
    pub grounding_violations: Vec<GroundingViolation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parse: Option<ParseDiagnostics>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionOutcome {
    pub facts: Vec<HyperRelationalFact>,
    pub diagnostics: CorrectionDiagnostics,
    pub attempt: AttemptLog,
}

pub fn render_correction_prompt(doc: &Document, facts: &[HyperRelationalFact]) -> ChatRequest {
    let user = format!(
        "Source text:\n{}\n\nExtracted facts:\n{}\n\nReturn the complete corrected JSON array. Keep facts that are \
correct, fix entities, relations, qualifiers and formatting where needed, and remove facts that the source \
text does not support.\n",
        delimit_text(&doc.text),
        render_fact_array(facts),
    );
    ChatRequest::new(Role::Corrector, CORRECTOR_INSTRUCTION, user)
}

fn is_edit_of(candidate: &HyperRelationalFact, original: &HyperRelationalFact) -> bool {
    (candidate.subject() == original.subject() && candidate.relation() == original.relation())
        || (candidate.relation() == original.relation() && candidate.object() == original.object())
}

fn ungrounded_fields(fact: &HyperRelationalFact, text_lower: &str) -> Vec<String> {
    let mut fields = Vec::new();
    if !text_lower.contains(&fact.subject().to_lowercase()) {
        fields.push("subject".to_string());
    }
    if !text_lower.contains(&fact.object().to_lowercase()) {
        fields.push("object".to_string());
    }
    fields
}

/// Applies the policy to parsed corrector output. Pure; used by
/// [`correct_facts`] once the LLM has answered.
pub fn apply_policy(
    doc: &Document,
    input: &[HyperRelationalFact],
    corrected: Vec<HyperRelationalFact>,
    policy: &CorrectionPolicy,
) -> (Vec<HyperRelationalFact>, CorrectionDiagnostics) {
    let mut diag = CorrectionDiagnostics::default();
    let input_triples: HashSet<String> = input.iter().map(|f| f.triple_key()).collect();
    let mut out: Vec<HyperRelationalFact> = Vec::with_capacity(corrected.len());

    for mut fact in corrected {
        if let Some(original) = input.iter().find(|f| *f == &fact) {
            diag.kept += 1;
            fact.set_provenance(original.provenance().cloned());
        } else if input_triples.contains(&fact.triple_key())
            || (policy.edit_heuristic && input.iter().any(|f| is_edit_of(&fact, f)))
        {
            diag.edited += 1;
        } else if policy.allow_additions {
            diag.added += 1;
        } else {
            diag.dropped += 1;
            continue;
        }
        if fact.provenance().is_none() {
            fact.set_provenance(Some(Provenance::new(doc.id.clone(), 0)));
        }
        out.push(fact);
    }

    let accounted = |original: &HyperRelationalFact, facts: &[HyperRelationalFact]| {
        facts.iter().any(|f| {
            f.triple_key() == original.triple_key() || (policy.edit_heuristic && is_edit_of(f, original))
        })
    };
    let missing: Vec<HyperRelationalFact> = input.iter().filter(|f| !accounted(f, &out)).cloned().collect();
    diag.deleted = missing.len();
    if !policy.allow_deletions {
        diag.restored = missing.len();
        out.extend(missing);
    }

    if policy.grounding != GroundingMode::Off {
        let text_lower = doc.text.to_lowercase();
        let strict = policy.grounding == GroundingMode::Strict;
        out.retain(|fact| {
            let fields = ungrounded_fields(fact, &text_lower);
            if fields.is_empty() {
                return true;
            }
            diag.grounding_violations.push(GroundingViolation {
                fact: fact.canonical(),
                fields,
                dropped: strict,
            });
            if strict {
                diag.dropped += 1;
            }
            !strict
        });
    }
    (out, diag)
}

/// Runs the corrector and applies `policy`. Unparseable corrector output
/// passes the input facts through unchanged with `fail_open` set.
pub fn correct_facts(
    gateway: &Gateway,
    doc: &Document,
    facts: &[HyperRelationalFact],
    policy: &CorrectionPolicy,
) -> Result<CorrectionOutcome, GatewayError> {
    let request = render_correction_prompt(doc, facts);
    let reply = gateway.chat(&request)?;
    let attempt = AttemptLog {
        prompt_digest: reply.digest,
        raw_response: reply.text.clone(),
        from_cache: reply.from_cache,
    };
    match parse_llm_output(&reply.text) {
        Ok(parsed) => {
            let (out, mut diagnostics) = apply_policy(doc, facts, parsed.facts, policy);
            diagnostics.parse = Some(parsed.diagnostics);
            Ok(CorrectionOutcome {
                facts: out,
                diagnostics,
                attempt,
            })
        }
        Err(_) => {
            log::warn!("{}: corrector output unparseable, keeping extracted facts", doc.id);
            Ok(CorrectionOutcome {
                facts: facts.to_vec(),
                diagnostics: CorrectionDiagnostics {
                    kept: facts.len(),
                    fail_open: true,
                    ..CorrectionDiagnostics::default()
                },
                attempt,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extraction::last_delimited_text;
    use crate::gateway::{EndpointConfig, FnBackend};
    use std::sync::Arc;

    fn fact(s: &str, r: &str, o: &str, q: &[(&str, &str)]) -> HyperRelationalFact {
        HyperRelationalFact::new(s, r, o, q.iter().copied()).unwrap()
    }

    fn doc() -> Document {
        Document::new("doc-7", "Marie Curie worked in Paris from 1906 .", vec![])
    }

    fn gateway_returning(text: &'static str) -> Gateway {
        Gateway::new(Arc::new(FnBackend(move |_r: &ChatRequest| Ok(text.to_string()))))
            .with_role(Role::Corrector, EndpointConfig::new("http://mock", "corrector"))
    }

    fn echo_gateway() -> Gateway {
        // echoes the fact array from the prompt back verbatim
        Gateway::new(Arc::new(FnBackend(|r: &ChatRequest| {
            let start = r.user.find("Extracted facts:\n").unwrap() + "Extracted facts:\n".len();
            let end = r.user.find("\n\nReturn the complete").unwrap();
            Ok(r.user[start..end].to_string())
        })))
        .with_role(Role::Corrector, EndpointConfig::new("http://mock", "corrector"))
    }

    fn input() -> Vec<HyperRelationalFact> {
        vec![
            fact("Marie Curie", "work location", "Paris", &[("start time", "1906")]),
            fact("Marie Curie", "occupation", "physicist", &[]),
        ]
    }

    #[test]
    fn prompt_contains_text_and_facts() {
        let req = render_correction_prompt(&doc(), &input());
        assert_eq!(req.role, Role::Corrector);
        assert_eq!(last_delimited_text(&req.user).unwrap(), doc().text);
        assert!(req.user.contains(&render_fact_array(&input())));
        assert_eq!(req, render_correction_prompt(&doc(), &input()));
        let empty = render_correction_prompt(&doc(), &[]);
        assert!(empty.user.contains("Extracted facts:\n[]"));
    }

    #[test]
    fn echo_is_identity() {
        let out = correct_facts(&echo_gateway(), &doc(), &input(), &CorrectionPolicy::default()).unwrap();
        assert_eq!(out.facts, input());
        assert_eq!(out.diagnostics.dropped, 0);
        assert_eq!(out.diagnostics.kept, 2);
        assert!(!out.diagnostics.fail_open);
    }

    #[test]
    fn strict_grounding_drops_misspelled_object() {
        let gw = gateway_returning(r#"[{"subject":"Marie Curie","relation":"work location","object":"Parris"}]"#);
        let policy = CorrectionPolicy {
            grounding: GroundingMode::Strict,
            ..CorrectionPolicy::default()
        };
        let out = correct_facts(&gw, &doc(), &input(), &policy).unwrap();
        assert!(out.facts.iter().all(|f| f.object() != "Parris"));
        assert_eq!(out.diagnostics.grounding_violations.len(), 1);
        assert_eq!(out.diagnostics.grounding_violations[0].fields, ["object"]);
        assert!(out.diagnostics.grounding_violations[0].dropped);
    }

    #[test]
    fn warn_grounding_keeps_fact() {
        let gw = gateway_returning(r#"[{"subject":"Marie Curie","relation":"work location","object":"Parris"}]"#);
        let out = correct_facts(&gw, &doc(), &input(), &CorrectionPolicy::default()).unwrap();
        assert!(out.facts.iter().any(|f| f.object() == "Parris"));
        assert_eq!(out.diagnostics.grounding_violations.len(), 1);
        assert!(!out.diagnostics.grounding_violations[0].dropped);
        assert_eq!(out.diagnostics.edited, 1);
    }

    #[test]
    fn garbage_fails_open() {
        let three = vec![
            fact("a", "r", "b", &[]),
            fact("c", "r", "d", &[]),
            fact("e", "r", "f", &[]),
        ];
        let out = correct_facts(&gateway_returning("no idea"), &doc(), &three, &CorrectionPolicy::default()).unwrap();
        assert_eq!(out.facts, three);
        assert!(out.diagnostics.fail_open);
    }

    #[test]
    fn additions_dropped_unless_allowed() {
        let gw = gateway_returning(
            r#"[{"subject":"Marie Curie","relation":"work location","object":"Paris"},
                {"subject":"Pierre Curie","relation":"spouse","object":"Marie Curie"}]"#,
        );
        let out = correct_facts(&gw, &doc(), &input(), &CorrectionPolicy::default()).unwrap();
        assert_eq!(out.facts.len(), 1);
        assert_eq!(out.diagnostics.dropped, 1);
        assert_eq!(out.diagnostics.deleted, 1);
        // qualifier-only change on an input triple counts as an edit
        assert_eq!(out.diagnostics.edited, 1);

        let allow = CorrectionPolicy {
            allow_additions: true,
            ..CorrectionPolicy::default()
        };
        let out = correct_facts(&gw, &doc(), &input(), &allow).unwrap();
        assert_eq!(out.facts.len(), 2);
        assert_eq!(out.diagnostics.added, 1);
    }

    #[test]
    fn deletions_restored_when_disallowed() {
        let gw = gateway_returning("[]");
        let policy = CorrectionPolicy {
            allow_deletions: false,
            ..CorrectionPolicy::default()
        };
        let out = correct_facts(&gw, &doc(), &input(), &policy).unwrap();
        assert_eq!(out.facts, input());
        assert_eq!(out.diagnostics.restored, 2);
        let out = correct_facts(&gw, &doc(), &input(), &CorrectionPolicy::default()).unwrap();
        assert!(out.facts.is_empty());
        assert_eq!(out.diagnostics.deleted, 2);
    }

    #[test]
    fn edit_heuristic_can_be_disabled() {
        let gw = gateway_returning(r#"[{"subject":"Marie Curie","relation":"occupation","object":"chemist"}]"#);
        let out = correct_facts(&gw, &doc(), &input(), &CorrectionPolicy::default()).unwrap();
        assert_eq!(out.facts.len(), 1);
        let strict = CorrectionPolicy {
            edit_heuristic: false,
            ..CorrectionPolicy::default()
        };
        let out = correct_facts(&gw, &doc(), &input(), &strict).unwrap();
        assert!(out.facts.is_empty());
    }

    #[test]
    fn passthrough_policy_is_plain_parse() {
        let raw = r#"[{"subject":"X","relation":"y","object":"Z"},{"subject":"Marie Curie","relation":"occupation","object":"physicist"}]"#;
        let gw = gateway_returning(raw);
        let out = correct_facts(&gw, &doc(), &input(), &CorrectionPolicy::passthrough()).unwrap();
        assert_eq!(out.facts, parse_llm_output(raw).unwrap().facts);
    }
}
