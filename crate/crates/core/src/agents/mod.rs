//! The four agent roles: prompt construction from run state and strict-JSON
//! output parsing.
//!
//! Builders are pure string assembly; parsers are tolerant of markdown fences
//! and surrounding prose but enforce the JSON contracts. Parse failures and
//! invalid-but-parsed decisions are distinct error kinds so the optimizer can
//! apply different retry policies.

mod extract;
mod templates;

pub use extract::{find_all_json_objects, find_json_object};
pub use templates::PromptTemplates;
pub(crate) use templates::fill as template_fill;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constitution::{Constitution, RejectedHistory};
use crate::corpus::{Document, LabeledDoc};
use crate::matcher::{ErrorItem, MatchReport};
use templates::fill;

/// Task framing line injected into the decision / creator / editor prompts.
pub const PII_TASK_NOTE: &str = "The annotator marks private phrases in documents; the constitution rules define what to mark and what not to mark.";

/// Sentinel markers delimiting the target document in the annotator prompt.
pub const DOC_BEGIN: &str = "<<<DOCUMENT";
pub const DOC_END: &str = "DOCUMENT>>>";
/// Heading of each few-shot demonstration block.
pub const DEMO_HEADING: &str = "# Demonstration";

/// The four specialized roles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AgentRole {
    Annotator,
    Decision,
    Creator,
    Editor,
}

impl AgentRole {
    pub const ALL: [AgentRole; 4] = [
        AgentRole::Annotator,
        AgentRole::Decision,
        AgentRole::Creator,
        AgentRole::Editor,
    ];

    pub(crate) fn index(self) -> usize {
        match self {
            AgentRole::Annotator => 0,
            AgentRole::Decision => 1,
            AgentRole::Creator => 2,
            AgentRole::Editor => 3,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            AgentRole::Annotator => "Annotator",
            AgentRole::Decision => "Decision",
            AgentRole::Creator => "Creator",
            AgentRole::Editor => "Editor",
        }
    }
}

impl std::fmt::Display for AgentRole {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for AgentRole {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "annotator" => Ok(AgentRole::Annotator),
            "decision" => Ok(AgentRole::Decision),
            "creator" => Ok(AgentRole::Creator),
            "editor" => Ok(AgentRole::Editor),
            other => Err(format!("unknown agent role {other:?}")),
        }
    }
}

/// A system + user message pair sent to the backend.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptMessages {
    pub system: String,
    pub user: String,
}

/// Update action chosen by the decision agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionKind {
    Add,
    Edit,
    Remove,
}

impl std::fmt::Display for ActionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ActionKind::Add => "add",
            ActionKind::Edit => "edit",
            ActionKind::Remove => "remove",
        })
    }
}

/// Validated decision agent output. `rule_index` is `-1` for `Add` and a
/// valid 0-based index for `Edit` / `Remove`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionOutcome {
    pub action: ActionKind,
    pub rule_index: i64,
    pub reasoning: String,
}

impl DecisionOutcome {
    /// Target index for Edit/Remove; None for Add.
    pub fn target_index(&self) -> Option<usize> {
        match self.action {
            ActionKind::Add => None,
            _ => Some(self.rule_index as usize),
        }
    }
}

/// Compressed error profile handed to the decision / creator / editor agents.
///
/// `fp_per_fn` is `None` when `fn_count` is zero, rendered as the `inf`
/// sentinel in prompts.
#[derive(Debug, Clone)]
pub struct ErrorSummary {
    pub fn_count: usize,
    pub fp_count: usize,
    pub total_errors: usize,
    pub fp_per_fn: Option<f64>,
    pub rule_count: usize,
    pub trend: Option<String>,
    pub sampled_fn: Vec<ErrorItem>,
    pub sampled_fp: Vec<ErrorItem>,
}

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("no JSON object with key {key:?} found in agent output")]
    ParseFailure { key: String },
    #[error("invalid decision: {0}")]
    InvalidDecision(String),
    #[error("rule too long: {len} chars exceeds cap {cap}")]
    RuleTooLong { len: usize, cap: usize },
    #[error("rule text is empty")]
    RuleEmpty,
    #[error("rule index {index} out of range (constitution has {len} rules)")]
    IndexOutOfRange { index: usize, len: usize },
}

impl AgentError {
    /// Parse-level failures, as opposed to valid JSON carrying an invalid decision.
    pub fn is_parse_failure(&self) -> bool {
        matches!(self, AgentError::ParseFailure { .. })
    }
}

/// Annotator output: the extracted phrase list plus the number of non-string
/// array entries that were dropped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotatorPhrases {
    pub phrases: Vec<String>,
    pub dropped_non_strings: usize,
}

// ----- prompt builders -----

/// Build the annotator prompt: rendered constitution, zero or more few-shot
/// demonstrations, then the target document.
pub fn build_annotator_prompt(
    doc: &Document,
    c: &Constitution,
    fewshot: &[LabeledDoc],
    t: &PromptTemplates,
) -> PromptMessages {
    let demos: String = fewshot
        .iter()
        .map(|ex| {
            let output = serde_json::json!({ "private_phrases": ex.gold.phrases }).to_string();
            fill(
                &t.demonstration,
                &[
                    ("demo_document", ex.doc.text.as_str()),
                    ("demo_output", output.as_str()),
                ],
            )
        })
        .collect();
    let user = fill(
        &t.annotator_user,
        &[
            ("constitution", c.render().as_str()),
            ("demonstrations", demos.as_str()),
            ("document", doc.text.as_str()),
        ],
    );
    PromptMessages {
        system: t.annotator_system.clone(),
        user,
    }
}

/// Parse `{"private_phrases": [...]}` out of raw annotator output.
pub fn parse_annotator_output(raw: &str) -> Result<AnnotatorPhrases, AgentError> {
    let obj = find_json_object(raw, "private_phrases").ok_or_else(|| AgentError::ParseFailure {
        key: "private_phrases".into(),
    })?;
    let array = obj["private_phrases"]
        .as_array()
        .ok_or_else(|| AgentError::ParseFailure {
            key: "private_phrases".into(),
        })?;
    let mut phrases = Vec::with_capacity(array.len());
    let mut dropped = 0usize;
    for entry in array {
        match entry.as_str() {
            Some(s) => phrases.push(s.to_string()),
            None => {
                dropped += 1;
                log::warn!("dropping non-string private_phrases entry: {entry}");
            }
        }
    }
    Ok(AnnotatorPhrases {
        phrases,
        dropped_non_strings: dropped,
    })
}

/// Summarize a match report for the decision agent: counts, ratio, and a
/// seeded sample (without replacement) of up to `sample_n` FN and FP items.
pub fn summarize_errors(
    report: &MatchReport,
    c: &Constitution,
    trend: Option<String>,
    sample_n: usize,
    seed: u64,
) -> ErrorSummary {
    summarize_items(&report.fn_items, &report.fp_items, c.len(), trend, sample_n, seed)
}

/// Adapter-agnostic form of [`summarize_errors`]: FN items are the task's
/// missed expectations, FP items its spurious outputs.
pub fn summarize_items(
    fn_items: &[ErrorItem],
    fp_items: &[ErrorItem],
    rule_count: usize,
    trend: Option<String>,
    sample_n: usize,
    seed: u64,
) -> ErrorSummary {
    let fn_count = fn_items.len();
    let fp_count = fp_items.len();
    let fp_per_fn = if fn_count == 0 {
        None
    } else {
        Some(fp_count as f64 / fn_count as f64)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ErrorSummary {
        fn_count,
        fp_count,
        total_errors: fn_count + fp_count,
        fp_per_fn,
        rule_count,
        trend,
        sampled_fn: sample_without_replacement(fn_items, sample_n, &mut rng),
        sampled_fp: sample_without_replacement(fp_items, sample_n, &mut rng),
    }
}

fn sample_without_replacement(
    items: &[ErrorItem],
    sample_n: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<ErrorItem> {
    if items.len() <= sample_n {
        return items.to_vec();
    }
    let mut picked: Vec<usize> = rand::seq::index::sample(rng, items.len(), sample_n).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| items[i].clone()).collect()
}

fn format_items(items: &[ErrorItem]) -> String {
    if items.is_empty() {
        return "(none)".to_string();
    }
    let mut out = String::new();
    for item in items {
        let head = serde_json::json!({
            "phrase": item.phrase,
            "kind": item.kind,
            "doc_id": item.doc_id,
        });
        out.push_str(&format!("- {head}\n"));
        for ctx in &item.contexts {
            out.push_str(&format!("  context: {ctx}\n"));
        }
    }
    out.trim_end().to_string()
}

fn format_rejected(rejected: &RejectedHistory) -> String {
    if rejected.is_empty() {
        return "none".to_string();
    }
    let mut out = String::new();
    for (label, texts) in [
        ("Rejected additions", rejected.add_texts().collect::<Vec<_>>()),
        ("Rejected edits", rejected.edit_texts().collect::<Vec<_>>()),
        ("Rejected removals", rejected.remove_texts().collect::<Vec<_>>()),
    ] {
        if texts.is_empty() {
            continue;
        }
        out.push_str(label);
        out.push_str(":\n");
        for text in texts {
            out.push_str(&format!("- {text:?}\n"));
        }
    }
    out.trim_end().to_string()
}

fn state_json(summary: &ErrorSummary, r_max: usize) -> String {
    let mut state = serde_json::json!({
        "false_negatives": summary.fn_count,
        "false_positives": summary.fp_count,
        "total_errors": summary.total_errors,
        "fp_per_fn": match summary.fp_per_fn {
            Some(r) => serde_json::json!((r * 1e6).round() / 1e6),
            None => serde_json::json!("inf"),
        },
        "rule_count": summary.rule_count,
        "rule_budget": r_max,
    });
    if let Some(trend) = &summary.trend {
        state["trend"] = serde_json::json!(trend);
    }
    state.to_string()
}

fn capacity_note(rule_count: usize, r_max: usize) -> String {
    if rule_count == 0 {
        "The constitution is empty: only add is valid.".to_string()
    } else if rule_count >= r_max {
        format!("Add is unavailable: the constitution is at its budget of {r_max} rules.")
    } else {
        format!("Capacity: {rule_count} of {r_max} rule slots used.")
    }
}

/// Build the decision prompt from an error summary and the current constitution.
pub fn build_decision_prompt(
    summary: &ErrorSummary,
    c: &Constitution,
    r_max: usize,
    t: &PromptTemplates,
) -> PromptMessages {
    build_decision_prompt_for(PII_TASK_NOTE, summary, c, r_max, t)
}

/// Task-parameterized variant used by non-default task adapters.
pub fn build_decision_prompt_for(
    task_note: &str,
    summary: &ErrorSummary,
    c: &Constitution,
    r_max: usize,
    t: &PromptTemplates,
) -> PromptMessages {
    let user = fill(
        &t.decision_user,
        &[
            ("task_note", task_note),
            ("state", state_json(summary, r_max).as_str()),
            ("sampled_fn", format_items(&summary.sampled_fn).as_str()),
            ("sampled_fp", format_items(&summary.sampled_fp).as_str()),
            ("constitution", c.render().as_str()),
            ("capacity_note", capacity_note(c.len(), r_max).as_str()),
        ],
    );
    PromptMessages {
        system: t.decision_system.clone(),
        user,
    }
}

/// Parse and validate the decision agent output against the current
/// constitution and budget. Accepts numeric or numeric-string rule indices
/// and case-insensitive action names.
pub fn parse_decision_output(
    raw: &str,
    c: &Constitution,
    r_max: usize,
) -> Result<DecisionOutcome, AgentError> {
    let obj = find_json_object(raw, "action").ok_or_else(|| AgentError::ParseFailure {
        key: "action".into(),
    })?;
    let action_str = obj["action"]
        .as_str()
        .ok_or_else(|| AgentError::ParseFailure {
            key: "action".into(),
        })?
        .trim()
        .to_ascii_lowercase();
    let action = match action_str.as_str() {
        "add" => ActionKind::Add,
        "edit" => ActionKind::Edit,
        "remove" => ActionKind::Remove,
        _ => {
            return Err(AgentError::ParseFailure {
                key: "action".into(),
            })
        }
    };
    let rule_index = match &obj["rule_index"] {
        serde_json::Value::Number(n) => n.as_i64().ok_or_else(|| AgentError::ParseFailure {
            key: "rule_index".into(),
        })?,
        serde_json::Value::String(s) => {
            s.trim()
                .parse::<i64>()
                .map_err(|_| AgentError::ParseFailure {
                    key: "rule_index".into(),
                })?
        }
        _ => {
            return Err(AgentError::ParseFailure {
                key: "rule_index".into(),
            })
        }
    };
    let reasoning = obj["reasoning"].as_str().unwrap_or_default().to_string();

    match action {
        ActionKind::Add => {
            if c.len() >= r_max {
                return Err(AgentError::InvalidDecision(format!(
                    "add at full budget of {r_max} rules"
                )));
            }
            Ok(DecisionOutcome {
                action,
                rule_index: -1,
                reasoning,
            })
        }
        ActionKind::Edit | ActionKind::Remove => {
            if rule_index < 0 || rule_index as usize >= c.len() {
                return Err(AgentError::InvalidDecision(format!(
                    "{action} targets rule {rule_index} but the constitution has {} rules",
                    c.len()
                )));
            }
            Ok(DecisionOutcome {
                action,
                rule_index,
                reasoning,
            })
        }
    }
}

/// Build the creator prompt: decision rationale, constitution, sampled
/// errors, and the rejected-update history.
pub fn build_creator_prompt(
    summary: &ErrorSummary,
    rationale: &str,
    c: &Constitution,
    rejected: &RejectedHistory,
    rule_char_cap: usize,
    t: &PromptTemplates,
) -> PromptMessages {
    build_creator_prompt_for(PII_TASK_NOTE, summary, rationale, c, rejected, rule_char_cap, t)
}

pub fn build_creator_prompt_for(
    task_note: &str,
    summary: &ErrorSummary,
    rationale: &str,
    c: &Constitution,
    rejected: &RejectedHistory,
    rule_char_cap: usize,
    t: &PromptTemplates,
) -> PromptMessages {
    let cap = rule_char_cap.to_string();
    let system = fill(&t.creator_system, &[("rule_char_cap", cap.as_str())]);
    let user = fill(
        &t.creator_user,
        &[
            ("task_note", task_note),
            ("rationale", rationale),
            ("constitution", c.render().as_str()),
            ("sampled_fn", format_items(&summary.sampled_fn).as_str()),
            ("sampled_fp", format_items(&summary.sampled_fp).as_str()),
            ("rejected", format_rejected(rejected).as_str()),
        ],
    );
    PromptMessages { system, user }
}

/// Build the editor prompt targeting `rule_index`. Fails before any backend
/// call when the index is out of range.
pub fn build_editor_prompt(
    rule_index: usize,
    summary: &ErrorSummary,
    rationale: &str,
    c: &Constitution,
    rejected: &RejectedHistory,
    rule_char_cap: usize,
    t: &PromptTemplates,
) -> Result<PromptMessages, AgentError> {
    build_editor_prompt_for(PII_TASK_NOTE, rule_index, summary, rationale, c, rejected, rule_char_cap, t)
}

#[allow(clippy::too_many_arguments)]
pub fn build_editor_prompt_for(
    task_note: &str,
    rule_index: usize,
    summary: &ErrorSummary,
    rationale: &str,
    c: &Constitution,
    rejected: &RejectedHistory,
    rule_char_cap: usize,
    t: &PromptTemplates,
) -> Result<PromptMessages, AgentError> {
    let target = c
        .rules()
        .get(rule_index)
        .ok_or(AgentError::IndexOutOfRange {
            index: rule_index,
            len: c.len(),
        })?;
    let cap = rule_char_cap.to_string();
    let system = fill(&t.editor_system, &[("rule_char_cap", cap.as_str())]);
    let index_str = rule_index.to_string();
    let user = fill(
        &t.editor_user,
        &[
            ("task_note", task_note),
            ("rule_index", index_str.as_str()),
            ("target_rule", target.text.as_str()),
            ("rationale", rationale),
            ("constitution", c.render().as_str()),
            ("sampled_fn", format_items(&summary.sampled_fn).as_str()),
            ("sampled_fp", format_items(&summary.sampled_fp).as_str()),
            ("rejected", format_rejected(rejected).as_str()),
        ],
    );
    Ok(PromptMessages { system, user })
}

/// Parse `{"rule": "..."}`, trim and collapse internal whitespace runs, and
/// enforce the nonempty and length-cap constraints.
pub fn parse_rule_output(raw: &str, cap: usize) -> Result<String, AgentError> {
    let obj = find_json_object(raw, "rule").ok_or_else(|| AgentError::ParseFailure {
        key: "rule".into(),
    })?;
    let text = obj["rule"]
        .as_str()
        .ok_or_else(|| AgentError::ParseFailure { key: "rule".into() })?;
    let text = text.split_whitespace().collect::<Vec<_>>().join(" ");
    if text.is_empty() {
        return Err(AgentError::RuleEmpty);
    }
    let len = text.chars().count();
    if len > cap {
        return Err(AgentError::RuleTooLong { len, cap });
    }
    Ok(text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constitution::{Step, UpdateOp};
    use crate::corpus::GoldLabel;
    use crate::matcher::ErrorKind;

    fn constitution(texts: &[&str]) -> Constitution {
        let mut c = Constitution::new(25).unwrap();
        for t in texts {
            c = c
                .apply_update(
                    &UpdateOp::Add {
                        text: t.to_string(),
                    },
                    Step::default(),
                )
                .unwrap();
        }
        c
    }

    fn doc(text: &str) -> Document {
        Document {
            id: "d1".into(),
            text: text.into(),
        }
    }

    fn item(phrase: &str, kind: ErrorKind) -> ErrorItem {
        ErrorItem {
            doc_id: "d1".into(),
            phrase: phrase.into(),
            kind,
            contexts: vec![format!("ctx {phrase} ctx")],
        }
    }

    fn summary_of(fn_items: Vec<ErrorItem>, fp_items: Vec<ErrorItem>, rules: usize) -> ErrorSummary {
        summarize_items(&fn_items, &fp_items, rules, None, 10, 0)
    }

    #[test]
    fn annotator_prompt_empty_constitution_has_sentinel() {
        let t = PromptTemplates::default();
        let c = constitution(&[]);
        let p = build_annotator_prompt(&doc("hello"), &c, &[], &t);
        assert!(p.user.contains("use your own best judgment"));
        assert!(!p.user.contains(DEMO_HEADING));
    }

    #[test]
    fn annotator_prompt_demo_blocks_precede_target() {
        let t = PromptTemplates::default();
        let c = constitution(&["r0"]);
        let demos: Vec<LabeledDoc> = (0..3)
            .map(|i| LabeledDoc {
                doc: Document {
                    id: format!("t{i}"),
                    text: format!("train doc {i}"),
                },
                gold: GoldLabel {
                    doc_id: format!("t{i}"),
                    phrases: vec![format!("{i}")],
                    groups: None,
                },
            })
            .collect();
        let p = build_annotator_prompt(&doc("target text"), &c, &demos, &t);
        assert_eq!(p.user.matches(DEMO_HEADING).count(), 3);
        let last_demo = p.user.rfind(DEMO_HEADING).unwrap();
        let target = p.user.find(DOC_BEGIN).unwrap();
        assert!(last_demo < target, "demonstrations must precede the target");
    }

    #[test]
    fn annotator_prompt_includes_rule_texts_verbatim() {
        let t = PromptTemplates::default();
        let c = constitution(&["mark years", "mark emails"]);
        let p = build_annotator_prompt(&doc("x"), &c, &[], &t);
        assert!(p.user.contains("mark years"));
        assert!(p.user.contains("mark emails"));
    }

    #[test]
    fn annotator_parse_direct() {
        let out = parse_annotator_output(r#"{"private_phrases":["a","b"]}"#).unwrap();
        assert_eq!(out.phrases, vec!["a", "b"]);
        assert_eq!(out.dropped_non_strings, 0);
    }

    #[test]
    fn annotator_parse_fenced_with_prose() {
        let raw = "Sure, here are the phrases:\n```json\n{\n \"private_phrases\": [\n  \"John\",\n  \"1975\"\n ]\n}\n```\nLet me know if you need more.";
        let out = parse_annotator_output(raw).unwrap();
        assert_eq!(out.phrases, vec!["John", "1975"]);
    }

    #[test]
    fn annotator_parse_refusal_fails() {
        let err = parse_annotator_output("I refuse").unwrap_err();
        assert!(err.is_parse_failure());
    }

    #[test]
    fn annotator_parse_drops_non_strings() {
        let out = parse_annotator_output(r#"{"private_phrases":["a", 7, "b"]}"#).unwrap();
        assert_eq!(out.phrases, vec!["a", "b"]);
        assert_eq!(out.dropped_non_strings, 1);
    }

    #[test]
    fn summary_ratio_hand_computed() {
        let fn_items: Vec<ErrorItem> = (0..12)
            .map(|i| item(&format!("fn{i}"), ErrorKind::FalseNegative))
            .collect();
        let fp_items: Vec<ErrorItem> = (0..3)
            .map(|i| item(&format!("fp{i}"), ErrorKind::FalsePositive))
            .collect();
        let s = summary_of(fn_items, fp_items, 2);
        assert_eq!(s.sampled_fn.len(), 10);
        assert_eq!(s.sampled_fp.len(), 3);
        assert_eq!(s.fp_per_fn, Some(0.25));
        assert_eq!(s.total_errors, 15);
    }

    #[test]
    fn summary_infinite_ratio_sentinel() {
        let fp_items: Vec<ErrorItem> = (0..5)
            .map(|i| item(&format!("fp{i}"), ErrorKind::FalsePositive))
            .collect();
        let s = summary_of(vec![], fp_items, 1);
        assert_eq!(s.fp_per_fn, None);
        let prompt = build_decision_prompt(&s, &constitution(&["r0"]), 25, &PromptTemplates::default());
        assert!(prompt.user.contains("\"fp_per_fn\":\"inf\""));
    }

    #[test]
    fn summary_sampling_deterministic() {
        let fn_items: Vec<ErrorItem> = (0..40)
            .map(|i| item(&format!("p{i}"), ErrorKind::FalseNegative))
            .collect();
        let a = summarize_items(&fn_items, &[], 0, None, 10, 9);
        let b = summarize_items(&fn_items, &[], 0, None, 10, 9);
        assert_eq!(a.sampled_fn, b.sampled_fn);
    }

    #[test]
    fn decision_prompt_full_budget_blocks_add() {
        let c = constitution(&["a", "b"]);
        let s = summary_of(vec![], vec![], c.len());
        let p = build_decision_prompt(&s, &c, 2, &PromptTemplates::default());
        assert!(p.user.contains("Add is unavailable"));
    }

    #[test]
    fn decision_prompt_empty_constitution_permits_only_add() {
        let c = constitution(&[]);
        let s = summary_of(vec![item("x", ErrorKind::FalseNegative)], vec![], 0);
        let p = build_decision_prompt(&s, &c, 25, &PromptTemplates::default());
        assert!(p.user.contains("only add is valid"));
    }

    #[test]
    fn decision_prompt_trend_section_omitted_when_absent() {
        let c = constitution(&["a"]);
        let with = summarize_items(&[], &[], 1, Some("FN 4→2, FP 1→1 vs previous batch".into()), 10, 0);
        let without = summarize_items(&[], &[], 1, None, 10, 0);
        let p_with = build_decision_prompt(&with, &c, 25, &PromptTemplates::default());
        let p_without = build_decision_prompt(&without, &c, 25, &PromptTemplates::default());
        assert!(p_with.user.contains("\"trend\""));
        assert!(!p_without.user.contains("\"trend\""));
    }

    #[test]
    fn decision_parse_string_index_coerced() {
        let c = constitution(&[]);
        let raw = r#"{"action":"add","rule_index":"-1","reasoning":"more rules"}"#;
        let d = parse_decision_output(raw, &c, 25).unwrap();
        assert_eq!(d.action, ActionKind::Add);
        assert_eq!(d.rule_index, -1);
    }

    #[test]
    fn decision_parse_numeric_index_and_case() {
        let c = constitution(&["r0"]);
        let raw = r#"{"action":"Edit","rule_index":0,"reasoning":"tighten"}"#;
        let d = parse_decision_output(raw, &c, 25).unwrap();
        assert_eq!(d.action, ActionKind::Edit);
        assert_eq!(d.rule_index, 0);
    }

    #[test]
    fn decision_parse_out_of_range_is_invalid_not_parse_failure() {
        let c = constitution(&["a", "b"]);
        let raw = r#"{"action":"remove","rule_index":5,"reasoning":"x"}"#;
        let err = parse_decision_output(raw, &c, 25).unwrap_err();
        assert!(matches!(err, AgentError::InvalidDecision(_)));
        assert!(!err.is_parse_failure());
    }

    #[test]
    fn decision_parse_add_at_full_budget_invalid() {
        let c = constitution(&["a", "b"]);
        let raw = r#"{"action":"add","rule_index":-1,"reasoning":"x"}"#;
        let err = parse_decision_output(raw, &c, 2).unwrap_err();
        assert!(matches!(err, AgentError::InvalidDecision(_)));
    }

    #[test]
    fn decision_round_trip() {
        let c = constitution(&["a", "b", "c"]);
        for d in [
            DecisionOutcome {
                action: ActionKind::Add,
                rule_index: -1,
                reasoning: "r".into(),
            },
            DecisionOutcome {
                action: ActionKind::Edit,
                rule_index: 2,
                reasoning: "r".into(),
            },
            DecisionOutcome {
                action: ActionKind::Remove,
                rule_index: 0,
                reasoning: "r".into(),
            },
        ] {
            let json = serde_json::to_string(&d).unwrap();
            assert_eq!(parse_decision_output(&json, &c, 25).unwrap(), d);
        }
    }

    #[test]
    fn creator_prompt_includes_rationale_and_history() {
        let c = constitution(&["r0"]);
        let mut rejected = RejectedHistory::new(20);
        for text in ["bad rule one", "bad rule two", "bad rule three"] {
            rejected.record(
                &UpdateOp::Add {
                    text: text.to_string(),
                },
                text,
                Step::default(),
            );
        }
        let s = summary_of(vec![item("1975", ErrorKind::FalseNegative)], vec![], 1);
        let p = build_creator_prompt(&s, "add a year rule", &c, &rejected, 500, &PromptTemplates::default());
        assert!(p.user.contains("add a year rule"));
        assert!(p.user.contains("bad rule one"));
        assert!(p.user.contains("bad rule two"));
        assert!(p.user.contains("bad rule three"));
        assert!(p.user.contains("1975"));
        assert!(p.system.contains("500"));
    }

    #[test]
    fn creator_prompt_empty_history_says_none() {
        let c = constitution(&[]);
        let s = summary_of(vec![], vec![], 0);
        let p = build_creator_prompt(&s, "r", &c, &RejectedHistory::new(20), 500, &PromptTemplates::default());
        assert!(p.user.contains("# Previously rejected updates\nnone"));
    }

    #[test]
    fn editor_prompt_targets_rule() {
        let c = constitution(&["rule zero", "rule one", "rule two"]);
        let s = summary_of(vec![], vec![], 3);
        let p = build_editor_prompt(1, &s, "widen it", &c, &RejectedHistory::new(20), 500, &PromptTemplates::default())
            .unwrap();
        assert!(p.user.contains("# Edit target\nRule 1: rule one"));
    }

    #[test]
    fn editor_prompt_invalid_index_fails_before_backend() {
        let c = constitution(&["only"]);
        let s = summary_of(vec![], vec![], 1);
        let err = build_editor_prompt(4, &s, "x", &c, &RejectedHistory::new(20), 500, &PromptTemplates::default())
            .unwrap_err();
        assert!(matches!(err, AgentError::IndexOutOfRange { index: 4, len: 1 }));
    }

    #[test]
    fn rule_parse_direct() {
        let text = parse_rule_output(
            r#"{"rule":"Mark 4-digit years; do not mark page numbers."}"#,
            500,
        )
        .unwrap();
        assert_eq!(text, "Mark 4-digit years; do not mark page numbers.");
    }

    #[test]
    fn rule_parse_too_long() {
        let long = "x".repeat(600);
        let raw = serde_json::json!({ "rule": long }).to_string();
        assert!(matches!(
            parse_rule_output(&raw, 500),
            Err(AgentError::RuleTooLong { len: 600, cap: 500 })
        ));
    }

    #[test]
    fn rule_parse_empty() {
        assert!(matches!(
            parse_rule_output(r#"{"rule":""}"#, 500),
            Err(AgentError::RuleEmpty)
        ));
    }
}
