//! Task adapters: the span-tagging task (default) and the tool-calling task
//! behind one contract, so the optimization loop stays task-agnostic.
//!
//! An adapter supplies the annotation prompt, the output parser, and the
//! scoring function; everything else (decision / creator / editor flow,
//! accept-if-improved, validation tracking) is shared. The metric is span F1
//! for tagging and all-or-nothing call-set accuracy for tool calling.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{
    build_annotator_prompt, find_json_object, parse_annotator_output, AgentError, PromptMessages,
    PromptTemplates, PII_TASK_NOTE,
};
use crate::constitution::Constitution;
use crate::corpus::{CorpusError, LabeledDoc};
use crate::agents::template_fill as templates_fill;
use crate::matcher::{match_batch, ErrorItem, ErrorKind, MatchReport, MatcherError};
use crate::optimizer::BatchScore;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error(transparent)]
    Matcher(#[from] MatcherError),
}

/// Anything the loop can iterate over: an input with a stable unique id.
pub trait TaskInstance: Clone + Send + Sync {
    fn id(&self) -> &str;
}

impl TaskInstance for LabeledDoc {
    fn id(&self) -> &str {
        &self.doc.id
    }
}

/// One task's pluggable surface. `score_batch` must be deterministic and
/// yield a metric in `[0, 1]`.
pub trait TaskAdapter: Sync {
    type Instance: TaskInstance;
    type Prediction: Clone + Send;

    fn name(&self) -> &'static str;

    /// One-line task framing injected into the decision / creator / editor prompts.
    fn task_note(&self) -> &'static str;

    fn annotation_prompt(
        &self,
        inst: &Self::Instance,
        c: &Constitution,
        fewshot: &[Self::Instance],
        templates: &PromptTemplates,
    ) -> PromptMessages;

    fn parse_prediction(&self, raw: &str) -> Result<Self::Prediction, AgentError>;

    /// Prediction an instance degrades to when its output cannot be parsed.
    fn empty_prediction(&self) -> Self::Prediction;

    fn score_batch(
        &self,
        predictions: &[(String, Self::Prediction)],
        instances: &[&Self::Instance],
        window: usize,
    ) -> Result<BatchScore, TaskError>;
}

/// The default span-tagging task.
#[derive(Debug, Clone, Copy, Default)]
pub struct PiiTask;

impl TaskAdapter for PiiTask {
    type Instance = LabeledDoc;
    type Prediction = Vec<String>;

    fn name(&self) -> &'static str {
        "pii"
    }

    fn task_note(&self) -> &'static str {
        PII_TASK_NOTE
    }

    fn annotation_prompt(
        &self,
        inst: &LabeledDoc,
        c: &Constitution,
        fewshot: &[LabeledDoc],
        templates: &PromptTemplates,
    ) -> PromptMessages {
        build_annotator_prompt(&inst.doc, c, fewshot, templates)
    }

    fn parse_prediction(&self, raw: &str) -> Result<Vec<String>, AgentError> {
        Ok(parse_annotator_output(raw)?.phrases)
    }

    fn empty_prediction(&self) -> Vec<String> {
        Vec::new()
    }

    fn score_batch(
        &self,
        predictions: &[(String, Vec<String>)],
        instances: &[&LabeledDoc],
        window: usize,
    ) -> Result<BatchScore, TaskError> {
        let report = match_labeled(predictions, instances, window)?;
        Ok(BatchScore {
            mu: report.f1,
            precision: report.precision,
            recall: report.recall,
            tp: report.tp,
            fn_items: report.fn_items,
            fp_items: report.fp_items,
        })
    }
}

/// Micro-aggregated match over labeled documents.
pub fn match_labeled(
    predictions: &[(String, Vec<String>)],
    instances: &[&LabeledDoc],
    window: usize,
) -> Result<MatchReport, MatcherError> {
    let preds: BTreeMap<String, Vec<String>> = predictions.iter().cloned().collect();
    let golds: BTreeMap<String, Vec<String>> = instances
        .iter()
        .map(|r| (r.doc.id.clone(), r.gold.phrases.clone()))
        .collect();
    let docs: BTreeMap<String, &crate::corpus::Document> =
        instances.iter().map(|r| (r.doc.id.clone(), &r.doc)).collect();
    match_batch(&preds, &golds, &docs, window)
}

// ----- tool calling -----

/// Declared function: name plus parameter name → type-name map.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolFunctionSig {
    pub name: String,
    #[serde(default)]
    pub parameters: BTreeMap<String, String>,
}

/// One function call: name plus argument map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolCall {
    pub name: String,
    #[serde(default)]
    pub arguments: BTreeMap<String, serde_json::Value>,
}

impl ToolCall {
    /// Compact `name(k=v, ...)` rendering used in error items.
    pub fn render(&self) -> String {
        let args = self
            .arguments
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(", ");
        format!("{}({args})", self.name)
    }
}

/// One tool-calling instance: request, declared functions, expected call set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolCallInstance {
    pub id: String,
    pub request: String,
    pub functions: Vec<ToolFunctionSig>,
    pub gold_calls: Vec<ToolCall>,
}

impl TaskInstance for ToolCallInstance {
    fn id(&self) -> &str {
        &self.id
    }
}

/// Why a call failed to match.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailedSide {
    /// Expected call with no matching prediction.
    Missing,
    /// Predicted call with no matching expectation.
    Spurious,
}

/// A failed call with its mismatch diagnosis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedCall {
    pub call: ToolCall,
    pub side: FailedSide,
    pub reason: String,
}

/// Exact-set scoring for one instance: 1.0 iff the predicted call set equals
/// the gold set under normalization (function names exact; argument maps
/// key-equal; numerals compared numerically, strings after trim), else 0.0,
/// with a diagnosis per unmatched call.
pub fn score_tool_calls(predicted: &[ToolCall], gold: &[ToolCall]) -> (f64, Vec<FailedCall>) {
    let mut used = vec![false; predicted.len()];
    let mut failed = Vec::new();
    let mut matched = 0usize;

    for g in gold {
        let slot = predicted
            .iter()
            .enumerate()
            .find(|(i, p)| !used[*i] && calls_equal(p, g));
        match slot {
            Some((i, _)) => {
                used[i] = true;
                matched += 1;
            }
            None => failed.push(FailedCall {
                call: g.clone(),
                side: FailedSide::Missing,
                reason: diagnose_missing(g, predicted, &used),
            }),
        }
    }
    for (i, p) in predicted.iter().enumerate() {
        if !used[i] {
            let known_name = gold.iter().any(|g| g.name == p.name);
            failed.push(FailedCall {
                call: p.clone(),
                side: FailedSide::Spurious,
                reason: if known_name {
                    "extra call".to_string()
                } else {
                    format!("wrong or undeclared function name {:?}", p.name)
                },
            });
        }
    }

    let correct = failed.is_empty() && matched == gold.len() && matched == predicted.len();
    (if correct { 1.0 } else { 0.0 }, failed)
}

fn diagnose_missing(g: &ToolCall, predicted: &[ToolCall], used: &[bool]) -> String {
    let candidate = predicted
        .iter()
        .enumerate()
        .find(|(i, p)| !used[*i] && p.name == g.name)
        .map(|(_, p)| p);
    let Some(p) = candidate else {
        return "missing call".to_string();
    };
    for (key, want) in &g.arguments {
        match p.arguments.get(key) {
            None => return format!("missing argument {key:?}"),
            Some(got) if !values_equal(got, want) => {
                return format!("wrong value for {key:?}: got {got}, expected {want}")
            }
            _ => {}
        }
    }
    for key in p.arguments.keys() {
        if !g.arguments.contains_key(key) {
            return format!("unexpected argument {key:?}");
        }
    }
    "missing call".to_string()
}

fn calls_equal(p: &ToolCall, g: &ToolCall) -> bool {
    if p.name != g.name {
        return false;
    }
    let p_keys: BTreeSet<&String> = p.arguments.keys().collect();
    let g_keys: BTreeSet<&String> = g.arguments.keys().collect();
    if p_keys != g_keys {
        return false;
    }
    g.arguments
        .iter()
        .all(|(k, want)| values_equal(&p.arguments[k], want))
}

// Value comparison with light normalization: numerals numerically (including
// numeric strings), strings after trim, containers element-wise.
fn values_equal(a: &serde_json::Value, b: &serde_json::Value) -> bool {
    use serde_json::Value::*;
    match (a, b) {
        (Number(x), Number(y)) => x.as_f64() == y.as_f64(),
        (String(x), String(y)) => x.trim() == y.trim(),
        (Number(x), String(y)) | (String(y), Number(x)) => {
            y.trim().parse::<f64>().is_ok_and(|parsed| Some(parsed) == x.as_f64())
        }
        (Bool(x), Bool(y)) => x == y,
        (Null, Null) => true,
        (Array(xs), Array(ys)) => {
            xs.len() == ys.len() && xs.iter().zip(ys).all(|(x, y)| values_equal(x, y))
        }
        (Object(xs), Object(ys)) => {
            xs.len() == ys.len()
                && xs
                    .iter()
                    .all(|(k, x)| ys.get(k).is_some_and(|y| values_equal(x, y)))
        }
        _ => false,
    }
}

/// A failed call as an error item for the shared prompts: missing calls feed
/// the FN section, spurious calls the FP section.
pub fn failed_call_item(instance: &ToolCallInstance, failed: &FailedCall) -> ErrorItem {
    ErrorItem {
        doc_id: instance.id.clone(),
        phrase: failed.call.render(),
        kind: match failed.side {
            FailedSide::Missing => ErrorKind::FalseNegative,
            FailedSide::Spurious => ErrorKind::FalsePositive,
        },
        contexts: vec![
            failed.reason.clone(),
            format!("request: {}", instance.request),
        ],
    }
}

/// The tool-calling task adapter.
#[derive(Debug, Clone, Copy, Default)]
pub struct ToolTask;

impl TaskAdapter for ToolTask {
    type Instance = ToolCallInstance;
    type Prediction = Vec<ToolCall>;

    fn name(&self) -> &'static str {
        "tool"
    }

    fn task_note(&self) -> &'static str {
        "The agent decomposes a user request into independent function calls; the constitution rules guide tool selection and argument typing."
    }

    fn annotation_prompt(
        &self,
        inst: &ToolCallInstance,
        c: &Constitution,
        fewshot: &[ToolCallInstance],
        templates: &PromptTemplates,
    ) -> PromptMessages {
        let demos: String = fewshot
            .iter()
            .map(|ex| {
                let output = serde_json::json!({ "calls": ex.gold_calls }).to_string();
                templates_fill(
                    &templates.tool_demonstration,
                    &[
                        ("demo_request", ex.request.as_str()),
                        ("demo_output", output.as_str()),
                    ],
                )
            })
            .collect();
        let functions =
            serde_json::to_string_pretty(&inst.functions).expect("signatures serialize");
        let user = templates_fill(
            &templates.tool_annotator_user,
            &[
                ("constitution", c.render().as_str()),
                ("functions", functions.as_str()),
                ("demonstrations", demos.as_str()),
                ("request", inst.request.as_str()),
            ],
        );
        PromptMessages {
            system: templates.tool_annotator_system.clone(),
            user,
        }
    }

    fn parse_prediction(&self, raw: &str) -> Result<Vec<ToolCall>, AgentError> {
        let obj = find_json_object(raw, "calls").ok_or_else(|| AgentError::ParseFailure {
            key: "calls".into(),
        })?;
        let array = obj["calls"].as_array().ok_or_else(|| AgentError::ParseFailure {
            key: "calls".into(),
        })?;
        let mut calls = Vec::with_capacity(array.len());
        for entry in array {
            match serde_json::from_value::<ToolCall>(entry.clone()) {
                Ok(call) => calls.push(call),
                Err(e) => log::warn!("dropping malformed call entry: {e}"),
            }
        }
        Ok(calls)
    }

    fn empty_prediction(&self) -> Vec<ToolCall> {
        Vec::new()
    }

    fn score_batch(
        &self,
        predictions: &[(String, Vec<ToolCall>)],
        instances: &[&ToolCallInstance],
        _window: usize,
    ) -> Result<BatchScore, TaskError> {
        let by_id: BTreeMap<&str, &Vec<ToolCall>> = predictions
            .iter()
            .map(|(id, calls)| (id.as_str(), calls))
            .collect();
        let empty = Vec::new();
        let mut correct = 0usize;
        let mut matched_calls = 0usize;
        let mut total_pred = 0usize;
        let mut total_gold = 0usize;
        let mut fn_items = Vec::new();
        let mut fp_items = Vec::new();
        for inst in instances {
            let pred = by_id.get(inst.id.as_str()).copied().unwrap_or(&empty);
            let (score, failed) = score_tool_calls(pred, &inst.gold_calls);
            let missing = failed.iter().filter(|f| f.side == FailedSide::Missing).count();
            matched_calls += inst.gold_calls.len() - missing;
            total_pred += pred.len();
            total_gold += inst.gold_calls.len();
            if score == 1.0 {
                correct += 1;
            }
            for f in &failed {
                let item = failed_call_item(inst, f);
                match f.side {
                    FailedSide::Missing => fn_items.push(item),
                    FailedSide::Spurious => fp_items.push(item),
                }
            }
        }
        let mu = if instances.is_empty() {
            0.0
        } else {
            correct as f64 / instances.len() as f64
        };
        let precision = if total_pred == 0 {
            0.0
        } else {
            matched_calls as f64 / total_pred as f64
        };
        let recall = if total_gold == 0 {
            0.0
        } else {
            matched_calls as f64 / total_gold as f64
        };
        Ok(BatchScore {
            mu,
            precision,
            recall,
            tp: matched_calls,
            fn_items,
            fp_items,
        })
    }
}

/// Run the optimization loop for an arbitrary task adapter. The default
/// adapter is [`PiiTask`], for which this is the same code path as
/// [`crate::optimizer::run_mac`].
#[allow(clippy::too_many_arguments)]
pub fn run_mac_task<A: TaskAdapter>(
    task: &A,
    config: &crate::optimizer::RunConfig,
    train: &[A::Instance],
    val: &[A::Instance],
    backend: &dyn crate::backend::ChatBackend,
    recorder: &crate::traces::TraceRecorder,
    templates: &PromptTemplates,
    sampling: &crate::backend::SamplingProfile,
) -> Result<crate::optimizer::RunResult, crate::optimizer::OptimizerError> {
    crate::optimizer::run_task(task, config, train, val, backend, recorder, templates, sampling)
}

#[derive(Deserialize)]
struct RawToolRecord {
    #[serde(default)]
    id: Option<String>,
    request: String,
    functions: Vec<ToolFunctionSig>,
    gold_calls: Vec<ToolCall>,
}

/// Load a line-delimited tool-task corpus:
/// `{"id"?: str, "request": str, "functions": [...], "gold_calls": [...]}`.
/// Gold calls must reference declared function names.
pub fn load_tool_corpus(path: &Path) -> Result<Vec<ToolCallInstance>, CorpusError> {
    let file = File::open(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut instances = Vec::new();
    let mut seen: BTreeSet<String> = BTreeSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawToolRecord =
            serde_json::from_str(&line).map_err(|e| CorpusError::MalformedLine {
                line: line_no,
                reason: e.to_string(),
            })?;
        let id = raw.id.unwrap_or_else(|| format!("t{line_no}"));
        if !seen.insert(id.clone()) {
            return Err(CorpusError::DuplicateId { line: line_no, id });
        }
        let declared: BTreeSet<&str> = raw.functions.iter().map(|f| f.name.as_str()).collect();
        for call in &raw.gold_calls {
            if !declared.contains(call.name.as_str()) {
                return Err(CorpusError::InvalidRecord {
                    line: line_no,
                    reason: format!("gold call references undeclared function {:?}", call.name),
                });
            }
        }
        instances.push(ToolCallInstance {
            id,
            request: raw.request,
            functions: raw.functions,
            gold_calls: raw.gold_calls,
        });
    }
    Ok(instances)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn call(name: &str, args: &[(&str, serde_json::Value)]) -> ToolCall {
        ToolCall {
            name: name.into(),
            arguments: args.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
        }
    }

    #[test]
    fn equal_up_to_numeric_coercion() {
        let gold = vec![
            call("set_volume", &[("level", json!(5))]),
            call("play", &[("track", json!("song "))]),
        ];
        let pred = vec![
            call("play", &[("track", json!("song"))]),
            call("set_volume", &[("level", json!("5"))]),
        ];
        let (score, failed) = score_tool_calls(&pred, &gold);
        assert_eq!(score, 1.0);
        assert!(failed.is_empty());
    }

    #[test]
    fn missing_call_named() {
        let gold = vec![
            call("a", &[]),
            call("b", &[("x", json!(1))]),
        ];
        let pred = vec![call("a", &[])];
        let (score, failed) = score_tool_calls(&pred, &gold);
        assert_eq!(score, 0.0);
        assert_eq!(failed.len(), 1);
        assert_eq!(failed[0].side, FailedSide::Missing);
        assert_eq!(failed[0].reason, "missing call");
        assert_eq!(failed[0].call.name, "b");
    }

    #[test]
    fn extra_call_flagged() {
        let gold = vec![call("a", &[])];
        let pred = vec![call("a", &[]), call("a", &[("x", json!(2))])];
        let (score, failed) = score_tool_calls(&pred, &gold);
        assert_eq!(score, 0.0);
        assert_eq!(failed.len(), 1);
        assert_eq!(failed[0].side, FailedSide::Spurious);
    }

    #[test]
    fn wrong_value_diagnosed() {
        let gold = vec![call("f", &[("city", json!("Paris"))])];
        let pred = vec![call("f", &[("city", json!("London"))])];
        let (score, failed) = score_tool_calls(&pred, &gold);
        assert_eq!(score, 0.0);
        assert!(failed.iter().any(|f| f.reason.contains("wrong value for \"city\"")));
    }

    #[test]
    fn missing_argument_diagnosed() {
        let gold = vec![call("f", &[("a", json!(1)), ("b", json!(2))])];
        let pred = vec![call("f", &[("a", json!(1))])];
        let (_, failed) = score_tool_calls(&pred, &gold);
        assert!(failed.iter().any(|f| f.reason.contains("missing argument \"b\"")));
    }

    #[test]
    fn float_int_unify() {
        assert!(values_equal(&json!(5.0), &json!(5)));
        assert!(!values_equal(&json!(5.5), &json!(5)));
        assert!(values_equal(&json!([1, "a "]), &json!(["1", "a"])));
    }

    #[test]
    fn parse_tool_prediction_fenced() {
        let raw = "Plan:\n```json\n{\"calls\":[{\"name\":\"f\",\"arguments\":{\"x\":1}}]}\n```";
        let calls = ToolTask.parse_prediction(raw).unwrap();
        assert_eq!(calls.len(), 1);
        assert_eq!(calls[0].name, "f");
    }

    #[test]
    fn tool_corpus_rejects_undeclared_gold_call() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tools.jsonl");
        std::fs::write(
            &path,
            r#"{"request":"r","functions":[{"name":"f","parameters":{}}],"gold_calls":[{"name":"g","arguments":{}}]}"#,
        )
        .unwrap();
        let err = load_tool_corpus(&path).unwrap_err();
        assert!(matches!(err, CorpusError::InvalidRecord { line: 1, .. }));
    }

    #[test]
    fn tool_batch_accuracy_is_mean() {
        let i1 = ToolCallInstance {
            id: "t1".into(),
            request: "r1".into(),
            functions: vec![],
            gold_calls: vec![call("a", &[])],
        };
        let i2 = ToolCallInstance {
            id: "t2".into(),
            request: "r2".into(),
            functions: vec![],
            gold_calls: vec![call("b", &[])],
        };
        let preds = vec![
            ("t1".to_string(), vec![call("a", &[])]),
            ("t2".to_string(), vec![]),
        ];
        let score = ToolTask.score_batch(&preds, &[&i1, &i2], 50).unwrap();
        assert_eq!(score.mu, 0.5);
        assert_eq!(score.fn_items.len(), 1);
        assert_eq!(score.fn_items[0].kind, ErrorKind::FalseNegative);
    }
}
