//! Task-adapter equivalence, the tool-calling loop, and retrieval-augmented
//! inference.

mod common;

use std::sync::Arc;

use common::{synth_splits, SynthSpec};
use mac_core::agents::{build_annotator_prompt, AgentRole, PromptTemplates};
use mac_core::backend::{PolicyMock, SamplingProfile, ScriptedMock};
use mac_core::constitution::{Constitution, Step, UpdateOp};
use mac_core::corpus::{GoldLabel, LabeledDoc};
use mac_core::optimizer::{evaluate, run_mac, RunConfig};
use mac_core::retrieval::{
    annotate_with_retrieval, build_index, fewshot_provider, retrieval_prompt, LexicalEmbedder,
    RetrievalStrategy,
};
use mac_core::tasks::{run_mac_task, PiiTask, ToolCall, ToolCallInstance, ToolFunctionSig};
use mac_core::traces::TraceRecorder;
use mac_core::{Document, SamplingParams};

fn recorder(dir: &tempfile::TempDir, name: &str) -> TraceRecorder {
    TraceRecorder::create(&dir.path().join(name)).unwrap()
}

#[test]
fn pii_adapter_run_is_byte_identical_to_direct_path() {
    let config = RunConfig {
        epochs: 1,
        batches_per_epoch: 4,
        seed: 21,
        ..RunConfig::default()
    };
    let spec = SynthSpec::default();

    let dir = tempfile::tempdir().unwrap();
    let splits = synth_splits(60, 9, &spec, (40, 10, 10));
    let direct = run_mac(&config, &splits, &PolicyMock::default(), &recorder(&dir, "a.jsonl")).unwrap();

    let splits = synth_splits(60, 9, &spec, (40, 10, 10));
    let via_adapter = run_mac_task(
        &PiiTask,
        &config,
        &splits.train,
        &splits.val,
        &PolicyMock::default(),
        &recorder(&dir, "b.jsonl"),
        &PromptTemplates::default(),
        &SamplingProfile::default(),
    )
    .unwrap();

    assert_eq!(
        serde_json::to_string(&direct).unwrap(),
        serde_json::to_string(&via_adapter).unwrap()
    );
}

fn tool_instance(id: &str, request: &str) -> ToolCallInstance {
    let functions = vec![
        ToolFunctionSig {
            name: "f".into(),
            parameters: [("x".to_string(), "integer".to_string())].into(),
        },
        ToolFunctionSig {
            name: "g".into(),
            parameters: [("y".to_string(), "string".to_string())].into(),
        },
    ];
    let gold_calls = vec![
        ToolCall {
            name: "f".into(),
            arguments: [("x".to_string(), serde_json::json!(1))].into(),
        },
        ToolCall {
            name: "g".into(),
            arguments: [("y".to_string(), serde_json::json!("a"))].into(),
        },
    ];
    ToolCallInstance {
        id: id.into(),
        request: request.into(),
        functions,
        gold_calls,
    }
}

#[test]
fn tool_loop_accepts_rule_that_fixes_calls() {
    let train = vec![
        tool_instance("t1", "do f with 1 then g with a"),
        tool_instance("t2", "first f(1), afterwards g(a)"),
    ];
    let val = vec![tool_instance("t3", "run f on 1 and g on a")];

    let backend = ScriptedMock::new();
    // Base pass: the agent emits no calls at all.
    let empty = r#"{"calls":[]}"#;
    backend.push(AgentRole::Annotator, empty);
    backend.push(AgentRole::Annotator, empty);
    backend.push(
        AgentRole::Decision,
        r#"{"action":"add","rule_index":-1,"reasoning":"calls are being omitted"}"#,
    );
    backend.push(
        AgentRole::Creator,
        r#"{"rule":"Emit one call per independent sub-task; never omit a required call, and pass integer arguments as integers."}"#,
    );
    // Proposal re-eval: correct call sets, exercising "5" vs 5 coercion and trim.
    let fixed = r#"{"calls":[{"name":"f","arguments":{"x":"1"}},{"name":"g","arguments":{"y":" a "}}]}"#;
    backend.push(AgentRole::Annotator, fixed);
    backend.push(AgentRole::Annotator, fixed);
    // Validation.
    backend.push(AgentRole::Annotator, fixed);

    let dir = tempfile::tempdir().unwrap();
    let config = RunConfig {
        epochs: 1,
        batches_per_epoch: 1,
        batch_size: 2,
        proposal_retries: 0,
        ..RunConfig::default()
    };
    let result = run_mac_task(
        &mac_core::tasks::ToolTask,
        &config,
        &train,
        &val,
        &backend,
        &recorder(&dir, "tool.jsonl"),
        &PromptTemplates::default(),
        &SamplingProfile::default(),
    )
    .unwrap();

    let step = &result.step_log[0];
    assert_eq!(step.mu_before, 0.0);
    assert_eq!(step.mu_after, 1.0, "accuracy strictly increases");
    assert!(step.accepted);
    assert_eq!(result.best_val_mu, 1.0);
    assert_eq!(result.final_constitution.len(), 1);
    assert_eq!(result.budget.base_pass_evals, 2);
    assert_eq!(result.budget.proposal_evals, 2);
    assert_eq!(result.budget.validation_evals, 1);

    // The tool annotator prompt carried the declared signatures and request.
    let calls = backend.calls();
    let first = calls.iter().find(|c| c.role == AgentRole::Annotator).unwrap();
    assert!(first.user.contains("\"name\": \"f\""));
    assert!(first.user.contains("<<<REQUEST"));
}

// ----- retrieval -----

fn rec(id: &str, text: &str, phrases: &[&str]) -> LabeledDoc {
    LabeledDoc {
        doc: Document {
            id: id.into(),
            text: text.into(),
        },
        gold: GoldLabel {
            doc_id: id.into(),
            phrases: phrases.iter().map(|s| s.to_string()).collect(),
            groups: None,
        },
    }
}

#[test]
fn k0_prompt_is_byte_identical_to_plain_annotation() {
    let train: Vec<LabeledDoc> = (0..5)
        .map(|i| rec(&format!("d{i}"), &format!("train text {i}"), &[]))
        .collect();
    let index = build_index(
        &train,
        Some(Arc::new(LexicalEmbedder::default())),
        RetrievalStrategy::Similarity,
    )
    .unwrap();
    let mut c = Constitution::new(25).unwrap();
    c = c
        .apply_update(&UpdateOp::Add { text: "mark years".into() }, Step::default())
        .unwrap();
    let doc = Document {
        id: "q".into(),
        text: "query text".into(),
    };
    let t = PromptTemplates::default();
    let plain = build_annotator_prompt(&doc, &c, &[], &t);
    let via_retrieval = retrieval_prompt(&doc, &c, &index, 0, 0, &t).unwrap();
    assert_eq!(plain, via_retrieval);
}

#[test]
fn retrieval_call_leaves_constitution_serialization_unchanged() {
    let train: Vec<LabeledDoc> = (0..4)
        .map(|i| rec(&format!("d{i}"), &format!("text {i}"), &["x"]))
        .collect();
    let index = build_index(&train, None, RetrievalStrategy::Random).unwrap();
    let mut c = Constitution::new(25).unwrap();
    c = c
        .apply_update(&UpdateOp::Add { text: "mark ids".into() }, Step::default())
        .unwrap();
    let before = c.serialize();

    let backend = ScriptedMock::new();
    backend.push(AgentRole::Annotator, r#"{"private_phrases":["x"]}"#);
    let phrases = annotate_with_retrieval(
        &Document {
            id: "q".into(),
            text: "query".into(),
        },
        &c,
        &index,
        2,
        0,
        &backend,
        &SamplingParams::for_role(AgentRole::Annotator),
        &PromptTemplates::default(),
    )
    .unwrap();
    assert_eq!(phrases, vec!["x"]);
    assert_eq!(c.serialize(), before);

    // Exactly 2 demonstration blocks preceded the target document.
    let call = &backend.calls()[0];
    assert_eq!(call.user.matches("# Demonstration").count(), 2);
}

#[test]
fn evaluate_with_fewshot_provider_injects_demonstrations() {
    let train: Vec<LabeledDoc> = (0..6)
        .map(|i| rec(&format!("d{i}"), &format!("alpha beta {i}"), &["alpha"]))
        .collect();
    let test = vec![rec("q1", "alpha beta gamma", &["alpha"])];
    let index = build_index(
        &train,
        Some(Arc::new(LexicalEmbedder::default())),
        RetrievalStrategy::Similarity,
    )
    .unwrap();
    let provider = fewshot_provider(&index, 3, 0);

    let backend = ScriptedMock::new();
    backend.push(AgentRole::Annotator, r#"{"private_phrases":["alpha"]}"#);
    let c = Constitution::new(25).unwrap();
    let report = evaluate(
        &c,
        &test,
        &backend,
        &SamplingParams::for_role(AgentRole::Annotator),
        50,
        Some(&provider),
    )
    .unwrap();
    assert_eq!(report.f1, 1.0);
    let call = &backend.calls()[0];
    assert_eq!(call.user.matches("# Demonstration").count(), 3);
}
