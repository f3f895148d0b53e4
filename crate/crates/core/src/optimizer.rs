//! The optimization loop: annotate a batch under the current constitution,
//! match, summarize errors, ask the decision agent for an update, realize it
//! via the creator / editor, re-evaluate on the same batch, and accept only
//! strict improvements. Rejected proposals are retried at raised temperature;
//! the best constitution is tracked against the validation split.
//!
//! The loop is sequential over batches; within one evaluation, per-instance
//! annotator calls may run concurrently up to the backend's in-flight limit.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{
    build_creator_prompt_for, build_decision_prompt_for, build_editor_prompt_for,
    parse_decision_output, parse_rule_output, summarize_items, ActionKind, AgentError, AgentRole,
    DecisionOutcome, ErrorSummary, PromptTemplates,
};
use crate::backend::{BackendError, ChatBackend, SamplingParams, SamplingProfile};
use crate::constitution::{Constitution, ConstitutionError, RejectedHistory, Step, UpdateOp};
use crate::corpus::{epoch_batches, CorpusError, CorpusSplits, LabeledDoc};
use crate::matcher::MatchReport;
use crate::tasks::{PiiTask, TaskAdapter, TaskError, TaskInstance};
use crate::traces::{AgentTrace, TraceError, TraceRecorder};

/// Loop configuration. Defaults: 3 epochs of 20 batches of 8 instances,
/// validation every 5 batches, 2 proposal retries at +0.2 temperature each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    /// Hard cap on constitution size (R_max).
    pub rule_budget: usize,
    pub rule_char_cap: usize,
    /// Context window, characters each side of an error phrase.
    pub window: usize,
    /// FN and FP items sampled into the decision / creator / editor prompts.
    pub sample_n: usize,
    pub proposal_retries: usize,
    pub retry_temperature_step: f64,
    pub validation_interval_batches: usize,
    pub seed: u64,
    /// Optional cap on base-pass annotator instance evaluations; the run
    /// halts before the batch that would exceed it.
    pub budget_cap: Option<u64>,
    pub rejected_history_cap: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            batches_per_epoch: 20,
            batch_size: 8,
            rule_budget: crate::constitution::DEFAULT_RULE_BUDGET,
            rule_char_cap: crate::constitution::DEFAULT_RULE_CHAR_CAP,
            window: crate::matcher::DEFAULT_WINDOW,
            sample_n: 10,
            proposal_retries: 2,
            retry_temperature_step: 0.2,
            validation_interval_batches: 5,
            seed: 0,
            budget_cap: None,
            rejected_history_cap: crate::constitution::DEFAULT_REJECTED_CAP,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), OptimizerError> {
        for (name, value) in [
            ("epochs", self.epochs),
            ("batches_per_epoch", self.batches_per_epoch),
            ("batch_size", self.batch_size),
            ("rule_budget", self.rule_budget),
            ("rule_char_cap", self.rule_char_cap),
            ("sample_n", self.sample_n),
            ("validation_interval_batches", self.validation_interval_batches),
            ("rejected_history_cap", self.rejected_history_cap),
        ] {
            if value == 0 {
                return Err(OptimizerError::Config(format!("{name} must be >= 1")));
            }
        }
        if !self.retry_temperature_step.is_finite() || self.retry_temperature_step < 0.0 {
            return Err(OptimizerError::Config(
                "retry_temperature_step must be a finite value >= 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum OptimizerError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Constitution(#[from] ConstitutionError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("invalid run config: {0}")]
    Config(String),
    #[error("few-shot provider failed: {0}")]
    Fewshot(String),
}

/// Scored annotation of one instance batch. `mu` is the task metric (span F1
/// for tagging, call-set accuracy for tool calling); `fn_items` / `fp_items`
/// are the task's missed and spurious items.
#[derive(Debug, Clone)]
pub struct BatchScore {
    pub mu: f64,
    pub precision: f64,
    pub recall: f64,
    pub tp: usize,
    pub fn_items: Vec<crate::matcher::ErrorItem>,
    pub fp_items: Vec<crate::matcher::ErrorItem>,
}

/// One batch step of the loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub epoch: usize,
    pub batch: usize,
    pub mu_before: f64,
    pub mu_after: f64,
    /// The decision in force for the final attempt; `None` when the decision
    /// agent failed its retry budget and the batch became a no-op.
    pub decision: Option<DecisionOutcome>,
    /// One entry per evaluated proposal attempt: the proposed rule text, or
    /// the removed rule's text for removals.
    pub proposal_texts: Vec<String>,
    pub proposal_mus: Vec<f64>,
    pub accepted: bool,
    pub attempts_used: usize,
    /// The applied update when accepted; replaying these from an empty
    /// constitution reproduces the final constitution.
    pub applied_op: Option<UpdateOp>,
    pub rules_after: usize,
    pub skipped: Option<String>,
}

/// Validation checkpoint: metric on the validation split after `checkpoint`
/// batches. `f1` holds the task metric (span F1 / accuracy).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValCheckpoint {
    pub checkpoint: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Annotator evaluations per purpose plus per-role agent call counts. The
/// base pass is the unit of the forward-pass budget; proposal re-evaluations
/// and validation are accounted separately.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub base_pass_evals: u64,
    pub proposal_evals: u64,
    pub validation_evals: u64,
    pub decision_calls: u64,
    pub creator_calls: u64,
    pub editor_calls: u64,
}

impl BudgetReport {
    pub fn annotator_calls(&self) -> u64 {
        self.base_pass_evals + self.proposal_evals + self.validation_evals
    }

    /// Text table: per-purpose annotator evaluations and per-role calls.
    pub fn render(&self) -> String {
        format!(
            "Annotator evaluations (documents)\n\
             \x20 base pass:            {}\n\
             \x20 proposal re-eval:     {}\n\
             \x20 validation:           {}\n\
             \x20 total:                {}\n\
             Agent calls\n\
             \x20 decision:             {}\n\
             \x20 creator:              {}\n\
             \x20 editor:               {}\n",
            self.base_pass_evals,
            self.proposal_evals,
            self.validation_evals,
            self.annotator_calls(),
            self.decision_calls,
            self.creator_calls,
            self.editor_calls,
        )
    }
}

/// Full outcome of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    /// The constitution at the best validation checkpoint.
    pub best_constitution: Constitution,
    pub best_val_mu: f64,
    /// The constitution as of the last executed batch.
    pub final_constitution: Constitution,
    pub step_log: Vec<StepOutcome>,
    pub val_log: Vec<ValCheckpoint>,
    pub budget: BudgetReport,
}

/// Per-purpose budget breakdown of a finished run.
pub fn budget_report(result: &RunResult) -> &BudgetReport {
    &result.budget
}

/// Few-shot demonstration provider: maps a query instance to its
/// demonstrations (used by retrieval-augmented inference).
pub type FewshotFn<'a, T> = dyn Fn(&T) -> Result<Vec<T>, String> + Sync + 'a;

/// Run the loop on the default span-tagging task with shipped templates and
/// default sampling.
pub fn run_mac(
    config: &RunConfig,
    splits: &CorpusSplits,
    backend: &dyn ChatBackend,
    recorder: &TraceRecorder,
) -> Result<RunResult, OptimizerError> {
    run_task(
        &PiiTask,
        config,
        &splits.train,
        &splits.val,
        backend,
        recorder,
        &PromptTemplates::default(),
        &SamplingProfile::default(),
    )
}

/// [`run_mac`] with explicit templates and sampling profile.
pub fn run_mac_with(
    config: &RunConfig,
    splits: &CorpusSplits,
    backend: &dyn ChatBackend,
    recorder: &TraceRecorder,
    templates: &PromptTemplates,
    sampling: &SamplingProfile,
) -> Result<RunResult, OptimizerError> {
    run_task(
        &PiiTask,
        config,
        &splits.train,
        &splits.val,
        backend,
        recorder,
        templates,
        sampling,
    )
}

/// Evaluate a constitution on labeled documents: annotate every document
/// (concurrently up to the backend limit), degrade unparseable outputs to
/// empty predictions, and micro-aggregate.
pub fn evaluate(
    c: &Constitution,
    docs: &[LabeledDoc],
    backend: &dyn ChatBackend,
    params: &SamplingParams,
    window: usize,
    fewshot: Option<&FewshotFn<'_, LabeledDoc>>,
) -> Result<MatchReport, OptimizerError> {
    let insts: Vec<&LabeledDoc> = docs.iter().collect();
    let preds = annotate_instances(
        &PiiTask,
        c,
        &insts,
        backend,
        params,
        &PromptTemplates::default(),
        fewshot,
        None,
        (None, None),
    )?;
    crate::tasks::match_labeled(&preds, &insts, window).map_err(|e| TaskError::from(e).into())
}

// ----- generic engine -----

struct Ctx<'a, A: TaskAdapter> {
    adapter: &'a A,
    config: &'a RunConfig,
    backend: &'a dyn ChatBackend,
    recorder: &'a TraceRecorder,
    templates: &'a PromptTemplates,
    sampling: &'a SamplingProfile,
}

struct LoopState {
    c: Constitution,
    best_c: Constitution,
    best_mu: f64,
    rejected: RejectedHistory,
    budget: BudgetReport,
    step_log: Vec<StepOutcome>,
    val_log: Vec<ValCheckpoint>,
    prev_counts: Option<(usize, usize)>,
    global_batch: usize,
    last_validated_at: Option<usize>,
}

/// Run the loop for an arbitrary task adapter. The constitution starts empty;
/// the first decision can therefore only be Add.
#[allow(clippy::too_many_arguments)]
pub fn run_task<A: TaskAdapter>(
    adapter: &A,
    config: &RunConfig,
    train: &[A::Instance],
    val: &[A::Instance],
    backend: &dyn ChatBackend,
    recorder: &TraceRecorder,
    templates: &PromptTemplates,
    sampling: &SamplingProfile,
) -> Result<RunResult, OptimizerError> {
    config.validate()?;
    if train.is_empty() {
        return Err(OptimizerError::Config("train split is empty".into()));
    }
    let ctx = Ctx {
        adapter,
        config,
        backend,
        recorder,
        templates,
        sampling,
    };
    let empty = Constitution::new(config.rule_budget)?;
    let mut state = LoopState {
        c: empty.clone(),
        best_c: empty,
        best_mu: 0.0,
        rejected: RejectedHistory::new(config.rejected_history_cap),
        budget: BudgetReport::default(),
        step_log: Vec::new(),
        val_log: Vec::new(),
        prev_counts: None,
        global_batch: 0,
        last_validated_at: None,
    };

    'epochs: for epoch in 0..config.epochs {
        let batches = epoch_batches(
            train,
            config.batch_size,
            Some(config.batches_per_epoch),
            config.seed,
            epoch,
        )?;
        for (batch_idx, batch) in batches.iter().enumerate() {
            if let Some(cap) = config.budget_cap {
                if state.budget.base_pass_evals + batch.len() as u64 > cap {
                    log::info!("budget cap {cap} reached; halting before epoch {epoch} batch {batch_idx}");
                    break 'epochs;
                }
            }
            step_batch(&ctx, &mut state, epoch, batch_idx, batch)?;
            state.global_batch += 1;
            if state.global_batch % config.validation_interval_batches == 0 {
                validate(&ctx, &mut state, val, epoch)?;
            }
        }
        validate(&ctx, &mut state, val, epoch)?;
    }
    // A budget halt can land between checkpoints; close with one final
    // validation so best-tracking always covers the final constitution.
    validate(&ctx, &mut state, val, config.epochs.saturating_sub(1))?;

    Ok(RunResult {
        best_constitution: state.best_c,
        best_val_mu: state.best_mu,
        final_constitution: state.c,
        step_log: state.step_log,
        val_log: state.val_log,
        budget: state.budget,
    })
}

fn validate<A: TaskAdapter>(
    ctx: &Ctx<'_, A>,
    state: &mut LoopState,
    val: &[A::Instance],
    epoch: usize,
) -> Result<(), OptimizerError> {
    if state.last_validated_at == Some(state.global_batch) {
        return Ok(());
    }
    let insts: Vec<&A::Instance> = val.iter().collect();
    let score = score_instances(ctx, &state.c, &insts, (Some(epoch), None))?;
    state.budget.validation_evals += insts.len() as u64;
    state.val_log.push(ValCheckpoint {
        checkpoint: state.global_batch,
        precision: score.precision,
        recall: score.recall,
        f1: score.mu,
    });
    if score.mu > state.best_mu {
        state.best_mu = score.mu;
        state.best_c = state.c.clone();
    }
    state.last_validated_at = Some(state.global_batch);
    Ok(())
}

fn step_batch<A: TaskAdapter>(
    ctx: &Ctx<'_, A>,
    state: &mut LoopState,
    epoch: usize,
    batch_idx: usize,
    batch: &[&A::Instance],
) -> Result<(), OptimizerError> {
    let step_pos = Step::new(epoch, batch_idx);
    let base = score_instances(ctx, &state.c, batch, (Some(epoch), Some(batch_idx)))?;
    state.budget.base_pass_evals += batch.len() as u64;

    let trend = state.prev_counts.map(|(pfn, pfp)| {
        format!(
            "FN {pfn}→{}, FP {pfp}→{} vs previous batch",
            base.fn_items.len(),
            base.fp_items.len()
        )
    });
    state.prev_counts = Some((base.fn_items.len(), base.fp_items.len()));

    let summary = summarize_items(
        &base.fn_items,
        &base.fp_items,
        state.c.len(),
        trend,
        ctx.config.sample_n,
        derive_seed(ctx.config.seed, epoch, batch_idx, 0x51),
    );

    let max_attempts = ctx.config.proposal_retries + 1;

    // Obtain a valid decision, retrying at raised temperature.
    let mut decision = None;
    for attempt in 0..max_attempts {
        if let Some(d) = call_decision(ctx, state, &summary, epoch, batch_idx, attempt)? {
            decision = Some(d);
            break;
        }
    }
    let Some(mut decision) = decision else {
        state.step_log.push(StepOutcome {
            epoch,
            batch: batch_idx,
            mu_before: base.mu,
            mu_after: base.mu,
            decision: None,
            proposal_texts: Vec::new(),
            proposal_mus: Vec::new(),
            accepted: false,
            attempts_used: 0,
            applied_op: None,
            rules_after: state.c.len(),
            skipped: Some("decision invalid or unparseable after retries".into()),
        });
        return Ok(());
    };

    let mut proposal_texts = Vec::new();
    let mut proposal_mus = Vec::new();
    let mut applied_op = None;
    let mut mu_after = base.mu;
    let mut attempts_used = 0usize;

    for attempt in 0..max_attempts {
        attempts_used = attempt + 1;
        // Removal is deterministic, so its retries re-invoke the decision
        // agent instead of resampling a proposal.
        if attempt > 0 && decision.action == ActionKind::Remove {
            match call_decision(ctx, state, &summary, epoch, batch_idx, attempt)? {
                Some(d) => decision = d,
                None => continue,
            }
        }
        let proposed = match propose_op(ctx, state, &decision, &summary, epoch, batch_idx, attempt)? {
            Some(p) => p,
            None => continue, // proposal output unusable; spend the attempt
        };
        let (op, trace) = proposed;
        let c_prop = match state.c.apply_update(&op, step_pos) {
            Ok(c) => c,
            Err(e) => {
                log::warn!("proposal could not be applied: {e}");
                if let Some(t) = trace {
                    ctx.recorder.record(&t)?;
                }
                continue;
            }
        };
        let prop_score = score_instances(ctx, &c_prop, batch, (Some(epoch), Some(batch_idx)))?;
        state.budget.proposal_evals += batch.len() as u64;

        let rejected_text = match &op {
            UpdateOp::Add { text } | UpdateOp::Edit { text, .. } => text.clone(),
            UpdateOp::Remove { index } => state.c.rules()[*index].text.clone(),
        };
        proposal_texts.push(rejected_text.clone());
        proposal_mus.push(prop_score.mu);

        let accepted = prop_score.mu > base.mu;
        if let Some(mut t) = trace {
            t.accepted = Some(accepted);
            ctx.recorder.record(&t)?;
        }
        if accepted {
            state.c = c_prop;
            mu_after = prop_score.mu;
            applied_op = Some(op);
            break;
        }
        state.rejected.record(&op, &rejected_text, step_pos);
    }

    state.step_log.push(StepOutcome {
        epoch,
        batch: batch_idx,
        mu_before: base.mu,
        mu_after,
        decision: Some(decision),
        proposal_texts,
        proposal_mus,
        accepted: applied_op.is_some(),
        attempts_used,
        applied_op,
        rules_after: state.c.len(),
        skipped: None,
    });
    Ok(())
}

// One decision call; returns None (logged) on parse failure or invalid decision.
fn call_decision<A: TaskAdapter>(
    ctx: &Ctx<'_, A>,
    state: &mut LoopState,
    summary: &ErrorSummary,
    epoch: usize,
    batch_idx: usize,
    attempt: usize,
) -> Result<Option<DecisionOutcome>, OptimizerError> {
    let messages = build_decision_prompt_for(
        ctx.adapter.task_note(),
        summary,
        &state.c,
        ctx.config.rule_budget,
        ctx.templates,
    );
    let params = attempt_params(ctx.sampling.for_role(AgentRole::Decision), ctx.config, attempt);
    let completion = ctx.backend.complete(AgentRole::Decision, &messages, &params)?;
    state.budget.decision_calls += 1;
    ctx.recorder.record(&AgentTrace::new(
        AgentRole::Decision,
        messages,
        completion.text.clone(),
        Some(epoch),
        Some(batch_idx),
        None,
    ))?;
    match parse_decision_output(&completion.text, &state.c, ctx.config.rule_budget) {
        Ok(d) => Ok(Some(d)),
        Err(e) => {
            log::warn!("decision attempt {attempt} unusable ({})", kind_of(&e));
            Ok(None)
        }
    }
}

fn kind_of(e: &AgentError) -> String {
    if e.is_parse_failure() {
        format!("parse failure: {e}")
    } else {
        format!("invalid: {e}")
    }
}

type ProposedOp = (UpdateOp, Option<AgentTrace>);

// Realize the decision as a concrete update op, invoking the creator or
// editor as needed. Returns None (logged) when the rule output is unusable.
fn propose_op<A: TaskAdapter>(
    ctx: &Ctx<'_, A>,
    state: &mut LoopState,
    decision: &DecisionOutcome,
    summary: &ErrorSummary,
    epoch: usize,
    batch_idx: usize,
    attempt: usize,
) -> Result<Option<ProposedOp>, OptimizerError> {
    match decision.action {
        ActionKind::Remove => {
            let index = decision.rule_index as usize;
            Ok(Some((UpdateOp::Remove { index }, None)))
        }
        ActionKind::Add => {
            let messages = build_creator_prompt_for(
                ctx.adapter.task_note(),
                summary,
                &decision.reasoning,
                &state.c,
                &state.rejected,
                ctx.config.rule_char_cap,
                ctx.templates,
            );
            let params =
                attempt_params(ctx.sampling.for_role(AgentRole::Creator), ctx.config, attempt);
            let completion = ctx.backend.complete(AgentRole::Creator, &messages, &params)?;
            state.budget.creator_calls += 1;
            let trace = AgentTrace::new(
                AgentRole::Creator,
                messages,
                completion.text.clone(),
                Some(epoch),
                Some(batch_idx),
                None,
            );
            match parse_rule_output(&completion.text, ctx.config.rule_char_cap) {
                Ok(text) => Ok(Some((UpdateOp::Add { text }, Some(trace)))),
                Err(e) => {
                    log::warn!("creator output unusable: {e}");
                    ctx.recorder.record(&trace)?;
                    Ok(None)
                }
            }
        }
        ActionKind::Edit => {
            let index = decision.rule_index as usize;
            let messages = match build_editor_prompt_for(
                ctx.adapter.task_note(),
                index,
                summary,
                &decision.reasoning,
                &state.c,
                &state.rejected,
                ctx.config.rule_char_cap,
                ctx.templates,
            ) {
                Ok(m) => m,
                Err(e) => {
                    log::warn!("editor prompt rejected: {e}");
                    return Ok(None);
                }
            };
            let params =
                attempt_params(ctx.sampling.for_role(AgentRole::Editor), ctx.config, attempt);
            let completion = ctx.backend.complete(AgentRole::Editor, &messages, &params)?;
            state.budget.editor_calls += 1;
            let trace = AgentTrace::new(
                AgentRole::Editor,
                messages,
                completion.text.clone(),
                Some(epoch),
                Some(batch_idx),
                None,
            );
            match parse_rule_output(&completion.text, ctx.config.rule_char_cap) {
                Ok(text) => Ok(Some((UpdateOp::Edit { index, text }, Some(trace)))),
                Err(e) => {
                    log::warn!("editor output unusable: {e}");
                    ctx.recorder.record(&trace)?;
                    Ok(None)
                }
            }
        }
    }
}

fn attempt_params(base: &SamplingParams, config: &RunConfig, attempt: usize) -> SamplingParams {
    if attempt == 0 {
        base.clone()
    } else {
        base.with_temperature(
            base.temperature + attempt as f64 * config.retry_temperature_step,
        )
    }
}

fn derive_seed(seed: u64, epoch: usize, batch: usize, purpose: u64) -> u64 {
    seed.wrapping_add((epoch as u64).wrapping_mul(1_000_003))
        .wrapping_add((batch as u64).wrapping_mul(7919))
        .wrapping_add(purpose.wrapping_mul(0x9E37_79B9))
}

fn score_instances<A: TaskAdapter>(
    ctx: &Ctx<'_, A>,
    c: &Constitution,
    insts: &[&A::Instance],
    phase: (Option<usize>, Option<usize>),
) -> Result<BatchScore, OptimizerError> {
    let preds = annotate_instances(
        ctx.adapter,
        c,
        insts,
        ctx.backend,
        &ctx.sampling.annotator,
        ctx.templates,
        None,
        Some(ctx.recorder),
        phase,
    )?;
    Ok(ctx.adapter.score_batch(&preds, insts, ctx.config.window)?)
}

/// Annotate instances, returning `(id, prediction)` pairs in instance order.
/// Unparseable outputs degrade to the task's empty prediction (logged);
/// transport exhaustion propagates.
#[allow(clippy::too_many_arguments)]
pub fn annotate_instances<A: TaskAdapter>(
    adapter: &A,
    c: &Constitution,
    insts: &[&A::Instance],
    backend: &dyn ChatBackend,
    params: &SamplingParams,
    templates: &PromptTemplates,
    fewshot: Option<&FewshotFn<'_, A::Instance>>,
    recorder: Option<&TraceRecorder>,
    phase: (Option<usize>, Option<usize>),
) -> Result<Vec<(String, A::Prediction)>, OptimizerError> {
    let annotate_one = |inst: &A::Instance| -> Result<(String, A::Prediction), OptimizerError> {
        let demos = match fewshot {
            Some(provider) => provider(inst).map_err(OptimizerError::Fewshot)?,
            None => Vec::new(),
        };
        let messages = adapter.annotation_prompt(inst, c, &demos, templates);
        let completion = backend.complete(AgentRole::Annotator, &messages, params)?;
        if let Some(recorder) = recorder {
            recorder.record(&AgentTrace::new(
                AgentRole::Annotator,
                messages,
                completion.text.clone(),
                phase.0,
                phase.1,
                None,
            ))?;
        }
        let prediction = match adapter.parse_prediction(&completion.text) {
            Ok(p) => p,
            Err(e) => {
                log::warn!(
                    "annotator output for {} unparseable ({e}); using empty prediction",
                    inst.id()
                );
                adapter.empty_prediction()
            }
        };
        Ok((inst.id().to_string(), prediction))
    };

    let workers = backend.max_in_flight().clamp(1, insts.len().max(1));
    if workers <= 1 || insts.len() <= 1 {
        return insts.iter().map(|inst| annotate_one(inst)).collect();
    }

    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots: Vec<std::sync::Mutex<Option<Result<(String, A::Prediction), OptimizerError>>>> =
        (0..insts.len()).map(|_| std::sync::Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= insts.len() {
                    break;
                }
                let result = annotate_one(insts[i]);
                *slots[i].lock().unwrap() = Some(result);
            });
        }
    });
    slots
        .into_iter()
        .map(|slot| slot.into_inner().unwrap().expect("worker filled every slot"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_match_contract() {
        let c = RunConfig::default();
        assert_eq!(c.epochs, 3);
        assert_eq!(c.batches_per_epoch, 20);
        assert_eq!(c.batch_size, 8);
        assert_eq!(c.validation_interval_batches, 5);
        assert_eq!(c.proposal_retries, 2);
        assert_eq!(c.retry_temperature_step, 0.2);
    }

    #[test]
    fn config_rejects_zero_counts() {
        let mut c = RunConfig::default();
        c.epochs = 0;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.retry_temperature_step = -0.1;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.proposal_retries = 0; // zero retries means one attempt; allowed
        assert!(c.validate().is_ok());
    }

    #[test]
    fn budget_render_contains_sections() {
        let b = BudgetReport {
            base_pass_evals: 480,
            proposal_evals: 960,
            validation_evals: 192,
            decision_calls: 60,
            creator_calls: 50,
            editor_calls: 10,
        };
        let text = b.render();
        assert!(text.contains("base pass:            480"));
        assert!(text.contains("validation:           192"));
        assert_eq!(b.annotator_calls(), 1632);
    }
}
