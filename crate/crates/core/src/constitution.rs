//! The constitution: an ordered, budget-capped list of natural-language rules,
//! plus the update operations that evolve it and the history of rejected
//! proposals fed back into the rule agents.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default hard cap on constitution size.
pub const DEFAULT_RULE_BUDGET: usize = 25;
/// Default per-rule character cap.
pub const DEFAULT_RULE_CHAR_CAP: usize = 500;
/// Default per-action capacity of the rejected-proposal ring.
pub const DEFAULT_REJECTED_CAP: usize = 20;

/// Rendered in place of the rule list when the constitution is empty; tells
/// the annotator to fall back to its own estimate of what to mark.
pub const EMPTY_CONSTITUTION_SENTINEL: &str =
    "(no rules yet — use your own best judgment to decide what counts as private)";

/// Position in the optimization loop: `(epoch, batch)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Step {
    pub epoch: usize,
    pub batch: usize,
}

impl Step {
    pub fn new(epoch: usize, batch: usize) -> Self {
        Self { epoch, batch }
    }
}

/// How a rule's current text came to be.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleOrigin {
    Created,
    Edited,
}

/// One constitution entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rule {
    pub text: String,
    pub origin: RuleOrigin,
    /// Step at which the current text was set.
    pub created_step: Step,
}

/// Update operation chosen by the decision agent and realized by the rule
/// agents. Indices are 0-based into the current rule list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum UpdateOp {
    Add { text: String },
    Edit { index: usize, text: String },
    Remove { index: usize },
}

#[derive(Debug, Error)]
pub enum ConstitutionError {
    #[error("rule index {index} out of range (constitution has {len} rules)")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("rule budget of {budget} reached; cannot add")]
    BudgetExceeded { budget: usize },
    #[error("rule text is empty")]
    EmptyRule,
    #[error("rule budget must be >= 1")]
    ZeroBudget,
    #[error("malformed constitution: {0}")]
    Malformed(String),
}

/// Ordered rule list under a hard budget. Values are immutable; updates
/// produce new values.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Constitution {
    rules: Vec<Rule>,
    budget: usize,
}

impl Constitution {
    pub fn new(budget: usize) -> Result<Self, ConstitutionError> {
        if budget == 0 {
            return Err(ConstitutionError::ZeroBudget);
        }
        Ok(Self {
            rules: Vec::new(),
            budget,
        })
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.rules.len() >= self.budget
    }

    /// Apply an update, returning the new constitution; `self` is unchanged.
    pub fn apply_update(&self, op: &UpdateOp, step: Step) -> Result<Self, ConstitutionError> {
        let mut next = self.clone();
        match op {
            UpdateOp::Add { text } => {
                if text.trim().is_empty() {
                    return Err(ConstitutionError::EmptyRule);
                }
                if next.rules.len() >= next.budget {
                    return Err(ConstitutionError::BudgetExceeded {
                        budget: next.budget,
                    });
                }
                next.rules.push(Rule {
                    text: text.clone(),
                    origin: RuleOrigin::Created,
                    created_step: step,
                });
            }
            UpdateOp::Edit { index, text } => {
                if text.trim().is_empty() {
                    return Err(ConstitutionError::EmptyRule);
                }
                if *index >= next.rules.len() {
                    return Err(ConstitutionError::IndexOutOfRange {
                        index: *index,
                        len: next.rules.len(),
                    });
                }
                next.rules[*index] = Rule {
                    text: text.clone(),
                    origin: RuleOrigin::Edited,
                    created_step: step,
                };
            }
            UpdateOp::Remove { index } => {
                if *index >= next.rules.len() {
                    return Err(ConstitutionError::IndexOutOfRange {
                        index: *index,
                        len: next.rules.len(),
                    });
                }
                next.rules.remove(*index);
            }
        }
        Ok(next)
    }

    /// Render as numbered lines `Rule i: <text>` (0-based, matching the
    /// decision agent's index semantics). An empty constitution renders the
    /// own-judgment sentinel instead.
    pub fn render(&self) -> String {
        if self.rules.is_empty() {
            return EMPTY_CONSTITUTION_SENTINEL.to_string();
        }
        self.rules
            .iter()
            .enumerate()
            .map(|(i, r)| format!("Rule {i}: {}", r.text))
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// Serialize to a structured text form (JSON) including budget and
    /// per-rule metadata.
    pub fn serialize(&self) -> String {
        serde_json::to_string_pretty(self).expect("constitution serializes")
    }

    /// Parse the form produced by [`Constitution::serialize`], enforcing the
    /// budget and nonempty-rule invariants.
    pub fn deserialize(input: &str) -> Result<Self, ConstitutionError> {
        let parsed: Constitution = serde_json::from_str(input)
            .map_err(|e| ConstitutionError::Malformed(e.to_string()))?;
        if parsed.budget == 0 {
            return Err(ConstitutionError::ZeroBudget);
        }
        if parsed.rules.len() > parsed.budget {
            return Err(ConstitutionError::Malformed(format!(
                "{} rules exceed the stated budget of {}",
                parsed.rules.len(),
                parsed.budget
            )));
        }
        if parsed.rules.iter().any(|r| r.text.trim().is_empty()) {
            return Err(ConstitutionError::Malformed("empty rule text".into()));
        }
        Ok(parsed)
    }
}

/// Proposals that failed to improve the metric, kept per action in a bounded
/// ring and quoted back to the rule agents so they avoid repeating them.
/// Global per run. For `Remove`, the recorded text is the rule whose removal
/// was rejected.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RejectedHistory {
    add: VecDeque<(String, Step)>,
    edit: VecDeque<(String, Step)>,
    remove: VecDeque<(String, Step)>,
    #[serde(default = "default_cap")]
    cap: usize,
}

fn default_cap() -> usize {
    DEFAULT_REJECTED_CAP
}

impl RejectedHistory {
    pub fn new(cap: usize) -> Self {
        Self {
            add: VecDeque::new(),
            edit: VecDeque::new(),
            remove: VecDeque::new(),
            cap: cap.max(1),
        }
    }

    pub fn record(&mut self, op: &UpdateOp, rejected_text: &str, step: Step) {
        let ring = match op {
            UpdateOp::Add { .. } => &mut self.add,
            UpdateOp::Edit { .. } => &mut self.edit,
            UpdateOp::Remove { .. } => &mut self.remove,
        };
        ring.push_back((rejected_text.to_string(), step));
        while ring.len() > self.cap {
            ring.pop_front();
        }
    }

    pub fn add_texts(&self) -> impl Iterator<Item = &str> {
        self.add.iter().map(|(t, _)| t.as_str())
    }

    pub fn edit_texts(&self) -> impl Iterator<Item = &str> {
        self.edit.iter().map(|(t, _)| t.as_str())
    }

    pub fn remove_texts(&self) -> impl Iterator<Item = &str> {
        self.remove.iter().map(|(t, _)| t.as_str())
    }

    pub fn is_empty(&self) -> bool {
        self.add.is_empty() && self.edit.is_empty() && self.remove.is_empty()
    }
}
