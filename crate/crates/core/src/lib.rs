//! Constitution learning engine.
//!
//! Learns an ordered list of natural-language rules (a "constitution") from a
//! small labeled corpus by orchestrating four specialized LLM agent roles in an
//! accept-if-improved loop:
//!
//! - **Annotator** applies the current constitution to a document batch and
//!   emits the predicted private phrases.
//! - **Decision** inspects the error profile and picks Add / Edit / Remove.
//! - **Creator** drafts one new rule; **Editor** revises one existing rule.
//!
//! A proposal is kept only when it strictly improves the batch metric; the
//! best constitution is tracked against a held-out validation split.
//!
//! The crate also ships retrieval-augmented inference (few-shot demonstrations
//! selected per test input without touching the constitution), full agent
//! trace recording with per-role export for downstream fine-tuning pipelines,
//! and a tool-calling task adapter that reuses the same optimization loop with
//! accuracy as the metric.
//!
//! Backends are pluggable: an OpenAI-compatible chat-completions client for
//! real runs, and deterministic mock backends (scripted queues or an
//! interpretable regex-rule policy) for hermetic tests.

pub mod agents;
pub mod backend;
pub mod constitution;
pub mod corpus;
pub mod matcher;
pub mod optimizer;
pub mod retrieval;
pub mod tasks;
pub mod traces;

pub use agents::{AgentRole, PromptMessages};
pub use backend::{ChatBackend, SamplingParams};
pub use constitution::{Constitution, Rule, UpdateOp};
pub use corpus::{CorpusSplits, Document, GoldLabel, LabeledDoc};
pub use matcher::MatchReport;
pub use optimizer::{RunConfig, RunResult};
