//! Exact span-level matching: precision / recall / F1 plus FN/FP items with
//! surrounding context windows.
//!
//! Predictions and gold phrases are compared as whitespace-trimmed string
//! sets with no case folding. Aggregation across documents is micro: tp/FN/FP
//! are pooled before computing the ratios.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Document;

/// Default context window, characters on each side of an error phrase.
pub const DEFAULT_WINDOW: usize = 50;
/// Default cap on context snippets per error phrase.
pub const DEFAULT_MAX_CONTEXTS: usize = 3;

/// Which side of the comparison an error item came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ErrorKind {
    /// Gold phrase missed by the predictions.
    #[serde(rename = "FN")]
    FalseNegative,
    /// Predicted phrase absent from gold.
    #[serde(rename = "FP")]
    FalsePositive,
}

/// One mismatched phrase with its surrounding document context.
///
/// `contexts` holds the phrase with up to `window` characters of document
/// text on each side, one snippet per occurrence up to a cap; a phrase that
/// does not occur in the document (a hallucinated span) has no contexts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorItem {
    pub doc_id: String,
    pub phrase: String,
    pub kind: ErrorKind,
    pub contexts: Vec<String>,
}

/// Match outcome: counts, error items, and micro ratios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    pub tp: usize,
    pub fn_items: Vec<ErrorItem>,
    pub fp_items: Vec<ErrorItem>,
    #[serde(serialize_with = "ser_ratio")]
    pub precision: f64,
    #[serde(serialize_with = "ser_ratio")]
    pub recall: f64,
    #[serde(serialize_with = "ser_ratio")]
    pub f1: f64,
}

// Ratios are serialized at 6 decimal places.
fn ser_ratio<S: serde::Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_f64((v * 1e6).round() / 1e6)
}

#[derive(Debug, Error)]
pub enum MatcherError {
    #[error("unknown document id {0:?}")]
    UnknownDocId(String),
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1_of(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

fn trimmed_set(phrases: &[String]) -> BTreeSet<&str> {
    let mut set = BTreeSet::new();
    let mut dropped = 0usize;
    for p in phrases {
        let t = p.trim();
        if t.is_empty() {
            continue;
        }
        if !set.insert(t) {
            dropped += 1;
        }
    }
    if dropped > 0 {
        log::debug!("dropped {dropped} duplicate phrases at match time");
    }
    set
}

/// Match one document's predictions against its gold phrases.
pub fn match_doc(
    predicted: &[String],
    gold: &[String],
    doc: &Document,
    window: usize,
) -> MatchReport {
    let pred = trimmed_set(predicted);
    let gold = trimmed_set(gold);

    let tp = pred.intersection(&gold).count();
    let fn_items = items_for(&gold, &pred, doc, window, ErrorKind::FalseNegative);
    let fp_items = items_for(&pred, &gold, doc, window, ErrorKind::FalsePositive);

    finish_report(tp, fn_items, fp_items)
}

fn items_for(
    from: &BTreeSet<&str>,
    other: &BTreeSet<&str>,
    doc: &Document,
    window: usize,
    kind: ErrorKind,
) -> Vec<ErrorItem> {
    from.difference(other)
        .map(|phrase| ErrorItem {
            doc_id: doc.id.clone(),
            phrase: (*phrase).to_string(),
            kind,
            contexts: extract_contexts(&doc.text, phrase, window, DEFAULT_MAX_CONTEXTS),
        })
        .collect()
}

fn finish_report(tp: usize, fn_items: Vec<ErrorItem>, fp_items: Vec<ErrorItem>) -> MatchReport {
    let precision = ratio(tp, tp + fp_items.len());
    let recall = ratio(tp, tp + fn_items.len());
    let f1 = f1_of(precision, recall);
    MatchReport {
        tp,
        fn_items,
        fp_items,
        precision,
        recall,
        f1,
    }
}

/// Micro-aggregate a batch: tp/FN/FP are pooled across documents before the
/// ratios are computed. Documents present in `golds` but missing from
/// `predictions` count as all-FN. Every referenced id must exist in `docs`.
pub fn match_batch(
    predictions: &BTreeMap<String, Vec<String>>,
    golds: &BTreeMap<String, Vec<String>>,
    docs: &BTreeMap<String, &Document>,
    window: usize,
) -> Result<MatchReport, MatcherError> {
    let empty: Vec<String> = Vec::new();
    let mut ids: BTreeSet<&String> = BTreeSet::new();
    ids.extend(predictions.keys());
    ids.extend(golds.keys());

    let mut tp = 0usize;
    let mut fn_items = Vec::new();
    let mut fp_items = Vec::new();
    for id in ids {
        let doc = docs
            .get(id)
            .ok_or_else(|| MatcherError::UnknownDocId(id.clone()))?;
        let report = match_doc(
            predictions.get(id).unwrap_or(&empty),
            golds.get(id).unwrap_or(&empty),
            doc,
            window,
        );
        tp += report.tp;
        fn_items.extend(report.fn_items);
        fp_items.extend(report.fp_items);
    }
    Ok(finish_report(tp, fn_items, fp_items))
}

/// Extract one snippet per non-overlapping left-to-right occurrence of
/// `phrase`, up to `max_occurrences`, with up to `window` characters of
/// context on each side, clamped to the text bounds.
pub fn extract_contexts(
    doc_text: &str,
    phrase: &str,
    window: usize,
    max_occurrences: usize,
) -> Vec<String> {
    if phrase.is_empty() || max_occurrences == 0 {
        return Vec::new();
    }
    let mut snippets = Vec::new();
    let mut from = 0usize;
    while snippets.len() < max_occurrences {
        let Some(rel) = doc_text[from..].find(phrase) else {
            break;
        };
        let start = from + rel;
        let end = start + phrase.len();
        snippets.push(doc_text[chars_back(doc_text, start, window)..chars_forward(doc_text, end, window)].to_string());
        from = end;
    }
    snippets
}

// Walk back up to `n` chars from byte index `idx`, staying on a char boundary.
fn chars_back(text: &str, idx: usize, n: usize) -> usize {
    text[..idx]
        .char_indices()
        .rev()
        .take(n)
        .last()
        .map_or(idx, |(i, _)| i)
}

// Walk forward up to `n` chars from byte index `idx`.
fn chars_forward(text: &str, idx: usize, n: usize) -> usize {
    text[idx..]
        .char_indices()
        .nth(n)
        .map_or(text.len(), |(i, _)| idx + i)
}
