//! Labeled document corpora: loading, validation, splitting, batching, stats.
//!
//! A corpus is a line-delimited file of records
//! `{"id": str, "text": str, "private_phrases": [str], "groups": [str]?}`.
//! Gold labels are verbatim phrase strings, not character offsets; a phrase
//! that does not occur in its document is a warning, not an error, because
//! real corpora contain such artifacts.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// One input document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
}

/// Gold annotation for one document: the phrases expected to be marked.
///
/// Duplicates are permitted in storage and collapsed to a set at match time.
/// `groups` is an optional per-phrase tag, parallel to `phrases`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldLabel {
    pub doc_id: String,
    pub phrases: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub groups: Option<Vec<String>>,
}

/// A document paired with its gold label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledDoc {
    pub doc: Document,
    pub gold: GoldLabel,
}

/// Train / validation / test partition, pairwise disjoint by document id.
pub type CorpusSplits = Splits<LabeledDoc>;

/// Generic split container; the same shuffle-then-partition logic serves the
/// span-tagging corpus and the tool-calling corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Splits<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
}

/// Character-level corpus statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub total_chars: u64,
    pub private_chars: u64,
    pub private_char_pct: f64,
    pub public_chars: u64,
    pub total_entities: u64,
    /// Distinct group tags across the corpus; `None` when no record carries tags.
    pub entity_groups: Option<u64>,
    pub avg_chars_per_entity: f64,
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("line {line}: duplicate document id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("line {line}: {reason}")]
    InvalidRecord { line: usize, reason: String },
    #[error("requested split {requested} exceeds corpus size {available}")]
    InsufficientRecords { requested: usize, available: usize },
    #[error("batch size must be >= 1")]
    ZeroBatchSize,
    #[error("cannot batch an empty split")]
    EmptySplit,
    #[error("splits manifest invalid: {0}")]
    BadManifest(String),
}

/// Supported corpus file formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    Jsonl,
}

/// Loader behavior knobs.
#[derive(Debug, Clone, Copy)]
pub struct LoadOptions {
    /// Accept documents with empty text (default: reject).
    pub allow_empty_text: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            allow_empty_text: false,
        }
    }
}

/// Loaded corpus plus non-fatal warnings (e.g. gold phrases absent from text).
#[derive(Debug, Clone)]
pub struct LoadedCorpus {
    pub records: Vec<LabeledDoc>,
    pub warnings: Vec<String>,
}

#[derive(Deserialize)]
struct RawRecord {
    id: String,
    text: String,
    private_phrases: Vec<String>,
    #[serde(default)]
    groups: Option<Vec<String>>,
}

/// Load a line-delimited corpus file. Every malformed line is an error citing
/// its line number; phrases absent from their document produce warnings.
pub fn load_corpus(
    path: &Path,
    format: CorpusFormat,
    opts: LoadOptions,
) -> Result<LoadedCorpus, CorpusError> {
    let CorpusFormat::Jsonl = format;
    let file = File::open(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let reader = BufReader::new(file);

    let mut records = Vec::new();
    let mut warnings = Vec::new();
    let mut seen_ids: BTreeSet<String> = BTreeSet::new();

    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord =
            serde_json::from_str(&line).map_err(|e| CorpusError::MalformedLine {
                line: line_no,
                reason: e.to_string(),
            })?;
        if raw.id.is_empty() {
            return Err(CorpusError::InvalidRecord {
                line: line_no,
                reason: "document id is empty".into(),
            });
        }
        if !seen_ids.insert(raw.id.clone()) {
            return Err(CorpusError::DuplicateId {
                line: line_no,
                id: raw.id,
            });
        }
        if raw.text.is_empty() && !opts.allow_empty_text {
            return Err(CorpusError::InvalidRecord {
                line: line_no,
                reason: "document text is empty (set allow_empty_text to accept)".into(),
            });
        }
        if let Some(groups) = &raw.groups {
            if groups.len() != raw.private_phrases.len() {
                return Err(CorpusError::InvalidRecord {
                    line: line_no,
                    reason: format!(
                        "groups length {} does not match private_phrases length {}",
                        groups.len(),
                        raw.private_phrases.len()
                    ),
                });
            }
        }
        for phrase in &raw.private_phrases {
            if phrase.is_empty() {
                return Err(CorpusError::InvalidRecord {
                    line: line_no,
                    reason: "empty gold phrase".into(),
                });
            }
            if !raw.text.contains(phrase.as_str()) {
                warnings.push(format!(
                    "line {line_no}: phrase {phrase:?} does not occur verbatim in document {:?}",
                    raw.id
                ));
            }
        }
        records.push(LabeledDoc {
            gold: GoldLabel {
                doc_id: raw.id.clone(),
                phrases: raw.private_phrases,
                groups: raw.groups,
            },
            doc: Document {
                id: raw.id,
                text: raw.text,
            },
        });
    }

    Ok(LoadedCorpus { records, warnings })
}

/// Shuffle deterministically and partition into train/val/test.
pub fn split_corpus(
    records: Vec<LabeledDoc>,
    train_n: usize,
    val_n: usize,
    test_n: usize,
    seed: u64,
) -> Result<CorpusSplits, CorpusError> {
    split_records(records, train_n, val_n, test_n, seed)
}

/// Generic shuffle-then-partition used for every task's corpus.
pub fn split_records<T>(
    mut records: Vec<T>,
    train_n: usize,
    val_n: usize,
    test_n: usize,
    seed: u64,
) -> Result<Splits<T>, CorpusError> {
    let requested = train_n + val_n + test_n;
    if requested > records.len() {
        return Err(CorpusError::InsufficientRecords {
            requested,
            available: records.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    records.shuffle(&mut rng);

    let mut it = records.into_iter();
    let train: Vec<T> = it.by_ref().take(train_n).collect();
    let val: Vec<T> = it.by_ref().take(val_n).collect();
    let test: Vec<T> = it.by_ref().take(test_n).collect();
    Ok(Splits { train, val, test })
}

/// Per-epoch batching: re-shuffles with a seed derived from `(seed, epoch)`,
/// then chunks. With `batch_count` set, the final short batch is dropped and
/// at most `batch_count` full batches are returned; otherwise the remainder
/// forms a final short batch.
pub fn epoch_batches<T>(
    split: &[T],
    batch_size: usize,
    batch_count: Option<usize>,
    seed: u64,
    epoch: usize,
) -> Result<Vec<Vec<&T>>, CorpusError> {
    if batch_size == 0 {
        return Err(CorpusError::ZeroBatchSize);
    }
    if split.is_empty() {
        return Err(CorpusError::EmptySplit);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(seed, epoch));
    let mut order: Vec<usize> = (0..split.len()).collect();
    order.shuffle(&mut rng);

    let mut batches: Vec<Vec<&T>> = order
        .chunks(batch_size)
        .map(|chunk| chunk.iter().map(|&i| &split[i]).collect())
        .collect();
    if let Some(count) = batch_count {
        batches.retain(|b| b.len() == batch_size);
        batches.truncate(count);
    }
    Ok(batches)
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_add((epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Character-level statistics over a corpus.
///
/// Private characters count the union of gold-phrase occurrences, taking the
/// first occurrence of each distinct phrase per document; overlapping
/// occurrences are counted once.
pub fn corpus_stats(records: &[LabeledDoc]) -> CorpusStats {
    let mut total_chars: u64 = 0;
    let mut private_chars: u64 = 0;
    let mut total_entities: u64 = 0;
    let mut entity_char_sum: u64 = 0;
    let mut groups: BTreeSet<&str> = BTreeSet::new();
    let mut any_groups = false;

    for rec in records {
        total_chars += rec.doc.text.chars().count() as u64;
        total_entities += rec.gold.phrases.len() as u64;
        entity_char_sum += rec
            .gold
            .phrases
            .iter()
            .map(|p| p.chars().count() as u64)
            .sum::<u64>();
        if let Some(tags) = &rec.gold.groups {
            any_groups = true;
            groups.extend(tags.iter().map(String::as_str));
        }

        // First occurrence per distinct phrase, then interval union in bytes.
        let distinct: BTreeSet<&str> = rec.gold.phrases.iter().map(String::as_str).collect();
        let mut intervals: Vec<(usize, usize)> = distinct
            .into_iter()
            .filter_map(|p| rec.doc.text.find(p).map(|start| (start, start + p.len())))
            .collect();
        intervals.sort_unstable();
        let mut merged: Vec<(usize, usize)> = Vec::new();
        for (start, end) in intervals {
            match merged.last_mut() {
                Some((_, last_end)) if start <= *last_end => {
                    *last_end = (*last_end).max(end);
                }
                _ => merged.push((start, end)),
            }
        }
        for (start, end) in merged {
            private_chars += rec.doc.text[start..end].chars().count() as u64;
        }
    }

    let public_chars = total_chars - private_chars;
    let private_char_pct = if total_chars == 0 {
        0.0
    } else {
        100.0 * private_chars as f64 / total_chars as f64
    };
    let avg_chars_per_entity = if total_entities == 0 {
        0.0
    } else {
        entity_char_sum as f64 / total_entities as f64
    };

    CorpusStats {
        total_chars,
        private_chars,
        private_char_pct,
        public_chars,
        total_entities,
        entity_groups: if any_groups {
            Some(groups.len() as u64)
        } else {
            None
        },
        avg_chars_per_entity,
    }
}

/// Manifest written alongside persisted splits.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub train_n: usize,
    pub val_n: usize,
    pub test_n: usize,
}

fn record_line(rec: &LabeledDoc) -> serde_json::Value {
    let mut obj = serde_json::json!({
        "id": rec.doc.id,
        "text": rec.doc.text,
        "private_phrases": rec.gold.phrases,
    });
    if let Some(groups) = &rec.gold.groups {
        obj["groups"] = serde_json::json!(groups);
    }
    obj
}

/// Persist splits as three corpus files plus a manifest recording seed and counts.
pub fn save_splits(splits: &CorpusSplits, dir: &Path, seed: u64) -> Result<(), CorpusError> {
    std::fs::create_dir_all(dir).map_err(|source| CorpusError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    for (name, part) in [
        ("train.jsonl", &splits.train),
        ("val.jsonl", &splits.val),
        ("test.jsonl", &splits.test),
    ] {
        let path = dir.join(name);
        let mut file = File::create(&path).map_err(|source| CorpusError::Io {
            path: path.clone(),
            source,
        })?;
        for rec in part {
            writeln!(file, "{}", record_line(rec)).map_err(|source| CorpusError::Io {
                path: path.clone(),
                source,
            })?;
        }
    }
    let manifest = SplitManifest {
        seed,
        train_n: splits.train.len(),
        val_n: splits.val.len(),
        test_n: splits.test.len(),
    };
    let path = dir.join("manifest.json");
    let body = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, body).map_err(|source| CorpusError::Io { path, source })?;
    Ok(())
}

/// Load splits persisted by [`save_splits`], verifying counts against the manifest.
pub fn load_splits(dir: &Path, opts: LoadOptions) -> Result<(CorpusSplits, SplitManifest), CorpusError> {
    let manifest_path = dir.join("manifest.json");
    let body = std::fs::read_to_string(&manifest_path).map_err(|source| CorpusError::Io {
        path: manifest_path,
        source,
    })?;
    let manifest: SplitManifest =
        serde_json::from_str(&body).map_err(|e| CorpusError::BadManifest(e.to_string()))?;

    let mut parts = Vec::new();
    for name in ["train.jsonl", "val.jsonl", "test.jsonl"] {
        parts.push(load_corpus(&dir.join(name), CorpusFormat::Jsonl, opts)?.records);
    }
    let test = parts.pop().unwrap();
    let val = parts.pop().unwrap();
    let train = parts.pop().unwrap();
    if train.len() != manifest.train_n || val.len() != manifest.val_n || test.len() != manifest.test_n
    {
        return Err(CorpusError::BadManifest(format!(
            "split sizes {}/{}/{} do not match manifest {}/{}/{}",
            train.len(),
            val.len(),
            test.len(),
            manifest.train_n,
            manifest.val_n,
            manifest.test_n
        )));
    }
    Ok((Splits { train, val, test }, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_corpus(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for line in lines {
            writeln!(f, "{line}").unwrap();
        }
        f
    }

    fn synth_records(n: usize) -> Vec<LabeledDoc> {
        (0..n)
            .map(|i| LabeledDoc {
                doc: Document {
                    id: format!("d{i}"),
                    text: format!("doc {i} body"),
                },
                gold: GoldLabel {
                    doc_id: format!("d{i}"),
                    phrases: vec![format!("{i}")],
                    groups: None,
                },
            })
            .collect()
    }

    #[test]
    fn loads_single_record() {
        let f = write_corpus(&[r#"{"id":"d1","text":"Born 1975 in Paris.","private_phrases":["1975"]}"#]);
        let loaded = load_corpus(f.path(), CorpusFormat::Jsonl, LoadOptions::default()).unwrap();
        assert_eq!(loaded.records.len(), 1);
        assert_eq!(loaded.records[0].doc.id, "d1");
        assert_eq!(loaded.records[0].gold.phrases, vec!["1975"]);
        assert!(loaded.warnings.is_empty());
    }

    #[test]
    fn missing_text_field_names_line() {
        let f = write_corpus(&[
            r#"{"id":"d1","text":"ok","private_phrases":[]}"#,
            r#"{"id":"d2","private_phrases":[]}"#,
        ]);
        let err = load_corpus(f.path(), CorpusFormat::Jsonl, LoadOptions::default()).unwrap_err();
        match err {
            CorpusError::MalformedLine { line, reason } => {
                assert_eq!(line, 2);
                assert!(reason.contains("text"), "reason should name the field: {reason}");
            }
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn absent_phrase_warns_but_loads() {
        let f = write_corpus(&[r#"{"id":"d1","text":"Born 1975.","private_phrases":["2001"]}"#]);
        let loaded = load_corpus(f.path(), CorpusFormat::Jsonl, LoadOptions::default()).unwrap();
        assert_eq!(loaded.records.len(), 1);
        assert_eq!(loaded.warnings.len(), 1);
        assert!(loaded.warnings[0].contains("2001"));
    }

    #[test]
    fn duplicate_id_rejected() {
        let f = write_corpus(&[
            r#"{"id":"d1","text":"a","private_phrases":[]}"#,
            r#"{"id":"d1","text":"b","private_phrases":[]}"#,
        ]);
        let err = load_corpus(f.path(), CorpusFormat::Jsonl, LoadOptions::default()).unwrap_err();
        assert!(matches!(err, CorpusError::DuplicateId { line: 2, .. }));
    }

    #[test]
    fn empty_text_rejected_by_default() {
        let f = write_corpus(&[r#"{"id":"d1","text":"","private_phrases":[]}"#]);
        assert!(load_corpus(f.path(), CorpusFormat::Jsonl, LoadOptions::default()).is_err());
        let ok = load_corpus(
            f.path(),
            CorpusFormat::Jsonl,
            LoadOptions {
                allow_empty_text: true,
            },
        );
        assert!(ok.is_ok());
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let splits = split_corpus(synth_records(192), 160, 16, 16, 7).unwrap();
        assert_eq!(splits.train.len(), 160);
        assert_eq!(splits.val.len(), 16);
        assert_eq!(splits.test.len(), 16);
        let mut ids = BTreeSet::new();
        for rec in splits.train.iter().chain(&splits.val).chain(&splits.test) {
            assert!(ids.insert(rec.doc.id.clone()), "duplicate id across splits");
        }
    }

    #[test]
    fn split_is_deterministic() {
        let a = split_corpus(synth_records(10), 8, 1, 1, 0).unwrap();
        let b = split_corpus(synth_records(10), 8, 1, 1, 0).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn split_insufficient_records() {
        let err = split_corpus(synth_records(5), 8, 1, 1, 0).unwrap_err();
        assert!(matches!(err, CorpusError::InsufficientRecords { .. }));
    }

    #[test]
    fn stats_hand_counted() {
        let records = vec![LabeledDoc {
            doc: Document {
                id: "d1".into(),
                text: "Born 1975.".into(),
            },
            gold: GoldLabel {
                doc_id: "d1".into(),
                phrases: vec!["1975".into()],
                groups: None,
            },
        }];
        let stats = corpus_stats(&records);
        assert_eq!(stats.total_chars, 10);
        assert_eq!(stats.private_chars, 4);
        assert!((stats.private_char_pct - 40.0).abs() < 1e-12);
        assert_eq!(stats.public_chars, 6);
        assert_eq!(stats.total_entities, 1);
        assert_eq!(stats.entity_groups, None);
    }

    #[test]
    fn stats_empty_gold() {
        let mut records = synth_records(3);
        for rec in &mut records {
            rec.gold.phrases.clear();
        }
        let stats = corpus_stats(&records);
        assert_eq!(stats.private_chars, 0);
        assert_eq!(stats.public_chars, stats.total_chars);
        assert_eq!(stats.avg_chars_per_entity, 0.0);
    }

    #[test]
    fn stats_overlapping_phrases_counted_once() {
        let records = vec![LabeledDoc {
            doc: Document {
                id: "d1".into(),
                text: "abcdef".into(),
            },
            gold: GoldLabel {
                doc_id: "d1".into(),
                phrases: vec!["abcd".into(), "cdef".into()],
                groups: None,
            },
        }];
        let stats = corpus_stats(&records);
        assert_eq!(stats.private_chars, 6);
    }

    #[test]
    fn batches_default_config_shape() {
        let records = synth_records(160);
        let batches = epoch_batches(&records, 8, Some(20), 7, 0).unwrap();
        assert_eq!(batches.len(), 20);
        assert!(batches.iter().all(|b| b.len() == 8));
    }

    #[test]
    fn batches_keep_remainder_without_count() {
        let records = synth_records(9);
        let batches = epoch_batches(&records, 8, None, 7, 0).unwrap();
        assert_eq!(batches.len(), 2);
        assert_eq!(batches[0].len(), 8);
        assert_eq!(batches[1].len(), 1);
    }

    #[test]
    fn batches_deterministic_per_epoch() {
        let records = synth_records(20);
        let ids = |bs: &Vec<Vec<&LabeledDoc>>| -> Vec<Vec<String>> {
            bs.iter()
                .map(|b| b.iter().map(|r| r.doc.id.clone()).collect())
                .collect()
        };
        let a = epoch_batches(&records, 4, None, 3, 1).unwrap();
        let b = epoch_batches(&records, 4, None, 3, 1).unwrap();
        assert_eq!(ids(&a), ids(&b));
        let c = epoch_batches(&records, 4, None, 3, 2).unwrap();
        assert_ne!(ids(&a), ids(&c), "different epochs should reshuffle");
    }

    #[test]
    fn batches_reject_empty_split() {
        let records: Vec<LabeledDoc> = Vec::new();
        assert!(matches!(
            epoch_batches(&records, 8, None, 0, 0),
            Err(CorpusError::EmptySplit)
        ));
    }

    #[test]
    fn splits_round_trip_via_files() {
        let dir = tempfile::tempdir().unwrap();
        let splits = split_corpus(synth_records(10), 8, 1, 1, 42).unwrap();
        save_splits(&splits, dir.path(), 42).unwrap();
        let (loaded, manifest) = load_splits(dir.path(), LoadOptions::default()).unwrap();
        assert_eq!(manifest.seed, 42);
        assert_eq!(
            serde_json::to_string(&splits).unwrap(),
            serde_json::to_string(&loaded).unwrap()
        );
    }
}
