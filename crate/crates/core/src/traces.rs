//! Agent invocation traces: append-only recording, per-role export for
//! downstream fine-tuning pipelines, and rollout statistics.
//!
//! All size figures are character counts (not tokenizer tokens); rendered
//! tables state the unit explicitly. Traces carry prompts and outputs only —
//! transport headers (and with them any credentials) never reach the
//! recorder.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{AgentRole, PromptMessages};

/// Default export cap per role.
pub const DEFAULT_EXPORT_CAP: usize = 1000;

/// One agent invocation's full input/output record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentTrace {
    pub role: AgentRole,
    pub input: PromptMessages,
    pub output: String,
    pub epoch: Option<usize>,
    pub batch: Option<usize>,
    /// For proposal-producing roles: whether the proposal was accepted.
    pub accepted: Option<bool>,
    pub chars_in: u64,
    pub chars_out: u64,
    pub timestamp_ms: u64,
}

impl AgentTrace {
    pub fn new(
        role: AgentRole,
        input: PromptMessages,
        output: String,
        epoch: Option<usize>,
        batch: Option<usize>,
        accepted: Option<bool>,
    ) -> Self {
        let chars_in = (input.system.chars().count() + input.user.chars().count()) as u64;
        let chars_out = output.chars().count() as u64;
        Self {
            role,
            input,
            output,
            epoch,
            batch,
            accepted,
            chars_in,
            chars_out,
            timestamp_ms: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_millis() as u64)
                .unwrap_or(0),
        }
    }
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace store {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("recorder is closed")]
    Closed,
    #[error("corrupt trace record at line {line}: {reason}")]
    Corrupt { line: usize, reason: String },
}

/// Per-role rollout statistics row.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RoleStats {
    pub rollouts: u64,
    pub input_chars: u64,
    pub output_chars: u64,
    pub avg_input_chars: f64,
    pub avg_output_chars: f64,
}

impl RoleStats {
    fn finish(&mut self) {
        if self.rollouts > 0 {
            self.avg_input_chars = self.input_chars as f64 / self.rollouts as f64;
            self.avg_output_chars = self.output_chars as f64 / self.rollouts as f64;
        }
    }
}

/// Rollout statistics table: one row per role plus a totals row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStats {
    pub per_role: BTreeMap<String, RoleStats>,
    pub total: RoleStats,
}

impl TraceStats {
    /// Text table in the usual rollout-statistics layout; sizes are characters.
    pub fn render(&self) -> String {
        let mut out = String::from(
            "Agent Role    Rollouts  Total In (chars)  Total Out (chars)   Avg In    Avg Out\n",
        );
        for role in AgentRole::ALL {
            let row = self.per_role.get(role.label()).cloned().unwrap_or_default();
            out.push_str(&format_row(role.label(), &row));
        }
        out.push_str(&format_row("Total", &self.total));
        out
    }
}

fn format_row(label: &str, row: &RoleStats) -> String {
    format!(
        "{label:<12} {:>9} {:>17} {:>18} {:>8.1} {:>10.1}\n",
        row.rollouts, row.input_chars, row.output_chars, row.avg_input_chars, row.avg_output_chars
    )
}

struct RecorderInner {
    writer: Option<BufWriter<File>>,
    count: u64,
}

/// Append-only trace store backed by a line-delimited file. Concurrent
/// `record` calls append atomically (one lock per record); `export` and
/// `stats` read a flushed snapshot.
pub struct TraceRecorder {
    path: PathBuf,
    inner: Mutex<RecorderInner>,
}

impl TraceRecorder {
    /// Create (truncating) a trace store at `path`.
    pub fn create(path: &Path) -> Result<Self, TraceError> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|source| TraceError::Io {
                    path: path.to_path_buf(),
                    source,
                })?;
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(path)
            .map_err(|source| TraceError::Io {
                path: path.to_path_buf(),
                source,
            })?;
        Ok(Self {
            path: path.to_path_buf(),
            inner: Mutex::new(RecorderInner {
                writer: Some(BufWriter::new(file)),
                count: 0,
            }),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Durably append one trace.
    pub fn record(&self, trace: &AgentTrace) -> Result<(), TraceError> {
        let line = serde_json::to_string(trace).expect("trace serializes");
        let mut inner = self.inner.lock().unwrap();
        let writer = inner.writer.as_mut().ok_or(TraceError::Closed)?;
        writeln!(writer, "{line}").and_then(|_| writer.flush()).map_err(|source| {
            TraceError::Io {
                path: self.path.clone(),
                source,
            }
        })?;
        inner.count += 1;
        Ok(())
    }

    pub fn recorded_count(&self) -> u64 {
        self.inner.lock().unwrap().count
    }

    /// Flush and stop accepting records.
    pub fn close(&self) -> Result<(), TraceError> {
        let mut inner = self.inner.lock().unwrap();
        if let Some(mut writer) = inner.writer.take() {
            writer.flush().map_err(|source| TraceError::Io {
                path: self.path.clone(),
                source,
            })?;
        }
        Ok(())
    }

    /// Consistent snapshot of every recorded trace, in append order.
    pub fn snapshot(&self) -> Result<Vec<AgentTrace>, TraceError> {
        {
            let mut inner = self.inner.lock().unwrap();
            if let Some(writer) = inner.writer.as_mut() {
                writer.flush().map_err(|source| TraceError::Io {
                    path: self.path.clone(),
                    source,
                })?;
            }
        }
        load_traces(&self.path)
    }

    /// Write traces (optionally filtered by role) to `path` as line-delimited
    /// records. When `cap` is exceeded, a uniform seeded subsample of exactly
    /// `cap` traces is written, preserving append order. Returns the count
    /// written.
    pub fn export(
        &self,
        role: Option<AgentRole>,
        path: &Path,
        cap: Option<usize>,
        seed: u64,
    ) -> Result<usize, TraceError> {
        export_traces(&self.snapshot()?, role, path, cap, seed)
    }

    /// Per-role rollout statistics plus a totals row.
    pub fn stats(&self) -> Result<TraceStats, TraceError> {
        let traces = self.snapshot()?;
        Ok(stats_of(&traces))
    }
}

/// Export half of [`TraceRecorder::export`], usable on any trace list.
pub fn export_traces(
    traces: &[AgentTrace],
    role: Option<AgentRole>,
    path: &Path,
    cap: Option<usize>,
    seed: u64,
) -> Result<usize, TraceError> {
    let mut traces: Vec<&AgentTrace> = match role {
        Some(role) => traces.iter().filter(|t| t.role == role).collect(),
        None => traces.iter().collect(),
    };
    if let Some(cap) = cap {
        if traces.len() > cap {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut keep: Vec<usize> =
                rand::seq::index::sample(&mut rng, traces.len(), cap).into_vec();
            keep.sort_unstable();
            traces = keep.into_iter().map(|i| traces[i]).collect();
        }
    }
    let file = File::create(path).map_err(|source| TraceError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut writer = BufWriter::new(file);
    for trace in &traces {
        let line = serde_json::to_string(trace).expect("trace serializes");
        writeln!(writer, "{line}").map_err(|source| TraceError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    }
    writer.flush().map_err(|source| TraceError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(traces.len())
}

/// Load a trace file written by [`TraceRecorder::record`] or
/// [`TraceRecorder::export`].
pub fn load_traces(path: &Path) -> Result<Vec<AgentTrace>, TraceError> {
    let file = File::open(path).map_err(|source| TraceError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut traces = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| TraceError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let trace: AgentTrace = serde_json::from_str(&line).map_err(|e| TraceError::Corrupt {
            line: idx + 1,
            reason: e.to_string(),
        })?;
        traces.push(trace);
    }
    Ok(traces)
}

/// Statistics over an in-memory trace list.
pub fn stats_of(traces: &[AgentTrace]) -> TraceStats {
    let mut per_role: BTreeMap<String, RoleStats> = BTreeMap::new();
    let mut total = RoleStats::default();
    for trace in traces {
        let row = per_role.entry(trace.role.label().to_string()).or_default();
        row.rollouts += 1;
        row.input_chars += trace.chars_in;
        row.output_chars += trace.chars_out;
        total.rollouts += 1;
        total.input_chars += trace.chars_in;
        total.output_chars += trace.chars_out;
    }
    for row in per_role.values_mut() {
        row.finish();
    }
    total.finish();
    TraceStats { per_role, total }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace(role: AgentRole, chars_in: usize, chars_out: usize) -> AgentTrace {
        AgentTrace::new(
            role,
            PromptMessages {
                system: "s".repeat(chars_in / 2),
                user: "u".repeat(chars_in - chars_in / 2),
            },
            "o".repeat(chars_out),
            Some(0),
            Some(1),
            None,
        )
    }

    #[test]
    fn record_then_export_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let recorder = TraceRecorder::create(&dir.path().join("traces.jsonl")).unwrap();
        for i in 0..3 {
            recorder.record(&trace(AgentRole::Annotator, 10 + i, 5)).unwrap();
        }
        let out = dir.path().join("export.jsonl");
        let written = recorder.export(None, &out, None, 0).unwrap();
        assert_eq!(written, 3);
        let loaded = load_traces(&out).unwrap();
        assert_eq!(loaded.len(), 3);
        assert_eq!(loaded[0].chars_in, 10);
        assert_eq!(loaded[2].chars_in, 12);
    }

    #[test]
    fn record_after_close_errors() {
        let dir = tempfile::tempdir().unwrap();
        let recorder = TraceRecorder::create(&dir.path().join("t.jsonl")).unwrap();
        recorder.close().unwrap();
        let err = recorder.record(&trace(AgentRole::Decision, 4, 2)).unwrap_err();
        assert!(matches!(err, TraceError::Closed));
    }

    #[test]
    fn export_role_filter_on_empty_store() {
        let dir = tempfile::tempdir().unwrap();
        let recorder = TraceRecorder::create(&dir.path().join("t.jsonl")).unwrap();
        let out = dir.path().join("out.jsonl");
        let written = recorder
            .export(Some(AgentRole::Decision), &out, None, 0)
            .unwrap();
        assert_eq!(written, 0);
    }

    #[test]
    fn export_cap_subsamples_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let recorder = TraceRecorder::create(&dir.path().join("t.jsonl")).unwrap();
        for _ in 0..1500 {
            recorder.record(&trace(AgentRole::Annotator, 8, 4)).unwrap();
        }
        for _ in 0..132 {
            recorder.record(&trace(AgentRole::Editor, 8, 4)).unwrap();
        }
        let out = dir.path().join("annotator.jsonl");
        let written = recorder
            .export(Some(AgentRole::Annotator), &out, Some(1000), 7)
            .unwrap();
        assert_eq!(written, 1000);
        assert_eq!(load_traces(&out).unwrap().len(), 1000);

        let out_editor = dir.path().join("editor.jsonl");
        let written = recorder
            .export(Some(AgentRole::Editor), &out_editor, Some(1000), 7)
            .unwrap();
        assert_eq!(written, 132, "below the cap everything is kept");
    }

    #[test]
    fn stats_hand_averages() {
        let traces = vec![
            trace(AgentRole::Annotator, 100, 10),
            trace(AgentRole::Annotator, 300, 30),
        ];
        let stats = stats_of(&traces);
        let row = &stats.per_role["Annotator"];
        assert_eq!(row.rollouts, 2);
        assert_eq!(row.avg_input_chars, 200.0);
        assert_eq!(row.avg_output_chars, 20.0);
    }

    #[test]
    fn stats_empty_store_all_zero() {
        let stats = stats_of(&[]);
        assert_eq!(stats.total.rollouts, 0);
        assert_eq!(stats.total.avg_input_chars, 0.0);
    }

    #[test]
    fn stats_totals_are_row_sums() {
        let traces = vec![
            trace(AgentRole::Annotator, 10, 1),
            trace(AgentRole::Decision, 20, 2),
            trace(AgentRole::Creator, 30, 3),
        ];
        let stats = stats_of(&traces);
        let sum_in: u64 = stats.per_role.values().map(|r| r.input_chars).sum();
        assert_eq!(stats.total.input_chars, sum_in);
        assert_eq!(stats.total.rollouts, 3);
    }

    #[test]
    fn round_trip_preserves_all_fields() {
        let dir = tempfile::tempdir().unwrap();
        let recorder = TraceRecorder::create(&dir.path().join("t.jsonl")).unwrap();
        let original = AgentTrace::new(
            AgentRole::Creator,
            PromptMessages {
                system: "sys".into(),
                user: "usr".into(),
            },
            "out".into(),
            Some(2),
            Some(7),
            Some(true),
        );
        recorder.record(&original).unwrap();
        let out = dir.path().join("e.jsonl");
        recorder.export(None, &out, None, 0).unwrap();
        let loaded = load_traces(&out).unwrap();
        assert_eq!(loaded, vec![original]);
    }

    #[test]
    fn render_mentions_character_unit() {
        let stats = stats_of(&[trace(AgentRole::Annotator, 4, 2)]);
        assert!(stats.render().contains("chars"));
    }
}
