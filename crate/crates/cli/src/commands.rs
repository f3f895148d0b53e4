//! Command implementations. Every learn run writes a self-contained output
//! directory: config snapshot, manifest, splits, best/final constitutions,
//! step log, validation curve, budget report, and the trace store.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

use mac_core::agents::{parse_annotator_output, AgentRole, PromptTemplates};
use mac_core::backend::ChatBackend;
use mac_core::constitution::Constitution;
use mac_core::corpus::{
    corpus_stats, load_corpus, save_splits, split_corpus, split_records, CorpusFormat,
    CorpusStats, LoadOptions, Splits,
};
use mac_core::optimizer::{annotate_instances, evaluate, run_task, FewshotFn, RunResult};
use mac_core::retrieval::{build_index, fewshot_provider, RetrievalIndex, RetrievalStrategy};
use mac_core::tasks::{load_tool_corpus, PiiTask, TaskAdapter, ToolCallInstance, ToolTask};
use mac_core::traces::{export_traces, load_traces, stats_of, TraceRecorder};
use mac_core::{Document, LabeledDoc, MatchReport};

use crate::config::{ConfigFile, TaskKind};

pub struct LearnOverrides {
    pub epochs: Option<usize>,
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    task: TaskKind,
    created_unix: u64,
}

fn write_manifest(dir: &Path, command: &str, config: &ConfigFile) -> Result<()> {
    let manifest = Manifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        seed: config.run.seed,
        task: config.corpus.task,
        created_unix: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    };
    write_json(&dir.join("manifest.json"), &manifest)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let body = serde_json::to_string_pretty(value)?;
    std::fs::write(path, body).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    for row in rows {
        writeln!(file, "{}", serde_json::to_string(row)?)?;
    }
    Ok(())
}

fn load_pii_splits(config: &ConfigFile) -> Result<(Splits<LabeledDoc>, Vec<String>)> {
    let opts = LoadOptions {
        allow_empty_text: config.corpus.allow_empty_text,
    };
    let loaded = load_corpus(&config.corpus.path, CorpusFormat::Jsonl, opts)?;
    for warning in &loaded.warnings {
        log::warn!("{warning}");
    }
    let warnings = loaded.warnings;
    let splits = split_corpus(
        loaded.records,
        config.corpus.train,
        config.corpus.val,
        config.corpus.test,
        config.run.seed,
    )?;
    Ok((splits, warnings))
}

fn load_tool_splits(config: &ConfigFile) -> Result<Splits<ToolCallInstance>> {
    let records = load_tool_corpus(&config.corpus.path)?;
    Ok(split_records(
        records,
        config.corpus.train,
        config.corpus.val,
        config.corpus.test,
        config.run.seed,
    )?)
}

fn write_result_artifacts(dir: &Path, result: &RunResult) -> Result<()> {
    std::fs::write(dir.join("constitution_best.json"), result.best_constitution.serialize())?;
    std::fs::write(dir.join("constitution_final.json"), result.final_constitution.serialize())?;
    write_jsonl(&dir.join("step_log.jsonl"), &result.step_log)?;
    write_jsonl(&dir.join("val_curve.jsonl"), &result.val_log)?;
    write_json(&dir.join("budget.json"), &result.budget)?;
    Ok(())
}

pub fn cmd_learn(config_path: &Path, overrides: LearnOverrides) -> Result<()> {
    let mut config = ConfigFile::load(config_path)?;
    if let Some(epochs) = overrides.epochs {
        config.run.epochs = epochs;
    }
    if let Some(seed) = overrides.seed {
        config.run.seed = seed;
    }
    if let Some(dir) = overrides.output_dir {
        config.output_dir = dir;
    }
    config.validate()?;

    let dir = config.output_dir.clone();
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    std::fs::write(dir.join("config.toml"), toml::to_string_pretty(&config)?)?;
    write_manifest(&dir, "learn", &config)?;

    let backend = config.build_backend()?;
    let templates = config.templates()?;
    let sampling = config.sampling_profile();
    let recorder = TraceRecorder::create(&dir.join("traces.jsonl"))?;

    match config.corpus.task {
        TaskKind::Pii => {
            let (splits, _) = load_pii_splits(&config)?;
            save_splits(&splits, &dir.join("splits"), config.run.seed)?;
            let result = run_task(
                &PiiTask,
                &config.run,
                &splits.train,
                &splits.val,
                backend.as_ref(),
                &recorder,
                &templates,
                &sampling,
            )?;
            write_result_artifacts(&dir, &result)?;

            // Test-split report for the best constitution.
            let test_report = evaluate(
                &result.best_constitution,
                &splits.test,
                backend.as_ref(),
                &sampling.annotator,
                config.run.window,
                None,
            )?;
            write_json(&dir.join("test_report.json"), &test_report)?;

            println!("run complete: {}", dir.display());
            println!(
                "  best validation F1: {:.6} | rules: {} / {}",
                result.best_val_mu,
                result.best_constitution.len(),
                result.best_constitution.budget()
            );
            println!(
                "  test: P {:.6} R {:.6} F1 {:.6}",
                test_report.precision, test_report.recall, test_report.f1
            );
            print!("{}", result.budget.render());
        }
        TaskKind::Tool => {
            let splits = load_tool_splits(&config)?;
            save_tool_splits(&splits, &dir.join("splits"), config.run.seed)?;
            let result = run_task(
                &ToolTask,
                &config.run,
                &splits.train,
                &splits.val,
                backend.as_ref(),
                &recorder,
                &templates,
                &sampling,
            )?;
            write_result_artifacts(&dir, &result)?;

            // Baseline (empty constitution) vs final accuracy on the test split.
            let empty = Constitution::new(config.run.rule_budget)?;
            let baseline = eval_tool(&empty, &splits.test, backend.as_ref(), &config, &templates)?;
            let final_acc =
                eval_tool(&result.best_constitution, &splits.test, backend.as_ref(), &config, &templates)?;
            let report = ToolReport {
                method: "MAC",
                baseline_accuracy: baseline,
                final_accuracy: final_acc,
                improvement: final_acc - baseline,
            };
            write_json(&dir.join("tool_report.json"), &report)?;

            println!("run complete: {}", dir.display());
            println!("  best validation accuracy: {:.6}", result.best_val_mu);
            println!("method  final_accuracy  improvement");
            println!(
                "{:<7} {:>13.1}% {:>+11.1}%",
                report.method,
                report.final_accuracy * 100.0,
                report.improvement * 100.0
            );
            print!("{}", result.budget.render());
        }
    }
    recorder.close()?;
    Ok(())
}

#[derive(Serialize)]
struct ToolReport {
    method: &'static str,
    baseline_accuracy: f64,
    final_accuracy: f64,
    improvement: f64,
}

fn eval_tool(
    c: &Constitution,
    insts: &[ToolCallInstance],
    backend: &dyn ChatBackend,
    config: &ConfigFile,
    templates: &PromptTemplates,
) -> Result<f64> {
    let refs: Vec<&ToolCallInstance> = insts.iter().collect();
    let preds = annotate_instances(
        &ToolTask,
        c,
        &refs,
        backend,
        &config.sampling_profile().annotator,
        templates,
        None,
        None,
        (None, None),
    )?;
    let score = ToolTask.score_batch(&preds, &refs, config.run.window)?;
    Ok(score.mu)
}

fn save_tool_splits(splits: &Splits<ToolCallInstance>, dir: &Path, seed: u64) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (name, part) in [
        ("train.jsonl", &splits.train),
        ("val.jsonl", &splits.val),
        ("test.jsonl", &splits.test),
    ] {
        write_jsonl(&dir.join(name), part)?;
    }
    write_json(
        &dir.join("manifest.json"),
        &serde_json::json!({
            "seed": seed,
            "train_n": splits.train.len(),
            "val_n": splits.val.len(),
            "test_n": splits.test.len(),
        }),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

fn pick_split<T>(splits: &Splits<T>, which: SplitName) -> &[T] {
    match which {
        SplitName::Train => &splits.train,
        SplitName::Val => &splits.val,
        SplitName::Test => &splits.test,
    }
}

fn load_constitution(path: &Path) -> Result<Constitution> {
    let body = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read constitution {}", path.display()))?;
    Ok(Constitution::deserialize(&body)?)
}

fn build_eval_index(
    config: &ConfigFile,
    train: &[LabeledDoc],
    strategy: RetrievalStrategy,
) -> Result<RetrievalIndex> {
    let embedder = match strategy {
        RetrievalStrategy::Similarity => config.build_embedder()?,
        RetrievalStrategy::Random => None,
    };
    Ok(build_index(train, embedder, strategy)?)
}

pub fn cmd_eval(
    config_path: &Path,
    constitution_path: &Path,
    split: SplitName,
    k: usize,
    strategy: Option<RetrievalStrategy>,
    report_path: Option<&Path>,
) -> Result<()> {
    let config = ConfigFile::load(config_path)?;
    let c = load_constitution(constitution_path)?;
    let backend = config.build_backend()?;
    let (splits, _) = load_pii_splits(&config)?;
    let docs = pick_split(&splits, split);
    let strategy = strategy.unwrap_or(config.retrieval.strategy);

    let report = if k > 0 {
        let index = build_eval_index(&config, &splits.train, strategy)?;
        let provider = fewshot_provider(&index, k, config.run.seed);
        eval_pii(&c, docs, backend.as_ref(), &config, Some(&provider))?
    } else {
        eval_pii(&c, docs, backend.as_ref(), &config, None)?
    };

    println!(
        "precision {:.6}  recall {:.6}  f1 {:.6}  (tp {}, fn {}, fp {}, k {})",
        report.precision,
        report.recall,
        report.f1,
        report.tp,
        report.fn_items.len(),
        report.fp_items.len(),
        k
    );
    if let Some(path) = report_path {
        write_json(path, &report)?;
    }
    Ok(())
}

fn eval_pii(
    c: &Constitution,
    docs: &[LabeledDoc],
    backend: &dyn ChatBackend,
    config: &ConfigFile,
    fewshot: Option<&FewshotFn<'_, LabeledDoc>>,
) -> Result<MatchReport> {
    Ok(evaluate(
        c,
        docs,
        backend,
        &config.sampling_profile().annotator,
        config.run.window,
        fewshot,
    )?)
}

pub fn cmd_annotate(
    config_path: &Path,
    constitution_path: Option<&Path>,
    input: &Path,
    output: &Path,
) -> Result<()> {
    let config = ConfigFile::load(config_path)?;
    let backend = config.build_backend()?;
    let templates = config.templates()?;
    let c = match constitution_path {
        Some(path) if path.exists() => load_constitution(path)?,
        Some(path) => {
            log::warn!(
                "constitution {} not found; annotating with an empty constitution",
                path.display()
            );
            Constitution::new(config.run.rule_budget)?
        }
        None => {
            log::warn!("no constitution given; annotating with an empty constitution");
            Constitution::new(config.run.rule_budget)?
        }
    };

    let file = File::open(input).with_context(|| format!("cannot read {}", input.display()))?;
    let mut out =
        File::create(output).with_context(|| format!("cannot create {}", output.display()))?;
    let params = config.sampling_profile().annotator;
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line)
            .with_context(|| format!("{}:{}: malformed record", input.display(), idx + 1))?;
        let doc = Document {
            id: value["id"]
                .as_str()
                .map(str::to_string)
                .unwrap_or_else(|| format!("doc{}", idx + 1)),
            text: value["text"]
                .as_str()
                .with_context(|| format!("{}:{}: missing \"text\"", input.display(), idx + 1))?
                .to_string(),
        };
        let messages = mac_core::agents::build_annotator_prompt(&doc, &c, &[], &templates);
        let completion = backend.complete(AgentRole::Annotator, &messages, &params)?;
        let phrases = match parse_annotator_output(&completion.text) {
            Ok(parsed) => parsed.phrases,
            Err(e) => {
                log::warn!("doc {}: unparseable annotator output ({e}); emitting empty list", doc.id);
                Vec::new()
            }
        };
        writeln!(
            out,
            "{}",
            serde_json::json!({ "id": doc.id, "private_phrases": phrases })
        )?;
    }
    Ok(())
}

pub fn cmd_stats(corpus_path: &Path, allow_empty_text: bool, json_out: Option<&Path>) -> Result<()> {
    let loaded = load_corpus(
        corpus_path,
        CorpusFormat::Jsonl,
        LoadOptions { allow_empty_text },
    )?;
    for warning in &loaded.warnings {
        log::warn!("{warning}");
    }
    let stats = corpus_stats(&loaded.records);
    print!("{}", render_stats(&stats, loaded.records.len()));
    if let Some(path) = json_out {
        write_json(path, &stats)?;
    }
    Ok(())
}

fn render_stats(stats: &CorpusStats, documents: usize) -> String {
    let groups = stats
        .entity_groups
        .map_or_else(|| "n/a".to_string(), |g| g.to_string());
    format!(
        "Documents                     {documents}\n\
         Total characters              {}\n\
         Total private characters      {}\n\
         Private characters (%)        {:.2}\n\
         Public characters             {}\n\
         Total private entities        {}\n\
         Total private entity groups   {groups}\n\
         Average characters per entity {:.2}\n",
        stats.total_chars,
        stats.private_chars,
        stats.private_char_pct,
        stats.public_chars,
        stats.total_entities,
        stats.avg_chars_per_entity,
    )
}

#[derive(Serialize)]
struct SweepRow {
    strategy: RetrievalStrategy,
    k: usize,
    precision: f64,
    recall: f64,
    f1: f64,
}

pub fn cmd_retrieve_eval(
    config_path: &Path,
    constitution_path: &Path,
    split: SplitName,
    ks: &[usize],
    strategy: Option<RetrievalStrategy>,
    report_path: Option<&Path>,
) -> Result<()> {
    let config = ConfigFile::load(config_path)?;
    let c = load_constitution(constitution_path)?;
    let backend = config.build_backend()?;
    let (splits, _) = load_pii_splits(&config)?;
    let docs = pick_split(&splits, split);

    let strategies: Vec<RetrievalStrategy> = match strategy {
        Some(s) => vec![s],
        None => vec![RetrievalStrategy::Random, RetrievalStrategy::Similarity],
    };

    let mut rows: Vec<SweepRow> = Vec::new();
    println!("strategy    k   precision  recall     f1");
    for strategy in strategies {
        let index = build_eval_index(&config, &splits.train, strategy)?;
        for &k in ks {
            let report = if k > 0 {
                let provider = fewshot_provider(&index, k, config.run.seed);
                eval_pii(&c, docs, backend.as_ref(), &config, Some(&provider))?
            } else {
                eval_pii(&c, docs, backend.as_ref(), &config, None)?
            };
            println!(
                "{:<11} {:<3} {:<10.6} {:<10.6} {:<10.6}",
                format!("{strategy:?}").to_lowercase(),
                k,
                report.precision,
                report.recall,
                report.f1
            );
            rows.push(SweepRow {
                strategy,
                k,
                precision: report.precision,
                recall: report.recall,
                f1: report.f1,
            });
        }
    }
    if let Some(path) = report_path {
        write_jsonl(path, &rows)?;
    }
    Ok(())
}

pub fn cmd_traces_stats(file: &Path) -> Result<()> {
    let traces = load_traces(file)?;
    print!("{}", stats_of(&traces).render());
    Ok(())
}

pub fn cmd_traces_export(
    file: &Path,
    role: Option<AgentRole>,
    output: &Path,
    cap: Option<usize>,
    seed: u64,
) -> Result<()> {
    let traces = load_traces(file)?;
    let written = export_traces(&traces, role, output, cap, seed)?;
    println!("wrote {written} traces to {}", output.display());
    Ok(())
}
