//! `mac` — learn, evaluate, and operate rule constitutions from the command
//! line. Run definitions live in a TOML config; flags are overrides. Exit
//! codes: 0 success, 2 config error, 3 backend error, 4 data error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{LearnOverrides, SplitName};
use config::ConfigParse;
use mac_core::agents::AgentRole;
use mac_core::backend::BackendError;
use mac_core::constitution::ConstitutionError;
use mac_core::corpus::CorpusError;
use mac_core::optimizer::OptimizerError;
use mac_core::retrieval::{RetrievalError, RetrievalStrategy};
use mac_core::tasks::TaskError;
use mac_core::traces::TraceError;

#[derive(Parser)]
#[command(name = "mac", version, about = "Constitution learning engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Learn a constitution from the configured corpus.
    Learn {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Evaluate a constitution on a split; k > 0 adds retrieved few-shot
    /// demonstrations.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        constitution: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitName,
        #[arg(long, default_value_t = 0)]
        k: usize,
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Annotate documents (JSONL of {"id","text"}) with a constitution.
    Annotate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        constitution: Option<PathBuf>,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Character-level statistics of a corpus file.
    Stats {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        allow_empty_text: bool,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Few-shot k-sweep per retrieval strategy.
    RetrieveEval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        constitution: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitName,
        /// Comma-separated k values.
        #[arg(long, default_value = "0,1,3,5", value_delimiter = ',')]
        ks: Vec<usize>,
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Trace store inspection and export.
    Traces {
        #[command(subcommand)]
        command: TracesCommand,
    },
}

#[derive(Subcommand)]
enum TracesCommand {
    /// Per-role rollout statistics (sizes in characters).
    Stats {
        #[arg(long)]
        file: PathBuf,
    },
    /// Export traces, optionally per role and capped by seeded subsampling.
    Export {
        #[arg(long)]
        file: PathBuf,
        #[arg(long)]
        role: Option<String>,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        cap: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_strategy(raw: Option<&str>) -> anyhow::Result<Option<RetrievalStrategy>> {
    raw.map(|s| {
        s.parse::<RetrievalStrategy>()
            .map_err(|e| anyhow::Error::new(ConfigParse(e)))
    })
    .transpose()
}

fn parse_role(raw: Option<&str>) -> anyhow::Result<Option<AgentRole>> {
    raw.map(|s| {
        s.parse::<AgentRole>()
            .map_err(|e| anyhow::Error::new(ConfigParse(e)))
    })
    .transpose()
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Learn {
            config,
            epochs,
            seed,
            output_dir,
        } => commands::cmd_learn(
            &config,
            LearnOverrides {
                epochs,
                seed,
                output_dir,
            },
        ),
        Command::Eval {
            config,
            constitution,
            split,
            k,
            strategy,
            report,
        } => commands::cmd_eval(
            &config,
            &constitution,
            split,
            k,
            parse_strategy(strategy.as_deref())?,
            report.as_deref(),
        ),
        Command::Annotate {
            config,
            constitution,
            input,
            output,
        } => commands::cmd_annotate(&config, constitution.as_deref(), &input, &output),
        Command::Stats {
            corpus,
            allow_empty_text,
            json,
        } => commands::cmd_stats(&corpus, allow_empty_text, json.as_deref()),
        Command::RetrieveEval {
            config,
            constitution,
            split,
            ks,
            strategy,
            report,
        } => commands::cmd_retrieve_eval(
            &config,
            &constitution,
            split,
            &ks,
            parse_strategy(strategy.as_deref())?,
            report.as_deref(),
        ),
        Command::Traces { command } => match command {
            TracesCommand::Stats { file } => commands::cmd_traces_stats(&file),
            TracesCommand::Export {
                file,
                role,
                output,
                cap,
                seed,
            } => commands::cmd_traces_export(
                &file,
                parse_role(role.as_deref())?,
                &output,
                cap,
                seed,
            ),
        },
    }
}

// 0 success, 2 config error, 3 backend error, 4 data error.
fn exit_code_for(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<ConfigParse>().is_some() {
            return 2;
        }
        if cause.downcast_ref::<BackendError>().is_some() {
            return 3;
        }
        if let Some(e) = cause.downcast_ref::<OptimizerError>() {
            return match e {
                OptimizerError::Backend(_) => 3,
                OptimizerError::Config(_) => 2,
                _ => 4,
            };
        }
        if let Some(e) = cause.downcast_ref::<RetrievalError>() {
            return match e {
                RetrievalError::Backend(_) => 3,
                _ => 4,
            };
        }
        if cause.downcast_ref::<CorpusError>().is_some()
            || cause.downcast_ref::<TraceError>().is_some()
            || cause.downcast_ref::<ConstitutionError>().is_some()
            || cause.downcast_ref::<TaskError>().is_some()
            || cause.downcast_ref::<std::io::Error>().is_some()
        {
            return 4;
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
