use std::net::SocketAddr;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use obtod_core::dataset::{AugmentMethod, HiddenTarget, Regime, Split, Task};
use obtod_core::eval::{Subset, TaskMode};
use obtod_core::{Engine, EngineConfig};
use obtod_engine::{router, tools, AppState};

#[derive(Parser)]
#[command(name = "engine", version, about = "Open-book task-oriented dialog engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    State,
    Response,
}

#[derive(Clone, Copy, ValueEnum)]
enum HiddenArg {
    PreviousBelief,
    Skip,
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP session service.
    Serve {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `server.listen` from the config.
        #[arg(long)]
        listen: Option<SocketAddr>,
    },
    /// Teacher-forced replay of a dataset split into a run file.
    Replay {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Replace the backend with one scripted from the gold annotations.
        #[arg(long)]
        oracle: bool,
    },
    /// Score a run file.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        mode: TaskMode,
        #[arg(long, default_value = "all")]
        subset: Subset,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Entity database; defaults to the one named by the dataset.
        #[arg(long)]
        db: Option<PathBuf>,
        /// Print the report as JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Per-split counts and mean token lengths.
    Stats {
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Write training pairs as TSV.
    EmitTraining {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "train")]
        split: Split,
        #[arg(long, value_enum)]
        task: TaskArg,
        /// One of T, T+Q, T+Q-EK, PM, KB.
        #[arg(long)]
        regime: Regime,
        #[arg(long, value_enum, default_value = "previous-belief")]
        hidden: HiddenArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write implicit-knowledge prompts for unanswerable turns as JSON lines.
    EmitPrompts {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "train")]
        split: Split,
        /// policy_model (pm) or knowledge_base (kb).
        #[arg(long)]
        method: AugmentMethod,
        #[arg(long)]
        examples: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge completions (JSON lines) into a dataset as implicit knowledge.
    MergeImplicit {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "train")]
        split: Split,
        #[arg(long)]
        completions: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a scripted-backend file that reproduces a split's gold turns.
    OracleScript {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
}

#[tokio::main]
async fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();

    match Cli::parse().command {
        Command::Serve { config, listen } => {
            let cfg = EngineConfig::load(&config).with_context(|| format!("loading config {}", config.display()))?;
            let engine = Engine::from_config(&cfg)?;
            let state = AppState::open(engine, &cfg.server.session_log)?;
            let addr = match listen {
                Some(a) => a,
                None => cfg.server.listen.parse().with_context(|| format!("bad listen address {}", cfg.server.listen))?,
            };
            let listener = tokio::net::TcpListener::bind(addr).await.with_context(|| format!("binding {addr}"))?;
            tracing::info!(%addr, "serving");
            axum::serve(listener, router(state))
                .with_graceful_shutdown(async {
                    let _ = tokio::signal::ctrl_c().await;
                })
                .await?;
        }
        Command::Replay { dataset, out, config, split, oracle } => {
            let run = tokio::task::spawn_blocking(move || tools::replay(&config, &dataset, split, oracle)).await??;
            tools::save_run(&run, &out)?;
            eprintln!("wrote {} dialogs to {}", run.dialogs.len(), out.display());
        }
        Command::Eval { run, dataset, mode, subset, split, db, json } => {
            let report = tools::eval(&run, &dataset, split, mode, subset, db.as_deref())?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                print!("{}", report.table());
            }
        }
        Command::Stats { dataset } => print!("{}", tools::stats(&dataset)?),
        Command::EmitTraining { dataset, split, task, regime, hidden, out } => {
            let task = match task {
                TaskArg::State => Task::StatePrediction,
                TaskArg::Response => Task::ResponseGeneration,
            };
            let hidden = match hidden {
                HiddenArg::PreviousBelief => HiddenTarget::PreviousBelief,
                HiddenArg::Skip => HiddenTarget::Skip,
            };
            let n = tools::emit_training(&dataset, split, task, regime, hidden, &out)?;
            eprintln!("wrote {n} pairs to {}", out.display());
        }
        Command::EmitPrompts { dataset, split, method, examples, out } => {
            let n = tools::emit_prompts(&dataset, split, method, &examples, &out)?;
            eprintln!("wrote {n} prompts to {}", out.display());
        }
        Command::MergeImplicit { dataset, split, completions, out } => {
            let n = tools::merge(&dataset, split, &completions, &out)?;
            eprintln!("merged {n} completions into {}", out.display());
        }
        Command::OracleScript { config, dataset, split, out } => {
            let n = tokio::task::spawn_blocking(move || tools::oracle_script(&config, &dataset, split, &out)).await??;
            eprintln!("wrote {n} scripted entries");
        }
    }
    Ok(())
}
