use std::io::{BufRead, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use feedloop_core::classify::{PromptTemplate, SelectionStrategy};
use feedloop_core::goldset::Split;
use feedloop_core::lifecycle::KeyBasis;
use feedloop_core::MessageKey;
use feedloop_service::api::{router, ApiState};
use feedloop_service::engine::{
    checkpoint_path, parse_gold_rows, ExperimentRequest, PromoteRequest, PromptChange, PromptMode, RolloutRequest,
    TrainRequest,
};
use feedloop_service::log::read_log;
use feedloop_service::state::Checkpoint;
use feedloop_service::{llm, AppState, Config, Engine, ServiceError, SystemClock};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "feedloop", version, about = "Telegram channel monitoring with a feedback-driven labeling loop")]
struct Cli {
    /// JSON config file; FEEDLOOP_SECTION__KEY variables override it.
    #[arg(long, global = true, env = "FEEDLOOP_CONFIG")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Validation,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Validation => Split::Validation,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Gated,
    Hotfix,
}

#[derive(Clone, Copy, ValueEnum)]
enum BasisArg {
    Message,
    User,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest a Telegram JSON export for one channel.
    Ingest {
        #[arg(long)]
        channel: String,
        /// Export file, `-` for stdin.
        #[arg(long)]
        file: PathBuf,
    },
    /// Seed the gold set from labeled JSONL rows.
    ImportGold {
        #[arg(long)]
        file: PathBuf,
    },
    /// Run the HTTP API.
    Serve {
        #[arg(long)]
        bind: Option<String>,
    },
    /// Train a reference model on a snapshot (a fresh one by default).
    Train {
        #[arg(long)]
        snapshot: Option<String>,
    },
    /// Evaluate a version on a snapshot split.
    Evaluate {
        #[arg(long)]
        version: String,
        #[arg(long)]
        snapshot: Option<String>,
        #[arg(long, value_enum, default_value = "validation")]
        split: SplitArg,
    },
    /// Gate a candidate and deploy it if it passes.
    Promote {
        #[arg(long)]
        version: String,
        #[arg(long)]
        actor: String,
        #[arg(long)]
        rationale: String,
        #[arg(long)]
        snapshot: Option<String>,
        /// Stop after the gate; the version stays VALIDATED.
        #[arg(long)]
        gate_only: bool,
    },
    /// Compare recent messages with the deployed model's vocabulary.
    DriftCheck,
    /// Freeze the live gold set.
    Snapshot,
    /// Few-shot grid search over k and selection strategy.
    Experiment {
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,4")]
        k: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "RANDOM_SEEDED,TOKEN_OVERLAP,CLASS_BALANCED")]
        strategies: Vec<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Template text, or @path to read it from a file.
        #[arg(long)]
        template: String,
        #[arg(long)]
        snapshot: Option<String>,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// A/B rollout control.
    Rollout {
        #[command(subcommand)]
        action: RolloutAction,
    },
    /// Register a prompt change.
    Prompt {
        /// Template text, or @path.
        #[arg(long)]
        template: String,
        #[arg(long, default_value_t = 0)]
        k_shot: usize,
        #[arg(long, default_value = "RANDOM_SEEDED")]
        strategy: String,
        #[arg(long, default_value_t = 0)]
        selection_seed: u64,
        #[arg(long, value_enum)]
        mode: ModeArg,
        #[arg(long)]
        actor: String,
        #[arg(long)]
        rationale: String,
    },
    /// Write a snapshot as JSONL.
    Export {
        #[arg(long)]
        snapshot: String,
        #[arg(long, value_enum)]
        split: Option<SplitArg>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Replay the log from scratch and check it against the checkpoint.
    ReplayVerify {
        /// Defaults to storage.log_path.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Print the split of each `channel:id` key read from stdin.
    Split,
    /// Print the state digest.
    Digest,
}

#[derive(Subcommand)]
enum RolloutAction {
    Start {
        #[arg(long)]
        b: String,
        #[arg(long)]
        a: Option<String>,
        #[arg(long)]
        fraction: f64,
        #[arg(long, value_enum, default_value = "message")]
        basis: BasisArg,
        #[arg(long)]
        review_days: Option<u32>,
        #[arg(long)]
        actor: String,
        #[arg(long)]
        rationale: String,
    },
    Update {
        #[arg(long)]
        fraction: f64,
        #[arg(long)]
        actor: String,
    },
    End {
        #[arg(long)]
        actor: String,
        #[arg(long)]
        rationale: String,
    },
    Status,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Service(#[from] ServiceError),
    #[error(transparent)]
    Config(#[from] feedloop_service::config::ConfigError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Usage(String),
}

fn print_json<T: Serialize>(value: &T) -> Result<(), CliError> {
    let s = serde_json::to_string_pretty(value).map_err(|e| CliError::Usage(e.to_string()))?;
    println!("{s}");
    Ok(())
}

fn read_input(path: &Path) -> Result<Vec<u8>, CliError> {
    if path.as_os_str() == "-" {
        let mut buf = Vec::new();
        std::io::stdin().read_to_end(&mut buf)?;
        Ok(buf)
    } else {
        Ok(std::fs::read(path)?)
    }
}

/// Literal text, or the contents of the file named after a leading `@`.
fn text_arg(arg: &str) -> Result<String, CliError> {
    match arg.strip_prefix('@') {
        Some(path) => Ok(std::fs::read_to_string(path)?),
        None => Ok(arg.to_string()),
    }
}

fn strategy(s: &str) -> Result<SelectionStrategy, CliError> {
    let name = s.trim().to_uppercase().replace('-', "_");
    SelectionStrategy::ALL
        .into_iter()
        .find(|st| st.name() == name)
        .ok_or_else(|| CliError::Usage(format!("unknown strategy {s}")))
}

fn open_engine(config: Config) -> Result<Engine, CliError> {
    let client = llm::from_config(&config.llm_client).map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(Engine::open(config, Arc::new(SystemClock), client)?)
}

fn replay_verify(config: &Config, log: Option<PathBuf>) -> Result<bool, CliError> {
    let path = log
        .or_else(|| config.storage.log_path.clone())
        .ok_or_else(|| CliError::Usage("no log: pass --log or set storage.log_path".into()))?;
    let records = read_log(&path).map_err(ServiceError::from)?;
    let state = AppState::replay(config.lifecycle.split_ratios, &records)?;
    let checkpoint = match Checkpoint::read(&checkpoint_path(&path)) {
        None => "absent".to_string(),
        Some(cp) => {
            let n = cp.next_seq() as usize;
            if n > records.len() {
                "ahead of log".to_string()
            } else if AppState::replay(config.lifecycle.split_ratios, &records[..n])?.digest() == cp.digest() {
                "match".to_string()
            } else {
                "mismatch".to_string()
            }
        }
    };
    let ok = checkpoint != "mismatch";
    print_json(&serde_json::json!({
        "records": records.len(),
        "last_seq": state.last_seq,
        "digest": state.digest(),
        "checkpoint": checkpoint,
        "ok": ok,
    }))?;
    Ok(ok)
}

fn run(cli: Cli) -> Result<bool, CliError> {
    let config = Config::from_env(cli.config.as_deref())?;
    match cli.command {
        Command::Serve { bind } => {
            serve(config, bind)?;
        }
        Command::ReplayVerify { log } => return replay_verify(&config, log),
        Command::Split => {
            let ratios = config.lifecycle.split_ratios;
            let stdin = std::io::stdin();
            let mut out = std::io::BufWriter::new(std::io::stdout().lock());
            for line in stdin.lock().lines() {
                let line = line?;
                let line = line.trim();
                if line.is_empty() {
                    continue;
                }
                let key: MessageKey = line.parse().map_err(|_| CliError::Usage(format!("bad key {line:?}")))?;
                writeln!(out, "{key}\t{}", ratios.split_of(&key).as_str())?;
            }
            out.flush()?;
        }
        command => {
            let engine = open_engine(config)?;
            run_engine(&engine, command)?;
            engine.sync()?;
        }
    }
    Ok(true)
}

fn run_engine(engine: &Engine, command: Command) -> Result<(), CliError> {
    match command {
        Command::Ingest { channel, file } => print_json(&engine.ingest_export(&channel, &read_input(&file)?)?),
        Command::ImportGold { file } => {
            let rows = parse_gold_rows(&String::from_utf8_lossy(&read_input(&file)?))?;
            print_json(&serde_json::json!({ "added": engine.import_gold(&rows)? }))
        }
        Command::Train { snapshot } => {
            print_json(&engine.train(&TrainRequest { snapshot_id: snapshot, actor: Some("cli".into()), rationale: None })?)
        }
        Command::Evaluate { version, snapshot, split } => {
            print_json(&engine.evaluate(&version, snapshot.as_deref(), split.into())?)
        }
        Command::Promote { version, actor, rationale, snapshot, gate_only } => {
            let req = PromoteRequest { snapshot_id: snapshot, actor, rationale, deploy: !gate_only };
            print_json(&engine.promote(&version, &req)?)
        }
        Command::DriftCheck => print_json(&engine.drift_check()?),
        Command::Snapshot => print_json(&engine.snapshot()?),
        Command::Experiment { k, strategies, seed, template, snapshot, out } => {
            let req = ExperimentRequest {
                k_values: k,
                strategies: strategies.iter().map(|s| strategy(s)).collect::<Result<_, _>>()?,
                seed,
                template_text: text_arg(&template)?,
                snapshot_id: snapshot,
            };
            let report = engine.experiment(&req)?.to_json();
            match out {
                Some(path) => std::fs::write(path, report)?,
                None => println!("{report}"),
            }
            Ok(())
        }
        Command::Rollout { action } => match action {
            RolloutAction::Start { b, a, fraction, basis, review_days, actor, rationale } => {
                let req = RolloutRequest {
                    variant_a: a,
                    variant_b: b,
                    fraction_b: fraction,
                    key_basis: match basis {
                        BasisArg::Message => KeyBasis::Message,
                        BasisArg::User => KeyBasis::User,
                    },
                    review_days,
                    actor,
                    rationale,
                };
                print_json(&engine.start_rollout(&req)?)
            }
            RolloutAction::Update { fraction, actor } => print_json(&engine.update_rollout(fraction, &actor)?),
            RolloutAction::End { actor, rationale } => {
                engine.end_rollout(&actor, &rationale)?;
                print_json(&engine.rollout())
            }
            RolloutAction::Status => print_json(&engine.rollout()),
        },
        Command::Prompt { template, k_shot, strategy: st, selection_seed, mode, actor, rationale } => {
            let change = PromptChange {
                template: PromptTemplate {
                    template_text: text_arg(&template)?,
                    k_shot,
                    selection_strategy: strategy(&st)?,
                    selection_seed,
                },
                mode: match mode {
                    ModeArg::Gated => PromptMode::Gated,
                    ModeArg::Hotfix => PromptMode::Hotfix,
                },
                actor,
                rationale,
                snapshot_id: None,
            };
            print_json(&engine.apply_prompt_change(&change)?)
        }
        Command::Export { snapshot, split, out } => {
            let split = split.map(Split::from);
            let n = match out {
                Some(path) => {
                    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
                    let n = engine.export(&snapshot, split, &mut w)?;
                    w.flush()?;
                    n
                }
                None => engine.export(&snapshot, split, &mut std::io::stdout().lock())?,
            };
            eprintln!("exported {n} examples");
            Ok(())
        }
        Command::Digest => print_json(&serde_json::json!({ "digest": engine.digest(), "last_seq": engine.last_seq() })),
        Command::Serve { .. } | Command::ReplayVerify { .. } | Command::Split => unreachable!("handled without an engine"),
    }
}

fn serve(config: Config, bind: Option<String>) -> Result<(), CliError> {
    let bind = bind.unwrap_or_else(|| config.server.bind.clone());
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(async move {
        let state = ApiState::pending(config.server.bearer_token.clone());
        let listener = tokio::net::TcpListener::bind(&bind).await?;
        tracing::info!(%bind, "listening; replaying log");
        let replay_state = state.clone();
        let replay = tokio::task::spawn_blocking(move || open_engine(config).map(|e| replay_state.set_engine(Arc::new(e))));
        let server = axum::serve(listener, router(state)).with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        });
        let server = tokio::spawn(async move { server.await });
        match replay.await {
            Ok(Ok(())) => tracing::info!("ready"),
            Ok(Err(e)) => return Err(e),
            Err(e) => return Err(CliError::Usage(e.to_string())),
        }
        server.await.map_err(|e| CliError::Usage(e.to_string()))??;
        Ok(())
    })
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_env("FEEDLOOP_LOG").unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
