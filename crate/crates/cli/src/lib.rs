//! Command-line entry points: train, eval, bench, play and replay.

pub mod server;

use std::ffi::OsString;
use std::io::Write;
use std::net::TcpListener;
use std::path::{Path, PathBuf};

use actor_reasoner::environment::ScenarioKind;
use actor_reasoner::evaluation::{bench_retrieval, evaluate_to, write_bench_csv, EvalOutput};
use actor_reasoner::memory::{load_store, save_store, MemoryStore};
use actor_reasoner::model::EpisodeOutcome;
use actor_reasoner::reasoner::BackendKind;
use actor_reasoner::runtime::{DecisionMode, RunConfig, Trajectory};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Runtime(#[from] actor_reasoner::runtime::RuntimeError),
    #[error(transparent)]
    Memory(#[from] actor_reasoner::memory::MemoryError),
    #[error(transparent)]
    Server(#[from] server::ServerError),
    #[error("{path}: {source}")]
    File { path: PathBuf, source: std::io::Error },
    #[error("config {path}: {source}")]
    Config { path: PathBuf, source: serde_json::Error },
    #[error("{0}")]
    Usage(String),
}

#[derive(Debug, Parser)]
#[command(name = "actor-reasoner", version, about = "Fast/slow AV interaction agent with a retrieval memory")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Drive episodes with the Reasoner and store curated memories.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Memory file to write.
        #[arg(long, default_value = "memories.jsonl")]
        out: PathBuf,
    },
    /// Evaluate a memory store and write the per-episode CSV.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        memories: PathBuf,
        /// Metrics CSV; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Directory for one trajectory CSV per episode.
        #[arg(long)]
        trajectories: Option<PathBuf>,
        /// Add heading, eHMI, style and intention columns to trajectories.
        #[arg(long)]
        annotate: bool,
    },
    /// Time partitioned against pooled retrieval on synthetic stores.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "1000,10000,30000")]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 1000)]
        queries: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Benchmark CSV; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve a live episode in which a WebSocket client drives the first HV.
    Play {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        memories: PathBuf,
        #[arg(long, default_value_t = 8765)]
        port: u16,
    },
    /// Stream a recorded trajectory to a WebSocket client.
    Replay {
        trajectory: PathBuf,
        #[arg(long, default_value_t = 8765)]
        port: u16,
        #[arg(long, default_value_t = 1.0)]
        speed: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScenarioArg {
    Intersection,
    Roundabout,
    Merging,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum ModeArg {
    ActorReasoner,
    ReasonerOnly,
    BaselinePidm,
    BaselineGame,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendArg {
    Heuristic,
    Remote,
}

/// Run settings shared by the episode commands. Flags override `--config`.
#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// JSON file with RunConfig keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub scenario: Option<ScenarioArg>,
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long = "n-hv", value_parser = clap::value_parser!(u8).range(1..=3))]
    pub n_hv: Option<u8>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub backend: Option<BackendArg>,
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub no_partition: bool,
    #[arg(long)]
    pub no_two_layer: bool,
    #[arg(long)]
    pub no_instructions: bool,
}

impl RunArgs {
    pub fn to_config(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|source| CliError::File {
                    path: path.clone(),
                    source,
                })?;
                serde_json::from_str(&text).map_err(|source| CliError::Config {
                    path: path.clone(),
                    source,
                })?
            }
            None => RunConfig::default(),
        };
        if let Some(s) = self.scenario {
            cfg.scenario = match s {
                ScenarioArg::Intersection => ScenarioKind::Intersection,
                ScenarioArg::Roundabout => ScenarioKind::Roundabout,
                ScenarioArg::Merging => ScenarioKind::Merging,
            };
        }
        if let Some(n) = self.episodes {
            cfg.episodes = n;
        }
        if let Some(n) = self.n_hv {
            cfg.n_hv = n as usize;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(b) = self.backend {
            cfg.backend.kind = match b {
                BackendArg::Heuristic => BackendKind::Heuristic,
                BackendArg::Remote => BackendKind::Remote,
            };
        }
        if let Some(e) = &self.endpoint {
            cfg.backend.endpoint = Some(e.clone());
        }
        if let Some(m) = &self.model {
            cfg.backend.model = Some(m.clone());
        }
        if let Some(m) = self.mode {
            cfg.mode = match m {
                ModeArg::ActorReasoner => DecisionMode::ActorReasoner,
                ModeArg::ReasonerOnly => DecisionMode::ReasonerOnly,
                ModeArg::BaselinePidm => DecisionMode::BaselinePidm,
                ModeArg::BaselineGame => DecisionMode::BaselineGame,
            };
        }
        cfg.use_partition &= !self.no_partition;
        cfg.use_two_layer &= !self.no_two_layer;
        cfg.use_instructions &= !self.no_instructions;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn load(path: &Path) -> Result<MemoryStore, CliError> {
    Ok(load_store(path)?)
}

fn write_text(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(path) => std::fs::write(path, text).map_err(|source| CliError::File {
            path: path.to_path_buf(),
            source,
        }),
        None => {
            print!("{text}");
            std::io::stdout().flush().ok();
            Ok(())
        }
    }
}

fn bind(port: u16) -> Result<TcpListener, CliError> {
    let listener = TcpListener::bind(("127.0.0.1", port))
        .map_err(|e| CliError::Server(server::ServerError::Io(e)))?;
    let addr = listener.local_addr().map_err(|e| CliError::Server(server::ServerError::Io(e)))?;
    eprintln!("listening on ws://{addr}");
    Ok(listener)
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { run, out } => {
            let cfg = run.to_config()?;
            let store = actor_reasoner::runtime::train(&cfg)?;
            save_store(&store, &out)?;
            let sizes: Vec<String> = store.blocks().iter().map(|b| format!("{}={}", b.style, b.len())).collect();
            eprintln!("wrote {} memories to {} ({})", store.len(), out.display(), sizes.join(", "));
        }
        Command::Eval { run, memories, out, trajectories, annotate } => {
            let cfg = run.to_config()?;
            let store = load(&memories)?;
            let report = evaluate_to(&cfg, &store, &EvalOutput { csv: None, trajectories, annotated: annotate })?;
            write_text(out.as_deref(), &report.to_csv()?)?;
            eprintln!(
                "success {:.3} collision {:.3} deadlock {:.3} dangerous {:.3} mean_v {:.2}",
                report.success_rate,
                report.collision_rate,
                report.rate(EpisodeOutcome::Deadlock),
                report.dangerous_rate,
                report.mean_v
            );
        }
        Command::Bench { sizes, queries, seed, out } => {
            if sizes.iter().any(|&n| n < 1000) {
                return Err(CliError::Usage("bench sizes must be at least 1000".into()));
            }
            if queries == 0 {
                return Err(CliError::Usage("bench needs at least one query".into()));
            }
            let rows = bench_retrieval(&sizes, queries, seed);
            let mut buf = Vec::new();
            write_bench_csv(&rows, &mut buf)?;
            write_text(out.as_deref(), &String::from_utf8_lossy(&buf))?;
        }
        Command::Play { run, memories, port } => {
            let cfg = run.to_config()?;
            let store = load(&memories)?;
            let listener = bind(port)?;
            let result = server::serve_session(&cfg, &store, listener, 0)?;
            eprintln!("episode finished: {}", result.outcome);
        }
        Command::Replay { trajectory, port, speed } => {
            if !(speed.is_finite() && speed > 0.0) {
                return Err(CliError::Usage("--speed must be positive".into()));
            }
            let text = std::fs::read_to_string(&trajectory).map_err(|source| CliError::File {
                path: trajectory.clone(),
                source,
            })?;
            let frames = server::replay_frames(&Trajectory::from_csv(&text)?);
            let listener = bind(port)?;
            let sent = server::serve_replay(&frames, listener, speed)?;
            eprintln!("streamed {sent} frames");
        }
    }
    Ok(())
}

/// Parses `argv` and runs the command. Returns the process exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            e.print().ok();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
