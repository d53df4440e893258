use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod config;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("I/O error: {0}")]
    Io(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl From<dkit::error::Error> for CliError {
    fn from(e: dkit::error::Error) -> Self {
        use dkit::error::Error as E;
        match e {
            E::Config(_) | E::Dimension { .. } => CliError::Config(e.to_string()),
            E::Numerical(_) | E::Infeasible { .. } | E::RankDeficient { .. } | E::Generation(_) => {
                CliError::Numerical(e.to_string())
            }
            E::Io(_) | E::Format(_) | E::Json(_) => CliError::Io(e.to_string()),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "dkit", version, about = "Feasible-direction solvers and the Descent-Net toolkit")]
struct Cli {
    /// Worker threads (default: all cores). With 1 thread runs are bit-reproducible.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Directory that relative data paths are resolved against.
    #[arg(long, global = true, env = "DKIT_DATA_DIR")]
    data_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct ConfigArgs {
    /// Built-in profile the config file and overrides are layered on.
    #[arg(long, default_value = "qp-desk")]
    pub profile: String,
    /// TOML config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `section.key=value` override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, ValueEnum, PartialEq, Eq)]
pub enum AblationKind {
    LayersK,
    StepsS,
    StepsizeStrategy,
    PgmBaseline,
    SubproblemTrace,
    GammaDump,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a dataset container and its JSON sidecar.
    Gen {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve every instance of a dataset with the reference solver.
    Oracle {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a network and write a checkpoint plus JSONL history.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        dataset: PathBuf,
        /// Reference solutions, used for the relative error column of the history.
        #[arg(long)]
        oracle: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the checkpoint path with `.history.jsonl` appended.
        #[arg(long)]
        history: Option<PathBuf>,
        /// Continue from this checkpoint's epoch count.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        oracle: Option<PathBuf>,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
        #[arg(long, default_value_t = 512)]
        batch: usize,
    },
    /// Run one of the ablation studies.
    Ablate {
        #[arg(value_enum)]
        kind: AblationKind,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        train_data: PathBuf,
        #[arg(long)]
        test_data: PathBuf,
        #[arg(long)]
        train_oracle: Option<PathBuf>,
        #[arg(long)]
        test_oracle: Option<PathBuf>,
        /// Trained network for `gamma-dump` and `subproblem-trace`; trained on the spot if absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Also write the table rows as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

pub struct Ctx {
    pub data_dir: Option<PathBuf>,
}

impl Ctx {
    pub fn path(&self, p: &Path) -> PathBuf {
        match &self.data_dir {
            Some(dir) if p.is_relative() => dir.join(p),
            _ => p.to_path_buf(),
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    let ctx = Ctx { data_dir: cli.data_dir };
    match cli.command {
        Command::Gen { cfg, split, out } => commands::gen(&ctx, &cfg, split, &out),
        Command::Oracle { cfg, dataset, out } => commands::oracle(&ctx, &cfg, &dataset, &out),
        Command::Train { cfg, dataset, oracle, out, history, resume } => {
            commands::train(&ctx, &cfg, &dataset, oracle.as_deref(), &out, history.as_deref(), resume.as_deref())
        }
        Command::Eval { dataset, checkpoint, oracle, json, batch } => {
            commands::eval(&ctx, &dataset, &checkpoint, oracle.as_deref(), json.as_deref(), batch)
        }
        Command::Ablate { kind, cfg, train_data, test_data, train_oracle, test_oracle, checkpoint, json } => {
            commands::ablate(
                &ctx,
                kind,
                &cfg,
                commands::AblationInputs {
                    train_data: &train_data,
                    test_data: &test_data,
                    train_oracle: train_oracle.as_deref(),
                    test_oracle: test_oracle.as_deref(),
                    checkpoint: checkpoint.as_deref(),
                    json: json.as_deref(),
                },
            )
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(2),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
