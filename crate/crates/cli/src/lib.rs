//! The `encdec` command-line tool.

pub mod commands;
pub mod config;
pub mod toytask;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use log::info;

pub use config::RunConfig;

/// Failure classes, each with its own exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad arguments or configuration.
    Usage(String),
    /// Missing or malformed input, checkpoint mismatch.
    Data(String),
    /// NaN or infinity during training, failed gradient check.
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 1,
            Self::Data(_) => 2,
            Self::Numeric(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Usage(m) => write!(f, "usage error: {m}"),
            Self::Data(m) => write!(f, "data error: {m}"),
            Self::Numeric(m) => write!(f, "numeric error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<rnn_encdec::Error> for CliError {
    fn from(e: rnn_encdec::Error) -> Self {
        use rnn_encdec::Error as E;
        match e {
            E::Parameter(_) => Self::Usage(e.to_string()),
            E::Numeric(_) => Self::Numeric(e.to_string()),
            _ => Self::Data(e.to_string()),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "encdec", version, about = "Train and apply an RNN encoder-decoder phrase model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every command.
#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// key = value configuration file
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override any config key; repeatable
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<String>,
    #[arg(long, value_name = "PATH")]
    pub input: Option<String>,
    #[arg(long, value_name = "PATH")]
    pub output: Option<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model on a bitext or phrase table
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        train_data: Option<String>,
        #[arg(long)]
        max_updates: Option<usize>,
        /// Loss log path (default: <checkpoint>.log)
        #[arg(long, value_name = "PATH")]
        log: Option<String>,
    },
    /// Print log p(target | source) for every pair of --input
    Score {
        #[command(flatten)]
        common: Common,
    },
    /// Sample targets for each source phrase in --input
    Sample {
        #[command(flatten)]
        common: Common,
    },
    /// Append the model score to every entry of a phrase table
    Rescore {
        #[command(flatten)]
        common: Common,
    },
    /// Write the source or target word embeddings
    ExportWords {
        #[command(flatten)]
        common: Common,
        /// src or tgt
        #[arg(long)]
        side: Option<String>,
    },
    /// Write the summary vector of each phrase in --input
    ExportPhrases {
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference check of the analytic gradient on a small random model
    GradCheck {
        #[command(flatten)]
        common: Common,
    },
    /// Generate a synthetic bitext
    GenToytask {
        #[command(flatten)]
        common: Common,
        /// copy, reverse or delayed-recall
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        pairs: Option<usize>,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Self::Train { common, .. }
            | Self::Score { common }
            | Self::Sample { common }
            | Self::Rescore { common }
            | Self::ExportWords { common, .. }
            | Self::ExportPhrases { common }
            | Self::GradCheck { common }
            | Self::GenToytask { common, .. } => common,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Train { .. } => "train",
            Self::Score { .. } => "score",
            Self::Sample { .. } => "sample",
            Self::Rescore { .. } => "rescore",
            Self::ExportWords { .. } => "export-words",
            Self::ExportPhrases { .. } => "export-phrases",
            Self::GradCheck { .. } => "grad-check",
            Self::GenToytask { .. } => "gen-toytask",
        }
    }

    /// Defaults, then the config file, then `--set`, then dedicated flags.
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let common = self.common();
        let mut cfg = RunConfig::default();
        if let Some(path) = &common.config {
            cfg.merge_file(path)?;
        }
        for pair in &common.set {
            cfg.set_pair(pair)?;
        }
        let mut flags: Vec<(&str, String)> = Vec::new();
        if let Some(s) = common.seed {
            flags.push(("seed", s.to_string()));
        }
        for (key, v) in [
            ("checkpoint", &common.checkpoint),
            ("input", &common.input),
            ("output", &common.output),
        ] {
            if let Some(v) = v {
                flags.push((key, v.clone()));
            }
        }
        match self {
            Self::Train { train_data, max_updates, log, .. } => {
                if let Some(v) = train_data {
                    flags.push(("train_data", v.clone()));
                }
                if let Some(v) = max_updates {
                    flags.push(("max_updates", v.to_string()));
                }
                if let Some(v) = log {
                    flags.push(("log", v.clone()));
                }
            }
            Self::ExportWords { side: Some(v), .. } => flags.push(("side", v.clone())),
            Self::GenToytask { task, pairs, .. } => {
                if let Some(v) = task {
                    flags.push(("task", v.clone()));
                }
                if let Some(v) = pairs {
                    flags.push(("pairs", v.to_string()));
                }
            }
            _ => {}
        }
        for (k, v) in flags {
            cfg.set(k, &v)?;
        }
        Ok(cfg)
    }
}

/// Parses `args` (program name first) and runs the command. Standard
/// output goes to `stdout` unless the command writes to `output`.
pub fn run_with<I, S>(args: I, stdout: &mut dyn std::io::Write) -> Result<(), CliError>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args)
        .map_err(|e| CliError::Usage(e.to_string().trim_end().to_string()))?;
    run(&cli, stdout)
}

pub fn run(cli: &Cli, stdout: &mut dyn std::io::Write) -> Result<(), CliError> {
    let cfg = cli.command.resolve()?;
    info!("{} with resolved configuration:", cli.command.name());
    for line in cfg.echo().lines() {
        info!("  {line}");
    }
    commands::dispatch(&cli.command, &cfg, stdout)
}
