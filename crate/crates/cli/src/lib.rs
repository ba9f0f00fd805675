//! Command-line front end. [`run`] parses arguments, runs one subcommand
//! and maps the outcome to a process exit code.
//!
//! Progress goes to stderr as `sherlock: event=NAME key=value ...` lines;
//! results meant for the user go to stdout.

use std::ffi::OsString;
use std::fmt::Display;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use sherlock::config::Preset;
use thiserror::Error;

mod commands;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Environment variable capping worker threads.
pub const THREADS_VAR: &str = "SHERLOCK_THREADS";

pub mod exit {
    pub const OK: i32 = 0;
    pub const INVALID: i32 = 1;
    pub const IO: i32 = 2;
    pub const NUMERICAL: i32 = 3;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] sherlock::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use sherlock::Error as E;
        match self {
            CliError::Usage(_) => exit::INVALID,
            CliError::Core(E::InvalidArgument(_) | E::InvalidState(_)) => exit::INVALID,
            CliError::Core(E::Io { .. } | E::Format(_)) => exit::IO,
            CliError::Core(E::Numerical(_)) => exit::NUMERICAL,
        }
    }
}

pub(crate) type CliResult<T> = std::result::Result<T, CliError>;

/// One log line on stderr.
pub(crate) fn log(event: &str, fields: &[(&str, &dyn Display)]) {
    let mut line = format!("sherlock: event={event}");
    for (k, v) in fields {
        let v = v.to_string();
        if v.is_empty() || v.contains(char::is_whitespace) {
            line.push_str(&format!(" {k}={v:?}"));
        } else {
            line.push_str(&format!(" {k}={v}"));
        }
    }
    eprintln!("{line}");
}

#[derive(Debug, Parser)]
#[command(name = "sherlock", version, about = "Writer identification from handwriting page images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub(crate) struct ConfigArgs {
    /// Run configuration (TOML). Defaults to config.toml beside the input
    /// checkpoint when there is one.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Default table the configuration is layered on.
    #[arg(long, default_value = "desk", value_parser = parse_preset)]
    preset: Preset,
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    Preset::parse(s).ok_or_else(|| format!("unknown preset {s:?} (desk, paper)"))
}

#[derive(Debug, Clone, Args)]
pub(crate) struct CorpusArg {
    /// Corpus directory; falls back to `corpus` in the configuration.
    #[arg(long)]
    corpus: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    GenCorpus {
        #[arg(long, default_value_t = 10)]
        writers: usize,
        #[arg(long, default_value_t = 20)]
        pages: usize,
        #[arg(long, default_value_t = 0.10)]
        damage_mean: f64,
        #[arg(long, default_value_t = 0.10)]
        forgery_frac: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write energy maps and denoised pages for a corpus.
    Preprocess {
        #[arg(long = "in")]
        input: PathBuf,
        /// Checkpoint holding the operator.
        #[arg(long)]
        operator: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Pre-train the encoder, heads and operator.
    Pretrain {
        #[command(flatten)]
        corpus: CorpusArg,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Resume even if the checkpoint was written under another config.
        #[arg(long)]
        force: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Fit the linear probe on frozen features.
    Finetune {
        #[command(flatten)]
        corpus: CorpusArg,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Score the clean test split.
    Evaluate {
        #[command(flatten)]
        corpus: CorpusArg,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        probe: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Score the test split under fresh damage or forgeries.
    Sweep {
        #[command(flatten)]
        corpus: CorpusArg,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        probe: PathBuf,
        /// damage or forgery
        #[arg(long)]
        kind: String,
        /// Comma-separated levels; defaults to the configured ones.
        #[arg(long, value_delimiter = ',')]
        levels: Option<Vec<f64>>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train and score each module configuration over several seeds.
    Ablate {
        #[command(flatten)]
        corpus: CorpusArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Repeat every case with the transformer encoder.
        #[arg(long)]
        extractors: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Compare full-path gradients with central differences.
    GradCheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 1e-6)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Write page embeddings as CSV.
    ExportEmbeddings {
        #[command(flatten)]
        corpus: CorpusArg,
        #[arg(long)]
        ckpt: PathBuf,
        /// pretrain, finetune or test
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn thread_count() -> CliResult<usize> {
    match std::env::var(THREADS_VAR) {
        Err(_) => Ok(0),
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| CliError::Usage(format!("{THREADS_VAR} must be a non-negative integer, got {v:?}"))),
    }
}

fn dispatch(command: Command) -> CliResult<i32> {
    use commands as c;
    match command {
        Command::GenCorpus {
            writers,
            pages,
            damage_mean,
            forgery_frac,
            seed,
            height,
            width,
            out,
        } => {
            let config = sherlock::corpus::CorpusConfig {
                writers,
                pages_per_writer: pages,
                damage_mean,
                forgery_frac,
                seed,
                height,
                width,
                ..Default::default()
            };
            c::gen_corpus(&config, &out)
        }
        Command::Preprocess {
            input,
            operator,
            out,
            cfg,
        } => c::preprocess(&input, &operator, &out, &cfg),
        Command::Pretrain {
            corpus,
            out,
            resume,
            force,
            cfg,
        } => c::pretrain(&corpus, &out, resume.as_deref(), force, &cfg),
        Command::Finetune { corpus, ckpt, out, cfg } => c::finetune(&corpus, &ckpt, &out, &cfg),
        Command::Evaluate {
            corpus,
            ckpt,
            probe,
            out,
            cfg,
        } => c::evaluate(&corpus, &ckpt, &probe, &out, &cfg),
        Command::Sweep {
            corpus,
            ckpt,
            probe,
            kind,
            levels,
            out,
            cfg,
        } => c::sweep(&corpus, &ckpt, &probe, &kind, levels, &out, &cfg),
        Command::Ablate {
            corpus,
            out,
            seeds,
            extractors,
            cfg,
        } => c::ablate(&corpus, &out, &seeds, extractors, &cfg),
        Command::GradCheck { seed, step, tolerance } => c::grad_check(seed, step, tolerance),
        Command::ExportEmbeddings {
            corpus,
            ckpt,
            split,
            out,
            cfg,
        } => c::export_embeddings(&corpus, &ckpt, &split, &out, &cfg),
    }
}

/// Runs one command line (program name first) and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { exit::INVALID } else { exit::OK };
            let _ = e.print();
            return code;
        }
    };
    let outcome = thread_count().and_then(|n| {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
        pool.install(|| dispatch(cli.command))
    });
    match outcome {
        Ok(code) => code,
        Err(e) => {
            let code = e.exit_code();
            log("error", &[("code", &code), ("message", &e)]);
            code
        }
    }
}
