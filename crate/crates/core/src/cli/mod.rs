//! Command-line entry point. Every command resolves a [`RunConfig`] (JSON
//! file, then flag overrides), runs, and leaves `config.json` plus
//! `manifest.json` in the output directory.

mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::model::Variant;

pub use config::{InputChecksum, Manifest, Precision, RunConfig};

#[derive(Debug, Parser)]
#[command(
    name = "mftnet",
    version,
    about = "Multi-scale convolution + transformer EEG motor-imagery decoder"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory of `.etf` trial files.
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub variant: Option<Variant>,
    #[arg(long, global = true)]
    pub subject: Option<u32>,
    #[arg(long, global = true)]
    pub session: Option<u32>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    /// Floating-point width: 32 or 64.
    #[arg(long, global = true, value_parser = parse_precision)]
    pub precision: Option<Precision>,
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    /// JSON electrode names, used to label exported rows.
    #[arg(long, global = true)]
    pub montage: Option<PathBuf>,
    /// Suppress the config echo and tables on stdout (files are unaffected).
    #[arg(long, short, global = true)]
    pub quiet: bool,
}

fn parse_precision(s: &str) -> std::result::Result<Precision, String> {
    s.parse::<u8>()
        .map_err(|e| e.to_string())
        .and_then(Precision::try_from)
}

/// Comma-separated deletion fractions.
#[derive(Debug, Clone, PartialEq)]
pub struct Fractions(pub Vec<f64>);

fn parse_fractions(s: &str) -> std::result::Result<Fractions, String> {
    s.split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<std::result::Result<_, _>>()
        .map(Fractions)
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Train one subject on its training session and score its later sessions.
    Train,
    /// Train and score every subject; writes the per-session table and summary.
    Protocol,
    /// Parameter counts of the four variants and, with --data, their protocol accuracy.
    Ablate,
    /// Fine-tune, then export Gradient×Input channel scores and class maps.
    Interpret {
        #[arg(long)]
        finetune_epochs: Option<usize>,
    },
    /// Confidence while zeroing the most or least important electrodes.
    DeletionTest {
        /// Comma-separated, ascending from 0.
        #[arg(long, value_parser = parse_fractions)]
        fractions: Option<Fractions>,
        #[arg(long)]
        finetune_epochs: Option<usize>,
    },
    /// Per-layer parameter breakdown.
    Params,
    /// Finite-difference check of every layer and of the reduced model.
    Gradcheck,
    /// Generate planted-signal trial files.
    Synth {
        #[arg(long)]
        subjects: Option<u32>,
        #[arg(long)]
        sessions: Option<u32>,
        #[arg(long)]
        n_per_class: Option<usize>,
        #[arg(long)]
        channels: Option<usize>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        snr: Option<f64>,
    },
    /// Single-trial inference timing (informational).
    Latency {
        #[arg(long)]
        trials: Option<usize>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Protocol => "protocol",
            Command::Ablate => "ablate",
            Command::Interpret { .. } => "interpret",
            Command::DeletionTest { .. } => "deletion-test",
            Command::Params => "params",
            Command::Gradcheck => "gradcheck",
            Command::Synth { .. } => "synth",
            Command::Latency { .. } => "latency",
        }
    }
}

/// File values, then flag overrides, then seed propagation and validation.
pub fn resolve(common: &Common, command: &Command) -> Result<RunConfig> {
    let mut c = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(v) = common.seed {
        c.seed = v;
    }
    if let Some(v) = common.precision {
        c.precision = v;
    }
    if let Some(v) = &common.data {
        c.data = Some(v.clone());
    }
    if let Some(v) = &common.out {
        c.out = v.clone();
    }
    if let Some(v) = &common.checkpoint {
        c.checkpoint = Some(v.clone());
    }
    if let Some(v) = &common.montage {
        c.montage = Some(v.clone());
    }
    if let Some(v) = common.variant {
        c.model.variant = v;
    }
    if let Some(v) = common.subject {
        c.subject = Some(v);
    }
    if let Some(v) = common.session {
        c.session = Some(v);
    }
    if let Some(v) = common.epochs {
        c.train.epochs = v;
    }
    match command {
        Command::Interpret {
            finetune_epochs: Some(v),
        } => c.interpret.finetune_epochs = *v,
        Command::DeletionTest {
            fractions,
            finetune_epochs,
        } => {
            if let Some(v) = fractions {
                c.interpret.fractions = v.0.clone();
            }
            if let Some(v) = finetune_epochs {
                c.interpret.finetune_epochs = *v;
            }
        }
        Command::Synth {
            subjects,
            sessions,
            n_per_class,
            channels,
            samples,
            snr,
        } => {
            let s = &mut c.synth;
            s.subjects = subjects.unwrap_or(s.subjects);
            s.sessions = sessions.unwrap_or(s.sessions);
            s.n_per_class = n_per_class.unwrap_or(s.n_per_class);
            s.channels = channels.unwrap_or(s.channels);
            s.samples = samples.unwrap_or(s.samples);
            s.snr = snr.unwrap_or(s.snr);
        }
        Command::Latency { trials: Some(v) } => c.latency.trials = *v,
        _ => {}
    }
    c.finish()
}

/// Worker count: available cores, capped by `MFTNET_THREADS`.
pub fn worker_threads() -> Result<usize> {
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var("MFTNET_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n.min(cores)),
            _ => Err(Error::Config(format!(
                "MFTNET_THREADS must be a positive integer, got {v:?}"
            ))),
        },
        Err(_) => Ok(cores),
    }
}

/// Parses `args` (program name first) and runs. Returns the process exit
/// code: 0 on success, 1 on a domain error, 2 on a usage error.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let argv: Vec<String> = argv
        .iter()
        .map(|a| a.to_string_lossy().into_owned())
        .collect();
    match run(&cli, argv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn run(cli: &Cli, argv: Vec<String>) -> Result<()> {
    let cfg = resolve(&cli.common, &cli.command)?;
    match cfg.precision {
        Precision::F32 => commands::dispatch::<f32>(&cli.command, cfg, argv, cli.common.quiet),
        Precision::F64 => commands::dispatch::<f64>(&cli.command, cfg, argv, cli.common.quiet),
    }
}
