//! Library side of the `apivr` command-line tool: argument definitions,
//! the run configuration file and one function per subcommand.
//!
//! Exit statuses:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 1 | I/O or other failure |
//! | 2 | invalid configuration or arguments |
//! | 3 | invalid or inconsistent data |
//! | 4 | numerical failure, including a failed gradient check |

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::{cmd_eval, cmd_gen, cmd_gradcheck, cmd_gradcheck_with, cmd_retrieve, cmd_train, TrainSummary};
pub use config::RunConfigFile;

pub const EXIT_OTHER: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_NUMERICAL: u8 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{}: {message}", path.display())]
    Config { path: PathBuf, message: String },

    #[error("missing {0}: pass it as a flag or set it under [paths]")]
    MissingPath(&'static str),

    #[error(transparent)]
    Core(#[from] apivr::Error),

    #[error("gradient check failed for {0}")]
    GradCheck(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl From<apivr::training::TrainAbort> for CliError {
    fn from(abort: apivr::training::TrainAbort) -> Self {
        CliError::Core(abort.error)
    }
}

impl CliError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> u8 {
        use apivr::Error as E;
        match self {
            CliError::Config { .. } | CliError::MissingPath(_) => EXIT_CONFIG,
            CliError::GradCheck(_) => EXIT_NUMERICAL,
            CliError::Io { .. } => EXIT_OTHER,
            CliError::Core(e) => match e {
                E::InvalidConfig(_) | E::BadTruncation { .. } => EXIT_CONFIG,
                E::NonFinite(_) | E::NonFiniteLoss(_) | E::SingularGram { .. } => EXIT_NUMERICAL,
                E::Io { .. } => EXIT_OTHER,
                E::DimMismatch { .. }
                | E::ZeroNormRow { .. }
                | E::NoNegativeAvailable { .. }
                | E::InsufficientDiversity { .. }
                | E::EmptyGallery
                | E::NoRelevantItems { .. }
                | E::LabelOutOfRange { .. }
                | E::Format { .. } => EXIT_DATA,
            },
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "apivr", version, about = "Activity image-to-video retrieval experiments")]
pub struct Cli {
    /// Worker threads for parallel sections [default: all cores].
    #[arg(long, global = true, env = "APIVR_THREADS")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset and print its manifest path.
    Gen(GenArgs),
    /// Train a model; writes a checkpoint, the training log and a summary.
    Train(TrainArgs),
    /// Print mAP@K of a checkpoint on the test split.
    Eval(EvalArgs),
    /// Finite-difference check of every (loss, parameter group) gradient.
    Gradcheck(GradcheckArgs),
    /// Rank the gallery for every query and write the rankings as JSONL.
    Retrieve(RetrieveArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory [default: paths.out].
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Default, Args)]
pub struct AblationFlags {
    #[arg(long)]
    pub wo_tl: bool,
    #[arg(long)]
    pub wo_al: bool,
    #[arg(long)]
    pub wo_cl: bool,
    #[arg(long)]
    pub wo_ga: bool,
    #[arg(long)]
    pub wo_gmil: bool,
    #[arg(long)]
    pub wo_graph: bool,
}

impl AblationFlags {
    /// Turns on every flag that was given; flags never turn a switch off.
    pub fn apply(&self, a: &mut apivr::losses::Ablations) {
        a.wo_tl |= self.wo_tl;
        a.wo_al |= self.wo_al;
        a.wo_cl |= self.wo_cl;
        a.wo_ga |= self.wo_ga;
        a.wo_gmil |= self.wo_gmil;
        a.wo_graph |= self.wo_graph;
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset manifest [default: paths.data].
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory [default: paths.out].
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub outer_iterations: Option<usize>,
    /// Loss preset: main or supplementary. Overrides alpha and beta.
    #[arg(long)]
    pub preset: Option<String>,
    #[command(flatten)]
    pub ablations: AblationFlags,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint file [default: paths.checkpoint].
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Cut-offs, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "10,20,50,100")]
    pub k: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub ablations: AblationFlags,
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output JSONL file.
    #[arg(long)]
    pub out: PathBuf,
    /// Gallery entries listed per query.
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    #[arg(long, value_parser = ["train", "test"], default_value = "test")]
    pub split: String,
}

/// Parses `args` (including the program name), runs the command and
/// returns the exit status. Normal output goes to `out`, diagnostics to
/// `err`.
pub fn run<I, T>(args: I, out: &mut (dyn Write + Send), err: &mut (dyn Write + Send)) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            if e.use_stderr() {
                let _ = write!(err, "{}", e.render());
                return EXIT_CONFIG;
            }
            let _ = write!(out, "{}", e.render());
            return 0;
        }
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        builder = builder.num_threads(n);
    }
    let pool = match builder.build() {
        Ok(pool) => pool,
        Err(e) => {
            let _ = writeln!(err, "error: cannot start worker threads: {e}");
            return EXIT_OTHER;
        }
    };
    match pool.install(|| dispatch(cli.command, out, err)) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command, out: &mut (dyn Write + Send), err: &mut (dyn Write + Send)) -> Result<(), CliError> {
    let write_out = |r: std::io::Result<()>| r.map_err(|e| CliError::io("<stdout>", e));
    match command {
        Command::Gen(a) => {
            let mut cfg = RunConfigFile::load_or_default(a.config.as_deref())?;
            if let Some(seed) = a.seed {
                cfg.synthetic.seed = seed;
            }
            let dir = a.out.or(cfg.paths.out.clone()).ok_or(CliError::MissingPath("--out"))?;
            let manifest = cmd_gen(&cfg, &dir)?;
            write_out(writeln!(out, "{}", manifest.display()))
        }
        Command::Train(a) => {
            let mut cfg = RunConfigFile::load_or_default(a.config.as_deref())?;
            if let Some(seed) = a.seed {
                cfg.train.seed = seed;
            }
            if let Some(n) = a.outer_iterations {
                cfg.train.outer_iterations = n;
            }
            if let Some(p) = &a.preset {
                let preset = apivr::training::LossPreset::parse(p)?;
                (cfg.train.alpha, cfg.train.beta) = preset.coefficients();
                cfg.train.preset = preset;
            }
            a.ablations.apply(&mut cfg.train.ablations);
            let data = a.data.or(cfg.paths.data.clone()).ok_or(CliError::MissingPath("--data"))?;
            let dir = a.out.or(cfg.paths.out.clone()).ok_or(CliError::MissingPath("--out"))?;
            cmd_train(&cfg, &data, &dir, out, err).map(|_| ())
        }
        Command::Eval(a) => {
            let cfg = RunConfigFile::load_or_default(a.config.as_deref())?;
            let ckpt = a.checkpoint.or(cfg.paths.checkpoint).ok_or(CliError::MissingPath("--checkpoint"))?;
            let data = a.data.or(cfg.paths.data).ok_or(CliError::MissingPath("--data"))?;
            let table = cmd_eval(&ckpt, &data, &a.k, err)?;
            for s in table {
                write_out(writeln!(out, "mAP@{}\t{:.6}", s.requested_k, s.map))?;
            }
            Ok(())
        }
        Command::Gradcheck(a) => {
            let mut cfg = RunConfigFile::load_or_default(a.config.as_deref())?;
            if let Some(seed) = a.seed {
                cfg.train.seed = seed;
                cfg.synthetic.seed = seed;
            }
            a.ablations.apply(&mut cfg.train.ablations);
            cmd_gradcheck(&cfg, out).map(|_| ())
        }
        Command::Retrieve(a) => {
            let cfg = RunConfigFile::load_or_default(a.config.as_deref())?;
            let ckpt = a.checkpoint.or(cfg.paths.checkpoint).ok_or(CliError::MissingPath("--checkpoint"))?;
            let data = a.data.or(cfg.paths.data).ok_or(CliError::MissingPath("--data"))?;
            let split = if a.split == "train" {
                apivr::data::Split::Train
            } else {
                apivr::data::Split::Test
            };
            let map = cmd_retrieve(&ckpt, &data, split, a.k, &a.out)?;
            write_out(writeln!(out, "mAP@{}\t{:.6}\t{}", a.k, map, a.out.display()))
        }
    }
}
