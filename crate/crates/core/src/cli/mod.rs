//! Command-line front end: argument parsing, config files, thread setup.
//!
//! Every subcommand option can also come from a `key = value` file given
//! with `--config`; keys are long option names (`max-sweeps` or
//! `max_sweeps`), `true`/`false` toggle flags, and options given on the
//! command line win.

mod commands;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::datamodel::FoldScheme;
use crate::decode::Paradigm;
use crate::error::{Error, Result};
use crate::simulate::Preset;

pub use commands::{five_number_summary, run_bench, BenchRow};

/// Environment variable read when `--threads` is absent.
pub const THREADS_ENV: &str = "DECODE_THREADS";

const SUBCOMMANDS: [&str; 6] = ["simulate", "fit", "select", "decode", "evaluate", "bench"];

#[derive(Parser, Debug)]
#[command(name = "decode-cli", version, args_override_self = true, about = "Decode kinematics from spike counts and waveform moments")]
pub struct Cli {
    /// Worker threads; defaults to $DECODE_THREADS, else every core.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// `key = value` file of option defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset and its ground truth.
    Simulate(SimulateArgs),
    /// Fit a fixed list of equations and write the model file.
    Fit(FitArgs),
    /// Search for a low-risk model.
    Select(SelectArgs),
    /// Decode trials with a model file.
    Decode(DecodeArgs),
    /// Compare models by per-trial test MSE ratios.
    Evaluate(EvaluateArgs),
    /// Time leave-one-out inverses: Schur removal against direct inversion.
    Bench(BenchArgs),
}

#[derive(Args, Debug, Clone)]
pub struct SimulateArgs {
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "standard", value_parser = parse_preset)]
    pub preset: Preset,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub sessions: Option<usize>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub electrodes: Option<usize>,
    #[arg(long)]
    pub neurons: Option<usize>,
    #[arg(long, value_enum)]
    pub style: Option<StyleArg>,
    /// Give every electrode this lag.
    #[arg(long)]
    pub fixed_lag: Option<usize>,
    #[arg(long)]
    pub lag_min: Option<usize>,
    #[arg(long)]
    pub lag_max: Option<usize>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum StyleArg {
    Reach,
    Ar1,
}

/// Dataset location and fold layout.
#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// `rotating:<test>:<validate>` or `loo:<test>`.
    #[arg(long, default_value = "rotating:2:2", value_parser = parse_folds)]
    pub folds: FoldScheme,
    #[arg(long, default_value_t = crate::featurize::DEFAULT_MAX_LAG)]
    pub max_lag: usize,
    /// Offer the square root of the absolute value for waveform streams.
    #[arg(long)]
    pub sqrt_waveform_abs: bool,
}

/// How models are decoded.
#[derive(Args, Debug, Clone)]
pub struct DecodeOpts {
    #[arg(long, default_value = "bayes", value_parser = parse_paradigm)]
    pub paradigm: Paradigm,
    /// Start the Kalman filter at zero instead of the first true kinematics.
    #[arg(long)]
    pub zero_init: bool,
    /// Use expected rather than observed spike counts in waveform covariances.
    #[arg(long)]
    pub static_cov: bool,
    /// Autoregressive order of the state model (1 or 2).
    #[arg(long, default_value_t = 1)]
    pub state_order: usize,
}

#[derive(Args, Debug, Clone)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub decode: DecodeOpts,
    /// Equations such as `e0:count@3:sqrt`, separated by commas or spaces.
    #[arg(long)]
    pub equations: String,
    /// Training sessions; defaults to every non-test session.
    #[arg(long, value_delimiter = ',')]
    pub sessions: Option<Vec<usize>>,
    /// Output model file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Space {
    /// Staged search over counts and waveform moments.
    Joint,
    /// Stepwise search over spike counts.
    Counts,
    /// Every electrode's count at the uniform best lag; no search.
    CountsBasic,
}

#[derive(Args, Debug, Clone)]
pub struct SelectArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub decode: DecodeOpts,
    #[arg(long, value_enum, default_value = "joint")]
    pub space: Space,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Minimum relative risk improvement for accepting a move.
    #[arg(long, default_value_t = 0.0)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 10)]
    pub max_sweeps: usize,
    /// Cap on removals per prune.
    #[arg(long)]
    pub prune_passes: Option<usize>,
    /// `ascending` or `seeded`.
    #[arg(long, default_value = "ascending")]
    pub sweep_order: String,
    /// Scored candidates re-checked by a full refit.
    #[arg(long, default_value_t = 20)]
    pub audit_samples: usize,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct DecodeArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "bayes", value_parser = parse_paradigm)]
    pub paradigm: Paradigm,
    #[arg(long)]
    pub zero_init: bool,
    #[arg(long)]
    pub model: PathBuf,
    /// Sessions to decode; defaults to the test sessions.
    #[arg(long, value_delimiter = ',')]
    pub sessions: Option<Vec<usize>>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Paradigm for models without an `@ole`/`@bayes` suffix.
    #[arg(long, default_value = "bayes", value_parser = parse_paradigm)]
    pub paradigm: Paradigm,
    #[arg(long)]
    pub zero_init: bool,
    /// Model file, optionally suffixed `@ole` or `@bayes`; repeatable.
    #[arg(long = "model", required = true)]
    pub models: Vec<String>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "50,100,200,300,400,500")]
    pub sizes: Vec<usize>,
    /// Timed runs per size; the median is reported.
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    /// Left-out equations timed per run.
    #[arg(long, default_value_t = 24)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output CSV file.
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_preset(s: &str) -> std::result::Result<Preset, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_folds(s: &str) -> std::result::Result<FoldScheme, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_paradigm(s: &str) -> std::result::Result<Paradigm, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Reads a `key = value` config file into command-line tokens.
pub fn config_tokens(path: &Path) -> Result<Vec<OsString>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Format {
            file: path.to_path_buf(),
            line: i + 1,
            msg: format!("expected key = value, got {line:?}"),
        })?;
        let flag = format!("--{}", key.trim().replace('_', "-"));
        match value.trim() {
            "true" => out.push(flag.into()),
            "false" => {}
            v => {
                out.push(flag.into());
                out.push(v.into());
            }
        }
    }
    Ok(out)
}

/// Splices config-file options in right after the subcommand, so that
/// flags given later on the command line override them.
pub fn expand_config(argv: Vec<OsString>) -> Result<Vec<OsString>> {
    let mut config = None;
    let mut rest = Vec::with_capacity(argv.len());
    let mut it = argv.into_iter();
    while let Some(arg) = it.next() {
        let s = arg.to_string_lossy().into_owned();
        if s == "--config" {
            config = Some(PathBuf::from(
                it.next().ok_or_else(|| Error::Invalid("--config needs a file".into()))?,
            ));
        } else if let Some(v) = s.strip_prefix("--config=") {
            config = Some(PathBuf::from(v));
        } else {
            rest.push(arg);
        }
    }
    let Some(path) = config else { return Ok(rest) };
    let tokens = config_tokens(&path)?;
    let pos = rest
        .iter()
        .position(|a| SUBCOMMANDS.contains(&a.to_string_lossy().as_ref()))
        .ok_or_else(|| Error::Invalid("a subcommand is required with --config".into()))?;
    rest.splice(pos + 1..pos + 1, tokens);
    Ok(rest)
}

/// Thread count from the flag, then the environment.
pub fn thread_count(flag: Option<usize>) -> Result<Option<usize>> {
    if let Some(n) = flag {
        return Ok(Some(n));
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Invalid(format!("{THREADS_ENV}={v:?} is not a thread count"))),
        Err(_) => Ok(None),
    }
}

/// Runs the command line `argv` (program name first).
pub fn run(argv: Vec<OsString>) -> Result<()> {
    let argv = expand_config(argv)?;
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    if let Some(n) = thread_count(cli.threads)? {
        if n == 0 {
            return Err(Error::Invalid("--threads must be positive".into()));
        }
        // A second call in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::Simulate(a) => commands::simulate(&a),
        Command::Fit(a) => commands::fit(&a),
        Command::Select(a) => commands::select(&a),
        Command::Decode(a) => commands::decode(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Bench(a) => commands::bench(&a),
    }
}

/// Process entry point; returns the exit code.
pub fn main() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(std::env::args_os().collect()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn os(v: &[&str]) -> Vec<OsString> {
        v.iter().map(OsString::from).collect()
    }

    #[test]
    fn config_values_precede_command_line_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(&path, "# search knobs\nmax_sweeps = 3\nstatic-cov = true\nzero_init = false\nseed = 9\n").unwrap();
        let argv = os(&["decode-cli", "--config", path.to_str().unwrap(), "select", "--seed", "4"]);
        let expanded = expand_config(argv).unwrap();
        assert_eq!(
            expanded,
            os(&["decode-cli", "select", "--max-sweeps", "3", "--static-cov", "--seed", "9", "--seed", "4"])
        );
        let cli = Cli::try_parse_from(
            expanded
                .into_iter()
                .chain(os(&["--data", "d", "--out", "o"]))
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let Command::Select(a) = cli.command else { panic!() };
        assert_eq!(a.seed, 4);
        assert_eq!(a.max_sweeps, 3);
        assert!(a.decode.static_cov);
        assert!(!a.decode.zero_init);
    }

    #[test]
    fn malformed_config_lines_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.conf");
        std::fs::write(&path, "seed 9\n").unwrap();
        assert!(matches!(config_tokens(&path), Err(Error::Format { line: 1, .. })));
    }

    #[test]
    fn thread_flag_wins_over_environment() {
        assert_eq!(thread_count(Some(3)).unwrap(), Some(3));
    }

    #[test]
    fn select_defaults() {
        let cli = Cli::try_parse_from(os(&["decode-cli", "select", "--data", "d", "--out", "o"])).unwrap();
        let Command::Select(a) = cli.command else { panic!() };
        assert_eq!(a.space, Space::Joint);
        assert_eq!(a.decode.paradigm, Paradigm::Bayes);
        assert_eq!(a.data.folds, FoldScheme::Rotating { test: 2, validate: 2 });
        assert_eq!(a.data.max_lag, 12);
        let cli = Cli::try_parse_from(os(&[
            "decode-cli", "select", "--data", "d", "--out", "o", "--space", "counts-basic", "--paradigm", "ole",
        ]))
        .unwrap();
        let Command::Select(a) = cli.command else { panic!() };
        assert_eq!(a.space, Space::CountsBasic);
        assert_eq!(a.decode.paradigm, Paradigm::Ole);
    }
}
