//! Command-line front end.
//!
//! ```text
//! spg verify   [--max-t N] [--seed N]
//! spg baseline [--config PATH] [--seed N]
//! spg retrain  [--config PATH] [--seed N]
//! spg nas      [--config PATH] [--seed N]
//! spg report   [RUN_DIR ...]
//! ```
//!
//! Global flags: `--out DIR` (default `$SPG_OUT`, else `runs`) and `--quiet`.
//! Training runs land in `<out>/<command>/seed-<N>/`, verification output in
//! `<out>/verify/` and reports in `<out>/report/`.
//!
//! Exit status: 0 success, 1 a verification suite failed, 2 usage or config
//! error, 3 missing file or io error, 4 malformed file, 5 numeric failure.

pub mod config;
pub mod report;
pub mod run;
pub mod verify;

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

pub use config::{Pipeline, RunConfig, RunPlan};
pub use report::{collect, Report, Stat};
pub use run::{execute, seed_dir, RunSummary};
pub use verify::{run_verify, VerifyOptions, VerifyReport};

use crate::error::{Result, SpgError};
use crate::trajectory::StepFn;

#[derive(Debug, Parser)]
#[command(name = "spg", version, about = "Sequential policy gradient training laboratory")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Output root
    #[arg(long, global = true, env = "SPG_OUT", default_value = "runs")]
    pub out: PathBuf,
    /// Only print results
    #[arg(long, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the property suites
    Verify {
        /// Largest replica depth to enumerate (1..=8)
        #[arg(long, default_value_t = 3)]
        max_t: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the reference network with cross-entropy
    Baseline(TrainArgs),
    /// Train a baseline, then retrain it with a dropout chain
    Retrain(TrainArgs),
    /// Train a baseline, then retrain it with a depth chain
    Nas(TrainArgs),
    /// Aggregate finished runs
    Report {
        /// Run directories or roots containing them (default: the output root)
        runs: Vec<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run this seed only, overriding the file's seed list
    #[arg(long)]
    pub seed: Option<u64>,
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| SpgError::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| SpgError::io(path, e))
}

/// Verification with an explicit transition rule, so tests can feed in a
/// broken one. Returns the process exit status.
pub fn verify_with(opts: &VerifyOptions, out: &Path, stdout: &mut dyn Write) -> Result<i32> {
    let report = run_verify(opts)?;
    let table = report.table();
    let divergences = report.divergence_report();
    let dir = out.join("verify");
    write_file(&dir.join("verify.txt"), &format!("{table}\n{divergences}"))?;
    write_file(&dir.join("enumeration.jsonl"), &report.records_jsonl()?)?;
    let _ = write!(stdout, "{table}");
    let first = divergences.lines().take(4).collect::<Vec<_>>().join("\n");
    let _ = writeln!(stdout, "\n{first}\n  ... full list in {}", dir.join("verify.txt").display());
    Ok(if report.passed() { 0 } else { 1 })
}

fn train(pipeline: Pipeline, args: &TrainArgs, out: &Path, log: &mut dyn Write, stdout: &mut dyn Write) -> Result<i32> {
    let (cfg, source) = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| SpgError::io(path, e))?;
            (RunConfig::parse(&text)?, text)
        }
        None => (RunConfig::default(), String::new()),
    };
    let cache = out.join("cache");
    for seed in cfg.seeds(args.seed) {
        let plan = cfg.plan(pipeline, seed, &source)?;
        let dir = seed_dir(out, pipeline, seed);
        let s = execute(&plan, pipeline, &dir, Some(&cache), log)?;
        let spg = s
            .spg
            .as_ref()
            .map_or(String::new(), |x| format!(" spg {:.4}", x.accuracy));
        let _ = writeln!(
            stdout,
            "{} {} seed {}: baseline {:.4}{} -> {}",
            s.command,
            s.task,
            seed,
            s.baseline.accuracy,
            spg,
            dir.display()
        );
    }
    Ok(0)
}

fn dispatch(cli: &Cli, step: StepFn, stdout: &mut dyn Write) -> Result<i32> {
    let mut sink = std::io::sink();
    let mut progress = std::io::stderr();
    let log: &mut dyn Write = if cli.quiet { &mut sink } else { &mut progress };
    match &cli.command {
        Command::Verify { max_t, seed } => {
            let opts = VerifyOptions {
                max_t: *max_t,
                seed: *seed,
                step,
            };
            verify_with(&opts, &cli.out, stdout)
        }
        Command::Baseline(a) => train(Pipeline::Baseline, a, &cli.out, log, stdout),
        Command::Retrain(a) => train(Pipeline::Retrain, a, &cli.out, log, stdout),
        Command::Nas(a) => train(Pipeline::Nas, a, &cli.out, log, stdout),
        Command::Report { runs } => {
            let roots = if runs.is_empty() { vec![cli.out.clone()] } else { runs.clone() };
            let report = collect(&roots)?;
            let dir = cli.out.join("report");
            write_file(&dir.join("report.txt"), &report.table())?;
            write_file(&dir.join("report.json"), &report.to_json()?)?;
            let _ = write!(stdout, "{}", report.table());
            Ok(0)
        }
    }
}

/// Parse `args` (program name first) and run. Returns the exit status.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    run_with_step(args, crate::trajectory::step_observed, stdout, stderr)
}

/// [`run`] with a replaceable transition rule for `verify`.
pub fn run_with_step<I, T>(args: I, step: StepFn, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(stdout, "{e}");
                    0
                }
                _ => {
                    let _ = write!(stderr, "{e}");
                    2
                }
            };
        }
    };
    match dispatch(&cli, step, stdout) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(stderr, "error[{}]: {e}", e.category());
            e.exit_code()
        }
    }
}
