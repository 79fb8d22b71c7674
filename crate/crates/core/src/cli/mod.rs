//! Command-line front end.
//!
//! Exit codes: 0 success or pass, 1 failure, 2 configuration error.

pub mod config;
pub mod pipeline;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::Standardize;
use crate::sparsity::SparsityRule;
use crate::verify::{self, Suite, SuiteReport};
use config::{DatasetSpec, Depth, Method, PivotRuleName, RhsKind, RunConfig, SEED_ENV};
use pipeline::Command as RunCommand;

pub const EXIT_FAIL: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;

#[derive(Parser, Debug)]
#[command(
    name = "pcvecchia",
    version,
    about = "Partial Cholesky + Vecchia kernel preconditioners"
)]
pub struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build an approximation and report its cost and quality.
    Approximate {
        #[command(flatten)]
        run: RunArgs,
        /// Write the sparse factor here.
        #[arg(long)]
        factor_out: Option<PathBuf>,
    },
    /// Solve kernel systems with preconditioned conjugate gradient.
    Solve {
        #[command(flatten)]
        run: RunArgs,
        /// CSV of relative residuals per iteration.
        #[arg(long)]
        table: Option<PathBuf>,
    },
    /// Direct and stochastic log-determinant estimates.
    Logdet {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Run a seeded property battery.
    Verify {
        suite: SuiteName,
        /// Factor file for the `factor` suite.
        #[arg(long, required_if_eq("suite", "factor"))]
        factor: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Load a dataset once and cache it in binary form.
    Prepare {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run independent jobs from a JSON file concurrently.
    Batch {
        #[arg(long)]
        jobs: PathBuf,
        /// Directory for one record per job.
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SuiteName {
    Equivalence,
    Optimality,
    Bounds,
    Fps,
    Factor,
}

/// Flags mirroring [`RunConfig`]; each one overrides the config file.
#[derive(Args, Debug)]
struct RunArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Write the JSON record here instead of stdout.
    #[arg(long, short)]
    output: Option<PathBuf>,

    /// Numeric CSV with a header row.
    #[arg(long, conflicts_with = "cached")]
    csv: Option<PathBuf>,
    /// Dataset written by `prepare`.
    #[arg(long)]
    cached: Option<PathBuf>,
    /// Keep the first rows only.
    #[arg(long)]
    n_max: Option<usize>,
    /// Zero-based label column of the CSV.
    #[arg(long)]
    label_column: Option<usize>,
    /// full-file, subsample or none.
    #[arg(long, value_parser = parse_serde::<Standardize>)]
    standardize: Option<Standardize>,
    /// Synthetic dataset size.
    #[arg(long)]
    n: Option<usize>,
    /// Synthetic dimension.
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    clusters: Option<usize>,
    #[arg(long)]
    spread: Option<f64>,

    /// Ridge added to the kernel diagonal.
    #[arg(long, allow_hyphen_values = true)]
    mu: Option<f64>,
    /// pc+v0, pc+v1/4, pc+v1/3, pc+v:<q>, vecchia:<q>, frangella, diaz.
    #[arg(long, value_parser = parse_method)]
    method: Option<Method>,
    #[arg(long, value_enum)]
    pivots: Option<PivotRuleName>,
    /// nn or omp.
    #[arg(long, value_parser = parse_serde::<SparsityRule>)]
    sparsity: Option<SparsityRule>,
    /// Partial Cholesky rank (default floor(sqrt(n))).
    #[arg(long)]
    rank: Option<usize>,
    /// Candidate pool per row (default 10q).
    #[arg(long)]
    candidates: Option<usize>,

    #[arg(long, value_enum)]
    rhs: Option<RhsKind>,
    #[arg(long)]
    num_rhs: Option<usize>,
    /// Relative residual target (default 1e-3 for labels, 1e-4 otherwise).
    #[arg(long, allow_hyphen_values = true)]
    tol: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    /// Probe vectors; 0 gives the direct estimate only.
    #[arg(long, short = 't')]
    samples: Option<usize>,
    /// Comma-separated Krylov depths, e.g. `5,20,full`.
    #[arg(long, value_delimiter = ',', value_parser = parse_depth)]
    depths: Option<Vec<Depth>>,
    /// Defaults to the config file, then $PCVECCHIA_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
    /// Skip the condition number above this size.
    #[arg(long)]
    kappa_max_n: Option<usize>,
    /// Store the kernel matrix for solves up to this size.
    #[arg(long)]
    materialize_max_n: Option<usize>,
}

fn parse_serde<T: DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.replace('-', "_")))
        .map_err(|e| e.to_string())
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_depth(s: &str) -> std::result::Result<Depth, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| {
            Error::config(
                "seed",
                format!("{SEED_ENV}=`{v}` is not an unsigned integer"),
            )
        }),
        Err(_) => Ok(None),
    }
}

/// Reads a config file; also reports whether it set the seed.
pub fn read_config(path: &Path) -> Result<(RunConfig, bool)> {
    let text = std::fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let has_seed = value.get("seed").is_some();
    Ok((serde_json::from_value(value)?, has_seed))
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let (mut cfg, file_seed) = match &self.config {
            Some(p) => read_config(p)?,
            None => (RunConfig::default(), false),
        };

        if let Some(path) = &self.csv {
            cfg.dataset = DatasetSpec::Csv {
                path: path.clone(),
                n_max: None,
                label_column: None,
                standardize: Standardize::default(),
            };
        }
        if let Some(path) = &self.cached {
            cfg.dataset = DatasetSpec::Cached { path: path.clone() };
        }
        if let DatasetSpec::Csv {
            n_max,
            label_column,
            standardize,
            ..
        } = &mut cfg.dataset
        {
            set(n_max, self.n_max.map(Some));
            set(label_column, self.label_column.map(Some));
            set(standardize, self.standardize);
        } else if self.n_max.is_some() || self.label_column.is_some() || self.standardize.is_some()
        {
            return Err(Error::config(
                "dataset",
                "--n-max, --label-column and --standardize need a CSV dataset",
            ));
        }
        let synthetic_flags = self.n.is_some()
            || self.dim.is_some()
            || self.clusters.is_some()
            || self.spread.is_some();
        if synthetic_flags {
            if !matches!(cfg.dataset, DatasetSpec::Synthetic { .. }) {
                if self.csv.is_some() || self.cached.is_some() {
                    return Err(Error::config(
                        "dataset",
                        "synthetic flags conflict with a file dataset",
                    ));
                }
                cfg.dataset = DatasetSpec::default();
            }
            if let DatasetSpec::Synthetic {
                n,
                d,
                clusters,
                spread,
            } = &mut cfg.dataset
            {
                set(n, self.n);
                set(d, self.dim);
                set(clusters, self.clusters);
                set(spread, self.spread);
            }
        }

        set(&mut cfg.mu, self.mu);
        set(&mut cfg.method, self.method);
        set(&mut cfg.pivots, self.pivots);
        set(&mut cfg.sparsity, self.sparsity);
        set(&mut cfg.rank, self.rank.map(Some));
        set(&mut cfg.candidates, self.candidates.map(Some));
        set(&mut cfg.rhs, self.rhs);
        set(&mut cfg.num_rhs, self.num_rhs);
        set(&mut cfg.tol, self.tol.map(Some));
        set(&mut cfg.max_iter, self.max_iter);
        set(&mut cfg.samples, self.samples);
        set(&mut cfg.depths, self.depths.clone());
        set(&mut cfg.kappa_max_n, self.kappa_max_n);
        set(&mut cfg.materialize_max_n, self.materialize_max_n);
        cfg.seed = match (self.seed, file_seed) {
            (Some(s), _) => s,
            (None, true) => cfg.seed,
            (None, false) => env_seed()?.unwrap_or(0),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

/// Failure split by exit code.
enum Failure {
    Config(Error),
    Run(Error),
}

impl Failure {
    fn from_run(e: Error) -> Self {
        match e {
            e @ (Error::Config { .. }
            | Error::Parse { .. }
            | Error::EmptyDataset
            | Error::Format { .. }) => Failure::Config(e),
            e => Failure::Run(e),
        }
    }
}

fn emit<T: Serialize>(value: &T, output: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match output {
        Some(p) => std::fs::write(p, text + "\n")?,
        None => {
            let mut out = std::io::stdout().lock();
            writeln!(out, "{text}")?;
        }
    }
    Ok(())
}

fn print_report(rep: &SuiteReport) {
    for c in &rep.checks {
        eprintln!(
            "{} {:<32} worst {:.3e}  limit {:.3e}  ({} instances)",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.worst,
            c.limit,
            c.instances
        );
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobCommand {
    Approximate,
    Solve,
    Logdet,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Job {
    pub command: JobCommand,
    #[serde(default)]
    pub config: RunConfig,
}

impl From<&JobCommand> for RunCommand {
    fn from(c: &JobCommand) -> Self {
        match c {
            JobCommand::Approximate => RunCommand::Approximate,
            JobCommand::Solve => RunCommand::Solve,
            JobCommand::Logdet => RunCommand::Logdet,
        }
    }
}

fn run_command(cli: Cli) -> std::result::Result<bool, Failure> {
    if let Some(t) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| Failure::Config(Error::config("threads", e.to_string())))?;
    }
    let run = |command: RunCommand, args: &RunArgs, factor_out: Option<&PathBuf>| {
        let cfg = args.resolve().map_err(Failure::Config)?;
        let rec = pipeline::execute(command, &cfg, factor_out).map_err(Failure::from_run)?;
        emit(&rec, args.output.as_deref()).map_err(Failure::Run)?;
        Ok(rec)
    };
    match &cli.command {
        Command::Approximate {
            run: args,
            factor_out,
        } => {
            run(RunCommand::Approximate, args, factor_out.as_ref())?;
            Ok(true)
        }
        Command::Solve { run: args, table } => {
            let rec = run(RunCommand::Solve, args, None)?;
            if let (Some(path), Some(s)) = (table, &rec.solve) {
                pipeline::write_residual_table(path, s).map_err(Failure::Run)?;
            }
            Ok(true)
        }
        Command::Logdet { run: args } => {
            run(RunCommand::Logdet, args, None)?;
            Ok(true)
        }
        Command::Verify {
            suite,
            factor,
            seed,
            output,
        } => {
            let seed = match seed {
                Some(s) => *s,
                None => env_seed().map_err(Failure::Config)?.unwrap_or(0),
            };
            let suite = match suite {
                SuiteName::Equivalence => Suite::Equivalence,
                SuiteName::Optimality => Suite::Optimality,
                SuiteName::Bounds => Suite::Bounds,
                SuiteName::Fps => Suite::Fps,
                SuiteName::Factor => Suite::Factor(factor.clone().expect("required by clap")),
            };
            let rep = verify::run(&suite, seed);
            print_report(&rep);
            emit(&rep, output.as_deref()).map_err(Failure::Run)?;
            Ok(rep.passed)
        }
        Command::Prepare { run: args, out } => {
            let cfg = args.resolve().map_err(Failure::Config)?;
            let data = pipeline::load(&cfg.dataset, cfg.seed).map_err(Failure::from_run)?;
            crate::format::save_dataset(out, &data).map_err(Failure::Run)?;
            Ok(true)
        }
        Command::Batch { jobs, out_dir } => {
            let text = std::fs::read_to_string(jobs).map_err(|e| Failure::Config(e.into()))?;
            let jobs: Vec<Job> =
                serde_json::from_str(&text).map_err(|e| Failure::Config(e.into()))?;
            for j in &jobs {
                j.config.validate().map_err(Failure::Config)?;
            }
            std::fs::create_dir_all(out_dir).map_err(|e| Failure::Run(e.into()))?;
            let outcomes: Vec<bool> = jobs
                .par_iter()
                .enumerate()
                .map(|(k, job)| {
                    let path = out_dir.join(format!("job-{k:04}.json"));
                    match pipeline::execute((&job.command).into(), &job.config, None) {
                        Ok(rec) => emit(&rec, Some(&path)).is_ok(),
                        Err(e) => {
                            eprintln!("job {k}: {e}");
                            false
                        }
                    }
                })
                .collect();
            Ok(outcomes.iter().all(|&ok| ok))
        }
    }
}

/// Parses `args` and runs the selected command.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_CONFIG } else { 0 });
        }
    };
    match run_command(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_FAIL),
        Err(Failure::Config(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_FAIL)
        }
    }
}
