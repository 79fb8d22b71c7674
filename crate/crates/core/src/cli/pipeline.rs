//! The work behind each subcommand, independent of argument parsing.

use std::path::PathBuf;
use std::time::Instant;

use serde::Serialize;

use super::config::{
    DatasetSpec, Derived, Method, PivotRuleName, RhsKind, RunConfig, SCHEMA_VERSION,
};
use crate::comparators::LowRankShift;
use crate::error::{Error, Result};
use crate::factor::{PartialCholeskyFactor, Preconditioner, VecchiaFactor};
use crate::format::{load_dataset, save_factor};
use crate::kaporin::{kappa_eigen_oracle, kappa_from_factor};
use crate::kernels::{
    kernel_response_vectors, load_csv, synthetic_clusters, Dataset, KernelOracle, KernelSpec,
    LoadOptions,
};
use crate::linalg::{logdet_spd, DenseSym};
use crate::oracle::{
    dense_matvec, materialize, CountingOracle, DiagonalCache, EntryOracle, PivotOrder,
};
use crate::partial_cholesky::{choose_pivots, PivotChooser};
use crate::solvers::{logdet_depth_sweep, pcg, PcgOptions, Termination};
use crate::sparsity::{choose_pattern, SparsityChooser};
use crate::vecchia::build_hybrid_from_partial;

/// Comparator `log kappa` needs a dense eigendecomposition of the
/// approximation; beyond this size it is skipped.
const LOW_RANK_KAPPA_MAX_N: usize = 400;

pub fn load(spec: &DatasetSpec, seed: u64) -> Result<Dataset> {
    match spec {
        DatasetSpec::Synthetic {
            n,
            d,
            clusters,
            spread,
        } => Ok(synthetic_clusters(*n, *d, *clusters, *spread, seed)),
        DatasetSpec::Csv {
            path,
            n_max,
            label_column,
            standardize,
        } => load_csv(
            path,
            &LoadOptions {
                n_max: *n_max,
                label_column: *label_column,
                standardize: *standardize,
            },
        ),
        DatasetSpec::Cached { path } => load_dataset(path),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Stages<T> {
    pub pivots: T,
    pub pattern: T,
    pub factor: T,
    pub total: T,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct KappaSummary {
    pub log_kappa: f64,
    pub infinite: bool,
    pub rank: usize,
}

pub struct Approximation {
    pub preconditioner: Box<dyn Preconditioner>,
    /// Present for the sparse factor methods.
    pub factor: Option<VecchiaFactor>,
    pub derived: Derived,
    pub lookups: Stages<u64>,
    pub seconds: Stages<f64>,
}

fn pivot_chooser(rule: PivotRuleName, n: usize, seed: u64) -> PivotChooser {
    match rule {
        PivotRuleName::Rpc => PivotChooser::rpc(seed),
        PivotRuleName::Sds => PivotChooser::sds(seed),
        PivotRuleName::Cpc => PivotChooser::cpc(seed),
        PivotRuleName::Fps => PivotChooser::fps(seed),
        PivotRuleName::Adaptive => PivotChooser::adaptive_search(),
        PivotRuleName::Identity => PivotChooser::fixed(PivotOrder::identity(n)),
    }
}

pub fn approximate(cfg: &RunConfig, data: &Dataset) -> Result<Approximation> {
    let n = data.n();
    let derived = cfg.derive(n)?;
    let start = Instant::now();
    // Comparators factor the kernel without its ridge.
    let ridge = if cfg.method.is_low_rank_shift() {
        0.0
    } else {
        cfg.mu
    };
    let kernel = KernelOracle::new(data, KernelSpec::rbf(ridge)?);
    let oracle = DiagonalCache::new(CountingOracle::new(&kernel));

    let partial = match cfg.method {
        Method::Vecchia(_) => PartialCholeskyFactor::empty(PivotOrder::identity(n)),
        _ => choose_pivots(&oracle, &pivot_chooser(cfg.pivots, n, cfg.seed), derived.r).1,
    };
    let pivot_lookups = oracle.lookup_count();
    let t_pivots = start.elapsed().as_secs_f64();

    let (preconditioner, factor, pattern_lookups, t_pattern): (Box<dyn Preconditioner>, _, _, _) =
        match cfg.method {
            Method::Frangella => (
                Box::new(LowRankShift::filled(&partial, cfg.mu)?),
                None,
                0,
                0.0,
            ),
            Method::Diaz => (
                Box::new(LowRankShift::shifted(&partial, cfg.mu)?),
                None,
                0,
                0.0,
            ),
            Method::PcV(_) | Method::Vecchia(_) => {
                let chooser = SparsityChooser {
                    rule: cfg.sparsity,
                    q: derived.q,
                    c: derived.c,
                };
                let t0 = Instant::now();
                let pattern = choose_pattern(&oracle, &partial, &chooser);
                let pattern_lookups = oracle.lookup_count() - pivot_lookups;
                let t_pattern = t0.elapsed().as_secs_f64();
                let f = build_hybrid_from_partial(&oracle, &partial, &pattern);
                (Box::new(f.clone()), Some(f), pattern_lookups, t_pattern)
            }
        };
    let total = oracle.lookup_count();
    let t_total = start.elapsed().as_secs_f64();
    Ok(Approximation {
        preconditioner,
        factor,
        derived: Derived {
            r: partial.rank(),
            ..derived
        },
        lookups: Stages {
            pivots: pivot_lookups,
            pattern: pattern_lookups,
            factor: total - pivot_lookups - pattern_lookups,
            total,
        },
        seconds: Stages {
            pivots: t_pivots,
            pattern: t_pattern,
            factor: (t_total - t_pivots - t_pattern).max(0.0),
            total: t_total,
        },
    })
}

/// `A v` for the regularized kernel, from a stored copy when it fits.
pub enum KernelOperator {
    Stored(DenseSym),
    OnDemand(KernelOracle),
}

impl KernelOperator {
    pub fn new(cfg: &RunConfig, data: &Dataset) -> Result<Self> {
        let oracle = KernelOracle::new(data, KernelSpec::rbf(cfg.mu)?);
        Ok(if data.n() <= cfg.materialize_max_n {
            KernelOperator::Stored(materialize(&oracle))
        } else {
            KernelOperator::OnDemand(oracle)
        })
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        match self {
            KernelOperator::Stored(a) => a.matvec(v),
            KernelOperator::OnDemand(o) => dense_matvec(o, v),
        }
    }

    pub fn dense(&self) -> DenseSym {
        match self {
            KernelOperator::Stored(a) => a.clone(),
            KernelOperator::OnDemand(o) => materialize(o),
        }
    }

    pub fn oracle(&self) -> &dyn EntryOracle {
        match self {
            KernelOperator::Stored(a) => a,
            KernelOperator::OnDemand(o) => o,
        }
    }
}

pub fn kappa(
    cfg: &RunConfig,
    data: &Dataset,
    op: &KernelOperator,
    approx: &Approximation,
) -> Option<KappaSummary> {
    let n = data.n();
    if n > cfg.kappa_max_n {
        return None;
    }
    let report = match &approx.factor {
        Some(f) => kappa_from_factor(op.oracle(), f),
        None if n <= LOW_RANK_KAPPA_MAX_N => {
            let pre = &approx.preconditioner;
            let cols: Vec<Vec<f64>> = (0..n)
                .map(|j| {
                    let mut e = vec![0.0; n];
                    e[j] = 1.0;
                    pre.apply(&e)
                })
                .collect();
            let ahat = DenseSym::symmetrize(n, &cols.concat());
            kappa_eigen_oracle(&op.dense(), &ahat)
        }
        None => return None,
    };
    Some(KappaSummary {
        log_kappa: report.log_kappa,
        infinite: report.infinite,
        rank: report.rank,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RhsResult {
    pub index: usize,
    pub iterations: usize,
    pub termination: Termination,
    pub final_relative_residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SolveRecord {
    pub rhs: RhsKind,
    pub tol: f64,
    pub results: Vec<RhsResult>,
    /// Entry `t` counts the systems solved within `t` iterations.
    pub solved_within: Vec<usize>,
    #[serde(skip)]
    pub residual_table: Vec<(usize, usize, f64)>,
}

pub fn right_hand_sides(cfg: &RunConfig, data: &Dataset) -> Result<Vec<Vec<f64>>> {
    match cfg.rhs {
        RhsKind::Labels => data
            .labels()
            .map(|l| vec![l.to_vec()])
            .ok_or_else(|| Error::config("rhs", "dataset has no labels")),
        RhsKind::KernelVectors => Ok(kernel_response_vectors(data, cfg.num_rhs, cfg.seed)),
    }
}

pub fn solve(
    cfg: &RunConfig,
    op: &KernelOperator,
    pre: &dyn Preconditioner,
    rhs: &[Vec<f64>],
) -> Result<SolveRecord> {
    let opts = PcgOptions {
        tol: cfg.tolerance(),
        max_iter: cfg.max_iter,
        ..PcgOptions::default()
    };
    let mut results = Vec::with_capacity(rhs.len());
    let mut table = Vec::new();
    for (k, b) in rhs.iter().enumerate() {
        let trace = pcg(|v: &[f64]| op.matvec(v), pre, b, &opts).map_err(|e| match e {
            Error::Breakdown { iteration, reason } => Error::Breakdown {
                iteration,
                reason: format!("right-hand side {k}: {reason}"),
            },
            other => other,
        })?;
        let rel = trace.relative_residuals();
        table.extend(rel.iter().enumerate().map(|(t, &r)| (k, t, r)));
        results.push(RhsResult {
            index: k,
            iterations: trace.iterations,
            termination: trace.termination,
            final_relative_residual: *rel.last().unwrap_or(&0.0),
        });
    }
    let horizon = results.iter().map(|r| r.iterations).max().unwrap_or(0);
    let solved_within = (0..=horizon)
        .map(|t| {
            results
                .iter()
                .filter(|r| r.termination != Termination::MaxIterations && r.iterations <= t)
                .count()
        })
        .collect();
    Ok(SolveRecord {
        rhs: cfg.rhs,
        tol: opts.tol,
        results,
        solved_within,
        residual_table: table,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DepthResult {
    pub m: usize,
    pub estimate: f64,
    pub correction: f64,
    pub std_error: f64,
    /// `|estimate - log det A| / n`.
    pub normalized_error: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogdetRecord {
    pub samples: usize,
    pub logdet_direct: f64,
    pub logdet_exact: Option<f64>,
    pub direct_normalized_error: Option<f64>,
    pub depths: Vec<DepthResult>,
}

pub fn logdet(
    cfg: &RunConfig,
    op: &KernelOperator,
    pre: &dyn Preconditioner,
    n: usize,
) -> Result<LogdetRecord> {
    let direct = pre.logdet()?;
    let exact = if n <= cfg.kappa_max_n {
        Some(logdet_spd(&op.dense())?)
    } else {
        None
    };
    let err = |v: f64| exact.map(|e| (v - e).abs() / n as f64);
    let mut depths = Vec::new();
    if cfg.samples > 0 {
        let ms: Vec<usize> = cfg.depths.iter().map(|d| d.resolve(n)).collect();
        let sweep = logdet_depth_sweep(|v: &[f64]| op.matvec(v), pre, cfg.samples, &ms, cfg.seed)?;
        depths = sweep
            .into_iter()
            .map(|e| DepthResult {
                m: e.m,
                estimate: e.estimate,
                correction: e.correction,
                std_error: e.std_error,
                normalized_error: err(e.estimate),
            })
            .collect();
    }
    Ok(LogdetRecord {
        samples: cfg.samples,
        logdet_direct: direct,
        logdet_exact: exact,
        direct_normalized_error: err(direct),
        depths,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DatasetSummary {
    pub n: usize,
    pub d: usize,
    pub source: String,
}

/// One JSON record per run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunRecord {
    pub schema_version: u32,
    pub command: String,
    pub config: RunConfig,
    pub dataset: DatasetSummary,
    pub derived: Derived,
    pub lookup_count: u64,
    pub lookups: Stages<u64>,
    pub seconds: Stages<f64>,
    pub kappa: Option<KappaSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub factor_path: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clamped_rows: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub solve: Option<SolveRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub logdet: Option<LogdetRecord>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Approximate,
    Solve,
    Logdet,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Approximate => "approximate",
            Command::Solve => "solve",
            Command::Logdet => "logdet",
        }
    }
}

/// Loads the data, builds the approximation and runs `command`.
pub fn execute(
    command: Command,
    cfg: &RunConfig,
    factor_out: Option<&PathBuf>,
) -> Result<RunRecord> {
    cfg.validate()?;
    let data = load(&cfg.dataset, cfg.seed)?;
    let approx = approximate(cfg, &data)?;
    if let Some(path) = factor_out {
        let f = approx.factor.as_ref().ok_or_else(|| {
            Error::config(
                "method",
                format!("{} has no sparse factor to write", cfg.method),
            )
        })?;
        save_factor(path, f)?;
    }
    let op = KernelOperator::new(cfg, &data)?;
    let kappa = kappa(cfg, &data, &op, &approx);
    let pre = approx.preconditioner.as_ref();
    let solve = match command {
        Command::Solve => Some(solve(cfg, &op, pre, &right_hand_sides(cfg, &data)?)?),
        _ => None,
    };
    let logdet = match command {
        Command::Logdet => Some(logdet(cfg, &op, pre, data.n())?),
        _ => None,
    };
    Ok(RunRecord {
        schema_version: SCHEMA_VERSION,
        command: command.name().to_string(),
        config: cfg.clone(),
        dataset: DatasetSummary {
            n: data.n(),
            d: data.d(),
            source: data.provenance.source.clone(),
        },
        derived: approx.derived,
        lookup_count: approx.lookups.total,
        lookups: approx.lookups,
        seconds: approx.seconds,
        kappa,
        factor_path: factor_out.cloned(),
        clamped_rows: approx.factor.as_ref().map(|f| f.clamped_rows()),
        solve,
        logdet,
    })
}

pub fn write_residual_table(path: &std::path::Path, rec: &SolveRecord) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["rhs", "iteration", "relative_residual"])?;
    for (k, t, r) in &rec.residual_table {
        w.write_record([k.to_string(), t.to_string(), format!("{r:e}")])?;
    }
    w.flush()?;
    Ok(())
}
