//! Seeded property batteries behind `pcvecchia verify`.
//!
//! Every check reports the worst value seen and the limit it is held to;
//! a check passes when `worst <= limit`.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::Result;
use crate::factor::VecchiaFactor;
use crate::format::{load_factor_raw, RawFactor};
use crate::kaporin::{kappa_eigen_oracle, kappa_from_factor};
use crate::linalg::{cholesky, cholesky_solve, dot, logdet_spd, DenseSym};
use crate::oracle::{PivotOrder, SparsityPattern};
use crate::partial_cholesky::{choose_pivots, verify_fps_ratio, PivotChooser};
use crate::solvers::{direct_solve, pcg, PcgOptions};
use crate::sparsity::{choose_pattern, SparsityChooser};
use crate::vecchia::{build_hybrid, build_vecchia, check_equivalence};

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Equivalence,
    Optimality,
    Bounds,
    Fps,
    /// Structural invariants of a factor file.
    Factor(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub worst: f64,
    pub limit: f64,
    pub instances: usize,
}

impl CheckResult {
    fn new(name: &str, worst: f64, limit: f64, instances: usize) -> Self {
        CheckResult {
            name: name.to_string(),
            // NaN fails
            passed: worst <= limit,
            worst,
            limit,
            instances,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub seed: u64,
    pub checks: Vec<CheckResult>,
    pub passed: bool,
}

impl SuiteReport {
    fn new(suite: Suite, seed: u64, checks: Vec<CheckResult>) -> Self {
        let passed = !checks.is_empty() && checks.iter().all(|c| c.passed);
        SuiteReport {
            suite,
            seed,
            checks,
            passed,
        }
    }

    pub fn failed_checks(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

pub fn run(suite: &Suite, seed: u64) -> SuiteReport {
    match suite {
        Suite::Equivalence => equivalence(seed, 100),
        Suite::Optimality => optimality(seed, 20, 1000),
        Suite::Bounds => bounds(seed, 50, 20),
        Suite::Fps => fps(seed, 20),
        Suite::Factor(path) => factor_file(path),
    }
}

/// Independent generator for instance `k` of a battery.
pub fn instance_rng(seed: u64, k: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k);
    rng
}

/// Random SPD matrix with a decaying spectrum: `G S^2 G^T / k + delta I`.
pub fn random_spd<R: Rng>(n: usize, rng: &mut R) -> DenseSym {
    let k = rng.random_range(1..=n.max(1));
    let decay: f64 = rng.random_range(0.0..0.5);
    let g: Vec<f64> = (0..n * k)
        .map(|idx| {
            let z: f64 = rng.sample(StandardNormal);
            z * (-(decay * (idx % k) as f64)).exp()
        })
        .collect();
    let mut a = DenseSym::from_fn(n, |i, j| {
        dot(&g[i * k..(i + 1) * k], &g[j * k..(j + 1) * k]) / k as f64
    });
    let mean_diag = (a.trace() / n as f64).max(1e-300);
    let delta = mean_diag * 10f64.powf(rng.random_range(-3.0..-1.0));
    for i in 0..n {
        a.set(i, i, a.get(i, i) + delta);
    }
    a
}

pub fn random_order<R: Rng>(n: usize, rng: &mut R) -> PivotOrder {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    PivotOrder::new(p).expect("shuffle is a permutation")
}

/// Each row gets a random subset of its predecessors of size at most
/// `max_len`.
pub fn random_pattern<R: Rng>(n: usize, max_len: usize, rng: &mut R) -> SparsityPattern {
    let sets = (0..n)
        .map(|i| {
            let len = rng.random_range(0..=max_len.min(i));
            rand::seq::index::sample(rng, i, len).into_vec()
        })
        .collect();
    SparsityPattern::new(sets).expect("random pattern is valid")
}

fn max_of(v: impl IntoIterator<Item = f64>) -> f64 {
    // NaN propagates so that it fails the check
    v.into_iter().fold(f64::NEG_INFINITY, |m, x| {
        if x.is_nan() || m.is_nan() {
            f64::NAN
        } else {
            m.max(x)
        }
    })
}

pub fn equivalence(seed: u64, instances: usize) -> SuiteReport {
    let reports: Vec<_> = (0..instances as u64)
        .into_par_iter()
        .map(|k| {
            let mut rng = instance_rng(seed, k);
            let n = rng.random_range(5..=50);
            let a = random_spd(n, &mut rng);
            let order = random_order(n, &mut rng);
            let r = rng.random_range(0..=n);
            let q = random_pattern(n, 4, &mut rng);
            check_equivalence(&a, &order, r, &q)
        })
        .collect();
    let tol = 1e-8;
    SuiteReport::new(
        Suite::Equivalence,
        seed,
        vec![
            CheckResult::new(
                "coefficients",
                max_of(reports.iter().map(|r| r.coefficients)),
                tol,
                instances,
            ),
            CheckResult::new(
                "diagonal",
                max_of(reports.iter().map(|r| r.diagonal)),
                tol,
                instances,
            ),
            CheckResult::new(
                "reconstruction",
                max_of(reports.iter().map(|r| r.reconstruction)),
                tol,
                instances,
            ),
        ],
    )
}

/// `log kappa` of an SPD `A` against a factor with positive diagonal, from
/// `tr(A Ahat^{-1})` and the two determinants.
pub fn log_kappa_by_trace(a: &DenseSym, logdet_a: f64, f: &VecchiaFactor) -> f64 {
    let n = a.n();
    let ap = a.permuted(f.order().as_slice());
    let mut tr = 0.0;
    let mut e = vec![0.0; n];
    for i in 0..n {
        e[i] = 1.0;
        let c = f.ct_mul(&e);
        e[i] = 0.0;
        let mut support = f.pattern().row(i).to_vec();
        support.push(i);
        let q: f64 = support
            .iter()
            .map(|&x| {
                support
                    .iter()
                    .map(|&y| c[x] * ap.get(x, y) * c[y])
                    .sum::<f64>()
            })
            .sum();
        tr += q / f.diag()[i];
    }
    let logdet_hat: f64 = f.diag().iter().map(|d| d.ln()).sum();
    n as f64 * (tr / n as f64).ln() - logdet_a + logdet_hat
}

pub fn optimality(seed: u64, instances: usize, perturbations: usize) -> SuiteReport {
    let rows: Vec<(f64, f64)> = (0..instances as u64)
        .into_par_iter()
        .map(|k| {
            let mut rng = instance_rng(seed, k);
            let n = rng.random_range(5..=30);
            let a = random_spd(n, &mut rng);
            let order = random_order(n, &mut rng);

            let full = build_vecchia(&a, &order, &SparsityPattern::full(n));
            let exact = kappa_eigen_oracle(&a, &full.reconstruct_dense());
            let exact_log = if exact.infinite {
                f64::INFINITY
            } else {
                exact.log_kappa.abs()
            };

            let pattern = random_pattern(n, 4, &mut rng);
            let f = build_vecchia(&a, &order, &pattern);
            let logdet_a = logdet_spd(&a).expect("instance is SPD");
            let base = log_kappa_by_trace(&a, logdet_a, &f);
            let mut gain = f64::NEG_INFINITY;
            for _ in 0..perturbations {
                let eps = 10f64.powf(rng.random_range(-6.0..0.0));
                let coefs: Vec<Vec<f64>> = (0..n)
                    .map(|i| {
                        f.row(i)
                            .iter()
                            .map(|c| c + eps * rng.sample::<f64, _>(StandardNormal))
                            .collect()
                    })
                    .collect();
                let diag: Vec<f64> = f
                    .diag()
                    .iter()
                    .map(|d| d * (eps * rng.sample::<f64, _>(StandardNormal)).exp())
                    .collect();
                let g = VecchiaFactor::new(order.clone(), pattern.clone(), coefs, diag)
                    .expect("perturbed factor keeps its structure");
                gain = gain.max(base - log_kappa_by_trace(&a, logdet_a, &g));
            }
            (exact_log, gain)
        })
        .collect();
    SuiteReport::new(
        Suite::Optimality,
        seed,
        vec![
            CheckResult::new(
                "full_pattern_log_kappa",
                max_of(rows.iter().map(|r| r.0)),
                1e-9,
                instances,
            ),
            CheckResult::new(
                "perturbation_gain",
                max_of(rows.iter().map(|r| r.1)),
                1e-9,
                instances,
            ),
        ],
    )
}

/// `(direct-solve excess, PCG excess)` for the empty-pattern and hybrid
/// preconditioners of one instance.
fn solve_bounds_instance(seed: u64, k: u64) -> Vec<(f64, f64)> {
    let mut rng = instance_rng(seed, k);
    let n = rng.random_range(20..=200);
    let a = random_spd(n, &mut rng);
    let l = cholesky(&a, 0.0).expect("instance is SPD");
    let b: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let x_star = cholesky_solve(&l, n, &b);
    let norm_star = dot(&x_star, &a.matvec(&x_star)).sqrt();
    let r = rng.random_range(0..=n / 4);
    let (_, partial) = choose_pivots(&a, &PivotChooser::rpc(rng.random()), r);
    let empty = build_hybrid(
        &a,
        partial.order(),
        partial.rank(),
        &SparsityPattern::empty(n),
    );
    let q = choose_pattern(&a, &partial, &SparsityChooser::nn(3));
    let hybrid = crate::vecchia::build_hybrid_from_partial(&a, &partial, &q);

    [empty, hybrid]
        .iter()
        .map(|f| {
            let rep = kappa_from_factor(&a, f);
            let lk = rep.log_kappa;
            let mv = |v: &[f64]| a.matvec(v);

            let xd = direct_solve(mv, f, &b, None);
            let e: Vec<f64> = xd.iter().zip(&x_star).map(|(x, y)| x - y).collect();
            let ratio_sq = dot(&e, &a.matvec(&e)) / (norm_star * norm_star);
            let direct = ratio_sq - 2.0 * rep.rank as f64 * lk;

            let opts = PcgOptions {
                tol: 1e-12,
                max_iter: 4 * n,
                x_star: Some(x_star.clone()),
                ..PcgOptions::default()
            };
            let pcg_excess = match pcg(mv, f, &b, &opts) {
                Ok(trace) => {
                    let errs = trace.a_errors.expect("x* was given");
                    let t_min = (3.0 * lk).ceil().max(1.0) as usize;
                    max_of(errs.iter().enumerate().skip(t_min).map(|(t, e)| {
                        let tf = t as f64;
                        e / errs[0] - (3.0 * lk / tf).powf(tf / 2.0)
                    }))
                }
                Err(_) => f64::INFINITY,
            };
            (direct, pcg_excess)
        })
        .collect()
}

pub fn bounds(seed: u64, det_instances: usize, solve_instances: usize) -> SuiteReport {
    let det: Vec<f64> = (0..det_instances as u64)
        .into_par_iter()
        .map(|k| {
            let mut rng = instance_rng(seed, k);
            let n = rng.random_range(5..=60);
            let a = random_spd(n, &mut rng);
            let order = random_order(n, &mut rng);
            let r = rng.random_range(0..=n);
            let q = random_pattern(n, 4, &mut rng);
            let f = build_hybrid(&a, &order, r, &q);
            let rep = kappa_eigen_oracle(&a, &f.reconstruct_dense());
            match (f.logdet(), logdet_spd(&a)) {
                (Ok(lh), Ok(la)) if !rep.infinite => (lh - la - rep.log_kappa).abs(),
                _ => f64::INFINITY,
            }
        })
        .collect();
    let solve: Vec<(f64, f64)> = (0..solve_instances as u64)
        .into_par_iter()
        .flat_map_iter(|k| solve_bounds_instance(seed ^ 0x5eed, k))
        .collect();
    SuiteReport::new(
        Suite::Bounds,
        seed,
        vec![
            CheckResult::new("determinant_identity", max_of(det), 1e-8, det_instances),
            CheckResult::new(
                "pcg_error_bound",
                max_of(solve.iter().map(|s| s.1)),
                1e-9,
                2 * solve_instances,
            ),
            CheckResult::new(
                "direct_solve_bound",
                max_of(solve.iter().map(|s| s.0)),
                1e-9,
                2 * solve_instances,
            ),
        ],
    )
}

pub fn fps(seed: u64, instances: usize) -> SuiteReport {
    let ratios: Vec<f64> = (0..instances as u64)
        .into_par_iter()
        .map(|k| {
            let mut rng = instance_rng(seed, k);
            let n = rng.random_range(4..=10);
            let r = rng.random_range(2..=3);
            let a = random_spd(n, &mut rng);
            verify_fps_ratio(&a, r, rng.random()).unwrap_or(f64::INFINITY)
        })
        .collect();
    SuiteReport::new(
        Suite::Fps,
        seed,
        vec![CheckResult::new(
            "fps_ratio",
            max_of(ratios),
            2.0 + 1e-9,
            instances,
        )],
    )
}

fn flag(name: &str, ok: bool) -> CheckResult {
    CheckResult::new(name, if ok { 0.0 } else { 1.0 }, 0.0, 1)
}

/// Structural checks on a raw factor; each failing invariant is named.
pub fn factor_checks(raw: &RawFactor) -> Vec<CheckResult> {
    let n = raw.perm.len();
    let mut seen = vec![false; n];
    let perm_ok = raw
        .perm
        .iter()
        .all(|&p| p < n && !std::mem::replace(&mut seen[p], true));
    let lower_ok = raw.sets.len() == n
        && raw
            .sets
            .iter()
            .enumerate()
            .all(|(i, s)| s.windows(2).all(|w| w[0] < w[1]) && s.last().is_none_or(|&j| j < i));
    let lengths_ok = raw.coefs.len() == n
        && raw.diag.len() == n
        && raw
            .sets
            .iter()
            .zip(&raw.coefs)
            .all(|(s, c)| s.len() == c.len());
    let finite_ok = raw
        .coefs
        .iter()
        .flatten()
        .chain(&raw.diag)
        .all(|v| v.is_finite());
    let diag_ok = raw.diag.iter().all(|&d| d >= 0.0);
    vec![
        flag("permutation_bijective", perm_ok),
        flag("pattern_strictly_lower_sorted", lower_ok),
        flag("row_lengths_match", lengths_ok),
        flag("entries_finite", finite_ok),
        flag("diagonal_nonnegative", diag_ok),
    ]
}

pub fn factor_file(path: &Path) -> SuiteReport {
    let suite = Suite::Factor(path.to_path_buf());
    let checks = match load_factor_raw(path) {
        Ok(raw) => factor_checks(&raw),
        Err(_) => vec![flag("file_layout", false)],
    };
    SuiteReport::new(suite, 0, checks)
}

/// Loads with full validation, as the solvers would.
pub fn factor_loads(path: &Path) -> Result<VecchiaFactor> {
    crate::format::load_factor(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::format::save_factor;
    use crate::kaporin::kappa_eigen_oracle;

    #[test]
    fn trace_formula_matches_eigen_oracle() {
        for k in 0..10 {
            let mut rng = instance_rng(3, k);
            let n = rng.random_range(5..=20);
            let a = random_spd(n, &mut rng);
            let order = random_order(n, &mut rng);
            let p = random_pattern(n, 3, &mut rng);
            let f = build_vecchia(&a, &order, &p);
            let want = kappa_eigen_oracle(&a, &f.reconstruct_dense()).log_kappa;
            let got = log_kappa_by_trace(&a, logdet_spd(&a).unwrap(), &f);
            assert!(
                (got - want).abs() < 1e-8 * want.abs().max(1.0),
                "{got} vs {want}"
            );
        }
    }

    #[test]
    fn random_instances_are_spd_and_deterministic() {
        let a = random_spd(12, &mut instance_rng(1, 0));
        let b = random_spd(12, &mut instance_rng(1, 0));
        assert_eq!(a, b);
        assert!(cholesky(&a, 0.0).is_some());
        let p = random_pattern(30, 4, &mut instance_rng(1, 1));
        assert!(p.rows().iter().all(|r| r.len() <= 4));
    }

    #[test]
    fn small_batteries_pass() {
        assert!(equivalence(11, 8).passed);
        assert!(optimality(11, 3, 50).passed);
        assert!(bounds(11, 5, 2).passed);
        assert!(fps(11, 4).passed);
    }

    #[test]
    fn corrupted_factor_fails_with_named_invariant() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.bin");
        let a = random_spd(6, &mut instance_rng(2, 0));
        let f = build_vecchia(&a, &PivotOrder::identity(6), &SparsityPattern::full(6));
        save_factor(&path, &f).unwrap();
        assert!(factor_file(&path).passed);

        let mut bytes = std::fs::read(&path).unwrap();
        // last diagonal entry negative
        let k = bytes.len() - 1;
        bytes[k] |= 0x80;
        std::fs::write(&path, &bytes).unwrap();
        let rep = factor_file(&path);
        assert!(!rep.passed);
        let failed: Vec<_> = rep.failed_checks().map(|c| c.name.as_str()).collect();
        assert_eq!(failed, ["diagonal_nonnegative"]);
        assert!(factor_loads(&path).is_err());

        std::fs::write(&path, b"junk").unwrap();
        let rep = factor_file(&path);
        assert_eq!(rep.failed_checks().next().unwrap().name, "file_layout");
    }
}
