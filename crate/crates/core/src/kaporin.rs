//! Kaporin condition number: the eigenvalue definition, the product formula
//! over factor diagonals, and the bound quantities derived from it.

use serde::Serialize;

use crate::factor::VecchiaFactor;
use crate::linalg::{ldl_psd, sym_eigen, DenseSym, SymEigen, PINV_CUTOFF};
use crate::oracle::{materialize, EntryOracle, PermutedOracle, PivotOrder, SparsityPattern};

/// Relative eigenvalue cutoff used to decide the range of a matrix.
pub const RANGE_CUTOFF: f64 = 1e-10;
/// Spectral-norm tolerance when comparing range projectors.
pub const PROJECTOR_TOL: f64 = 1e-8;
/// Relative threshold below which a distance counts as zero in the product
/// formula.
pub const ZERO_DISTANCE_CUTOFF: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KaporinReport {
    /// `log kappa`; meaningless when `infinite` is set.
    pub log_kappa: f64,
    pub infinite: bool,
    pub rank: usize,
    /// `tr(A Ahat^+) / rank`, when computed.
    pub trace_ratio: Option<f64>,
    /// `log(Dhat(i,i) / D(i,i))` per row (product formula only; 0 for rows
    /// excluded from the product).
    pub per_row_log_terms: Vec<f64>,
}

impl KaporinReport {
    fn infinite(rank: usize) -> Self {
        KaporinReport {
            log_kappa: f64::INFINITY,
            infinite: true,
            rank,
            trace_ratio: None,
            per_row_log_terms: Vec::new(),
        }
    }

    /// `kappa` itself (may overflow to infinity for large `log_kappa`).
    pub fn kappa(&self) -> f64 {
        if self.infinite {
            f64::INFINITY
        } else {
            self.log_kappa.exp()
        }
    }
}

fn range_basis(e: &SymEigen) -> Vec<usize> {
    e.positive_indices(RANGE_CUTOFF)
}

/// Kaporin condition number from dense eigendecompositions of `A` and `Ahat`.
pub fn kappa_eigen_oracle(a: &DenseSym, ahat: &DenseSym) -> KaporinReport {
    kappa_eigen_with(a, &sym_eigen(a), ahat)
}

/// As [`kappa_eigen_oracle`] with a precomputed decomposition of `A`.
pub fn kappa_eigen_with(a: &DenseSym, ea: &SymEigen, ahat: &DenseSym) -> KaporinReport {
    let n = a.n();
    assert_eq!(ahat.n(), n);
    let eh = sym_eigen(ahat);
    let ra = range_basis(ea);
    let rh = range_basis(&eh);
    if ra.len() != rh.len() {
        return KaporinReport::infinite(ra.len());
    }
    let k = rh.len();
    if k == 0 {
        return KaporinReport {
            log_kappa: 0.0,
            infinite: false,
            rank: 0,
            trace_ratio: None,
            per_row_log_terms: Vec::new(),
        };
    }
    if k < n {
        let proj = |e: &SymEigen, idx: &[usize], i: usize, j: usize| -> f64 {
            idx.iter()
                .map(|&c| e.vector_entry(i, c) * e.vector_entry(j, c))
                .sum()
        };
        let diff = DenseSym::from_fn(n, |i, j| proj(ea, &ra, i, j) - proj(&eh, &rh, i, j));
        if sym_eigen(&diff).max_abs_value() > PROJECTOR_TOL {
            return KaporinReport::infinite(k);
        }
    }
    // Eigenvalues of A Ahat^+ on the range: Lambda^{-1/2} U^T A U Lambda^{-1/2}.
    let mut au = vec![0.0; n * k];
    for (c, &col) in rh.iter().enumerate() {
        let u: Vec<f64> = (0..n).map(|i| eh.vector_entry(i, col)).collect();
        let v = a.matvec(&u);
        for i in 0..n {
            au[i * k + c] = v[i];
        }
    }
    let reduced = DenseSym::from_fn(k, |x, y| {
        let (cx, cy) = (rh[x], rh[y]);
        let s: f64 = (0..n).map(|i| eh.vector_entry(i, cx) * au[i * k + y]).sum();
        s / (eh.values[cx] * eh.values[cy]).sqrt()
    });
    let lam = sym_eigen(&reduced).values;
    let mean = lam.iter().sum::<f64>() / k as f64;
    let logs: f64 = lam.iter().map(|&l| l.max(f64::MIN_POSITIVE).ln()).sum();
    KaporinReport {
        log_kappa: k as f64 * mean.ln() - logs,
        infinite: false,
        rank: k,
        trace_ratio: Some(mean),
        per_row_log_terms: Vec::new(),
    }
}

/// Exact `D(i,i) = d(e_i, span{e_j : j < i})^2` of `P^T A P`, computed from a
/// dense LDL^T.
pub fn exact_diagonal<O: EntryOracle + ?Sized>(oracle: &O, order: &PivotOrder) -> Vec<f64> {
    let permuted = PermutedOracle::new(oracle, order);
    ldl_psd(&materialize(&permuted), PINV_CUTOFF).1
}

/// Product formula `prod_{D(i,i) > 0} Dhat(i,i) / D(i,i)`, accumulated in
/// the log domain.
pub fn kappa_from_factor<O: EntryOracle + ?Sized>(
    oracle: &O,
    factor: &VecchiaFactor,
) -> KaporinReport {
    let exact = exact_diagonal(oracle, factor.order());
    kappa_from_diagonals(factor.diag(), &exact, ZERO_DISTANCE_CUTOFF)
}

/// Product formula from approximate and exact diagonals. Rows whose exact
/// value is at or below `cutoff * max` are excluded; if any of them has a
/// nonzero approximate value the result is infinite.
pub fn kappa_from_diagonals(approx: &[f64], exact: &[f64], cutoff: f64) -> KaporinReport {
    assert_eq!(approx.len(), exact.len());
    let scale = exact.iter().chain(approx).cloned().fold(0.0f64, f64::max);
    let cut = cutoff * scale;
    let mut terms = vec![0.0; approx.len()];
    let mut rank = 0;
    let mut infinite = false;
    for (i, (&dh, &d)) in approx.iter().zip(exact).enumerate() {
        if d > cut {
            rank += 1;
            terms[i] = (dh / d).ln();
        } else if dh > cut {
            infinite = true;
        }
    }
    if infinite {
        return KaporinReport {
            per_row_log_terms: terms,
            ..KaporinReport::infinite(rank)
        };
    }
    KaporinReport {
        log_kappa: terms.iter().sum(),
        infinite: false,
        rank,
        trace_ratio: None,
        per_row_log_terms: terms,
    }
}

/// Kaporin condition number of the partial Cholesky + diagonal approximation
/// with the given pivots.
pub fn kappa_partial_diagonal(a: &DenseSym, pivots: &[usize]) -> KaporinReport {
    let n = a.n();
    let order = PivotOrder::from_prefix(n, pivots).expect("distinct pivots");
    let f = crate::vecchia::build_hybrid(a, &order, pivots.len(), &SparsityPattern::empty(n));
    kappa_from_factor(a, &f)
}

/// Error bound values for `t` iterations or samples.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BoundSet {
    /// Squared A-norm error ratio of the single-step direct solve.
    pub direct_solve: f64,
    /// Squared A-norm error ratio after `t` PCG iterations.
    pub pcg: f64,
    /// `log det Ahat - log det A`.
    pub det_identity: f64,
    /// Mean squared error of the stochastic log-determinant estimate.
    pub stochastic_det: f64,
}

pub fn error_bounds(report: &KaporinReport, t: usize) -> BoundSet {
    let lk = report.log_kappa.max(0.0);
    let tf = t as f64;
    BoundSet {
        direct_solve: 2.0 * report.rank as f64 * lk,
        pcg: if t == 0 {
            1.0
        } else {
            (3.0 * lk / tf).powf(tf)
        },
        det_identity: report.log_kappa,
        stochastic_det: if t == 0 { f64::INFINITY } else { 8.0 * lk / tf },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::logdet_spd;
    use crate::vecchia::build_vecchia;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(n: usize, seed: u64) -> DenseSym {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        DenseSym::from_fn(n, |i, j| {
            (0..n).map(|k| g[i * n + k] * g[j * n + k]).sum::<f64>() / n as f64
                + if i == j { 0.05 } else { 0.0 }
        })
    }

    #[test]
    fn identical_matrices_give_one() {
        let a = random_spd(6, 1);
        let rep = kappa_eigen_oracle(&a, &a);
        assert!(rep.log_kappa.abs() < 1e-10);
        assert!(!rep.infinite);
    }

    #[test]
    fn two_by_two_value() {
        let a = DenseSym::from_diag(&[1.0, 2.0]);
        let h = DenseSym::from_diag(&[2.0, 2.0]);
        let rep = kappa_eigen_oracle(&a, &h);
        assert!((rep.kappa() - 1.125).abs() < 1e-12);
        assert_eq!(rep.trace_ratio, Some(0.75));
    }

    #[test]
    fn range_mismatch_is_infinite() {
        let a = DenseSym::from_diag(&[1.0, 1.0, 0.0]);
        let h = DenseSym::identity(3);
        assert!(kappa_eigen_oracle(&a, &h).infinite);
        // same rank, different range
        let h2 = DenseSym::from_diag(&[1.0, 0.0, 1.0]);
        assert!(kappa_eigen_oracle(&a, &h2).infinite);
        // same range
        let h3 = DenseSym::from_diag(&[2.0, 3.0, 0.0]);
        assert!(!kappa_eigen_oracle(&a, &h3).infinite);
    }

    #[test]
    fn full_pattern_factor_is_one() {
        let a = random_spd(8, 2);
        let f = build_vecchia(&a, &PivotOrder::identity(8), &SparsityPattern::full(8));
        assert!(kappa_from_factor(&a, &f).log_kappa.abs() < 1e-9);
    }

    #[test]
    fn empty_pattern_is_hadamard_ratio() {
        let a = random_spd(8, 3);
        let f = build_vecchia(&a, &PivotOrder::identity(8), &SparsityPattern::empty(8));
        let rep = kappa_from_factor(&a, &f);
        let hadamard: f64 = a.diag().iter().map(|d| d.ln()).sum::<f64>() - logdet_spd(&a).unwrap();
        assert!((rep.log_kappa - hadamard).abs() < 1e-9);
        let sum: f64 = rep.per_row_log_terms.iter().sum();
        assert!((rep.log_kappa - sum).abs() < 1e-12);
    }

    #[test]
    fn formula_matches_eigen_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for seed in 0..50 {
            let n = rng.random_range(2..=40);
            let a = random_spd(n, 10 + seed);
            let sets = (0..n)
                .map(|i| (0..i).filter(|_| rng.random_bool(0.3)).collect())
                .collect();
            let pat = SparsityPattern::new(sets).unwrap();
            let f = build_vecchia(&a, &PivotOrder::identity(n), &pat);
            let x = kappa_from_factor(&a, &f).log_kappa;
            let y = kappa_eigen_oracle(&a, &f.reconstruct_dense()).log_kappa;
            assert!(
                (x - y).abs() < 1e-8 * (1.0 + y.abs()),
                "seed {seed}: {x} vs {y}"
            );
            assert!(x >= -1e-9);
        }
    }

    #[test]
    fn rank_deficient_product_formula() {
        // rank-2 matrix in 4 dims: hybrid with 2 exact pivots has kappa 1
        let g = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 2.0, -1.0];
        let a = DenseSym::from_fn(4, |i, j| g[2 * i] * g[2 * j] + g[2 * i + 1] * g[2 * j + 1]);
        let f = crate::vecchia::build_hybrid(
            &a,
            &PivotOrder::identity(4),
            2,
            &SparsityPattern::empty(4),
        );
        let rep = kappa_from_factor(&a, &f);
        assert!(!rep.infinite);
        assert_eq!(rep.rank, 2);
        assert!(rep.log_kappa.abs() < 1e-9);
        // diagonal approximation has the wrong range
        let d = build_vecchia(&a, &PivotOrder::identity(4), &SparsityPattern::empty(4));
        assert!(kappa_from_factor(&a, &d).infinite);
    }

    #[test]
    fn bounds_formulas() {
        let zero = KaporinReport {
            log_kappa: 0.0,
            infinite: false,
            rank: 5,
            trace_ratio: None,
            per_row_log_terms: vec![],
        };
        let b = error_bounds(&zero, 3);
        assert_eq!(
            (b.direct_solve, b.pcg, b.det_identity, b.stochastic_det),
            (0.0, 0.0, 0.0, 0.0)
        );
        let small = KaporinReport {
            log_kappa: 0.01,
            ..zero.clone()
        };
        assert!((error_bounds(&small, 1).direct_solve - 0.1).abs() < 1e-15);
        let one = KaporinReport {
            log_kappa: 1.0,
            ..zero
        };
        assert_eq!(error_bounds(&one, 6).pcg, 0.015625);
        assert_eq!(error_bounds(&one, 8).stochastic_det, 1.0);
    }

    proptest::proptest! {
        #[test]
        fn enlarging_pattern_never_increases_kappa(seed in 0u64..200) {
            let n = 10;
            let a = random_spd(n, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let small: Vec<Vec<usize>> = (0..n).map(|i| (0..i).filter(|_| rng.random_bool(0.2)).collect()).collect();
            let big: Vec<Vec<usize>> = small.iter().enumerate().map(|(i, s)| {
                (0..i).filter(|j| s.contains(j) || rng.random_bool(0.3)).collect()
            }).collect();
            let order = PivotOrder::identity(n);
            let ks = kappa_from_factor(&a, &build_vecchia(&a, &order, &SparsityPattern::new(small).unwrap()));
            let kb = kappa_from_factor(&a, &build_vecchia(&a, &order, &SparsityPattern::new(big).unwrap()));
            proptest::prop_assert!(kb.log_kappa <= ks.log_kappa + 1e-10);
            proptest::prop_assert!(kb.log_kappa >= -1e-9);
        }
    }
}
