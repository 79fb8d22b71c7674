//! Vecchia factors, the hybrid partial Cholesky + Vecchia construction, and
//! the check that the two agree on the augmented pattern.

use rayon::prelude::*;

use crate::error::Result;
use crate::factor::{PartialCholeskyFactor, VecchiaFactor};
use crate::linalg::{psd_solve, DenseSym};
use crate::oracle::{EntryOracle, PermutedOracle, PivotOrder, SparsityPattern};
use crate::partial_cholesky::build_partial_cholesky;

/// `A - P L D L^T P^T` viewed in permuted coordinates.
///
/// Each lookup costs one base lookup plus a length-`r` inner product.
pub struct ResidualOracle<'a, O: ?Sized> {
    base: &'a O,
    factor: &'a PartialCholeskyFactor,
}

impl<'a, O: EntryOracle + ?Sized> ResidualOracle<'a, O> {
    pub fn new(base: &'a O, factor: &'a PartialCholeskyFactor) -> Self {
        assert_eq!(base.dim(), factor.n());
        ResidualOracle { base, factor }
    }

    pub fn factor(&self) -> &PartialCholeskyFactor {
        self.factor
    }
}

impl<O: EntryOracle + ?Sized> EntryOracle for ResidualOracle<'_, O> {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    #[inline]
    fn entry(&self, i: usize, j: usize) -> f64 {
        let p = self.factor.order().as_slice();
        let (a, b) = (p[i], p[j]);
        self.base.entry(a, b) - self.factor.approx_entry(a, b)
    }

    fn lookup_count(&self) -> u64 {
        self.base.lookup_count()
    }
}

/// One Vecchia row: solves `M x = -v` with `M = A(S,S)`, `v = A(S,i)`.
/// Returns the coefficients, `D(i,i)`, and whether it was clamped.
/// Costs `(|S|+1)(|S|+2)/2` lookups.
pub(crate) fn vecchia_row<O: EntryOracle + ?Sized>(
    oracle: &O,
    i: usize,
    set: &[usize],
) -> (Vec<f64>, f64, bool) {
    let alpha = oracle.entry(i, i);
    if set.is_empty() {
        return (Vec::new(), alpha.max(0.0), alpha < 0.0);
    }
    let m = DenseSym::from_fn(set.len(), |a, b| oracle.entry(set[a], set[b]));
    let v: Vec<f64> = set.iter().map(|&j| oracle.entry(j, i)).collect();
    let mut x = psd_solve(&m, &v);
    for xi in &mut x {
        *xi = -*xi;
    }
    let d = alpha + x.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>();
    (x, d.max(0.0), d < 0.0)
}

fn assemble(
    order: PivotOrder,
    pattern: SparsityPattern,
    rows: Vec<(Vec<f64>, f64, bool)>,
) -> VecchiaFactor {
    let clamped = rows.iter().filter(|r| r.2).count();
    let (coefs, diag): (Vec<_>, Vec<_>) = rows.into_iter().map(|(c, d, _)| (c, d)).unzip();
    let mut f = VecchiaFactor::new(order, pattern, coefs, diag).expect("rows match pattern");
    f.clamped = clamped;
    f
}

/// Conventional Vecchia approximation of `P^T A P` on `pattern`.
/// Rows are independent and built in parallel.
pub fn build_vecchia<O: EntryOracle + ?Sized>(
    oracle: &O,
    order: &PivotOrder,
    pattern: &SparsityPattern,
) -> VecchiaFactor {
    let n = oracle.dim();
    assert_eq!(order.len(), n);
    assert_eq!(pattern.len(), n);
    let permuted = PermutedOracle::new(oracle, order);
    let rows: Vec<_> = (0..n)
        .into_par_iter()
        .map(|i| vecchia_row(&permuted, i, pattern.row(i)))
        .collect();
    assemble(order.clone(), pattern.clone(), rows)
}

/// `S_i = ({0..r} ∪ Q_i) ∩ {0..i}`.
pub fn augment_pattern(r: usize, q: &SparsityPattern) -> SparsityPattern {
    let sets = (0..q.len())
        .map(|i| {
            let head = 0..r.min(i);
            head.chain(q.row(i).iter().copied().filter(|&j| j >= r))
                .collect()
        })
        .collect();
    SparsityPattern::new(sets).expect("augmented pattern is valid")
}

/// Partial Cholesky on the first `r` pivots of `order` followed by Vecchia on
/// the residual with pattern `q`.
pub fn build_hybrid<O: EntryOracle + ?Sized>(
    oracle: &O,
    order: &PivotOrder,
    r: usize,
    q: &SparsityPattern,
) -> VecchiaFactor {
    let partial = build_partial_cholesky(oracle, order, r);
    build_hybrid_from_partial(oracle, &partial, q)
}

/// Hybrid factor from an existing partial Cholesky factor.
///
/// Lookups: `sum_i |Q_i|(|Q_i|+3)/2 + (n - r)` on top of the partial factor.
pub fn build_hybrid_from_partial<O: EntryOracle + ?Sized>(
    oracle: &O,
    partial: &PartialCholeskyFactor,
    q: &SparsityPattern,
) -> VecchiaFactor {
    let n = partial.n();
    let r = partial.rank();
    assert_eq!(q.len(), n);
    let l = |i: usize, k: usize| partial.l(i, k);

    // Rows of L11^{-1}: x L11 = e_i, x(k) = -sum_{m=k+1..i} x(m) L(m,k).
    let l11_inv: Vec<Vec<f64>> = (0..r)
        .into_par_iter()
        .map(|i| {
            let mut x = vec![0.0; i + 1];
            x[i] = 1.0;
            for k in (0..i).rev() {
                x[k] = -(k + 1..=i).map(|m| x[m] * l(m, k)).sum::<f64>();
            }
            x
        })
        .collect();

    let residual = ResidualOracle::new(oracle, partial);
    let residual_rows: Vec<_> = (r..n)
        .into_par_iter()
        .map(|i| {
            let qi: Vec<usize> = q.row(i).iter().copied().filter(|&j| j >= r).collect();
            let (x, d, clamped) = vecchia_row(&residual, i, &qi);
            // y = C22(i,:) L21, then left block = -y L11^{-1}.
            let mut y: Vec<f64> = (0..r).map(|k| l(i, k)).collect();
            for (&j, &w) in qi.iter().zip(&x) {
                for (k, yk) in y.iter_mut().enumerate() {
                    *yk += w * l(j, k);
                }
            }
            let mut z = y;
            for k in (0..r).rev() {
                let s: f64 = (k + 1..r).map(|m| z[m] * l(m, k)).sum();
                z[k] -= s;
            }
            let mut coefs: Vec<f64> = z.into_iter().map(|v| -v).collect();
            coefs.extend(x);
            (coefs, d, clamped)
        })
        .collect();

    let mut rows = Vec::with_capacity(n);
    for (i, mut x) in l11_inv.into_iter().enumerate() {
        x.pop();
        rows.push((x, partial.d()[i], false));
    }
    rows.extend(residual_rows);
    assemble(partial.order().clone(), augment_pattern(r, q), rows)
}

/// Worst-case discrepancies between the hybrid factor and conventional
/// Vecchia on the augmented pattern.
#[derive(Clone, Debug, Default, PartialEq, serde::Serialize)]
pub struct EquivalenceReport {
    /// Max over rows of `|c_h - c_v|_inf / max(1, |c_v|_inf)`.
    pub coefficients: f64,
    /// `max |d_h - d_v| / max d_v`.
    pub diagonal: f64,
    /// `max |Ahat_h - Ahat_v| / max |Ahat_v|` (dense reconstructions).
    pub reconstruction: f64,
}

impl EquivalenceReport {
    pub fn max(&self) -> f64 {
        self.coefficients
            .max(self.diagonal)
            .max(self.reconstruction)
    }
}

pub fn check_equivalence<O: EntryOracle + ?Sized>(
    oracle: &O,
    order: &PivotOrder,
    r: usize,
    q: &SparsityPattern,
) -> EquivalenceReport {
    let hybrid = build_hybrid(oracle, order, r, q);
    let direct = build_vecchia(oracle, order, &augment_pattern(r, q));
    compare_factors(&hybrid, &direct)
}

pub(crate) fn compare_factors(a: &VecchiaFactor, b: &VecchiaFactor) -> EquivalenceReport {
    let mut rep = EquivalenceReport::default();
    for i in 0..a.n() {
        debug_assert_eq!(a.pattern().row(i), b.pattern().row(i));
        let scale = b.row(i).iter().fold(1.0f64, |m, v| m.max(v.abs()));
        for (x, y) in a.row(i).iter().zip(b.row(i)) {
            rep.coefficients = rep.coefficients.max((x - y).abs() / scale);
        }
    }
    let dscale = b
        .diag()
        .iter()
        .cloned()
        .fold(0.0f64, f64::max)
        .max(f64::MIN_POSITIVE);
    for (x, y) in a.diag().iter().zip(b.diag()) {
        rep.diagonal = rep.diagonal.max((x - y).abs() / dscale);
    }
    let (da, db) = (a.reconstruct_dense(), b.reconstruct_dense());
    let scale = db.max_abs().max(f64::MIN_POSITIVE);
    for (x, y) in da.values().iter().zip(db.values()) {
        rep.reconstruction = rep.reconstruction.max((x - y).abs() / scale);
    }
    rep
}

/// `log det Ahat = sum_i log D(i,i)`.
pub fn logdet_direct(factor: &VecchiaFactor) -> Result<f64> {
    factor.logdet()
}
