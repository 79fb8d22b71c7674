//! Factored approximations `P L D L^T P^T` and `P C^{-1} D C^{-T} P^T`.
//!
//! All factor data lives in permuted coordinates: row `i` of `L` or `C`
//! refers to the pivot `order[i]` of the original matrix.

use crate::error::{Error, Result};
use crate::linalg::{DenseSym, PINV_CUTOFF};
use crate::oracle::{PivotOrder, SparsityPattern};

/// Something that can stand in for `A` inside a preconditioned solver.
///
/// `whiten` applies a matrix `G` with `Ahat^{-1} = G^T G`; the operator
/// `G A G^T` is then symmetric and similar to `Ahat^{-1} A`.
pub trait Preconditioner: Sync {
    fn dim(&self) -> usize;

    /// `Ahat v`.
    fn apply(&self, v: &[f64]) -> Vec<f64>;

    /// A generalized inverse `Ahat^+ b` (the true inverse when `Ahat` is
    /// positive definite).
    fn solve(&self, b: &[f64]) -> Vec<f64>;

    fn logdet(&self) -> Result<f64>;

    fn whiten(&self, v: &[f64]) -> Result<Vec<f64>>;

    fn whiten_t(&self, v: &[f64]) -> Result<Vec<f64>>;
}

/// Rank-`r` partial pivoted Cholesky factor.
///
/// Stored as `F = P L` (rows indexed by original index, `r` columns) plus the
/// nonnegative diagonal `D`.
#[derive(Clone, Debug, PartialEq)]
pub struct PartialCholeskyFactor {
    pub(crate) order: PivotOrder,
    pub(crate) rank: usize,
    pub(crate) f: Vec<f64>,
    pub(crate) d: Vec<f64>,
}

impl PartialCholeskyFactor {
    pub fn new(order: PivotOrder, rank: usize, f: Vec<f64>, d: Vec<f64>) -> Result<Self> {
        let n = order.len();
        if rank > n || f.len() != n * rank || d.len() != rank {
            return Err(Error::InvalidInput(
                "inconsistent partial Cholesky factor".into(),
            ));
        }
        if d.iter().any(|&x| !(x >= 0.0)) {
            return Err(Error::InvalidInput("negative pivot in D".into()));
        }
        Ok(PartialCholeskyFactor { order, rank, f, d })
    }

    /// The rank-0 factor (`Ahat = 0`).
    pub fn empty(order: PivotOrder) -> Self {
        PartialCholeskyFactor {
            order,
            rank: 0,
            f: Vec::new(),
            d: Vec::new(),
        }
    }

    pub fn n(&self) -> usize {
        self.order.len()
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn order(&self) -> &PivotOrder {
        &self.order
    }

    pub fn d(&self) -> &[f64] {
        &self.d
    }

    /// The selected pivots `u_1, ..., u_r`.
    pub fn pivots(&self) -> &[usize] {
        &self.order.as_slice()[..self.rank]
    }

    /// Row of `F = P L` for the original index `orig`.
    #[inline]
    pub fn f_row(&self, orig: usize) -> &[f64] {
        &self.f[orig * self.rank..(orig + 1) * self.rank]
    }

    /// `L(pos, k)` in permuted coordinates.
    #[inline]
    pub fn l(&self, pos: usize, k: usize) -> f64 {
        self.f[self.order.as_slice()[pos] * self.rank + k]
    }

    /// `(F D F^T)(a, b)` for original indices.
    #[inline]
    pub fn approx_entry(&self, a: usize, b: usize) -> f64 {
        let (ra, rb) = (self.f_row(a), self.f_row(b));
        (0..self.rank).map(|k| ra[k] * self.d[k] * rb[k]).sum()
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        let n = self.n();
        let r = self.rank;
        let mut t = vec![0.0; r];
        for i in 0..n {
            let row = self.f_row(i);
            for k in 0..r {
                t[k] += row[k] * v[i];
            }
        }
        for k in 0..r {
            t[k] *= self.d[k];
        }
        (0..n)
            .map(|i| self.f_row(i).iter().zip(&t).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn reconstruct_dense(&self) -> DenseSym {
        DenseSym::from_fn(self.n(), |a, b| self.approx_entry(a, b))
    }
}

/// Sparse inverse-Cholesky factor `Ahat = P C^{-1} D C^{-T} P^T` with unit
/// diagonal `C` whose row `i` is nonzero only on `pattern.row(i)`.
#[derive(Clone, Debug, PartialEq)]
pub struct VecchiaFactor {
    pub(crate) order: PivotOrder,
    pub(crate) pattern: SparsityPattern,
    pub(crate) coefs: Vec<Vec<f64>>,
    pub(crate) diag: Vec<f64>,
    pub(crate) clamped: usize,
}

impl VecchiaFactor {
    pub fn new(
        order: PivotOrder,
        pattern: SparsityPattern,
        coefs: Vec<Vec<f64>>,
        diag: Vec<f64>,
    ) -> Result<Self> {
        let n = order.len();
        if pattern.len() != n || coefs.len() != n || diag.len() != n {
            return Err(Error::InvalidInput("factor dimensions disagree".into()));
        }
        for (i, c) in coefs.iter().enumerate() {
            if c.len() != pattern.row(i).len() {
                return Err(Error::InvalidInput(format!(
                    "row {i}: {} coefficients for {} pattern entries",
                    c.len(),
                    pattern.row(i).len()
                )));
            }
        }
        if let Some(i) = diag.iter().position(|&x| !(x >= 0.0)) {
            return Err(Error::InvalidInput(format!(
                "D({i},{i}) is negative or NaN"
            )));
        }
        Ok(VecchiaFactor {
            order,
            pattern,
            coefs,
            diag,
            clamped: 0,
        })
    }

    /// `C = I`, `D = diag`.
    pub fn diagonal(order: PivotOrder, diag: Vec<f64>) -> Result<Self> {
        let n = order.len();
        Self::new(order, SparsityPattern::empty(n), vec![Vec::new(); n], diag)
    }

    pub fn n(&self) -> usize {
        self.order.len()
    }

    pub fn order(&self) -> &PivotOrder {
        &self.order
    }

    pub fn pattern(&self) -> &SparsityPattern {
        &self.pattern
    }

    /// Off-diagonal coefficients `C(i, S_i)`, aligned with `pattern().row(i)`.
    pub fn row(&self, i: usize) -> &[f64] {
        &self.coefs[i]
    }

    pub fn diag(&self) -> &[f64] {
        &self.diag
    }

    /// Rows whose diagonal was clamped from a slightly negative value to 0.
    pub fn clamped_rows(&self) -> usize {
        self.clamped
    }

    fn diag_cutoff(&self) -> f64 {
        PINV_CUTOFF * self.diag.iter().fold(0.0f64, |m, &v| m.max(v))
    }

    /// `C x` (permuted coordinates).
    pub fn c_mul(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n())
            .map(|i| {
                x[i] + self
                    .pattern
                    .row(i)
                    .iter()
                    .zip(&self.coefs[i])
                    .map(|(&j, c)| c * x[j])
                    .sum::<f64>()
            })
            .collect()
    }

    /// `C^T y` (permuted coordinates).
    pub fn ct_mul(&self, y: &[f64]) -> Vec<f64> {
        let mut out = y.to_vec();
        for i in 0..self.n() {
            for (&j, c) in self.pattern.row(i).iter().zip(&self.coefs[i]) {
                out[j] += c * y[i];
            }
        }
        out
    }

    /// `C^{-1} y` by forward substitution.
    pub fn c_inv(&self, y: &[f64]) -> Vec<f64> {
        let mut x = y.to_vec();
        for i in 0..self.n() {
            let s: f64 = self
                .pattern
                .row(i)
                .iter()
                .zip(&self.coefs[i])
                .map(|(&j, c)| c * x[j])
                .sum();
            x[i] -= s;
        }
        x
    }

    /// `C^{-T} y` by backward substitution.
    pub fn ct_inv(&self, y: &[f64]) -> Vec<f64> {
        let mut x = y.to_vec();
        for i in (0..self.n()).rev() {
            let xi = x[i];
            for (&j, c) in self.pattern.row(i).iter().zip(&self.coefs[i]) {
                x[j] -= c * xi;
            }
        }
        x
    }

    /// `Ahat v` via triangular substitutions.
    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        let mut w = self.ct_inv(&self.order.to_permuted(v));
        for (wi, d) in w.iter_mut().zip(&self.diag) {
            *wi *= d;
        }
        self.order.to_original(&self.c_inv(&w))
    }

    /// `P C^T D^+ C P^T b`; diagonal entries at or below the pseudoinverse
    /// cutoff are treated as zero.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let cut = self.diag_cutoff();
        let mut w = self.c_mul(&self.order.to_permuted(b));
        for (wi, &d) in w.iter_mut().zip(&self.diag) {
            *wi = if d > cut { *wi / d } else { 0.0 };
        }
        self.order.to_original(&self.ct_mul(&w))
    }

    /// Dense `Ahat` in original coordinates. Test-scale only.
    pub fn reconstruct_dense(&self) -> DenseSym {
        let n = self.n();
        // Columns of C^{-1}: g[k] = C^{-1} e_k.
        let mut g = vec![0.0; n * n];
        for k in 0..n {
            let mut e = vec![0.0; n];
            e[k] = 1.0;
            let col = self.c_inv(&e);
            for i in 0..n {
                g[i * n + k] = col[i];
            }
        }
        let perm = self.order.as_slice();
        let mut out = vec![0.0; n * n];
        for a in 0..n {
            for b in 0..=a {
                let v: f64 = (0..=a.min(b))
                    .map(|k| g[a * n + k] * self.diag[k] * g[b * n + k])
                    .sum();
                out[perm[a] * n + perm[b]] = v;
                out[perm[b] * n + perm[a]] = v;
            }
        }
        DenseSym::new(n, out).expect("reconstruction is symmetric by construction")
    }

    /// `sum_i log D(i,i)`; errors if any diagonal entry is at or below the
    /// cutoff.
    pub fn logdet(&self) -> Result<f64> {
        let cut = self.diag_cutoff();
        let mut s = 0.0;
        for (i, &d) in self.diag.iter().enumerate() {
            if d <= cut || d == 0.0 {
                return Err(Error::NonSpdFactor { index: i, value: d });
            }
            s += d.ln();
        }
        Ok(s)
    }

    fn check_spd(&self) -> Result<()> {
        let cut = self.diag_cutoff();
        match self.diag.iter().position(|&d| d <= cut || d == 0.0) {
            Some(i) => Err(Error::NonSpdFactor {
                index: i,
                value: self.diag[i],
            }),
            None => Ok(()),
        }
    }
}

impl Preconditioner for VecchiaFactor {
    fn dim(&self) -> usize {
        self.n()
    }

    fn apply(&self, v: &[f64]) -> Vec<f64> {
        self.matvec(v)
    }

    fn solve(&self, b: &[f64]) -> Vec<f64> {
        VecchiaFactor::solve(self, b)
    }

    fn logdet(&self) -> Result<f64> {
        VecchiaFactor::logdet(self)
    }

    fn whiten(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.check_spd()?;
        let mut w = self.c_mul(&self.order.to_permuted(v));
        for (wi, d) in w.iter_mut().zip(&self.diag) {
            *wi /= d.sqrt();
        }
        Ok(w)
    }

    fn whiten_t(&self, y: &[f64]) -> Result<Vec<f64>> {
        self.check_spd()?;
        let scaled: Vec<f64> = y
            .iter()
            .zip(&self.diag)
            .map(|(v, d)| v / d.sqrt())
            .collect();
        Ok(self.order.to_original(&self.ct_mul(&scaled)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{dot, psd_solve};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_factor(n: usize, seed: u64) -> VecchiaFactor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let sets: Vec<Vec<usize>> = (0..n)
            .map(|i| (0..i).filter(|_| rng.random_bool(0.4)).collect())
            .collect();
        let coefs = sets
            .iter()
            .map(|s| s.iter().map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let diag = (0..n).map(|_| rng.random_range(0.2..2.0)).collect();
        VecchiaFactor::new(
            PivotOrder::new(perm).unwrap(),
            SparsityPattern::new(sets).unwrap(),
            coefs,
            diag,
        )
        .unwrap()
    }

    #[test]
    fn empty_pattern_reconstructs_diagonal() {
        let f =
            VecchiaFactor::diagonal(PivotOrder::new(vec![2, 0, 1]).unwrap(), vec![1.0, 2.0, 3.0])
                .unwrap();
        let a = f.reconstruct_dense();
        assert_eq!(a.diag(), vec![2.0, 3.0, 1.0]);
        assert_eq!(a.get(0, 1), 0.0);
    }

    #[test]
    fn identity_factor_solve_and_matvec() {
        let f = VecchiaFactor::diagonal(PivotOrder::identity(3), vec![1.0; 3]).unwrap();
        let b = [1.0, -2.0, 0.5];
        assert_eq!(f.solve(&b), b.to_vec());
        assert_eq!(f.matvec(&b), b.to_vec());
        assert_eq!(f.logdet().unwrap(), 0.0);
    }

    #[test]
    fn zero_diagonal_solve_is_zero() {
        let f = VecchiaFactor::diagonal(PivotOrder::identity(3), vec![0.0; 3]).unwrap();
        assert_eq!(f.solve(&[1.0, 2.0, 3.0]), vec![0.0; 3]);
        assert!(matches!(f.logdet(), Err(Error::NonSpdFactor { .. })));
    }

    /// Oracle for reconstruction: entry (a,b) evaluated by two independent
    /// triangular solves, Ahat(a,b) = e_a^T P C^{-1} D C^{-T} P^T e_b.
    #[test]
    fn reconstruction_matches_entrywise_solves() {
        let f = random_factor(5, 3);
        let dense = f.reconstruct_dense();
        for a in 0..5 {
            for b in 0..5 {
                let mut ea = vec![0.0; 5];
                ea[a] = 1.0;
                let mut eb = vec![0.0; 5];
                eb[b] = 1.0;
                let left = f.ct_inv(&f.order.to_permuted(&ea));
                let right = f.ct_inv(&f.order.to_permuted(&eb));
                let v: f64 = (0..5).map(|k| left[k] * f.diag[k] * right[k]).sum();
                assert!((v - dense.get(a, b)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn solve_inverts_matvec() {
        let f = random_factor(12, 9);
        let dense = f.reconstruct_dense();
        let b: Vec<f64> = (0..12).map(|i| (i as f64).sin()).collect();
        let x = f.solve(&b);
        let oracle = psd_solve(&dense, &b);
        let scale = oracle.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (u, v) in x.iter().zip(&oracle) {
            assert!((u - v).abs() <= 1e-8 * scale);
        }
    }

    #[test]
    fn whitening_gives_inverse() {
        let f = random_factor(8, 4);
        let v: Vec<f64> = (0..8).map(|i| i as f64 * 0.3 - 1.0).collect();
        let g = f.whiten(&v).unwrap();
        let gtg = f.whiten_t(&g).unwrap();
        let inv = f.solve(&v);
        for (a, b) in gtg.iter().zip(&inv) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn partial_rank_zero_matvec_is_zero() {
        let f = PartialCholeskyFactor::empty(PivotOrder::identity(4));
        assert_eq!(f.matvec(&[1.0, 2.0, 3.0, 4.0]), vec![0.0; 4]);
    }

    proptest::proptest! {
        #[test]
        fn matvec_agrees_with_dense(seed in 0u64..1000, n in 1usize..40) {
            let f = random_factor(n, seed);
            let dense = f.reconstruct_dense();
            let v: Vec<f64> = (0..n).map(|i| ((i as f64) * 1.7 + seed as f64).cos()).collect();
            let a = f.matvec(&v);
            let b = dense.matvec(&v);
            let diff: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let scale = dot(&v, &v).sqrt() * dense.max_abs().max(1.0);
            proptest::prop_assert!(diff <= 1e-10 * scale);
        }
    }
}
