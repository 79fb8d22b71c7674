//! Low-rank-plus-shift preconditioners built from a partial Cholesky factor
//! of the unregularized kernel:
//!
//! * `Khat + lambda_r (I - U U^T) + mu I` (eigenvalue-filled nullspace)
//! * `Khat + mu I` (plain shift)
//!
//! where `Khat = U diag(s) U^T` and `lambda_r` is its `r`-th largest
//! eigenvalue.

use crate::error::{Error, Result};
use crate::factor::{PartialCholeskyFactor, Preconditioner};
use crate::linalg::{dot, sym_eigen, DenseSym};

#[derive(Clone, Debug)]
pub struct LowRankShift {
    n: usize,
    /// Orthonormal `n x k`, row-major.
    basis: Vec<f64>,
    /// Eigenvalues of `Khat` on the basis, plus `mu`.
    range_values: Vec<f64>,
    /// Value on the orthogonal complement.
    tail: f64,
}

impl LowRankShift {
    /// `Khat + lambda_r (I - U U^T) + mu I`.
    pub fn filled(partial: &PartialCholeskyFactor, mu: f64) -> Result<Self> {
        Self::build(partial, mu, true)
    }

    /// `Khat + mu I`.
    pub fn shifted(partial: &PartialCholeskyFactor, mu: f64) -> Result<Self> {
        Self::build(partial, mu, false)
    }

    fn build(partial: &PartialCholeskyFactor, mu: f64, fill: bool) -> Result<Self> {
        let n = partial.n();
        let r = partial.rank();
        // W = F D^{1/2}; W^T W = V S V^T; U = W V S^{-1/2}.
        let w: Vec<f64> = (0..n)
            .flat_map(|i| {
                let row = partial.f_row(i);
                (0..r).map(move |k| row[k] * partial.d()[k].sqrt())
            })
            .collect();
        let gram = DenseSym::from_fn(r, |a, b| (0..n).map(|i| w[i * r + a] * w[i * r + b]).sum());
        let eig = sym_eigen(&gram);
        let keep = eig.positive_indices(1e-12);
        let k = keep.len();
        let mut basis = vec![0.0; n * k];
        for (c, &e) in keep.iter().enumerate() {
            let s = eig.values[e].sqrt();
            for i in 0..n {
                let v: f64 = (0..r).map(|a| w[i * r + a] * eig.vector_entry(a, e)).sum();
                basis[i * k + c] = v / s;
            }
        }
        // r-th largest eigenvalue; zero if Khat has rank below r.
        let lambda_r = if k == r && r > 0 {
            eig.values[keep[0]]
        } else {
            0.0
        };
        let tail = mu + if fill { lambda_r } else { 0.0 };
        if !(tail > 0.0) && k < n {
            return Err(Error::NonSpdFactor {
                index: k,
                value: tail,
            });
        }
        Ok(LowRankShift {
            n,
            basis,
            range_values: keep.iter().map(|&e| eig.values[e] + mu).collect(),
            tail,
        })
    }

    fn k(&self) -> usize {
        self.range_values.len()
    }

    /// `U^T v`.
    fn project(&self, v: &[f64]) -> Vec<f64> {
        let k = self.k();
        let mut c = vec![0.0; k];
        for i in 0..self.n {
            for j in 0..k {
                c[j] += self.basis[i * k + j] * v[i];
            }
        }
        c
    }

    /// `g(s) on range, g(tail) on complement` applied to `v`.
    fn spectral(&self, v: &[f64], g: impl Fn(f64) -> f64) -> Vec<f64> {
        let k = self.k();
        let c = self.project(v);
        let gt = g(self.tail);
        let scaled: Vec<f64> = c
            .iter()
            .zip(&self.range_values)
            .map(|(c, &s)| c * (g(s) - gt))
            .collect();
        (0..self.n)
            .map(|i| gt * v[i] + dot(&self.basis[i * k..(i + 1) * k], &scaled))
            .collect()
    }
}

impl Preconditioner for LowRankShift {
    fn dim(&self) -> usize {
        self.n
    }

    fn apply(&self, v: &[f64]) -> Vec<f64> {
        self.spectral(v, |s| s)
    }

    fn solve(&self, b: &[f64]) -> Vec<f64> {
        self.spectral(b, |s| if s > 0.0 { 1.0 / s } else { 0.0 })
    }

    fn logdet(&self) -> Result<f64> {
        let head: f64 = self.range_values.iter().map(|s| s.ln()).sum();
        Ok(head + (self.n - self.k()) as f64 * self.tail.ln())
    }

    fn whiten(&self, v: &[f64]) -> Result<Vec<f64>> {
        Ok(self.spectral(v, |s| 1.0 / s.sqrt()))
    }

    fn whiten_t(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.whiten(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{logdet_spd, pinv_solve};
    use crate::oracle::PivotOrder;
    use crate::partial_cholesky::build_partial_cholesky;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (DenseSym, PartialCholeskyFactor) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g: Vec<f64> = (0..60).map(|_| rng.random_range(-1.0..1.0)).collect();
        let k = DenseSym::from_fn(10, |i, j| (0..6).map(|c| g[i * 6 + c] * g[j * 6 + c]).sum());
        let f = build_partial_cholesky(&k, &PivotOrder::identity(10), 3);
        (k, f)
    }

    /// Dense oracle: build the matrix from its definition and compare.
    #[test]
    fn filled_matches_dense_definition() {
        let (_, f) = setup();
        let mu = 0.01;
        let p = LowRankShift::filled(&f, mu).unwrap();
        let khat = f.reconstruct_dense();
        let eig = sym_eigen(&khat);
        let lambda_r = eig.values[10 - 3];
        let proj = DenseSym::from_fn(10, |i, j| {
            (7..10)
                .map(|c| eig.vector_entry(i, c) * eig.vector_entry(j, c))
                .sum()
        });
        let dense = DenseSym::from_fn(10, |i, j| {
            let id = if i == j { 1.0 } else { 0.0 };
            khat.get(i, j) + lambda_r * (id - proj.get(i, j)) + mu * id
        });
        let v: Vec<f64> = (0..10).map(|i| (i as f64).sin()).collect();
        let got = p.apply(&v);
        let want = dense.matvec(&v);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-10);
        }
        let x = p.solve(&v);
        let want = pinv_solve(&dense, &v);
        for (a, b) in x.iter().zip(&want) {
            assert!((a - b).abs() < 1e-8 * want.iter().fold(1.0f64, |m, v| m.max(v.abs())));
        }
        assert!((p.logdet().unwrap() - logdet_spd(&dense).unwrap()).abs() < 1e-8);
    }

    #[test]
    fn shifted_matches_dense_definition() {
        let (_, f) = setup();
        let p = LowRankShift::shifted(&f, 0.1).unwrap();
        let khat = f.reconstruct_dense();
        let dense = DenseSym::from_fn(10, |i, j| khat.get(i, j) + if i == j { 0.1 } else { 0.0 });
        let v = vec![1.0; 10];
        for (a, b) in p.apply(&v).iter().zip(dense.matvec(&v)) {
            assert!((a - b).abs() < 1e-10);
        }
        let w = p.whiten(&v).unwrap();
        let back = p.whiten_t(&w).unwrap();
        for (a, b) in back.iter().zip(p.solve(&v)) {
            assert!((a - b).abs() < 1e-10);
        }
        assert!(LowRankShift::shifted(&f, 0.0).is_err());
    }
}
