//! Small dense symmetric linear algebra.
//!
//! Everything here is written against plain `Vec<f64>` storage so that the
//! test oracles built on top of it do not share code paths with any external
//! numerical library. Sizes are expected to stay in the low hundreds for the
//! eigensolvers; the LDL^T factorization is used up to a few thousand.

use crate::error::{Error, Result};

/// Relative eigenvalue cutoff for pseudoinverse applications.
pub const PINV_CUTOFF: f64 = 1e-12;

/// Dense real symmetric matrix, row-major, full storage.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseSym {
    n: usize,
    values: Vec<f64>,
}

impl DenseSym {
    /// Wraps row-major storage. The values must be exactly symmetric.
    pub fn new(n: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n * n {
            return Err(Error::InvalidInput(format!(
                "expected {} values for a {n}x{n} matrix, got {}",
                n * n,
                values.len()
            )));
        }
        for i in 0..n {
            for j in 0..i {
                if values[i * n + j] != values[j * n + i] {
                    return Err(Error::InvalidInput(format!(
                        "matrix is not symmetric at ({i},{j})"
                    )));
                }
            }
        }
        Ok(DenseSym { n, values })
    }

    /// Builds a symmetric matrix by evaluating `f` on the lower triangle.
    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let v = f(i, j);
                values[i * n + j] = v;
                values[j * n + i] = v;
            }
        }
        DenseSym { n, values }
    }

    pub fn zeros(n: usize) -> Self {
        DenseSym {
            n,
            values: vec![0.0; n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        Self::from_fn(diag.len(), |i, j| if i == j { diag[i] } else { 0.0 })
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    /// Sets both `(i,j)` and `(j,i)`.
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.values[i * self.n + j] = v;
        self.values[j * self.n + i] = v;
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n..(i + 1) * self.n]
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    pub fn trace(&self) -> f64 {
        (0..self.n).map(|i| self.get(i, i)).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n);
        (0..self.n).map(|i| dot(self.row(i), x)).collect()
    }

    /// Principal submatrix `A(idx, idx)`.
    pub fn submatrix(&self, idx: &[usize]) -> DenseSym {
        DenseSym::from_fn(idx.len(), |a, b| self.get(idx[a], idx[b]))
    }

    /// `P^T A P`, where position `i` of `perm` holds the original index.
    pub fn permuted(&self, perm: &[usize]) -> DenseSym {
        self.submatrix(perm)
    }

    /// Symmetric matrix from an arbitrary square one, `(M + M^T)/2`.
    pub fn symmetrize(n: usize, m: &[f64]) -> DenseSym {
        DenseSym::from_fn(n, |i, j| 0.5 * (m[i * n + j] + m[j * n + i]))
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Eigendecomposition of a symmetric matrix. Eigenvalues ascend; column `k`
/// of `vectors` (row-major `n x n`) is the eigenvector for `values[k]`.
#[derive(Clone, Debug)]
pub struct SymEigen {
    pub values: Vec<f64>,
    pub vectors: Vec<f64>,
    n: usize,
}

impl SymEigen {
    #[inline]
    pub fn vector_entry(&self, row: usize, k: usize) -> f64 {
        self.vectors[row * self.n + k]
    }

    pub fn max_abs_value(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Indices of eigenvalues above `rel_cutoff * max |lambda|`.
    pub fn positive_indices(&self, rel_cutoff: f64) -> Vec<usize> {
        let cut = rel_cutoff * self.max_abs_value();
        (0..self.values.len())
            .filter(|&k| self.values[k] > cut)
            .collect()
    }
}

/// Cyclic Jacobi eigensolver.
pub fn sym_eigen(a: &DenseSym) -> SymEigen {
    let n = a.n;
    let mut m = a.values.clone();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let frob = m.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 1 && frob > 0.0 {
        let tol = f64::EPSILON * 1e-2 * frob;
        for _sweep in 0..100 {
            let off: f64 = (0..n)
                .flat_map(|p| ((p + 1)..n).map(move |q| (p, q)))
                .map(|(p, q)| m[p * n + q] * m[p * n + q])
                .sum::<f64>()
                .sqrt();
            if off <= tol {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    let apq = m[p * n + q];
                    if apq.abs() <= tol / (n as f64) {
                        continue;
                    }
                    let app = m[p * n + p];
                    let aqq = m[q * n + q];
                    let theta = (aqq - app) / (2.0 * apq);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let akp = m[k * n + p];
                        let akq = m[k * n + q];
                        m[k * n + p] = c * akp - s * akq;
                        m[k * n + q] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let apk = m[p * n + k];
                        let aqk = m[q * n + k];
                        m[p * n + k] = c * apk - s * aqk;
                        m[q * n + k] = s * apk + c * aqk;
                    }
                    for k in 0..n {
                        let vkp = v[k * n + p];
                        let vkq = v[k * n + q];
                        v[k * n + p] = c * vkp - s * vkq;
                        v[k * n + q] = s * vkp + c * vkq;
                    }
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| m[x * n + x].total_cmp(&m[y * n + y]));
    let values = order.iter().map(|&k| m[k * n + k]).collect();
    let mut vectors = vec![0.0; n * n];
    for (new_k, &old_k) in order.iter().enumerate() {
        for row in 0..n {
            vectors[row * n + new_k] = v[row * n + old_k];
        }
    }
    SymEigen { values, vectors, n }
}

/// Minimum-norm solution of `M x = rhs` for symmetric PSD `M`, treating
/// eigenvalues at or below `PINV_CUTOFF * lambda_max` as zero.
pub fn pinv_solve(m: &DenseSym, rhs: &[f64]) -> Vec<f64> {
    let n = m.n;
    let eig = sym_eigen(m);
    let mut x = vec![0.0; n];
    for k in eig.positive_indices(PINV_CUTOFF) {
        let coef: f64 = (0..n)
            .map(|row| eig.vector_entry(row, k) * rhs[row])
            .sum::<f64>()
            / eig.values[k];
        for (row, xr) in x.iter_mut().enumerate() {
            *xr += coef * eig.vector_entry(row, k);
        }
    }
    x
}

/// Lower Cholesky factor (row-major), or `None` when a pivot falls to or
/// below `rel_cutoff * max diag`.
pub fn cholesky(m: &DenseSym, rel_cutoff: f64) -> Option<Vec<f64>> {
    let n = m.n;
    let scale = m.diag().iter().fold(0.0f64, |a, &b| a.max(b));
    if n > 0 && scale <= 0.0 {
        return None;
    }
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s = m.get(i, j) - dot(&l[i * n..i * n + j], &l[j * n..j * n + j]);
            if i == j {
                if s <= rel_cutoff * scale {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Some(l)
}

/// Solves `L L^T x = b` given the row-major lower factor.
pub fn cholesky_solve(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; n];
    for i in 0..n {
        y[i] = (b[i] - dot(&l[i * n..i * n + i], &y[..i])) / l[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in (i + 1)..n {
            s -= l[k * n + i] * y[k];
        }
        y[i] = s / l[i * n + i];
    }
    y
}

/// Solves the symmetric PSD system `M x = rhs`: Cholesky when `M` is
/// comfortably definite, otherwise the minimum-norm pseudoinverse solution.
pub fn psd_solve(m: &DenseSym, rhs: &[f64]) -> Vec<f64> {
    if m.n == 0 {
        return Vec::new();
    }
    match cholesky(m, 1e-10) {
        Some(l) => cholesky_solve(&l, m.n, rhs),
        None => pinv_solve(m, rhs),
    }
}

/// `log det M` for a symmetric positive-definite matrix.
pub fn logdet_spd(m: &DenseSym) -> Result<f64> {
    let l = cholesky(m, 0.0)
        .ok_or_else(|| Error::InvalidInput("matrix is not numerically positive definite".into()))?;
    Ok((0..m.n).map(|i| 2.0 * l[i * m.n + i].ln()).sum())
}

/// Unpivoted `A = L D L^T` for PSD `A`, in the given order.
///
/// Pivots at or below `rel_cutoff * max diag` are set to zero and their
/// column of `L` is left as the unit vector. Returns `(L row-major, d)`.
pub fn ldl_psd(a: &DenseSym, rel_cutoff: f64) -> (Vec<f64>, Vec<f64>) {
    let n = a.n;
    let scale = a.diag().iter().fold(0.0f64, |m, &v| m.max(v));
    let cut = rel_cutoff * scale;
    let mut l = vec![0.0; n * n];
    let mut d = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n {
        w[..i].fill(0.0);
        for j in 0..i {
            if d[j] == 0.0 {
                continue;
            }
            let s = a.get(i, j) - dot(&w[..j], &l[j * n..j * n + j]);
            let lij = s / d[j];
            l[i * n + j] = lij;
            w[j] = lij * d[j];
        }
        let dii = a.get(i, i) - dot(&w[..i], &l[i * n..i * n + i]);
        d[i] = if dii > cut { dii } else { 0.0 };
        l[i * n + i] = 1.0;
    }
    (l, d)
}

/// Eigenvalues of a symmetric tridiagonal matrix together with the first
/// component of each normalized eigenvector (implicit QL with Wilkinson
/// shifts). `off` has length `diag.len() - 1`.
pub fn tridiag_eigen_first_row(diag: &[f64], off: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = diag.len();
    let mut d = diag.to_vec();
    let mut e = vec![0.0; n];
    e[..n.saturating_sub(1)].copy_from_slice(&off[..n.saturating_sub(1)]);
    let mut z = vec![0.0; n];
    if n > 0 {
        z[0] = 1.0;
    }
    for l in 0..n {
        let mut iter = 0;
        loop {
            let mut m = l;
            while m + 1 < n {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= f64::EPSILON * dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            iter += 1;
            if iter > 200 {
                return Err(Error::InvalidInput(
                    "tridiagonal QL iteration did not converge".into(),
                ));
            }
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = g.hypot(1.0);
            g = d[m] - d[l] + e[l] / (g + r.copysign(g));
            let (mut s, mut c, mut p) = (1.0, 1.0, 0.0);
            let mut underflow = false;
            for i in (l..m).rev() {
                let f = s * e[i];
                let b = c * e[i];
                r = f.hypot(g);
                e[i + 1] = r;
                if r == 0.0 {
                    d[i + 1] -= p;
                    e[m] = 0.0;
                    underflow = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + 2.0 * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
                let zf = z[i + 1];
                z[i + 1] = s * z[i] + c * zf;
                z[i] = c * z[i] - s * zf;
            }
            if underflow {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }
    Ok((d, z))
}
