//! Entry-wise access to symmetric PSD matrices, orderings, and sparsity
//! patterns.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{psd_solve, DenseSym};

/// A symmetric positive-semidefinite matrix exposed one entry at a time.
///
/// Implementations must be symmetric (`entry(i,j) == entry(j,i)`) and safe to
/// query from several threads at once.
pub trait EntryOracle: Sync {
    fn dim(&self) -> usize;

    fn entry(&self, i: usize, j: usize) -> f64;

    /// Entry requests served so far. Oracles that do not count report 0.
    fn lookup_count(&self) -> u64 {
        0
    }
}

impl EntryOracle for DenseSym {
    fn dim(&self) -> usize {
        self.n()
    }

    #[inline]
    fn entry(&self, i: usize, j: usize) -> f64 {
        self.get(i, j)
    }
}

impl<T: EntryOracle + ?Sized> EntryOracle for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    #[inline]
    fn entry(&self, i: usize, j: usize) -> f64 {
        (**self).entry(i, j)
    }

    fn lookup_count(&self) -> u64 {
        (**self).lookup_count()
    }
}

/// Wraps any oracle and counts every entry request atomically.
#[derive(Debug)]
pub struct CountingOracle<M> {
    inner: M,
    count: AtomicU64,
}

impl<M: EntryOracle> CountingOracle<M> {
    pub fn new(inner: M) -> Self {
        CountingOracle {
            inner,
            count: AtomicU64::new(0),
        }
    }

    pub fn inner(&self) -> &M {
        &self.inner
    }

    pub fn into_inner(self) -> M {
        self.inner
    }

    pub fn reset_lookups(&self) {
        self.count.store(0, Ordering::Relaxed);
    }
}

impl<M: EntryOracle> EntryOracle for CountingOracle<M> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[inline]
    fn entry(&self, i: usize, j: usize) -> f64 {
        self.count.fetch_add(1, Ordering::Relaxed);
        self.inner.entry(i, j)
    }

    fn lookup_count(&self) -> u64 {
        self.count.load(Ordering::Relaxed)
    }
}

/// The permuted view `P^T A P`: `entry(i,j) = A(perm[i], perm[j])`.
pub struct PermutedOracle<'a, O: ?Sized> {
    base: &'a O,
    order: &'a PivotOrder,
}

impl<'a, O: EntryOracle + ?Sized> PermutedOracle<'a, O> {
    pub fn new(base: &'a O, order: &'a PivotOrder) -> Self {
        assert_eq!(base.dim(), order.len());
        PermutedOracle { base, order }
    }
}

impl<O: EntryOracle + ?Sized> EntryOracle for PermutedOracle<'_, O> {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    #[inline]
    fn entry(&self, i: usize, j: usize) -> f64 {
        let p = self.order.as_slice();
        self.base.entry(p[i], p[j])
    }

    fn lookup_count(&self) -> u64 {
        self.base.lookup_count()
    }
}

/// Reads the diagonal once (`n` lookups) and serves it from memory after.
#[derive(Debug)]
pub struct DiagonalCache<M> {
    inner: M,
    diag: Vec<f64>,
}

impl<M: EntryOracle> DiagonalCache<M> {
    pub fn new(inner: M) -> Self {
        let diag = (0..inner.dim()).map(|i| inner.entry(i, i)).collect();
        DiagonalCache { inner, diag }
    }

    pub fn inner(&self) -> &M {
        &self.inner
    }

    pub fn diag(&self) -> &[f64] {
        &self.diag
    }
}

impl<M: EntryOracle> EntryOracle for DiagonalCache<M> {
    fn dim(&self) -> usize {
        self.diag.len()
    }

    #[inline]
    fn entry(&self, i: usize, j: usize) -> f64 {
        if i == j {
            self.diag[i]
        } else {
            self.inner.entry(i, j)
        }
    }

    fn lookup_count(&self) -> u64 {
        self.inner.lookup_count()
    }
}

/// Reads every entry of the lower triangle into a dense matrix.
pub fn materialize<O: EntryOracle + ?Sized>(oracle: &O) -> DenseSym {
    DenseSym::from_fn(oracle.dim(), |i, j| oracle.entry(i, j))
}

/// `A v` by looking up every entry (`n^2` lookups), parallel over rows.
pub fn dense_matvec<O: EntryOracle + ?Sized>(oracle: &O, v: &[f64]) -> Vec<f64> {
    use rayon::prelude::*;
    let n = oracle.dim();
    assert_eq!(v.len(), n);
    (0..n)
        .into_par_iter()
        .map(|i| (0..n).map(|j| oracle.entry(i, j) * v[j]).sum())
        .collect()
}

/// A permutation of `0..n`; position `i` holds the pivot `u_i`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct PivotOrder {
    perm: Vec<usize>,
}

impl PivotOrder {
    pub fn new(perm: Vec<usize>) -> Result<Self> {
        let n = perm.len();
        let mut seen = vec![false; n];
        for &p in &perm {
            if p >= n || seen[p] {
                return Err(Error::InvalidInput(format!(
                    "not a permutation of 0..{n}: index {p}"
                )));
            }
            seen[p] = true;
        }
        Ok(PivotOrder { perm })
    }

    pub fn identity(n: usize) -> Self {
        PivotOrder {
            perm: (0..n).collect(),
        }
    }

    /// Puts `prefix` first, then the remaining indices in ascending order.
    pub fn from_prefix(n: usize, prefix: &[usize]) -> Result<Self> {
        let mut used = vec![false; n];
        let mut perm = Vec::with_capacity(n);
        for &p in prefix {
            if p >= n || used[p] {
                return Err(Error::InvalidInput(format!("bad pivot {p}")));
            }
            used[p] = true;
            perm.push(p);
        }
        perm.extend((0..n).filter(|&i| !used[i]));
        Ok(PivotOrder { perm })
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.perm
    }

    /// `inverse()[orig] = position`.
    pub fn inverse(&self) -> Vec<usize> {
        let mut inv = vec![0; self.perm.len()];
        for (pos, &orig) in self.perm.iter().enumerate() {
            inv[orig] = pos;
        }
        inv
    }

    /// `P^T v`: original coordinates to permuted.
    pub fn to_permuted(&self, v: &[f64]) -> Vec<f64> {
        self.perm.iter().map(|&p| v[p]).collect()
    }

    /// `P v`: permuted coordinates back to original.
    pub fn to_original(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; v.len()];
        for (pos, &orig) in self.perm.iter().enumerate() {
            out[orig] = v[pos];
        }
        out
    }
}

impl TryFrom<Vec<usize>> for PivotOrder {
    type Error = Error;

    fn try_from(v: Vec<usize>) -> Result<Self> {
        PivotOrder::new(v)
    }
}

impl From<PivotOrder> for Vec<usize> {
    fn from(p: PivotOrder) -> Self {
        p.perm
    }
}

/// Per-row index sets `S_i`, each sorted, duplicate-free, and strictly below
/// `i` (positions in the permuted ordering).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<usize>>", into = "Vec<Vec<usize>>")]
pub struct SparsityPattern {
    sets: Vec<Vec<usize>>,
}

impl SparsityPattern {
    /// Validates and normalizes (sorts) the sets.
    pub fn new(mut sets: Vec<Vec<usize>>) -> Result<Self> {
        for (i, s) in sets.iter_mut().enumerate() {
            s.sort_unstable();
            if s.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::InvalidInput(format!("row {i} has duplicates")));
            }
            if let Some(&last) = s.last() {
                if last >= i {
                    return Err(Error::InvalidInput(format!(
                        "row {i} contains index {last} not below the diagonal"
                    )));
                }
            }
        }
        Ok(SparsityPattern { sets })
    }

    pub fn empty(n: usize) -> Self {
        SparsityPattern {
            sets: vec![Vec::new(); n],
        }
    }

    /// `S_i = {0, ..., i-1}`.
    pub fn full(n: usize) -> Self {
        SparsityPattern {
            sets: (0..n).map(|i| (0..i).collect()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.sets[i]
    }

    pub fn rows(&self) -> &[Vec<usize>] {
        &self.sets
    }

    pub fn nnz(&self) -> usize {
        self.sets.iter().map(Vec::len).sum()
    }

    pub fn max_row_len(&self) -> usize {
        self.sets.iter().map(Vec::len).max().unwrap_or(0)
    }

    /// True when every `S_i` here contains the corresponding set of `other`.
    pub fn contains(&self, other: &SparsityPattern) -> bool {
        self.len() == other.len()
            && self
                .sets
                .iter()
                .zip(&other.sets)
                .all(|(a, b)| b.iter().all(|x| a.binary_search(x).is_ok()))
    }
}

impl TryFrom<Vec<Vec<usize>>> for SparsityPattern {
    type Error = Error;

    fn try_from(v: Vec<Vec<usize>>) -> Result<Self> {
        SparsityPattern::new(v)
    }
}

impl From<SparsityPattern> for Vec<Vec<usize>> {
    fn from(p: SparsityPattern) -> Self {
        p.sets
    }
}

/// Squared `A`-weighted distance from `e_i` to `span{e_j : j in S}`, i.e. the
/// Schur complement `A(i,i) - A(i,S) A(S,S)^+ A(S,i)`, clamped at zero.
pub fn weighted_distance_sq<O: EntryOracle + ?Sized>(oracle: &O, i: usize, set: &[usize]) -> f64 {
    debug_assert!(!set.contains(&i));
    let aii = oracle.entry(i, i);
    if set.is_empty() {
        return aii.max(0.0);
    }
    let gram = DenseSym::from_fn(set.len(), |a, b| oracle.entry(set[a], set[b]));
    let v: Vec<f64> = set.iter().map(|&j| oracle.entry(j, i)).collect();
    let x = psd_solve(&gram, &v);
    let proj: f64 = x.iter().zip(&v).map(|(a, b)| a * b).sum();
    (aii - proj).max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::sym_eigen;
    use rand::{Rng, SeedableRng};

    fn random_psd(n: usize, rank: usize, seed: u64) -> DenseSym {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let g: Vec<f64> = (0..n * rank).map(|_| rng.random_range(-1.0..1.0)).collect();
        DenseSym::from_fn(n, |i, j| {
            (0..rank).map(|k| g[i * rank + k] * g[j * rank + k]).sum()
        })
    }

    #[test]
    fn distance_to_empty_span_is_diagonal() {
        let a = DenseSym::identity(3);
        assert_eq!(weighted_distance_sq(&a, 0, &[]), 1.0);
    }

    #[test]
    fn distance_in_ones_nullspace_is_zero() {
        let a = DenseSym::new(2, vec![1.0; 4]).unwrap();
        assert!(weighted_distance_sq(&a, 1, &[0]).abs() < 1e-15);
    }

    /// Oracle: d_A(e_i, span)^2 = min over x of (e_i - sum x_j e_j)^T A (...)
    /// evaluated through A^{1/2} from a full eigendecomposition; the residual
    /// of projecting A^{1/2} e_i onto the columns A^{1/2} e_j.
    #[test]
    fn distance_matches_eigen_projection_oracle() {
        let a = random_psd(6, 6, 11);
        let eig = sym_eigen(&a);
        let half = |row: usize, col: usize| -> f64 {
            (0..6)
                .map(|k| {
                    eig.vector_entry(row, k)
                        * eig.values[k].max(0.0).sqrt()
                        * eig.vector_entry(col, k)
                })
                .sum()
        };
        let (i, set) = (4usize, [0usize, 2]);
        let target: Vec<f64> = (0..6).map(|r| half(r, i)).collect();
        let cols: Vec<Vec<f64>> = set
            .iter()
            .map(|&j| (0..6).map(|r| half(r, j)).collect())
            .collect();
        // Gram-Schmidt projection.
        let mut basis: Vec<Vec<f64>> = Vec::new();
        for c in cols {
            let mut v = c.clone();
            for b in &basis {
                let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
            }
            let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            basis.push(v.iter().map(|x| x / nv).collect());
        }
        let mut res = target.clone();
        for b in &basis {
            let p: f64 = res.iter().zip(b).map(|(x, y)| x * y).sum();
            res.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let expected: f64 = res.iter().map(|x| x * x).sum();
        let got = weighted_distance_sq(&a, i, &set);
        assert!((got - expected).abs() < 1e-10, "{got} vs {expected}");
    }

    #[test]
    fn counting_oracle_counts_each_request() {
        let a = CountingOracle::new(DenseSym::identity(4));
        let _ = a.entry(0, 1);
        let _ = a.entry(2, 2);
        assert_eq!(a.lookup_count(), 2);
        a.reset_lookups();
        assert_eq!(a.lookup_count(), 0);
    }

    #[test]
    fn pattern_validation() {
        assert!(SparsityPattern::new(vec![vec![], vec![0], vec![1, 0]]).is_ok());
        assert!(SparsityPattern::new(vec![vec![], vec![1]]).is_err());
        assert!(SparsityPattern::new(vec![vec![], vec![], vec![0, 0]]).is_err());
        let p = SparsityPattern::new(vec![vec![], vec![0], vec![1, 0]]).unwrap();
        assert_eq!(p.row(2), &[0, 1]);
    }

    #[test]
    fn pivot_order_prefix_and_inverse() {
        let p = PivotOrder::from_prefix(5, &[3, 1]).unwrap();
        assert_eq!(p.as_slice(), &[3, 1, 0, 2, 4]);
        let inv = p.inverse();
        assert_eq!(inv[3], 0);
        assert_eq!(inv[4], 4);
        let v = [10.0, 11.0, 12.0, 13.0, 14.0];
        assert_eq!(p.to_original(&p.to_permuted(&v)), v.to_vec());
        assert!(PivotOrder::new(vec![0, 0, 1]).is_err());
    }

    proptest::proptest! {
        #[test]
        fn projection_is_monotone(seed in 0u64..500, i in 0usize..7) {
            let a = random_psd(7, 4, seed);
            let others: Vec<usize> = (0..7).filter(|&j| j != i).collect();
            let small = &others[..2];
            let big = &others[..4];
            let ds = weighted_distance_sq(&a, i, small);
            let db = weighted_distance_sq(&a, i, big);
            proptest::prop_assert!(db <= ds + 1e-10 * a.max_abs());
            proptest::prop_assert!((weighted_distance_sq(&a, i, &[]) - a.get(i, i)).abs() < 1e-15);
        }
    }

    #[test]
    fn diagonal_cache_reads_each_diagonal_once() {
        let a = DenseSym::from_fn(4, |i, j| 1.0 / (1 + i + j) as f64);
        let c = DiagonalCache::new(CountingOracle::new(&a));
        assert_eq!(c.lookup_count(), 4);
        for _ in 0..3 {
            for i in 0..4 {
                assert_eq!(c.entry(i, i), a.get(i, i));
            }
        }
        assert_eq!(c.lookup_count(), 4);
        assert_eq!(c.entry(1, 2), a.get(1, 2));
        assert_eq!(c.lookup_count(), 5);
    }
}
