//! Per-row sparsity selection for the residual part of a hybrid factor.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::factor::PartialCholeskyFactor;
use crate::linalg::PINV_CUTOFF;
use crate::oracle::{EntryOracle, PermutedOracle, SparsityPattern};
use crate::vecchia::ResidualOracle;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SparsityRule {
    Nn,
    Omp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SparsityChooser {
    pub rule: SparsityRule,
    /// Nonzeros per row.
    pub q: usize,
    /// Candidate count; 0 means every earlier index is a candidate.
    pub c: usize,
}

impl SparsityChooser {
    /// Nearest neighbors with `c = 10 q` candidates.
    pub fn nn(q: usize) -> Self {
        SparsityChooser {
            rule: SparsityRule::Nn,
            q,
            c: 10 * q,
        }
    }

    /// Orthogonal matching pursuit with `c = 10 q` candidates.
    pub fn omp(q: usize) -> Self {
        SparsityChooser {
            rule: SparsityRule::Omp,
            q,
            c: 10 * q,
        }
    }

    pub fn with_candidates(mut self, c: usize) -> Self {
        self.c = c;
        self
    }
}

fn by_distance(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// The `c` (or all, when `c == 0`) indices `j` in `lower..i` closest to `i`
/// in the pointwise distance `A(i,i) - 2A(i,j) + A(j,j)`. Sorted ascending.
pub fn choose_candidates<O: EntryOracle + ?Sized>(
    oracle: &O,
    i: usize,
    c: usize,
    lower: usize,
) -> Vec<usize> {
    let aii = oracle.entry(i, i);
    candidates_with_diag(oracle, i, c, lower, aii, |j| oracle.entry(j, j))
}

fn candidates_with_diag<O: EntryOracle + ?Sized>(
    oracle: &O,
    i: usize,
    c: usize,
    lower: usize,
    aii: f64,
    diag: impl Fn(usize) -> f64,
) -> Vec<usize> {
    let span = i.saturating_sub(lower);
    if c == 0 || c >= span {
        return (lower..i).collect();
    }
    let mut d: Vec<(f64, usize)> = (lower..i)
        .map(|j| (aii - 2.0 * oracle.entry(i, j) + diag(j), j))
        .collect();
    d.select_nth_unstable_by(c - 1, by_distance);
    let mut out: Vec<usize> = d[..c].iter().map(|p| p.1).collect();
    out.sort_unstable();
    out
}

/// The `q` candidates closest to `i` in the pointwise residual distance.
pub fn choose_pattern_nn<O: EntryOracle + ?Sized>(
    residual: &O,
    i: usize,
    q: usize,
    candidates: &[usize],
) -> Vec<usize> {
    if q >= candidates.len() {
        let mut out = candidates.to_vec();
        out.sort_unstable();
        return out;
    }
    if q == 0 {
        return Vec::new();
    }
    let rii = residual.entry(i, i);
    let mut d: Vec<(f64, usize)> = candidates
        .iter()
        .map(|&k| (rii - 2.0 * residual.entry(i, k) + residual.entry(k, k), k))
        .collect();
    d.select_nth_unstable_by(q - 1, by_distance);
    let mut out: Vec<usize> = d[..q].iter().map(|p| p.1).collect();
    out.sort_unstable();
    out
}

/// Greedy orthogonal matching pursuit: each step adds the candidate that
/// most reduces the residual-weighted distance from `e_i` to the span of the
/// chosen set. Returns the chosen indices in selection order.
pub fn choose_pattern_omp<O: EntryOracle + ?Sized>(
    residual: &O,
    i: usize,
    q: usize,
    candidates: &[usize],
) -> Vec<usize> {
    omp_trace(residual, i, q, candidates).0
}

/// OMP selection order plus the squared distance after each step
/// (`dists[0]` is `R(i,i)`).
pub fn omp_trace<O: EntryOracle + ?Sized>(
    residual: &O,
    i: usize,
    q: usize,
    candidates: &[usize],
) -> (Vec<usize>, Vec<f64>) {
    let mut cand = candidates.to_vec();
    cand.sort_unstable();
    let m = cand.len();
    let rii = residual.entry(i, i);
    let mut dist = rii.max(0.0);
    let mut dists = vec![dist];
    if q == 0 || m == 0 {
        return (Vec::new(), dists);
    }
    // Correlations <e_i, e_k>_perp and squared norms |e_k|_perp^2.
    let mut corr: Vec<f64> = cand.iter().map(|&k| residual.entry(i, k)).collect();
    let mut norm: Vec<f64> = cand.iter().map(|&k| residual.entry(k, k)).collect();
    let scale = norm.iter().cloned().fold(rii.abs(), f64::max);
    let cut = PINV_CUTOFF * scale;
    // basis[t][k] = <q_t, e_k> for candidate k.
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut alive: Vec<bool> = norm.iter().map(|&g| g > cut).collect();
    let mut chosen = Vec::new();
    while chosen.len() < q {
        let mut best: Option<(usize, f64)> = None;
        for k in 0..m {
            if !alive[k] {
                continue;
            }
            let gain = corr[k] * corr[k] / norm[k];
            if best.is_none_or(|(_, g)| gain > g) {
                best = Some((k, gain));
            }
        }
        let Some((j, gain)) = best else { break };
        chosen.push(cand[j]);
        alive[j] = false;
        dist = (dist - gain).max(0.0);
        dists.push(dist);
        if chosen.len() == q {
            break;
        }
        let gj = norm[j].sqrt();
        let col: Vec<f64> = (0..m)
            .map(|k| {
                if alive[k] {
                    residual.entry(cand[j], cand[k])
                } else {
                    0.0
                }
            })
            .collect();
        let wi = corr[j] / gj;
        let mut w = vec![0.0; m];
        for k in 0..m {
            if !alive[k] {
                continue;
            }
            let proj: f64 = basis.iter().map(|b| b[j] * b[k]).sum();
            w[k] = (col[k] - proj) / gj;
            corr[k] -= wi * w[k];
            norm[k] -= w[k] * w[k];
            if norm[k] <= cut {
                alive[k] = false;
            }
        }
        w[j] = gj;
        basis.push(w);
    }
    (chosen, dists)
}

/// Residual sparsity pattern `Q` for every row past the Cholesky block.
pub fn choose_pattern<O: EntryOracle + ?Sized>(
    oracle: &O,
    partial: &PartialCholeskyFactor,
    chooser: &SparsityChooser,
) -> SparsityPattern {
    let n = partial.n();
    let r = partial.rank();
    let permuted = PermutedOracle::new(oracle, partial.order());
    let residual = ResidualOracle::new(oracle, partial);
    if chooser.q == 0 {
        return SparsityPattern::empty(n);
    }
    let diag: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|j| permuted.entry(j, j))
        .collect();
    let sets: Vec<Vec<usize>> = (0..n)
        .into_par_iter()
        .map(|i| {
            if i <= r {
                return Vec::new();
            }
            let cand = candidates_with_diag(&permuted, i, chooser.c, r, diag[i], |j| diag[j]);
            let mut set = match chooser.rule {
                SparsityRule::Nn => choose_pattern_nn(&residual, i, chooser.q, &cand),
                SparsityRule::Omp => choose_pattern_omp(&residual, i, chooser.q, &cand),
            };
            set.sort_unstable();
            set
        })
        .collect();
    SparsityPattern::new(sets).expect("chosen sets lie below the diagonal")
}
