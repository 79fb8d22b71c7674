//! Partial pivoted Cholesky and pivot selection rules.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factor::PartialCholeskyFactor;
use crate::linalg::{DenseSym, PINV_CUTOFF};
use crate::oracle::{materialize, EntryOracle, PivotOrder};

/// Pivots whose residual diagonal falls at or below this fraction of the
/// trace are not eligible for selection.
pub const ELIGIBILITY_CUTOFF: f64 = 1e-12;

const PAR_MIN: usize = 4096;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PivotRule {
    AdaptiveSearch,
    Rpc,
    Sds,
    Cpc,
    Fps,
    Fixed(PivotOrder),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PivotChooser {
    pub rule: PivotRule,
    pub seed: u64,
    /// Adaptive search only: evaluate every candidate from scratch instead of
    /// with the incremental Schur complement formula.
    #[serde(default)]
    pub full_recompute: bool,
}

impl PivotChooser {
    pub fn new(rule: PivotRule, seed: u64) -> Self {
        PivotChooser {
            rule,
            seed,
            full_recompute: false,
        }
    }

    pub fn rpc(seed: u64) -> Self {
        Self::new(PivotRule::Rpc, seed)
    }

    pub fn sds(seed: u64) -> Self {
        Self::new(PivotRule::Sds, seed)
    }

    pub fn cpc(seed: u64) -> Self {
        Self::new(PivotRule::Cpc, seed)
    }

    pub fn fps(seed: u64) -> Self {
        Self::new(PivotRule::Fps, seed)
    }

    pub fn adaptive_search() -> Self {
        Self::new(PivotRule::AdaptiveSearch, 0)
    }

    pub fn fixed(order: PivotOrder) -> Self {
        Self::new(PivotRule::Fixed(order), 0)
    }
}

/// Residual and pointwise distances of every index to the current pivot set.
#[derive(Clone, Debug)]
pub struct DistanceState {
    /// `d_A(e_i, span{e_j : j in R})^2`.
    pub residual_diag: Vec<f64>,
    /// `min_{j in R} d_A(e_i, e_j)^2`, or `A(i,i)` while `R` is empty.
    pub pointwise_dists: Vec<f64>,
    diag: Vec<f64>,
    selected: Vec<bool>,
}

impl DistanceState {
    /// Reads the `n` diagonal entries.
    pub fn new<O: EntryOracle + ?Sized>(oracle: &O) -> Self {
        let n = oracle.dim();
        let diag: Vec<f64> = (0..n).map(|i| oracle.entry(i, i)).collect();
        DistanceState {
            residual_diag: diag.iter().map(|&d| d.max(0.0)).collect(),
            pointwise_dists: diag.iter().map(|&d| d.max(0.0)).collect(),
            diag,
            selected: vec![false; n],
        }
    }

    pub fn diag(&self) -> &[f64] {
        &self.diag
    }

    pub fn trace(&self) -> f64 {
        self.diag.iter().sum()
    }

    /// Updates both distance vectors after pivot `u` with column `col = A(., u)`
    /// and new factor column `f` with pivot value `d`.
    fn update(&mut self, u: usize, col: &[f64], f: &[f64], d: f64) {
        let diag = &self.diag;
        let au = diag[u];
        let first = !self.selected.iter().any(|&s| s);
        let upd = |(i, (res, pw)): (usize, (&mut f64, &mut f64))| {
            *res = (*res - f[i] * f[i] * d).max(0.0);
            let dist = (diag[i] - 2.0 * col[i] + au).max(0.0);
            *pw = if first { dist } else { pw.min(dist) };
        };
        if self.diag.len() >= PAR_MIN {
            self.residual_diag
                .par_iter_mut()
                .zip(self.pointwise_dists.par_iter_mut())
                .enumerate()
                .for_each(upd);
        } else {
            self.residual_diag
                .iter_mut()
                .zip(self.pointwise_dists.iter_mut())
                .enumerate()
                .for_each(upd);
        }
        self.residual_diag[u] = 0.0;
        self.pointwise_dists[u] = 0.0;
        self.selected[u] = true;
    }
}

/// Incremental Cholesky state shared by all pivot rules.
struct Builder<'a, O: ?Sized> {
    oracle: &'a O,
    n: usize,
    cap: usize,
    /// Row-major `n x cap`.
    f: Vec<f64>,
    d: Vec<f64>,
    pivots: Vec<usize>,
}

impl<'a, O: EntryOracle + ?Sized> Builder<'a, O> {
    fn new(oracle: &'a O, cap: usize) -> Self {
        let n = oracle.dim();
        Builder {
            oracle,
            n,
            cap,
            f: vec![0.0; n * cap],
            d: Vec::with_capacity(cap),
            pivots: Vec::with_capacity(cap),
        }
    }

    /// Reads column `u` (n lookups) and appends one factor column.
    /// Returns the column of `A` and of `F`.
    fn push(&mut self, u: usize) -> (Vec<f64>, Vec<f64>) {
        let (n, cap, k) = (self.n, self.cap, self.pivots.len());
        let oracle = self.oracle;
        let col: Vec<f64> = if n >= PAR_MIN {
            (0..n).into_par_iter().map(|i| oracle.entry(i, u)).collect()
        } else {
            (0..n).map(|i| oracle.entry(i, u)).collect()
        };
        let fu: Vec<f64> = (0..k).map(|j| self.f[u * cap + j] * self.d[j]).collect();
        let f = &self.f;
        let resid = |i: usize| -> f64 {
            let row = &f[i * cap..i * cap + k];
            col[i] - row.iter().zip(&fu).map(|(a, b)| a * b).sum::<f64>()
        };
        let v: Vec<f64> = if n >= PAR_MIN {
            (0..n).into_par_iter().map(resid).collect()
        } else {
            (0..n).map(resid).collect()
        };
        let pivot = v[u];
        let mut fcol = vec![0.0; n];
        if pivot > PINV_CUTOFF * col[u].abs() && pivot > 0.0 {
            for i in 0..n {
                fcol[i] = v[i] / pivot;
            }
            for &p in &self.pivots {
                fcol[p] = 0.0;
            }
            fcol[u] = 1.0;
            self.d.push(pivot);
        } else {
            fcol[u] = 1.0;
            self.d.push(0.0);
        }
        for i in 0..n {
            self.f[i * cap + k] = fcol[i];
        }
        self.pivots.push(u);
        (col, fcol)
    }

    fn finish(self) -> PartialCholeskyFactor {
        let r = self.pivots.len();
        let order = PivotOrder::from_prefix(self.n, &self.pivots).expect("pivots are distinct");
        let f = if r == self.cap {
            self.f
        } else {
            let mut f = Vec::with_capacity(self.n * r);
            for i in 0..self.n {
                f.extend_from_slice(&self.f[i * self.cap..i * self.cap + r]);
            }
            f
        };
        PartialCholeskyFactor::new(order, r, f, self.d).expect("consistent by construction")
    }
}

/// Rank-`r` partial Cholesky on the first `r` pivots of `order`.
/// Performs exactly `r * n` entry lookups.
pub fn build_partial_cholesky<O: EntryOracle + ?Sized>(
    oracle: &O,
    order: &PivotOrder,
    r: usize,
) -> PartialCholeskyFactor {
    let n = oracle.dim();
    assert_eq!(order.len(), n);
    let r = r.min(n);
    let mut b = Builder::new(oracle, r);
    for &u in &order.as_slice()[..r] {
        b.push(u);
    }
    let mut f = b.finish();
    f.order = order.clone();
    f
}

/// Selects up to `r` pivots and returns the completed order together with the
/// factor built along the way.
pub fn choose_pivots<O: EntryOracle + ?Sized>(
    oracle: &O,
    chooser: &PivotChooser,
    r: usize,
) -> (PivotOrder, PartialCholeskyFactor) {
    let n = oracle.dim();
    let r = r.min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(chooser.seed);
    let order = match &chooser.rule {
        PivotRule::Fixed(order) => {
            let f = build_partial_cholesky(oracle, order, r);
            return (f.order.clone(), f);
        }
        PivotRule::AdaptiveSearch => return adaptive_search(oracle, r, chooser.full_recompute),
        rule => {
            let mut state = DistanceState::new(oracle);
            let floor = ELIGIBILITY_CUTOFF * state.trace();
            let mut b = Builder::new(oracle, r);
            while b.pivots.len() < r {
                let weights: Vec<f64> = match rule {
                    PivotRule::Rpc | PivotRule::Cpc => state
                        .residual_diag
                        .iter()
                        .zip(&state.selected)
                        .map(|(&w, &s)| if s || w <= floor { 0.0 } else { w })
                        .collect(),
                    _ => state
                        .pointwise_dists
                        .iter()
                        .zip(&state.selected)
                        .map(|(&w, &s)| if s { 0.0 } else { w })
                        .collect(),
                };
                let next = match rule {
                    PivotRule::Rpc | PivotRule::Sds => match WeightedIndex::new(&weights) {
                        Ok(dist) => Some(dist.sample(&mut rng)),
                        Err(_) => None,
                    },
                    _ => argmax_random_tie(&weights, &mut rng),
                };
                let Some(u) = next else { break };
                let (col, fcol) = b.push(u);
                let d = *b.d.last().unwrap();
                state.update(u, &col, &fcol, d);
            }
            b.finish()
        }
    };
    (order.order.clone(), order)
}

fn argmax_random_tie(w: &[f64], rng: &mut ChaCha8Rng) -> Option<usize> {
    let max = w.iter().cloned().fold(0.0f64, f64::max);
    if !(max > 0.0) {
        return None;
    }
    let ties: Vec<usize> = (0..w.len()).filter(|&i| w[i] == max).collect();
    ties.choose(rng).copied()
}

/// Greedy minimization of the Kaporin condition number of the partial
/// Cholesky + diagonal approximation. Reads every entry of the matrix.
fn adaptive_search<O: EntryOracle + ?Sized>(
    oracle: &O,
    r: usize,
    full_recompute: bool,
) -> (PivotOrder, PartialCholeskyFactor) {
    let a = materialize(oracle);
    let n = a.n();
    let scale = a.diag().iter().cloned().fold(0.0f64, f64::max);
    let cut = PINV_CUTOFF * scale;
    // Schur complement of the selected block, dense n x n (selected rows zero).
    let mut s = a.values().to_vec();
    let mut selected = vec![false; n];
    let mut pivots = Vec::with_capacity(r);
    while pivots.len() < r {
        let candidates: Vec<usize> = (0..n)
            .filter(|&j| !selected[j] && s[j * n + j] > cut)
            .collect();
        if candidates.is_empty() {
            break;
        }
        let incremental =
            !full_recompute && (0..n).filter(|&i| !selected[i]).all(|i| s[i * n + i] > cut);
        let scores: Vec<f64> = if incremental {
            candidates
                .par_iter()
                .map(|&j| {
                    let sjj = s[j * n + j];
                    let mut total = sjj.ln();
                    for i in 0..n {
                        if selected[i] || i == j {
                            continue;
                        }
                        let sij = s[i * n + j];
                        let v = s[i * n + i] - sij * sij / sjj;
                        if v <= cut {
                            return f64::NEG_INFINITY;
                        }
                        total += v.ln();
                    }
                    total
                })
                .collect()
        } else {
            Vec::new()
        };
        // A non-finite score means the incremental formula hit a singular
        // Schur complement; fall back to exact evaluation for this step.
        let scores = if incremental && scores.iter().all(|v| v.is_finite()) {
            scores
        } else {
            candidates
                .par_iter()
                .map(|&j| {
                    let mut trial = pivots.clone();
                    trial.push(j);
                    let report = crate::kaporin::kappa_partial_diagonal(&a, &trial);
                    if report.infinite {
                        f64::INFINITY
                    } else {
                        report.log_kappa
                    }
                })
                .collect()
        };
        let mut best = 0;
        for k in 1..candidates.len() {
            if scores[k] < scores[best] {
                best = k;
            }
        }
        let u = candidates[best];
        let suu = s[u * n + u];
        let col: Vec<f64> = (0..n).map(|i| s[i * n + u]).collect();
        for i in 0..n {
            for j in 0..n {
                s[i * n + j] -= col[i] * col[j] / suu;
            }
        }
        selected[u] = true;
        pivots.push(u);
    }
    let order = PivotOrder::from_prefix(n, &pivots).expect("distinct pivots");
    let f = build_partial_cholesky(&a, &order, pivots.len());
    (order, f)
}

/// The four pivot-set objectives `(eta_rpc, eta_sds, eta_cpc, eta_fps)`.
///
/// RPC and SDS are sums of squared distances; CPC and FPS are maxima of
/// (unsquared) distances.
pub fn eta_objectives<O: EntryOracle + ?Sized>(oracle: &O, set: &[usize]) -> (f64, f64, f64, f64) {
    let n = oracle.dim();
    let order = PivotOrder::from_prefix(n, set).expect("pivot set must be distinct and in range");
    let f = build_partial_cholesky(oracle, &order, set.len());
    let mut in_set = vec![false; n];
    for &j in set {
        in_set[j] = true;
    }
    let (mut rpc, mut sds, mut cpc, mut fps) = (0.0, 0.0, 0.0f64, 0.0f64);
    for i in 0..n {
        let aii = oracle.entry(i, i);
        let span = if in_set[i] {
            0.0
        } else {
            (aii - f.approx_entry(i, i)).max(0.0)
        };
        let point = if set.is_empty() {
            aii.max(0.0)
        } else {
            set.iter()
                .map(|&j| (aii - 2.0 * oracle.entry(i, j) + oracle.entry(j, j)).max(0.0))
                .fold(f64::INFINITY, f64::min)
        };
        rpc += span;
        sds += point;
        cpc = cpc.max(span.sqrt());
        fps = fps.max(point.sqrt());
    }
    (rpc, sds, cpc, fps)
}

/// `eta_fps(FPS pivots) / min_{|S| <= r} eta_fps(S)` by exhaustive search.
/// Defined as 1 when both are zero.
pub fn verify_fps_ratio<O: EntryOracle + ?Sized>(oracle: &O, r: usize, seed: u64) -> Result<f64> {
    let n = oracle.dim();
    if n > 12 {
        return Err(Error::InvalidInput(format!(
            "exhaustive search needs n <= 12, got {n}"
        )));
    }
    let a = materialize(oracle);
    let (order, f) = choose_pivots(&a, &PivotChooser::fps(seed), r);
    let achieved = fps_objective(&a, &order.as_slice()[..f.rank()]);
    let mut best = f64::INFINITY;
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize > r {
            continue;
        }
        let set: Vec<usize> = (0..n).filter(|&i| mask & (1 << i) != 0).collect();
        best = best.min(fps_objective(&a, &set));
    }
    let tol = 1e-12 * a.diag().iter().cloned().fold(0.0f64, f64::max).sqrt();
    if achieved <= tol && best <= tol {
        return Ok(1.0);
    }
    Ok(achieved / best)
}

fn fps_objective(a: &DenseSym, set: &[usize]) -> f64 {
    (0..a.n())
        .map(|i| {
            let d2 = if set.is_empty() {
                a.get(i, i)
            } else {
                set.iter()
                    .map(|&j| a.get(i, i) - 2.0 * a.get(i, j) + a.get(j, j))
                    .fold(f64::INFINITY, f64::min)
            };
            d2.max(0.0).sqrt()
        })
        .fold(0.0, f64::max)
}
