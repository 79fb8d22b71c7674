//! Preconditioned linear solves and log-determinant estimation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factor::Preconditioner;
use crate::linalg::{axpy, dot, norm2, tridiag_eigen_first_row};

/// `x0 + Ahat^+ (b - A x0)`. Skips the matvec when `x0` is `None`.
pub fn direct_solve<F, P>(a_matvec: F, pre: &P, b: &[f64], x0: Option<&[f64]>) -> Vec<f64>
where
    F: Fn(&[f64]) -> Vec<f64>,
    P: Preconditioner + ?Sized,
{
    match x0 {
        None => pre.solve(b),
        Some(x0) => {
            let ax = a_matvec(x0);
            let r: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
            let mut x = pre.solve(&r);
            axpy(1.0, x0, &mut x);
            x
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcgOptions {
    /// Stop once `|b - A x_t| / |b| <= tol`.
    pub tol: f64,
    pub max_iter: usize,
    pub x0: Option<Vec<f64>>,
    /// Known solution; enables A-norm error tracking (one extra matvec per
    /// iteration).
    pub x_star: Option<Vec<f64>>,
    pub keep_iterates: bool,
}

impl Default for PcgOptions {
    fn default() -> Self {
        PcgOptions {
            tol: 1e-6,
            max_iter: 1000,
            x0: None,
            x_star: None,
            keep_iterates: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    MaxIterations,
    ZeroRhs,
}

#[derive(Clone, Debug, Serialize)]
pub struct PcgTrace {
    pub x: Vec<f64>,
    /// `|r_t|` for `t = 0..=iterations`, from the recurrence.
    pub residual_norms: Vec<f64>,
    pub rhs_norm: f64,
    /// `|x_t - x*|_A` for `t = 0..=iterations`, when `x*` was given.
    pub a_errors: Option<Vec<f64>>,
    #[serde(skip)]
    pub iterates: Option<Vec<Vec<f64>>>,
    pub iterations: usize,
    pub termination: Termination,
}

impl PcgTrace {
    pub fn converged(&self) -> bool {
        self.termination != Termination::MaxIterations
    }

    pub fn relative_residuals(&self) -> Vec<f64> {
        let s = if self.rhs_norm > 0.0 {
            self.rhs_norm
        } else {
            1.0
        };
        self.residual_norms.iter().map(|r| r / s).collect()
    }
}

const BREAKDOWN_TOL: f64 = 1e-14;

/// Preconditioned conjugate gradient with one `A` matvec and one
/// preconditioner solve per iteration.
pub fn pcg<F, P>(a_matvec: F, pre: &P, b: &[f64], opts: &PcgOptions) -> Result<PcgTrace>
where
    F: Fn(&[f64]) -> Vec<f64>,
    P: Preconditioner + ?Sized,
{
    let n = b.len();
    if pre.dim() != n {
        return Err(Error::InvalidInput(format!(
            "preconditioner has dimension {}, right-hand side {n}",
            pre.dim()
        )));
    }
    if !(opts.tol > 0.0) {
        return Err(Error::config("tol", "must be positive"));
    }
    let bnorm = norm2(b);
    if bnorm == 0.0 {
        return Ok(PcgTrace {
            x: vec![0.0; n],
            residual_norms: vec![0.0],
            rhs_norm: 0.0,
            a_errors: opts.x_star.as_ref().map(|_| vec![0.0]),
            iterates: opts.keep_iterates.then(|| vec![vec![0.0; n]]),
            iterations: 0,
            termination: Termination::ZeroRhs,
        });
    }
    let a_error = |x: &[f64]| -> Option<f64> {
        opts.x_star.as_ref().map(|xs| {
            let e: Vec<f64> = x.iter().zip(xs).map(|(a, b)| a - b).collect();
            dot(&e, &a_matvec(&e)).max(0.0).sqrt()
        })
    };
    let mut x = opts.x0.clone().unwrap_or_else(|| vec![0.0; n]);
    let mut r = match &opts.x0 {
        Some(x0) => {
            let ax = a_matvec(x0);
            b.iter().zip(&ax).map(|(b, a)| b - a).collect()
        }
        None => b.to_vec(),
    };
    let mut trace = PcgTrace {
        x: Vec::new(),
        residual_norms: vec![norm2(&r)],
        rhs_norm: bnorm,
        a_errors: a_error(&x).map(|e| vec![e]),
        iterates: opts.keep_iterates.then(|| vec![x.clone()]),
        iterations: 0,
        termination: Termination::MaxIterations,
    };
    if trace.residual_norms[0] <= opts.tol * bnorm {
        trace.termination = Termination::Converged;
        trace.x = x;
        return Ok(trace);
    }
    let mut z = pre.solve(&r);
    let mut rz = dot(&r, &z);
    let mut d = z.clone();
    for t in 1..=opts.max_iter {
        let ad = a_matvec(&d);
        let dad = dot(&d, &ad);
        if !(dad > BREAKDOWN_TOL * norm2(&d) * norm2(&ad)) || dad <= 0.0 {
            return Err(Error::Breakdown {
                iteration: t,
                reason: format!("d^T A d = {dad:e}"),
            });
        }
        let alpha = rz / dad;
        axpy(alpha, &d, &mut x);
        axpy(-alpha, &ad, &mut r);
        let rnorm = norm2(&r);
        trace.residual_norms.push(rnorm);
        if let Some(errs) = trace.a_errors.as_mut() {
            errs.push(a_error(&x).unwrap());
        }
        if let Some(its) = trace.iterates.as_mut() {
            its.push(x.clone());
        }
        trace.iterations = t;
        if rnorm <= opts.tol * bnorm {
            trace.termination = Termination::Converged;
            break;
        }
        z = pre.solve(&r);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for (di, zi) in d.iter_mut().zip(&z) {
            *di = zi + beta * *di;
        }
    }
    trace.x = x;
    Ok(trace)
}

/// Stochastic log-determinant estimate `logdet Ahat + s_t`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogdetEstimate {
    /// Mean of the per-sample quadratic forms.
    pub correction: f64,
    pub samples: Vec<f64>,
    pub t: usize,
    /// Requested Krylov depth.
    pub m: usize,
    pub logdet_direct: f64,
    pub estimate: f64,
    /// Standard error of `correction` (0 for fewer than two samples).
    pub std_error: f64,
}

impl LogdetEstimate {
    fn from_samples(samples: Vec<f64>, m: usize, logdet_direct: f64) -> Self {
        let t = samples.len();
        let correction = if t == 0 {
            0.0
        } else {
            samples.iter().sum::<f64>() / t as f64
        };
        let std_error = if t < 2 {
            0.0
        } else {
            let var = samples
                .iter()
                .map(|s| (s - correction).powi(2))
                .sum::<f64>()
                / (t - 1) as f64;
            (var / t as f64).sqrt()
        };
        LogdetEstimate {
            correction,
            samples,
            t,
            m,
            logdet_direct,
            estimate: logdet_direct + correction,
            std_error,
        }
    }
}

/// Probe vector `i` of the stream `seed`: Gaussian, rescaled to length
/// `sqrt(n)`.
pub fn probe_vector(n: usize, seed: u64, i: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i);
    loop {
        let mut u: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = norm2(&u);
        if norm > 0.0 {
            let s = (n as f64).sqrt() / norm;
            u.iter_mut().for_each(|v| *v *= s);
            return u;
        }
    }
}

/// `u^T log(M) u` approximated on Krylov spaces of each depth in `depths`
/// (one Lanczos run to the largest depth, full reorthogonalization).
pub fn krylov_quadratic_forms<F>(op: F, u: &[f64], depths: &[usize]) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let n = u.len();
    let unorm2 = dot(u, u);
    let max_depth = depths.iter().copied().max().unwrap_or(0).min(n);
    if unorm2 == 0.0 || max_depth == 0 {
        return Ok(vec![0.0; depths.len()]);
    }
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(max_depth);
    basis.push(u.iter().map(|v| v / unorm2.sqrt()).collect());
    let mut alpha = Vec::with_capacity(max_depth);
    let mut beta: Vec<f64> = Vec::with_capacity(max_depth);
    loop {
        let j = basis.len() - 1;
        let mut w = op(&basis[j])?;
        let a = dot(&basis[j], &w);
        alpha.push(a);
        axpy(-a, &basis[j], &mut w);
        if j > 0 {
            axpy(-beta[j - 1], &basis[j - 1], &mut w);
        }
        for _ in 0..2 {
            for q in &basis {
                let c = dot(q, &w);
                axpy(-c, q, &mut w);
            }
        }
        if basis.len() == max_depth {
            break;
        }
        let b = norm2(&w);
        let scale = alpha.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if b <= 1e-12 * scale.max(f64::MIN_POSITIVE) {
            break;
        }
        beta.push(b);
        basis.push(w.into_iter().map(|v| v / b).collect());
    }
    let achieved = alpha.len();
    depths
        .iter()
        .map(|&m| {
            let k = m.min(achieved);
            if k == 0 {
                return Ok(0.0);
            }
            let (theta, tau) = tridiag_eigen_first_row(&alpha[..k], &beta[..k - 1])?;
            let mut s = 0.0;
            for (th, ta) in theta.iter().zip(&tau) {
                if !(*th > 0.0) {
                    return Err(Error::Breakdown {
                        iteration: k,
                        reason: format!("nonpositive Ritz value {th:e}"),
                    });
                }
                s += ta * ta * th.ln();
            }
            Ok(unorm2 * s)
        })
        .collect()
}

/// `M v = G A G^T v` with `Ahat^{-1} = G^T G`.
fn whitened<'a, F, P>(a_matvec: &'a F, pre: &'a P) -> impl Fn(&[f64]) -> Result<Vec<f64>> + 'a
where
    F: Fn(&[f64]) -> Vec<f64> + Sync,
    P: Preconditioner + ?Sized,
{
    move |v: &[f64]| pre.whiten(&a_matvec(&pre.whiten_t(v)?))
}

/// Stochastic estimate of `log det A` from `t` probe vectors and Krylov
/// depth `m`. With `t == 0` only the factor's own log-determinant is used.
pub fn logdet_stochastic<F, P>(
    a_matvec: F,
    pre: &P,
    t: usize,
    m: usize,
    seed: u64,
) -> Result<LogdetEstimate>
where
    F: Fn(&[f64]) -> Vec<f64> + Sync,
    P: Preconditioner + ?Sized,
{
    let mut sweep = logdet_depth_sweep(a_matvec, pre, t, &[m], seed)?;
    Ok(sweep.pop().unwrap())
}

/// Estimates for several Krylov depths on the same probe vectors.
pub fn logdet_depth_sweep<F, P>(
    a_matvec: F,
    pre: &P,
    t: usize,
    depths: &[usize],
    seed: u64,
) -> Result<Vec<LogdetEstimate>>
where
    F: Fn(&[f64]) -> Vec<f64> + Sync,
    P: Preconditioner + ?Sized,
{
    if depths.iter().any(|&m| m < 2) && t > 0 {
        return Err(Error::config("m", "Krylov depth must be at least 2"));
    }
    let direct = pre.logdet()?;
    let n = pre.dim();
    let op = whitened(&a_matvec, pre);
    let per_sample: Vec<Vec<f64>> = (0..t as u64)
        .into_par_iter()
        .map(|i| krylov_quadratic_forms(&op, &probe_vector(n, seed, i), depths))
        .collect::<Result<_>>()?;
    Ok(depths
        .iter()
        .enumerate()
        .map(|(k, &m)| {
            let samples = per_sample.iter().map(|s| s[k]).collect();
            LogdetEstimate::from_samples(samples, m, direct)
        })
        .collect())
}
