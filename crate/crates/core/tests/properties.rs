use pcvecchia::kaporin::kappa_from_factor;
use pcvecchia::kernels::{Dataset, KernelOracle, KernelSpec};
use pcvecchia::linalg::sym_eigen;
use pcvecchia::oracle::{materialize, CountingOracle, EntryOracle};
use pcvecchia::partial_cholesky::{choose_pivots, PivotChooser};
use pcvecchia::solvers::{logdet_stochastic, pcg, PcgOptions};
use pcvecchia::sparsity::{choose_pattern, SparsityChooser};
use pcvecchia::vecchia::{build_hybrid_from_partial, build_vecchia};
use pcvecchia::{DenseSym, PivotOrder, SparsityPattern};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Random PSD matrix of rank at most `k`, plus `ridge` on the diagonal.
fn psd(n: usize, k: usize, ridge: f64, seed: u64) -> DenseSym {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g: Vec<f64> = (0..n * k).map(|_| rng.sample(StandardNormal)).collect();
    DenseSym::from_fn(n, |i, j| {
        (0..k).map(|c| g[i * k + c] * g[j * k + c]).sum::<f64>() + if i == j { ridge } else { 0.0 }
    })
}

fn min_max_eig(a: &DenseSym) -> (f64, f64) {
    let v = sym_eigen(a).values;
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

fn points(n: usize, d: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p: Vec<f64> = (0..n * d).map(|_| rng.sample(StandardNormal)).collect();
    Dataset::new(p, n, d, None).unwrap()
}

fn chooser(rule: u8, seed: u64) -> PivotChooser {
    match rule {
        0 => PivotChooser::rpc(seed),
        1 => PivotChooser::sds(seed),
        2 => PivotChooser::cpc(seed),
        _ => PivotChooser::fps(seed),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn kernel_oracle_is_symmetric_and_psd(seed in 0u64..1000, n in 2usize..30, d in 1usize..5) {
        let data = points(n, d, seed);
        let k = KernelOracle::new(&data, KernelSpec::rbf(0.0).unwrap());
        for i in 0..n {
            for j in 0..n {
                prop_assert_eq!(k.entry(i, j), k.entry(j, i));
            }
        }
        let (lo, hi) = min_max_eig(&materialize(&k));
        prop_assert!(lo >= -1e-10 * hi);
    }

    #[test]
    fn counting_oracle_counts_each_request(seed in 0u64..1000, reqs in prop::collection::vec((0usize..6, 0usize..6), 0..40)) {
        let a = psd(6, 3, 0.0, seed);
        let c = CountingOracle::new(&a);
        for (k, &(i, j)) in reqs.iter().enumerate() {
            let before = c.lookup_count();
            c.entry(i, j);
            prop_assert_eq!(c.lookup_count(), before + 1);
            prop_assert_eq!(c.lookup_count(), k as u64 + 1);
        }
    }

    #[test]
    fn pivot_order_accepts_exactly_bijections(v in prop::collection::vec(0usize..8, 0..8)) {
        let mut sorted = v.clone();
        sorted.sort_unstable();
        let bijective = sorted == (0..v.len()).collect::<Vec<_>>();
        prop_assert_eq!(PivotOrder::new(v).is_ok(), bijective);
    }

    #[test]
    fn pattern_rows_are_sorted_and_earlier(sets in prop::collection::vec(prop::collection::vec(0usize..10, 0..5), 1..10)) {
        let valid = sets.iter().enumerate().all(|(i, s)| s.iter().all(|&j| j < i));
        match SparsityPattern::new(sets.clone()) {
            Ok(p) => {
                prop_assert!(valid);
                for i in 0..p.len() {
                    prop_assert!(p.row(i).windows(2).all(|w| w[0] < w[1]));
                    prop_assert!(p.row(i).iter().all(|&j| j < i));
                }
            }
            Err(_) => prop_assert!(!valid),
        }
    }

    #[test]
    fn partial_cholesky_is_psd_and_exact_on_pivots(seed in 0u64..1000, n in 2usize..25, rule in 0u8..4, rank_frac in 0.0f64..1.0) {
        let a = psd(n, 1 + n / 2, 0.0, seed);
        let r = ((n as f64) * rank_frac) as usize;
        let (order, f) = choose_pivots(&a, &chooser(rule, seed), r);
        prop_assert!(f.d().iter().all(|&d| d >= 0.0));
        let ahat = f.reconstruct_dense();
        let (lo, hi) = min_max_eig(&ahat);
        prop_assert!(lo >= -1e-10 * hi.max(1.0));
        let scale = (0..n).map(|i| a.get(i, i)).fold(0.0, f64::max);
        for &u in &order.as_slice()[..f.rank()] {
            prop_assert!((a.get(u, u) - ahat.get(u, u)).abs() <= 1e-10 * scale);
        }
        // the residual never goes negative on the diagonal
        for i in 0..n {
            prop_assert!(a.get(i, i) - ahat.get(i, i) >= -1e-10 * scale);
        }
        let (again, _) = choose_pivots(&a, &chooser(rule, seed), r);
        prop_assert_eq!(order, again);
    }

    #[test]
    fn vecchia_factor_is_psd(seed in 0u64..1000, n in 2usize..25, keep in 0.0f64..1.0) {
        let a = psd(n, 1 + n / 3, 0.0, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 7);
        let sets = (0..n).map(|i| (0..i).filter(|_| rng.random::<f64>() < keep).collect()).collect();
        let f = build_vecchia(&a, &PivotOrder::identity(n), &SparsityPattern::new(sets).unwrap());
        prop_assert!(f.diag().iter().all(|&d| d >= 0.0));
        let ahat = f.reconstruct_dense();
        for i in 0..n {
            for j in 0..n {
                prop_assert!((ahat.get(i, j) - ahat.get(j, i)).abs() <= 1e-10 * (1.0 + ahat.get(i, i).abs()));
            }
        }
        let (lo, hi) = min_max_eig(&ahat);
        prop_assert!(lo >= -1e-9 * hi.max(1.0));
    }

    #[test]
    fn chosen_patterns_respect_q(seed in 0u64..1000, n in 2usize..30, q in 0usize..5, omp in any::<bool>(), r in 0usize..6) {
        let a = psd(n, n, 0.1, seed);
        let (_, partial) = choose_pivots(&a, &PivotChooser::rpc(seed), r.min(n));
        let chooser = if omp { SparsityChooser::omp(q) } else { SparsityChooser::nn(q) };
        let p = choose_pattern(&a, &partial, &chooser);
        prop_assert_eq!(p.len(), n);
        for i in 0..n {
            let row = p.row(i);
            prop_assert!(row.len() <= q);
            prop_assert!(row.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(row.iter().all(|&j| j < i));
        }
    }

    #[test]
    fn kappa_is_nonnegative_and_sums_rows(seed in 0u64..1000, n in 2usize..25, q in 0usize..4) {
        let a = psd(n, n, 0.05, seed);
        let (_, partial) = choose_pivots(&a, &PivotChooser::rpc(seed), n / 4);
        let pattern = choose_pattern(&a, &partial, &SparsityChooser::nn(q));
        let f = build_hybrid_from_partial(&a, &partial, &pattern);
        let rep = kappa_from_factor(&a, &f);
        prop_assert!(!rep.infinite);
        prop_assert!(rep.log_kappa >= -1e-9);
        let sum: f64 = rep.per_row_log_terms.iter().sum();
        prop_assert!((sum - rep.log_kappa).abs() <= 1e-9 * rep.log_kappa.abs().max(1.0));
    }

    #[test]
    fn pcg_recurrence_tracks_true_residual(seed in 0u64..1000, n in 2usize..40) {
        let a = psd(n, n, 0.01, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 3);
        let b: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let (_, partial) = choose_pivots(&a, &PivotChooser::rpc(seed), n / 5);
        let f = build_hybrid_from_partial(&a, &partial, &SparsityPattern::empty(n));
        let opts = PcgOptions { tol: 1e-10, max_iter: 2 * n, keep_iterates: true, ..PcgOptions::default() };
        let t = pcg(|v: &[f64]| a.matvec(v), &f, &b, &opts).unwrap();
        for (x, tracked) in t.iterates.unwrap().iter().zip(&t.residual_norms) {
            let ax = a.matvec(x);
            let r: f64 = b.iter().zip(&ax).map(|(bi, ai)| (bi - ai).powi(2)).sum::<f64>().sqrt();
            prop_assert!((r - tracked).abs() <= 1e-6 * t.rhs_norm);
        }
    }

    #[test]
    fn exact_factor_gives_zero_quadratic_forms(seed in 0u64..1000, n in 2usize..20) {
        let a = psd(n, n, 0.1, seed);
        let f = build_vecchia(&a, &PivotOrder::identity(n), &SparsityPattern::full(n));
        let est = logdet_stochastic(|v: &[f64]| a.matvec(v), &f, 4, n, seed).unwrap();
        for s in &est.samples {
            prop_assert!(s.abs() <= 1e-8 * n as f64);
        }
    }

    #[test]
    fn standardized_columns_have_unit_moments(seed in 0u64..1000, n in 2usize..40, d in 1usize..4, constant in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p: Vec<f64> = (0..n * d)
            .map(|k| if constant && k % d == 0 { 3.5 } else { 10.0 * rng.random::<f64>() - 2.0 })
            .collect();
        let mut data = Dataset::new(p, n, d, None).unwrap();
        data.standardize();
        for c in 0..d {
            let col: Vec<f64> = (0..n).map(|i| data.point(i)[c]).collect();
            let mean = col.iter().sum::<f64>() / n as f64;
            let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            prop_assert!(mean.abs() <= 1e-8);
            if constant && c == 0 {
                prop_assert!(col.iter().all(|&x| x == 0.0));
            } else {
                prop_assert!((var - 1.0).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn negative_ridge_is_rejected(mu in -1e6f64..0.0) {
        prop_assume!(mu < 0.0);
        prop_assert!(KernelSpec::rbf(mu).is_err());
    }
}
