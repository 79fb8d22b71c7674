//! Point datasets, CSV ingestion, and Gaussian kernel oracles.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::EntryOracle;

/// When column statistics are computed relative to row truncation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Standardize {
    /// Statistics of the whole file, then keep the first `n_max` rows.
    #[default]
    FullFile,
    /// Keep the first `n_max` rows, then standardize them.
    Subsample,
    None,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    pub n_max: Option<usize>,
    pub standardize: Standardize,
}

/// `n` points in `d` dimensions, row-major, with optional numeric labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub(crate) points: Vec<f64>,
    pub(crate) n: usize,
    pub(crate) d: usize,
    pub(crate) labels: Option<Vec<f64>>,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn new(points: Vec<f64>, n: usize, d: usize, labels: Option<Vec<f64>>) -> Result<Self> {
        if n == 0 || d == 0 {
            return Err(Error::EmptyDataset);
        }
        if points.len() != n * d {
            return Err(Error::InvalidInput(format!(
                "{} values for {n} points in {d} dimensions",
                points.len()
            )));
        }
        if labels.as_ref().is_some_and(|l| l.len() != n) {
            return Err(Error::InvalidInput(
                "label count differs from point count".into(),
            ));
        }
        Ok(Dataset {
            points,
            n,
            d,
            labels,
            provenance: Provenance::default(),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.d..(i + 1) * self.d]
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn labels(&self) -> Option<&[f64]> {
        self.labels.as_deref()
    }

    /// Keeps the first `n` rows.
    pub fn truncate(&mut self, n: usize) {
        if n < self.n && n > 0 {
            self.n = n;
            self.points.truncate(n * self.d);
            if let Some(l) = self.labels.as_mut() {
                l.truncate(n);
            }
        }
    }

    /// Centers every column and scales it to unit sample variance; constant
    /// columns become zero.
    pub fn standardize(&mut self) {
        let (n, d) = (self.n, self.d);
        for c in 0..d {
            let mean = (0..n).map(|i| self.points[i * d + c]).sum::<f64>() / n as f64;
            let var = if n > 1 {
                (0..n)
                    .map(|i| (self.points[i * d + c] - mean).powi(2))
                    .sum::<f64>()
                    / (n - 1) as f64
            } else {
                0.0
            };
            let sd = var.sqrt();
            for i in 0..n {
                let v = &mut self.points[i * d + c];
                *v = if sd > 0.0 { (*v - mean) / sd } else { 0.0 };
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LoadOptions {
    pub n_max: Option<usize>,
    /// Zero-based column holding the labels; excluded from the predictors.
    pub label_column: Option<usize>,
    #[serde(default)]
    pub standardize: Standardize,
}

/// Reads a numeric CSV. A first row that does not parse as numbers is taken
/// as a header.
pub fn load_csv(path: impl AsRef<Path>, opts: &LoadOptions) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width = None;
    let keep = match opts.standardize {
        Standardize::FullFile => None,
        _ => opts.n_max,
    };
    for (k, rec) in reader.records().enumerate() {
        let rec = rec?;
        let line = rec.position().map_or(k + 1, |p| p.line() as usize);
        if rec.iter().all(|c| c.is_empty()) {
            continue;
        }
        let parsed: Vec<std::result::Result<f64, _>> = rec.iter().map(str::parse::<f64>).collect();
        if k == 0 && parsed.iter().any(|p| p.is_err()) {
            width = Some(rec.len());
            continue;
        }
        if let Some(w) = width {
            if rec.len() != w {
                return Err(Error::Parse {
                    row: line,
                    column: rec.len().min(w) + 1,
                    message: format!("expected {w} fields, found {}", rec.len()),
                });
            }
        }
        width = Some(rec.len());
        let mut row = Vec::with_capacity(rec.len());
        for (c, p) in parsed.into_iter().enumerate() {
            match p {
                Ok(v) if v.is_finite() => row.push(v),
                _ => {
                    return Err(Error::Parse {
                        row: line,
                        column: c + 1,
                        message: format!("`{}` is not a finite number", &rec[c]),
                    })
                }
            }
        }
        rows.push(row);
        if keep.is_some_and(|m| rows.len() >= m) {
            break;
        }
    }
    let w = match (rows.first(), width) {
        (Some(r), _) => r.len(),
        _ => return Err(Error::EmptyDataset),
    };
    if let Some(lc) = opts.label_column {
        if lc >= w {
            return Err(Error::config(
                "label_column",
                format!("column {lc} out of range for {w} columns"),
            ));
        }
    }
    let d = w - usize::from(opts.label_column.is_some());
    if d == 0 {
        return Err(Error::EmptyDataset);
    }
    let n = rows.len();
    let mut points = Vec::with_capacity(n * d);
    let mut labels = opts.label_column.map(|_| Vec::with_capacity(n));
    for row in rows {
        for (c, v) in row.into_iter().enumerate() {
            if Some(c) == opts.label_column {
                labels.as_mut().unwrap().push(v);
            } else {
                points.push(v);
            }
        }
    }
    let mut data = Dataset::new(points, n, d, labels)?;
    match opts.standardize {
        Standardize::FullFile => {
            data.standardize();
            if let Some(m) = opts.n_max {
                data.truncate(m);
            }
        }
        Standardize::Subsample => data.standardize(),
        Standardize::None => {}
    }
    data.provenance = Provenance {
        source: path.display().to_string(),
        n_max: opts.n_max,
        standardize: opts.standardize,
    };
    Ok(data)
}

/// `exp(-|z_i - z_j|^2 / (2d)) + mu * delta_ij`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub mu: f64,
    /// Use `|z_i|^2 + |z_j|^2 - 2<z_i, z_j>` with cached norms instead of
    /// direct subtraction.
    #[serde(default)]
    pub row_norm_cache: bool,
}

impl KernelSpec {
    pub fn rbf(mu: f64) -> Result<Self> {
        if !(mu >= 0.0) || !mu.is_finite() {
            return Err(Error::config(
                "mu",
                format!("must be a finite nonnegative number, got {mu}"),
            ));
        }
        Ok(KernelSpec {
            mu,
            row_norm_cache: false,
        })
    }
}

/// Kernel matrix of a dataset, evaluated on demand.
#[derive(Clone, Debug)]
pub struct KernelOracle {
    points: Vec<f64>,
    n: usize,
    d: usize,
    spec: KernelSpec,
    norms: Option<Vec<f64>>,
}

impl KernelOracle {
    pub fn new(data: &Dataset, spec: KernelSpec) -> Self {
        let norms = spec.row_norm_cache.then(|| {
            (0..data.n)
                .map(|i| data.point(i).iter().map(|v| v * v).sum())
                .collect()
        });
        KernelOracle {
            points: data.points.clone(),
            n: data.n,
            d: data.d,
            spec,
            norms,
        }
    }

    pub fn spec(&self) -> &KernelSpec {
        &self.spec
    }

    fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.d..(i + 1) * self.d]
    }

    fn sq_dist(&self, i: usize, j: usize) -> f64 {
        match &self.norms {
            Some(norms) => {
                let ip: f64 = self
                    .point(i)
                    .iter()
                    .zip(self.point(j))
                    .map(|(a, b)| a * b)
                    .sum();
                (norms[i] + norms[j] - 2.0 * ip).max(0.0)
            }
            None => self
                .point(i)
                .iter()
                .zip(self.point(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum(),
        }
    }
}

impl EntryOracle for KernelOracle {
    fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    fn entry(&self, i: usize, j: usize) -> f64 {
        if i == j {
            return 1.0 + self.spec.mu;
        }
        (-self.sq_dist(i, j) / (2.0 * self.d as f64)).exp()
    }
}

/// `b(i) = exp(-|z_i - p|^2 / (2d))` for a test point `p`.
pub fn kernel_column_at(data: &Dataset, p: &[f64]) -> Vec<f64> {
    assert_eq!(p.len(), data.d);
    let scale = 2.0 * data.d as f64;
    (0..data.n)
        .map(|i| {
            let s: f64 = data
                .point(i)
                .iter()
                .zip(p)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            (-s / scale).exp()
        })
        .collect()
}

/// Standard Gaussian test points used by [`kernel_response_vectors`].
pub fn response_test_points(d: usize, k: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..k)
        .map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect())
        .collect()
}

/// `k` right-hand sides, each a kernel column at a random Gaussian test point.
pub fn kernel_response_vectors(data: &Dataset, k: usize, seed: u64) -> Vec<Vec<f64>> {
    response_test_points(data.d, k, seed)
        .iter()
        .map(|p| kernel_column_at(data, p))
        .collect()
}

/// Gaussian blobs around `k` random centers, standardized. Point `i` belongs
/// to cluster `i % k`, which is also its label.
pub fn synthetic_clusters(n: usize, d: usize, k: usize, spread: f64, seed: u64) -> Dataset {
    let data = synthetic_clusters_raw(n, d, k, spread, seed);
    let mut data = data;
    data.standardize();
    data
}

/// As [`synthetic_clusters`] without standardization.
pub fn synthetic_clusters_raw(n: usize, d: usize, k: usize, spread: f64, seed: u64) -> Dataset {
    assert!(n > 0 && d > 0 && k > 0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let min_sep = 6.0 * spread * (d as f64).sqrt();
    let mut centers: Vec<f64> = Vec::new();
    for _ in 0..100 {
        centers = (0..k * d)
            .map(|_| 3.0 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let ok = (0..k).all(|a| {
            (0..a).all(|b| {
                let s: f64 = (0..d)
                    .map(|c| (centers[a * d + c] - centers[b * d + c]).powi(2))
                    .sum();
                s.sqrt() > min_sep
            })
        });
        if ok {
            break;
        }
    }
    let mut points = Vec::with_capacity(n * d);
    for i in 0..n {
        let c = i % k;
        for j in 0..d {
            let z: f64 = rng.sample(StandardNormal);
            points.push(centers[c * d + j] + spread * z);
        }
    }
    let labels = (0..n).map(|i| (i % k) as f64).collect();
    let mut data = Dataset::new(points, n, d, Some(labels)).expect("nonempty");
    data.provenance.source = format!("synthetic:n={n},d={d},k={k},spread={spread},seed={seed}");
    data
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::sym_eigen;
    use crate::oracle::materialize;
    use std::io::Write;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn keeps_first_rows() {
        let f = write_tmp("1,2\n3,4\n5,6\n");
        let opts = LoadOptions {
            n_max: Some(2),
            standardize: Standardize::None,
            ..Default::default()
        };
        let d = load_csv(f.path(), &opts).unwrap();
        assert_eq!(d.points(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn header_is_detected() {
        let f = write_tmp("x,y,label\n1,2,0\n3,5,1\n");
        let opts = LoadOptions {
            label_column: Some(2),
            standardize: Standardize::None,
            ..Default::default()
        };
        let d = load_csv(f.path(), &opts).unwrap();
        assert_eq!(d.n(), 2);
        assert_eq!(d.d(), 2);
        assert_eq!(d.labels().unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn bad_cell_reports_location() {
        let f = write_tmp("1,2\n3,abc\n");
        match load_csv(f.path(), &LoadOptions::default()) {
            Err(Error::Parse { row, column, .. }) => assert_eq!((row, column), (2, 2)),
            other => panic!("{other:?}"),
        }
        let empty = write_tmp("a,b\n");
        assert!(matches!(
            load_csv(empty.path(), &LoadOptions::default()),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn constant_column_becomes_zero() {
        let f = write_tmp("1,7\n2,7\n3,7\n");
        let d = load_csv(f.path(), &LoadOptions::default()).unwrap();
        for i in 0..3 {
            assert_eq!(d.point(i)[1], 0.0);
        }
    }

    /// Hand-computed: column 0 = (2,4,6,8) has mean 5, sample sd sqrt(20/3).
    #[test]
    fn standardization_fixture() {
        let f = write_tmp("a,b\n2,1\n4,1\n6,2\n8,4\n");
        let sub = LoadOptions {
            n_max: Some(3),
            standardize: Standardize::Subsample,
            ..Default::default()
        };
        let d = load_csv(f.path(), &sub).unwrap();
        // first three rows: mean 4, sd 2
        assert_eq!(d.point(0)[0], -1.0);
        assert_eq!(d.point(2)[0], 1.0);
        let full = LoadOptions {
            n_max: Some(3),
            ..Default::default()
        };
        let d = load_csv(f.path(), &full).unwrap();
        let sd = (20.0f64 / 3.0).sqrt();
        assert!((d.point(0)[0] - (-3.0 / sd)).abs() < 1e-15);
        assert_eq!(d.n(), 3);
        let all = load_csv(f.path(), &LoadOptions::default()).unwrap();
        for c in 0..2 {
            let mean: f64 = (0..4).map(|i| all.point(i)[c]).sum::<f64>() / 4.0;
            let var: f64 = (0..4)
                .map(|i| (all.point(i)[c] - mean).powi(2))
                .sum::<f64>()
                / 3.0;
            assert!(mean.abs() < 1e-8);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn kernel_entries() {
        let d = Dataset::new(vec![0.0, 0.0, 0.0, 0.0, 2.0, 0.0], 3, 2, None).unwrap();
        let k = KernelOracle::new(&d, KernelSpec::rbf(0.5).unwrap());
        assert_eq!(k.entry(1, 1), 1.5);
        assert_eq!(k.entry(0, 1), 1.0);
        // squared distance 4 = 2d
        assert!((k.entry(0, 2) - (-1f64).exp()).abs() < 1e-15);
        assert!(KernelSpec::rbf(-1.0).is_err());
    }

    #[test]
    fn norm_cache_agrees() {
        let data = synthetic_clusters(30, 4, 3, 0.5, 2);
        let a = KernelOracle::new(&data, KernelSpec::rbf(0.0).unwrap());
        let mut spec = KernelSpec::rbf(0.0).unwrap();
        spec.row_norm_cache = true;
        let b = KernelOracle::new(&data, spec);
        for i in 0..30 {
            for j in 0..30 {
                assert!((a.entry(i, j) - b.entry(i, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn kernel_is_psd() {
        let data = synthetic_clusters(40, 2, 2, 1.0, 3);
        for mu in [0.0, 0.1] {
            let k = materialize(&KernelOracle::new(&data, KernelSpec::rbf(mu).unwrap()));
            let lmin = sym_eigen(&k).values[0];
            assert!(lmin >= mu - 1e-10);
        }
    }

    #[test]
    fn response_vector_at_data_point_is_kernel_column() {
        let data = synthetic_clusters(10, 3, 2, 0.5, 4);
        let b = kernel_column_at(&data, data.point(4));
        let k = KernelOracle::new(&data, KernelSpec::rbf(0.3).unwrap());
        for i in 0..10 {
            if i != 4 {
                assert_eq!(b[i], k.entry(i, 4));
            }
        }
        assert_eq!(b[4], 1.0);
    }

    #[test]
    fn response_vectors_recompute() {
        let data = synthetic_clusters(8, 2, 2, 0.5, 5);
        let bs = kernel_response_vectors(&data, 3, 9);
        let pts = response_test_points(2, 3, 9);
        for (b, p) in bs.iter().zip(&pts) {
            for i in 0..8 {
                let z = data.point(i);
                let s = (z[0] - p[0]).powi(2) + (z[1] - p[1]).powi(2);
                assert_eq!(b[i], (-s / 4.0).exp());
            }
        }
        let single = Dataset::new(vec![1.0], 1, 1, None).unwrap();
        let b = kernel_column_at(&single, &[0.0]);
        assert_eq!(b, vec![(-0.5f64).exp()]);
    }

    #[test]
    fn synthetic_is_deterministic() {
        assert_eq!(
            synthetic_clusters(50, 3, 4, 0.2, 1),
            synthetic_clusters(50, 3, 4, 0.2, 1)
        );
        let raw = synthetic_clusters_raw(5, 2, 1, 0.0, 3);
        for i in 1..5 {
            assert_eq!(raw.point(i), raw.point(0));
        }
    }
}
