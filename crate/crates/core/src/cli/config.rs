//! Run configuration, as read from `--config` files and echoed into every
//! output record.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::Standardize;
use crate::sparsity::SparsityRule;

pub const SCHEMA_VERSION: u32 = 1;
pub const SEED_ENV: &str = "PCVECCHIA_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Synthetic {
        #[serde(default = "default_n")]
        n: usize,
        #[serde(default = "default_d")]
        d: usize,
        #[serde(default = "default_clusters")]
        clusters: usize,
        #[serde(default = "default_spread")]
        spread: f64,
    },
    Csv {
        path: PathBuf,
        #[serde(default)]
        n_max: Option<usize>,
        #[serde(default)]
        label_column: Option<usize>,
        #[serde(default)]
        standardize: Standardize,
    },
    /// A dataset file written by `pcvecchia prepare`.
    Cached { path: PathBuf },
}

fn default_n() -> usize {
    500
}

fn default_d() -> usize {
    3
}

fn default_clusters() -> usize {
    4
}

fn default_spread() -> f64 {
    0.3
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Synthetic {
            n: default_n(),
            d: default_d(),
            clusters: default_clusters(),
            spread: default_spread(),
        }
    }
}

/// Residual sparsity per row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum QRule {
    /// `floor(n^(1/den))`.
    Root(u32),
    Fixed(usize),
}

impl QRule {
    pub fn resolve(self, n: usize) -> usize {
        match self {
            QRule::Fixed(q) => q,
            QRule::Root(den) => floor_root(n, den),
        }
    }
}

/// `floor(n^(1/k))` without floating-point surprises at perfect powers.
pub fn floor_root(n: usize, k: u32) -> usize {
    let mut x = (n as f64).powf(1.0 / k as f64).round() as usize;
    while x > 0 && x.checked_pow(k).is_none_or(|p| p > n) {
        x -= 1;
    }
    while (x + 1).checked_pow(k).is_some_and(|p| p <= n) {
        x += 1;
    }
    x
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Method {
    /// Partial Cholesky followed by residual Vecchia.
    PcV(QRule),
    /// Vecchia on the file order without a Cholesky block.
    Vecchia(QRule),
    /// Low-rank plus eigenvalue fill on the complement.
    Frangella,
    /// Low-rank plus ridge.
    Diaz,
}

impl Method {
    pub fn q_rule(&self) -> Option<QRule> {
        match self {
            Method::PcV(q) | Method::Vecchia(q) => Some(*q),
            _ => None,
        }
    }

    pub fn is_low_rank_shift(&self) -> bool {
        matches!(self, Method::Frangella | Method::Diaz)
    }
}

fn parse_q(s: &str) -> Option<QRule> {
    match s {
        "0" => Some(QRule::Fixed(0)),
        "1/4" => Some(QRule::Root(4)),
        "1/3" => Some(QRule::Root(3)),
        "1/2" => Some(QRule::Root(2)),
        _ => s
            .strip_prefix(':')
            .and_then(|n| n.parse().ok())
            .map(QRule::Fixed),
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let parsed = match s.as_str() {
            "frangella" => Some(Method::Frangella),
            "diaz" => Some(Method::Diaz),
            _ => {
                if let Some(rest) = s.strip_prefix("pc+v") {
                    parse_q(rest).map(Method::PcV)
                } else if let Some(rest) = s.strip_prefix("vecchia") {
                    parse_q(rest).map(Method::Vecchia)
                } else {
                    None
                }
            }
        };
        parsed.ok_or_else(|| {
            Error::config(
                "method",
                format!("unknown method `{s}`; expected pc+v0, pc+v1/4, pc+v1/3, pc+v:<q>, vecchia:<q>, vecchia1/4, frangella or diaz"),
            )
        })
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let q = |q: &QRule| match q {
            QRule::Fixed(0) => "0".to_string(),
            QRule::Fixed(q) => format!(":{q}"),
            QRule::Root(d) => format!("1/{d}"),
        };
        match self {
            Method::PcV(r) => write!(f, "pc+v{}", q(r)),
            Method::Vecchia(r) => write!(f, "vecchia{}", q(r)),
            Method::Frangella => f.write_str("frangella"),
            Method::Diaz => f.write_str("diaz"),
        }
    }
}

impl TryFrom<String> for Method {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Method> for String {
    fn from(m: Method) -> String {
        m.to_string()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum PivotRuleName {
    Rpc,
    Sds,
    Cpc,
    Fps,
    Adaptive,
    /// The first `r` indices in file order.
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum RhsKind {
    Labels,
    KernelVectors,
}

/// Krylov depth: a fixed number of Lanczos steps or the full dimension.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Depth {
    Steps(usize),
    Full(FullDepth),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FullDepth {
    Full,
}

impl Depth {
    pub fn resolve(self, n: usize) -> usize {
        match self {
            Depth::Steps(m) => m,
            Depth::Full(_) => n,
        }
    }
}

impl FromStr for Depth {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("full") {
            return Ok(Depth::Full(FullDepth::Full));
        }
        s.parse()
            .map(Depth::Steps)
            .map_err(|_| Error::config("depths", format!("`{s}` is neither a number nor `full`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    /// Ridge added to the kernel diagonal.
    pub mu: f64,
    pub method: Method,
    pub pivots: PivotRuleName,
    pub sparsity: SparsityRule,
    /// Cholesky rank; `floor(sqrt(n))` when absent.
    pub rank: Option<usize>,
    /// Candidates per row; `10 q` when absent.
    pub candidates: Option<usize>,
    pub rhs: RhsKind,
    /// Number of kernel-vector right-hand sides.
    pub num_rhs: usize,
    /// PCG tolerance; 1e-3 for labels and 1e-4 for kernel vectors when absent.
    pub tol: Option<f64>,
    pub max_iter: usize,
    /// Probe vectors for the log-determinant estimate.
    pub samples: usize,
    pub depths: Vec<Depth>,
    pub seed: u64,
    /// Largest `n` for which `log kappa` and exact log-determinants are
    /// computed densely.
    pub kappa_max_n: usize,
    /// Largest `n` for which the kernel matrix is stored for matvecs.
    pub materialize_max_n: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: DatasetSpec::default(),
            mu: 1e-3,
            method: Method::PcV(QRule::Root(4)),
            pivots: PivotRuleName::Rpc,
            sparsity: SparsityRule::Omp,
            rank: None,
            candidates: None,
            rhs: RhsKind::KernelVectors,
            num_rhs: 5,
            tol: None,
            max_iter: 1000,
            samples: 10,
            depths: vec![Depth::Steps(20)],
            seed: 0,
            kappa_max_n: 2000,
            materialize_max_n: 4000,
        }
    }
}

/// Quantities derived from the configuration and the dataset size.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Derived {
    pub n: usize,
    pub r: usize,
    pub q: usize,
    pub c: usize,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu >= 0.0) || !self.mu.is_finite() {
            return Err(Error::config(
                "mu",
                format!("must be a finite nonnegative number, got {}", self.mu),
            ));
        }
        if let Some(tol) = self.tol {
            if !(tol > 0.0) {
                return Err(Error::config("tol", format!("must be positive, got {tol}")));
            }
        }
        if self.num_rhs == 0 {
            return Err(Error::config("num_rhs", "must be at least 1"));
        }
        if self.samples > 0 && self.depths.is_empty() {
            return Err(Error::config(
                "depths",
                "at least one depth is needed when samples > 0",
            ));
        }
        if self
            .depths
            .iter()
            .any(|d| matches!(d, Depth::Steps(m) if *m < 2))
            && self.samples > 0
        {
            return Err(Error::config("depths", "Krylov depth must be at least 2"));
        }
        match &self.dataset {
            DatasetSpec::Synthetic {
                n,
                d,
                clusters,
                spread,
            } => {
                if *n == 0 {
                    return Err(Error::config("dataset.n", "must be at least 1"));
                }
                if *d == 0 {
                    return Err(Error::config("dataset.d", "must be at least 1"));
                }
                if *clusters == 0 {
                    return Err(Error::config("dataset.clusters", "must be at least 1"));
                }
                if !(*spread >= 0.0) {
                    return Err(Error::config("dataset.spread", "must be nonnegative"));
                }
            }
            DatasetSpec::Csv { n_max: Some(0), .. } => {
                return Err(Error::config("dataset.n_max", "must be at least 1"));
            }
            _ => {}
        }
        if self.method == Method::Diaz && self.mu == 0.0 {
            return Err(Error::config("mu", "diaz needs a positive ridge"));
        }
        Ok(())
    }

    pub fn derive(&self, n: usize) -> Result<Derived> {
        let r = match self.method {
            Method::Vecchia(_) => 0,
            _ => self.rank.unwrap_or_else(|| floor_root(n, 2)),
        };
        if r > n {
            return Err(Error::config("rank", format!("{r} exceeds n = {n}")));
        }
        let q = self.method.q_rule().map_or(0, |rule| rule.resolve(n));
        let c = self.candidates.unwrap_or(10 * q);
        if q > 0 && c > 0 && c < q {
            return Err(Error::config(
                "candidates",
                format!("{c} is fewer than q = {q}"),
            ));
        }
        Ok(Derived { n, r, q, c })
    }

    pub fn tolerance(&self) -> f64 {
        self.tol.unwrap_or(match self.rhs {
            RhsKind::Labels => 1e-3,
            RhsKind::KernelVectors => 1e-4,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn methods_parse_and_print() {
        for s in [
            "pc+v0",
            "pc+v1/4",
            "pc+v1/3",
            "pc+v:7",
            "vecchia:3",
            "vecchia1/4",
            "frangella",
            "diaz",
        ] {
            let m: Method = s.parse().unwrap();
            assert_eq!(m.to_string(), s);
        }
        assert!("pc+v2".parse::<Method>().is_err());
        assert!(
            matches!("nonsense".parse::<Method>(), Err(Error::Config { field, .. }) if field == "method")
        );
    }

    #[test]
    fn integer_roots() {
        assert_eq!(floor_root(2000, 2), 44);
        assert_eq!(floor_root(2000, 4), 6);
        assert_eq!(floor_root(20_000, 4), 11);
        assert_eq!(floor_root(20_000, 2), 141);
        assert_eq!(floor_root(625, 4), 5);
        assert_eq!(floor_root(624, 4), 4);
        assert_eq!(floor_root(1, 3), 1);
        assert_eq!(floor_root(0, 2), 0);
    }

    #[test]
    fn derived_quantities() {
        let cfg = RunConfig::default();
        assert_eq!(
            cfg.derive(2000).unwrap(),
            Derived {
                n: 2000,
                r: 44,
                q: 6,
                c: 60
            }
        );
        let cfg = RunConfig {
            method: "pc+v0".parse().unwrap(),
            rank: Some(22),
            ..RunConfig::default()
        };
        assert_eq!(
            cfg.derive(500).unwrap(),
            Derived {
                n: 500,
                r: 22,
                q: 0,
                c: 0
            }
        );
        let cfg = RunConfig {
            rank: Some(501),
            ..RunConfig::default()
        };
        assert!(cfg.derive(500).is_err());
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = RunConfig {
            depths: vec![Depth::Steps(5), Depth::Full(FullDepth::Full)],
            dataset: DatasetSpec::Csv {
                path: "x.csv".into(),
                n_max: Some(10),
                label_column: Some(0),
                standardize: Standardize::Subsample,
            },
            ..RunConfig::default()
        };
        let s = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&s).unwrap(), cfg);
        let partial: RunConfig = serde_json::from_str(r#"{"mu": 0.5, "method": "diaz"}"#).unwrap();
        assert_eq!(partial.mu, 0.5);
        assert_eq!(partial.method, Method::Diaz);
    }

    #[test]
    fn validation_names_the_field() {
        let cfg = RunConfig {
            mu: -1.0,
            ..RunConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config { field, .. }) if field == "mu"));
        let cfg = RunConfig {
            tol: Some(0.0),
            ..RunConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config { field, .. }) if field == "tol"));
    }
}
