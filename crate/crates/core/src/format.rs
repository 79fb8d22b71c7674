//! Binary files for factors and datasets.
//!
//! Both formats are little-endian and start with a 4-byte magic and a `u32`
//! version.
//!
//! Factor (`PCVF`, version 1):
//!
//! ```text
//! magic "PCVF" | u32 version | u64 n
//! n x u64                      permutation
//! n x { u64 len | len x u64 indices | len x f64 coefficients }
//! n x f64                      diagonal
//! ```
//!
//! Dataset (`PCVD`, version 1):
//!
//! ```text
//! magic "PCVD" | u32 version | u64 n | u64 d | u8 has_labels
//! n*d x f64 points (row-major) | [n x f64 labels]
//! u64 len | len bytes provenance JSON
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::factor::VecchiaFactor;
use crate::kernels::Dataset;
use crate::oracle::{PivotOrder, SparsityPattern};

pub const FACTOR_MAGIC: &[u8; 4] = b"PCVF";
pub const DATASET_MAGIC: &[u8; 4] = b"PCVD";
pub const VERSION: u32 = 1;

/// Refuse absurd sizes from corrupted headers before allocating.
const MAX_LEN: u64 = 1 << 40;

fn put_u64(w: &mut impl Write, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_f64(w: &mut impl Write, v: f64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

struct Input<R> {
    r: R,
}

impl<R: Read> Input<R> {
    fn bytes<const N: usize>(&mut self) -> std::io::Result<[u8; N]> {
        let mut b = [0u8; N];
        self.r.read_exact(&mut b)?;
        Ok(b)
    }

    fn u64(&mut self) -> std::io::Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    fn f64(&mut self) -> std::io::Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }

    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        if v > MAX_LEN {
            return Err(Error::InvalidInput(format!("length {v} is implausible")));
        }
        Ok(v as usize)
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<()> {
        let m: [u8; 4] = self.bytes()?;
        if &m != magic {
            return Err(Error::InvalidInput(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&m),
                String::from_utf8_lossy(magic)
            )));
        }
        let v = u32::from_le_bytes(self.bytes()?);
        if v != VERSION {
            return Err(Error::InvalidInput(format!("unsupported version {v}")));
        }
        Ok(())
    }
}

pub fn write_factor(mut w: impl Write, f: &VecchiaFactor) -> Result<()> {
    w.write_all(FACTOR_MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    put_u64(&mut w, f.n() as u64)?;
    for &p in f.order().as_slice() {
        put_u64(&mut w, p as u64)?;
    }
    for i in 0..f.n() {
        let idx = f.pattern().row(i);
        put_u64(&mut w, idx.len() as u64)?;
        for &j in idx {
            put_u64(&mut w, j as u64)?;
        }
        for &c in f.row(i) {
            put_f64(&mut w, c)?;
        }
    }
    for &d in f.diag() {
        put_f64(&mut w, d)?;
    }
    w.flush()?;
    Ok(())
}

/// Factor file contents before any invariant is checked.
#[derive(Clone, Debug, PartialEq)]
pub struct RawFactor {
    pub perm: Vec<usize>,
    pub sets: Vec<Vec<usize>>,
    pub coefs: Vec<Vec<f64>>,
    pub diag: Vec<f64>,
}

impl RawFactor {
    pub fn validate(self) -> Result<VecchiaFactor> {
        VecchiaFactor::new(
            PivotOrder::new(self.perm)?,
            SparsityPattern::new(self.sets)?,
            self.coefs,
            self.diag,
        )
    }
}

pub fn read_factor(r: impl Read) -> Result<VecchiaFactor> {
    read_factor_raw(r)?.validate()
}

/// Parses the layout only; indices, signs and finiteness are not checked.
pub fn read_factor_raw(r: impl Read) -> Result<RawFactor> {
    let mut inp = Input { r };
    inp.header(FACTOR_MAGIC)?;
    let n = inp.len()?;
    let perm = (0..n).map(|_| inp.len()).collect::<Result<Vec<_>>>()?;
    let mut sets = Vec::with_capacity(n);
    let mut coefs = Vec::with_capacity(n);
    for _ in 0..n {
        let len = inp.len()?;
        if len > n {
            return Err(Error::InvalidInput(format!(
                "row length {len} exceeds n = {n}"
            )));
        }
        sets.push((0..len).map(|_| inp.len()).collect::<Result<Vec<_>>>()?);
        coefs.push(
            (0..len)
                .map(|_| inp.f64())
                .collect::<std::io::Result<Vec<_>>>()?,
        );
    }
    let diag = (0..n)
        .map(|_| inp.f64())
        .collect::<std::io::Result<Vec<_>>>()?;
    let mut tail = [0u8; 1];
    if inp.r.read(&mut tail)? != 0 {
        return Err(Error::InvalidInput("trailing bytes after factor".into()));
    }
    Ok(RawFactor {
        perm,
        sets,
        coefs,
        diag,
    })
}

fn with_path<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::InvalidInput(message) => Error::Format {
            path: path.to_path_buf(),
            message,
        },
        Error::Io(io) if io.kind() == std::io::ErrorKind::UnexpectedEof => Error::Format {
            path: path.to_path_buf(),
            message: "file ends early".into(),
        },
        other => other,
    })
}

pub fn save_factor(path: impl AsRef<Path>, f: &VecchiaFactor) -> Result<()> {
    write_factor(BufWriter::new(File::create(path)?), f)
}

pub fn load_factor(path: impl AsRef<Path>) -> Result<VecchiaFactor> {
    let path = path.as_ref();
    let file = File::open(path)?;
    with_path(path, read_factor(BufReader::new(file)))
}

pub fn load_factor_raw(path: impl AsRef<Path>) -> Result<RawFactor> {
    let path = path.as_ref();
    let file = File::open(path)?;
    with_path(path, read_factor_raw(BufReader::new(file)))
}

pub fn write_dataset(mut w: impl Write, d: &Dataset) -> Result<()> {
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    put_u64(&mut w, d.n() as u64)?;
    put_u64(&mut w, d.d() as u64)?;
    w.write_all(&[u8::from(d.labels().is_some())])?;
    for &v in d.points() {
        put_f64(&mut w, v)?;
    }
    if let Some(l) = d.labels() {
        for &v in l {
            put_f64(&mut w, v)?;
        }
    }
    let prov = serde_json::to_vec(&d.provenance)?;
    put_u64(&mut w, prov.len() as u64)?;
    w.write_all(&prov)?;
    w.flush()?;
    Ok(())
}

pub fn read_dataset(r: impl Read) -> Result<Dataset> {
    let mut inp = Input { r };
    inp.header(DATASET_MAGIC)?;
    let n = inp.len()?;
    let d = inp.len()?;
    if n.checked_mul(d).is_none_or(|s| s as u64 > MAX_LEN) {
        return Err(Error::InvalidInput("dataset size overflows".into()));
    }
    let [flag] = inp.bytes::<1>()?;
    let points = (0..n * d)
        .map(|_| inp.f64())
        .collect::<std::io::Result<Vec<_>>>()?;
    let labels = match flag {
        0 => None,
        1 => Some(
            (0..n)
                .map(|_| inp.f64())
                .collect::<std::io::Result<Vec<_>>>()?,
        ),
        x => return Err(Error::InvalidInput(format!("bad label flag {x}"))),
    };
    let len = inp.len()?;
    let mut prov = vec![0u8; len];
    inp.r.read_exact(&mut prov)?;
    let mut data = Dataset::new(points, n, d, labels)?;
    data.provenance = serde_json::from_slice(&prov)?;
    Ok(data)
}

pub fn save_dataset(path: impl AsRef<Path>, d: &Dataset) -> Result<()> {
    write_dataset(BufWriter::new(File::create(path)?), d)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path)?;
    with_path(path, read_dataset(BufReader::new(file)))
}
