//! Versioned binary container for a fitted model.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! b"MSRF"  u32 version
//! str      config (TOML)
//! data     sex, open flag, ages, years, area ids, centroids, deaths, exposures
//! u64      repaired cell count
//! fit      θ, lower triangle of the Cholesky factor (row-major),
//!          deviance, ED, HQIC, N, converged (u8), iterations (u64)
//! ```
//!
//! Strings and vectors are prefixed by a u64 length. Arrays are stored in
//! standard (row-major) order after their shape is implied by the axes.

use std::path::Path;

use ndarray::{Array1, Array2, Array3};

use crate::data::MortalityArray;
use crate::error::{Error, Result};
use crate::linalg::Cholesky;

pub const MAGIC: &[u8; 4] = b"MSRF";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct StoredFit {
    pub theta: Array1<f64>,
    pub factor: Cholesky,
    pub deviance: f64,
    pub effective_dimension: f64,
    pub hqic: f64,
    pub n_obs: f64,
    pub converged: bool,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Artifact {
    pub config_toml: String,
    pub data: MortalityArray,
    pub repaired_cells: usize,
    pub fit: StoredFit,
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn i32(&mut self, v: i32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn len(&mut self, n: usize) {
        self.u64(n as u64);
    }
    fn str(&mut self, s: &str) {
        self.len(s.len());
        self.buf.extend_from_slice(s.as_bytes());
    }
    fn f64s<'a>(&mut self, n: usize, values: impl Iterator<Item = &'a f64>) {
        self.len(n);
        for v in values {
            self.f64(*v);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Artifact("truncated file".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.array()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
    fn len(&mut self) -> Result<usize> {
        let n = self.u64()? as usize;
        if n > self.bytes.len() {
            return Err(Error::Artifact(format!("implausible length {n}")));
        }
        Ok(n)
    }
    fn str(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Artifact(e.to_string()))
    }
    fn f64s(&mut self, expected: usize) -> Result<Vec<f64>> {
        let n = self.len()?;
        if n != expected {
            return Err(Error::Artifact(format!(
                "expected {expected} values, found {n}"
            )));
        }
        (0..n).map(|_| self.f64()).collect()
    }
}

impl Artifact {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.buf.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.str(&self.config_toml);

        let d = &self.data;
        w.str(&d.sex);
        w.u8(d.open_last_age as u8);
        w.len(d.ages.len());
        d.ages.iter().for_each(|&a| w.i32(a));
        w.len(d.years.len());
        d.years.iter().for_each(|&y| w.i32(y));
        w.len(d.area_ids.len());
        d.area_ids.iter().for_each(|a| w.str(a));
        d.centroids.iter().for_each(|c| {
            w.f64(c[0]);
            w.f64(c[1]);
        });
        w.f64s(d.deaths.len(), d.deaths.iter());
        w.f64s(d.exposures.len(), d.exposures.iter());
        w.len(self.repaired_cells);

        let f = &self.fit;
        w.f64s(f.theta.len(), f.theta.iter());
        let lower = f.factor.lower();
        let p = lower.nrows();
        w.f64s(
            p * (p + 1) / 2,
            (0..p)
                .flat_map(|r| (0..=r).map(move |c| (r, c)))
                .map(|(r, c)| &lower[[r, c]]),
        );
        w.f64(f.deviance);
        w.f64(f.effective_dimension);
        w.f64(f.hqic);
        w.f64(f.n_obs);
        w.u8(f.converged as u8);
        w.len(f.iterations);
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4).ok() != Some(MAGIC.as_slice()) {
            return Err(Error::Artifact(
                "not a model artifact (bad magic bytes)".into(),
            ));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Artifact(format!(
                "unsupported artifact version {version} (this build reads version {VERSION})"
            )));
        }
        let config_toml = r.str()?;

        let sex = r.str()?;
        let open_last_age = r.u8()? != 0;
        let n_ages = r.len()?;
        let ages = (0..n_ages).map(|_| r.i32()).collect::<Result<Vec<_>>>()?;
        let n_years = r.len()?;
        let years = (0..n_years).map(|_| r.i32()).collect::<Result<Vec<_>>>()?;
        let n_areas = r.len()?;
        let area_ids = (0..n_areas).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
        let centroids = (0..n_areas)
            .map(|_| Ok([r.f64()?, r.f64()?]))
            .collect::<Result<Vec<_>>>()?;
        let shape = (n_ages, n_areas, n_years);
        let cells = n_ages * n_areas * n_years;
        let deaths = Array3::from_shape_vec(shape, r.f64s(cells)?).expect("length checked");
        let exposures = Array3::from_shape_vec(shape, r.f64s(cells)?).expect("length checked");
        let data = MortalityArray {
            deaths,
            exposures,
            ages,
            open_last_age,
            years,
            area_ids,
            centroids,
            sex,
        };
        data.validate()?;
        let repaired_cells = r.len()?;

        let p = r.len()?;
        let theta = Array1::from_vec((0..p).map(|_| r.f64()).collect::<Result<Vec<_>>>()?);
        let packed = r.f64s(p * (p + 1) / 2)?;
        let mut lower = Array2::zeros((p, p));
        let mut it = packed.into_iter();
        for row in 0..p {
            for col in 0..=row {
                lower[[row, col]] = it.next().expect("length checked");
            }
        }
        let fit = StoredFit {
            theta,
            factor: Cholesky::from_lower(lower)?,
            deviance: r.f64()?,
            effective_dimension: r.f64()?,
            hqic: r.f64()?,
            n_obs: r.f64()?,
            converged: r.u8()? != 0,
            iterations: r.len()?,
        };
        if r.pos != bytes.len() {
            return Err(Error::Artifact(format!(
                "{} trailing bytes after the fit",
                bytes.len() - r.pos
            )));
        }
        Ok(Artifact {
            config_toml,
            data,
            repaired_cells,
            fit,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Artifact(msg) => Error::Artifact(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}
