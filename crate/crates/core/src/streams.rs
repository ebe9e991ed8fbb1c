//! Synthetic stream generators and the CSV / AERO file formats.
//!
//! AERO layout: magic `AERO`, version byte `0x01`, little-endian `u32` d,
//! little-endian `u64` n (0 = read until EOF), then `n * d` little-endian
//! `f64` values, row-major.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{qr, squared_norm, Matrix, RngState};

pub const AERO_MAGIC: [u8; 4] = *b"AERO";
pub const AERO_VERSION: u8 = 1;

/// Stream used for the orthonormal factor of noisy streams, kept apart from
/// the row stream.
const BASIS_STREAM: u64 = 0x5eed_0001;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamRecord {
    pub t: u64,
    pub vec: Vec<f64>,
    pub site: Option<usize>,
}

impl StreamRecord {
    /// Records with timestamps `1..=n` and no site.
    pub fn sequence(rows: Vec<Vec<f64>>) -> Vec<StreamRecord> {
        rows.into_iter()
            .enumerate()
            .map(|(k, vec)| StreamRecord {
                t: k as u64 + 1,
                vec,
                site: None,
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GenKind {
    UniformRandom,
    RandomNoisy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    pub kind: GenKind,
    pub rows: usize,
    pub dim: usize,
    /// Noise divisor; only used by [`GenKind::RandomNoisy`].
    pub zeta: f64,
    pub seed: u64,
}

impl GenSpec {
    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.dim == 0 {
            return Err(Error::invalid("generator needs rows >= 1 and dim >= 1"));
        }
        if self.kind == GenKind::RandomNoisy && !(self.zeta > 0.0) {
            return Err(Error::invalid(format!("zeta {} must be positive", self.zeta)));
        }
        Ok(())
    }
}

/// Rows generated from `spec` on RNG stream `stream`.
pub fn generate_rows(spec: &GenSpec, stream: u64) -> Result<Vec<Vec<f64>>> {
    spec.validate()?;
    match spec.kind {
        GenKind::UniformRandom => Ok(uniform_rows(spec, stream)),
        GenKind::RandomNoisy => noisy_rows(spec, stream),
    }
}

pub fn gen_uniform(spec: &GenSpec) -> Result<Vec<StreamRecord>> {
    if spec.kind != GenKind::UniformRandom {
        return Err(Error::invalid("gen_uniform needs a uniform spec"));
    }
    Ok(StreamRecord::sequence(generate_rows(spec, 0)?))
}

pub fn gen_noisy(spec: &GenSpec) -> Result<Vec<StreamRecord>> {
    if spec.kind != GenKind::RandomNoisy {
        return Err(Error::invalid("gen_noisy needs a noisy spec"));
    }
    Ok(StreamRecord::sequence(generate_rows(spec, 0)?))
}

/// Entries uniform on (0, 1].
fn uniform_rows(spec: &GenSpec, stream: u64) -> Vec<Vec<f64>> {
    let mut rng = RngState::new(spec.seed, stream);
    (0..spec.rows)
        .map(|_| {
            (0..spec.dim)
                .map(|_| 1.0 - rng.rng_mut().random::<f64>())
                .collect()
        })
        .collect()
}

/// Rows of `S D U + N / zeta` with `D_ii = 1 - (i-1)/d` and `U` the Q factor
/// of a seeded Gaussian matrix.
fn noisy_rows(spec: &GenSpec, stream: u64) -> Result<Vec<Vec<f64>>> {
    let d = spec.dim;
    let mut basis_rng = RngState::new(spec.seed, BASIS_STREAM);
    let (u, _) = qr(&basis_rng.gaussian_matrix(d, d))?;
    let diag: Vec<f64> = (0..d).map(|i| 1.0 - i as f64 / d as f64).collect();
    let mut rng = RngState::new(spec.seed, stream);
    let mut out = Vec::with_capacity(spec.rows);
    for _ in 0..spec.rows {
        let s = Matrix::from_fn(1, d, |_, j| rng.gaussian() * diag[j]);
        let signal = s * &u;
        let row = (0..d).map(|j| signal[(0, j)] + rng.gaussian() / spec.zeta).collect();
        out.push(row);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FileFormat {
    Csv,
    Aero,
}

impl FileFormat {
    /// `.csv` is CSV, anything else is AERO.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => FileFormat::Csv,
            _ => FileFormat::Aero,
        }
    }
}

pub fn load_stream(path: &Path, format: FileFormat) -> Result<Vec<StreamRecord>> {
    let rows = match format {
        FileFormat::Csv => load_csv(path)?,
        FileFormat::Aero => load_aero(path)?,
    };
    Ok(StreamRecord::sequence(rows))
}

pub fn save_stream(records: &[StreamRecord], path: &Path, format: FileFormat) -> Result<()> {
    let d = records.first().map_or(0, |r| r.vec.len());
    if records.iter().any(|r| r.vec.len() != d) {
        return Err(Error::invalid("records have mixed dimensions"));
    }
    match format {
        FileFormat::Csv => save_csv(records, path),
        FileFormat::Aero => save_aero(records, d, path),
    }
}

fn load_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let mut rows = Vec::new();
    let mut d = None;
    for rec in reader.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        let want = *d.get_or_insert(rec.len());
        if rec.len() != want {
            return Err(Error::format(
                path,
                format!("line {line}: {} fields, expected {want}", rec.len()),
            ));
        }
        let mut row = Vec::with_capacity(want);
        for field in rec.iter() {
            let v: f64 = field
                .parse()
                .map_err(|_| Error::format(path, format!("line {line}: cannot parse {field:?}")))?;
            if !v.is_finite() {
                return Err(Error::format(path, format!("line {line}: non-finite value")));
            }
            row.push(v);
        }
        rows.push(row);
    }
    Ok(rows)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::format(path, format!("{other:?}")),
    }
}

fn save_csv(records: &[StreamRecord], path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    for r in records {
        w.write_record(r.vec.iter().map(|v| format!("{v:.16e}")))
            .map_err(|e| csv_error(path, e))?;
    }
    w.flush()?;
    Ok(())
}

fn load_aero(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header = [0u8; 17];
    r.read_exact(&mut header).map_err(|e| match e.kind() {
        ErrorKind::UnexpectedEof => Error::format(path, "truncated header"),
        _ => Error::Io(e),
    })?;
    if header[..4] != AERO_MAGIC {
        return Err(Error::format(path, "bad magic"));
    }
    if header[4] != AERO_VERSION {
        return Err(Error::format(path, format!("unsupported version {}", header[4])));
    }
    let d = u32::from_le_bytes(header[5..9].try_into().expect("4 bytes")) as usize;
    let n = u64::from_le_bytes(header[9..17].try_into().expect("8 bytes"));
    if d == 0 {
        return Err(Error::format(path, "dimension 0"));
    }
    let mut rows = Vec::new();
    let mut buf = vec![0u8; 8 * d];
    loop {
        if n != 0 && rows.len() as u64 == n {
            break;
        }
        match read_full(&mut r, &mut buf)? {
            0 if n == 0 => break,
            k if k == buf.len() => {}
            _ => {
                return Err(Error::format(
                    path,
                    format!("truncated at row {}", rows.len() + 1),
                ))
            }
        }
        let row: Vec<f64> = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::format(path, format!("row {}: non-finite value", rows.len() + 1)));
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Reads until `buf` is full or EOF; returns the byte count.
fn read_full(r: &mut impl Read, buf: &mut [u8]) -> Result<usize> {
    let mut got = 0;
    while got < buf.len() {
        match r.read(&mut buf[got..]) {
            Ok(0) => break,
            Ok(k) => got += k,
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(got)
}

fn save_aero(records: &[StreamRecord], d: usize, path: &Path) -> Result<()> {
    let d32 = u32::try_from(d).map_err(|_| Error::invalid("dimension exceeds u32"))?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&AERO_MAGIC)?;
    w.write_all(&[AERO_VERSION])?;
    w.write_all(&d32.to_le_bytes())?;
    w.write_all(&(records.len() as u64).to_le_bytes())?;
    for r in records {
        for v in &r.vec {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormReport {
    pub min_sq: f64,
    pub max_sq: f64,
}

impl NormReport {
    /// `max / min` squared norm: the `R` of the unit-minimum convention.
    pub fn ratio(&self) -> f64 {
        if self.min_sq > 0.0 {
            self.max_sq / self.min_sq
        } else {
            f64::INFINITY
        }
    }
}

pub fn norm_report<R: AsRef<[f64]>>(rows: &[R]) -> NormReport {
    let mut min_sq = f64::INFINITY;
    let mut max_sq = 0.0f64;
    for r in rows {
        let sq = squared_norm(r.as_ref());
        min_sq = min_sq.min(sq);
        max_sq = max_sq.max(sq);
    }
    if rows.is_empty() {
        min_sq = 0.0;
    }
    NormReport { min_sq, max_sq }
}

/// Scales every row so the smallest squared norm is 1; returns the report
/// after scaling.
pub fn normalize(rows: &mut [Vec<f64>]) -> Result<NormReport> {
    let before = norm_report(rows);
    if !(before.min_sq > 0.0) {
        return Err(Error::invalid("cannot normalize a stream containing a zero row"));
    }
    let scale = 1.0 / before.min_sq.sqrt();
    for r in rows.iter_mut() {
        for v in r.iter_mut() {
            *v *= scale;
        }
    }
    Ok(norm_report(rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::eigh;

    fn spec(kind: GenKind, rows: usize, dim: usize, zeta: f64) -> GenSpec {
        GenSpec {
            kind,
            rows,
            dim,
            zeta,
            seed: 42,
        }
    }

    #[test]
    fn uniform_support_and_determinism() {
        let s = spec(GenKind::UniformRandom, 200, 8, 1.0);
        let a = gen_uniform(&s).unwrap();
        assert_eq!(a, gen_uniform(&s).unwrap());
        assert!(a.iter().flat_map(|r| &r.vec).all(|&v| v > 0.0 && v <= 1.0));
        assert_eq!(a[0].t, 1);
        assert_eq!(a[199].t, 200);
    }

    #[test]
    fn uniform_mean() {
        let rows = generate_rows(&spec(GenKind::UniformRandom, 20_000, 50, 1.0), 0).unwrap();
        let total: f64 = rows.iter().flatten().sum();
        let mean = total / 1_000_000.0;
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn noisy_spectrum_follows_profile() {
        let d = 32;
        let rows = generate_rows(&spec(GenKind::RandomNoisy, 5000, d, 1e6), 0).unwrap();
        let a = crate::linalg::matrix_from_rows(&rows).unwrap();
        let g = a.transpose() * &a / 5000.0;
        let e = eigh(&g).unwrap();
        for (i, lam) in e.lambda.iter().enumerate() {
            let want = (1.0 - i as f64 / d as f64).powi(2);
            assert!((lam - want).abs() < 0.1, "eig {i}: {lam} vs {want}");
        }
    }

    #[test]
    fn noisy_small_zeta_is_flat() {
        let rows = generate_rows(&spec(GenKind::RandomNoisy, 4000, 16, 0.05), 0).unwrap();
        let a = crate::linalg::matrix_from_rows(&rows).unwrap();
        let s = crate::linalg::svd(&a).unwrap().sigma;
        assert!(s[0] / s[8] < 1.3);
    }

    #[test]
    fn bad_specs() {
        assert!(generate_rows(&spec(GenKind::RandomNoisy, 10, 4, 0.0), 0).is_err());
        assert!(generate_rows(&spec(GenKind::UniformRandom, 0, 4, 1.0), 0).is_err());
        assert!(gen_noisy(&spec(GenKind::UniformRandom, 10, 4, 1.0)).is_err());
    }

    #[test]
    fn normalize_sets_unit_minimum() {
        let mut rows = vec![vec![2.0, 0.0], vec![0.0, 6.0]];
        let rep = normalize(&mut rows).unwrap();
        assert!((rep.min_sq - 1.0).abs() < 1e-12);
        assert!((rep.ratio() - 9.0).abs() < 1e-12);
        assert!(normalize(&mut [vec![0.0, 0.0]]).is_err());
    }

    #[test]
    fn format_from_extension() {
        assert_eq!(FileFormat::from_path(Path::new("a.CSV")), FileFormat::Csv);
        assert_eq!(FileFormat::from_path(Path::new("a.aero")), FileFormat::Aero);
    }
}
