//! File formats: SMOA-MAT v1 (binary), matrix CSV, SMOA-PLAN v1 (JSON), plus
//! content hashing and atomic writes.
//!
//! SMOA-MAT layout: the 8 magic bytes `SMOA-MAT`, version byte `0x01`, rows and
//! cols as little-endian `u64`, then `rows * cols` little-endian `f64` entries
//! in row-major order.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::matrix::{Interval, Matrix, Permutation};
use crate::preprocess::BlockPlan;

pub const MAT_MAGIC: &[u8; 8] = b"SMOA-MAT";
pub const MAT_VERSION: u8 = 0x01;
const MAT_HEADER: usize = 8 + 1 + 8 + 8;

pub fn encode_mat(m: &Matrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(MAT_HEADER + 8 * m.as_slice().len());
    out.extend_from_slice(MAT_MAGIC);
    out.push(MAT_VERSION);
    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    for x in m.as_slice() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn decode_mat(bytes: &[u8]) -> Result<Matrix> {
    if bytes.len() < MAT_HEADER || &bytes[..8] != MAT_MAGIC {
        return Err(Error::Validation("missing SMOA-MAT header".into()));
    }
    if bytes[8] != MAT_VERSION {
        return Err(Error::Validation(format!("unsupported SMOA-MAT version {}", bytes[8])));
    }
    let read_u64 = |at: usize| u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes"));
    let (rows, cols) = (read_u64(9) as usize, read_u64(17) as usize);
    let n = rows
        .checked_mul(cols)
        .filter(|n| n.checked_mul(8).is_some_and(|b| b == bytes.len() - MAT_HEADER))
        .ok_or_else(|| {
            Error::Validation(format!(
                "SMOA-MAT payload of {} bytes does not match {rows}x{cols}",
                bytes.len() - MAT_HEADER
            ))
        })?;
    let data = (0..n)
        .map(|i| {
            let at = MAT_HEADER + 8 * i;
            f64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes"))
        })
        .collect();
    Matrix::new(rows, cols, data)
}

/// `rows,cols` header, then one comma-separated row per line. Entries use the
/// shortest decimal rendering that round-trips.
pub fn to_csv(m: &Matrix) -> String {
    let mut s = format!("{},{}\n", m.rows(), m.cols());
    for i in 0..m.rows() {
        for (j, x) in m.row(i).iter().enumerate() {
            if j > 0 {
                s.push(',');
            }
            write!(s, "{x:?}").expect("writing to a String");
        }
        s.push('\n');
    }
    s
}

pub fn from_csv(text: &str) -> Result<Matrix> {
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
    let header = lines
        .next()
        .ok_or_else(|| Error::Validation("empty matrix CSV".into()))?;
    let dims: Vec<usize> = header
        .split(',')
        .map(|t| t.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Validation(format!("bad CSV header {header:?}: {e}")))?;
    let [rows, cols] = dims[..] else {
        return Err(Error::Validation(format!("CSV header must be `rows,cols`, got {header:?}")));
    };
    let mut data = Vec::with_capacity(rows * cols);
    let mut seen_rows = 0;
    for (lineno, line) in lines.enumerate() {
        let before = data.len();
        for tok in line.split(',') {
            let x: f64 = tok
                .trim()
                .parse()
                .map_err(|e| Error::Validation(format!("row {}: bad number {tok:?}: {e}", lineno + 1)))?;
            data.push(x);
        }
        if data.len() - before != cols {
            return Err(Error::Validation(format!(
                "row {} has {} entries, expected {cols}",
                lineno + 1,
                data.len() - before
            )));
        }
        seen_rows += 1;
    }
    if seen_rows != rows {
        return Err(Error::Validation(format!("CSV declares {rows} rows but has {seen_rows}")));
    }
    Matrix::new(rows, cols, data).map_err(|e| Error::Validation(e.to_string()))
}

/// Hex SHA-256 of arbitrary bytes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of the canonical SMOA-MAT encoding, so it equals the file hash of a
/// matrix stored in that format.
pub fn content_hash(m: &Matrix) -> String {
    sha256_hex(&encode_mat(m))
}

pub fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

/// Writes via a temporary sibling file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn is_csv_path(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

/// Writes SMOA-MAT, or CSV when the path ends in `.csv`.
pub fn write_matrix(path: &Path, m: &Matrix) -> Result<()> {
    if is_csv_path(path) {
        write_atomic(path, to_csv(m).as_bytes())
    } else {
        write_atomic(path, &encode_mat(m))
    }
}

/// Reads either format, sniffing the magic bytes.
pub fn read_matrix(path: &Path) -> Result<Matrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(MAT_MAGIC) {
        decode_mat(&bytes)
    } else {
        let text = std::str::from_utf8(&bytes)
            .map_err(|_| Error::Validation(format!("{} is neither SMOA-MAT nor CSV", path.display())))?;
        from_csv(text)
    }
}

pub(crate) fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

pub(crate) fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

pub const PLAN_FORMAT: &str = "SMOA-PLAN";

/// On-disk shape of a plan. `anchors` entries are either inline CSV blocks
/// (recognized by a line break) or matrix file paths relative to the plan file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanFile {
    pub format: String,
    pub version: u32,
    pub k: usize,
    pub p_out: Vec<usize>,
    pub p_in: Vec<usize>,
    pub row_intervals: Vec<[usize; 2]>,
    pub col_intervals: Vec<[usize; 2]>,
    pub anchors: Vec<String>,
    pub source_hash: String,
}

impl PlanFile {
    pub fn from_plan(plan: &BlockPlan) -> Self {
        Self {
            format: PLAN_FORMAT.into(),
            version: 1,
            k: plan.k(),
            p_out: plan.p_out().to_one_based(),
            p_in: plan.p_in().to_one_based(),
            row_intervals: plan.row_intervals().iter().map(Interval::one_based).collect(),
            col_intervals: plan.col_intervals().iter().map(Interval::one_based).collect(),
            anchors: plan.anchors().iter().map(to_csv).collect(),
            source_hash: plan.source_hash().to_string(),
        }
    }

    pub fn into_plan(self, base_dir: &Path) -> Result<BlockPlan> {
        if self.format != PLAN_FORMAT || self.version != 1 {
            return Err(Error::Validation(format!(
                "expected {PLAN_FORMAT} v1, got {} v{}",
                self.format, self.version
            )));
        }
        let anchors = self
            .anchors
            .iter()
            .map(|a| {
                if a.contains('\n') {
                    from_csv(a)
                } else {
                    read_matrix(&resolve(base_dir, a))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let plan = BlockPlan::from_parts(
            self.k,
            Permutation::from_one_based(&self.p_out)?,
            Permutation::from_one_based(&self.p_in)?,
            anchors,
            self.source_hash,
        )
        .map_err(|e| match e {
            Error::Config(m) => Error::Validation(m),
            other => other,
        })?;
        let rows: Vec<[usize; 2]> = plan.row_intervals().iter().map(Interval::one_based).collect();
        let cols: Vec<[usize; 2]> = plan.col_intervals().iter().map(Interval::one_based).collect();
        if rows != self.row_intervals || cols != self.col_intervals {
            return Err(Error::Validation(
                "plan intervals are not the equal contiguous partition implied by K".into(),
            ));
        }
        Ok(plan)
    }
}

pub fn plan_to_json(plan: &BlockPlan) -> String {
    serde_json::to_string_pretty(&PlanFile::from_plan(plan)).expect("plan serializes")
}

pub fn plan_from_json(text: &str, base_dir: &Path) -> Result<BlockPlan> {
    let file: PlanFile =
        serde_json::from_str(text).map_err(|e| Error::Validation(format!("malformed plan JSON: {e}")))?;
    file.into_plan(base_dir)
}

pub fn save_plan(path: &Path, plan: &BlockPlan) -> Result<()> {
    write_atomic(path, plan_to_json(plan).as_bytes())
}

pub fn load_plan(path: &Path) -> Result<BlockPlan> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    plan_from_json(&text, &parent_dir(path))
}
