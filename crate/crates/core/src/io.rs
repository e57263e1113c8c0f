//! File formats: comma-separated text and the `DWM1` binary matrix format.
//!
//! `DWM1` layout: the four magic bytes `DWM1`, then `n` and `d` as unsigned
//! 64-bit little-endian integers, then `n·d` little-endian IEEE-754 doubles
//! in row-major order. Feature matrices (n×d), similarity matrices (n×n) and
//! weight vectors (n×1) all share it.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::FeatureMatrix;

pub const DWM1_MAGIC: &[u8; 4] = b"DWM1";
const HEADER_LEN: usize = 4 + 8 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Binary,
}

impl Format {
    /// `.csv` (any case) is text; everything else is treated as `DWM1`.
    pub fn from_path(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => Format::Csv,
            _ => Format::Binary,
        }
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn load_features(path: &Path, format: Format) -> Result<FeatureMatrix> {
    let bytes = read_file(path)?;
    let located = |e: Error| match e {
        Error::Parse { location, message } => Error::Parse {
            location: format!("{}: {location}", path.display()),
            message,
        },
        other => other,
    };
    match format {
        Format::Csv => {
            let text = std::str::from_utf8(&bytes)
                .map_err(|e| Error::parse(format!("{}: byte {}", path.display(), e.valid_up_to()), "invalid UTF-8"))?;
            parse_features_csv(text).map_err(located)
        }
        Format::Binary => {
            let data = decode_dwm1(&bytes).map_err(located)?;
            FeatureMatrix::new(data)
        }
    }
}

/// Writes CSV or DWM1 according to the extension. DWM1 has no label field,
/// so labels survive only in CSV.
pub fn save_features(path: &Path, x: &FeatureMatrix) -> Result<()> {
    match Format::from_path(path) {
        Format::Csv => write_text(path, &features_csv(x)),
        Format::Binary => write_matrix(path, x.data()),
    }
}

/// Header `f0,…,f{d-1}` plus `label` when present. Values use the shortest
/// representation that parses back to the same `f64`.
pub fn features_csv(x: &FeatureMatrix) -> String {
    use std::fmt::Write as _;
    let mut header: Vec<String> = (0..x.d()).map(|j| format!("f{j}")).collect();
    if x.labels().is_some() {
        header.push("label".into());
    }
    let mut out = header.join(",");
    out.push('\n');
    for i in 0..x.n() {
        let mut fields: Vec<String> = x.row(i).iter().map(|v| v.to_string()).collect();
        if let Some(labels) = x.labels() {
            fields.push(labels[i].to_string());
        }
        let _ = writeln!(out, "{}", fields.join(","));
    }
    out
}

/// Parses comma-separated features. A header row is recognised when the
/// first non-blank line has a non-numeric field; if its last column is named
/// `label`, that column is read as integer class labels.
pub fn parse_features_csv(text: &str) -> Result<FeatureMatrix> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
        .peekable();

    let first = lines
        .peek()
        .copied()
        .ok_or_else(|| Error::parse("line 1", "no data rows"))?;
    let is_header = first.1.split(',').any(|f| f.trim().parse::<f64>().is_err());
    let mut has_label = false;
    if is_header {
        let header: Vec<&str> = first.1.split(',').map(str::trim).collect();
        has_label = header.last().is_some_and(|h| h.eq_ignore_ascii_case("label"));
        lines.next();
    }

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels: Vec<i64> = Vec::new();
    let mut width: Option<usize> = None;
    for (line_no, line) in lines {
        let mut fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if has_label {
            let raw = fields.pop().unwrap_or_default();
            let label = raw
                .parse::<i64>()
                .map_err(|_| Error::parse(format!("line {line_no}"), format!("label {raw:?} is not an integer")))?;
            labels.push(label);
        }
        let row = fields
            .iter()
            .enumerate()
            .map(|(col, f)| {
                f.parse::<f64>().map_err(|_| {
                    Error::parse(
                        format!("line {line_no}, column {}", col + 1),
                        format!("{f:?} is not a number"),
                    )
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(Error::parse(
                    format!("line {line_no}"),
                    format!("expected {w} values, found {}", row.len()),
                ))
            }
            _ => {}
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::parse("line 1", "no data rows"));
    }
    let d = width.unwrap_or(0);
    if d == 0 {
        return Err(Error::parse("line 1", "rows have no feature columns"));
    }
    let data = DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]);
    FeatureMatrix::with_labels(data, has_label.then_some(labels))
}

pub fn encode_dwm1(m: &DMatrix<f64>) -> Vec<u8> {
    let (n, d) = m.shape();
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * n * d);
    out.extend_from_slice(DWM1_MAGIC);
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&(d as u64).to_le_bytes());
    for i in 0..n {
        for j in 0..d {
            out.extend_from_slice(&m[(i, j)].to_le_bytes());
        }
    }
    out
}

pub fn decode_dwm1(bytes: &[u8]) -> Result<DMatrix<f64>> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::parse(
            format!("byte {}", bytes.len()),
            format!("truncated header, need {HEADER_LEN} bytes"),
        ));
    }
    if &bytes[..4] != DWM1_MAGIC {
        return Err(Error::parse("byte 0", "missing DWM1 magic"));
    }
    let read_u64 = |at: usize| u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes"));
    let (n, d) = (read_u64(4), read_u64(12));
    let expected = n
        .checked_mul(d)
        .and_then(|c| c.checked_mul(8))
        .and_then(|c| usize::try_from(c).ok())
        .ok_or_else(|| Error::parse("byte 4", format!("dimensions {n}x{d} overflow")))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != expected {
        return Err(Error::parse(
            format!("byte {}", HEADER_LEN + payload.len().min(expected)),
            format!("payload has {} bytes, header {n}x{d} needs {expected}", payload.len()),
        ));
    }
    let (n, d) = (n as usize, d as usize);
    let row_major: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok(DMatrix::from_row_slice(n, d, &row_major))
}

pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let bytes = read_file(path)?;
    decode_dwm1(&bytes).map_err(|e| match e {
        Error::Parse { location, message } => Error::Parse {
            location: format!("{}: {location}", path.display()),
            message,
        },
        other => other,
    })
}

pub fn write_matrix(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    write_bytes(path, &encode_dwm1(m))
}

pub fn write_vector(path: &Path, v: &[f64]) -> Result<()> {
    write_matrix(path, &DMatrix::from_column_slice(v.len(), 1, v))
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    write_bytes(path, text.as_bytes())
}
