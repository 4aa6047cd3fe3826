//! On-disk formats.
//!
//! EMB1 embedding matrix (little-endian):
//!
//! ```text
//! offset 0   b"EMB1"
//! offset 4   rows    u32
//! offset 8   cols    u32
//! offset 12  dtype   u8    0 = f32, 1 = f64
//! offset 13  payload rows·cols values, row-major
//! ```
//!
//! Labels are either text (one non-negative integer per line) or LBL1 binary:
//! `b"LBL1"`, `count: u32`, then `count` u32 entries, all little-endian.
//!
//! Run records are pretty-printed JSON with a `format_version` field; the
//! checkpoint trajectory can be exported alongside as CSV.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::labels::LabelVector;
use crate::numerics::FeatureMatrix;
use crate::record::{RunRecord, RUN_RECORD_FORMAT_VERSION};

pub const EMB_MAGIC: [u8; 4] = *b"EMB1";
pub const LBL_MAGIC: [u8; 4] = *b"LBL1";
pub const EMB_HEADER_LEN: usize = 13;
pub const TRAJECTORY_CSV_HEADER: &str = "iteration,loss,uniformity,tolerance,modality_gap";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Dtype {
    F32,
    #[default]
    F64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            other => Err(Error::UnsupportedDtype(other)),
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmbeddingFileHeader {
    pub rows: u32,
    pub cols: u32,
    pub dtype: Dtype,
}

impl EmbeddingFileHeader {
    /// Saturates instead of overflowing for absurd headers.
    pub fn payload_len(&self) -> u64 {
        (self.rows as u64)
            .saturating_mul(self.cols as u64)
            .saturating_mul(self.dtype.size() as u64)
    }

    pub fn to_bytes(&self) -> [u8; EMB_HEADER_LEN] {
        let mut b = [0u8; EMB_HEADER_LEN];
        b[..4].copy_from_slice(&EMB_MAGIC);
        b[4..8].copy_from_slice(&self.rows.to_le_bytes());
        b[8..12].copy_from_slice(&self.cols.to_le_bytes());
        b[12] = self.dtype.code();
        b
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < EMB_HEADER_LEN {
            return Err(Error::TruncatedPayload {
                declared: EMB_HEADER_LEN as u64,
                available: bytes.len() as u64,
            });
        }
        let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
        if magic != EMB_MAGIC {
            return Err(Error::BadMagic {
                expected: EMB_MAGIC,
                found: magic,
            });
        }
        let rows = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        let cols = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        let dtype = Dtype::from_code(bytes[12])?;
        Ok(Self { rows, cols, dtype })
    }
}

fn check_payload(header: &EmbeddingFileHeader, available: u64) -> Result<()> {
    let declared = header.payload_len();
    if available < declared {
        return Err(Error::TruncatedPayload {
            declared,
            available,
        });
    }
    if available > declared {
        return Err(Error::InvariantViolation(format!(
            "{} trailing bytes after a {declared}-byte payload",
            available - declared
        )));
    }
    Ok(())
}

fn decode_payload(header: &EmbeddingFileHeader, payload: &[u8]) -> Result<FeatureMatrix> {
    let data: Vec<f64> = match header.dtype {
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
    };
    FeatureMatrix::new(header.rows as usize, header.cols as usize, data)
}

/// Serializes `m` as an EMB1 byte buffer. Writing f32 rounds each value.
pub fn encode_embeddings(m: &FeatureMatrix, dtype: Dtype) -> Result<Vec<u8>> {
    let rows = u32::try_from(m.rows())
        .map_err(|_| Error::InvalidConfig(format!("{} rows exceed u32", m.rows())))?;
    let cols = u32::try_from(m.cols())
        .map_err(|_| Error::InvalidConfig(format!("{} columns exceed u32", m.cols())))?;
    let header = EmbeddingFileHeader { rows, cols, dtype };
    let mut out = Vec::with_capacity(EMB_HEADER_LEN + header.payload_len() as usize);
    out.extend_from_slice(&header.to_bytes());
    for &v in m.as_slice() {
        match dtype {
            Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
            Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
        }
    }
    Ok(out)
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<FeatureMatrix> {
    let header = EmbeddingFileHeader::parse(bytes)?;
    let payload = &bytes[EMB_HEADER_LEN..];
    check_payload(&header, payload.len() as u64)?;
    decode_payload(&header, payload)
}

pub fn write_embeddings(path: impl AsRef<Path>, m: &FeatureMatrix) -> Result<()> {
    write_embeddings_as(path, m, Dtype::F64)
}

pub fn write_embeddings_as(path: impl AsRef<Path>, m: &FeatureMatrix, dtype: Dtype) -> Result<()> {
    let bytes = encode_embeddings(m, dtype)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Reads an EMB1 file. The payload buffer is allocated only after the file
/// length has been checked against the header.
pub fn read_embeddings(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    let mut file = File::open(path)?;
    let file_len = file.metadata()?.len();
    let mut head = [0u8; EMB_HEADER_LEN];
    let got = read_up_to(&mut file, &mut head)?;
    let header = EmbeddingFileHeader::parse(&head[..got])?;
    check_payload(&header, file_len.saturating_sub(EMB_HEADER_LEN as u64))?;
    let mut payload = vec![0u8; header.payload_len() as usize];
    file.read_exact(&mut payload)?;
    decode_payload(&header, &payload)
}

fn read_up_to(r: &mut impl Read, buf: &mut [u8]) -> Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        let n = r.read(&mut buf[filled..])?;
        if n == 0 {
            break;
        }
        filled += n;
    }
    Ok(filled)
}

/// Parses labels from either the text or the LBL1 binary layout.
pub fn decode_labels(bytes: &[u8]) -> Result<LabelVector> {
    if bytes.len() >= 4 && bytes[..4] == LBL_MAGIC {
        return decode_binary_labels(&bytes[4..]);
    }
    let text = std::str::from_utf8(bytes).map_err(|e| Error::Parse {
        line: 1 + bytes[..e.valid_up_to()].iter().filter(|&&b| b == b'\n').count(),
        message: "invalid UTF-8".into(),
    })?;
    let mut labels = Vec::new();
    let mut lines: Vec<&str> = text.split('\n').collect();
    if lines.last() == Some(&"") {
        lines.pop();
    }
    for (i, line) in lines.iter().enumerate() {
        let trimmed = line.trim();
        let value = trimmed.parse::<u32>().map_err(|e| Error::Parse {
            line: i + 1,
            message: format!("`{trimmed}` is not a non-negative integer: {e}"),
        })?;
        labels.push(value);
    }
    Ok(labels.into())
}

fn decode_binary_labels(body: &[u8]) -> Result<LabelVector> {
    if body.len() < 4 {
        return Err(Error::TruncatedPayload {
            declared: 4,
            available: body.len() as u64,
        });
    }
    let count = u32::from_le_bytes(body[..4].try_into().expect("4 bytes")) as u64;
    let payload = &body[4..];
    let declared = count * 4;
    if (payload.len() as u64) < declared {
        return Err(Error::TruncatedPayload {
            declared,
            available: payload.len() as u64,
        });
    }
    if payload.len() as u64 > declared {
        return Err(Error::InvariantViolation(format!(
            "{} trailing bytes after {count} labels",
            payload.len() as u64 - declared
        )));
    }
    Ok(payload
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect::<Vec<_>>()
        .into())
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelVector> {
    decode_labels(&std::fs::read(path)?)
}

/// Reads labels that must pair with a matrix of `rows` rows.
pub fn read_labels_for(path: impl AsRef<Path>, rows: usize) -> Result<LabelVector> {
    let labels = read_labels(path)?;
    if labels.len() != rows {
        return Err(Error::LengthMismatch {
            expected: rows,
            found: labels.len(),
        });
    }
    Ok(labels)
}

pub fn encode_binary_labels(labels: &LabelVector) -> Result<Vec<u8>> {
    let count = u32::try_from(labels.len())
        .map_err(|_| Error::InvalidConfig(format!("{} labels exceed u32", labels.len())))?;
    let mut out = Vec::with_capacity(8 + labels.len() * 4);
    out.extend_from_slice(&LBL_MAGIC);
    out.extend_from_slice(&count.to_le_bytes());
    for &l in labels.as_slice() {
        out.extend_from_slice(&l.to_le_bytes());
    }
    Ok(out)
}

pub fn write_labels_binary(path: impl AsRef<Path>, labels: &LabelVector) -> Result<()> {
    std::fs::write(path, encode_binary_labels(labels)?)?;
    Ok(())
}

pub fn write_labels_text(path: impl AsRef<Path>, labels: &LabelVector) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for l in labels.as_slice() {
        writeln!(w, "{l}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn encode_run_record(record: &RunRecord) -> Result<String> {
    record.validate()?;
    Ok(serde_json::to_string_pretty(record)?)
}

pub fn decode_run_record(text: &str) -> Result<RunRecord> {
    let value: serde_json::Value = serde_json::from_str(text)?;
    match value.get("format_version").and_then(|v| v.as_u64()) {
        Some(v) if v == RUN_RECORD_FORMAT_VERSION as u64 => {}
        Some(v) => {
            return Err(Error::SchemaMismatch(format!(
                "unknown format_version {v} (supported: {RUN_RECORD_FORMAT_VERSION})"
            )))
        }
        None => return Err(Error::SchemaMismatch("missing format_version".into())),
    }
    let record: RunRecord = serde_json::from_value(value)?;
    record.validate()?;
    Ok(record)
}

/// Validates the record and writes it as JSON.
pub fn write_run_record(path: impl AsRef<Path>, record: &RunRecord) -> Result<()> {
    let text = encode_run_record(record)?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

pub fn read_run_record(path: impl AsRef<Path>) -> Result<RunRecord> {
    decode_run_record(&std::fs::read_to_string(path)?)
}

pub fn trajectory_csv(record: &RunRecord) -> String {
    let mut out = String::from(TRAJECTORY_CSV_HEADER);
    out.push('\n');
    for c in &record.checkpoints {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            c.iteration, c.loss, c.uniformity, c.tolerance, c.modality_gap
        ));
    }
    out
}

pub fn write_trajectory_csv(path: impl AsRef<Path>, record: &RunRecord) -> Result<()> {
    std::fs::write(path, trajectory_csv(record))?;
    Ok(())
}
