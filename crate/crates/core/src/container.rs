//! Shared machinery for the on-disk containers: a short ASCII manifest
//! terminated by a `data` line, followed by a raw little-endian f32 blob.

use std::io::{Read, Write};

use thiserror::Error;

use crate::network::NetworkError;
use crate::tensor::ShapeError;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("bad magic: expected `{expected}`, found `{found}`")]
    BadMagic { expected: String, found: String },
    #[error("truncated blob: manifest promises {expected_bytes} bytes of samples, file holds {actual_bytes}")]
    TruncatedBlob {
        expected_bytes: usize,
        actual_bytes: usize,
    },
    #[error("{extra_bytes} unexpected trailing bytes after the sample blob")]
    TrailingData { extra_bytes: usize },
    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
    #[error("manifest shapes are inconsistent: {0}")]
    ShapeMismatch(#[from] NetworkError),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Manifest lines (already split, magic stripped) plus the sample blob.
pub(crate) struct RawContainer {
    pub lines: Vec<String>,
    pub blob: Vec<u8>,
}

/// Reads magic + manifest up to the `data` terminator; the rest is the blob.
pub(crate) fn read_container(
    mut reader: impl Read,
    magic: &str,
) -> Result<RawContainer, ContainerError> {
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;

    let magic_line = format!("{magic}\n");
    if !bytes.starts_with(magic_line.as_bytes()) {
        let found: String = bytes
            .iter()
            .take(4)
            .map(|&b| if b.is_ascii_graphic() { b as char } else { '.' })
            .collect();
        return Err(ContainerError::BadMagic {
            expected: magic.to_string(),
            found,
        });
    }

    let mut lines = Vec::new();
    let mut pos = magic_line.len();
    loop {
        let rest = &bytes[pos..];
        let nl = rest.iter().position(|&b| b == b'\n').ok_or_else(|| {
            ContainerError::Manifest {
                line: lines.len() + 2,
                message: "unterminated manifest (missing `data` line)".into(),
            }
        })?;
        let line = String::from_utf8(rest[..nl].to_vec()).map_err(|_| ContainerError::Manifest {
            line: lines.len() + 2,
            message: "manifest is not valid UTF-8".into(),
        })?;
        pos += nl + 1;
        if line == "data" {
            break;
        }
        lines.push(line);
    }

    Ok(RawContainer {
        lines,
        blob: bytes[pos..].to_vec(),
    })
}

/// Checks the blob holds exactly `count` f32 samples and decodes them to f64.
pub(crate) fn decode_f32_blob(blob: &[u8], count: usize) -> Result<Vec<f64>, ContainerError> {
    let expected_bytes = count * 4;
    if blob.len() < expected_bytes {
        return Err(ContainerError::TruncatedBlob {
            expected_bytes,
            actual_bytes: blob.len(),
        });
    }
    if blob.len() > expected_bytes {
        return Err(ContainerError::TrailingData {
            extra_bytes: blob.len() - expected_bytes,
        });
    }
    Ok(blob
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect())
}

/// Appends samples as little-endian f32.
pub(crate) fn write_f32_blob(
    writer: &mut impl Write,
    samples: impl Iterator<Item = f64>,
) -> std::io::Result<()> {
    let mut buf = Vec::new();
    for v in samples {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    writer.write_all(&buf)
}

pub(crate) fn parse_fields<const N: usize>(
    line: &str,
    line_no: usize,
    keyword: &str,
) -> Result<[usize; N], ContainerError> {
    let mut parts = line.split_whitespace();
    let head = parts.next().unwrap_or("");
    if head != keyword {
        return Err(ContainerError::Manifest {
            line: line_no,
            message: format!("expected `{keyword} ...`, found `{line}`"),
        });
    }
    let mut out = [0usize; N];
    for slot in out.iter_mut() {
        let tok = parts.next().ok_or_else(|| ContainerError::Manifest {
            line: line_no,
            message: format!("`{keyword}` needs {N} integer fields"),
        })?;
        *slot = tok.parse().map_err(|_| ContainerError::Manifest {
            line: line_no,
            message: format!("`{tok}` is not a count"),
        })?;
    }
    if parts.next().is_some() {
        return Err(ContainerError::Manifest {
            line: line_no,
            message: format!("`{keyword}` has extra fields"),
        });
    }
    Ok(out)
}
