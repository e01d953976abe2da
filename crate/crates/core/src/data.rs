//! Dataset ingestion (IDX), input normalization, and file exports (PGM, CSV).

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::tensor::{normalize_range, Tensor3};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803; // 2051
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801; // 2049

#[derive(Debug, Error)]
pub enum DataError {
    #[error("wrong magic: expected {expected:#010x}, found {found:#010x}")]
    WrongMagic { expected: u32, found: u32 },
    #[error("truncated payload: need {expected} bytes, file holds {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("{extra} unexpected trailing bytes")]
    TrailingData { extra: usize },
    #[error("dataset has {images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {value} at index {index} is outside 0-9")]
    BadLabel { index: usize, value: u8 },
    #[error("expected a single-channel plane, got {channels} channels")]
    NotSingleChannel { channels: usize },
    #[error("mean image is {mh}x{mw} but images are {h}x{w}")]
    MeanShape {
        mh: usize,
        mw: usize,
        h: usize,
        w: usize,
    },
    #[error("malformed PGM: {0}")]
    BadPgm(String),
    #[error("empty dataset")]
    Empty,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Raw unsigned-byte images straight out of an IDX file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    /// `count * rows * cols` bytes, image-major, row-major inside an image.
    pub pixels: Vec<u8>,
}

impl RawImages {
    pub fn image_bytes(&self, i: usize) -> &[u8] {
        let n = self.rows * self.cols;
        &self.pixels[i * n..(i + 1) * n]
    }
}

fn read_be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

/// Parses a big-endian IDX image file (magic 2051, dims count x rows x cols,
/// unsigned byte payload).
pub fn load_idx_images(path: impl AsRef<Path>) -> Result<RawImages, DataError> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 {
        return Err(DataError::Truncated {
            expected: 16,
            actual: bytes.len(),
        });
    }
    let magic = read_be_u32(&bytes, 0);
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::WrongMagic {
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let count = read_be_u32(&bytes, 4) as usize;
    let rows = read_be_u32(&bytes, 8) as usize;
    let cols = read_be_u32(&bytes, 12) as usize;
    let expected = 16 + count * rows * cols;
    if bytes.len() < expected {
        return Err(DataError::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(DataError::TrailingData {
            extra: bytes.len() - expected,
        });
    }
    Ok(RawImages {
        count,
        rows,
        cols,
        pixels: bytes[16..].to_vec(),
    })
}

/// Parses a big-endian IDX label file (magic 2049, unsigned byte payload).
pub fn load_idx_labels(path: impl AsRef<Path>) -> Result<Vec<u8>, DataError> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 8 {
        return Err(DataError::Truncated {
            expected: 8,
            actual: bytes.len(),
        });
    }
    let magic = read_be_u32(&bytes, 0);
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::WrongMagic {
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let count = read_be_u32(&bytes, 4) as usize;
    let expected = 8 + count;
    if bytes.len() < expected {
        return Err(DataError::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(DataError::TrailingData {
            extra: bytes.len() - expected,
        });
    }
    Ok(bytes[8..].to_vec())
}

/// Serializes images back to the IDX format read by [`load_idx_images`].
pub fn save_idx_images(images: &RawImages, path: impl AsRef<Path>) -> Result<(), DataError> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&IDX_IMAGES_MAGIC.to_be_bytes())?;
    out.write_all(&(images.count as u32).to_be_bytes())?;
    out.write_all(&(images.rows as u32).to_be_bytes())?;
    out.write_all(&(images.cols as u32).to_be_bytes())?;
    out.write_all(&images.pixels)?;
    out.flush()?;
    Ok(())
}

/// Serializes labels back to the IDX format read by [`load_idx_labels`].
pub fn save_idx_labels(labels: &[u8], path: impl AsRef<Path>) -> Result<(), DataError> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&IDX_LABELS_MAGIC.to_be_bytes())?;
    out.write_all(&(labels.len() as u32).to_be_bytes())?;
    out.write_all(labels)?;
    out.flush()?;
    Ok(())
}

/// Normalized images with labels and the mean image used to center them.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub images: Vec<Tensor3>,
    pub labels: Vec<u8>,
    pub mean_image: Tensor3,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Scales pixels by 1/255 and subtracts the mean image. `mean` is computed
/// from this set when `None` (the training split) and reused otherwise (the
/// test split).
pub fn normalize_dataset(
    raw: &RawImages,
    labels: &[u8],
    mean: Option<&Tensor3>,
) -> Result<LabeledDataset, DataError> {
    if raw.count != labels.len() {
        return Err(DataError::CountMismatch {
            images: raw.count,
            labels: labels.len(),
        });
    }
    if raw.count == 0 {
        return Err(DataError::Empty);
    }
    for (index, &value) in labels.iter().enumerate() {
        if value > 9 {
            return Err(DataError::BadLabel { index, value });
        }
    }

    let (h, w) = (raw.rows, raw.cols);
    let mean_image = match mean {
        Some(m) if m.dims() != (h, w, 1) => {
            return Err(DataError::MeanShape {
                mh: m.height(),
                mw: m.width(),
                h,
                w,
            })
        }
        Some(m) => m.clone(),
        None => {
            let mut acc = vec![0.0f64; h * w];
            for i in 0..raw.count {
                for (a, &p) in acc.iter_mut().zip(raw.image_bytes(i)) {
                    *a += p as f64 / 255.0;
                }
            }
            let inv = 1.0 / raw.count as f64;
            Tensor3::new(h, w, 1, acc.into_iter().map(|v| v * inv).collect())
                .expect("mean image dims")
        }
    };

    let images = (0..raw.count)
        .map(|i| {
            let bytes = raw.image_bytes(i);
            let values = bytes
                .iter()
                .zip(mean_image.values())
                .map(|(&p, &m)| p as f64 / 255.0 - m)
                .collect();
            Tensor3::new(h, w, 1, values).expect("image dims")
        })
        .collect();

    Ok(LabeledDataset {
        images,
        labels: labels.to_vec(),
        mean_image,
    })
}

/// Writes a binary PGM (P5, maxval 255); samples are the plane after range
/// normalization, scaled to 0-255 and rounded.
pub fn export_pgm(plane: &Tensor3, path: impl AsRef<Path>) -> Result<(), DataError> {
    if plane.channels() != 1 {
        return Err(DataError::NotSingleChannel {
            channels: plane.channels(),
        });
    }
    let normalized = normalize_range(plane);
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P5\n{} {}\n255\n", plane.width(), plane.height())?;
    let bytes: Vec<u8> = normalized
        .values()
        .iter()
        .map(|&v| (255.0 * v).round().clamp(0.0, 255.0) as u8)
        .collect();
    out.write_all(&bytes)?;
    out.flush()?;
    Ok(())
}

/// Reads back a binary PGM written by [`export_pgm`].
pub fn read_pgm(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u8>), DataError> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let mut token = || -> Result<String, DataError> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(DataError::BadPgm("unexpected end of header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P5" {
        return Err(DataError::BadPgm("not a P5 file".into()));
    }
    let w: usize = token()?.parse().map_err(|_| DataError::BadPgm("bad width".into()))?;
    let h: usize = token()?.parse().map_err(|_| DataError::BadPgm("bad height".into()))?;
    let maxval: usize = token()?.parse().map_err(|_| DataError::BadPgm("bad maxval".into()))?;
    if maxval != 255 {
        return Err(DataError::BadPgm(format!("unsupported maxval {maxval}")));
    }
    pos += 1; // single whitespace after maxval
    let expected = pos + w * h;
    if bytes.len() < expected {
        return Err(DataError::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    Ok((h, w, bytes[pos..pos + w * h].to_vec()))
}

/// Tiles the channels of a tensor into one single-channel grid plane for
/// gallery export; each cell is range-normalized independently.
pub fn tile_channels(t: &Tensor3, grid_cols: usize, gap: usize) -> Tensor3 {
    let (h, w, c) = t.dims();
    let cols = grid_cols.max(1);
    let rows = c.div_ceil(cols);
    let gh = rows * h + (rows + 1) * gap;
    let gw = cols * w + (cols + 1) * gap;
    let mut grid = Tensor3::zeros(gh.max(1), gw.max(1), 1);
    for ch in 0..c {
        let cell = normalize_range(&t.channel_plane(ch));
        let gy = (ch / cols) * (h + gap) + gap;
        let gx = (ch % cols) * (w + gap) + gap;
        for y in 0..h {
            for x in 0..w {
                grid.set(gy + y, gx + x, 0, cell.get(y, x, 0));
            }
        }
    }
    grid
}

/// Formats a float with `sig` significant digits, printf `%g` style.
pub fn fmt_sig(v: f64, sig: usize) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    if !v.is_finite() {
        return format!("{v}");
    }
    let exp = v.abs().log10().floor() as i32;
    if exp < -4 || exp >= sig as i32 {
        format!("{:.*e}", sig.saturating_sub(1), v)
    } else {
        let decimals = (sig as i32 - 1 - exp).max(0) as usize;
        format!("{v:.decimals$}")
    }
}

/// Writes a comma-separated file with a header row.
pub fn write_csv(
    path: impl AsRef<Path>,
    header: &[&str],
    rows: impl IntoIterator<Item = Vec<String>>,
) -> Result<(), DataError> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "{}", header.join(","))?;
    for row in rows {
        writeln!(out, "{}", row.join(","))?;
    }
    out.flush()?;
    Ok(())
}
