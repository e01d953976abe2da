//! Dense 3-D tensors and the numeric kernels everything else is built on:
//! valid correlation, overlap-add substitution, 2x2 max pooling, ReLU,
//! softmax, 2x upsampling and range normalization.
//!
//! All kernels are pure functions of immutable inputs and safe to call from
//! many threads. Reductions inside a kernel use a fixed summation order, so
//! outputs are bit-reproducible regardless of thread count.

use thiserror::Error;

use crate::parallel;

/// Shape-level failures of the numeric kernels.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ShapeError {
    #[error("value buffer holds {actual} samples, dims {h}x{w}x{c} require {expected}")]
    ValueLength {
        h: usize,
        w: usize,
        c: usize,
        expected: usize,
        actual: usize,
    },
    #[error("tensor dims must be positive, got {h}x{w}x{c}")]
    EmptyDims { h: usize, w: usize, c: usize },
    #[error("input has {input} channels but filter has {filter}")]
    ChannelMismatch { input: usize, filter: usize },
    #[error("filter {fh}x{fw} does not fit input {ih}x{iw}")]
    FilterTooLarge {
        fh: usize,
        fw: usize,
        ih: usize,
        iw: usize,
    },
    #[error("expected a single-channel plane, got {channels} channels")]
    MultiChannel { channels: usize },
    #[error("max_pool needs even spatial dims, got {h}x{w}")]
    OddPoolInput { h: usize, w: usize },
    #[error("softmax needs a 1x1 spatial extent, got {h}x{w}")]
    NonScalarSoftmax { h: usize, w: usize },
    #[error("filter bank is empty")]
    EmptyBank,
    #[error("filter {index} is {fh}x{fw}x{fc}, bank filters are {h}x{w}x{c}")]
    RaggedBank {
        index: usize,
        fh: usize,
        fw: usize,
        fc: usize,
        h: usize,
        w: usize,
        c: usize,
    },
    #[error("bank has {filters} filters but {biases} biases")]
    BiasCount { filters: usize, biases: usize },
}

/// Interpolation used by [`upsample2x`] to invert a pooling step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Interp {
    Nearest,
    Bilinear,
    Bicubic,
}

impl Interp {
    pub const ALL: [Interp; 3] = [Interp::Nearest, Interp::Bilinear, Interp::Bicubic];

    pub fn name(self) -> &'static str {
        match self {
            Interp::Nearest => "nearest",
            Interp::Bilinear => "bilinear",
            Interp::Bicubic => "bicubic",
        }
    }
}

impl std::fmt::Display for Interp {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Interp {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "nearest" => Ok(Interp::Nearest),
            "bilinear" => Ok(Interp::Bilinear),
            "bicubic" => Ok(Interp::Bicubic),
            other => Err(format!(
                "unknown interpolation `{other}` (expected nearest, bilinear or bicubic)"
            )),
        }
    }
}

/// Dense height x width x channels array of f64 samples, row-major with the
/// channel index fastest: `values[(y * w + x) * c + ch]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    height: usize,
    width: usize,
    channels: usize,
    values: Vec<f64>,
}

impl Tensor3 {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        values: Vec<f64>,
    ) -> Result<Self, ShapeError> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(ShapeError::EmptyDims {
                h: height,
                w: width,
                c: channels,
            });
        }
        let expected = height * width * channels;
        if values.len() != expected {
            return Err(ShapeError::ValueLength {
                h: height,
                w: width,
                c: channels,
                expected,
                actual: values.len(),
            });
        }
        Ok(Tensor3 {
            height,
            width,
            channels,
            values,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Tensor3 {
            height,
            width,
            channels,
            values: vec![0.0; height * width * channels],
        }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut values = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for ch in 0..channels {
                    values.push(f(y, x, ch));
                }
            }
        }
        Tensor3 {
            height,
            width,
            channels,
            values,
        }
    }

    /// Single-channel plane from a row-major grid of rows.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == width), "ragged rows");
        let values = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor3 {
            height,
            width,
            channels: 1,
            values,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    fn index(&self, y: usize, x: usize, ch: usize) -> usize {
        (y * self.width + x) * self.channels + ch
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, ch: usize) -> f64 {
        self.values[self.index(y, x, ch)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, ch: usize, v: f64) {
        let i = self.index(y, x, ch);
        self.values[i] = v;
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Contiguous slice covering row `y`, columns `x0..x0+len`, all channels.
    #[inline]
    pub fn row_span(&self, y: usize, x0: usize, len: usize) -> &[f64] {
        let start = self.index(y, x0, 0);
        &self.values[start..start + len * self.channels]
    }

    #[inline]
    pub(crate) fn row_span_mut(&mut self, y: usize, x0: usize, len: usize) -> &mut [f64] {
        let start = self.index(y, x0, 0);
        let channels = self.channels;
        &mut self.values[start..start + len * channels]
    }

    /// Extracts channel `ch` as a single-channel plane.
    pub fn channel_plane(&self, ch: usize) -> Tensor3 {
        assert!(ch < self.channels);
        let mut values = Vec::with_capacity(self.height * self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                values.push(self.get(y, x, ch));
            }
        }
        Tensor3 {
            height: self.height,
            width: self.width,
            channels: 1,
            values,
        }
    }

    /// Stacks single-channel planes of equal size into one multi-channel tensor.
    pub fn stack_planes(planes: &[Tensor3]) -> Result<Tensor3, ShapeError> {
        let first = planes.first().ok_or(ShapeError::EmptyBank)?;
        let (h, w, _) = first.dims();
        for (i, p) in planes.iter().enumerate() {
            if p.channels != 1 {
                return Err(ShapeError::MultiChannel {
                    channels: p.channels,
                });
            }
            if p.height != h || p.width != w {
                return Err(ShapeError::RaggedBank {
                    index: i,
                    fh: p.height,
                    fw: p.width,
                    fc: 1,
                    h,
                    w,
                    c: 1,
                });
            }
        }
        let c = planes.len();
        let mut out = Tensor3::zeros(h, w, c);
        for y in 0..h {
            for x in 0..w {
                for (ch, p) in planes.iter().enumerate() {
                    out.set(y, x, ch, p.get(y, x, 0));
                }
            }
        }
        Ok(out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor3 {
        Tensor3 {
            height: self.height,
            width: self.width,
            channels: self.channels,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn min_max(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in &self.values {
            if v < lo {
                lo = v;
            }
            if v > hi {
                hi = v;
            }
        }
        (lo, hi)
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference; infinity on dim mismatch.
    pub fn max_abs_diff(&self, other: &Tensor3) -> f64 {
        if self.dims() != other.dims() {
            return f64::INFINITY;
        }
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// The ordered filters and per-filter biases of one convolutional layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    filters: Vec<Tensor3>,
    biases: Vec<f64>,
}

impl FilterBank {
    pub fn new(filters: Vec<Tensor3>, biases: Vec<f64>) -> Result<Self, ShapeError> {
        let first = filters.first().ok_or(ShapeError::EmptyBank)?;
        let (h, w, c) = first.dims();
        for (i, f) in filters.iter().enumerate() {
            if f.dims() != (h, w, c) {
                return Err(ShapeError::RaggedBank {
                    index: i,
                    fh: f.height,
                    fw: f.width,
                    fc: f.channels,
                    h,
                    w,
                    c,
                });
            }
        }
        if biases.len() != filters.len() {
            return Err(ShapeError::BiasCount {
                filters: filters.len(),
                biases: biases.len(),
            });
        }
        Ok(FilterBank { filters, biases })
    }

    /// Bank with all-zero biases.
    pub fn unbiased(filters: Vec<Tensor3>) -> Result<Self, ShapeError> {
        let n = filters.len();
        FilterBank::new(filters, vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.filters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.filters.is_empty()
    }

    pub fn filters(&self) -> &[Tensor3] {
        &self.filters
    }

    pub fn biases(&self) -> &[f64] {
        &self.biases
    }

    /// (height, width, channels) shared by every filter.
    pub fn filter_dims(&self) -> (usize, usize, usize) {
        self.filters[0].dims()
    }

    pub(crate) fn filters_mut(&mut self) -> &mut [Tensor3] {
        &mut self.filters
    }

    pub(crate) fn biases_mut(&mut self) -> &mut [f64] {
        &mut self.biases
    }
}

/// Dot product with a fixed 4-lane summation order. Deterministic and fast;
/// never reassociated by thread count or input split.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    let mut i = 0;
    while i + 4 <= n {
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
        i += 4;
    }
    let mut tail = 0.0;
    while i < n {
        tail += a[i] * b[i];
        i += 1;
    }
    (s0 + s1) + (s2 + s3) + tail
}

/// Valid sliding-window correlation of `input` with every filter in `bank`.
///
/// No kernel flipping: `out[r,q,k] = sum_{a,b,ch} input[r*s+a, q*s+b, ch] *
/// filter_k[a,b,ch]` plus `bias_k` when `use_bias` is set. Output dims are
/// `((H-h)/s+1, (W-w)/s+1, #filters)` with flooring division.
pub fn correlate_valid(
    input: &Tensor3,
    bank: &FilterBank,
    stride: usize,
    use_bias: bool,
) -> Result<Tensor3, ShapeError> {
    assert!(stride > 0, "stride must be positive");
    let (ih, iw, ic) = input.dims();
    let (fh, fw, fc) = bank.filter_dims();
    if fc != ic {
        return Err(ShapeError::ChannelMismatch {
            input: ic,
            filter: fc,
        });
    }
    if fh > ih || fw > iw {
        return Err(ShapeError::FilterTooLarge {
            fh,
            fw,
            ih,
            iw,
        });
    }
    let oh = (ih - fh) / stride + 1;
    let ow = (iw - fw) / stride + 1;
    let oc = bank.len();

    let mut out = Tensor3::zeros(oh, ow, oc);
    let row_len = ow * oc;
    parallel::for_each_chunk_mut(out.values_mut(), row_len, |r, row| {
        for q in 0..ow {
            let cell = &mut row[q * oc..(q + 1) * oc];
            for (k, filter) in bank.filters().iter().enumerate() {
                let mut acc = if use_bias { bank.biases()[k] } else { 0.0 };
                for a in 0..fh {
                    let input_span = input.row_span(r * stride + a, q * stride, fw);
                    let filter_span = filter.row_span(a, 0, fw);
                    acc += dot(input_span, filter_span);
                }
                cell[k] = acc;
            }
        }
    });
    Ok(out)
}

/// Overlap-add substitution of `filter` at every pixel of `map`, each copy
/// scaled by the pixel value; overlaps add. Equals the full discrete
/// convolution of the two planes, so the output is `(H+h-1) x (W+w-1)`.
pub fn substitute(map: &Tensor3, filter: &Tensor3) -> Result<Tensor3, ShapeError> {
    if map.channels() != 1 {
        return Err(ShapeError::MultiChannel {
            channels: map.channels(),
        });
    }
    if filter.channels() != 1 {
        return Err(ShapeError::MultiChannel {
            channels: filter.channels(),
        });
    }
    let (mh, mw, _) = map.dims();
    let (fh, fw, _) = filter.dims();
    let oh = mh + fh - 1;
    let ow = mw + fw - 1;
    let mut out = Tensor3::zeros(oh, ow, 1);
    // Gather form: out[p,q] = sum over map pixels (y,x) with the filter
    // covering (p,q), i.e. 0 <= p-y < fh and 0 <= q-x < fw.
    for p in 0..oh {
        let y_lo = p.saturating_sub(fh - 1);
        let y_hi = p.min(mh - 1);
        for q in 0..ow {
            let x_lo = q.saturating_sub(fw - 1);
            let x_hi = q.min(mw - 1);
            let mut acc = 0.0;
            for y in y_lo..=y_hi {
                for x in x_lo..=x_hi {
                    acc += map.get(y, x, 0) * filter.get(p - y, q - x, 0);
                }
            }
            out.set(p, q, 0, acc);
        }
    }
    Ok(out)
}

/// Max over non-overlapping 2x2 windows; halves the spatial dims.
pub fn max_pool(input: &Tensor3) -> Result<Tensor3, ShapeError> {
    Ok(max_pool_with_switches(input)?.0)
}

/// Max pooling that also reports, per output sample, the flat index into
/// `input.values()` of the winning sample. Ties go to the first occurrence
/// in row-major window scan order.
pub(crate) fn max_pool_with_switches(
    input: &Tensor3,
) -> Result<(Tensor3, Vec<u32>), ShapeError> {
    let (h, w, c) = input.dims();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(ShapeError::OddPoolInput { h, w });
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor3::zeros(oh, ow, c);
    let mut switches = vec![0u32; oh * ow * c];
    for y in 0..oh {
        for x in 0..ow {
            for ch in 0..c {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0usize;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let iy = 2 * y + dy;
                        let ix = 2 * x + dx;
                        let v = input.get(iy, ix, ch);
                        if v > best {
                            best = v;
                            best_idx = (iy * w + ix) * c + ch;
                        }
                    }
                }
                let oi = (y * ow + x) * c + ch;
                out.values_mut()[oi] = best;
                switches[oi] = best_idx as u32;
            }
        }
    }
    Ok((out, switches))
}

/// Elementwise `max(0, v)`.
pub fn relu(input: &Tensor3) -> Tensor3 {
    input.map(|v| v.max(0.0))
}

/// Softmax over the channels of a 1x1-spatial tensor, computed with
/// max-subtraction for stability. Outputs are positive and sum to 1.
pub fn softmax(input: &Tensor3) -> Result<Tensor3, ShapeError> {
    let (h, w, _) = input.dims();
    if h != 1 || w != 1 {
        return Err(ShapeError::NonScalarSoftmax { h, w });
    }
    Ok(Tensor3 {
        height: 1,
        width: 1,
        channels: input.channels(),
        values: softmax_slice(input.values()),
    })
}

pub(crate) fn softmax_slice(logits: &[f64]) -> Vec<f64> {
    let hi = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - hi).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / total).collect()
}

/// Catmull-Rom cubic kernel (a = -0.5).
fn catmull_rom(t: f64) -> f64 {
    let t = t.abs();
    if t <= 1.0 {
        (1.5 * t - 2.5) * t * t + 1.0
    } else if t < 2.0 {
        ((-0.5 * t + 2.5) * t - 4.0) * t + 2.0
    } else {
        0.0
    }
}

/// Taps of one 1-D output sample: clamped source indices and weights.
struct Taps {
    idx: [usize; 4],
    w: [f64; 4],
    n: usize,
}

fn axis_taps(n_in: usize, method: Interp) -> Vec<Taps> {
    let clamp = |i: i64| i.clamp(0, n_in as i64 - 1) as usize;
    (0..2 * n_in)
        .map(|i| {
            // Output sample i reads the input at this continuous position
            // (centers aligned, clamp-to-edge).
            let src = (i as f64 + 0.5) / 2.0 - 0.5;
            match method {
                Interp::Nearest => {
                    // round-half-down
                    let j = (src - 0.5).ceil() as i64;
                    Taps {
                        idx: [clamp(j), 0, 0, 0],
                        w: [1.0, 0.0, 0.0, 0.0],
                        n: 1,
                    }
                }
                Interp::Bilinear => {
                    let j0 = src.floor();
                    let f = src - j0;
                    let j0 = j0 as i64;
                    Taps {
                        idx: [clamp(j0), clamp(j0 + 1), 0, 0],
                        w: [1.0 - f, f, 0.0, 0.0],
                        n: 2,
                    }
                }
                Interp::Bicubic => {
                    let j0 = src.floor();
                    let f = src - j0;
                    let j0 = j0 as i64;
                    Taps {
                        idx: [clamp(j0 - 1), clamp(j0), clamp(j0 + 1), clamp(j0 + 2)],
                        w: [
                            catmull_rom(1.0 + f),
                            catmull_rom(f),
                            catmull_rom(1.0 - f),
                            catmull_rom(2.0 - f),
                        ],
                        n: 4,
                    }
                }
            }
        })
        .collect()
}

/// Doubles a single-channel plane to exactly (2H, 2W).
///
/// Output pixel (i, j) samples the input at ((i+0.5)/2 - 0.5, (j+0.5)/2 - 0.5)
/// with clamp-to-edge boundaries; `Nearest` rounds half down (which reduces to
/// pixel duplication at this scale), `Bilinear` uses 2x2 tent weights and
/// `Bicubic` a Catmull-Rom 4x4 neighborhood.
pub fn upsample2x(plane: &Tensor3, method: Interp) -> Result<Tensor3, ShapeError> {
    if plane.channels() != 1 {
        return Err(ShapeError::MultiChannel {
            channels: plane.channels(),
        });
    }
    let (h, w, _) = plane.dims();
    // Vertical pass then horizontal pass; the kernels are tensor products and
    // clamping is per axis, so the passes separate exactly.
    let row_taps = axis_taps(h, method);
    let mut tall = Tensor3::zeros(2 * h, w, 1);
    for (i, taps) in row_taps.iter().enumerate() {
        for j in 0..w {
            let mut acc = 0.0;
            for t in 0..taps.n {
                acc += taps.w[t] * plane.get(taps.idx[t], j, 0);
            }
            tall.set(i, j, 0, acc);
        }
    }
    let col_taps = axis_taps(w, method);
    let mut out = Tensor3::zeros(2 * h, 2 * w, 1);
    for i in 0..2 * h {
        for (j, taps) in col_taps.iter().enumerate() {
            let mut acc = 0.0;
            for t in 0..taps.n {
                acc += taps.w[t] * tall.get(i, taps.idx[t], 0);
            }
            out.set(i, j, 0, acc);
        }
    }
    Ok(out)
}

/// Affine map of all samples (jointly over pixels and channels) so the
/// minimum lands on 0 and the maximum on 1; a constant tensor maps to zeros.
pub fn normalize_range(t: &Tensor3) -> Tensor3 {
    let (lo, hi) = t.min_max();
    if hi == lo {
        return Tensor3::zeros(t.height, t.width, t.channels);
    }
    let scale = 1.0 / (hi - lo);
    t.map(|v| (v - lo) * scale)
}

#[cfg(test)]
mod tests {
    use super::*;

    // Brute-force correlation oracle: direct transliteration of the window
    // sum, scatter-free, no slicing tricks.
    fn correlate_oracle(input: &Tensor3, bank: &FilterBank, stride: usize, bias: bool) -> Tensor3 {
        let (ih, iw, ic) = input.dims();
        let (fh, fw, _) = bank.filter_dims();
        let oh = (ih - fh) / stride + 1;
        let ow = (iw - fw) / stride + 1;
        Tensor3::from_fn(oh, ow, bank.len(), |r, q, k| {
            let mut acc = if bias { bank.biases()[k] } else { 0.0 };
            for a in 0..fh {
                for b in 0..fw {
                    for ch in 0..ic {
                        acc += input.get(r * stride + a, q * stride + b, ch)
                            * bank.filters()[k].get(a, b, ch);
                    }
                }
            }
            acc
        })
    }

    // Brute-force substitution oracle: scatter form, places a scaled copy of
    // the filter at each map pixel and adds overlaps.
    fn substitute_oracle(map: &Tensor3, filter: &Tensor3) -> Tensor3 {
        let (mh, mw, _) = map.dims();
        let (fh, fw, _) = filter.dims();
        let mut out = Tensor3::zeros(mh + fh - 1, mw + fw - 1, 1);
        for y in 0..mh {
            for x in 0..mw {
                let v = map.get(y, x, 0);
                for a in 0..fh {
                    for b in 0..fw {
                        let cur = out.get(y + a, x + b, 0);
                        out.set(y + a, x + b, 0, cur + v * filter.get(a, b, 0));
                    }
                }
            }
        }
        out
    }

    fn rand_tensor(h: usize, w: usize, c: usize, seed: u64) -> Tensor3 {
        // Small deterministic LCG; keeps test values reproducible.
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
        Tensor3::from_fn(h, w, c, |_, _, _| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn correlate_lenet_layer1_dims() {
        let input = Tensor3::zeros(28, 28, 1);
        let filters = (0..20).map(|_| Tensor3::zeros(5, 5, 1)).collect();
        let bank = FilterBank::unbiased(filters).unwrap();
        let out = correlate_valid(&input, &bank, 1, false).unwrap();
        assert_eq!(out.dims(), (24, 24, 20));
    }

    #[test]
    fn correlate_identity_filter_passes_channel_through() {
        let input = rand_tensor(6, 7, 3, 9);
        // 1x1x3 filter selecting channel 1.
        let filter = Tensor3::new(1, 1, 3, vec![0.0, 1.0, 0.0]).unwrap();
        let bank = FilterBank::unbiased(vec![filter]).unwrap();
        let out = correlate_valid(&input, &bank, 1, false).unwrap();
        assert_eq!(out.dims(), (6, 7, 1));
        for y in 0..6 {
            for x in 0..7 {
                assert_eq!(out.get(y, x, 0), input.get(y, x, 1));
            }
        }
    }

    #[test]
    fn correlate_3x3_with_diagonal_2x2() {
        // Window sums computed by the brute-force oracle.
        let input = Tensor3::from_rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0], &[7.0, 8.0, 9.0]]);
        let filter = Tensor3::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let bank = FilterBank::unbiased(vec![filter]).unwrap();
        let out = correlate_valid(&input, &bank, 1, false).unwrap();
        let expect = correlate_oracle(&input, &bank, 1, false);
        assert_eq!(out.max_abs_diff(&expect), 0.0);
        assert_eq!(out.values(), &[6.0, 8.0, 12.0, 14.0]);
    }

    #[test]
    fn correlate_matches_oracle_on_random_inputs() {
        for seed in 0..5 {
            let input = rand_tensor(9, 8, 3, seed);
            let filters = (0..4).map(|k| rand_tensor(3, 4, 3, 100 + seed * 7 + k)).collect();
            let bank = FilterBank::new(filters, vec![0.1, -0.2, 0.3, 0.0]).unwrap();
            for stride in [1, 2] {
                let got = correlate_valid(&input, &bank, stride, true).unwrap();
                let expect = correlate_oracle(&input, &bank, stride, true);
                assert!(got.max_abs_diff(&expect) < 1e-12);
            }
        }
    }

    #[test]
    fn correlate_stride_subsamples_stride1_output() {
        let input = rand_tensor(11, 11, 2, 3);
        let filters = (0..3).map(|k| rand_tensor(3, 3, 2, 50 + k)).collect();
        let bank = FilterBank::unbiased(filters).unwrap();
        let dense = correlate_valid(&input, &bank, 1, false).unwrap();
        for stride in [2, 3] {
            let strided = correlate_valid(&input, &bank, stride, false).unwrap();
            for r in 0..strided.height() {
                for q in 0..strided.width() {
                    for k in 0..3 {
                        assert_eq!(strided.get(r, q, k), dense.get(r * stride, q * stride, k));
                    }
                }
            }
        }
    }

    #[test]
    fn correlate_rejects_channel_mismatch() {
        let input = Tensor3::zeros(5, 5, 2);
        let bank = FilterBank::unbiased(vec![Tensor3::zeros(3, 3, 3)]).unwrap();
        let err = correlate_valid(&input, &bank, 1, false).unwrap_err();
        assert_eq!(err, ShapeError::ChannelMismatch { input: 2, filter: 3 });
    }

    #[test]
    fn correlate_rejects_oversized_filter() {
        let input = Tensor3::zeros(4, 4, 1);
        let bank = FilterBank::unbiased(vec![Tensor3::zeros(5, 5, 1)]).unwrap();
        let err = correlate_valid(&input, &bank, 1, false).unwrap_err();
        assert!(matches!(err, ShapeError::FilterTooLarge { .. }));
    }

    #[test]
    fn substitute_single_pixel_scales_filter() {
        let map = Tensor3::new(1, 1, 1, vec![2.5]).unwrap();
        let filter = rand_tensor(3, 3, 1, 4);
        let out = substitute(&map, &filter).unwrap();
        assert_eq!(out.dims(), (3, 3, 1));
        let expect = filter.map(|v| 2.5 * v);
        assert!(out.max_abs_diff(&expect) < 1e-15);
    }

    #[test]
    fn substitute_zero_map_gives_zero_output() {
        let map = Tensor3::zeros(4, 6, 1);
        let filter = rand_tensor(3, 2, 1, 8);
        let out = substitute(&map, &filter).unwrap();
        assert_eq!(out.dims(), (6, 7, 1));
        assert!(out.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn substitute_2x2_identity_map_overlap_adds() {
        // Placement oracle: filter copies at (0,0) and (1,1), overlaps added.
        let (a, b, c, d) = (1.5, -2.0, 0.5, 3.0);
        let map = Tensor3::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let filter = Tensor3::from_rows(&[&[a, b], &[c, d]]);
        let got = substitute(&map, &filter).unwrap();
        let expect = substitute_oracle(&map, &filter);
        assert_eq!(got.max_abs_diff(&expect), 0.0);
        let rows = [
            [a, b, 0.0],
            [c, d + a, b],
            [0.0, c, d],
        ];
        for (y, row) in rows.iter().enumerate() {
            for (x, &v) in row.iter().enumerate() {
                assert_eq!(got.get(y, x, 0), v, "at ({y},{x})");
            }
        }
    }

    #[test]
    fn substitute_matches_oracle_on_random_inputs() {
        for seed in 0..6 {
            let map = rand_tensor(5, 7, 1, seed);
            let filter = rand_tensor(4, 3, 1, 60 + seed);
            let got = substitute(&map, &filter).unwrap();
            let expect = substitute_oracle(&map, &filter);
            assert!(got.max_abs_diff(&expect) < 1e-12);
        }
    }

    #[test]
    fn substitute_rejects_multichannel() {
        let map = Tensor3::zeros(3, 3, 2);
        let filter = Tensor3::zeros(2, 2, 1);
        assert!(matches!(
            substitute(&map, &filter),
            Err(ShapeError::MultiChannel { channels: 2 })
        ));
    }

    #[test]
    fn substitute_is_commutative_and_bilinear() {
        let a = rand_tensor(8, 8, 1, 1);
        let b = rand_tensor(8, 8, 1, 2);
        let f = rand_tensor(3, 3, 1, 3);
        let ab = substitute(&a, &f).unwrap();
        let ba = substitute(&f, &a).unwrap();
        assert!(ab.max_abs_diff(&ba) < 1e-9);

        // substitute(2a + 3b, f) == 2 subst(a,f) + 3 subst(b,f)
        let lhs_map = Tensor3::from_fn(8, 8, 1, |y, x, _| 2.0 * a.get(y, x, 0) + 3.0 * b.get(y, x, 0));
        let lhs = substitute(&lhs_map, &f).unwrap();
        let sa = substitute(&a, &f).unwrap();
        let sb = substitute(&b, &f).unwrap();
        let rhs = Tensor3::from_fn(lhs.height(), lhs.width(), 1, |y, x, _| {
            2.0 * sa.get(y, x, 0) + 3.0 * sb.get(y, x, 0)
        });
        assert!(lhs.max_abs_diff(&rhs) < 1e-9);
    }

    // The algebraic fact behind the whole decoding method.
    #[test]
    fn correlation_composes_through_substitution() {
        for seed in 0..8 {
            let image = rand_tensor(12, 12, 1, seed);
            let f1 = rand_tensor(3, 3, 1, 70 + seed);
            let f2 = rand_tensor(4, 2, 1, 90 + seed);
            let b1 = FilterBank::unbiased(vec![f1.clone()]).unwrap();
            let b2 = FilterBank::unbiased(vec![f2.clone()]).unwrap();
            let two_step =
                correlate_valid(&correlate_valid(&image, &b1, 1, false).unwrap(), &b2, 1, false)
                    .unwrap();
            let merged = substitute(&f1, &f2).unwrap();
            let one_step =
                correlate_valid(&image, &FilterBank::unbiased(vec![merged]).unwrap(), 1, false)
                    .unwrap();
            assert!(two_step.max_abs_diff(&one_step) < 1e-9);
        }
    }

    #[test]
    fn max_pool_halves_dims_and_takes_window_max() {
        let t = Tensor3::from_rows(&[&[1.0, 7.0], &[3.0, 5.0]]);
        let out = max_pool(&t).unwrap();
        assert_eq!(out.dims(), (1, 1, 1));
        assert_eq!(out.get(0, 0, 0), 7.0);

        let big = rand_tensor(24, 24, 20, 5);
        assert_eq!(max_pool(&big).unwrap().dims(), (12, 12, 20));

        let constant = Tensor3::from_fn(4, 6, 2, |_, _, _| 3.25);
        let pooled = max_pool(&constant).unwrap();
        assert_eq!(pooled.dims(), (2, 3, 2));
        assert!(pooled.values().iter().all(|&v| v == 3.25));
    }

    #[test]
    fn max_pool_rejects_odd_dims() {
        let t = Tensor3::zeros(3, 4, 1);
        assert!(matches!(max_pool(&t), Err(ShapeError::OddPoolInput { h: 3, w: 4 })));
    }

    #[test]
    fn max_pool_switch_ties_take_first_in_scan_order() {
        let t = Tensor3::from_rows(&[&[2.0, 2.0], &[2.0, 2.0]]);
        let (_, switches) = max_pool_with_switches(&t).unwrap();
        assert_eq!(switches, vec![0]);
    }

    #[test]
    fn relu_clamps_negatives() {
        let t = Tensor3::new(1, 3, 1, vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&t).values(), &[0.0, 0.0, 2.0]);
        let neg = Tensor3::from_fn(3, 3, 2, |_, _, _| -4.0);
        assert!(relu(&neg).values().iter().all(|&v| v == 0.0));
        let pos = rand_tensor(4, 4, 1, 2).map(f64::abs);
        assert_eq!(relu(&pos), pos);
    }

    #[test]
    fn softmax_uniform_logits_give_uniform_probs() {
        let t = Tensor3::zeros(1, 1, 10);
        let p = softmax(&t).unwrap();
        for &v in p.values() {
            assert!((v - 0.1).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_large_gap_is_one_hot() {
        let mut vals = vec![-1e4; 10];
        vals[3] = 10.0;
        let p = softmax(&Tensor3::new(1, 1, 10, vals).unwrap()).unwrap();
        assert!((p.get(0, 0, 3) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_of_log_integers() {
        let t = Tensor3::new(1, 1, 3, vec![1f64.ln(), 2f64.ln(), 3f64.ln()]).unwrap();
        let p = softmax(&t).unwrap();
        let expect = [1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0];
        for (got, want) in p.values().iter().zip(expect) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_sums_to_one_and_rejects_spatial_extent() {
        let t = rand_tensor(1, 1, 500, 7);
        let p = softmax(&t).unwrap();
        let sum: f64 = p.values().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(p.values().iter().all(|&v| v > 0.0));

        assert!(matches!(
            softmax(&Tensor3::zeros(2, 1, 3)),
            Err(ShapeError::NonScalarSoftmax { h: 2, w: 1 })
        ));
    }

    #[test]
    fn upsample_doubles_dims() {
        let t = rand_tensor(3, 3, 1, 11);
        for m in Interp::ALL {
            assert_eq!(upsample2x(&t, m).unwrap().dims(), (6, 6, 1));
        }
    }

    #[test]
    fn upsample_nearest_duplicates_pixels() {
        let t = Tensor3::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let up = upsample2x(&t, Interp::Nearest).unwrap();
        let expect = Tensor3::from_rows(&[
            &[1.0, 1.0, 2.0, 2.0],
            &[1.0, 1.0, 2.0, 2.0],
            &[3.0, 3.0, 4.0, 4.0],
            &[3.0, 3.0, 4.0, 4.0],
        ]);
        assert_eq!(up.max_abs_diff(&expect), 0.0);
    }

    #[test]
    fn upsample_preserves_constants() {
        let t = Tensor3::from_fn(5, 4, 1, |_, _, _| -2.75);
        for m in Interp::ALL {
            let up = upsample2x(&t, m).unwrap();
            for &v in up.values() {
                assert!((v - -2.75).abs() < 1e-12, "{m}: {v}");
            }
        }
    }

    #[test]
    fn max_pool_inverts_nearest_upsample() {
        let t = rand_tensor(7, 5, 1, 13);
        let up = upsample2x(&t, Interp::Nearest).unwrap();
        let down = max_pool(&up).unwrap();
        assert_eq!(down.max_abs_diff(&t), 0.0);
    }

    #[test]
    fn upsample_rejects_multichannel() {
        assert!(matches!(
            upsample2x(&Tensor3::zeros(2, 2, 3), Interp::Bilinear),
            Err(ShapeError::MultiChannel { channels: 3 })
        ));
    }

    #[test]
    fn normalize_range_maps_extremes() {
        let t = Tensor3::from_rows(&[&[0.0, 5.0], &[10.0, 5.0]]);
        let n = normalize_range(&t);
        assert_eq!(n.values(), &[0.0, 0.5, 1.0, 0.5]);

        let c = Tensor3::from_fn(3, 3, 2, |_, _, _| 4.0);
        assert!(normalize_range(&c).values().iter().all(|&v| v == 0.0));

        let t = Tensor3::new(1, 3, 1, vec![-2.0, 0.0, 2.0]).unwrap();
        assert_eq!(normalize_range(&t).values(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn bank_construction_validates() {
        assert!(matches!(FilterBank::unbiased(vec![]), Err(ShapeError::EmptyBank)));
        let ragged = FilterBank::unbiased(vec![Tensor3::zeros(3, 3, 1), Tensor3::zeros(2, 3, 1)]);
        assert!(matches!(ragged, Err(ShapeError::RaggedBank { index: 1, .. })));
        let biases = FilterBank::new(vec![Tensor3::zeros(3, 3, 1)], vec![0.0, 1.0]);
        assert!(matches!(biases, Err(ShapeError::BiasCount { filters: 1, biases: 2 })));
    }

    #[test]
    fn tensor_construction_validates_lengths() {
        assert!(matches!(
            Tensor3::new(2, 2, 1, vec![0.0; 3]),
            Err(ShapeError::ValueLength { expected: 4, actual: 3, .. })
        ));
        assert!(matches!(
            Tensor3::new(0, 2, 1, vec![]),
            Err(ShapeError::EmptyDims { .. })
        ));
    }
}
