//! Filter decoding: projects any conv filter back into image space.
//!
//! Starting from the filter itself, the walk descends one layer at a time.
//! A conv layer below turns each working plane into overlap-add
//! substitutions against that layer's filters, summed per incoming channel;
//! a pooling layer doubles the planes with the chosen interpolation; ReLU
//! passes through unchanged. On a stack of pure convolutions the result is
//! exact: correlating the image with the decoded filter reproduces the
//! layer response.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::container::{self, ContainerError};
use crate::network::{LayerSpec, Network, NetworkError};
use crate::parallel;
use crate::tensor::{substitute, upsample2x, Interp, Tensor3};

pub const DECODED_MAGIC: &str = "CDF1";

/// Image-space projection of one filter, with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedFilter {
    pub layer: usize,
    pub index: usize,
    /// Channels equal the network's input channels.
    pub plane: Tensor3,
    pub interp: Interp,
    /// Product of pooling strides strictly below `layer`.
    pub cumulative_stride: usize,
}

/// Product of the pooling strides in layers strictly below `layer`; the
/// stride at which image-space correlation with a decoded filter lands on
/// that layer's response grid.
pub fn cumulative_stride(net: &Network, layer: usize) -> Result<usize, NetworkError> {
    net.layer(layer)?;
    let mut stride = 1;
    for l in net.layers().iter().take(layer - 1) {
        if matches!(l, LayerSpec::MaxPool) {
            stride *= 2;
        }
    }
    Ok(stride)
}

/// Decodes filter `index` of conv layer `layer` down to image space.
pub fn decode_filter(
    net: &Network,
    layer: usize,
    index: usize,
    interp: Interp,
) -> Result<DecodedFilter, NetworkError> {
    let bank = net.conv_bank(layer)?;
    if index >= bank.len() {
        return Err(NetworkError::FilterIndexOutOfRange {
            layer,
            index,
            count: bank.len(),
        });
    }
    let filter = &bank.filters()[index];

    // Working planes, one per channel of the frontier map. The channels of
    // a layer-L filter index the outputs of layer L-1.
    let mut planes: Vec<Tensor3> = (0..filter.channels())
        .map(|c| filter.channel_plane(c))
        .collect();

    for ordinal in (1..layer).rev() {
        match &net.layers()[ordinal - 1] {
            LayerSpec::Conv(lower) => {
                debug_assert_eq!(planes.len(), lower.len());
                let c_in = lower.filter_dims().2;
                planes = (0..c_in)
                    .map(|c| {
                        let mut acc: Option<Tensor3> = None;
                        for (j, f) in lower.filters().iter().enumerate() {
                            let term = substitute(&planes[j], &f.channel_plane(c))?;
                            acc = Some(match acc {
                                None => term,
                                Some(mut a) => {
                                    for (av, tv) in
                                        a.values_mut().iter_mut().zip(term.values())
                                    {
                                        *av += tv;
                                    }
                                    a
                                }
                            });
                        }
                        Ok(acc.expect("bank is never empty"))
                    })
                    .collect::<Result<_, NetworkError>>()?;
            }
            LayerSpec::MaxPool => {
                planes = planes
                    .iter()
                    .map(|p| upsample2x(p, interp))
                    .collect::<Result<_, _>>()?;
            }
            // Nonlinearities pass through: the walk only transforms on conv
            // and pooling layers.
            LayerSpec::Relu | LayerSpec::SoftMax => {}
        }
    }

    let plane = Tensor3::stack_planes(&planes)?;
    Ok(DecodedFilter {
        layer,
        index,
        plane,
        interp,
        cumulative_stride: cumulative_stride(net, layer)?,
    })
}

/// Decodes every filter of conv layer `layer`. Filters decode independently
/// and in parallel; output order matches the bank.
pub fn decode_all(
    net: &Network,
    layer: usize,
    interp: Interp,
) -> Result<Vec<DecodedFilter>, NetworkError> {
    let count = net.conv_bank(layer)?.len();
    parallel::map_indexed(count, |k| decode_filter(net, layer, k, interp))
        .into_iter()
        .collect()
}

/// Ternary view of a decoded plane: +1 where the value exceeds
/// `tau * max|value|`, -1 below the negated threshold, 0 between. An
/// all-zero plane stays all zero.
pub fn threshold_view(decoded: &DecodedFilter, tau: f64) -> Tensor3 {
    let peak = decoded
        .plane
        .values()
        .iter()
        .fold(0.0f64, |m, &v| m.max(v.abs()));
    if peak == 0.0 {
        let (h, w, c) = decoded.plane.dims();
        return Tensor3::zeros(h, w, c);
    }
    let cut = tau * peak;
    decoded.plane.map(|v| {
        if v > cut {
            1.0
        } else if v < -cut {
            -1.0
        } else {
            0.0
        }
    })
}

/// Writes a decoded filter: `CDF1`, a readable manifest (layer, index, dims,
/// interpolation, stride), then the plane as little-endian f32.
pub fn save_decoded(decoded: &DecodedFilter, path: impl AsRef<Path>) -> Result<(), ContainerError> {
    let mut out = BufWriter::new(File::create(path)?);
    let (h, w, c) = decoded.plane.dims();
    write!(
        out,
        "{DECODED_MAGIC}\nlayer {}\nfilter {}\ndims {h} {w} {c}\ninterp {}\nstride {}\ndata\n",
        decoded.layer, decoded.index, decoded.interp, decoded.cumulative_stride
    )?;
    container::write_f32_blob(&mut out, decoded.plane.values().iter().copied())?;
    out.flush()?;
    Ok(())
}

/// Reads a decoded-filter file written by [`save_decoded`]; samples
/// round-trip bit-exactly at 32-bit precision.
pub fn load_decoded(path: impl AsRef<Path>) -> Result<DecodedFilter, ContainerError> {
    let raw = container::read_container(File::open(path)?, DECODED_MAGIC)?;
    if raw.lines.len() != 5 {
        return Err(ContainerError::Manifest {
            line: raw.lines.len() + 2,
            message: format!("expected 5 manifest lines, found {}", raw.lines.len()),
        });
    }
    let [layer] = container::parse_fields(&raw.lines[0], 2, "layer")?;
    let [index] = container::parse_fields(&raw.lines[1], 3, "filter")?;
    let [h, w, c] = container::parse_fields(&raw.lines[2], 4, "dims")?;

    let interp_line = &raw.lines[3];
    let interp = interp_line
        .strip_prefix("interp ")
        .and_then(|name| name.parse::<Interp>().ok())
        .ok_or_else(|| ContainerError::Manifest {
            line: 5,
            message: format!("bad interp line `{interp_line}`"),
        })?;
    let [stride] = container::parse_fields(&raw.lines[4], 6, "stride")?;

    let samples = container::decode_f32_blob(&raw.blob, h * w * c)?;
    Ok(DecodedFilter {
        layer,
        index,
        plane: Tensor3::new(h, w, c, samples)?,
        interp,
        cumulative_stride: stride,
    })
}
