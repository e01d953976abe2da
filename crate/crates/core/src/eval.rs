//! Quantitative and qualitative experiments on decoded filters:
//! reconstruction error per layer and interpolation method, the 10x10
//! max-activation class matrix, and side-by-side response comparisons.
//!
//! Decoded filters carry no bias term, so every comparison here runs
//! against the unbiased forward pass (the response to the filters alone).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::data::LabeledDataset;
use crate::decode::{cumulative_stride, decode_all};
use crate::network::{Network, NetworkError};
use crate::parallel;
use crate::tensor::{correlate_valid, normalize_range, FilterBank, Interp, Tensor3};

/// Mean and spread of per-image reconstruction error for one
/// (layer, interpolation) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorEntry {
    pub layer: usize,
    pub interp: Interp,
    pub mean: f64,
    pub std: f64,
    pub samples: usize,
}

/// Rows of a reconstruction-error report.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ErrorReport {
    pub entries: Vec<ErrorEntry>,
}

impl ErrorReport {
    pub fn get(&self, layer: usize, interp: Interp) -> Option<&ErrorEntry> {
        self.entries
            .iter()
            .find(|e| e.layer == layer && e.interp == interp)
    }
}

fn decoded_bank(net: &Network, layer: usize, interp: Interp) -> Result<FilterBank, NetworkError> {
    let decoded = decode_all(net, layer, interp)?;
    let planes = decoded.into_iter().map(|d| d.plane).collect();
    Ok(FilterBank::unbiased(planes)?)
}

fn reconstruct_with_bank(
    net: &Network,
    bank: &FilterBank,
    image: &Tensor3,
    layer: usize,
) -> Result<Tensor3, NetworkError> {
    let stride = cumulative_stride(net, layer)?;
    let out = correlate_valid(image, bank, stride, false)?;
    let expected = net.shapes()[layer];
    if out.dims() != expected {
        let (eh, ew, ec) = expected;
        let (ah, aw, ac) = out.dims();
        return Err(NetworkError::ReconstructionShape {
            layer,
            eh,
            ew,
            ec,
            ah,
            aw,
            ac,
        });
    }
    Ok(out)
}

/// Approximates the layer-`layer` response of `image` by one correlation of
/// the image with the decoded filter bank, at the layer's cumulative stride.
/// Output dims equal the network's layer output dims.
pub fn reconstruct_response(
    net: &Network,
    image: &Tensor3,
    layer: usize,
    interp: Interp,
) -> Result<Tensor3, NetworkError> {
    let bank = decoded_bank(net, layer, interp)?;
    reconstruct_with_bank(net, &bank, image, layer)
}

/// Mean squared difference of the range-normalized forward and reconstructed
/// stacks, averaged per image; mean and population std over `images`.
pub fn reconstruction_error(
    net: &Network,
    images: &[Tensor3],
    layer: usize,
    interp: Interp,
) -> Result<ErrorEntry, NetworkError> {
    if images.is_empty() {
        return Err(NetworkError::EmptyEvaluation);
    }
    net.conv_bank(layer)?;
    let bank = decoded_bank(net, layer, interp)?;

    let per_image: Vec<Result<f64, NetworkError>> = parallel::map_slice(images, |image| {
        let mut trace = net.forward_unbiased(image, &[layer])?;
        let forward = trace.take(layer).expect("captured");
        let rebuilt = reconstruct_with_bank(net, &bank, image, layer)?;
        let fa = normalize_range(&forward);
        let fb = normalize_range(&rebuilt);
        let n = fa.len() as f64;
        let mut acc = 0.0;
        for (a, b) in fa.values().iter().zip(fb.values()) {
            let d = a - b;
            acc += d * d;
        }
        Ok(acc / n)
    });

    // Fixed-order reduction over image indices.
    let mut errors = Vec::with_capacity(per_image.len());
    for e in per_image {
        errors.push(e?);
    }
    let n = errors.len() as f64;
    let mean = errors.iter().sum::<f64>() / n;
    let var = errors.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n;
    Ok(ErrorEntry {
        layer,
        interp,
        mean,
        std: var.sqrt(),
        samples: errors.len(),
    })
}

/// Full report over several layers and interpolation methods on the same
/// image sample.
pub fn reconstruction_report(
    net: &Network,
    images: &[Tensor3],
    layers: &[usize],
    interps: &[Interp],
) -> Result<ErrorReport, NetworkError> {
    let mut entries = Vec::new();
    for &layer in layers {
        for &interp in interps {
            entries.push(reconstruction_error(net, images, layer, interp)?);
        }
    }
    Ok(ErrorReport { entries })
}

/// Deterministic sample of `count` indices out of `0..total`, ascending.
pub fn sample_indices(total: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut all: Vec<usize> = (0..total).collect();
    if count >= total {
        return all;
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    all.shuffle(&mut rng);
    let mut picked = all[..count].to_vec();
    picked.sort_unstable();
    picked
}

/// 10x10 matrix of maximum image activations: entry (k, c) is the largest
/// scalar response of decoded class filter k over the test images whose true
/// class is c, with the index of the winning image.
#[derive(Debug, Clone)]
pub struct ActivationMatrix {
    pub values: [[f64; 10]; 10],
    pub argmax_image: [[Option<usize>; 10]; 10],
}

impl ActivationMatrix {
    /// Number of rows whose maximum sits on the diagonal.
    pub fn diagonal_dominance(&self) -> usize {
        (0..10)
            .filter(|&k| {
                let row = &self.values[k];
                let best = row
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite"))
                    .map(|(c, _)| c);
                best == Some(k)
            })
            .count()
    }
}

/// Builds the activation matrix for the last conv layer (the 10 class
/// filters in LeNet). Responses are spatial maxima of the correlation of
/// each image with the decoded filters, which for equal-size filters is the
/// single scalar activation.
pub fn activation_matrix(
    net: &Network,
    data: &LabeledDataset,
    interp: Interp,
) -> Result<ActivationMatrix, NetworkError> {
    let layer = *net.conv_ordinals().last().ok_or(NetworkError::NoConvLayers)?;
    let bank = decoded_bank(net, layer, interp)?;
    if bank.len() != 10 {
        return Err(NetworkError::ClassFilterCount { count: bank.len() });
    }

    let responses: Vec<Result<Vec<f64>, NetworkError>> =
        parallel::map_slice(&data.images, |image| {
            let out = reconstruct_with_bank(net, &bank, image, layer)?;
            let c = out.channels();
            let mut per_filter = vec![f64::NEG_INFINITY; c];
            for cell in out.values().chunks(c) {
                for (peak, &v) in per_filter.iter_mut().zip(cell) {
                    *peak = peak.max(v);
                }
            }
            Ok(per_filter)
        });

    let mut values = [[f64::NEG_INFINITY; 10]; 10];
    let mut argmax_image = [[None; 10]; 10];
    for (i, r) in responses.into_iter().enumerate() {
        let r = r?;
        let class = data.labels[i] as usize;
        for k in 0..10 {
            if r[k] > values[k][class] {
                values[k][class] = r[k];
                argmax_image[k][class] = Some(i);
            }
        }
    }
    // Classes absent from the sample keep a neutral cell.
    for row in values.iter_mut() {
        for v in row.iter_mut() {
            if !v.is_finite() {
                *v = 0.0;
            }
        }
    }
    Ok(ActivationMatrix {
        values,
        argmax_image,
    })
}

/// Range-normalized (forward, reconstructed) stack pair for one layer.
#[derive(Debug, Clone)]
pub struct LayerComparison {
    pub layer: usize,
    pub forward: Tensor3,
    pub reconstructed: Tensor3,
}

/// Side-by-side response stacks at the requested layers for one image,
/// both sides range-normalized for export.
pub fn compare_responses(
    net: &Network,
    image: &Tensor3,
    layers: &[usize],
    interp: Interp,
) -> Result<Vec<LayerComparison>, NetworkError> {
    let trace = net.forward_unbiased(image, layers)?;
    layers
        .iter()
        .map(|&layer| {
            let forward = trace.get(layer).expect("captured").clone();
            let rebuilt = reconstruct_response(net, image, layer, interp)?;
            Ok(LayerComparison {
                layer,
                forward: normalize_range(&forward),
                reconstructed: normalize_range(&rebuilt),
            })
        })
        .collect()
}
