//! Layer specifications, validated network assembly, the forward pass with
//! per-layer capture, and the bit-exact model container.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use thiserror::Error;

use crate::container::{self, ContainerError};
use crate::tensor::{
    correlate_valid, max_pool, relu, softmax, FilterBank, ShapeError, Tensor3,
};

pub const MODEL_MAGIC: &str = "CDN1";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NetworkError {
    #[error("layer {layer}: filter channels {filter} do not match incoming channels {input}")]
    ChannelChain {
        layer: usize,
        filter: usize,
        input: usize,
    },
    #[error("layer {layer}: {fh}x{fw} filter does not fit incoming {h}x{w} extent")]
    FilterDoesNotFit {
        layer: usize,
        fh: usize,
        fw: usize,
        h: usize,
        w: usize,
    },
    #[error("layer {layer}: max pooling needs even dims, incoming extent is {h}x{w}")]
    PoolNeedsEvenDims { layer: usize, h: usize, w: usize },
    #[error("layer {layer}: softmax needs a 1x1 extent, incoming extent is {h}x{w}")]
    SoftmaxNeedsScalar { layer: usize, h: usize, w: usize },
    #[error("image is {ah}x{aw}x{ac} but the network expects {eh}x{ew}x{ec}")]
    InputShapeMismatch {
        eh: usize,
        ew: usize,
        ec: usize,
        ah: usize,
        aw: usize,
        ac: usize,
    },
    #[error("layer {layer} is {kind}, not a convolution")]
    NotConvLayer { layer: usize, kind: &'static str },
    #[error("no layer {layer}: network has {count} layers")]
    NoSuchLayer { layer: usize, count: usize },
    #[error("network has no convolution layers")]
    NoConvLayers,
    #[error("the activation matrix needs 10 class filters, the last conv layer has {count}")]
    ClassFilterCount { count: usize },
    #[error("evaluation needs at least one image")]
    EmptyEvaluation,
    #[error("layer {layer}: filter index {index} out of range, bank holds {count}")]
    FilterIndexOutOfRange {
        layer: usize,
        index: usize,
        count: usize,
    },
    #[error("layer {layer}: reconstructed extent {ah}x{aw}x{ac} does not match forward extent {eh}x{ew}x{ec}")]
    ReconstructionShape {
        layer: usize,
        eh: usize,
        ew: usize,
        ec: usize,
        ah: usize,
        aw: usize,
        ac: usize,
    },
    #[error("kernel failure: {0}")]
    Kernel(#[from] ShapeError),
}

/// One layer of a network. Ordinals are 1-based positions in the layer list.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Conv(FilterBank),
    MaxPool,
    Relu,
    SoftMax,
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv(_) => "conv",
            LayerSpec::MaxPool => "maxpool",
            LayerSpec::Relu => "relu",
            LayerSpec::SoftMax => "softmax",
        }
    }
}

/// Ordered layers with validated shape chaining from a fixed input shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input_shape: (usize, usize, usize),
    layers: Vec<LayerSpec>,
    // shapes[0] is the input shape, shapes[l] the output of layer l.
    shapes: Vec<(usize, usize, usize)>,
}

impl Network {
    pub fn new(
        input_shape: (usize, usize, usize),
        layers: Vec<LayerSpec>,
    ) -> Result<Self, NetworkError> {
        let shapes = chain_shapes(input_shape, &layers)?;
        Ok(Network {
            input_shape,
            layers,
            shapes,
        })
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Per-layer output shapes; entry 0 is the input shape, entry `l` the
    /// output of layer `l`.
    pub fn shapes(&self) -> &[(usize, usize, usize)] {
        &self.shapes
    }

    pub fn layer(&self, ordinal: usize) -> Result<&LayerSpec, NetworkError> {
        if ordinal == 0 || ordinal > self.layers.len() {
            return Err(NetworkError::NoSuchLayer {
                layer: ordinal,
                count: self.layers.len(),
            });
        }
        Ok(&self.layers[ordinal - 1])
    }

    /// The filter bank of conv layer `ordinal`.
    pub fn conv_bank(&self, ordinal: usize) -> Result<&FilterBank, NetworkError> {
        match self.layer(ordinal)? {
            LayerSpec::Conv(bank) => Ok(bank),
            other => Err(NetworkError::NotConvLayer {
                layer: ordinal,
                kind: other.kind(),
            }),
        }
    }

    /// Ordinals of all conv layers, in order.
    pub fn conv_ordinals(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| matches!(l, LayerSpec::Conv(_)).then_some(i + 1))
            .collect()
    }

    pub(crate) fn conv_bank_mut(&mut self, ordinal: usize) -> &mut FilterBank {
        match &mut self.layers[ordinal - 1] {
            LayerSpec::Conv(bank) => bank,
            _ => panic!("layer {ordinal} is not a convolution"),
        }
    }

    fn check_input(&self, image: &Tensor3) -> Result<(), NetworkError> {
        if image.dims() != self.input_shape {
            let (eh, ew, ec) = self.input_shape;
            let (ah, aw, ac) = image.dims();
            return Err(NetworkError::InputShapeMismatch {
                eh,
                ew,
                ec,
                ah,
                aw,
                ac,
            });
        }
        Ok(())
    }

    /// Runs the network on `image`, capturing the outputs of the requested
    /// layer ordinals.
    pub fn forward(&self, image: &Tensor3, capture: &[usize]) -> Result<ActivationTrace, NetworkError> {
        self.forward_impl(image, capture, true)
    }

    /// Forward pass with every conv bias suppressed: the response to the
    /// filters alone. This is the reference side of reconstruction
    /// comparisons, since decoded filters carry no bias term.
    pub fn forward_unbiased(
        &self,
        image: &Tensor3,
        capture: &[usize],
    ) -> Result<ActivationTrace, NetworkError> {
        self.forward_impl(image, capture, false)
    }

    fn forward_impl(
        &self,
        image: &Tensor3,
        capture: &[usize],
        use_bias: bool,
    ) -> Result<ActivationTrace, NetworkError> {
        self.check_input(image)?;
        let wanted: std::collections::BTreeSet<usize> = capture.iter().copied().collect();
        let mut trace = ActivationTrace::default();
        let mut cur = image.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            cur = apply_layer(layer, &cur, use_bias)?;
            if wanted.contains(&(i + 1)) {
                trace.map.insert(i + 1, cur.clone());
            }
        }
        Ok(trace)
    }

    /// Output of the final layer.
    pub fn output(&self, image: &Tensor3) -> Result<Tensor3, NetworkError> {
        let n = self.layers.len();
        let mut trace = self.forward(image, &[n])?;
        Ok(trace.map.remove(&n).expect("final layer captured"))
    }
}

pub(crate) fn apply_layer(
    layer: &LayerSpec,
    input: &Tensor3,
    use_bias: bool,
) -> Result<Tensor3, NetworkError> {
    let out = match layer {
        LayerSpec::Conv(bank) => correlate_valid(input, bank, 1, use_bias)?,
        LayerSpec::MaxPool => max_pool(input)?,
        LayerSpec::Relu => relu(input),
        LayerSpec::SoftMax => softmax(input)?,
    };
    Ok(out)
}

fn chain_shapes(
    input: (usize, usize, usize),
    layers: &[LayerSpec],
) -> Result<Vec<(usize, usize, usize)>, NetworkError> {
    let mut shapes = vec![input];
    let (mut h, mut w, mut c) = input;
    for (i, layer) in layers.iter().enumerate() {
        let ordinal = i + 1;
        match layer {
            LayerSpec::Conv(bank) => {
                let (fh, fw, fc) = bank.filter_dims();
                if fc != c {
                    return Err(NetworkError::ChannelChain {
                        layer: ordinal,
                        filter: fc,
                        input: c,
                    });
                }
                if fh > h || fw > w {
                    return Err(NetworkError::FilterDoesNotFit {
                        layer: ordinal,
                        fh,
                        fw,
                        h,
                        w,
                    });
                }
                h = h - fh + 1;
                w = w - fw + 1;
                c = bank.len();
            }
            LayerSpec::MaxPool => {
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(NetworkError::PoolNeedsEvenDims { layer: ordinal, h, w });
                }
                h /= 2;
                w /= 2;
            }
            LayerSpec::Relu => {}
            LayerSpec::SoftMax => {
                if h != 1 || w != 1 {
                    return Err(NetworkError::SoftmaxNeedsScalar { layer: ordinal, h, w });
                }
            }
        }
        shapes.push((h, w, c));
    }
    Ok(shapes)
}

/// Captured per-layer outputs of one forward pass, keyed by layer ordinal.
#[derive(Debug, Clone, Default)]
pub struct ActivationTrace {
    map: BTreeMap<usize, Tensor3>,
}

impl ActivationTrace {
    pub fn get(&self, ordinal: usize) -> Option<&Tensor3> {
        self.map.get(&ordinal)
    }

    pub fn take(&mut self, ordinal: usize) -> Option<Tensor3> {
        self.map.remove(&ordinal)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Tensor3)> {
        self.map.iter().map(|(&k, v)| (k, v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

fn zero_bank(count: usize, h: usize, w: usize, c: usize) -> FilterBank {
    let filters = (0..count).map(|_| Tensor3::zeros(h, w, c)).collect();
    FilterBank::unbiased(filters).expect("zero bank is well formed")
}

/// The 8-layer LeNet used throughout: conv 20@5x5x1, pool, conv 50@5x5x20,
/// pool, conv 500@4x4x50, relu, conv 10@1x1x500, softmax, on 28x28x1 input.
/// Weights and biases start at zero; training initializes them.
pub fn lenet_architecture() -> Network {
    Network::new(
        (28, 28, 1),
        vec![
            LayerSpec::Conv(zero_bank(20, 5, 5, 1)),
            LayerSpec::MaxPool,
            LayerSpec::Conv(zero_bank(50, 5, 5, 20)),
            LayerSpec::MaxPool,
            LayerSpec::Conv(zero_bank(500, 4, 4, 50)),
            LayerSpec::Relu,
            LayerSpec::Conv(zero_bank(10, 1, 1, 500)),
            LayerSpec::SoftMax,
        ],
    )
    .expect("LeNet chains correctly")
}

/// Writes the model container: `CDN1`, a readable manifest, then one raw
/// little-endian f32 blob with each conv layer's filters (filter-major,
/// row-major H,W,C inside a filter) followed by its biases.
pub fn save_model(net: &Network, path: impl AsRef<Path>) -> Result<(), ContainerError> {
    let mut out = BufWriter::new(File::create(path)?);
    let (h, w, c) = net.input_shape();
    write!(out, "{MODEL_MAGIC}\ninput {h} {w} {c}\nlayers {}\n", net.num_layers())?;
    for layer in net.layers() {
        match layer {
            LayerSpec::Conv(bank) => {
                let (fh, fw, fc) = bank.filter_dims();
                writeln!(out, "conv {} {fh} {fw} {fc}", bank.len())?;
            }
            other => writeln!(out, "{}", other.kind())?,
        }
    }
    writeln!(out, "data")?;
    for layer in net.layers() {
        if let LayerSpec::Conv(bank) = layer {
            for filter in bank.filters() {
                container::write_f32_blob(&mut out, filter.values().iter().copied())?;
            }
            container::write_f32_blob(&mut out, bank.biases().iter().copied())?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads a model container written by [`save_model`]. Weights round-trip
/// bit-exactly at 32-bit precision.
pub fn load_model(path: impl AsRef<Path>) -> Result<Network, ContainerError> {
    let raw = container::read_container(File::open(path)?, MODEL_MAGIC)?;
    let mut lines = raw.lines.iter().enumerate().map(|(i, l)| (i + 2, l.as_str()));

    let (no, line) = lines.next().ok_or(ContainerError::Manifest {
        line: 2,
        message: "missing `input` line".into(),
    })?;
    let [h, w, c] = container::parse_fields(line, no, "input")?;

    let (no, line) = lines.next().ok_or(ContainerError::Manifest {
        line: 3,
        message: "missing `layers` line".into(),
    })?;
    let [layer_count] = container::parse_fields(line, no, "layers")?;

    // First pass: parse layer kinds and dims.
    enum Parsed {
        Conv { count: usize, h: usize, w: usize, c: usize },
        MaxPool,
        Relu,
        SoftMax,
    }
    let mut parsed = Vec::with_capacity(layer_count);
    for _ in 0..layer_count {
        let (no, line) = lines.next().ok_or(ContainerError::Manifest {
            line: 0,
            message: format!("manifest declares {layer_count} layers but ends early"),
        })?;
        let head = line.split_whitespace().next().unwrap_or("");
        parsed.push(match head {
            "conv" => {
                let [count, fh, fw, fc] = container::parse_fields(line, no, "conv")?;
                Parsed::Conv { count, h: fh, w: fw, c: fc }
            }
            "maxpool" => Parsed::MaxPool,
            "relu" => Parsed::Relu,
            "softmax" => Parsed::SoftMax,
            other => {
                return Err(ContainerError::Manifest {
                    line: no,
                    message: format!("unknown layer kind `{other}`"),
                })
            }
        });
    }
    if let Some((no, line)) = lines.next() {
        return Err(ContainerError::Manifest {
            line: no,
            message: format!("unexpected line `{line}` after declared layers"),
        });
    }

    let total_samples: usize = parsed
        .iter()
        .map(|p| match p {
            Parsed::Conv { count, h, w, c } => count * (h * w * c) + count,
            _ => 0,
        })
        .sum();
    let samples = container::decode_f32_blob(&raw.blob, total_samples)?;

    // Second pass: slice the blob into banks.
    let mut cursor = 0usize;
    let mut layers = Vec::with_capacity(parsed.len());
    for p in parsed {
        layers.push(match p {
            Parsed::Conv { count, h, w, c } => {
                let per = h * w * c;
                let mut filters = Vec::with_capacity(count);
                for _ in 0..count {
                    let vals = samples[cursor..cursor + per].to_vec();
                    cursor += per;
                    filters.push(Tensor3::new(h, w, c, vals)?);
                }
                let biases = samples[cursor..cursor + count].to_vec();
                cursor += count;
                LayerSpec::Conv(FilterBank::new(filters, biases)?)
            }
            Parsed::MaxPool => LayerSpec::MaxPool,
            Parsed::Relu => LayerSpec::Relu,
            Parsed::SoftMax => LayerSpec::SoftMax,
        });
    }

    Ok(Network::new((h, w, c), layers)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn rand_bank(rng: &mut ChaCha20Rng, n: usize, h: usize, w: usize, c: usize) -> FilterBank {
        let filters = (0..n)
            .map(|_| Tensor3::from_fn(h, w, c, |_, _, _| rng.gen_range(-1.0..1.0)))
            .collect();
        let biases = (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect();
        FilterBank::new(filters, biases).unwrap()
    }

    #[test]
    fn lenet_shape_chain() {
        let net = lenet_architecture();
        let expect = [
            (28, 28, 1),
            (24, 24, 20),
            (12, 12, 20),
            (8, 8, 50),
            (4, 4, 50),
            (1, 1, 500),
            (1, 1, 500),
            (1, 1, 10),
            (1, 1, 10),
        ];
        assert_eq!(net.shapes(), &expect);
        let bank7 = net.conv_bank(7).unwrap();
        assert_eq!(bank7.filter_dims(), (1, 1, 500));
        assert_eq!(bank7.len(), 10);
    }

    #[test]
    fn zero_lenet_maps_zero_image_to_uniform_softmax() {
        let net = lenet_architecture();
        let image = Tensor3::zeros(28, 28, 1);
        let trace = net.forward(&image, &[5, 7, 8]).unwrap();
        assert!(trace.get(5).unwrap().values().iter().all(|&v| v == 0.0));
        assert!(trace.get(7).unwrap().values().iter().all(|&v| v == 0.0));
        for &p in trace.get(8).unwrap().values() {
            assert!((p - 0.1).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_reduces_to_correlation_for_single_conv() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let bank = rand_bank(&mut rng, 3, 3, 3, 2);
        let net = Network::new((7, 7, 2), vec![LayerSpec::Conv(bank.clone())]).unwrap();
        let image = Tensor3::from_fn(7, 7, 2, |_, _, _| rng.gen_range(-1.0..1.0));
        let out = net.output(&image).unwrap();
        let direct = correlate_valid(&image, &bank, 1, true).unwrap();
        assert_eq!(out.max_abs_diff(&direct), 0.0);
    }

    #[test]
    fn forward_trace_dims_agree_with_shapes() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let net = Network::new(
            (12, 12, 1),
            vec![
                LayerSpec::Conv(rand_bank(&mut rng, 4, 3, 3, 1)),
                LayerSpec::MaxPool,
                LayerSpec::Conv(rand_bank(&mut rng, 6, 2, 2, 4)),
                LayerSpec::Relu,
            ],
        )
        .unwrap();
        let image = Tensor3::from_fn(12, 12, 1, |_, _, _| rng.gen_range(-1.0..1.0));
        let all: Vec<usize> = (1..=net.num_layers()).collect();
        let trace = net.forward(&image, &all).unwrap();
        for (ordinal, out) in trace.iter() {
            assert_eq!(out.dims(), net.shapes()[ordinal], "layer {ordinal}");
        }
    }

    #[test]
    fn forward_is_bit_reproducible() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let net = Network::new(
            (10, 10, 1),
            vec![
                LayerSpec::Conv(rand_bank(&mut rng, 5, 3, 3, 1)),
                LayerSpec::MaxPool,
            ],
        )
        .unwrap();
        let image = Tensor3::from_fn(10, 10, 1, |_, _, _| rng.gen_range(-1.0..1.0));
        let a = net.output(&image).unwrap();
        let b = net.output(&image).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn validation_rejects_bad_chains() {
        let bad_channels = Network::new(
            (8, 8, 2),
            vec![LayerSpec::Conv(FilterBank::unbiased(vec![Tensor3::zeros(3, 3, 3)]).unwrap())],
        );
        assert_eq!(
            bad_channels.unwrap_err(),
            NetworkError::ChannelChain { layer: 1, filter: 3, input: 2 }
        );

        let odd_pool = Network::new(
            (9, 8, 1),
            vec![LayerSpec::MaxPool],
        );
        assert_eq!(
            odd_pool.unwrap_err(),
            NetworkError::PoolNeedsEvenDims { layer: 1, h: 9, w: 8 }
        );

        let early_softmax = Network::new((4, 4, 3), vec![LayerSpec::SoftMax]);
        assert_eq!(
            early_softmax.unwrap_err(),
            NetworkError::SoftmaxNeedsScalar { layer: 1, h: 4, w: 4 }
        );
    }

    #[test]
    fn forward_rejects_wrong_input_shape() {
        let net = lenet_architecture();
        let image = Tensor3::zeros(27, 28, 1);
        assert!(matches!(
            net.forward(&image, &[]),
            Err(NetworkError::InputShapeMismatch { .. })
        ));
    }

    #[test]
    fn empty_network_shapes_is_just_input() {
        let net = Network::new((5, 4, 2), vec![]).unwrap();
        assert_eq!(net.shapes(), &[(5, 4, 2)]);
    }

    #[test]
    fn model_container_round_trips_bit_exactly() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        // f32-representable weights, as the trainer produces.
        let filters: Vec<Tensor3> = (0..4)
            .map(|_| {
                Tensor3::from_fn(3, 3, 2, |_, _, _| (rng.gen_range(-1.0f64..1.0) as f32) as f64)
            })
            .collect();
        let biases: Vec<f64> = (0..4).map(|_| (rng.gen_range(-1.0f64..1.0) as f32) as f64).collect();
        let net = Network::new(
            (8, 8, 2),
            vec![
                LayerSpec::Conv(FilterBank::new(filters, biases).unwrap()),
                LayerSpec::MaxPool,
                LayerSpec::Relu,
            ],
        )
        .unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.cdn");
        save_model(&net, &path).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(net, loaded);

        // Saving the loaded network reproduces the file byte for byte.
        let path2 = dir.path().join("net2.cdn");
        save_model(&loaded, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn load_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.cdn");
        std::fs::write(&path, b"XXXX\ninput 1 1 1\nlayers 0\ndata\n").unwrap();
        assert!(matches!(load_model(&path), Err(ContainerError::BadMagic { .. })));
    }

    #[test]
    fn load_rejects_truncated_blob() {
        let net = Network::new(
            (6, 6, 1),
            vec![LayerSpec::Conv(zero_bank(20, 3, 3, 1))],
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.cdn");
        save_model(&net, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        // Drop the last filter-plus-bias worth of bytes: 19 filters remain.
        std::fs::write(&path, &bytes[..bytes.len() - (9 + 1) * 4]).unwrap();
        assert!(matches!(
            load_model(&path),
            Err(ContainerError::TruncatedBlob { .. })
        ));
    }

    #[test]
    fn load_rejects_inconsistent_manifest() {
        // Manifest declares a conv whose channels cannot chain.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("chain.cdn");
        let mut bytes = b"CDN1\ninput 6 6 1\nlayers 1\nconv 1 3 3 2\ndata\n".to_vec();
        bytes.resize(bytes.len() + (3 * 3 * 2 + 1) * 4, 0u8);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_model(&path),
            Err(ContainerError::ShapeMismatch(NetworkError::ChannelChain { .. }))
        ));
    }

    #[test]
    fn load_rejects_trailing_bytes() {
        let net = Network::new((4, 4, 1), vec![LayerSpec::Conv(zero_bank(1, 2, 2, 1))]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trail.cdn");
        save_model(&net, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.extend_from_slice(&[0u8; 3]);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_model(&path),
            Err(ContainerError::TrailingData { extra_bytes: 3 })
        ));
    }
}
