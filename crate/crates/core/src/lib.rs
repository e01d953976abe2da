//! convdec: image-space decoding and analysis of CNN convolution filters.
//!
//! The core idea: a stack of valid correlations collapses into a single
//! correlation with a "decoded" filter built by overlap-add substitution,
//! with pooling steps inverted by plain 2x interpolation. Decoded filters
//! can be rendered, thresholded, and correlated with images to approximate
//! any layer's response in one shot.
//!
//! Modules:
//! - [`tensor`]: dense 3-D tensors and the numeric kernels;
//! - [`network`]: layer specs, validated assembly, forward pass, model file;
//! - [`data`]: IDX ingestion, normalization, PGM/CSV exports;
//! - [`train`]: SGD-with-momentum trainer and a finite-difference oracle;
//! - [`decode`]: the filter decoding walk and the decoded-filter file;
//! - [`eval`]: reconstruction error, activation matrix, response comparison;
//! - [`synth`]: the handmade stroke/part/character network and its
//!   round-trip check.

pub mod data;
pub mod decode;
pub mod eval;
pub mod network;
pub mod synth;
pub mod tensor;
pub mod train;

mod container;
mod parallel;

pub use container::ContainerError;
pub use data::{DataError, LabeledDataset};
pub use decode::DecodedFilter;
pub use network::{lenet_architecture, load_model, save_model, LayerSpec, Network, NetworkError};
pub use tensor::{FilterBank, Interp, ShapeError, Tensor3};
pub use train::{TrainConfig, TrainError};
