//! A handmade 4-layer network with deterministic filters: 4 oriented stroke
//! detectors, 14 sub-shape detectors (corners, terminators, crossings,
//! bars) composed from strokes, and 8 character templates composed from
//! sub-shapes. Its round trip - feed a decoded top filter back in and check
//! that the same filter wins - is the strongest training-free validation of
//! the decoding method.

use std::path::{Path, PathBuf};

use crate::data::{export_pgm, tile_channels, DataError};
use crate::decode::decode_filter;
use crate::network::{LayerSpec, Network, NetworkError};
use crate::parallel;
use crate::tensor::{normalize_range, FilterBank, Interp, Tensor3};

/// Input canvas; decoded 14x14 character templates embed with margin.
pub const CANVAS: usize = 24;

pub const STROKE_NAMES: [&str; 4] = ["horizontal", "vertical", "diagonal", "antidiagonal"];

pub const PART_NAMES: [&str; 14] = [
    "corner-tl",
    "corner-tr",
    "corner-bl",
    "corner-br",
    "term-up",
    "term-down",
    "term-left",
    "term-right",
    "cross-plus",
    "cross-x",
    "bar-h",
    "bar-v",
    "bar-d",
    "bar-a",
];

pub const CHARACTER_NAMES: [&str; 8] = ["C", "D", "L", "T", "H", "X", "Z", "O"];

// Stroke channel indices.
const H: usize = 0;
const V: usize = 1;
const D: usize = 2;
const A: usize = 3;

// Part indices.
const CORNER_TL: usize = 0;
const CORNER_TR: usize = 1;
const CORNER_BL: usize = 2;
const CORNER_BR: usize = 3;
const TERM_U: usize = 4;
const TERM_D: usize = 5;
const TERM_R: usize = 7;
const CROSS_PLUS: usize = 8;
const CROSS_X: usize = 9;
const BAR_H: usize = 10;
const BAR_V: usize = 11;
const BAR_D: usize = 12;
const BAR_A: usize = 13;

// (row, col, stroke, weight) placements inside each 5x5 part filter.
// Corners carry negative cells that veto arms continuing past the corner;
// terminators veto both the stroke continuing past the end and an
// orthogonal turn there (so ends do not read as corners); crossings demand
// both strokes continuing through the center. These vetoes keep junctions,
// ends and corners mutually distinguishable, which the round-trip check
// depends on.
const PART_SPECS: [&[(usize, usize, usize, f64)]; 14] = [
    &[(0, 2, H, 1.0), (2, 0, V, 1.0), (0, 0, H, -0.5), (0, 0, V, -0.5)], // corner-tl
    &[(0, 0, H, 1.0), (2, 2, V, 1.0), (0, 2, H, -0.5), (0, 2, V, -0.5)], // corner-tr
    &[(0, 0, V, 1.0), (2, 2, H, 1.0), (2, 0, V, -0.5), (2, 0, H, -0.5)], // corner-bl
    &[(0, 2, V, 1.0), (2, 0, H, 1.0), (2, 2, V, -0.5), (2, 2, H, -0.5)], // corner-br
    &[(2, 1, V, 1.0), (0, 1, V, -1.0), (0, 1, H, -1.0)],                 // term-up
    &[(2, 1, V, 1.0), (4, 1, V, -1.0), (4, 1, H, -1.0)],                 // term-down
    &[(1, 2, H, 1.0), (1, 0, H, -1.0), (2, 0, V, -1.0)],                 // term-left
    &[(1, 2, H, 1.0), (1, 4, H, -1.0), (2, 4, V, -1.0)],                 // term-right
    &[(1, 0, H, 1.0), (1, 2, H, 1.0), (0, 1, V, 1.0), (2, 1, V, 1.0)],   // cross-plus
    &[(0, 0, D, 1.0), (2, 2, D, 1.0), (0, 2, A, 1.0), (2, 0, A, 1.0)],   // cross-x
    &[(2, 1, H, 1.0), (2, 3, H, 1.0)],                                   // bar-h
    &[(1, 2, V, 1.0), (3, 2, V, 1.0)],                                   // bar-v
    &[(0, 0, D, 1.0), (2, 2, D, 1.0)],                                   // bar-d
    &[(0, 2, A, 1.0), (2, 0, A, 1.0)],                                   // bar-a
];

// (row, col, part, weight) placements inside each 3x3 character filter.
// Every character anchors on a heavily weighted sub-shape no other
// character uses (C: bar ends; D: edge diagonals; L: stem top; T: stem
// bottom; H: plus-crossings; X: the x-crossing; O: the right corners), so
// templates cannot win on shared bars alone.
const CHARACTER_SPECS: [&[(usize, usize, usize, f64)]; 8] = [
    &[
        (0, 0, CORNER_TL, 1.0),
        (2, 0, CORNER_BL, 1.0),
        (0, 2, TERM_R, 3.0),
        (2, 2, TERM_R, 3.0),
    ], // C
    &[
        (0, 0, CORNER_TL, 1.0),
        (2, 0, CORNER_BL, 1.0),
        (0, 2, BAR_D, 3.0),
        (2, 2, BAR_A, 3.0),
    ], // D
    &[(0, 0, TERM_U, 3.0), (1, 0, BAR_V, 1.0), (2, 0, CORNER_BL, 1.0)], // L
    &[(0, 1, BAR_H, 1.0), (1, 1, BAR_V, 1.0), (2, 1, TERM_D, 3.0)],     // T
    &[
        (1, 0, BAR_V, 1.0),
        (1, 2, BAR_V, 1.0),
        (1, 0, CROSS_PLUS, 3.0),
        (1, 2, CROSS_PLUS, 3.0),
    ], // H
    &[(1, 1, BAR_D, 1.0), (1, 1, BAR_A, 1.0), (1, 1, CROSS_X, 3.0)],    // X
    &[(0, 1, BAR_H, 1.0), (1, 1, BAR_A, 1.0), (2, 1, BAR_H, 1.0)],      // Z
    &[
        (0, 0, CORNER_TL, 1.0),
        (0, 2, CORNER_TR, 3.0),
        (2, 0, CORNER_BL, 1.0),
        (2, 2, CORNER_BR, 3.0),
    ], // O
];

// Per-character output gain, calibrating self responses so that no
// template wins just by being cheap to match under the sliding spatial
// max. With these gains every filter survives its round trip with at
// least a 13% margin for all three interpolation methods.
const CHARACTER_SCALES: [f64; 8] = [0.6357, 1.0, 0.57, 0.6537, 0.8651, 0.9135, 0.7911, 1.0];

/// Zero-mean oriented stroke detector: +1 along the stroke, -0.25 elsewhere.
fn stroke_filter(stroke: usize) -> Tensor3 {
    Tensor3::from_fn(5, 5, 1, |y, x, _| {
        let on = match stroke {
            H => y == 2,
            V => x == 2,
            D => y == x,
            A => y + x == 4,
            _ => unreachable!(),
        };
        if on {
            1.0
        } else {
            -0.25
        }
    })
}

fn part_filter(part: usize) -> Tensor3 {
    let entries = PART_SPECS[part];
    let positive: f64 = entries.iter().map(|e| e.3.max(0.0)).sum();
    let mut f = Tensor3::zeros(5, 5, 4);
    for &(r, c, s, w) in entries {
        let v = f.get(r, c, s) + w / positive;
        f.set(r, c, s, v);
    }
    f
}

fn character_filter(ch: usize) -> Tensor3 {
    let entries = CHARACTER_SPECS[ch];
    let total: f64 = entries.iter().map(|e| e.3).sum();
    let mut f = Tensor3::zeros(3, 3, 14);
    for &(r, c, p, w) in entries {
        let v = f.get(r, c, p) + CHARACTER_SCALES[ch] * w / total;
        f.set(r, c, p, v);
    }
    f
}

/// Conv(4@5x5x1) -> Conv(14@5x5x4) -> MaxPool -> Conv(8@3x3x14) on a
/// 24x24x1 canvas; all weights deterministic constants, zero biases.
pub fn build_synthetic_net() -> Network {
    let strokes = FilterBank::unbiased((0..4).map(stroke_filter).collect()).expect("strokes");
    let parts = FilterBank::unbiased((0..14).map(part_filter).collect()).expect("parts");
    let characters =
        FilterBank::unbiased((0..8).map(character_filter).collect()).expect("characters");
    Network::new(
        (CANVAS, CANVAS, 1),
        vec![
            LayerSpec::Conv(strokes),
            LayerSpec::Conv(parts),
            LayerSpec::MaxPool,
            LayerSpec::Conv(characters),
        ],
    )
    .expect("synthetic net chains")
}

/// Centers `plane` on an h x w zero canvas, cropping when larger.
pub fn embed_centered(plane: &Tensor3, h: usize, w: usize) -> Tensor3 {
    let (ph, pw, _) = plane.dims();
    let mut out = Tensor3::zeros(h, w, 1);
    // Offsets of the copied region in output and input space.
    let oy = h.saturating_sub(ph) / 2;
    let ox = w.saturating_sub(pw) / 2;
    let iy = ph.saturating_sub(h) / 2;
    let ix = pw.saturating_sub(w) / 2;
    let copy_h = ph.min(h);
    let copy_w = pw.min(w);
    for y in 0..copy_h {
        for x in 0..copy_w {
            out.set(oy + y, ox + x, 0, plane.get(iy + y, ix + x, 0));
        }
    }
    out
}

/// The image fed back into the net for filter `k`: its decoded plane,
/// range-normalized and centered on the input canvas.
pub fn character_input(net: &Network, k: usize, interp: Interp) -> Result<Tensor3, NetworkError> {
    let top = *net.conv_ordinals().last().ok_or(NetworkError::NoConvLayers)?;
    let decoded = decode_filter(net, top, k, interp)?;
    let (h, w, _) = net.input_shape();
    Ok(embed_centered(&normalize_range(&decoded.plane), h, w))
}

/// One filter's round-trip outcome: the winning top-layer channel and the
/// spatial-max response per channel.
#[derive(Debug, Clone)]
pub struct RoundTripOutcome {
    pub filter: usize,
    pub best: usize,
    pub pass: bool,
    pub responses: Vec<f64>,
}

/// Feeds every decoded top-layer filter back through the net; filter k
/// passes when channel k holds the maximum spatial-max activation.
pub fn round_trip(net: &Network, interp: Interp) -> Result<Vec<RoundTripOutcome>, NetworkError> {
    let top = *net.conv_ordinals().last().ok_or(NetworkError::NoConvLayers)?;
    let count = net.conv_bank(top)?.len();
    let outcomes: Vec<Result<RoundTripOutcome, NetworkError>> =
        parallel::map_indexed(count, |k| {
            let image = character_input(net, k, interp)?;
            let mut trace = net.forward(&image, &[top])?;
            let out = trace.take(top).expect("captured");
            let c = out.channels();
            let mut responses = vec![f64::NEG_INFINITY; c];
            for cell in out.values().chunks(c) {
                for (peak, &v) in responses.iter_mut().zip(cell) {
                    *peak = peak.max(v);
                }
            }
            let mut best = 0;
            for (i, &r) in responses.iter().enumerate() {
                if r > responses[best] {
                    best = i;
                }
            }
            Ok(RoundTripOutcome {
                filter: k,
                best,
                pass: best == k,
                responses,
            })
        });
    outcomes.into_iter().collect()
}

/// Writes one PGM per layer (channels tiled into a grid, each cell range
/// normalized) plus the input image; returns the written paths.
pub fn export_activation_atlas(
    net: &Network,
    image: &Tensor3,
    dir: impl AsRef<Path>,
) -> Result<Vec<PathBuf>, AtlasError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(DataError::Io)?;
    let all: Vec<usize> = (1..=net.num_layers()).collect();
    let trace = net.forward(image, &all)?;
    let mut paths = Vec::new();

    let input_path = dir.join("layer0_input.pgm");
    export_pgm(&image.channel_plane(0), &input_path)?;
    paths.push(input_path);

    for (ordinal, out) in trace.iter() {
        let cols = (out.channels() as f64).sqrt().ceil() as usize;
        let grid = tile_channels(out, cols.max(1), 1);
        let path = dir.join(format!("layer{ordinal}_activations.pgm"));
        export_pgm(&grid, &path)?;
        paths.push(path);
    }
    Ok(paths)
}

#[derive(Debug, thiserror::Error)]
pub enum AtlasError {
    #[error(transparent)]
    Net(#[from] NetworkError),
    #[error(transparent)]
    Data(#[from] DataError),
}
