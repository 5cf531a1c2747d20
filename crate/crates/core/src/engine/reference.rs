//! Deterministic fixture networks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Conv2d, Dense, Layer, ModelGraph, Normalization};
use crate::label::{Label, NUM_CLASSES};

pub const REFERENCE_INPUT_SIDE: usize = 64;

/// Side of the input the classifier-head fixture flattens directly.
const HEAD_INPUT_SIDE: usize = 8;

fn he_uniform(rng: &mut ChaCha8Rng, fan_in: usize, n: usize) -> Vec<f32> {
    let bound = (6.0 / fan_in as f64).sqrt() as f32;
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

fn bias(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-0.05f32..0.05)).collect()
}

fn conv(rng: &mut ChaCha8Rng, in_ch: usize, out_ch: usize) -> Layer {
    let fan_in = in_ch * 9;
    Layer::Conv2d(Conv2d {
        out_channels: out_ch,
        in_channels: in_ch,
        kernel: 3,
        stride: 1,
        pad: 1,
        weight: he_uniform(rng, fan_in, out_ch * fan_in),
        bias: bias(rng, out_ch),
    })
}

fn dense(rng: &mut ChaCha8Rng, inp: usize, out: usize) -> Layer {
    Layer::Dense(Dense {
        in_features: inp,
        out_features: out,
        weight: he_uniform(rng, inp, inp * out),
        bias: bias(rng, out),
    })
}

/// Conv(8) - ReLU - MaxPool - Conv(16) - ReLU - MaxPool - GAP - Dense(6) - Softmax
/// on a 64x64 input, weights drawn from ChaCha8 seeded with `seed`.
pub fn reference_model(seed: u64) -> ModelGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = vec![
        conv(&mut rng, 3, 8),
        Layer::ReLU,
        Layer::MaxPool {
            kernel: 2,
            stride: 2,
        },
        conv(&mut rng, 8, 16),
        Layer::ReLU,
        Layer::MaxPool {
            kernel: 2,
            stride: 2,
        },
        Layer::GlobalAvgPool,
        dense(&mut rng, 16, NUM_CLASSES),
        Layer::Softmax,
    ];
    ModelGraph::new(
        layers,
        Label::names(),
        REFERENCE_INPUT_SIDE,
        Normalization::default(),
    )
    .expect("reference architecture is valid")
}

/// LSW1 bytes of [`reference_model`].
pub fn export_reference_model(seed: u64) -> Vec<u8> {
    reference_model(seed).to_bytes()
}

/// Flatten - Dense 4096 - Dense 1072 - Dense 256 - Dense 6 classifier head with
/// dropouts 0.3, 0.2, 0.15, applied to an 8x8 input.
pub fn classifier_head_model(seed: u64) -> ModelGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flat = 3 * HEAD_INPUT_SIDE * HEAD_INPUT_SIDE;
    let mut layers = vec![Layer::Flatten];
    let mut inp = flat;
    for (width, rate) in [(4096, 0.3f32), (1072, 0.2), (256, 0.15)] {
        layers.push(dense(&mut rng, inp, width));
        layers.push(Layer::ReLU);
        layers.push(Layer::Dropout { rate });
        inp = width;
    }
    layers.push(dense(&mut rng, inp, NUM_CLASSES));
    layers.push(Layer::Softmax);
    ModelGraph::new(
        layers,
        Label::names(),
        HEAD_INPUT_SIDE,
        Normalization::default(),
    )
    .expect("head architecture is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn export_is_deterministic_and_seed_dependent() {
        assert_eq!(export_reference_model(7), export_reference_model(7));
        assert_ne!(export_reference_model(7), export_reference_model(8));
        let m = ModelGraph::load(&export_reference_model(7)).unwrap();
        assert_eq!(m.logit_layers(), 8);
        assert_eq!(m.shape_after(8), &[1, 6]);
    }
}
