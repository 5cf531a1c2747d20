//! Gradient-weighted class activation maps.

use super::{forward, ops, EngineError, ForwardPass, Layer, ModelGraph, Tensor};
use crate::imaging::{resize_plane, Heatmap, Raster};
use crate::label::NUM_CLASSES;

/// Everything computed on the way to a heatmap, kept for inspection and tests.
#[derive(Debug, Clone)]
pub struct GradCam {
    /// Index of the layer whose output is `activation`.
    pub layer: usize,
    /// `A`, shape `(1, K, h, w)`.
    pub activation: Tensor,
    /// `d logit[target] / dA`, same layout as `activation`.
    pub gradient: Vec<f32>,
    /// Per-channel spatial mean of `gradient`.
    pub alphas: Vec<f64>,
    /// `ReLU(sum_k alpha_k A_k)` before normalization, `h * w` values.
    pub raw: Vec<f64>,
    /// Normalized map upsampled to `input_side x input_side`.
    pub heatmap: Heatmap,
}

/// Layer whose output feeds the map: the last Conv2d, or the ReLU directly after it.
pub fn cam_layer(m: &ModelGraph) -> Result<usize, EngineError> {
    let conv = m
        .layers()
        .iter()
        .rposition(|l| matches!(l, Layer::Conv2d(_)))
        .ok_or(EngineError::NoConvLayer)?;
    Ok(match m.layers().get(conv + 1) {
        Some(Layer::ReLU) => conv + 1,
        _ => conv,
    })
}

/// Back-propagates a unit gradient on `logit[target]` to the output of layer `at`.
pub fn activation_gradient(
    m: &ModelGraph,
    pass: &ForwardPass,
    at: usize,
    target: usize,
) -> Result<Vec<f32>, EngineError> {
    if target >= NUM_CLASSES {
        return Err(EngineError::BadTarget(target));
    }
    let last = m.logit_layers();
    let n = pass.activations[last - 1].shape()[0];
    let mut g = vec![0.0f32; n * NUM_CLASSES];
    for b in 0..n {
        g[b * NUM_CLASSES + target] = 1.0;
    }
    for i in (at + 1..last).rev() {
        g = ops::backward(
            &m.layers()[i],
            &pass.activations[i - 1],
            &pass.activations[i],
            &g,
        )?;
    }
    Ok(g)
}

/// Min-max normalization into `[0, 1]`. A constant positive map becomes all
/// ones; a constant non-positive map becomes all zeros.
pub fn normalize_cam(map: &[f64]) -> Vec<f32> {
    let lo = map.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        map.iter().map(|&v| ((v - lo) / (hi - lo)) as f32).collect()
    } else if hi > 0.0 {
        vec![1.0; map.len()]
    } else {
        vec![0.0; map.len()]
    }
}

/// Grad-CAM for an already preprocessed `(1, 3, side, side)` input.
pub fn grad_cam_tensor(
    m: &ModelGraph,
    input: &Tensor,
    target: usize,
) -> Result<GradCam, EngineError> {
    if target >= NUM_CLASSES {
        return Err(EngineError::BadTarget(target));
    }
    let layer = cam_layer(m)?;
    let pass = forward(m, input)?;
    let gradient = activation_gradient(m, &pass, layer, target)?;
    let activation = pass.activations[layer].clone();
    let [_, k, h, w] = activation.shape()[..] else {
        unreachable!("convolution outputs are rank 4")
    };
    let spatial = h * w;
    let alphas: Vec<f64> = gradient[..k * spatial]
        .chunks(spatial)
        .map(|gk| gk.iter().map(|&v| v as f64).sum::<f64>() / spatial as f64)
        .collect();
    let mut raw = vec![0.0f64; spatial];
    for (a, plane) in alphas.iter().zip(activation.data().chunks(spatial)) {
        for (r, &v) in raw.iter_mut().zip(plane) {
            *r += a * v as f64;
        }
    }
    for r in &mut raw {
        *r = r.max(0.0);
    }
    let side = m.input_side();
    let values = resize_plane(&normalize_cam(&raw), w, h, side, side)
        .into_iter()
        .map(|v| v.clamp(0.0, 1.0))
        .collect();
    Ok(GradCam {
        layer,
        activation,
        gradient,
        alphas,
        raw,
        heatmap: Heatmap {
            width: side as u32,
            height: side as u32,
            values,
        },
    })
}

/// Heatmap aligned with the center-cropped, resized model input of `r`.
pub fn grad_cam(m: &ModelGraph, r: &Raster, target: usize) -> Result<Heatmap, EngineError> {
    let input = m.preprocess(r)?;
    Ok(grad_cam_tensor(m, &input, target)?.heatmap)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{reference_model, Conv2d, Dense, Normalization};
    use crate::label::Label;

    #[test]
    fn constant_positive_map_normalizes_to_ones() {
        assert_eq!(normalize_cam(&[2.5; 9]), vec![1.0; 9]);
        assert_eq!(normalize_cam(&[0.0; 4]), vec![0.0; 4]);
        assert_eq!(normalize_cam(&[1.0, 3.0, 2.0]), vec![0.0, 1.0, 0.5]);
    }

    fn tiny_head(head_w0: f32) -> ModelGraph {
        // 2 constant channels -> GAP -> Dense whose weights read only channel 1.
        let conv = Layer::Conv2d(Conv2d {
            out_channels: 2,
            in_channels: 3,
            kernel: 1,
            stride: 1,
            pad: 0,
            weight: vec![0.0; 6],
            bias: vec![1.0, 2.0],
        });
        let mut weight = vec![0.0; 12];
        for o in 0..6 {
            weight[o * 2] = head_w0;
            weight[o * 2 + 1] = 0.5;
        }
        let dense = Layer::Dense(Dense {
            in_features: 2,
            out_features: 6,
            weight,
            bias: vec![0.0; 6],
        });
        ModelGraph::new(
            vec![
                conv,
                Layer::ReLU,
                Layer::GlobalAvgPool,
                dense,
                Layer::Softmax,
            ],
            Label::names(),
            4,
            Normalization::default(),
        )
        .unwrap()
    }

    #[test]
    fn ignored_channel_has_zero_alpha() {
        let m = tiny_head(0.0);
        let cam = grad_cam_tensor(&m, &Tensor::zeros(vec![1, 3, 4, 4]), 2).unwrap();
        assert_eq!(cam.layer, 1);
        assert_eq!(cam.alphas[0], 0.0);
        assert!((cam.alphas[1] - 0.5 / 16.0).abs() < 1e-9);
        // Uniform positive A with positive alpha: all ones after normalization.
        assert!(cam.heatmap.values.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn errors() {
        let m = reference_model(0);
        let x = Tensor::zeros(vec![1, 3, 64, 64]);
        assert_eq!(
            grad_cam_tensor(&m, &x, 6).unwrap_err(),
            EngineError::BadTarget(6)
        );
        let head = ModelGraph::new(
            vec![
                Layer::Flatten,
                Layer::Dense(Dense {
                    in_features: 3,
                    out_features: 6,
                    weight: vec![0.0; 18],
                    bias: vec![0.0; 6],
                }),
            ],
            Label::names(),
            1,
            Normalization::default(),
        )
        .unwrap();
        let x = Tensor::zeros(vec![1, 3, 1, 1]);
        assert_eq!(
            grad_cam_tensor(&head, &x, 0).unwrap_err(),
            EngineError::NoConvLayer
        );
    }

    #[test]
    fn reference_heatmap_is_input_aligned_and_bounded() {
        let m = reference_model(4);
        let r = Raster::from_fn(80, 64, |x, y| {
            [(x * 3) as u8, (y * 4) as u8, ((x + y) * 2) as u8]
        });
        for t in 0..NUM_CLASSES {
            let h = grad_cam(&m, &r, t).unwrap();
            assert_eq!((h.width, h.height), (64, 64));
            assert!(h.values.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
