//! Sequential CNN inference over portable weights.
//!
//! A [`ModelGraph`] is an ordered list of [`Layer`]s applied to an
//! `N x C x H x W` activation. Graphs are validated once at construction, so
//! `forward` only has to guard against non-finite values. Dot products
//! accumulate in `f64` and are stored as `f32`.

mod format;
mod gradcam;
mod ops;
mod reference;

use thiserror::Error;

use crate::imaging::{crop_resize, ImagingError, Raster};
use crate::label::{Label, NUM_CLASSES};

pub use format::{FORMAT_VERSION, MAGIC};
pub use gradcam::{
    activation_gradient, cam_layer, grad_cam, grad_cam_tensor, normalize_cam, GradCam,
};
pub use reference::{
    classifier_head_model, export_reference_model, reference_model, REFERENCE_INPUT_SIDE,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("bad magic: expected \"LSW1\"")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated file")]
    TruncatedFile,
    #[error("checksum mismatch")]
    ChecksumMismatch,
    #[error("malformed model: {0}")]
    Malformed(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite activation after layer {layer}")]
    NonFiniteActivation { layer: usize },
    #[error("model has no convolution layer")]
    NoConvLayer,
    #[error("target class {0} out of range")]
    BadTarget(usize),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
}

impl EngineError {
    pub fn code(&self) -> &'static str {
        match self {
            EngineError::BadMagic => "BadMagic",
            EngineError::UnsupportedVersion(_) => "UnsupportedVersion",
            EngineError::TruncatedFile => "TruncatedFile",
            EngineError::ChecksumMismatch => "ChecksumMismatch",
            EngineError::Malformed(_) => "MalformedModel",
            EngineError::ShapeMismatch(_) => "ShapeMismatch",
            EngineError::NonFiniteActivation { .. } => "NonFiniteActivation",
            EngineError::NoConvLayer => "NoConvLayer",
            EngineError::BadTarget(_) => "BadTarget",
            EngineError::Imaging(e) => e.code(),
        }
    }
}

/// Dense row-major `f32` array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, EngineError> {
        if shape.is_empty() || shape.len() > 4 {
            return Err(EngineError::ShapeMismatch(format!(
                "rank {} tensor",
                shape.len()
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(EngineError::ShapeMismatch(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// `(out_channels, in_channels, kernel, kernel)`, row-major.
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub in_features: usize,
    pub out_features: usize,
    /// `(out_features, in_features)`, row-major.
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

/// Inference-mode batch normalization over dimension 1.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub eps: f32,
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv2d(Conv2d),
    ReLU,
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    BatchNorm(BatchNorm),
    GlobalAvgPool,
    Flatten,
    Dense(Dense),
    /// Identity at inference; the rate is kept for documentation.
    Dropout {
        rate: f32,
    },
    /// Only valid as the final layer.
    Softmax,
}

impl Layer {
    pub fn name(&self) -> &'static str {
        match self {
            Layer::Conv2d(_) => "Conv2d",
            Layer::ReLU => "ReLU",
            Layer::MaxPool { .. } => "MaxPool",
            Layer::BatchNorm(_) => "BatchNorm",
            Layer::GlobalAvgPool => "GlobalAvgPool",
            Layer::Flatten => "Flatten",
            Layer::Dense(_) => "Dense",
            Layer::Dropout { .. } => "Dropout",
            Layer::Softmax => "Softmax",
        }
    }

    /// Output shape for `input`, or why the layer cannot consume it.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, EngineError> {
        let bad = |msg: String| {
            Err(EngineError::ShapeMismatch(format!(
                "{}: {msg}",
                self.name()
            )))
        };
        match self {
            Layer::Conv2d(c) => {
                let [n, ch, h, w] = input[..] else {
                    return bad(format!("needs a rank-4 input, got {input:?}"));
                };
                if ch != c.in_channels {
                    return bad(format!(
                        "expects {} input channels, got {ch}",
                        c.in_channels
                    ));
                }
                if c.kernel == 0 || c.stride == 0 || c.out_channels == 0 {
                    return bad("kernel, stride and out_channels must be positive".into());
                }
                if c.weight.len() != c.out_channels * c.in_channels * c.kernel * c.kernel
                    || c.bias.len() != c.out_channels
                {
                    return bad("weight/bias length does not match attributes".into());
                }
                if h + 2 * c.pad < c.kernel || w + 2 * c.pad < c.kernel {
                    return bad(format!(
                        "kernel {} larger than padded input {h}x{w}",
                        c.kernel
                    ));
                }
                Ok(vec![
                    n,
                    c.out_channels,
                    (h + 2 * c.pad - c.kernel) / c.stride + 1,
                    (w + 2 * c.pad - c.kernel) / c.stride + 1,
                ])
            }
            Layer::ReLU | Layer::Dropout { .. } => Ok(input.to_vec()),
            Layer::MaxPool { kernel, stride } => {
                let [n, ch, h, w] = input[..] else {
                    return bad(format!("needs a rank-4 input, got {input:?}"));
                };
                if *kernel == 0 || *stride == 0 {
                    return bad("kernel and stride must be positive".into());
                }
                if h < *kernel || w < *kernel {
                    return bad(format!("window {kernel} larger than input {h}x{w}"));
                }
                Ok(vec![
                    n,
                    ch,
                    (h - kernel) / stride + 1,
                    (w - kernel) / stride + 1,
                ])
            }
            Layer::BatchNorm(b) => {
                if input.len() != 2 && input.len() != 4 {
                    return bad(format!("needs a rank-2 or rank-4 input, got {input:?}"));
                }
                let ch = input[1];
                if [&b.gamma, &b.beta, &b.mean, &b.var]
                    .iter()
                    .any(|v| v.len() != ch)
                {
                    return bad(format!("parameters do not match {ch} channels"));
                }
                if b.var.iter().any(|&v| v + b.eps <= 0.0) {
                    return bad("var + eps must be positive".into());
                }
                Ok(input.to_vec())
            }
            Layer::GlobalAvgPool => match input[..] {
                [n, ch, _, _] => Ok(vec![n, ch]),
                _ => bad(format!("needs a rank-4 input, got {input:?}")),
            },
            Layer::Flatten => match input[..] {
                [n, ref rest @ ..] if !rest.is_empty() => Ok(vec![n, rest.iter().product()]),
                _ => bad(format!("cannot flatten {input:?}")),
            },
            Layer::Dense(d) => {
                let [n, f] = input[..] else {
                    return bad(format!("needs a rank-2 input, got {input:?}"));
                };
                if f != d.in_features {
                    return bad(format!("expects {} inputs, got {f}", d.in_features));
                }
                if d.weight.len() != d.in_features * d.out_features
                    || d.bias.len() != d.out_features
                {
                    return bad("weight/bias length does not match attributes".into());
                }
                Ok(vec![n, d.out_features])
            }
            Layer::Softmax => match input[..] {
                [n, f] => Ok(vec![n, f]),
                _ => bad(format!("needs a rank-2 input, got {input:?}")),
            },
        }
    }
}

/// Per-channel input normalization: `(x / 255 - mean) / scale`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub scale: [f32; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            mean: [0.5; 3],
            scale: [0.5; 3],
        }
    }
}

/// A validated sequential network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    layers: Vec<Layer>,
    class_names: Vec<String>,
    input_side: usize,
    normalization: Normalization,
    /// Activation shape after each layer for a batch of one.
    shapes: Vec<Vec<usize>>,
}

impl ModelGraph {
    pub fn new(
        layers: Vec<Layer>,
        class_names: Vec<String>,
        input_side: usize,
        normalization: Normalization,
    ) -> Result<Self, EngineError> {
        if class_names.len() != NUM_CLASSES {
            return Err(EngineError::Malformed(format!(
                "expected {NUM_CLASSES} class names, got {}",
                class_names.len()
            )));
        }
        if !class_names
            .iter()
            .any(|n| n.parse::<Label>() == Ok(Label::Mpox))
        {
            return Err(EngineError::Malformed("class names lack Mpox".into()));
        }
        if input_side == 0 {
            return Err(EngineError::Malformed("input_side must be positive".into()));
        }
        if normalization
            .scale
            .iter()
            .any(|&s| s == 0.0 || !s.is_finite())
            || normalization.mean.iter().any(|m| !m.is_finite())
        {
            return Err(EngineError::Malformed(
                "normalization must be finite with non-zero scale".into(),
            ));
        }
        if layers.is_empty() {
            return Err(EngineError::Malformed("no layers".into()));
        }
        if let Some(i) = layers.iter().position(|l| matches!(l, Layer::Softmax)) {
            if i != layers.len() - 1 {
                return Err(EngineError::Malformed(
                    "Softmax must be the final layer".into(),
                ));
            }
        }
        let mut shape = vec![1, 3, input_side, input_side];
        let mut shapes = Vec::with_capacity(layers.len());
        for (i, layer) in layers.iter().enumerate() {
            shape = layer
                .output_shape(&shape)
                .map_err(|e| EngineError::ShapeMismatch(format!("layer {i}: {e}")))?;
            shapes.push(shape.clone());
        }
        if shape != [1, NUM_CLASSES] {
            return Err(EngineError::ShapeMismatch(format!(
                "final output {shape:?}, expected [1, {NUM_CLASSES}]"
            )));
        }
        Ok(Self {
            layers,
            class_names,
            input_side,
            normalization,
            shapes,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn input_side(&self) -> usize {
        self.input_side
    }

    pub fn normalization(&self) -> Normalization {
        self.normalization
    }

    /// Activation shape after layer `i` for a batch of one.
    pub fn shape_after(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    /// Index of the mpox class in `class_names`.
    pub fn mpox_index(&self) -> usize {
        self.class_names
            .iter()
            .position(|n| n.parse::<Label>() == Ok(Label::Mpox))
            .expect("validated at construction")
    }

    /// Number of layers that run in `forward` (a trailing Softmax is left to `softmax`).
    pub fn logit_layers(&self) -> usize {
        match self.layers.last() {
            Some(Layer::Softmax) => self.layers.len() - 1,
            _ => self.layers.len(),
        }
    }

    pub fn load(bytes: &[u8]) -> Result<Self, EngineError> {
        format::decode(bytes)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        format::encode(self)
    }

    /// Hex SHA-256 recorded in the weight-file header.
    pub fn model_id(&self) -> String {
        hex::encode(format::body_digest(&self.to_bytes()))
    }

    /// Crops, resizes and normalizes `r` into a `(1, 3, side, side)` tensor.
    pub fn preprocess(&self, r: &Raster) -> Result<Tensor, EngineError> {
        let side = self.input_side;
        let img = crop_resize(r, side as u32)?;
        let mut data = vec![0.0f32; 3 * side * side];
        for (i, p) in img.pixels().iter().enumerate() {
            for c in 0..3 {
                let x = p[c] as f32 / 255.0;
                data[c * side * side + i] =
                    (x - self.normalization.mean[c]) / self.normalization.scale[c];
            }
        }
        Tensor::new(vec![1, 3, side, side], data)
    }
}

/// Pre-softmax outputs plus every intermediate activation.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub logits: Tensor,
    /// `activations[i]` is the output of layer `i`.
    pub activations: Vec<Tensor>,
}

fn check_input(m: &ModelGraph, input: &Tensor) -> Result<(), EngineError> {
    let s = m.input_side;
    match input.shape() {
        [n, 3, h, w] if *n >= 1 && *h == s && *w == s => Ok(()),
        other => Err(EngineError::ShapeMismatch(format!(
            "input {other:?}, expected [N, 3, {s}, {s}]"
        ))),
    }
}

/// Runs every layer up to (not including) a trailing Softmax.
pub fn forward(m: &ModelGraph, input: &Tensor) -> Result<ForwardPass, EngineError> {
    check_input(m, input)?;
    let mut activations: Vec<Tensor> = Vec::with_capacity(m.logit_layers());
    for (i, layer) in m.layers[..m.logit_layers()].iter().enumerate() {
        let x = activations.last().unwrap_or(input);
        let y = ops::apply(layer, x)?;
        if !y.is_finite() {
            return Err(EngineError::NonFiniteActivation { layer: i });
        }
        activations.push(y);
    }
    let logits = activations.last().cloned().expect("graph has layers");
    Ok(ForwardPass {
        logits,
        activations,
    })
}

/// Runs layers `start..` on an activation taken after layer `start - 1`.
pub fn forward_from(
    m: &ModelGraph,
    start: usize,
    activation: &Tensor,
) -> Result<Tensor, EngineError> {
    let mut x = activation.clone();
    for (i, layer) in m.layers[..m.logit_layers()].iter().enumerate().skip(start) {
        x = ops::apply(layer, &x)?;
        if !x.is_finite() {
            return Err(EngineError::NonFiniteActivation { layer: i });
        }
    }
    Ok(x)
}

/// Numerically stable softmax (max-subtracted, computed in `f64`).
pub fn softmax(logits: &[f32]) -> Vec<f64> {
    let max = logits
        .iter()
        .fold(f64::NEG_INFINITY, |a, &b| a.max(b as f64));
    let exps: Vec<f64> = logits.iter().map(|&z| (z as f64 - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub probabilities: Vec<f64>,
    pub argmax: usize,
    pub argmax_label: String,
    pub mpox_probability: f64,
    pub suspected_mpox: bool,
}

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Turns logits into a screening verdict: suspected when the mpox probability
/// reaches `threshold`.
pub fn prediction_from_logits(m: &ModelGraph, logits: &[f32], threshold: f64) -> Prediction {
    let probabilities = softmax(logits);
    let argmax =
        probabilities.iter().enumerate().fold(
            0,
            |best, (i, &p)| if p > probabilities[best] { i } else { best },
        );
    let mpox_probability = probabilities[m.mpox_index()];
    Prediction {
        argmax,
        argmax_label: m.class_names[argmax].clone(),
        mpox_probability,
        suspected_mpox: mpox_probability >= threshold,
        probabilities,
    }
}

pub fn predict(m: &ModelGraph, r: &Raster, threshold: f64) -> Result<Prediction, EngineError> {
    let input = m.preprocess(r)?;
    let pass = forward(m, &input)?;
    Ok(prediction_from_logits(m, pass.logits.data(), threshold))
}
