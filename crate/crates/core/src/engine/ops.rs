use super::{BatchNorm, Conv2d, Dense, EngineError, Layer, Tensor};

pub(super) fn apply(layer: &Layer, x: &Tensor) -> Result<Tensor, EngineError> {
    let out_shape = layer.output_shape(x.shape())?;
    let data = match layer {
        Layer::Conv2d(c) => conv2d(c, x, &out_shape),
        Layer::ReLU => x.data().iter().map(|&v| v.max(0.0)).collect(),
        Layer::MaxPool { kernel, stride } => max_pool(x, *kernel, *stride, &out_shape).0,
        Layer::BatchNorm(b) => batch_norm(b, x),
        Layer::GlobalAvgPool => global_avg_pool(x),
        Layer::Flatten | Layer::Dropout { .. } => x.data().to_vec(),
        Layer::Dense(d) => dense(d, x),
        Layer::Softmax => {
            let f = x.shape()[1];
            x.data()
                .chunks(f)
                .flat_map(|row| super::softmax(row).into_iter().map(|p| p as f32))
                .collect()
        }
    };
    Tensor::new(out_shape, data)
}

/// im2col followed by one dot product per (output channel, output pixel).
fn conv2d(c: &Conv2d, x: &Tensor, out_shape: &[usize]) -> Vec<f32> {
    let [n, cin, h, w] = x.shape()[..] else {
        unreachable!("validated rank")
    };
    let (oh, ow) = (out_shape[2], out_shape[3]);
    let k = c.kernel;
    let patch = cin * k * k;
    let mut cols = vec![0.0f32; patch * oh * ow];
    let mut out = Vec::with_capacity(n * c.out_channels * oh * ow);
    for b in 0..n {
        let img = &x.data()[b * cin * h * w..(b + 1) * cin * h * w];
        // cols[(ci * k + ky) * k + kx][oy * ow + ox]
        for ci in 0..cin {
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((ci * k + ky) * k + kx) * oh * ow;
                    for oy in 0..oh {
                        let iy = (oy * c.stride + ky) as isize - c.pad as isize;
                        for ox in 0..ow {
                            let ix = (ox * c.stride + kx) as isize - c.pad as isize;
                            cols[row + oy * ow + ox] =
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    img[ci * h * w + iy as usize * w + ix as usize]
                                } else {
                                    0.0
                                };
                        }
                    }
                }
            }
        }
        let mut acc = vec![0.0f64; oh * ow];
        for oc in 0..c.out_channels {
            acc.fill(c.bias[oc] as f64);
            let wrow = &c.weight[oc * patch..(oc + 1) * patch];
            for (p, &wv) in wrow.iter().enumerate() {
                let wv = wv as f64;
                let col = &cols[p * oh * ow..(p + 1) * oh * ow];
                for (a, &v) in acc.iter_mut().zip(col) {
                    *a += wv * v as f64;
                }
            }
            out.extend(acc.iter().map(|&a| a as f32));
        }
    }
    out
}

/// Returns pooled values and, per output, the flat input index of the winner
/// (first maximum in row-major window order).
pub(super) fn max_pool(
    x: &Tensor,
    k: usize,
    stride: usize,
    out_shape: &[usize],
) -> (Vec<f32>, Vec<usize>) {
    let [n, ch, h, w] = x.shape()[..] else {
        unreachable!("validated rank")
    };
    let (oh, ow) = (out_shape[2], out_shape[3]);
    let mut vals = Vec::with_capacity(n * ch * oh * ow);
    let mut argmax = Vec::with_capacity(n * ch * oh * ow);
    for plane in 0..n * ch {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for ky in 0..k {
                    for kx in 0..k {
                        let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                        if x.data()[idx] > x.data()[best] {
                            best = idx;
                        }
                    }
                }
                vals.push(x.data()[best]);
                argmax.push(best);
            }
        }
    }
    (vals, argmax)
}

fn channel_geometry(shape: &[usize]) -> (usize, usize, usize) {
    let n = shape[0];
    let ch = shape[1];
    let spatial = shape[2..].iter().product::<usize>();
    (n, ch, spatial)
}

fn batch_norm(b: &BatchNorm, x: &Tensor) -> Vec<f32> {
    let (n, ch, spatial) = channel_geometry(x.shape());
    let mut out = Vec::with_capacity(x.len());
    for bi in 0..n {
        for c in 0..ch {
            let inv = 1.0 / (b.var[c] as f64 + b.eps as f64).sqrt();
            let start = (bi * ch + c) * spatial;
            for &v in &x.data()[start..start + spatial] {
                out.push(
                    ((v as f64 - b.mean[c] as f64) * inv * b.gamma[c] as f64 + b.beta[c] as f64)
                        as f32,
                );
            }
        }
    }
    out
}

fn global_avg_pool(x: &Tensor) -> Vec<f32> {
    let (_, _, spatial) = channel_geometry(x.shape());
    x.data()
        .chunks(spatial)
        .map(|plane| (plane.iter().map(|&v| v as f64).sum::<f64>() / spatial as f64) as f32)
        .collect()
}

fn dense(d: &Dense, x: &Tensor) -> Vec<f32> {
    let mut out = Vec::with_capacity(x.shape()[0] * d.out_features);
    for row in x.data().chunks(d.in_features) {
        for o in 0..d.out_features {
            let wrow = &d.weight[o * d.in_features..(o + 1) * d.in_features];
            let acc = wrow
                .iter()
                .zip(row)
                .fold(d.bias[o] as f64, |a, (&wv, &xv)| a + wv as f64 * xv as f64);
            out.push(acc as f32);
        }
    }
    out
}

/// Gradient with respect to the layer input, given the gradient with respect
/// to its output. `input` and `output` are the cached forward activations.
pub(super) fn backward(
    layer: &Layer,
    input: &Tensor,
    output: &Tensor,
    grad_out: &[f32],
) -> Result<Vec<f32>, EngineError> {
    Ok(match layer {
        Layer::ReLU => grad_out
            .iter()
            .zip(output.data())
            .map(|(&g, &y)| if y > 0.0 { g } else { 0.0 })
            .collect(),
        Layer::Flatten | Layer::Dropout { .. } => grad_out.to_vec(),
        Layer::Dense(d) => {
            let n = input.shape()[0];
            let mut g = vec![0.0f32; n * d.in_features];
            for b in 0..n {
                for i in 0..d.in_features {
                    let mut acc = 0.0f64;
                    for o in 0..d.out_features {
                        acc += d.weight[o * d.in_features + i] as f64
                            * grad_out[b * d.out_features + o] as f64;
                    }
                    g[b * d.in_features + i] = acc as f32;
                }
            }
            g
        }
        Layer::GlobalAvgPool => {
            let (_, _, spatial) = channel_geometry(input.shape());
            grad_out
                .iter()
                .flat_map(|&g| std::iter::repeat_n(g / spatial as f32, spatial))
                .collect()
        }
        Layer::MaxPool { kernel, stride } => {
            let (_, argmax) = max_pool(input, *kernel, *stride, output.shape());
            let mut g = vec![0.0f32; input.len()];
            for (&src, &go) in argmax.iter().zip(grad_out) {
                g[src] += go;
            }
            g
        }
        Layer::BatchNorm(b) => {
            let (n, ch, spatial) = channel_geometry(input.shape());
            let mut g = Vec::with_capacity(input.len());
            for bi in 0..n {
                for c in 0..ch {
                    let k = b.gamma[c] as f64 / (b.var[c] as f64 + b.eps as f64).sqrt();
                    let start = (bi * ch + c) * spatial;
                    g.extend(
                        grad_out[start..start + spatial]
                            .iter()
                            .map(|&v| (v as f64 * k) as f32),
                    );
                }
            }
            g
        }
        Layer::Conv2d(_) | Layer::Softmax => {
            return Err(EngineError::Malformed(format!(
                "no input gradient for {} in the Grad-CAM head",
                layer.name()
            )))
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn center_tap_kernel_is_identity() {
        let (h, w) = (5, 4);
        let data: Vec<f32> = (0..2 * h * w).map(|i| i as f32 * 0.25 - 3.0).collect();
        let x = Tensor::new(vec![1, 2, h, w], data.clone()).unwrap();
        let mut weight = vec![0.0; 2 * 2 * 9];
        weight[4] = 1.0; // out 0 <- in 0 center
        weight[(2 + 1) * 9 + 4] = 1.0; // out 1 <- in 1 center
        let conv = Layer::Conv2d(Conv2d {
            out_channels: 2,
            in_channels: 2,
            kernel: 3,
            stride: 1,
            pad: 1,
            weight,
            bias: vec![0.0, 0.0],
        });
        let y = apply(&conv, &x).unwrap();
        assert_eq!(y.shape(), &[1, 2, h, w]);
        assert_eq!(y.data(), &data[..]);
    }

    #[test]
    fn zero_input_gives_relu_bias() {
        let conv = Layer::Conv2d(Conv2d {
            out_channels: 3,
            in_channels: 1,
            kernel: 3,
            stride: 2,
            pad: 0,
            weight: (0..27).map(|i| i as f32 - 13.0).collect(),
            bias: vec![0.7, -0.4, 0.0],
        });
        let x = Tensor::zeros(vec![1, 1, 7, 7]);
        let y = apply(&Layer::ReLU, &apply(&conv, &x).unwrap()).unwrap();
        assert_eq!(y.shape(), &[1, 3, 3, 3]);
        for (c, expect) in [0.7f32, 0.0, 0.0].iter().enumerate() {
            assert!(y.data()[c * 9..(c + 1) * 9].iter().all(|v| v == expect));
        }
    }

    #[test]
    fn dropout_is_identity() {
        let x = Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, 9.0, -0.5]).unwrap();
        assert_eq!(apply(&Layer::Dropout { rate: 0.3 }, &x).unwrap(), x);
    }

    #[test]
    fn maxpool_routes_gradient_to_first_max() {
        let x = Tensor::new(
            vec![1, 1, 2, 4],
            vec![1.0, 3.0, 3.0, 0.0, 2.0, 3.0, -1.0, -2.0],
        )
        .unwrap();
        let layer = Layer::MaxPool {
            kernel: 2,
            stride: 2,
        };
        let y = apply(&layer, &x).unwrap();
        assert_eq!(y.data(), &[3.0, 3.0]);
        let g = backward(&layer, &x, &y, &[1.0, 10.0]).unwrap();
        assert_eq!(g, vec![0.0, 1.0, 10.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn batchnorm_matches_formula() {
        let b = BatchNorm {
            eps: 1e-5,
            gamma: vec![2.0],
            beta: vec![0.5],
            mean: vec![1.0],
            var: vec![4.0],
        };
        let x = Tensor::new(vec![1, 1, 1, 2], vec![3.0, -1.0]).unwrap();
        let y = apply(&Layer::BatchNorm(b), &x).unwrap();
        let s = (4.0f64 + 1e-5).sqrt();
        assert!((y.data()[0] as f64 - (2.0 * 2.0 / s + 0.5)).abs() < 1e-6);
        assert!((y.data()[1] as f64 - (-2.0 * 2.0 / s + 0.5)).abs() < 1e-6);
    }
}
