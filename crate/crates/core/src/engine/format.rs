//! LSW1 weight files. All integers are little-endian `u32`, all reals
//! little-endian IEEE-754 `f32`.
//!
//! ```text
//! header  magic "LSW1" | version (=1) | sha256 of every byte after the digest (32 bytes)
//! body    input_side
//!         mean[3] | scale[3]
//!         class_count | { byte_len | utf8 bytes } * class_count
//!         layer_count | layer * layer_count
//! layer   tag: u8 | int_count | ints | float_count | floats | tensor_count | tensor*
//! tensor  rank | dims[rank] | values[product(dims)]
//! ```
//!
//! | tag | layer         | ints                              | floats | tensors                  |
//! |-----|---------------|-----------------------------------|--------|--------------------------|
//! | 1   | Conv2d        | out_ch, in_ch, kernel, stride, pad| -      | weight (4-d), bias (1-d) |
//! | 2   | ReLU          | -                                 | -      | -                        |
//! | 3   | MaxPool       | kernel, stride                    | -      | -                        |
//! | 4   | BatchNorm     | -                                 | eps    | gamma, beta, mean, var   |
//! | 5   | GlobalAvgPool | -                                 | -      | -                        |
//! | 6   | Flatten       | -                                 | -      | -                        |
//! | 7   | Dense         | in, out                           | -      | weight (out, in), bias   |
//! | 8   | Dropout       | -                                 | rate   | -                        |
//! | 9   | Softmax       | -                                 | -      | -                        |

use sha2::{Digest, Sha256};

use super::{BatchNorm, Conv2d, Dense, EngineError, Layer, ModelGraph, Normalization};

pub const MAGIC: &[u8; 4] = b"LSW1";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 32;

pub(super) fn body_digest(bytes: &[u8]) -> [u8; 32] {
    let mut d = [0u8; 32];
    d.copy_from_slice(&bytes[8..HEADER_LEN]);
    d
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }

    fn f32s(&mut self, vs: &[f32]) {
        for v in vs {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn tensor(&mut self, dims: &[usize], values: &[f32]) {
        self.u32(dims.len());
        for &d in dims {
            self.u32(d);
        }
        self.f32s(values);
    }

    fn layer(&mut self, tag: u8, ints: &[usize], floats: &[f32], tensors: &[(&[usize], &[f32])]) {
        self.0.push(tag);
        self.u32(ints.len());
        for &i in ints {
            self.u32(i);
        }
        self.u32(floats.len());
        self.f32s(floats);
        self.u32(tensors.len());
        for (dims, values) in tensors {
            self.tensor(dims, values);
        }
    }
}

pub(super) fn encode(m: &ModelGraph) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(FORMAT_VERSION as usize);
    w.0.extend_from_slice(&[0u8; 32]);
    w.u32(m.input_side);
    w.f32s(&m.normalization.mean);
    w.f32s(&m.normalization.scale);
    w.u32(m.class_names.len());
    for name in &m.class_names {
        w.u32(name.len());
        w.0.extend_from_slice(name.as_bytes());
    }
    w.u32(m.layers.len());
    for layer in &m.layers {
        match layer {
            Layer::Conv2d(c) => {
                let wdims = [c.out_channels, c.in_channels, c.kernel, c.kernel];
                w.layer(
                    1,
                    &[c.out_channels, c.in_channels, c.kernel, c.stride, c.pad],
                    &[],
                    &[(&wdims, &c.weight), (&[c.out_channels], &c.bias)],
                );
            }
            Layer::ReLU => w.layer(2, &[], &[], &[]),
            Layer::MaxPool { kernel, stride } => w.layer(3, &[*kernel, *stride], &[], &[]),
            Layer::BatchNorm(b) => {
                let d = [b.gamma.len()];
                w.layer(
                    4,
                    &[],
                    &[b.eps],
                    &[(&d, &b.gamma), (&d, &b.beta), (&d, &b.mean), (&d, &b.var)],
                );
            }
            Layer::GlobalAvgPool => w.layer(5, &[], &[], &[]),
            Layer::Flatten => w.layer(6, &[], &[], &[]),
            Layer::Dense(d) => {
                let wdims = [d.out_features, d.in_features];
                w.layer(
                    7,
                    &[d.in_features, d.out_features],
                    &[],
                    &[(&wdims, &d.weight), (&[d.out_features], &d.bias)],
                );
            }
            Layer::Dropout { rate } => w.layer(8, &[], &[*rate], &[]),
            Layer::Softmax => w.layer(9, &[], &[], &[]),
        }
    }
    let mut bytes = w.0;
    let digest = Sha256::digest(&bytes[HEADER_LEN..]);
    bytes[8..HEADER_LEN].copy_from_slice(&digest);
    bytes
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], EngineError> {
        let end = self.pos.checked_add(n).ok_or(EngineError::TruncatedFile)?;
        let s = self
            .buf
            .get(self.pos..end)
            .ok_or(EngineError::TruncatedFile)?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, EngineError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize, EngineError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, EngineError> {
        let bytes = self.take(n.checked_mul(4).ok_or(EngineError::TruncatedFile)?)?;
        let vals: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(EngineError::Malformed("non-finite parameter".into()));
        }
        Ok(vals)
    }

    fn tensor(&mut self) -> Result<(Vec<usize>, Vec<f32>), EngineError> {
        let rank = self.u32()?;
        if !(1..=4).contains(&rank) {
            return Err(EngineError::Malformed(format!("tensor rank {rank}")));
        }
        let dims = (0..rank)
            .map(|_| self.u32())
            .collect::<Result<Vec<_>, _>>()?;
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or(EngineError::TruncatedFile)?;
        Ok((dims, self.f32s(n)?))
    }
}

fn expect_counts(
    tag: u8,
    ints: &[usize],
    floats: &[f32],
    tensors: &[(Vec<usize>, Vec<f32>)],
    want: (usize, usize, usize),
) -> Result<(), EngineError> {
    if (ints.len(), floats.len(), tensors.len()) != want {
        return Err(EngineError::Malformed(format!(
            "layer tag {tag}: expected {want:?} ints/floats/tensors, found {:?}",
            (ints.len(), floats.len(), tensors.len())
        )));
    }
    Ok(())
}

fn expect_dims(what: &str, dims: &[usize], want: &[usize]) -> Result<(), EngineError> {
    if dims != want {
        return Err(EngineError::ShapeMismatch(format!(
            "{what}: dims {dims:?}, expected {want:?}"
        )));
    }
    Ok(())
}

pub(super) fn decode(bytes: &[u8]) -> Result<ModelGraph, EngineError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(EngineError::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(EngineError::TruncatedFile);
    }
    let mut r = Reader { buf: bytes, pos: 4 };
    let version = r.u32()? as u32;
    if version != FORMAT_VERSION {
        return Err(EngineError::UnsupportedVersion(version));
    }
    if Sha256::digest(&bytes[HEADER_LEN..]).as_slice() != &bytes[8..HEADER_LEN] {
        return Err(EngineError::ChecksumMismatch);
    }
    r.pos = HEADER_LEN;

    let input_side = r.u32()?;
    let mean = r.f32s(3)?;
    let scale = r.f32s(3)?;
    let n_classes = r.u32()?;
    if n_classes > 64 {
        return Err(EngineError::Malformed(format!("{n_classes} class names")));
    }
    let mut class_names = Vec::with_capacity(n_classes);
    for _ in 0..n_classes {
        let len = r.u32()?;
        let s = std::str::from_utf8(r.take(len)?)
            .map_err(|_| EngineError::Malformed("class name is not UTF-8".into()))?;
        class_names.push(s.to_string());
    }
    let n_layers = r.u32()?;
    let mut layers = Vec::new();
    for _ in 0..n_layers {
        let tag = r.u8()?;
        let n_ints = r.u32()?;
        let ints = (0..n_ints)
            .map(|_| r.u32())
            .collect::<Result<Vec<_>, _>>()?;
        let n_floats = r.u32()?;
        let floats = r.f32s(n_floats)?;
        let n_tensors = r.u32()?;
        let mut tensors = Vec::new();
        for _ in 0..n_tensors {
            tensors.push(r.tensor()?);
        }
        let layer = match tag {
            1 => {
                expect_counts(tag, &ints, &floats, &tensors, (5, 0, 2))?;
                let [out_ch, in_ch, k, stride, pad] = ints[..] else {
                    unreachable!()
                };
                expect_dims("Conv2d weight", &tensors[0].0, &[out_ch, in_ch, k, k])?;
                expect_dims("Conv2d bias", &tensors[1].0, &[out_ch])?;
                let mut t = tensors.into_iter();
                Layer::Conv2d(Conv2d {
                    out_channels: out_ch,
                    in_channels: in_ch,
                    kernel: k,
                    stride,
                    pad,
                    weight: t.next().expect("counted").1,
                    bias: t.next().expect("counted").1,
                })
            }
            2 => {
                expect_counts(tag, &ints, &floats, &tensors, (0, 0, 0))?;
                Layer::ReLU
            }
            3 => {
                expect_counts(tag, &ints, &floats, &tensors, (2, 0, 0))?;
                Layer::MaxPool {
                    kernel: ints[0],
                    stride: ints[1],
                }
            }
            4 => {
                expect_counts(tag, &ints, &floats, &tensors, (0, 1, 4))?;
                let ch = tensors[0].0.clone();
                for (name, t) in ["gamma", "beta", "mean", "var"].iter().zip(&tensors) {
                    if ch.len() != 1 {
                        return Err(EngineError::ShapeMismatch(
                            "BatchNorm parameters must be 1-d".into(),
                        ));
                    }
                    expect_dims(&format!("BatchNorm {name}"), &t.0, &ch)?;
                }
                let mut t = tensors.into_iter().map(|t| t.1);
                Layer::BatchNorm(BatchNorm {
                    eps: floats[0],
                    gamma: t.next().expect("counted"),
                    beta: t.next().expect("counted"),
                    mean: t.next().expect("counted"),
                    var: t.next().expect("counted"),
                })
            }
            5 => {
                expect_counts(tag, &ints, &floats, &tensors, (0, 0, 0))?;
                Layer::GlobalAvgPool
            }
            6 => {
                expect_counts(tag, &ints, &floats, &tensors, (0, 0, 0))?;
                Layer::Flatten
            }
            7 => {
                expect_counts(tag, &ints, &floats, &tensors, (2, 0, 2))?;
                let [inp, out] = ints[..] else { unreachable!() };
                expect_dims("Dense weight", &tensors[0].0, &[out, inp])?;
                expect_dims("Dense bias", &tensors[1].0, &[out])?;
                let mut t = tensors.into_iter();
                Layer::Dense(Dense {
                    in_features: inp,
                    out_features: out,
                    weight: t.next().expect("counted").1,
                    bias: t.next().expect("counted").1,
                })
            }
            8 => {
                expect_counts(tag, &ints, &floats, &tensors, (0, 1, 0))?;
                Layer::Dropout { rate: floats[0] }
            }
            9 => {
                expect_counts(tag, &ints, &floats, &tensors, (0, 0, 0))?;
                Layer::Softmax
            }
            other => return Err(EngineError::Malformed(format!("unknown layer tag {other}"))),
        };
        layers.push(layer);
    }
    if r.pos != bytes.len() {
        return Err(EngineError::Malformed(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    ModelGraph::new(
        layers,
        class_names,
        input_side,
        Normalization {
            mean: [mean[0], mean[1], mean[2]],
            scale: [scale[0], scale[1], scale[2]],
        },
    )
}
