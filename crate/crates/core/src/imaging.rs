//! Pixel-level primitives: decode/encode, RGB <-> HSV, crop and bilinear resize.
//!
//! Conventions shared by every module in the crate:
//!
//! * Channel rounding is round-half-up (`floor(x + 0.5)`, clamped to `[0, 255]`)
//!   after all floating point math, so conversions are bit-reproducible.
//! * Bilinear sampling uses half-pixel centers. For an output index `d` on an
//!   axis of input length `n_in` and output length `n_out` the source
//!   coordinate is `s = (d + 0.5) * n_in / n_out - 0.5`, clamped to
//!   `[0, n_in - 1]`. The two taps are `i0 = floor(s)`, `i1 = min(i0 + 1, n_in - 1)`
//!   with weight `t = s - i0` on `i1`. Rows are blended after columns.
//! * Achromatic pixels (`s == 0`) carry hue 0.

use std::io::Cursor;

use image::{DynamicImage, ImageFormat};
use thiserror::Error;

/// One 8-bit RGB pixel.
pub type Rgb = [u8; 3];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ImagingError {
    #[error("malformed image: {0}")]
    MalformedImage(String),
    #[error("unsupported image format (expected PNG or JPEG)")]
    UnsupportedFormat,
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("encode failed: {0}")]
    Encode(String),
}

impl ImagingError {
    /// Stable machine-readable code for CLI and HTTP error payloads.
    pub fn code(&self) -> &'static str {
        match self {
            ImagingError::MalformedImage(_) => "MalformedImage",
            ImagingError::UnsupportedFormat => "UnsupportedFormat",
            ImagingError::DegenerateInput(_) => "DegenerateInput",
            ImagingError::Encode(_) => "EncodeFailed",
        }
    }
}

/// Decoded 8-bit RGB image, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Raster {
    width: u32,
    height: u32,
    pixels: Vec<Rgb>,
}

impl Raster {
    pub fn new(width: u32, height: u32, pixels: Vec<Rgb>) -> Result<Self, ImagingError> {
        if width == 0 || height == 0 {
            return Err(ImagingError::DegenerateInput(format!(
                "raster dimensions must be positive, got {width}x{height}"
            )));
        }
        if pixels.len() != width as usize * height as usize {
            return Err(ImagingError::DegenerateInput(format!(
                "pixel count {} does not match {width}x{height}",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    /// Uniform raster. Panics on zero dimensions.
    pub fn filled(width: u32, height: u32, rgb: Rgb) -> Self {
        assert!(
            width > 0 && height > 0,
            "raster dimensions must be positive"
        );
        Self {
            width,
            height,
            pixels: vec![rgb; width as usize * height as usize],
        }
    }

    /// Builds a raster by evaluating `f(x, y)` at every pixel. Panics on zero dimensions.
    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> Rgb) -> Self {
        assert!(
            width > 0 && height > 0,
            "raster dimensions must be positive"
        );
        let mut pixels = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            pixels,
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[Rgb] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<Rgb> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> Rgb {
        self.pixels[y as usize * self.width as usize + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, rgb: Rgb) {
        let idx = y as usize * self.width as usize + x as usize;
        self.pixels[idx] = rgb;
    }

    /// Applies `f` to every pixel, keeping dimensions.
    pub fn map_pixels(&self, f: impl FnMut(&Rgb) -> Rgb) -> Raster {
        Raster {
            width: self.width,
            height: self.height,
            pixels: self.pixels.iter().map(f).collect(),
        }
    }
}

/// Round-half-up to the nearest integer, clamped into the 8-bit range.
#[inline]
pub fn round_channel(x: f64) -> u8 {
    let r = (x + 0.5).floor();
    if r <= 0.0 {
        0
    } else if r >= 255.0 {
        255
    } else {
        r as u8
    }
}

/// BT.601 luma on the [0, 255] scale, unrounded.
#[inline]
pub fn luma(rgb: Rgb) -> f64 {
    0.299 * rgb[0] as f64 + 0.587 * rgb[1] as f64 + 0.114 * rgb[2] as f64
}

/// Row-major grayscale plane of `r`.
pub fn grayscale(r: &Raster) -> Vec<f64> {
    r.pixels.iter().map(|&p| luma(p)).collect()
}

// ---------------------------------------------------------------------------
// Codecs

/// Decodes a PNG or JPEG stream. Alpha is dropped; 16-bit samples keep their high byte.
pub fn decode_image(bytes: &[u8]) -> Result<Raster, ImagingError> {
    if bytes.is_empty() {
        return Err(ImagingError::MalformedImage("empty input".into()));
    }
    let format = image::guess_format(bytes).map_err(|_| ImagingError::UnsupportedFormat)?;
    if !matches!(format, ImageFormat::Png | ImageFormat::Jpeg) {
        return Err(ImagingError::UnsupportedFormat);
    }
    let img = image::load_from_memory_with_format(bytes, format)
        .map_err(|e| ImagingError::MalformedImage(e.to_string()))?;
    let (width, height) = (img.width(), img.height());
    let pixels: Vec<Rgb> = match img {
        DynamicImage::ImageRgb16(buf) => buf
            .pixels()
            .map(|p| [(p[0] >> 8) as u8, (p[1] >> 8) as u8, (p[2] >> 8) as u8])
            .collect(),
        DynamicImage::ImageRgba16(buf) => buf
            .pixels()
            .map(|p| [(p[0] >> 8) as u8, (p[1] >> 8) as u8, (p[2] >> 8) as u8])
            .collect(),
        DynamicImage::ImageLuma16(buf) => buf
            .pixels()
            .map(|p| {
                let v = (p[0] >> 8) as u8;
                [v, v, v]
            })
            .collect(),
        DynamicImage::ImageLumaA16(buf) => buf
            .pixels()
            .map(|p| {
                let v = (p[0] >> 8) as u8;
                [v, v, v]
            })
            .collect(),
        other => other.to_rgb8().pixels().map(|p| p.0).collect(),
    };
    Raster::new(width, height, pixels).map_err(|e| ImagingError::MalformedImage(e.to_string()))
}

fn to_rgb_buffer(r: &Raster) -> image::RgbImage {
    let flat: Vec<u8> = r.pixels.iter().flat_map(|p| p.iter().copied()).collect();
    image::RgbImage::from_raw(r.width, r.height, flat).expect("raster length invariant")
}

pub fn encode_png(r: &Raster) -> Result<Vec<u8>, ImagingError> {
    let mut out = Cursor::new(Vec::new());
    to_rgb_buffer(r)
        .write_to(&mut out, ImageFormat::Png)
        .map_err(|e| ImagingError::Encode(e.to_string()))?;
    Ok(out.into_inner())
}

pub fn encode_jpeg(r: &Raster, quality: u8) -> Result<Vec<u8>, ImagingError> {
    let mut out = Vec::new();
    let encoder = image::codecs::jpeg::JpegEncoder::new_with_quality(&mut out, quality);
    to_rgb_buffer(r)
        .write_with_encoder(encoder)
        .map_err(|e| ImagingError::Encode(e.to_string()))?;
    Ok(out)
}

// ---------------------------------------------------------------------------
// HSV

/// Hexcone HSV triple: `h` in degrees `[0, 360)`, `s` and `v` in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HsvPixel {
    pub h: f64,
    pub s: f64,
    pub v: f64,
}

impl HsvPixel {
    /// Normalizes into the canonical range: hue wraps, saturation and value clamp,
    /// achromatic pixels get hue 0.
    pub fn new(h: f64, s: f64, v: f64) -> Self {
        let s = s.clamp(0.0, 1.0);
        let v = v.clamp(0.0, 1.0);
        let mut h = h.rem_euclid(360.0);
        // rem_euclid can return exactly 360.0 for tiny negative inputs.
        if h >= 360.0 {
            h = 0.0;
        }
        if s == 0.0 {
            h = 0.0;
        }
        Self { h, s, v }
    }
}

pub fn rgb_to_hsv(p: Rgb) -> HsvPixel {
    let r = p[0] as f64;
    let g = p[1] as f64;
    let b = p[2] as f64;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let v = max / 255.0;
    if max == 0.0 || delta == 0.0 {
        return HsvPixel { h: 0.0, s: 0.0, v };
    }
    let s = delta / max;
    let sector = if max == r {
        ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        (b - r) / delta + 2.0
    } else {
        (r - g) / delta + 4.0
    };
    let mut h = 60.0 * sector;
    if h >= 360.0 {
        h -= 360.0;
    }
    HsvPixel { h, s, v }
}

pub fn hsv_to_rgb(p: HsvPixel) -> Rgb {
    let c = p.v * p.s;
    let hp = p.h / 60.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r1, g1, b1) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = p.v - c;
    [
        round_channel((r1 + m) * 255.0),
        round_channel((g1 + m) * 255.0),
        round_channel((b1 + m) * 255.0),
    ]
}

// ---------------------------------------------------------------------------
// Geometry

/// Axis-aligned pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CropRect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl CropRect {
    /// Largest centered square inside a `width x height` image.
    pub fn center_square(width: u32, height: u32) -> Self {
        let side = width.min(height);
        Self {
            x: (width - side) / 2,
            y: (height - side) / 2,
            w: side,
            h: side,
        }
    }
}

pub fn crop(r: &Raster, rect: CropRect) -> Result<Raster, ImagingError> {
    if rect.w == 0
        || rect.h == 0
        || rect.x as u64 + rect.w as u64 > r.width as u64
        || rect.y as u64 + rect.h as u64 > r.height as u64
    {
        return Err(ImagingError::DegenerateInput(format!(
            "crop {rect:?} outside {}x{} raster",
            r.width, r.height
        )));
    }
    let mut pixels = Vec::with_capacity(rect.w as usize * rect.h as usize);
    for y in rect.y..rect.y + rect.h {
        let row = y as usize * r.width as usize;
        pixels
            .extend_from_slice(&r.pixels[row + rect.x as usize..row + (rect.x + rect.w) as usize]);
    }
    Ok(Raster {
        width: rect.w,
        height: rect.h,
        pixels,
    })
}

#[derive(Debug, Clone, Copy)]
struct Tap {
    i0: usize,
    i1: usize,
    t: f64,
}

fn axis_taps(n_in: usize, n_out: usize) -> Vec<Tap> {
    let scale = n_in as f64 / n_out as f64;
    let max = (n_in - 1) as f64;
    (0..n_out)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, max);
            let i0 = s.floor() as usize;
            Tap {
                i0,
                i1: (i0 + 1).min(n_in - 1),
                t: s - i0 as f64,
            }
        })
        .collect()
}

/// Bilinear resize to `out_w x out_h` with the half-pixel convention documented above.
pub fn resize_bilinear(r: &Raster, out_w: u32, out_h: u32) -> Result<Raster, ImagingError> {
    if out_w == 0 || out_h == 0 {
        return Err(ImagingError::DegenerateInput(format!(
            "target size {out_w}x{out_h}"
        )));
    }
    if out_w == r.width && out_h == r.height {
        return Ok(r.clone());
    }
    let xs = axis_taps(r.width as usize, out_w as usize);
    let ys = axis_taps(r.height as usize, out_h as usize);
    let w = r.width as usize;
    let mut pixels = Vec::with_capacity(out_w as usize * out_h as usize);
    for ty in &ys {
        let row0 = &r.pixels[ty.i0 * w..(ty.i0 + 1) * w];
        let row1 = &r.pixels[ty.i1 * w..(ty.i1 + 1) * w];
        for tx in &xs {
            let mut out = [0u8; 3];
            for (c, o) in out.iter_mut().enumerate() {
                let top = (1.0 - tx.t) * row0[tx.i0][c] as f64 + tx.t * row0[tx.i1][c] as f64;
                let bot = (1.0 - tx.t) * row1[tx.i0][c] as f64 + tx.t * row1[tx.i1][c] as f64;
                *o = round_channel((1.0 - ty.t) * top + ty.t * bot);
            }
            pixels.push(out);
        }
    }
    Ok(Raster {
        width: out_w,
        height: out_h,
        pixels,
    })
}

/// Bilinear resize of a single-channel float plane (same sampling rule, no rounding).
pub fn resize_plane(plane: &[f32], w: usize, h: usize, out_w: usize, out_h: usize) -> Vec<f32> {
    assert_eq!(plane.len(), w * h, "plane length");
    let xs = axis_taps(w, out_w);
    let ys = axis_taps(h, out_h);
    let mut out = Vec::with_capacity(out_w * out_h);
    for ty in &ys {
        for tx in &xs {
            let p = |y: usize, x: usize| plane[y * w + x] as f64;
            let top = (1.0 - tx.t) * p(ty.i0, tx.i0) + tx.t * p(ty.i0, tx.i1);
            let bot = (1.0 - tx.t) * p(ty.i1, tx.i0) + tx.t * p(ty.i1, tx.i1);
            out.push(((1.0 - ty.t) * top + ty.t * bot) as f32);
        }
    }
    out
}

/// Center-crops to the largest centered square, then resizes to `side x side`.
pub fn crop_resize(r: &Raster, side: u32) -> Result<Raster, ImagingError> {
    if side == 0 {
        return Err(ImagingError::DegenerateInput("side must be >= 1".into()));
    }
    let rect = CropRect::center_square(r.width, r.height);
    if rect.w == r.width && rect.h == r.height {
        return resize_bilinear(r, side, side);
    }
    resize_bilinear(&crop(r, rect)?, side, side)
}

// ---------------------------------------------------------------------------
// Heatmaps

/// Float map aligned with a raster, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub width: u32,
    pub height: u32,
    pub values: Vec<f32>,
}

impl Heatmap {
    pub fn to_gray(&self) -> Raster {
        let pixels = self
            .values
            .iter()
            .map(|&v| {
                let g = round_channel(v.clamp(0.0, 1.0) as f64 * 255.0);
                [g, g, g]
            })
            .collect();
        Raster {
            width: self.width,
            height: self.height,
            pixels,
        }
    }

    /// Blends pure red over `base` with per-pixel weight `alpha * value`.
    pub fn overlay_red(&self, base: &Raster, alpha: f32) -> Result<Raster, ImagingError> {
        if base.width != self.width || base.height != self.height {
            return Err(ImagingError::DegenerateInput(format!(
                "heatmap {}x{} does not match raster {}x{}",
                self.width, self.height, base.width, base.height
            )));
        }
        let pixels = base
            .pixels
            .iter()
            .zip(&self.values)
            .map(|(p, &v)| {
                let a = (alpha * v).clamp(0.0, 1.0) as f64;
                [
                    round_channel(p[0] as f64 * (1.0 - a) + 255.0 * a),
                    round_channel(p[1] as f64 * (1.0 - a)),
                    round_channel(p[2] as f64 * (1.0 - a)),
                ]
            })
            .collect();
        Ok(Raster {
            width: base.width,
            height: base.height,
            pixels,
        })
    }
}
