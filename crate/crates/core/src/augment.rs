//! Training-set expansion: the standard geometric/photometric suite and the
//! HSV color-space grid used to de-emphasise skin tone.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{DatasetError, FoldPlan, ImageRecord, Manifest};
use crate::imaging::{self, hsv_to_rgb, rgb_to_hsv, round_channel, HsvPixel, ImagingError, Raster};

pub const AUGCFG_FORMAT: &str = "augcfg/1";

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("invalid augmentation spec: {0}")]
    InvalidSpec(String),
    #[error("invalid fold plan: {0}")]
    InvalidPlan(String),
    #[error("invalid augmentation config: {0}")]
    Config(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
}

impl AugmentError {
    pub fn code(&self) -> &'static str {
        match self {
            AugmentError::InvalidGrid(_) => "InvalidGrid",
            AugmentError::InvalidSpec(_) => "InvalidSpec",
            AugmentError::InvalidPlan(_) => "InvalidPlan",
            AugmentError::Config(_) => "InvalidConfig",
            AugmentError::Io { .. } => "IoFailure",
            AugmentError::Dataset(e) => e.code(),
            AugmentError::Imaging(e) => e.code(),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> AugmentError + '_ {
    move |source| AugmentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

// ---------------------------------------------------------------------------
// Color-space grid

/// Hue shifts (degrees) x saturation scales x value scales.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationGrid {
    pub hue_shifts: Vec<f64>,
    pub saturation_scales: Vec<f64>,
    pub value_scales: Vec<f64>,
}

/// 20 hue shifts tiling the circle every 18 degrees, saturation x{0.7, 1.0, 1.3},
/// value x{0.8, 1.0, 1.2}: 180 variants.
pub fn default_grid() -> AugmentationGrid {
    AugmentationGrid {
        hue_shifts: (0..20).map(|i| i as f64 * 18.0).collect(),
        saturation_scales: vec![0.7, 1.0, 1.3],
        value_scales: vec![0.8, 1.0, 1.2],
    }
}

impl Default for AugmentationGrid {
    fn default() -> Self {
        default_grid()
    }
}

impl AugmentationGrid {
    pub fn validate(&self) -> Result<(), AugmentError> {
        let lists = [
            ("hue_shifts", &self.hue_shifts),
            ("saturation_scales", &self.saturation_scales),
            ("value_scales", &self.value_scales),
        ];
        for (name, list) in lists {
            if list.is_empty() {
                return Err(AugmentError::InvalidGrid(format!("{name} is empty")));
            }
            if list.iter().any(|v| !v.is_finite()) {
                return Err(AugmentError::InvalidGrid(format!(
                    "{name} has a non-finite entry"
                )));
            }
        }
        for (name, list) in &lists[1..] {
            if list.iter().any(|&v| v <= 0.0) {
                return Err(AugmentError::InvalidGrid(format!("{name} must be > 0")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.hue_shifts.len() * self.saturation_scales.len() * self.value_scales.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(hue, saturation, value)` indices of output `i` (hue outermost).
    pub fn cell(&self, i: usize) -> (usize, usize, usize) {
        let (ns, nv) = (self.saturation_scales.len(), self.value_scales.len());
        (i / (ns * nv), (i / nv) % ns, i % nv)
    }
}

/// All grid variants of `x`, hue outermost and value innermost.
pub fn color_space_augment(
    x: &Raster,
    grid: &AugmentationGrid,
) -> Result<Vec<Raster>, AugmentError> {
    grid.validate()?;
    let hsv: Vec<HsvPixel> = x.pixels().iter().map(|&p| rgb_to_hsv(p)).collect();
    let mut out = Vec::with_capacity(grid.len());
    for &shift in &grid.hue_shifts {
        for &sat in &grid.saturation_scales {
            for &val in &grid.value_scales {
                let pixels = hsv
                    .iter()
                    .map(|p| hsv_to_rgb(HsvPixel::new(p.h + shift, p.s * sat, p.v * val)))
                    .collect();
                out.push(Raster::new(x.width(), x.height(), pixels)?);
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Standard suite

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentOp {
    Rotation,
    Translation,
    Reflection,
    Shear,
    HueJitter,
    SaturationJitter,
    ContrastJitter,
    BrightnessJitter,
    Noise,
    Scaling,
}

impl AugmentOp {
    pub const ALL: [AugmentOp; 10] = [
        AugmentOp::Rotation,
        AugmentOp::Translation,
        AugmentOp::Reflection,
        AugmentOp::Shear,
        AugmentOp::HueJitter,
        AugmentOp::SaturationJitter,
        AugmentOp::ContrastJitter,
        AugmentOp::BrightnessJitter,
        AugmentOp::Noise,
        AugmentOp::Scaling,
    ];
}

/// Symmetric parameter bounds; each draw is uniform within them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentRanges {
    /// Rotation within +-degrees.
    pub rotation_deg: f64,
    /// Translation within +- this fraction of width/height.
    pub translation_frac: f64,
    /// Horizontal shear within +-degrees.
    pub shear_deg: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Hue shift within +- this fraction of the hue circle.
    pub hue_jitter: f64,
    /// Multiplicative factor within 1 +- jitter.
    pub saturation_jitter: f64,
    pub contrast_jitter: f64,
    pub brightness_jitter: f64,
    /// Gaussian noise with sigma drawn from [0, max], on the [0, 1] intensity scale.
    pub noise_sigma_max: f64,
}

impl Default for AugmentRanges {
    fn default() -> Self {
        Self {
            rotation_deg: 30.0,
            translation_frac: 0.1,
            shear_deg: 15.0,
            scale_min: 0.85,
            scale_max: 1.15,
            hue_jitter: 0.2,
            saturation_jitter: 0.2,
            contrast_jitter: 0.2,
            brightness_jitter: 0.2,
            noise_sigma_max: 8.0 / 255.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardAugmentSpec {
    pub ops: Vec<AugmentOp>,
    pub ranges: AugmentRanges,
    pub seed: u64,
    /// Outputs per input, original included.
    pub multiplier: u32,
}

impl Default for StandardAugmentSpec {
    fn default() -> Self {
        Self {
            ops: AugmentOp::ALL.to_vec(),
            ranges: AugmentRanges::default(),
            seed: 0,
            multiplier: 14,
        }
    }
}

impl StandardAugmentSpec {
    pub fn validate(&self) -> Result<(), AugmentError> {
        let bad = |m: String| Err(AugmentError::InvalidSpec(m));
        if self.multiplier == 0 {
            return bad("multiplier must be >= 1".into());
        }
        if self.multiplier > 1 && self.ops.is_empty() {
            return bad("no operations to draw from".into());
        }
        if self.ops.iter().collect::<BTreeSet<_>>().len() != self.ops.len() {
            return bad("duplicate operation".into());
        }
        let r = &self.ranges;
        let checks = [
            ("rotation_deg", r.rotation_deg, 0.0, 180.0),
            ("translation_frac", r.translation_frac, 0.0, 0.5),
            ("shear_deg", r.shear_deg, 0.0, 45.0),
            ("scale_min", r.scale_min, 0.05, 4.0),
            ("scale_max", r.scale_max, 0.05, 4.0),
            ("hue_jitter", r.hue_jitter, 0.0, 0.5),
            ("saturation_jitter", r.saturation_jitter, 0.0, 1.0),
            ("contrast_jitter", r.contrast_jitter, 0.0, 1.0),
            ("brightness_jitter", r.brightness_jitter, 0.0, 1.0),
            ("noise_sigma_max", r.noise_sigma_max, 0.0, 0.25),
        ];
        for (name, v, lo, hi) in checks {
            if !(lo..=hi).contains(&v) {
                return bad(format!("{name} = {v} outside [{lo}, {hi}]"));
            }
        }
        if r.scale_min > r.scale_max {
            return bad("scale_min > scale_max".into());
        }
        Ok(())
    }
}

/// Reflects a continuous coordinate into `[0, n - 1]` (mirror about edge pixel centers).
fn reflect_coord(s: f64, n: usize) -> f64 {
    if n == 1 {
        return 0.0;
    }
    let period = 2.0 * (n - 1) as f64;
    let t = s.rem_euclid(period);
    if t > (n - 1) as f64 {
        period - t
    } else {
        t
    }
}

/// Inverse-maps every output pixel center through `inv` (a 2x3 affine matrix in
/// center-relative coordinates) and samples bilinearly with reflect padding.
fn warp(x: &Raster, inv: [[f64; 3]; 2]) -> Raster {
    let (w, h) = (x.width() as usize, x.height() as usize);
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    Raster::from_fn(x.width(), x.height(), |ox, oy| {
        let dx = ox as f64 + 0.5 - cx;
        let dy = oy as f64 + 0.5 - cy;
        let sx = reflect_coord(inv[0][0] * dx + inv[0][1] * dy + inv[0][2] + cx - 0.5, w);
        let sy = reflect_coord(inv[1][0] * dx + inv[1][1] * dy + inv[1][2] + cy - 0.5, h);
        let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
        let (tx, ty) = (sx - x0 as f64, sy - y0 as f64);
        let (p00, p01) = (x.get(x0 as u32, y0 as u32), x.get(x1 as u32, y0 as u32));
        let (p10, p11) = (x.get(x0 as u32, y1 as u32), x.get(x1 as u32, y1 as u32));
        let mut out = [0u8; 3];
        for c in 0..3 {
            let top = (1.0 - tx) * p00[c] as f64 + tx * p01[c] as f64;
            let bot = (1.0 - tx) * p10[c] as f64 + tx * p11[c] as f64;
            out[c] = round_channel((1.0 - ty) * top + ty * bot);
        }
        out
    })
}

fn mirror_horizontal(x: &Raster) -> Raster {
    let w = x.width();
    Raster::from_fn(w, x.height(), |ox, oy| x.get(w - 1 - ox, oy))
}

fn symmetric(rng: &mut ChaCha8Rng, bound: f64) -> f64 {
    if bound == 0.0 {
        0.0
    } else {
        rng.random_range(-bound..=bound)
    }
}

fn apply_op(x: &Raster, op: AugmentOp, r: &AugmentRanges, rng: &mut ChaCha8Rng) -> Raster {
    match op {
        AugmentOp::Reflection => mirror_horizontal(x),
        AugmentOp::Rotation => {
            let t = symmetric(rng, r.rotation_deg).to_radians();
            let (s, c) = t.sin_cos();
            // inverse of a rotation by t
            warp(x, [[c, s, 0.0], [-s, c, 0.0]])
        }
        AugmentOp::Translation => {
            let tx = symmetric(rng, r.translation_frac) * x.width() as f64;
            let ty = symmetric(rng, r.translation_frac) * x.height() as f64;
            warp(x, [[1.0, 0.0, -tx], [0.0, 1.0, -ty]])
        }
        AugmentOp::Shear => {
            let k = symmetric(rng, r.shear_deg).to_radians().tan();
            warp(x, [[1.0, -k, 0.0], [0.0, 1.0, 0.0]])
        }
        AugmentOp::Scaling => {
            let s = if r.scale_min == r.scale_max {
                r.scale_min
            } else {
                rng.random_range(r.scale_min..=r.scale_max)
            };
            warp(x, [[1.0 / s, 0.0, 0.0], [0.0, 1.0 / s, 0.0]])
        }
        AugmentOp::HueJitter => {
            let shift = symmetric(rng, r.hue_jitter) * 360.0;
            x.map_pixels(|&p| {
                let q = rgb_to_hsv(p);
                hsv_to_rgb(HsvPixel::new(q.h + shift, q.s, q.v))
            })
        }
        AugmentOp::SaturationJitter => {
            let f = 1.0 + symmetric(rng, r.saturation_jitter);
            x.map_pixels(|&p| {
                let q = rgb_to_hsv(p);
                hsv_to_rgb(HsvPixel::new(q.h, q.s * f, q.v))
            })
        }
        AugmentOp::BrightnessJitter => {
            let f = 1.0 + symmetric(rng, r.brightness_jitter);
            x.map_pixels(|p| p.map(|c| round_channel(c as f64 * f)))
        }
        AugmentOp::ContrastJitter => {
            let f = 1.0 + symmetric(rng, r.contrast_jitter);
            let mean = imaging::grayscale(x).iter().sum::<f64>() / x.pixels().len() as f64;
            x.map_pixels(|p| p.map(|c| round_channel((c as f64 - mean) * f + mean)))
        }
        AugmentOp::Noise => {
            let sigma = if r.noise_sigma_max == 0.0 {
                0.0
            } else {
                rng.random_range(0.0..=r.noise_sigma_max) * 255.0
            };
            if sigma == 0.0 {
                return x.clone();
            }
            let normal = Normal::new(0.0, sigma).expect("sigma is finite and positive");
            x.map_pixels(|p| p.map(|c| round_channel(c as f64 + normal.sample(rng))))
        }
    }
}

/// Original plus `multiplier - 1` variants. Variant `k` draws 1-3 distinct ops
/// (fewer if the spec lists fewer) from ChaCha8 stream `k` of `spec.seed`.
pub fn standard_augment(
    x: &Raster,
    spec: &StandardAugmentSpec,
) -> Result<Vec<Raster>, AugmentError> {
    spec.validate()?;
    let mut out = Vec::with_capacity(spec.multiplier as usize);
    out.push(x.clone());
    for k in 1..spec.multiplier {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(k as u64);
        let n_ops = rng.random_range(1..=3usize).min(spec.ops.len());
        let chosen: Vec<AugmentOp> = spec.ops.choose_multiple(&mut rng, n_ops).copied().collect();
        let mut img = x.clone();
        for op in chosen {
            img = apply_op(&img, op, &spec.ranges, &mut rng);
        }
        out.push(img);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Config file

/// On-disk augmentation configuration (`augcfg/1`, TOML).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub format: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub standard: Option<StandardAugmentSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<AugmentationGrid>,
}

impl AugmentConfig {
    pub fn new(standard: Option<StandardAugmentSpec>, grid: Option<AugmentationGrid>) -> Self {
        Self {
            format: AUGCFG_FORMAT.to_string(),
            standard,
            grid,
        }
    }

    pub fn parse(text: &str) -> Result<Self, AugmentError> {
        let cfg: AugmentConfig =
            toml::from_str(text).map_err(|e| AugmentError::Config(e.to_string()))?;
        if cfg.format != AUGCFG_FORMAT {
            return Err(AugmentError::Config(format!(
                "format {:?}, expected {AUGCFG_FORMAT:?}",
                cfg.format
            )));
        }
        if let Some(s) = &cfg.standard {
            s.validate()?;
        }
        if let Some(g) = &cfg.grid {
            g.validate()?;
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

// ---------------------------------------------------------------------------
// Corpus driver

/// Which augmentations to chain. With both set, every standard output
/// (original included) is expanded by the grid.
#[derive(Debug, Clone, Default)]
pub struct AugmentPipeline {
    pub standard: Option<StandardAugmentSpec>,
    pub grid: Option<AugmentationGrid>,
}

impl AugmentPipeline {
    /// Outputs per input image.
    pub fn fan_out(&self) -> usize {
        let std = self.standard.as_ref().map_or(1, |s| s.multiplier as usize);
        let cs = self.grid.as_ref().map_or(1, |g| g.len());
        std * cs
    }
}

/// Id of the original record an augmented id derives from.
pub fn parent_id(id: &str) -> &str {
    id.split("__").next().unwrap_or(id)
}

fn per_image_seed(seed: u64, id: &str) -> u64 {
    let digest = Sha256::digest(id.as_bytes());
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    seed ^ u64::from_le_bytes(head)
}

/// Augments the train and validation images of `fold` (every image when `plan`
/// is `None`) and writes them as PNG under `out/<Label>/`.
///
/// Returns a manifest of the written images with paths relative to `out`; it is
/// also saved as `out/augmented.manifest`. Test-partition images are never
/// touched. Standard variants of an image use `spec.seed` mixed with its id.
pub fn augment_corpus(
    m: &Manifest,
    src_root: &Path,
    plan: Option<(&FoldPlan, usize)>,
    pipeline: &AugmentPipeline,
    out: &Path,
) -> Result<Manifest, AugmentError> {
    if let Some(s) = &pipeline.standard {
        s.validate()?;
    }
    if let Some(g) = &pipeline.grid {
        g.validate()?;
    }
    let eligible: Box<dyn Fn(&ImageRecord) -> bool> = match plan {
        Some((plan, fold)) => {
            plan.validate(m)
                .map_err(|e| AugmentError::InvalidPlan(e.to_string()))?;
            let f = plan
                .folds
                .get(fold)
                .ok_or_else(|| AugmentError::InvalidPlan(format!("fold {fold} out of range")))?;
            Box::new(move |r: &ImageRecord| {
                f.train.contains(&r.patient_id) || f.val.contains(&r.patient_id)
            })
        }
        None => Box::new(|_| true),
    };

    fs::create_dir_all(out).map_err(io_err(out))?;
    let mut records = Vec::new();
    for rec in m.records.iter().filter(|r| eligible(r)) {
        let img = rec.load(src_root)?;
        let std_outputs: Vec<(Option<usize>, Raster)> = match &pipeline.standard {
            Some(spec) => {
                let spec = StandardAugmentSpec {
                    seed: per_image_seed(spec.seed, &rec.id),
                    ..spec.clone()
                };
                standard_augment(&img, &spec)?
                    .into_iter()
                    .enumerate()
                    .map(|(k, r)| (Some(k), r))
                    .collect()
            }
            None => vec![(None, img)],
        };
        let dir = out.join(rec.label.as_str());
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        for (k, base) in std_outputs {
            let stem = match k {
                Some(k) => format!("{}__std{k}", rec.id),
                None => rec.id.clone(),
            };
            let variants: Vec<(String, Raster)> = match &pipeline.grid {
                Some(grid) => color_space_augment(&base, grid)?
                    .into_iter()
                    .enumerate()
                    .map(|(i, r)| {
                        let (h, s, v) = grid.cell(i);
                        (format!("{stem}__cs{h}_{s}_{v}"), r)
                    })
                    .collect(),
                None if k.is_some() => vec![(stem, base)],
                None => Vec::new(),
            };
            for (id, raster) in variants {
                let rel = format!("{}/{id}.png", rec.label.as_str());
                let path = out.join(&rel);
                fs::write(&path, imaging::encode_png(&raster)?).map_err(io_err(&path))?;
                records.push(ImageRecord {
                    id,
                    path: rel,
                    label: rec.label,
                    patient_id: rec.patient_id.clone(),
                    source_url: None,
                    crop: None,
                    screened: rec.screened,
                    verified_by: rec.verified_by.clone(),
                });
            }
        }
    }
    let manifest = Manifest::new(records)?;
    let manifest_path = out.join("augmented.manifest");
    manifest.save(&manifest_path)?;
    Ok(manifest)
}
