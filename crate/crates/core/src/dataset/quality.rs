use serde::{Deserialize, Serialize};

use crate::imaging::{grayscale, Raster};

/// Screening thresholds. Defaults are operating choices, not calibrated values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityConfig {
    /// Minimum variance of the Laplacian on the [0, 255] grayscale image.
    pub blur_threshold: f64,
    pub min_side_threshold: u32,
}

impl Default for QualityConfig {
    fn default() -> Self {
        Self {
            blur_threshold: 100.0,
            min_side_threshold: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QualityReport {
    pub blur_score: f64,
    pub min_side: u32,
    pub passed: bool,
}

/// Population variance of the 4-neighbour Laplacian over interior pixels.
/// Images narrower than 3 pixels in either direction score 0.
pub fn laplacian_variance(gray: &[f64], width: usize, height: usize) -> f64 {
    if width < 3 || height < 3 {
        return 0.0;
    }
    let n = ((width - 2) * (height - 2)) as f64;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for y in 1..height - 1 {
        for x in 1..width - 1 {
            let c = y * width + x;
            let l = gray[c - width] + gray[c + width] + gray[c - 1] + gray[c + 1] - 4.0 * gray[c];
            sum += l;
            sum_sq += l * l;
        }
    }
    let mean = sum / n;
    (sum_sq / n - mean * mean).max(0.0)
}

pub fn quality_screen(r: &Raster, cfg: &QualityConfig) -> QualityReport {
    let blur_score = laplacian_variance(&grayscale(r), r.width() as usize, r.height() as usize);
    let min_side = r.width().min(r.height());
    QualityReport {
        blur_score,
        min_side,
        passed: blur_score >= cfg.blur_threshold && min_side >= cfg.min_side_threshold,
    }
}
