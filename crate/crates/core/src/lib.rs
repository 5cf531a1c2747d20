//! Skin-lesion screening pipeline.
//!
//! * [`imaging`]: decode/encode, RGB <-> HSV, center-crop and bilinear resize.
//! * [`dataset`]: manifests, ingest, quality screen, dHash dedup, fold planning.
//! * [`augment`]: standard geometric/photometric augmentation and the HSV grid.
//! * [`engine`]: sequential CNN inference, the LSW1 weight format and Grad-CAM.
//! * [`eval`]: confusion matrices, metrics and fold summaries.

pub mod augment;
pub mod dataset;
pub mod engine;
pub mod eval;
pub mod imaging;
pub mod label;

pub use imaging::{HsvPixel, Raster, Rgb};
pub use label::{Label, NUM_CLASSES};
