//! Image catalog: manifest records, directory ingest, quality screening,
//! near-duplicate detection and patient-independent fold planning.

mod dedup;
mod folds;
mod quality;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::imaging::{self, CropRect, ImagingError, Raster};
use crate::label::{Label, NUM_CLASSES};

pub use dedup::{
    dhash, find_duplicates, group_near_duplicates, hamming, hash_manifest, DEFAULT_DHASH_THRESHOLD,
};
pub use folds::{make_folds, Fold, FoldError, FoldPlan, Partition, FOLDPLAN_HEADER, NUM_FOLDS};
pub use quality::{laplacian_variance, quality_screen, QualityConfig, QualityReport};

pub const MANIFEST_HEADER: &str = "mslmanifest/1";

/// Name of the optional per-root sidecar that maps image paths to patients.
pub const SIDECAR_FILE: &str = "metadata.tsv";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("folder {0:?} does not map to a known label")]
    UnknownLabelFolder(String),
    #[error("duplicate record id {0:?}")]
    DuplicateId(String),
    #[error("manifest line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("record {id}: {source}")]
    Image {
        id: String,
        #[source]
        source: ImagingError,
    },
}

impl DatasetError {
    pub fn code(&self) -> &'static str {
        match self {
            DatasetError::Io { .. } => "IoFailure",
            DatasetError::EmptyDataset => "EmptyDataset",
            DatasetError::UnknownLabelFolder(_) => "UnknownLabelFolder",
            DatasetError::DuplicateId(_) => "DuplicateId",
            DatasetError::Parse { .. } => "ManifestParse",
            DatasetError::Image { source, .. } => source.code(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DatasetError::Io {
            path: path.into(),
            source,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageRecord {
    pub id: String,
    /// Path relative to the dataset root, `/`-separated.
    pub path: String,
    pub label: Label,
    pub patient_id: String,
    pub source_url: Option<String>,
    /// Curated region of interest; center-crop applies when absent.
    pub crop: Option<CropRect>,
    pub screened: bool,
    pub verified_by: Option<String>,
}

impl ImageRecord {
    pub fn new(
        id: impl Into<String>,
        path: impl Into<String>,
        label: Label,
        patient_id: impl Into<String>,
    ) -> Self {
        Self {
            id: id.into(),
            path: path.into(),
            label,
            patient_id: patient_id.into(),
            source_url: None,
            crop: None,
            screened: false,
            verified_by: None,
        }
    }

    /// Decodes the record's image under `root` and applies its crop rectangle, if any.
    pub fn load(&self, root: &Path) -> Result<Raster, DatasetError> {
        let full = root.join(&self.path);
        let bytes = fs::read(&full).map_err(|e| DatasetError::io(&full, e))?;
        let img = imaging::decode_image(&bytes).map_err(|source| DatasetError::Image {
            id: self.id.clone(),
            source,
        })?;
        match self.crop {
            Some(rect) => imaging::crop(&img, rect).map_err(|source| DatasetError::Image {
                id: self.id.clone(),
                source,
            }),
            None => Ok(img),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub records: Vec<ImageRecord>,
}

impl Manifest {
    pub fn new(records: Vec<ImageRecord>) -> Result<Self, DatasetError> {
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(r.id.as_str()) {
                return Err(DatasetError::DuplicateId(r.id.clone()));
            }
        }
        Ok(Self { records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut counts = [0; NUM_CLASSES];
        for r in &self.records {
            counts[r.label.index()] += 1;
        }
        counts
    }

    pub fn patient_count(&self) -> usize {
        self.records
            .iter()
            .map(|r| r.patient_id.as_str())
            .collect::<HashSet<_>>()
            .len()
    }

    /// Distinct patients per class.
    pub fn class_patient_counts(&self) -> [usize; NUM_CLASSES] {
        let mut sets: [HashSet<&str>; NUM_CLASSES] = Default::default();
        for r in &self.records {
            sets[r.label.index()].insert(&r.patient_id);
        }
        sets.map(|s| s.len())
    }

    pub fn patients(&self) -> BTreeSet<String> {
        self.records.iter().map(|r| r.patient_id.clone()).collect()
    }

    pub fn get(&self, id: &str) -> Option<&ImageRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(64 * (self.records.len() + 1));
        out.push_str(MANIFEST_HEADER);
        out.push('\n');
        for r in &self.records {
            let crop = r
                .crop
                .map(|c| format!("{},{},{},{}", c.x, c.y, c.w, c.h))
                .unwrap_or_default();
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.id,
                r.path,
                r.label,
                r.patient_id,
                r.source_url.as_deref().unwrap_or(""),
                crop,
                r.screened,
                r.verified_by.as_deref().unwrap_or(""),
            );
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, DatasetError> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, MANIFEST_HEADER)) => {}
            other => {
                return Err(DatasetError::Parse {
                    line: 1,
                    msg: format!(
                        "expected header {MANIFEST_HEADER:?}, found {:?}",
                        other.map(|(_, l)| l).unwrap_or("")
                    ),
                })
            }
        }
        let mut records = Vec::new();
        for (i, line) in lines {
            let line_no = i + 1;
            let err = |msg: String| DatasetError::Parse { line: line_no, msg };
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 8 {
                return Err(err(format!(
                    "expected 8 tab-separated fields, found {}",
                    f.len()
                )));
            }
            if f[0].is_empty() || f[1].is_empty() || f[3].is_empty() {
                return Err(err("id, path and patient_id must be non-empty".into()));
            }
            let label = Label::ALL
                .into_iter()
                .find(|l| l.as_str() == f[2])
                .ok_or_else(|| err(format!("unknown label {:?}", f[2])))?;
            let crop = if f[5].is_empty() {
                None
            } else {
                let parts: Vec<u32> = f[5]
                    .split(',')
                    .map(|p| p.parse::<u32>())
                    .collect::<Result<_, _>>()
                    .map_err(|_| err(format!("bad crop {:?}", f[5])))?;
                match parts[..] {
                    [x, y, w, h] if w > 0 && h > 0 => Some(CropRect { x, y, w, h }),
                    _ => return Err(err(format!("bad crop {:?}", f[5]))),
                }
            };
            let screened = match f[6] {
                "true" => true,
                "false" => false,
                other => return Err(err(format!("bad screened flag {other:?}"))),
            };
            let opt = |s: &str| (!s.is_empty()).then(|| s.to_string());
            records.push(ImageRecord {
                id: f[0].to_string(),
                path: f[1].to_string(),
                label,
                patient_id: f[3].to_string(),
                source_url: opt(f[4]),
                crop,
                screened,
                verified_by: opt(f[7]),
            });
        }
        Manifest::new(records)
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let text = fs::read_to_string(path).map_err(|e| DatasetError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        fs::write(path, self.to_text()).map_err(|e| DatasetError::io(path, e))
    }
}

/// Folder-name to label lookup. Keys are matched case-insensitively.
#[derive(Debug, Clone)]
pub struct Labeling(HashMap<String, Label>);

impl Labeling {
    pub fn new(map: impl IntoIterator<Item = (String, Label)>) -> Self {
        Self(
            map.into_iter()
                .map(|(k, v)| (k.to_ascii_lowercase(), v))
                .collect(),
        )
    }

    pub fn get(&self, folder: &str) -> Option<Label> {
        self.0.get(&folder.to_ascii_lowercase()).copied()
    }
}

impl Default for Labeling {
    /// Canonical class names plus the aliases accepted by `Label::from_str`.
    fn default() -> Self {
        let names = [
            "mpox",
            "monkeypox",
            "chickenpox",
            "measles",
            "cowpox",
            "hfmd",
            "hand_foot_mouth",
            "healthy",
            "normal",
        ];
        Self::new(
            names
                .iter()
                .map(|n| (n.to_string(), n.parse().expect("alias parses"))),
        )
    }
}

/// Result of a directory ingest.
#[derive(Debug)]
pub struct IngestOutcome {
    pub manifest: Manifest,
    /// Relative paths of image-like files that failed to decode.
    pub skipped: Vec<String>,
}

fn sanitize_id(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        let c = if ch.is_ascii_alphanumeric() || ch == '-' {
            ch
        } else {
            '_'
        };
        // "__" separates parent ids from augmentation suffixes.
        if c == '_' && out.ends_with('_') {
            continue;
        }
        out.push(c);
    }
    out
}

fn read_sidecar(root: &Path) -> Result<HashMap<String, (String, Option<String>)>, DatasetError> {
    let path = root.join(SIDECAR_FILE);
    let text = match fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(HashMap::new()),
        Err(e) => return Err(DatasetError::io(&path, e)),
    };
    let mut map = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() < 2 || f[0].is_empty() || f[1].is_empty() {
            return Err(DatasetError::Parse {
                line: i + 1,
                msg: format!("{SIDECAR_FILE}: expected `path<TAB>patient_id[<TAB>source_url]`"),
            });
        }
        let url = f.get(2).filter(|u| !u.is_empty()).map(|u| u.to_string());
        map.insert(f[0].to_string(), (f[1].to_string(), url));
    }
    Ok(map)
}

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Walks `root/<label-folder>/<file>` and builds a manifest.
///
/// Patient ids come from `root/metadata.tsv` when it lists the file; otherwise
/// each file is its own patient.
pub fn ingest(root: &Path, labeling: &Labeling) -> Result<Manifest, DatasetError> {
    ingest_with_report(root, labeling).map(|o| o.manifest)
}

pub fn ingest_with_report(root: &Path, labeling: &Labeling) -> Result<IngestOutcome, DatasetError> {
    let sidecar = read_sidecar(root)?;
    let mut folders: Vec<(String, PathBuf)> = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| DatasetError::io(root, e))? {
        let entry = entry.map_err(|e| DatasetError::io(root, e))?;
        let path = entry.path();
        if path.is_dir() {
            let name = entry.file_name().to_string_lossy().into_owned();
            if name.starts_with('.') {
                continue;
            }
            folders.push((name, path));
        }
    }
    folders.sort();

    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for (folder, dir) in folders {
        let label = labeling
            .get(&folder)
            .ok_or_else(|| DatasetError::UnknownLabelFolder(folder.clone()))?;
        let mut files: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| DatasetError::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.is_file()
                    && p.extension().and_then(|e| e.to_str()).is_some_and(|e| {
                        IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str())
                    })
            })
            .collect();
        files.sort();
        for file in files {
            let file_name = file
                .file_name()
                .unwrap_or_default()
                .to_string_lossy()
                .into_owned();
            let rel = format!("{folder}/{file_name}");
            let bytes = fs::read(&file).map_err(|e| DatasetError::io(&file, e))?;
            if imaging::decode_image(&bytes).is_err() {
                skipped.push(rel);
                continue;
            }
            let stem = file.file_stem().unwrap_or_default().to_string_lossy();
            let id = sanitize_id(&format!("{folder}_{stem}"));
            let (patient_id, source_url) = sidecar
                .get(&rel)
                .cloned()
                .unwrap_or_else(|| (id.clone(), None));
            let mut rec = ImageRecord::new(id, rel, label, patient_id);
            rec.source_url = source_url;
            records.push(rec);
        }
    }
    if records.is_empty() {
        return Err(DatasetError::EmptyDataset);
    }
    Ok(IngestOutcome {
        manifest: Manifest::new(records)?,
        skipped,
    })
}

/// Image and patient counts per class of the six-class reference corpus.
pub const MSLD_V2_COUNTS: [(Label, usize, usize); NUM_CLASSES] = [
    (Label::Mpox, 284, 143),
    (Label::Chickenpox, 75, 62),
    (Label::Measles, 55, 46),
    (Label::Cowpox, 66, 41),
    (Label::Hfmd, 161, 144),
    (Label::Healthy, 114, 105),
];

/// Per-patient image counts for one class: everyone gets one image, surplus
/// images go out as +3, +2, then +1 each, cycling until exhausted.
pub fn fixture_patient_sizes(images: usize, patients: usize) -> Vec<usize> {
    assert!(patients >= 1 && images >= patients);
    let mut sizes = vec![1usize; patients];
    let mut extra = images - patients;
    let mut i = 0;
    while extra > 0 {
        let give = match i {
            0 => 3,
            1 => 2,
            _ => 1,
        }
        .min(extra);
        sizes[i % patients] += give;
        extra -= give;
        i += 1;
    }
    sizes
}

/// Synthetic manifest with the exact class/patient shape of the reference corpus
/// (755 images, 541 patients). Files live at `<Label>/<id>.png`.
pub fn msld_v2_fixture() -> Manifest {
    let mut records = Vec::with_capacity(755);
    for (label, images, patients) in MSLD_V2_COUNTS {
        let prefix = label.as_str().to_ascii_lowercase();
        for (p, &n) in fixture_patient_sizes(images, patients).iter().enumerate() {
            let patient = format!("{prefix}-p{:03}", p + 1);
            for k in 0..n {
                let id = format!("{prefix}-p{:03}-{}", p + 1, k + 1);
                let mut rec = ImageRecord::new(
                    id.clone(),
                    format!("{}/{id}.png", label.as_str()),
                    label,
                    patient.clone(),
                );
                rec.screened = true;
                records.push(rec);
            }
        }
    }
    Manifest::new(records).expect("fixture ids are unique")
}

/// Writes a deterministic synthetic image for every record of `m` under `root`,
/// plus a sidecar carrying the patient ids. Intended for fixtures and demos.
pub fn materialize_fixture(m: &Manifest, root: &Path, side: u32) -> Result<(), DatasetError> {
    let mut sidecar = String::new();
    for (n, r) in m.records.iter().enumerate() {
        let path = root.join(&r.path);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| DatasetError::io(parent, e))?;
        }
        let img = synthetic_lesion(n as u64, r.label, side);
        let png = imaging::encode_png(&img).map_err(|source| DatasetError::Image {
            id: r.id.clone(),
            source,
        })?;
        fs::write(&path, png).map_err(|e| DatasetError::io(&path, e))?;
        let _ = writeln!(sidecar, "{}\t{}", r.path, r.patient_id);
    }
    let sidecar_path = root.join(SIDECAR_FILE);
    fs::write(&sidecar_path, sidecar).map_err(|e| DatasetError::io(&sidecar_path, e))
}

/// Skin-toned background with class-tinted blobs; fully determined by `(seed, label, side)`.
pub fn synthetic_lesion(seed: u64, label: Label, side: u32) -> Raster {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(
        seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ label.index() as u64,
    );
    let skin = [
        rng.random_range(90..=235u8),
        rng.random_range(60..=190u8),
        rng.random_range(40..=160u8),
    ];
    let tint: [f64; 3] = match label {
        Label::Mpox => [0.55, 0.35, 0.30],
        Label::Chickenpox => [0.85, 0.40, 0.40],
        Label::Measles => [0.90, 0.25, 0.25],
        Label::Cowpox => [0.45, 0.30, 0.35],
        Label::Hfmd => [0.80, 0.50, 0.55],
        Label::Healthy => [1.0, 1.0, 1.0],
    };
    let blobs: Vec<(f64, f64, f64)> = (0..rng.random_range(3..9))
        .map(|_| {
            (
                rng.random_range(0.0..side as f64),
                rng.random_range(0.0..side as f64),
                rng.random_range(1.5..(side as f64 / 6.0).max(2.0)),
            )
        })
        .collect();
    Raster::from_fn(side, side, |x, y| {
        let mut w: f64 = 0.0;
        for &(bx, by, br) in &blobs {
            let d2 = (x as f64 - bx).powi(2) + (y as f64 - by).powi(2);
            w = w.max((-d2 / (2.0 * br * br)).exp());
        }
        let texture = ((x * 7 + y * 13 + (seed as u32 & 0xff)) % 11) as f64 - 5.0;
        let mut px = [0u8; 3];
        for c in 0..3 {
            let base = skin[c] as f64 + texture;
            px[c] = imaging::round_channel(base * (1.0 - w) + base * tint[c] * w);
        }
        px
    })
}

/// Counts per class as a label-keyed map, convenient for reports.
pub fn class_count_map(m: &Manifest) -> BTreeMap<Label, usize> {
    Label::ALL.iter().copied().zip(m.class_counts()).collect()
}
