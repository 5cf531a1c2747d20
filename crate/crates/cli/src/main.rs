use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgGroup, Parser, Subcommand, ValueEnum};
use lesionscreen_core::augment::{
    augment_corpus, default_grid, AugmentConfig, AugmentPipeline, StandardAugmentSpec,
};
use lesionscreen_core::dataset::{
    find_duplicates, ingest_with_report, make_folds, quality_screen, FoldPlan, Labeling, Manifest,
    QualityConfig, DEFAULT_DHASH_THRESHOLD, NUM_FOLDS,
};
use lesionscreen_core::engine::{
    classifier_head_model, export_reference_model, grad_cam, predict, ModelGraph, DEFAULT_THRESHOLD,
};
use lesionscreen_core::eval::{
    aggregate_and_normalize, confusion_labels, metrics, render_matrix, report_row, summarize_folds,
    summary_row, Averaging, ConfusionMatrix, TABLE_HEADER,
};
use lesionscreen_core::imaging::{crop_resize, decode_image, encode_png};
use lesionscreen_core::label::Label;
use lesionscreen_service::ServiceConfig;
use serde_json::json;

#[derive(Debug, Parser)]
#[command(
    name = "lesionscreen",
    version,
    about = "Skin-lesion screening pipeline"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a manifest from `<root>/<Label>/<image>` folders.
    Ingest {
        #[arg(long)]
        root: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Keep images that pass the blur and size screen.
    Screen {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        root: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = QualityConfig::default().blur_threshold)]
        blur_threshold: f64,
        #[arg(long, default_value_t = QualityConfig::default().min_side_threshold)]
        min_side: u32,
        #[arg(long)]
        force: bool,
    },
    /// Report near-duplicate groups; with --out, keep the first image of each group.
    Dedup {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        root: PathBuf,
        #[arg(long, default_value_t = DEFAULT_DHASH_THRESHOLD)]
        threshold: u32,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Patient-level 70:20:10 fold plan.
    Split {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Number of folds; only 5 is supported.
        #[arg(long, default_value_t = NUM_FOLDS as u32, value_parser = clap::value_parser!(u32).range(5..=5))]
        folds: u32,
        #[arg(long)]
        force: bool,
    },
    /// Write augmented images and their manifest.
    #[command(group(ArgGroup::new("what").args(["grid", "multiplier", "config"]).required(true).multiple(true)))]
    Augment {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        root: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Fold plan; only train and validation images of --fold are augmented.
        #[arg(long, requires = "fold")]
        plan: Option<PathBuf>,
        #[arg(long, requires = "plan")]
        fold: Option<usize>,
        #[arg(long, value_enum)]
        grid: Option<GridChoice>,
        /// Standard augmentation outputs per image, original included.
        #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
        multiplier: Option<u32>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// `augcfg/1` file; --grid, --multiplier and --seed override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Screen one image with a weight file.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
        /// Also write a Grad-CAM overlay PNG here.
        #[arg(long)]
        heatmap: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Confusion matrix and metrics from label files (one `label` or `id<TAB>label` per line).
    Evaluate {
        /// One file per fold; pair with --truth in order.
        #[arg(long, required = true, num_args = 1..)]
        preds: Vec<PathBuf>,
        #[arg(long, required = true, num_args = 1..)]
        truth: Vec<PathBuf>,
        #[arg(long, default_value = "model")]
        name: String,
        #[arg(long, value_enum, default_value_t = AveragingChoice::Macro)]
        averaging: AveragingChoice,
        /// JSON report destination.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Write a deterministic fixture weight file.
    ExportModel {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Architecture::Reference)]
        architecture: Architecture,
        #[arg(long)]
        force: bool,
    },
    /// Run the HTTP service.
    Serve {
        /// `svc/1` config file; LESIONSCREEN_* variables override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum GridChoice {
    Default,
    None,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AveragingChoice {
    Macro,
    Weighted,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Architecture {
    Reference,
    ClassifierHead,
}

/// Domain failure: printed as `error: <code>: <message>`, exit status 1.
#[derive(Debug)]
struct Failure {
    code: String,
    message: String,
}

fn fail(code: impl Into<String>, message: impl Display) -> Failure {
    Failure {
        code: code.into(),
        message: message.to_string(),
    }
}

trait Coded {
    fn code(&self) -> &'static str;
}

macro_rules! coded {
    ($($t:ty),*) => {$(
        impl Coded for $t {
            fn code(&self) -> &'static str {
                <$t>::code(self)
            }
        }
    )*};
}

coded!(
    lesionscreen_core::dataset::DatasetError,
    lesionscreen_core::dataset::FoldError,
    lesionscreen_core::augment::AugmentError,
    lesionscreen_core::engine::EngineError,
    lesionscreen_core::eval::EvalError,
    lesionscreen_core::imaging::ImagingError,
    lesionscreen_service::ServiceError
);

impl<E: Coded + Display> From<E> for Failure {
    fn from(e: E) -> Self {
        fail(e.code(), e)
    }
}

type Result<T> = std::result::Result<T, Failure>;

fn guard_output(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(fail(
            "OutputExists",
            format!("{} exists; pass --force to overwrite", path.display()),
        ));
    }
    Ok(())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| fail("Io", format!("{}: {e}", path.display())))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| fail("Io", format!("{}: {e}", path.display())))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)
            .map_err(|e| fail("Io", format!("{}: {e}", parent.display())))?;
    }
    std::fs::write(path, bytes).map_err(|e| fail("Io", format!("{}: {e}", path.display())))
}

fn class_summary(m: &Manifest) -> String {
    let counts = m.class_counts();
    let patients = m.class_patient_counts();
    Label::ALL
        .iter()
        .map(|l| {
            format!(
                "{}={}/{}",
                l.as_str(),
                counts[l.index()],
                patients[l.index()]
            )
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Labels from a `label` or `id<TAB>label` per-line file.
fn read_labels(path: &Path) -> Result<Vec<(Option<String>, Label)>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (id, label) = match line.split_once('\t') {
            Some((id, label)) => (Some(id.to_string()), label.trim()),
            None => (None, line),
        };
        let label = label
            .parse()
            .map_err(|e| fail("UnknownLabel", format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push((id, label));
    }
    Ok(out)
}

/// Pairs predictions with truth, by id when both files carry ids, else by line.
fn fold_matrix(preds: &Path, truth: &Path) -> Result<ConfusionMatrix> {
    let p = read_labels(preds)?;
    let t = read_labels(truth)?;
    let with_ids = p.iter().chain(&t).all(|(id, _)| id.is_some());
    let (pl, tl): (Vec<Label>, Vec<Label>) = if with_ids {
        let truth_by_id: std::collections::HashMap<&str, Label> = t
            .iter()
            .map(|(id, l)| (id.as_deref().expect("checked"), *l))
            .collect();
        if truth_by_id.len() != t.len() || p.len() != t.len() {
            return Err(fail("LengthMismatch", "prediction and truth ids differ"));
        }
        p.iter()
            .map(|(id, l)| {
                let id = id.as_deref().expect("checked");
                truth_by_id
                    .get(id)
                    .map(|tl| (*l, *tl))
                    .ok_or_else(|| fail("LengthMismatch", format!("no truth for id {id}")))
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .unzip()
    } else {
        (
            p.into_iter().map(|x| x.1).collect(),
            t.into_iter().map(|x| x.1).collect(),
        )
    };
    Ok(confusion_labels(&pl, &tl)?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest { root, out, force } => {
            guard_output(&out, force)?;
            let outcome = ingest_with_report(&root, &Labeling::default())?;
            for s in &outcome.skipped {
                eprintln!("skipped undecodable {s}");
            }
            outcome.manifest.save(&out)?;
            println!(
                "ingested {} images, {} patients: {}",
                outcome.manifest.len(),
                outcome.manifest.patient_count(),
                class_summary(&outcome.manifest)
            );
        }
        Command::Screen {
            manifest,
            root,
            out,
            blur_threshold,
            min_side,
            force,
        } => {
            guard_output(&out, force)?;
            let m = Manifest::load(&manifest)?;
            let cfg = QualityConfig {
                blur_threshold,
                min_side_threshold: min_side,
            };
            let mut kept = Vec::new();
            for r in &m.records {
                let report = quality_screen(&r.load(&root)?, &cfg);
                if report.passed {
                    let mut r = r.clone();
                    r.screened = true;
                    kept.push(r);
                } else {
                    println!(
                        "rejected\t{}\tblur={:.2}\tmin_side={}",
                        r.id, report.blur_score, report.min_side
                    );
                }
            }
            let kept = Manifest::new(kept)?;
            kept.save(&out)?;
            println!("kept {} of {} images", kept.len(), m.len());
        }
        Command::Dedup {
            manifest,
            root,
            threshold,
            out,
            force,
        } => {
            if let Some(o) = &out {
                guard_output(o, force)?;
            }
            let m = Manifest::load(&manifest)?;
            let groups = find_duplicates(&m, &root, threshold)?;
            let mut dropped = std::collections::HashSet::new();
            for g in &groups {
                println!("group\t{}", g.join("\t"));
                dropped.extend(g.iter().skip(1).cloned());
            }
            println!(
                "{} near-duplicate groups, {} redundant images",
                groups.len(),
                dropped.len()
            );
            if let Some(o) = out {
                let kept = m
                    .records
                    .iter()
                    .filter(|r| !dropped.contains(&r.id))
                    .cloned()
                    .collect();
                Manifest::new(kept)?.save(&o)?;
            }
        }
        Command::Split {
            manifest,
            seed,
            out,
            folds: _,
            force,
        } => {
            guard_output(&out, force)?;
            let m = Manifest::load(&manifest)?;
            let plan = make_folds(&m, seed)?;
            write(&out, plan.to_text())?;
            for f in 0..plan.folds.len() {
                let c = plan.image_counts(&m, f);
                let totals: [usize; 3] = std::array::from_fn(|p| c.iter().map(|row| row[p]).sum());
                println!(
                    "fold {f}: train={} val={} test={} images",
                    totals[0], totals[1], totals[2]
                );
            }
        }
        Command::Augment {
            manifest,
            root,
            out,
            plan,
            fold,
            grid,
            multiplier,
            seed,
            config,
            force,
        } => {
            if out.exists()
                && std::fs::read_dir(&out)
                    .map(|mut d| d.next().is_some())
                    .unwrap_or(true)
            {
                guard_output(&out, force)?;
            }
            let mut pipeline = match &config {
                Some(path) => {
                    let cfg = AugmentConfig::parse(&read_text(path)?)?;
                    AugmentPipeline {
                        standard: cfg.standard,
                        grid: cfg.grid,
                    }
                }
                None => AugmentPipeline::default(),
            };
            match grid {
                Some(GridChoice::Default) => pipeline.grid = Some(default_grid()),
                Some(GridChoice::None) => pipeline.grid = None,
                None => {}
            }
            if let Some(k) = multiplier {
                pipeline.standard = Some(StandardAugmentSpec {
                    multiplier: k,
                    ..pipeline.standard.unwrap_or_default()
                });
            }
            if let Some(s) = pipeline.standard.as_mut() {
                if config.is_none() || seed != 0 {
                    s.seed = seed;
                }
            }
            if pipeline.standard.is_none() && pipeline.grid.is_none() {
                return Err(fail(
                    "InvalidSpec",
                    "nothing to do: no grid and no standard augmentation",
                ));
            }
            let m = Manifest::load(&manifest)?;
            let fold_plan = match &plan {
                Some(p) => Some(FoldPlan::parse(&read_text(p)?)?),
                None => None,
            };
            let selection = fold_plan.as_ref().zip(fold);
            let aug = augment_corpus(&m, &root, selection, &pipeline, &out)?;
            println!(
                "wrote {} images ({} per input) and {}",
                aug.len(),
                pipeline.fan_out(),
                out.join("augmented.manifest").display()
            );
        }
        Command::Predict {
            model,
            image,
            threshold,
            heatmap,
            force,
        } => {
            if !(0.0..=1.0).contains(&threshold) {
                return Err(fail(
                    "InvalidThreshold",
                    format!("{threshold} outside [0, 1]"),
                ));
            }
            if let Some(h) = &heatmap {
                guard_output(h, force)?;
            }
            let graph = ModelGraph::load(&read(&model)?)?;
            let raster = decode_image(&read(&image)?)?;
            let p = predict(&graph, &raster, threshold)?;
            if let Some(h) = heatmap {
                let map = grad_cam(&graph, &raster, p.argmax)?;
                let base = crop_resize(&raster, graph.input_side() as u32)?;
                write(&h, encode_png(&map.overlay_red(&base, 0.5)?)?)?;
            }
            let probabilities: serde_json::Map<String, serde_json::Value> = graph
                .class_names()
                .iter()
                .zip(&p.probabilities)
                .map(|(n, v)| (n.clone(), json!(v)))
                .collect();
            let out = json!({
                "probabilities": probabilities,
                "argmax_label": p.argmax_label,
                "mpox_probability": p.mpox_probability,
                "suspected_mpox": p.suspected_mpox,
                "model_id": graph.model_id(),
            });
            println!("{}", serde_json::to_string_pretty(&out).expect("json"));
        }
        Command::Evaluate {
            preds,
            truth,
            name,
            averaging,
            out,
            force,
        } => {
            if preds.len() != truth.len() {
                return Err(fail(
                    "LengthMismatch",
                    format!(
                        "{} prediction files but {} truth files",
                        preds.len(),
                        truth.len()
                    ),
                ));
            }
            if let Some(o) = &out {
                guard_output(o, force)?;
            }
            let avg = match averaging {
                AveragingChoice::Macro => Averaging::Macro,
                AveragingChoice::Weighted => Averaging::Weighted,
            };
            let cms = preds
                .iter()
                .zip(&truth)
                .map(|(p, t)| fold_matrix(p, t))
                .collect::<Result<Vec<_>>>()?;
            let reports = cms
                .iter()
                .map(metrics)
                .collect::<std::result::Result<Vec<_>, _>>()?;
            println!("{TABLE_HEADER}");
            let summary = if reports.len() == 1 {
                println!("{}", report_row(&name, &reports[0], avg));
                None
            } else {
                let s = summarize_folds(&reports)?;
                println!("{}", summary_row(&name, &s, avg));
                Some(s)
            };
            let agg = aggregate_and_normalize(&cms);
            print!("{}", render_matrix(&agg));
            if let Some(o) = out {
                let report = json!({
                    "name": name,
                    "folds": reports,
                    "summary": summary,
                    "confusion": agg,
                });
                write(
                    &o,
                    serde_json::to_string_pretty(&report).expect("json") + "\n",
                )?;
            }
        }
        Command::ExportModel {
            seed,
            out,
            architecture,
            force,
        } => {
            guard_output(&out, force)?;
            let bytes = match architecture {
                Architecture::Reference => export_reference_model(seed),
                Architecture::ClassifierHead => classifier_head_model(seed).to_bytes(),
            };
            write(&out, &bytes)?;
            println!("{}", ModelGraph::load(&bytes)?.model_id());
        }
        Command::Serve { config, model } => {
            let mut cfg = ServiceConfig::load(config.as_deref())?;
            if model.is_some() {
                cfg.model_path = model;
            }
            tracing_subscriber::fmt()
                .with_env_filter(
                    tracing_subscriber::EnvFilter::try_from_default_env()
                        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
                )
                .init();
            let rt = tokio::runtime::Runtime::new().map_err(|e| fail("Io", e))?;
            rt.block_on(lesionscreen_service::serve(cfg))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}: {}", f.code, f.message.replace('\n', " "));
            ExitCode::from(1)
        }
    }
}
