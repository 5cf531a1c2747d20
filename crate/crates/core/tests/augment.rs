use lesionscreen_core::augment::{
    augment_corpus, color_space_augment, default_grid, parent_id, standard_augment, AugmentConfig,
    AugmentOp, AugmentPipeline, AugmentationGrid, StandardAugmentSpec,
};
use lesionscreen_core::dataset::{
    make_folds, materialize_fixture, msld_v2_fixture, synthetic_lesion, Manifest,
};
use lesionscreen_core::label::Label;
use lesionscreen_core::Raster;
use sha2::{Digest, Sha256};
use std::collections::BTreeSet;
use std::time::Instant;

fn max_diff(a: &Raster, b: &Raster) -> i32 {
    a.pixels()
        .iter()
        .zip(b.pixels())
        .flat_map(|(p, q)| (0..3).map(move |c| (p[c] as i32 - q[c] as i32).abs()))
        .max()
        .unwrap()
}

#[test]
fn grid_cardinality_and_identity_on_twenty_images() {
    let start = Instant::now();
    let grid = default_grid();
    let identity = (0..grid.len())
        .find(|&i| {
            let (h, s, v) = grid.cell(i);
            grid.hue_shifts[h] == 0.0
                && grid.saturation_scales[s] == 1.0
                && grid.value_scales[v] == 1.0
        })
        .unwrap();
    for n in 0..20u64 {
        let img = synthetic_lesion(n, Label::ALL[n as usize % 6], 64);
        let out = color_space_augment(&img, &grid).unwrap();
        assert_eq!(out.len(), 180);
        assert!(out.iter().all(|r| (r.width(), r.height()) == (64, 64)));
        assert!(max_diff(&out[identity], &img) <= 1);
    }
    assert!(start.elapsed().as_secs_f64() < 60.0);
}

fn digest_all(images: &[Raster]) -> Vec<u8> {
    let mut h = Sha256::new();
    for r in images {
        h.update(r.width().to_le_bytes());
        for p in r.pixels() {
            h.update(p);
        }
    }
    h.finalize().to_vec()
}

#[test]
fn standard_multiplier_fourteen_on_fixture_is_exact_and_deterministic() {
    let m = msld_v2_fixture();
    let spec = StandardAugmentSpec {
        seed: 2024,
        ..StandardAugmentSpec::default()
    };
    let run = || {
        let mut all = Vec::new();
        for (n, r) in m.records.iter().enumerate() {
            let img = synthetic_lesion(n as u64, r.label, 24);
            let out = standard_augment(&img, &spec).unwrap();
            assert_eq!(out[0], img);
            all.extend(out);
        }
        all
    };
    let first = run();
    assert_eq!(first.len(), 10_570);
    assert_eq!(digest_all(&first), digest_all(&run()));
}

#[test]
fn reflection_twice_is_identity() {
    let img = synthetic_lesion(9, Label::Hfmd, 19);
    let spec = StandardAugmentSpec {
        ops: vec![AugmentOp::Reflection],
        multiplier: 2,
        ..StandardAugmentSpec::default()
    };
    let once = standard_augment(&img, &spec).unwrap().pop().unwrap();
    assert_ne!(once, img);
    let twice = standard_augment(&once, &spec).unwrap().pop().unwrap();
    assert_eq!(twice, img);
}

/// Patients 1-4 of every class from the reference-shaped fixture.
fn small_manifest() -> Manifest {
    let records = msld_v2_fixture()
        .records
        .into_iter()
        .filter(|r| {
            let n: usize = r.patient_id.rsplit('p').next().unwrap().parse().unwrap();
            n <= 4
        })
        .collect();
    Manifest::new(records).unwrap()
}

#[test]
fn corpus_augmentation_never_touches_test_patients() {
    let m = small_manifest();
    let src = tempfile::tempdir().unwrap();
    materialize_fixture(&m, src.path(), 16).unwrap();
    let plan = make_folds(&m, 5).unwrap();
    let pipeline = AugmentPipeline {
        standard: Some(StandardAugmentSpec {
            multiplier: 3,
            ..StandardAugmentSpec::default()
        }),
        grid: Some(AugmentationGrid {
            hue_shifts: vec![0.0, 120.0],
            saturation_scales: vec![1.0],
            value_scales: vec![1.0],
        }),
    };
    assert_eq!(pipeline.fan_out(), 6);
    for fold in [0, 3] {
        let out = tempfile::tempdir().unwrap();
        let aug =
            augment_corpus(&m, src.path(), Some((&plan, fold)), &pipeline, out.path()).unwrap();
        let f = &plan.folds[fold];
        let eligible: Vec<_> = m
            .records
            .iter()
            .filter(|r| !f.test.contains(&r.patient_id))
            .collect();
        assert_eq!(aug.len(), eligible.len() * 6);
        let parents: BTreeSet<&str> = aug.records.iter().map(|r| parent_id(&r.id)).collect();
        for r in &aug.records {
            assert!(!f.test.contains(&r.patient_id), "{} leaked", r.id);
            let parent = m.get(parent_id(&r.id)).unwrap();
            assert_eq!((parent.label, &parent.patient_id), (r.label, &r.patient_id));
            assert!(out.path().join(&r.path).exists());
        }
        assert_eq!(parents.len(), eligible.len());
        let saved = Manifest::load(&out.path().join("augmented.manifest")).unwrap();
        assert_eq!(saved, aug);
    }
}

#[test]
fn corpus_augmentation_is_reproducible() {
    let m = Manifest::new(small_manifest().records[..5].to_vec()).unwrap();
    let src = tempfile::tempdir().unwrap();
    materialize_fixture(&m, src.path(), 16).unwrap();
    let pipeline = AugmentPipeline {
        standard: Some(StandardAugmentSpec::default()),
        grid: None,
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ma = augment_corpus(&m, src.path(), None, &pipeline, a.path()).unwrap();
    let mb = augment_corpus(&m, src.path(), None, &pipeline, b.path()).unwrap();
    assert_eq!(ma, mb);
    assert_eq!(ma.len(), 5 * 14);
    for r in &ma.records {
        assert_eq!(
            std::fs::read(a.path().join(&r.path)).unwrap(),
            std::fs::read(b.path().join(&r.path)).unwrap()
        );
    }
}

#[test]
fn composed_pipeline_fans_out_fourteen_by_one_eighty() {
    let p = AugmentPipeline {
        standard: Some(StandardAugmentSpec::default()),
        grid: Some(default_grid()),
    };
    assert_eq!(p.fan_out(), 14 * 180);
}

#[test]
fn config_file_round_trips() {
    let cfg = AugmentConfig::new(Some(StandardAugmentSpec::default()), Some(default_grid()));
    assert_eq!(AugmentConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    assert!(AugmentConfig::parse("format = \"augcfg/2\"").is_err());
}
