use lesionscreen_core::dataset::{make_folds, ImageRecord, Manifest};
use lesionscreen_core::engine::softmax;
use lesionscreen_core::eval::{confusion, metrics};
use lesionscreen_core::imaging::{crop_resize, hsv_to_rgb, rgb_to_hsv, HsvPixel};
use lesionscreen_core::label::Label;
use lesionscreen_core::Raster;
use proptest::prelude::*;
use std::collections::BTreeSet;

fn within_one(a: [u8; 3], b: [u8; 3]) -> bool {
    (0..3).all(|c| (a[c] as i32 - b[c] as i32).abs() <= 1)
}

proptest! {
    #[test]
    fn hsv_round_trip(rgb in any::<[u8; 3]>()) {
        prop_assert!(within_one(hsv_to_rgb(rgb_to_hsv(rgb)), rgb));
    }

    #[test]
    fn hue_rotation_by_120_permutes_channels(rgb in any::<[u8; 3]>()) {
        let p = rgb_to_hsv(rgb);
        let rotated = hsv_to_rgb(HsvPixel::new(p.h + 120.0, p.s, p.v));
        prop_assert!(within_one(rotated, [rgb[2], rgb[0], rgb[1]]), "{rgb:?} -> {rotated:?}");
    }

    #[test]
    fn canonical_hsv_ranges(h in -1e4f64..1e4, s in -2.0f64..2.0, v in -2.0f64..2.0) {
        let p = HsvPixel::new(h, s, v);
        prop_assert!((0.0..360.0).contains(&p.h));
        prop_assert!((0.0..=1.0).contains(&p.s) && (0.0..=1.0).contains(&p.v));
    }

    #[test]
    fn crop_resize_yields_square(w in 1u32..120, h in 1u32..120, side in 1u32..70) {
        let r = Raster::from_fn(w, h, |x, y| [x as u8, y as u8, 7]);
        let out = crop_resize(&r, side).unwrap();
        prop_assert_eq!((out.width(), out.height()), (side, side));
    }

    #[test]
    fn softmax_is_shift_invariant(logits in prop::array::uniform6(-50.0f32..50.0), shift in -100.0f32..100.0) {
        let shifted: Vec<f32> = logits.iter().map(|v| v + shift).collect();
        let a = softmax(&logits);
        let b = softmax(&shifted);
        prop_assert!((a.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-5);
        }
        let argmax = |p: &[f64]| p.iter().enumerate().fold(0, |best, (i, &v)| if v > p[best] { i } else { best });
        prop_assert_eq!(argmax(&a), argmax(&b));
    }

    #[test]
    fn confusion_ignores_sample_order(
        pairs in prop::collection::vec((0usize..6, 0usize..6), 1..80),
        rot in 0usize..80,
    ) {
        let (p, t): (Vec<_>, Vec<_>) = pairs.iter().copied().unzip();
        let mut shuffled = pairs.clone();
        let k = rot % shuffled.len();
        shuffled.rotate_left(k);
        shuffled.reverse();
        let (p2, t2): (Vec<_>, Vec<_>) = shuffled.into_iter().unzip();
        prop_assert_eq!(confusion(&p, &t).unwrap(), confusion(&p2, &t2).unwrap());
    }

    #[test]
    fn macro_f1_invariant_under_relabeling(
        pairs in prop::collection::vec((0usize..6, 0usize..6), 1..80),
        perm in Just([0usize, 1, 2, 3, 4, 5]).prop_shuffle(),
    ) {
        let (p, t): (Vec<_>, Vec<_>) = pairs.iter().copied().unzip();
        let p2: Vec<_> = p.iter().map(|&i| perm[i]).collect();
        let t2: Vec<_> = t.iter().map(|&i| perm[i]).collect();
        let a = metrics(&confusion(&p, &t).unwrap()).unwrap();
        let b = metrics(&confusion(&p2, &t2).unwrap()).unwrap();
        prop_assert!((a.macro_f1 - b.macro_f1).abs() <= 1e-12);
        prop_assert!((a.accuracy - b.accuracy).abs() <= 1e-12);
    }

    #[test]
    fn folds_partition_every_patient(sizes in prop::collection::vec((0usize..6, 1usize..4), 10..40), seed in any::<u64>()) {
        let mut records = Vec::new();
        for (p, (class, n)) in sizes.iter().enumerate() {
            for k in 0..*n {
                let id = format!("p{p}-{k}");
                records.push(ImageRecord::new(id.clone(), format!("x/{id}.png"), Label::ALL[*class], format!("p{p}")));
            }
        }
        let m = Manifest::new(records).unwrap();
        let plan = make_folds(&m, seed).unwrap();
        for f in &plan.folds {
            prop_assert!(f.train.is_disjoint(&f.val) && f.train.is_disjoint(&f.test) && f.val.is_disjoint(&f.test));
            let all: BTreeSet<String> = f.train.iter().chain(&f.val).chain(&f.test).cloned().collect();
            prop_assert_eq!(&all, &m.patients());
        }
    }

    #[test]
    fn manifest_text_round_trips(
        rows in prop::collection::vec(("[a-z0-9-]{1,12}", 0usize..6, "[a-z0-9]{1,6}", any::<bool>()), 1..20),
    ) {
        let mut seen = BTreeSet::new();
        let records: Vec<ImageRecord> = rows
            .into_iter()
            .filter(|r| seen.insert(r.0.clone()))
            .map(|(id, c, patient, screened)| {
                let mut r = ImageRecord::new(id.clone(), format!("{}/{id}.png", Label::ALL[c].as_str()), Label::ALL[c], patient);
                r.screened = screened;
                r
            })
            .collect();
        let m = Manifest::new(records).unwrap();
        let text = m.to_text();
        let back = Manifest::parse(&text).unwrap();
        prop_assert_eq!(&back, &m);
        prop_assert_eq!(back.to_text(), text);
    }
}
