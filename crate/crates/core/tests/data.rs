use std::collections::{BTreeSet, VecDeque};

use dadu::data::{self, LoadOptions, PhantomParams};
use dadu::{Error, Shape4, Tensor4};
use proptest::prelude::*;

#[test]
fn phantom_is_seed_deterministic() {
    let p = PhantomParams::with_seed(42, 64);
    assert_eq!(data::synth_phantom(&p).unwrap(), data::synth_phantom(&p).unwrap());
    let q = PhantomParams::with_seed(43, 64);
    assert_ne!(data::synth_phantom(&p).unwrap().mask, data::synth_phantom(&q).unwrap().mask);
}

#[test]
fn noiseless_phantom_intensities_follow_labels() {
    let p = PhantomParams {
        noise_sigma: 0.0,
        ..PhantomParams::with_seed(9, 64)
    };
    let s = data::synth_phantom(&p).unwrap();
    for (px, &l) in s.mask.labels().iter().enumerate() {
        assert_eq!(s.image.values()[px], data::INTENSITY[l as usize]);
    }
}

#[test]
fn every_phantom_contains_all_classes() {
    for seed in 0..100 {
        let s = data::synth_phantom(&PhantomParams::with_seed(seed, 64)).unwrap();
        for c in 1..4 {
            assert!(s.mask.count(c) > 0, "seed {seed} lacks class {c}");
        }
    }
}

fn neighbours(h: usize, w: usize, r: usize, c: usize) -> Vec<(usize, usize)> {
    let mut v = Vec::new();
    if r > 0 {
        v.push((r - 1, c));
    }
    if r + 1 < h {
        v.push((r + 1, c));
    }
    if c > 0 {
        v.push((r, c - 1));
    }
    if c + 1 < w {
        v.push((r, c + 1));
    }
    v
}

#[test]
fn annulus_separates_lv_from_rv_and_is_connected() {
    for seed in 0..30 {
        let s = data::synth_phantom(&PhantomParams::with_seed(seed, 64)).unwrap();
        let m = &s.mask;
        let (h, w) = (m.height(), m.width());
        for r in 0..h {
            for c in 0..w {
                if m.get(r, c) == data::LV {
                    for (rr, cc) in neighbours(h, w, r, c) {
                        assert_ne!(m.get(rr, cc), data::RV, "seed {seed}");
                    }
                }
            }
        }
        // flood fill of the annulus reaches every myocardium pixel
        let myo: Vec<(usize, usize)> = (0..h * w)
            .map(|i| (i / w, i % w))
            .filter(|&(r, c)| m.get(r, c) == data::LMYO)
            .collect();
        let mut seen = BTreeSet::from([myo[0]]);
        let mut queue = VecDeque::from([myo[0]]);
        while let Some((r, c)) = queue.pop_front() {
            for n in neighbours(h, w, r, c) {
                if m.get(n.0, n.1) == data::LMYO && seen.insert(n) {
                    queue.push_back(n);
                }
            }
        }
        assert_eq!(seen.len(), myo.len(), "seed {seed}");
    }
}

#[test]
fn radius_invariant_rejected() {
    let p = PhantomParams {
        lv_radius: (10.0, 25.0),
        myo_thickness: (3.0, 8.0),
        ..PhantomParams::default()
    };
    assert!(matches!(data::synth_phantom(&p), Err(Error::Config(_))));
}

#[test]
fn one_hot_properties() {
    let s = data::synth_phantom(&PhantomParams::with_seed(5, 32)).unwrap();
    let t: Tensor4<f64> = data::one_hot(&s.mask, 4).unwrap();
    assert_eq!(t.shape(), Shape4::new(1, 4, 32, 32).unwrap());
    for r in 0..32 {
        for c in 0..32 {
            let sum: f64 = (0..4).map(|k| t.at(0, k, r, c)).sum();
            assert_eq!(sum, 1.0);
        }
    }
    let back = dadu::network::argmax_masks(&t).unwrap();
    assert_eq!(back[0].labels(), s.mask.labels());
    for k in 0..4u8 {
        let n = t.values()[k as usize * 1024..(k as usize + 1) * 1024].iter().filter(|&&v| v == 1.0).count();
        assert_eq!(n, s.mask.count(k));
    }
    assert!(data::one_hot::<f64>(&s.mask, 3).is_err());
}

#[test]
fn png_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let samples = data::phantom_set(3, 64, 7, 0.05).unwrap();
    data::write_dataset(dir.path(), &samples).unwrap();
    let loaded = data::load_dataset(dir.path(), &LoadOptions::default()).unwrap();
    assert_eq!(loaded.len(), 3);
    for (a, b) in samples.iter().zip(&loaded) {
        assert_eq!(a.case_id, b.case_id);
        assert_eq!(a.mask, b.mask);
        for (x, y) in a.image.values().iter().zip(b.image.values()) {
            assert!((x - y).abs() <= 1.0 / 255.0 + 1e-6, "{x} vs {y}");
        }
    }
    let again = data::load_dataset(dir.path(), &LoadOptions::default()).unwrap();
    assert_eq!(loaded, again);
}

#[test]
fn loader_normalizes_and_resizes() {
    let dir = tempfile::tempdir().unwrap();
    let samples = data::phantom_set(1, 64, 3, 0.05).unwrap();
    data::write_dataset(dir.path(), &samples).unwrap();
    let opts = LoadOptions {
        extent: Some((32, 48)),
        ..LoadOptions::default()
    };
    let s = &data::load_dataset(dir.path(), &opts).unwrap()[0];
    assert_eq!((s.height(), s.width()), (32, 48));
    let v = s.image.values();
    assert_eq!(v.iter().cloned().fold(f32::INFINITY, f32::min), 0.0);
    assert_eq!(v.iter().cloned().fold(f32::NEG_INFINITY, f32::max), 1.0);
    assert!(s.mask.labels().iter().all(|&l| l < 4));
}

#[test]
fn black_image_loads_as_zeros() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("black.png");
    let mask = dir.path().join("mask.png");
    data::write_gray_png(&img, 4, 4, vec![0; 16]).unwrap();
    data::write_gray_png(&mask, 4, 4, vec![0; 16]).unwrap();
    let s = data::load_sample(&img, &mask, &LoadOptions::default()).unwrap();
    assert!(s.image.values().iter().all(|&v| v == 0.0));
}

#[test]
fn loader_errors_are_distinct() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("img.png");
    let mask = dir.path().join("mask.png");
    data::write_gray_png(&img, 4, 4, vec![10; 16]).unwrap();
    let mut labels = vec![0u8; 16];
    labels[5] = 5;
    data::write_gray_png(&mask, 4, 4, labels).unwrap();
    let opts = LoadOptions::default();
    assert!(matches!(
        data::load_sample(&img, &mask, &opts),
        Err(Error::MaskLabel { value: 5, .. })
    ));
    let remap = LoadOptions {
        remap: [(5u8, 3u8)].into_iter().collect(),
        ..LoadOptions::default()
    };
    let s = data::load_sample(&img, &mask, &remap).unwrap();
    assert_eq!(s.mask.get(1, 1), 3);

    let missing = dir.path().join("nope.png");
    assert!(matches!(data::load_sample(&missing, &mask, &opts), Err(Error::Missing(_))));
    let junk = dir.path().join("junk.png");
    std::fs::write(&junk, b"not a png").unwrap();
    assert!(matches!(data::load_sample(&junk, &mask, &opts), Err(Error::Decode { .. })));
    let small = dir.path().join("small.png");
    data::write_gray_png(&small, 2, 2, vec![0; 4]).unwrap();
    assert!(matches!(
        data::load_sample(&img, &small, &opts),
        Err(Error::ExtentMismatch { .. })
    ));
    assert!(matches!(
        data::load_dataset(&dir.path().join("absent"), &opts),
        Err(Error::Missing(_))
    ));
}

#[test]
fn manifest_pins_order() {
    let dir = tempfile::tempdir().unwrap();
    let samples = data::phantom_set(3, 32, 1, 0.0).unwrap();
    data::write_dataset(dir.path(), &samples).unwrap();
    std::fs::write(dir.path().join(data::MANIFEST), "case0002\ncase0000\n").unwrap();
    let ids: Vec<String> = data::load_dataset(dir.path(), &LoadOptions::default())
        .unwrap()
        .into_iter()
        .map(|s| s.case_id)
        .collect();
    assert_eq!(ids, ["case0002", "case0000"]);
    std::fs::remove_file(dir.path().join(data::MANIFEST)).unwrap();
    assert_eq!(data::list_cases(dir.path()).unwrap(), ["case0000", "case0001", "case0002"]);
}

#[test]
fn hundred_cases_make_folds_of_twenty() {
    let ids: Vec<String> = (0..100).map(data::case_id).collect();
    let split = data::kfold_split(&ids, 5, 3).unwrap();
    assert_eq!(split.sizes(), vec![20; 5]);
}

#[test]
fn fold_split_is_order_independent() {
    let ids: Vec<String> = (0..17).map(data::case_id).collect();
    let mut rev = ids.clone();
    rev.reverse();
    assert_eq!(data::kfold_split(&ids, 5, 8).unwrap(), data::kfold_split(&rev, 5, 8).unwrap());
    assert!(data::kfold_split(&[ids[0].clone(), ids[0].clone()], 5, 0).is_err());
}

proptest! {
    #[test]
    fn folds_partition_cases(n in 1usize..60, k in 2usize..8, seed in any::<u64>()) {
        let ids: Vec<String> = (0..n).map(data::case_id).collect();
        let split = data::kfold_split(&ids, k, seed).unwrap();
        let sizes = split.sizes();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        let mut union = BTreeSet::new();
        for f in 0..k {
            for id in split.fold(f) {
                prop_assert!(union.insert(id));
            }
        }
        prop_assert_eq!(union.len(), n);
        let (train, val) = split.train_val(0);
        prop_assert_eq!(train.len() + val.len(), n);
    }

    #[test]
    fn normalize_spans_unit_interval(v in proptest::collection::vec(-5.0f64..5.0, 2..40)) {
        let n = v.len();
        let t = Tensor4::from_vec(Shape4::new(1, 1, 1, n).unwrap(), v.clone()).unwrap();
        let out = data::normalize(&t);
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            prop_assert!(out.values().iter().any(|&x| x == 0.0));
            prop_assert!(out.values().iter().all(|&x| (0.0..=1.0 + 1e-12).contains(&x)));
        } else {
            prop_assert!(out.values().iter().all(|&x| x == 0.0));
        }
    }
}
