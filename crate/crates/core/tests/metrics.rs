mod common;

use common::shape;
use dadu::data;
use dadu::loss::{self, SupervisionWeights, DICE_SMOOTH};
use dadu::metrics::{self, ContourSet, LabelMask};
use dadu::{Tape, Tensor4};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_mask(h: usize, w: usize, rng: &mut impl Rng) -> LabelMask {
    let labels = (0..h * w).map(|_| rng.random_range(0..4u8)).collect();
    LabelMask::new(h, w, 4, labels).unwrap()
}

/// A few filled rectangles so contours are not all pixels.
fn blocky_mask(h: usize, w: usize, rng: &mut impl Rng) -> LabelMask {
    let mut m = LabelMask::filled(h, w, 4, 0).unwrap();
    for _ in 0..4 {
        let c = rng.random_range(1..4u8);
        let (r0, c0) = (rng.random_range(0..h), rng.random_range(0..w));
        let (r1, c1) = (rng.random_range(r0..h), rng.random_range(c0..w));
        for r in r0..=r1 {
            for s in c0..=c1 {
                m.set(r, s, c);
            }
        }
    }
    m
}

fn set(points: &[(usize, usize)]) -> ContourSet {
    ContourSet { points: points.to_vec() }
}

#[test]
fn dice_anchors() {
    let mut x = LabelMask::filled(4, 4, 4, 0).unwrap();
    let mut y = x.clone();
    for (r, c) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
        x.set(r, c, 1);
    }
    for (r, c) in [(0, 0), (0, 1), (3, 2), (3, 3)] {
        y.set(r, c, 1);
    }
    assert_eq!(metrics::dice_coefficient(&x, &x, 1).unwrap(), 1.0);
    assert_eq!(metrics::dice_coefficient(&x, &y, 1).unwrap(), 0.5);
    let mut z = LabelMask::filled(4, 4, 4, 0).unwrap();
    z.set(3, 0, 1);
    assert_eq!(metrics::dice_coefficient(&x, &z, 1).unwrap(), 0.0);
    assert_eq!(metrics::dice_coefficient(&x, &z, 2).unwrap(), 1.0);
    let other = LabelMask::filled(4, 5, 4, 0).unwrap();
    assert!(metrics::dice_coefficient(&x, &other, 1).is_err());
}

#[test]
fn dice_matches_counting_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let (x, y) = (random_mask(6, 7, &mut rng), random_mask(6, 7, &mut rng));
        for c in 1..4 {
            assert_eq!(metrics::dice_coefficient(&x, &y, c).unwrap(), common::dice(&x, &y, c));
        }
    }
}

#[test]
fn contour_examples() {
    let full = LabelMask::filled(5, 6, 4, 2).unwrap();
    let ring = metrics::extract_contour(&full, 2);
    assert_eq!(ring.len(), 2 * 6 + 2 * 3);
    assert!(ring.points.iter().all(|&(r, c)| r == 0 || c == 0 || r == 4 || c == 5));

    let mut one = LabelMask::filled(8, 8, 4, 0).unwrap();
    one.set(4, 5, 3);
    assert_eq!(metrics::extract_contour(&one, 3).points, vec![(4, 5)]);

    let mut sq = LabelMask::filled(8, 8, 4, 0).unwrap();
    for r in 2..5 {
        for c in 3..6 {
            sq.set(r, c, 1);
        }
    }
    let mut got = metrics::extract_contour(&sq, 1).points;
    got.sort();
    let mut want = common::contour(&sq, 1);
    want.sort();
    assert_eq!(got.len(), 8);
    assert_eq!(got, want);
    assert!(!got.contains(&(3, 4)));
}

#[test]
fn contour_matches_neighbour_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let m = blocky_mask(9, 11, &mut rng);
        for c in 1..4 {
            let mut got = metrics::extract_contour(&m, c).points;
            got.sort();
            let mut want = common::contour(&m, c);
            want.sort();
            assert_eq!(got, want);
        }
    }
}

#[test]
fn hausdorff_anchors() {
    let a = set(&[(0, 0), (2, 2)]);
    assert_eq!(metrics::hausdorff_directed(&a, &a), Some(0.0));
    assert_eq!(metrics::hausdorff_directed(&set(&[(0, 0)]), &set(&[(3, 4)])), Some(5.0));
    assert_eq!(metrics::hausdorff_directed(&set(&[]), &a), None);
    assert_eq!(metrics::hausdorff_symmetric(&a, &set(&[])).symmetric, None);

    // a is a subset of b; b's extra point lies 5 from a
    let a = set(&[(0, 0), (0, 1)]);
    let b = set(&[(0, 0), (0, 1), (3, 5)]);
    let r = metrics::hausdorff_symmetric(&a, &b);
    assert_eq!(r.a_to_b, Some(0.0));
    assert_eq!(r.b_to_a, Some(5.0));
    assert_eq!(r.symmetric, Some(5.0));
    assert_eq!(metrics::hausdorff_symmetric(&b, &a).symmetric, Some(5.0));
}

#[test]
fn hausdorff_matches_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let pts = |rng: &mut ChaCha8Rng| -> Vec<(usize, usize)> {
            let n = rng.random_range(1..=20);
            (0..n).map(|_| (rng.random_range(0..32), rng.random_range(0..32))).collect()
        };
        let (a, b) = (pts(&mut rng), pts(&mut rng));
        let r = metrics::hausdorff_symmetric(&set(&a), &set(&b));
        assert_eq!(r.a_to_b, common::hd_directed(&a, &b));
        assert_eq!(r.b_to_a, common::hd_directed(&b, &a));
        assert_eq!(r.symmetric, common::hd_symmetric(&a, &b));
    }
}

#[test]
fn evaluate_case_perfect_missing_and_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let truth = blocky_mask(12, 12, &mut rng);
    let perfect = metrics::evaluate_case(&truth, &truth).unwrap();
    for c in &perfect.per_class {
        assert_eq!(c.dsc, 1.0);
        assert_eq!(c.hd.symmetric, Some(0.0));
    }

    let s = data::synth_phantom(&data::PhantomParams::with_seed(5, 32)).unwrap();
    let mut pred = s.mask.clone();
    for r in 0..32 {
        for c in 0..32 {
            if pred.get(r, c) == data::RV {
                pred.set(r, c, 0);
            }
        }
    }
    let m = metrics::evaluate_case(&pred, &s.mask).unwrap();
    assert_eq!(m.per_class[0].dsc, 0.0);
    assert_eq!(m.per_class[0].hd.symmetric, None);
    assert_eq!(m.mean_hd, Some(0.0));

    for _ in 0..50 {
        let (p, t) = (blocky_mask(10, 10, &mut rng), blocky_mask(10, 10, &mut rng));
        let m = metrics::evaluate_case(&p, &t).unwrap();
        for cm in &m.per_class {
            let c = cm.class_id;
            assert_eq!(cm.dsc, common::dice(&p, &t, c));
            let (pc, tc) = (common::contour(&p, c), common::contour(&t, c));
            let want = if pc.is_empty() && tc.is_empty() { Some(0.0) } else { common::hd_symmetric(&pc, &tc) };
            assert_eq!(cm.hd.symmetric, want);
        }
        let mean = m.per_class.iter().map(|c| c.dsc).sum::<f64>() / 3.0;
        assert!((m.mean_dsc - mean).abs() <= 1e-15);
    }
}

fn dice_loss(p: &Tensor4<f64>, t: &Tensor4<f64>) -> f64 {
    let mut tape = Tape::new();
    let (pv, tv) = (tape.constant(p.clone()), tape.constant(t.clone()));
    let l = tape.dice_loss(pv, tv, DICE_SMOOTH).unwrap();
    tape.value(l).item()
}

#[test]
fn dice_loss_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mask = random_mask(8, 8, &mut rng);
    let t = data::one_hot::<f64>(&mask, 4).unwrap();
    let relaxed = t.map(|v| if v == 1.0 { 0.999 } else { 0.001 });
    assert!(dice_loss(&relaxed, &t) < 0.01);

    // every class covers half the image
    let (h, w) = (4usize, 4usize);
    let mut half = Tensor4::zeros(shape(1, 2, h, w));
    for i in 0..h {
        for j in 0..w {
            half.set(0, ((i + j) % 2) as usize, i, j, 1.0);
        }
    }
    let p = Tensor4::full(half.shape(), 0.5);
    let hw = (h * w) as f64;
    let want = 1.0 - (2.0 * 0.25 * hw + 1.0) / (0.5 * hw + 0.5 * hw + 1.0);
    assert!((dice_loss(&p, &half) - want).abs() <= 1e-12);

    let mut tape = Tape::new();
    let a = tape.constant(Tensor4::zeros(shape(1, 2, 4, 4)));
    let b = tape.constant(Tensor4::zeros(shape(1, 3, 4, 4)));
    assert!(tape.dice_loss(a, b, DICE_SMOOTH).is_err());
}

#[test]
fn hard_dice_loss_tracks_coefficient() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..50 {
        let (x, y) = (blocky_mask(8, 8, &mut rng), blocky_mask(8, 8, &mut rng));
        let (px, ty) = (data::one_hot::<f64>(&x, 4).unwrap(), data::one_hot::<f64>(&y, 4).unwrap());
        for c in 1..4u8 {
            let pick = |t: &Tensor4<f64>| {
                Tensor4::from_vec(shape(1, 1, 8, 8), t.slice_channels(c as usize, 1).unwrap().into_values()).unwrap()
            };
            let loss = dice_loss(&pick(&px), &pick(&ty));
            let coef = common::dice(&x, &y, c);
            let n = (x.count(c) + y.count(c)) as f64;
            if n > 0.0 {
                assert!(((1.0 - loss) - coef).abs() <= 2.0 * DICE_SMOOTH / n + 1e-12);
            }
        }
    }
}

fn supervised(main: f64, aux: &[f64], eta: &[f64]) -> f64 {
    let mut tape = Tape::new();
    let m = tape.constant(Tensor4::scalar(main));
    let a: Vec<_> = aux.iter().map(|&v| tape.constant(Tensor4::scalar(v))).collect();
    let w = SupervisionWeights::new(eta.to_vec()).unwrap();
    let l = loss::deep_supervision_loss(&mut tape, m, &a, &w).unwrap();
    tape.value(l).item()
}

#[test]
fn deep_supervision_arithmetic() {
    assert!((supervised(0.8, &[0.8; 3], &[0.25; 3]) - 1.4).abs() <= 1e-9);
    assert_eq!(supervised(0.8123, &[0.3, 0.9, 0.1], &[0.0; 3]).to_bits(), 0.8123f64.to_bits());
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..100 {
        let main: f64 = rng.random_range(0.0..1.0);
        let aux: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..1.0)).collect();
        let eta: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..1.0)).collect();
        let want = main + aux.iter().zip(&eta).map(|(a, e)| a * e).sum::<f64>();
        assert!((supervised(main, &aux, &eta) - want).abs() <= 1e-12);
        // linear in each weight
        for k in 0..3 {
            let mut twice = eta.clone();
            twice[k] *= 2.0;
            let delta = supervised(main, &aux, &twice) - supervised(main, &aux, &eta);
            assert!((delta - eta[k] * aux[k]).abs() <= 1e-12);
        }
    }
    let mut tape = Tape::<f64>::new();
    let m = tape.constant(Tensor4::scalar(0.5));
    let w = SupervisionWeights::uniform(3, 0.25).unwrap();
    assert!(loss::deep_supervision_loss(&mut tape, m, &[m, m], &w).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dice_is_symmetric(seed in any::<u64>(), c in 1u8..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x, y) = (random_mask(7, 5, &mut rng), random_mask(7, 5, &mut rng));
        prop_assert_eq!(metrics::dice_coefficient(&x, &y, c).unwrap(), metrics::dice_coefficient(&y, &x, c).unwrap());
        if x.count(c) > 0 {
            prop_assert_eq!(metrics::dice_coefficient(&x, &x, c).unwrap(), 1.0);
        }
    }

    #[test]
    fn corrupting_truth_never_raises_dice(seed in any::<u64>(), c in 1u8..4, k in 1usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth = blocky_mask(8, 8, &mut rng);
        let mut pred = truth.clone();
        let mut prev = metrics::dice_coefficient(&pred, &truth, c).unwrap();
        prop_assert_eq!(prev, 1.0);
        for _ in 0..k {
            let (r, s) = (rng.random_range(0..8), rng.random_range(0..8));
            // either drop a true pixel or add a false one; both only ever hurt
            let wrong = if truth.get(r, s) == c { 0 } else { c };
            pred.set(r, s, wrong);
            let now = metrics::dice_coefficient(&pred, &truth, c).unwrap();
            prop_assert!(now <= prev);
            prev = now;
        }
    }

    #[test]
    fn symmetric_hausdorff_is_a_distance(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pts = |n: usize| -> Vec<(usize, usize)> {
            (0..n).map(|_| (rng.random_range(0..16), rng.random_range(0..16))).collect()
        };
        let (a, b) = (pts(1 + seed as usize % 12), pts(1 + (seed >> 8) as usize % 12));
        let ab = metrics::hausdorff_symmetric(&set(&a), &set(&b)).symmetric.unwrap();
        let ba = metrics::hausdorff_symmetric(&set(&b), &set(&a)).symmetric.unwrap();
        prop_assert_eq!(ab, ba);
        prop_assert!(ab >= 0.0);
        let same = a.iter().all(|p| b.contains(p)) && b.iter().all(|p| a.contains(p));
        prop_assert_eq!(ab == 0.0, same);
    }
}
