mod common;

use common::shape;
use dadu::ops::{BatchNormConfig, Mode, RunningStats};
use dadu::{Error, Result, Tape, Tensor4, Var};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn t(s: (usize, usize, usize, usize), v: &[f64]) -> Tensor4<f64> {
    Tensor4::from_vec(shape(s.0, s.1, s.2, s.3), v.to_vec()).unwrap()
}

fn apply(x: &Tensor4<f64>, f: impl FnOnce(&mut Tape<f64>, Var) -> Result<Var>) -> Tensor4<f64> {
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone(), true);
    let y = f(&mut tape, v).unwrap();
    tape.value(y).detached()
}

fn conv(x: &Tensor4<f64>, k: &Tensor4<f64>, stride: usize, pad: usize) -> Tensor4<f64> {
    let mut tape = Tape::new();
    let (xv, kv) = (tape.constant(x.clone()), tape.constant(k.clone()));
    let y = tape.conv2d(xv, kv, None, stride, pad).unwrap();
    tape.value(y).detached()
}

#[test]
fn conv_sum_of_ones() {
    let x = Tensor4::ones(shape(1, 1, 3, 3));
    let k = Tensor4::ones(shape(1, 1, 3, 3));
    let y = conv(&x, &k, 1, 1);
    assert_eq!(y.values(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
}

#[test]
fn conv_identity_kernel() {
    let x = Tensor4::randn(shape(2, 1, 5, 4), &mut rng(1));
    let mut k = Tensor4::zeros(shape(1, 1, 3, 3));
    k.set(0, 0, 1, 1, 1.0);
    assert_eq!(conv(&x, &k, 1, 1).values(), x.values());
}

#[test]
fn conv_matches_loop_oracle() {
    let mut r = rng(2);
    for (stride, pad) in [(1, 1), (1, 0), (2, 1), (2, 0)] {
        let side = if stride == 1 { 8 } else { 7 };
        let x = Tensor4::randn(shape(2, 3, side, side), &mut r);
        let k = Tensor4::randn(shape(4, 3, 3, 3), &mut r);
        let b = Tensor4::randn(shape(1, 4, 1, 1), &mut r);
        let mut tape = Tape::new();
        let (xv, kv, bv) = (tape.constant(x.clone()), tape.constant(k.clone()), tape.constant(b.clone()));
        let y = tape.conv2d(xv, kv, Some(bv), stride, pad).unwrap();
        let want = common::conv2d(&x, &k, Some(b.values()), stride, pad);
        assert_eq!(tape.shape(y), want.shape());
        assert!(common::rel_diff(tape.value(y).values(), want.values()) <= 1e-6);
    }
}

#[test]
fn conv_kernel_wider_than_input() {
    let mut r = rng(12);
    for (h, w) in [(1, 1), (1, 3), (2, 5), (6, 1)] {
        let x = Tensor4::randn(shape(1, 3, h, w), &mut r);
        let k = Tensor4::randn(shape(1, 3, 7, 7), &mut r);
        let mut tape = Tape::new();
        let (xv, kv) = (tape.leaf(x.clone(), true), tape.leaf(k.clone(), true));
        let y = tape.conv2d(xv, kv, None, 1, 3).unwrap();
        let want = common::conv2d(&x, &k, None, 1, 3);
        assert!(common::rel_diff(tape.value(y).values(), want.values()) <= 1e-12);
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(xv).unwrap().len(), x.len());
    }
}

#[test]
fn conv_rejects_bad_shapes() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor4::zeros(shape(1, 2, 4, 4)));
    let k = tape.constant(Tensor4::zeros(shape(1, 3, 3, 3)));
    assert!(matches!(tape.conv2d(x, k, None, 1, 1), Err(Error::Shape { .. })));
    let big = tape.constant(Tensor4::zeros(shape(1, 2, 7, 7)));
    assert!(matches!(tape.conv2d(x, big, None, 1, 0), Err(Error::Shape { .. })));
    let k2 = tape.constant(Tensor4::zeros(shape(1, 2, 3, 3)));
    assert!(tape.conv2d(x, k2, None, 0, 1).is_err());
    // (4 + 2 - 3) / 2 is not integral
    assert!(matches!(tape.conv2d(x, k2, None, 2, 1), Err(Error::Shape { .. })));
}

#[test]
fn maxpool_examples_and_oracle() {
    let x = t((1, 1, 2, 2), &[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(apply(&x, |t, v| t.maxpool2d(v)).values(), &[4.0]);
    let k = Tensor4::full(shape(1, 2, 6, 6), 2.5);
    let y = apply(&k, |t, v| t.maxpool2d(v));
    assert_eq!(y.shape(), shape(1, 2, 3, 3));
    assert!(y.values().iter().all(|&v| v == 2.5));
    let mut r = rng(3);
    for dims in [(1, 2, 6, 6), (2, 3, 5, 7), (1, 1, 1, 3)] {
        let x = Tensor4::randn(shape(dims.0, dims.1, dims.2, dims.3), &mut r);
        let y = apply(&x, |t, v| t.maxpool2d(v));
        assert_eq!(y.values(), common::maxpool2d(&x).values());
    }
}

#[test]
fn maxpool_tie_routes_to_first() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor4::full(shape(1, 1, 2, 2), 1.0), true);
    let y = tape.maxpool2d(x).unwrap();
    let s = tape.sum(y).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn global_and_channel_pools() {
    let x = t((1, 1, 2, 2), &[0.0, 0.0, 0.0, 4.0]);
    assert_eq!(apply(&x, |t, v| t.global_avg_pool(v)).values(), &[1.0]);
    assert_eq!(apply(&x, |t, v| t.global_max_pool(v)).values(), &[4.0]);
    let c = Tensor4::full(shape(1, 1, 3, 3), 2.0);
    assert_eq!(apply(&c, |t, v| t.global_avg_pool(v)).values(), &[2.0]);
    assert_eq!(apply(&c, |t, v| t.global_max_pool(v)).values(), &[2.0]);

    let two = t((1, 2, 1, 2), &[0.0, 0.0, 4.0, 4.0]);
    assert_eq!(apply(&two, |t, v| t.channelwise_avg(v)).values(), &[2.0, 2.0]);
    assert_eq!(apply(&two, |t, v| t.channelwise_max(v)).values(), &[4.0, 4.0]);

    let x = Tensor4::randn(shape(2, 3, 4, 5), &mut rng(4));
    let ga = apply(&x, |t, v| t.global_avg_pool(v));
    let gm = apply(&x, |t, v| t.global_max_pool(v));
    let ca = apply(&x, |t, v| t.channelwise_avg(v));
    let cm = apply(&x, |t, v| t.channelwise_max(v));
    for b in 0..2 {
        for c in 0..3 {
            assert!((ga.at(b, c, 0, 0) - common::global_avg(&x, b, c)).abs() <= 1e-12);
            assert_eq!(gm.at(b, c, 0, 0), common::global_max(&x, b, c));
        }
        for i in 0..4 {
            for j in 0..5 {
                assert!((ca.at(b, 0, i, j) - common::channel_avg(&x, b, i, j)).abs() <= 1e-12);
                assert_eq!(cm.at(b, 0, i, j), common::channel_max(&x, b, i, j));
            }
        }
    }
}

fn bn(x: &Tensor4<f64>, gamma: f64, beta: f64, mode: Mode, stats: &mut RunningStats<f64>) -> Result<Tensor4<f64>> {
    let c = x.shape().c;
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let g = tape.constant(Tensor4::full(shape(1, c, 1, 1), gamma));
    let b = tape.constant(Tensor4::full(shape(1, c, 1, 1), beta));
    let y = tape.batchnorm2d(xv, g, b, stats, mode, BatchNormConfig::default())?;
    Ok(tape.value(y).detached())
}

#[test]
fn batchnorm_statistics() {
    let x = Tensor4::randn(shape(4, 3, 5, 5), &mut rng(5)).map(|v| 3.0 * v + 1.5);
    let mut stats = RunningStats::new(3);
    let y = bn(&x, 1.0, 0.0, Mode::Train, &mut stats).unwrap();
    for c in 0..3 {
        let vals: Vec<f64> = (0..4)
            .flat_map(|b| (0..25).map(move |i| (b, i)))
            .map(|(b, i)| y.at(b, c, i / 5, i % 5))
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() <= 1e-5, "{mean}");
        assert!((var - 1.0).abs() <= 1e-4, "{var}");
    }
    // running stats moved from (0, 1) towards the batch statistics
    assert!(stats.mean.iter().all(|&m| m > 0.0));

    let y = bn(&x, 0.0, 0.7, Mode::Train, &mut RunningStats::new(3)).unwrap();
    assert!(y.values().iter().all(|&v| v == 0.7));

    let fixed = RunningStats {
        mean: vec![1.0, 2.0, 3.0],
        var: vec![4.0, 4.0, 4.0],
    };
    let y = bn(&x, 1.0, 0.0, Mode::Eval, &mut fixed.clone()).unwrap();
    let eps = BatchNormConfig::default().epsilon;
    let want = (x.at(1, 2, 3, 4) - 3.0) / (4.0 + eps).sqrt();
    assert!((y.at(1, 2, 3, 4) - want).abs() <= 1e-12);

    let one = Tensor4::ones(shape(1, 2, 1, 1));
    assert!(matches!(
        bn(&one, 1.0, 0.0, Mode::Train, &mut RunningStats::new(2)),
        Err(Error::DegenerateBatch(1))
    ));
}

#[test]
fn activation_anchors() {
    let x = t((1, 1, 1, 3), &[-1.0, 3.0, 0.0]);
    assert_eq!(apply(&x, |t, v| t.relu(v)).values(), &[0.0, 3.0, 0.0]);
    let s = apply(&t((1, 1, 1, 2), &[0.0, 1.0]), |t, v| t.sigmoid(v));
    assert_eq!(s.values()[0], 0.5);
    assert!((s.values()[1] - 0.7310586).abs() <= 1e-6);
}

#[test]
fn broadcast_identities_and_halving() {
    let a = Tensor4::randn(shape(2, 3, 4, 4), &mut rng(6));
    let ones = Tensor4::ones(a.shape());
    let zeros = Tensor4::zeros(a.shape());
    let mut tape = Tape::new();
    let (av, o, z) = (tape.constant(a.clone()), tape.constant(ones), tape.constant(zeros));
    let half = tape.constant(Tensor4::full(shape(2, 3, 1, 1), 0.5));
    let m = tape.mul(av, o).unwrap();
    let s = tape.add(av, z).unwrap();
    let h = tape.mul(av, half).unwrap();
    assert_eq!(tape.value(m).values(), a.values());
    assert_eq!(tape.value(s).values(), a.values());
    let halved: Vec<f64> = a.values().iter().map(|v| v * 0.5).collect();
    assert_eq!(tape.value(h).values(), &halved[..]);
    let bad = tape.constant(Tensor4::zeros(shape(2, 2, 4, 4)));
    assert!(tape.add(av, bad).is_err());
}

#[test]
fn broadcast_gradient_equals_materialized_sum() {
    let mut r = rng(7);
    let a = Tensor4::randn(shape(2, 3, 4, 4), &mut r);
    let w = Tensor4::randn(a.shape(), &mut r);
    for small in [shape(2, 3, 1, 1), shape(2, 1, 4, 4), shape(1, 3, 1, 1)] {
        let b = Tensor4::randn(small, &mut r);
        // broadcast form
        let mut tape = Tape::new();
        let (av, bv, wv) = (tape.constant(a.clone()), tape.leaf(b.clone(), true), tape.constant(w.clone()));
        let p = tape.mul(av, bv).unwrap();
        let q = tape.mul(p, wv).unwrap();
        let l = tape.sum(q).unwrap();
        tape.backward(l).unwrap();
        let g_small = tape.grad(bv).unwrap().to_vec();
        // materialized form
        let mut full = Tensor4::zeros(a.shape());
        let fs = a.shape();
        for n in 0..fs.n {
            for c in 0..fs.c {
                for i in 0..fs.h {
                    for j in 0..fs.w {
                        let v = b.at(n.min(small.n - 1), c.min(small.c - 1), i.min(small.h - 1), j.min(small.w - 1));
                        full.set(n, c, i, j, v);
                    }
                }
            }
        }
        let mut tape = Tape::new();
        let (av, fv, wv) = (tape.constant(a.clone()), tape.leaf(full, true), tape.constant(w.clone()));
        let p = tape.mul(av, fv).unwrap();
        let q = tape.mul(p, wv).unwrap();
        let l = tape.sum(q).unwrap();
        tape.backward(l).unwrap();
        let g_full = tape.grad(fv).unwrap();
        let mut folded = vec![0.0; small.len()];
        for n in 0..fs.n {
            for c in 0..fs.c {
                for i in 0..fs.h {
                    for j in 0..fs.w {
                        let k = small.index(n.min(small.n - 1), c.min(small.c - 1), i.min(small.h - 1), j.min(small.w - 1));
                        folded[k] += g_full[fs.index(n, c, i, j)];
                    }
                }
            }
        }
        assert!(common::max_abs_diff(&g_small, &folded) <= 1e-12);
    }
}

#[test]
fn concat_shape_and_slices() {
    let mut r = rng(8);
    let a: Tensor4<f64> = Tensor4::randn(shape(2, 1, 3, 3), &mut r);
    let b = Tensor4::randn(shape(2, 2, 3, 3), &mut r);
    let mut tape = Tape::new();
    let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let y = tape.concat_channels(&[av, bv]).unwrap();
    let y1 = tape.concat_channels(&[av]).unwrap();
    let out = tape.value(y);
    assert_eq!(out.shape(), shape(2, 3, 3, 3));
    assert_eq!(out.slice_channels(0, 1).unwrap().values(), a.values());
    assert_eq!(out.slice_channels(1, 2).unwrap().values(), b.values());
    assert_eq!(tape.value(y1).values(), a.values());
    let bad = tape.constant(Tensor4::zeros(shape(2, 1, 4, 3)));
    assert!(tape.concat_channels(&[av, bad]).is_err());
}

#[test]
fn upsample_examples_and_matrix_oracle() {
    let k = Tensor4::full(shape(1, 2, 3, 5), 1.75);
    let y = apply(&k, |t, v| t.upsample_bilinear(v, 2));
    assert_eq!(y.shape(), shape(1, 2, 6, 10));
    assert!(y.values().iter().all(|&v| (v - 1.75).abs() <= 1e-15));
    let one = t((1, 1, 1, 1), &[3.0]);
    assert_eq!(apply(&one, |t, v| t.upsample_bilinear(v, 2)).values(), &[3.0; 4]);
    let x = Tensor4::randn(shape(2, 2, 4, 3), &mut rng(9));
    for f in [2, 4] {
        let y = apply(&x, |t, v| t.upsample_bilinear(v, f));
        assert!(common::max_abs_diff(y.values(), common::upsample(&x, f).values()) <= 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_is_linear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut r = rng(seed);
        let x = Tensor4::randn(shape(1, 2, 5, 5), &mut r);
        let y = Tensor4::randn(shape(1, 2, 5, 5), &mut r);
        let k = Tensor4::randn(shape(3, 2, 3, 3), &mut r);
        let mix: Vec<f64> = x.values().iter().zip(y.values()).map(|(p, q)| a * p + b * q).collect();
        let lhs = conv(&Tensor4::from_vec(x.shape(), mix).unwrap(), &k, 1, 1);
        let (cx, cy) = (conv(&x, &k, 1, 1), conv(&y, &k, 1, 1));
        let rhs: Vec<f64> = cx.values().iter().zip(cy.values()).map(|(p, q)| a * p + b * q).collect();
        prop_assert!(common::max_abs_diff(lhs.values(), &rhs) <= 1e-5);
    }

    #[test]
    fn max_pool_dominates_average(seed in any::<u64>(), h in 1usize..7, w in 1usize..7) {
        let x = Tensor4::randn(shape(2, 3, h, w), &mut rng(seed));
        let avg = apply(&x, |t, v| t.global_avg_pool(v));
        let max = apply(&x, |t, v| t.global_max_pool(v));
        for (m, a) in max.values().iter().zip(avg.values()) {
            prop_assert!(m >= a);
        }
    }

    #[test]
    fn activation_ranges(v in proptest::collection::vec(-800.0f64..800.0, 1..40)) {
        let x = t((1, 1, 1, v.len()), &v);
        let s = apply(&x, |t, v| t.sigmoid(v));
        prop_assert!(s.values().iter().all(|&p| p > 0.0 && p < 1.0));
        let r = apply(&x, |t, v| t.relu(v));
        prop_assert!(r.values().iter().all(|&p| p >= 0.0));
    }
}
