//! Straight-line reference implementations: explicit loops, no tape, no GEMM.
#![allow(dead_code)]

use dadu::attention::{CamState, DabState, SamBranch, SamState};
use dadu::metrics::LabelMask;
use dadu::{ParamStore, Shape4, Tensor4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn shape(n: usize, c: usize, h: usize, w: usize) -> Shape4 {
    Shape4::new(n, c, h, w).unwrap()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Direct cross-correlation, zero padding.
pub fn conv2d(x: &Tensor4<f64>, k: &Tensor4<f64>, bias: Option<&[f64]>, stride: usize, pad: usize) -> Tensor4<f64> {
    let [n, c, h, w] = x.shape().dims();
    let [o, kc, kh, kw] = k.shape().dims();
    assert_eq!(c, kc);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = Tensor4::zeros(shape(n, o, oh, ow));
    for b in 0..n {
        for oc in 0..o {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = bias.map_or(0.0, |b| b[oc]);
                    for ic in 0..c {
                        for u in 0..kh {
                            for v in 0..kw {
                                let r = (i * stride + u) as isize - pad as isize;
                                let s = (j * stride + v) as isize - pad as isize;
                                if r < 0 || s < 0 || r >= h as isize || s >= w as isize {
                                    continue;
                                }
                                acc += x.at(b, ic, r as usize, s as usize) * k.at(oc, ic, u, v);
                            }
                        }
                    }
                    out.set(b, oc, i, j, acc);
                }
            }
        }
    }
    out
}

/// 2×2 windows, stride 2; odd extents replicate the last row/column.
pub fn maxpool2d(x: &Tensor4<f64>) -> Tensor4<f64> {
    let [n, c, h, w] = x.shape().dims();
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Tensor4::zeros(shape(n, c, oh, ow));
    for b in 0..n {
        for ch in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let mut m = f64::NEG_INFINITY;
                    for (u, v) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let r = (2 * i + u).min(h - 1);
                        let s = (2 * j + v).min(w - 1);
                        m = m.max(x.at(b, ch, r, s));
                    }
                    out.set(b, ch, i, j, m);
                }
            }
        }
    }
    out
}

pub fn global_avg(x: &Tensor4<f64>, b: usize, c: usize) -> f64 {
    let s = x.shape();
    let mut sum = 0.0;
    for i in 0..s.h {
        for j in 0..s.w {
            sum += x.at(b, c, i, j);
        }
    }
    sum / (s.h * s.w) as f64
}

pub fn global_max(x: &Tensor4<f64>, b: usize, c: usize) -> f64 {
    let s = x.shape();
    let mut m = f64::NEG_INFINITY;
    for i in 0..s.h {
        for j in 0..s.w {
            m = m.max(x.at(b, c, i, j));
        }
    }
    m
}

pub fn channel_avg(x: &Tensor4<f64>, b: usize, i: usize, j: usize) -> f64 {
    let c = x.shape().c;
    (0..c).map(|k| x.at(b, k, i, j)).sum::<f64>() / c as f64
}

pub fn channel_max(x: &Tensor4<f64>, b: usize, i: usize, j: usize) -> f64 {
    (0..x.shape().c).map(|k| x.at(b, k, i, j)).fold(f64::NEG_INFINITY, f64::max)
}

/// Row-stochastic `dst x src` bilinear matrix, half-pixel centres.
pub fn interp_matrix(src: usize, dst: usize) -> Vec<Vec<f64>> {
    let mut m = vec![vec![0.0; src]; dst];
    for (i, row) in m.iter_mut().enumerate() {
        let pos = ((i as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(src - 1);
        let t = pos - lo as f64;
        row[lo] += 1.0 - t;
        row[hi] += t;
    }
    m
}

/// `A · X · Bᵀ` per plane.
pub fn upsample(x: &Tensor4<f64>, factor: usize) -> Tensor4<f64> {
    let [n, c, h, w] = x.shape().dims();
    let (a, b) = (interp_matrix(h, h * factor), interp_matrix(w, w * factor));
    let mut out = Tensor4::zeros(shape(n, c, h * factor, w * factor));
    for bn in 0..n {
        for ch in 0..c {
            for i in 0..h * factor {
                for j in 0..w * factor {
                    let mut acc = 0.0;
                    for r in 0..h {
                        for s in 0..w {
                            acc += a[i][r] * x.at(bn, ch, r, s) * b[j][s];
                        }
                    }
                    out.set(bn, ch, i, j, acc);
                }
            }
        }
    }
    out
}

/// `σ(w_c (avg E + max E + avg D + max D))`, `[n, C]`.
pub fn cam(e: &Tensor4<f64>, d: &Tensor4<f64>, weights: &[f64]) -> Vec<Vec<f64>> {
    let s = e.shape();
    (0..s.n)
        .map(|b| {
            (0..s.c)
                .map(|c| {
                    let m = global_avg(e, b, c) + global_max(e, b, c) + global_avg(d, b, c) + global_max(d, b, c);
                    sigmoid(weights[c] * m)
                })
                .collect()
        })
        .collect()
}

pub fn cam_with_store(e: &Tensor4<f64>, d: &Tensor4<f64>, store: &ParamStore<f64>, st: &CamState) -> Vec<Vec<f64>> {
    cam(e, d, store.get(st.channel_weights).values())
}

fn sam_side(f: &Tensor4<f64>, store: &ParamStore<f64>, br: &SamBranch) -> Tensor4<f64> {
    let [n, c, h, w] = f.shape().dims();
    let w1 = store.get(br.conv1x1).values();
    let b1 = store.get(br.bias1x1).values()[0];
    let mut stacked = Tensor4::zeros(shape(n, 3, h, w));
    for b in 0..n {
        for i in 0..h {
            for j in 0..w {
                let proj: f64 = (0..c).map(|k| w1[k] * f.at(b, k, i, j)).sum::<f64>() + b1;
                stacked.set(b, 0, i, j, channel_avg(f, b, i, j));
                stacked.set(b, 1, i, j, channel_max(f, b, i, j));
                stacked.set(b, 2, i, j, proj);
            }
        }
    }
    let b7 = store.get(br.bias7x7).values()[0];
    conv2d(&stacked, store.get(br.conv7x7), Some(&[b7]), 1, 3)
}

/// `σ(f7_E(...) + f7_D(...))`, `[n,1,h,w]`.
pub fn sam(e: &Tensor4<f64>, d: &Tensor4<f64>, store: &ParamStore<f64>, st: &SamState) -> Tensor4<f64> {
    let me = sam_side(e, store, &st.enc);
    let md = sam_side(d, store, &st.dec);
    let vals = me.values().iter().zip(md.values()).map(|(a, b)| sigmoid(a + b)).collect();
    Tensor4::from_vec(me.shape(), vals).unwrap()
}

pub fn dice(x: &LabelMask, y: &LabelMask, c: u8) -> f64 {
    let (mut nx, mut ny, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in x.labels().iter().zip(y.labels()) {
        nx += (a == c) as usize;
        ny += (b == c) as usize;
        both += (a == c && b == c) as usize;
    }
    if nx + ny == 0 {
        1.0
    } else {
        2.0 * both as f64 / (nx + ny) as f64
    }
}

/// Class pixels with an out-of-image or differently labelled 4-neighbour.
pub fn contour(m: &LabelMask, c: u8) -> Vec<(usize, usize)> {
    let (h, w) = (m.height() as isize, m.width() as isize);
    let mut pts = Vec::new();
    for r in 0..h {
        for s in 0..w {
            if m.get(r as usize, s as usize) != c {
                continue;
            }
            let boundary = [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|&(dr, ds)| {
                let (rr, ss) = (r + dr, s + ds);
                rr < 0 || ss < 0 || rr >= h || ss >= w || m.get(rr as usize, ss as usize) != c
            });
            if boundary {
                pts.push((r as usize, s as usize));
            }
        }
    }
    pts
}

pub fn hd_directed(a: &[(usize, usize)], b: &[(usize, usize)]) -> Option<f64> {
    if a.is_empty() || b.is_empty() {
        return None;
    }
    let mut worst = 0.0f64;
    for p in a {
        let mut best = f64::INFINITY;
        for q in b {
            let dr = p.0 as f64 - q.0 as f64;
            let dc = p.1 as f64 - q.1 as f64;
            best = best.min((dr * dr + dc * dc).sqrt());
        }
        worst = worst.max(best);
    }
    Some(worst)
}

pub fn hd_symmetric(a: &[(usize, usize)], b: &[(usize, usize)]) -> Option<f64> {
    Some(hd_directed(a, b)?.max(hd_directed(b, a)?))
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Relative error with an absolute floor of 1.
pub fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0, f64::max)
}

/// Freshly initialised attention parameters for `c` channels.
pub fn dab_params(c: usize, seed: u64) -> (ParamStore<f64>, DabState) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let st = DabState::new(&mut store, "t", c, &mut rng);
    (store, st)
}

/// Move every parameter off its initial value, biases included.
pub fn perturb(store: &mut ParamStore<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in store.iter_mut() {
        for v in p.value.values_mut() {
            *v += rng.random_range(-0.5..0.5);
        }
    }
}
