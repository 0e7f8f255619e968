//! Pooling reductions and bilinear resampling.

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape4, Tensor4};

/// 2×2 max pooling, stride 2. Odd extents are replicate-padded on the last
/// row/column. Returns the output and, per output cell, the flat input index
/// of the winning element (first in row-major window order on ties).
pub fn maxpool2d_forward<T: Real>(input: &Tensor4<T>) -> (Tensor4<T>, Vec<usize>) {
    let s = input.shape();
    let (oh, ow) = (s.h.div_ceil(2), s.w.div_ceil(2));
    let out_shape = Shape4::raw(s.n, s.c, oh, ow);
    let mut out = Vec::with_capacity(out_shape.len());
    let mut arg = Vec::with_capacity(out_shape.len());
    let x = input.values();
    for nc in 0..s.n * s.c {
        let base = nc * s.plane();
        for oy in 0..oh {
            let rows = [2 * oy, (2 * oy + 1).min(s.h - 1)];
            for ox in 0..ow {
                let cols = [2 * ox, (2 * ox + 1).min(s.w - 1)];
                let mut best = base + rows[0] * s.w + cols[0];
                for &r in &rows {
                    for &c in &cols {
                        let i = base + r * s.w + c;
                        if x[i] > x[best] {
                            best = i;
                        }
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (Tensor4::from_vec(out_shape, out).expect("pool shape"), arg)
}

pub fn global_avg_pool_forward<T: Real>(input: &Tensor4<T>) -> Tensor4<T> {
    let s = input.shape();
    let denom = T::from_usize(s.plane()).unwrap();
    let values = input
        .values()
        .chunks(s.plane())
        .map(|plane| plane.iter().copied().sum::<T>() / denom)
        .collect();
    Tensor4::from_vec(Shape4::raw(s.n, s.c, 1, 1), values).expect("pool shape")
}

pub fn global_max_pool_forward<T: Real>(input: &Tensor4<T>) -> (Tensor4<T>, Vec<usize>) {
    let s = input.shape();
    let mut values = Vec::with_capacity(s.n * s.c);
    let mut arg = Vec::with_capacity(s.n * s.c);
    for (k, plane) in input.values().chunks(s.plane()).enumerate() {
        let mut best = 0;
        for (i, &v) in plane.iter().enumerate() {
            if v > plane[best] {
                best = i;
            }
        }
        values.push(plane[best]);
        arg.push(k * s.plane() + best);
    }
    (
        Tensor4::from_vec(Shape4::raw(s.n, s.c, 1, 1), values).expect("pool shape"),
        arg,
    )
}

pub fn channelwise_avg_forward<T: Real>(input: &Tensor4<T>) -> Tensor4<T> {
    let s = input.shape();
    let plane = s.plane();
    let denom = T::from_usize(s.c).unwrap();
    let mut out = vec![T::zero(); s.n * plane];
    for n in 0..s.n {
        let dst = &mut out[n * plane..(n + 1) * plane];
        for c in 0..s.c {
            let src = &input.values()[(n * s.c + c) * plane..(n * s.c + c + 1) * plane];
            dst.iter_mut().zip(src).for_each(|(d, &v)| *d += v);
        }
        dst.iter_mut().for_each(|d| *d = *d / denom);
    }
    Tensor4::from_vec(Shape4::raw(s.n, 1, s.h, s.w), out).expect("pool shape")
}

pub fn channelwise_max_forward<T: Real>(input: &Tensor4<T>) -> (Tensor4<T>, Vec<usize>) {
    let s = input.shape();
    let plane = s.plane();
    let x = input.values();
    let mut out = Vec::with_capacity(s.n * plane);
    let mut arg = Vec::with_capacity(s.n * plane);
    for n in 0..s.n {
        for p in 0..plane {
            let mut best = n * s.c * plane + p;
            for c in 1..s.c {
                let i = (n * s.c + c) * plane + p;
                if x[i] > x[best] {
                    best = i;
                }
            }
            out.push(x[best]);
            arg.push(best);
        }
    }
    (
        Tensor4::from_vec(Shape4::raw(s.n, 1, s.h, s.w), out).expect("pool shape"),
        arg,
    )
}

/// One axis of a bilinear resampling: for each output coordinate the two
/// source taps and the weight of the second one.
#[derive(Clone, Debug)]
pub struct AxisTaps<T> {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<T>,
}

impl<T: Real> AxisTaps<T> {
    /// Half-pixel centred mapping (align-corners false).
    pub fn new(src: usize, dst: usize) -> Self {
        let scale = src as f64 / dst as f64;
        let mut lo = Vec::with_capacity(dst);
        let mut hi = Vec::with_capacity(dst);
        let mut frac = Vec::with_capacity(dst);
        for o in 0..dst {
            let pos = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            lo.push(i0);
            hi.push(i1);
            frac.push(T::from_f64_lossy(pos - i0 as f64));
        }
        AxisTaps { lo, hi, frac }
    }
}

pub fn resize_bilinear_forward<T: Real>(
    input: &Tensor4<T>,
    out_h: usize,
    out_w: usize,
) -> (Tensor4<T>, AxisTaps<T>, AxisTaps<T>) {
    let s = input.shape();
    let ty = AxisTaps::new(s.h, out_h);
    let tx = AxisTaps::new(s.w, out_w);
    let mut out = Vec::with_capacity(s.n * s.c * out_h * out_w);
    let one = T::one();
    for plane in input.values().chunks(s.plane()) {
        for oy in 0..out_h {
            let (r0, r1, fy) = (ty.lo[oy] * s.w, ty.hi[oy] * s.w, ty.frac[oy]);
            for ox in 0..out_w {
                let (c0, c1, fx) = (tx.lo[ox], tx.hi[ox], tx.frac[ox]);
                let top = plane[r0 + c0] * (one - fx) + plane[r0 + c1] * fx;
                let bot = plane[r1 + c0] * (one - fx) + plane[r1 + c1] * fx;
                out.push(top * (one - fy) + bot * fy);
            }
        }
    }
    (
        Tensor4::from_vec(Shape4::raw(s.n, s.c, out_h, out_w), out).expect("resize shape"),
        ty,
        tx,
    )
}

pub fn resize_bilinear_backward<T: Real>(
    in_shape: Shape4,
    ty: &AxisTaps<T>,
    tx: &AxisTaps<T>,
    grad_out: &[T],
) -> Vec<T> {
    let (out_h, out_w) = (ty.lo.len(), tx.lo.len());
    let w = in_shape.w;
    let mut dx = vec![T::zero(); in_shape.len()];
    let one = T::one();
    for (plane, gout) in dx
        .chunks_mut(in_shape.plane())
        .zip(grad_out.chunks(out_h * out_w))
    {
        for oy in 0..out_h {
            let (r0, r1, fy) = (ty.lo[oy] * w, ty.hi[oy] * w, ty.frac[oy]);
            for ox in 0..out_w {
                let (c0, c1, fx) = (tx.lo[ox], tx.hi[ox], tx.frac[ox]);
                let g = gout[oy * out_w + ox];
                let gt = g * (one - fy);
                let gb = g * fy;
                plane[r0 + c0] += gt * (one - fx);
                plane[r0 + c1] += gt * fx;
                plane[r1 + c0] += gb * (one - fx);
                plane[r1 + c1] += gb * fx;
            }
        }
    }
    dx
}

pub fn check_factor(op: &'static str, factor: usize) -> Result<()> {
    if factor == 0 {
        return Err(Error::shape(op, "upsampling factor must be positive"));
    }
    Ok(())
}
