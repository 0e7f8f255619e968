//! Cross-correlation via im2col + GEMM.

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape4, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(input: Shape4, kernel: Shape4, stride: usize, padding: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be positive"));
        }
        if kernel.c != input.c {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kernel} expects {} input channels, input is {input}", kernel.c),
            ));
        }
        let extent = |size: usize, k: usize, axis: &str| -> Result<usize> {
            let padded = size + 2 * padding;
            if padded < k {
                return Err(Error::shape(
                    "conv2d",
                    format!("{axis} extent {size} + 2*{padding} is smaller than kernel {k}"),
                ));
            }
            if !(padded - k).is_multiple_of(stride) {
                return Err(Error::shape(
                    "conv2d",
                    format!(
                        "non-integral output {axis}: ({size} + 2*{padding} - {k}) / {stride}"
                    ),
                ));
            }
            Ok((padded - k) / stride + 1)
        };
        Ok(ConvGeometry {
            in_c: input.c,
            in_h: input.h,
            in_w: input.w,
            out_c: kernel.n,
            kh: kernel.h,
            kw: kernel.w,
            out_h: extent(input.h, kernel.h, "height")?,
            out_w: extent(input.w, kernel.w, "width")?,
            stride,
            padding,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }

    fn col_rows(&self) -> usize {
        self.in_c * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Range of output columns `ox` whose input column `ox*stride - pad + kj` is in bounds.
    fn valid_range(out: usize, size: usize, offset: isize, stride: usize) -> (usize, usize) {
        // need 0 <= o*stride + offset < size
        let s = stride as isize;
        let lo = if offset >= 0 { 0 } else { ((-offset) + s - 1) / s };
        let hi = if (size as isize) - offset <= 0 {
            0
        } else {
            (((size as isize) - offset + s - 1) / s).min(out as isize)
        };
        let lo = lo.min(out as isize) as usize;
        (lo, (hi as usize).max(lo))
    }
}

fn im2col<T: Real>(g: &ConvGeometry, x: &[T], cols: &mut [T]) {
    let p = g.out_plane();
    let pad = g.padding as isize;
    for ci in 0..g.in_c {
        let plane = &x[ci * g.in_h * g.in_w..(ci + 1) * g.in_h * g.in_w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                let off_x = kj as isize - pad;
                let (x_lo, x_hi) = ConvGeometry::valid_range(g.out_w, g.in_w, off_x, g.stride);
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride) as isize + ki as isize - pad;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.in_h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    line[..x_lo].iter_mut().for_each(|v| *v = T::zero());
                    line[x_hi..].iter_mut().for_each(|v| *v = T::zero());
                    if x_lo == x_hi {
                        continue;
                    }
                    if g.stride == 1 {
                        let start = (x_lo as isize + off_x) as usize;
                        line[x_lo..x_hi].copy_from_slice(&src[start..start + (x_hi - x_lo)]);
                    } else {
                        for ox in x_lo..x_hi {
                            line[ox] = src[((ox * g.stride) as isize + off_x) as usize];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(g: &ConvGeometry, cols: &[T], dx: &mut [T]) {
    let p = g.out_plane();
    let pad = g.padding as isize;
    for ci in 0..g.in_c {
        let plane = &mut dx[ci * g.in_h * g.in_w..(ci + 1) * g.in_h * g.in_w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                let off_x = kj as isize - pad;
                let (x_lo, x_hi) = ConvGeometry::valid_range(g.out_w, g.in_w, off_x, g.stride);
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride) as isize + ki as isize - pad;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let line = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    let dst = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for ox in x_lo..x_hi {
                        dst[((ox * g.stride) as isize + off_x) as usize] += line[ox];
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Real>(
    input: &Tensor4<T>,
    kernel: &Tensor4<T>,
    bias: Option<&Tensor4<T>>,
    stride: usize,
    padding: usize,
) -> Result<(Tensor4<T>, ConvGeometry)> {
    let g = ConvGeometry::new(input.shape(), kernel.shape(), stride, padding)?;
    if let Some(b) = bias {
        if b.len() != g.out_c {
            return Err(Error::shape(
                "conv2d",
                format!("bias has {} values for {} output channels", b.len(), g.out_c),
            ));
        }
    }
    let n = input.shape().n;
    let out_shape = Shape4::raw(n, g.out_c, g.out_h, g.out_w);
    let mut out = vec![T::zero(); out_shape.len()];
    let in_len = g.in_c * g.in_h * g.in_w;
    let p = g.out_plane();
    let out_len = g.out_c * p;
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); g.col_rows() * p]
    };
    for b in 0..n {
        let x = &input.values()[b * in_len..(b + 1) * in_len];
        let y = &mut out[b * out_len..(b + 1) * out_len];
        if let Some(bias) = bias {
            for (o, row) in y.chunks_mut(p).enumerate() {
                let bv = bias.values()[o];
                row.iter_mut().for_each(|v| *v = bv);
            }
        }
        let src: &[T] = if g.is_pointwise() {
            x
        } else {
            im2col(&g, x, &mut cols);
            &cols
        };
        T::gemm(
            g.out_c,
            g.col_rows(),
            p,
            kernel.values(),
            false,
            src,
            false,
            y,
            bias.is_some(),
        );
    }
    Ok((Tensor4::from_vec(out_shape, out)?, g))
}

pub struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub kernel: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub fn conv2d_backward<T: Real>(
    g: &ConvGeometry,
    input: &Tensor4<T>,
    kernel: &Tensor4<T>,
    grad_out: &[T],
    need: [bool; 3],
) -> ConvGrads<T> {
    let n = input.shape().n;
    let in_len = g.in_c * g.in_h * g.in_w;
    let p = g.out_plane();
    let out_len = g.out_c * p;
    let rows = g.col_rows();
    let mut dx = need[0].then(|| vec![T::zero(); input.len()]);
    let mut dk = need[1].then(|| vec![T::zero(); kernel.len()]);
    let mut db = need[2].then(|| vec![T::zero(); g.out_c]);
    let mut cols = if g.is_pointwise() || !need[1] {
        Vec::new()
    } else {
        vec![T::zero(); rows * p]
    };
    let mut dcols = if g.is_pointwise() || !need[0] {
        Vec::new()
    } else {
        vec![T::zero(); rows * p]
    };
    for b in 0..n {
        let gy = &grad_out[b * out_len..(b + 1) * out_len];
        if let Some(db) = db.as_mut() {
            for (o, row) in gy.chunks(p).enumerate() {
                db[o] += row.iter().copied().sum::<T>();
            }
        }
        let x = &input.values()[b * in_len..(b + 1) * in_len];
        if let Some(dk) = dk.as_mut() {
            let src: &[T] = if g.is_pointwise() {
                x
            } else {
                im2col(g, x, &mut cols);
                &cols
            };
            // dK += gy · colsᵀ
            T::gemm(g.out_c, p, rows, gy, false, src, true, dk, true);
        }
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * in_len..(b + 1) * in_len];
            if g.is_pointwise() {
                T::gemm(rows, g.out_c, p, kernel.values(), true, gy, false, dxb, true);
            } else {
                T::gemm(rows, g.out_c, p, kernel.values(), true, gy, false, &mut dcols, false);
                col2im(g, &dcols, dxb);
            }
        }
    }
    ConvGrads {
        input: dx,
        kernel: dk,
        bias: db,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: [usize; 4], v: Vec<f64>) -> Tensor4<f64> {
        Tensor4::from_vec(Shape4::new(shape[0], shape[1], shape[2], shape[3]).unwrap(), v).unwrap()
    }

    #[test]
    fn ones_kernel_counts_neighbours() {
        let x = t([1, 1, 3, 3], vec![1.0; 9]);
        let k = t([1, 1, 3, 3], vec![1.0; 9]);
        let (y, _) = conv2d_forward(&x, &k, None, 1, 1).unwrap();
        assert_eq!(y.values(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn rejects_channel_mismatch_and_fractional_extent() {
        let x = t([1, 2, 4, 4], vec![0.0; 32]);
        let k = t([1, 1, 3, 3], vec![0.0; 9]);
        assert!(matches!(
            conv2d_forward(&x, &k, None, 1, 1),
            Err(Error::Shape { .. })
        ));
        let x = t([1, 1, 4, 4], vec![0.0; 16]);
        // (4 + 0 - 3) / 2 is not integral
        assert!(conv2d_forward(&x, &k, None, 2, 0).is_err());
        assert!(conv2d_forward(&x, &k, None, 1, 0).is_ok());
    }

    #[test]
    fn strided_output_extent() {
        let x = t([1, 1, 5, 5], (0..25).map(|v| v as f64).collect());
        let k = t([1, 1, 3, 3], vec![1.0; 9]);
        let (y, g) = conv2d_forward(&x, &k, None, 2, 1).unwrap();
        assert_eq!((g.out_h, g.out_w), (3, 3));
        // top-left window covers rows 0..1, cols 0..1
        assert_eq!(y.values()[0], 0.0 + 1.0 + 5.0 + 6.0);
    }
}
