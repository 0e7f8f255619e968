//! Broadcasting binary ops, activations and batch normalization.

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape4, Tensor4};

/// Element strides used to read the right-hand operand of a broadcast op.
/// A dimension of `b` is either equal to `a`'s or 1 (stride 0).
#[derive(Clone, Copy, Debug)]
pub struct Broadcast {
    pub full: Shape4,
    pub small: Shape4,
    strides: [usize; 4],
}

impl Broadcast {
    pub fn new(op: &'static str, a: Shape4, b: Shape4) -> Result<Self> {
        let (ad, bd) = (a.dims(), b.dims());
        let mut strides = [0; 4];
        let mut acc = 1;
        for i in (0..4).rev() {
            if bd[i] == ad[i] {
                strides[i] = if bd[i] == 1 { 0 } else { acc };
            } else if bd[i] == 1 {
                strides[i] = 0;
            } else {
                return Err(Error::shape(op, format!("cannot broadcast {b} onto {a}")));
            }
            acc *= bd[i];
        }
        Ok(Broadcast {
            full: a,
            small: b,
            strides,
        })
    }

    pub fn is_identity(&self) -> bool {
        self.full == self.small
    }

    /// Calls `f(full_index, small_index)` for every element of the full shape.
    #[inline]
    pub fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let s = self.full;
        let [sn, sc, sh, sw] = self.strides;
        let mut i = 0;
        for n in 0..s.n {
            for c in 0..s.c {
                let base_nc = n * sn + c * sc;
                for h in 0..s.h {
                    let base = base_nc + h * sh;
                    if sw == 0 {
                        for _ in 0..s.w {
                            f(i, base);
                            i += 1;
                        }
                    } else {
                        for w in 0..s.w {
                            f(i, base + w);
                            i += 1;
                        }
                    }
                }
            }
        }
    }
}

pub fn add_forward<T: Real>(a: &Tensor4<T>, b: &Tensor4<T>, bc: &Broadcast) -> Tensor4<T> {
    let mut out = a.values().to_vec();
    let bv = b.values();
    if bc.is_identity() {
        out.iter_mut().zip(bv).for_each(|(o, &v)| *o += v);
    } else {
        bc.for_each(|i, j| out[i] += bv[j]);
    }
    Tensor4::from_vec(a.shape(), out).expect("broadcast shape")
}

pub fn mul_forward<T: Real>(a: &Tensor4<T>, b: &Tensor4<T>, bc: &Broadcast) -> Tensor4<T> {
    let mut out = a.values().to_vec();
    let bv = b.values();
    if bc.is_identity() {
        out.iter_mut().zip(bv).for_each(|(o, &v)| *o *= v);
    } else {
        bc.for_each(|i, j| out[i] *= bv[j]);
    }
    Tensor4::from_vec(a.shape(), out).expect("broadcast shape")
}

/// Sum `g` over the broadcast axes of `bc`, producing a gradient for the small operand.
pub fn reduce_to_small<T: Real>(bc: &Broadcast, g: &[T]) -> Vec<T> {
    if bc.is_identity() {
        return g.to_vec();
    }
    let mut out = vec![T::zero(); bc.small.len()];
    bc.for_each(|i, j| out[j] += g[i]);
    out
}

#[inline]
pub fn sigmoid_scalar<T: Real>(x: T) -> T {
    let one = T::one();
    let s = if x >= T::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    };
    // keep the open interval (0, 1) in finite precision
    let hi = one - T::epsilon() / (one + one);
    s.max(T::min_positive_value()).min(hi)
}

pub fn sigmoid_forward<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(sigmoid_scalar)
}

pub fn relu_forward<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel running mean and (unbiased) variance.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Real> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BatchNormConfig {
    pub epsilon: f64,
    pub momentum: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        BatchNormConfig {
            epsilon: 1e-5,
            momentum: 0.1,
        }
    }
}

/// Saved state for the batch-norm backward pass.
#[derive(Clone, Debug)]
pub struct BatchNormSaved<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub mode: Mode,
}

pub fn batchnorm_forward<T: Real>(
    x: &Tensor4<T>,
    gamma: &Tensor4<T>,
    beta: &Tensor4<T>,
    stats: &mut RunningStats<T>,
    mode: Mode,
    cfg: BatchNormConfig,
) -> Result<(Tensor4<T>, BatchNormSaved<T>)> {
    let s = x.shape();
    if gamma.len() != s.c || beta.len() != s.c || stats.mean.len() != s.c {
        return Err(Error::shape(
            "batchnorm2d",
            format!(
                "input {s} with {} gamma, {} beta, {} running values",
                gamma.len(),
                beta.len(),
                stats.mean.len()
            ),
        ));
    }
    let count = s.n * s.plane();
    if mode == Mode::Train && count < 2 {
        return Err(Error::DegenerateBatch(count));
    }
    let eps = T::from_f64_lossy(cfg.epsilon);
    let mom = T::from_f64_lossy(cfg.momentum);
    let plane = s.plane();
    let xv = x.values();
    let mut inv_std = vec![T::zero(); s.c];
    let mut mean = vec![T::zero(); s.c];
    match mode {
        Mode::Train => {
            let cnt = T::from_usize(count).unwrap();
            for c in 0..s.c {
                let mut sum = T::zero();
                for n in 0..s.n {
                    let base = (n * s.c + c) * plane;
                    sum += xv[base..base + plane].iter().copied().sum::<T>();
                }
                let mu = sum / cnt;
                let mut sq = T::zero();
                for n in 0..s.n {
                    let base = (n * s.c + c) * plane;
                    for &v in &xv[base..base + plane] {
                        let d = v - mu;
                        sq += d * d;
                    }
                }
                let var = sq / cnt;
                mean[c] = mu;
                inv_std[c] = T::one() / (var + eps).sqrt();
                let unbiased = sq / T::from_usize(count - 1).unwrap();
                stats.mean[c] = (T::one() - mom) * stats.mean[c] + mom * mu;
                stats.var[c] = (T::one() - mom) * stats.var[c] + mom * unbiased;
            }
        }
        Mode::Eval => {
            for c in 0..s.c {
                mean[c] = stats.mean[c];
                inv_std[c] = T::one() / (stats.var[c] + eps).sqrt();
            }
        }
    }
    let mut xhat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    for n in 0..s.n {
        for c in 0..s.c {
            let base = (n * s.c + c) * plane;
            let (g, b, mu, is) = (gamma.values()[c], beta.values()[c], mean[c], inv_std[c]);
            for i in base..base + plane {
                let h = (xv[i] - mu) * is;
                xhat[i] = h;
                out[i] = g * h + b;
            }
        }
    }
    Ok((
        Tensor4::from_vec(s, out)?,
        BatchNormSaved {
            xhat,
            inv_std,
            mode,
        },
    ))
}

/// Returns (dx, dgamma, dbeta).
pub fn batchnorm_backward<T: Real>(
    shape: Shape4,
    gamma: &[T],
    saved: &BatchNormSaved<T>,
    grad_out: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let plane = shape.plane();
    let mut dgamma = vec![T::zero(); shape.c];
    let mut dbeta = vec![T::zero(); shape.c];
    for n in 0..shape.n {
        for c in 0..shape.c {
            let base = (n * shape.c + c) * plane;
            for i in base..base + plane {
                dgamma[c] += grad_out[i] * saved.xhat[i];
                dbeta[c] += grad_out[i];
            }
        }
    }
    let mut dx = vec![T::zero(); shape.len()];
    let cnt = T::from_usize(shape.n * plane).unwrap();
    for c in 0..shape.c {
        let scale = gamma[c] * saved.inv_std[c];
        let (mean_dy, mean_dy_xhat) = match saved.mode {
            Mode::Train => (dbeta[c] / cnt, dgamma[c] / cnt),
            Mode::Eval => (T::zero(), T::zero()),
        };
        for n in 0..shape.n {
            let base = (n * shape.c + c) * plane;
            for i in base..base + plane {
                dx[i] = scale * (grad_out[i] - mean_dy - saved.xhat[i] * mean_dy_xhat);
            }
        }
    }
    (dx, dgamma, dbeta)
}
