//! Soft Dice loss and the deep-supervision combination.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor4};

/// Default additive smoothing of the soft Dice ratio.
pub const DICE_SMOOTH: f64 = 1.0;

fn dice_terms<T: Real>(probs: &Tensor4<T>, target: &Tensor4<T>) -> Result<Vec<(T, T)>> {
    if probs.shape() != target.shape() {
        return Err(Error::shape(
            "dice_loss",
            format!("probs {} vs target {}", probs.shape(), target.shape()),
        ));
    }
    let plane = probs.shape().plane();
    Ok(probs
        .values()
        .chunks(plane)
        .zip(target.values().chunks(plane))
        .map(|(p, t)| {
            let mut inter = T::zero();
            let mut total = T::zero();
            for (&pv, &tv) in p.iter().zip(t) {
                inter += pv * tv;
                total += pv + tv;
            }
            (inter, total)
        })
        .collect())
}

/// `1 − mean over (batch, class) of (2·Σp·t + s) / (Σp + Σt + s)`.
pub fn dice_loss_value<T: Real>(probs: &Tensor4<T>, target: &Tensor4<T>, smooth: T) -> Result<T> {
    let terms = dice_terms(probs, target)?;
    let two = T::one() + T::one();
    let count = T::from_usize(terms.len()).unwrap();
    let mean = terms
        .iter()
        .map(|&(i, s)| (two * i + smooth) / (s + smooth))
        .sum::<T>()
        / count;
    Ok(T::one() - mean)
}

pub(crate) fn dice_loss_grad<T: Real>(
    probs: &Tensor4<T>,
    target: &Tensor4<T>,
    smooth: T,
    upstream: T,
) -> Vec<T> {
    let terms = dice_terms(probs, target).expect("shapes checked in forward");
    let plane = probs.shape().plane();
    let two = T::one() + T::one();
    let scale = -upstream / T::from_usize(terms.len()).unwrap();
    let mut out = vec![T::zero(); probs.len()];
    for (k, &(inter, total)) in terms.iter().enumerate() {
        let num = two * inter + smooth;
        let den = total + smooth;
        let inv = T::one() / (den * den);
        let t = &target.values()[k * plane..(k + 1) * plane];
        for (o, &tv) in out[k * plane..(k + 1) * plane].iter_mut().zip(t) {
            *o = scale * (two * tv * den - num) * inv;
        }
    }
    out
}

/// Balancing weights of the auxiliary losses; the main loss weight is 1.
#[derive(Clone, Debug, PartialEq)]
pub struct SupervisionWeights {
    pub eta: Vec<f64>,
}

impl SupervisionWeights {
    pub fn new(eta: Vec<f64>) -> Result<Self> {
        if let Some(bad) = eta.iter().find(|e| !(**e >= 0.0) || !e.is_finite()) {
            return Err(Error::Config(format!(
                "supervision weight {bad} must be finite and >= 0"
            )));
        }
        Ok(SupervisionWeights { eta })
    }

    pub fn uniform(paths: usize, eta: f64) -> Result<Self> {
        Self::new(vec![eta; paths])
    }

    pub fn len(&self) -> usize {
        self.eta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eta.is_empty()
    }
}

/// `L = L_main + Σ ηᵢ·Lᵢ`, differentiable through every term.
pub fn deep_supervision_loss<T: Real>(
    tape: &mut Tape<T>,
    main: Var,
    aux: &[Var],
    weights: &SupervisionWeights,
) -> Result<Var> {
    if aux.len() != weights.len() {
        return Err(Error::shape(
            "deep_supervision_loss",
            format!("{} auxiliary losses for {} weights", aux.len(), weights.len()),
        ));
    }
    let mut terms = Vec::with_capacity(aux.len() + 1);
    terms.push((main, T::one()));
    terms.extend(
        aux.iter()
            .zip(&weights.eta)
            .map(|(&v, &e)| (v, T::from_f64_lossy(e))),
    );
    tape.weighted_sum(&terms)
}
