//! Channel attention, spatial attention and the dual attention block that
//! gates an encoder/decoder feature pair.
//!
//! Channel attention pools every channel of both inputs (mean and max over
//! the plane), sums the four statistics, scales by a learnable per-channel
//! weight and squashes with a sigmoid, giving one gate per channel. The
//! per-channel form is used rather than collapsing the weighted sum to a
//! single scalar, so different channels can be gated differently.
//!
//! Spatial attention builds, for each side, a 3-channel map (channel mean,
//! channel max, learned 1×1 projection), runs it through a 7×7 convolution,
//! then adds the encoder and decoder responses and applies a sigmoid. The
//! result is a single `1×H×W` gate broadcast over channels.
//!
//! The block applies the channel gate to each side, computes the spatial
//! gate from the gated pair, and returns `m_sp ⊗ (m_ch ⊗ E ⊕ m_ch ⊗ D)`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Shape4, Tensor4};

/// Learnable per-channel weights `w_c`, initialised to 1.
#[derive(Clone, Copy, Debug)]
pub struct CamState {
    pub channel_weights: ParamId,
    pub channels: usize,
}

/// One side (encoder or decoder) of the spatial attention module.
#[derive(Clone, Copy, Debug)]
pub struct SamBranch {
    pub conv1x1: ParamId,
    pub bias1x1: ParamId,
    pub conv7x7: ParamId,
    pub bias7x7: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct SamState {
    pub enc: SamBranch,
    pub dec: SamBranch,
    pub channels: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct DabState {
    pub cam: CamState,
    pub sam: SamState,
}

/// Channel and spatial gates produced by one block, for diagnostics.
#[derive(Clone, Copy, Debug)]
pub struct AttentionMaps {
    /// `[n, C, 1, 1]`
    pub m_ch: Var,
    /// `[n, 1, h, w]`
    pub m_sp: Var,
}

/// Test hook forcing gates to exactly one.
#[derive(Clone, Copy, Debug, Default)]
pub struct AttentionHooks {
    pub unit_channel: bool,
    pub unit_spatial: bool,
}

fn fan_in_uniform<T: Real, R: Rng + ?Sized>(shape: Shape4, rng: &mut R) -> Tensor4<T> {
    let fan_in = (shape.c * shape.h * shape.w) as f64;
    let bound = 1.0 / fan_in.sqrt();
    Tensor4::uniform(shape, -bound, bound, rng)
}

impl CamState {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, channels: usize) -> Self {
        let w = Tensor4::ones(Shape4::raw(1, channels, 1, 1));
        CamState {
            channel_weights: store.push(format!("{prefix}.cam.weight"), w),
            channels,
        }
    }
}

impl SamBranch {
    fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        rng: &mut R,
    ) -> Self {
        let k1 = Shape4::raw(1, channels, 1, 1);
        let k7 = Shape4::raw(1, 3, 7, 7);
        SamBranch {
            conv1x1: store.push(format!("{prefix}.conv1x1.weight"), fan_in_uniform(k1, rng)),
            bias1x1: store.push(format!("{prefix}.conv1x1.bias"), Tensor4::zeros(Shape4::scalar())),
            conv7x7: store.push(format!("{prefix}.conv7x7.weight"), fan_in_uniform(k7, rng)),
            bias7x7: store.push(format!("{prefix}.conv7x7.bias"), Tensor4::zeros(Shape4::scalar())),
        }
    }
}

impl SamState {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        rng: &mut R,
    ) -> Self {
        SamState {
            enc: SamBranch::new(store, &format!("{prefix}.sam.enc"), channels, rng),
            dec: SamBranch::new(store, &format!("{prefix}.sam.dec"), channels, rng),
            channels,
        }
    }
}

impl DabState {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        rng: &mut R,
    ) -> Self {
        DabState {
            cam: CamState::new(store, prefix, channels),
            sam: SamState::new(store, prefix, channels, rng),
        }
    }
}

fn same_shape<T: Real>(op: &'static str, tape: &Tape<T>, e: Var, d: Var, channels: usize) -> Result<()> {
    let (se, sd) = (tape.try_value(e)?.shape(), tape.try_value(d)?.shape());
    if se != sd {
        return Err(Error::shape(op, format!("encoder {se} vs decoder {sd}")));
    }
    if se.c != channels {
        return Err(Error::shape(
            op,
            format!("input has {} channels, state expects {channels}", se.c),
        ));
    }
    Ok(())
}

/// `σ(w_c · (avg(E_c) + max(E_c) + avg(D_c) + max(D_c)))` for every channel.
pub fn channel_attention<T: Real>(
    tape: &mut Tape<T>,
    params: &Bound,
    f_enc: Var,
    f_dec: Var,
    state: &CamState,
) -> Result<Var> {
    same_shape("channel_attention", tape, f_enc, f_dec, state.channels)?;
    let e_avg = tape.global_avg_pool(f_enc)?;
    let e_max = tape.global_max_pool(f_enc)?;
    let d_avg = tape.global_avg_pool(f_dec)?;
    let d_max = tape.global_max_pool(f_dec)?;
    let m_e = tape.add(e_avg, e_max)?;
    let m_d = tape.add(d_avg, d_max)?;
    let merged = tape.add(m_e, m_d)?;
    let weighted = tape.mul(merged, params[state.channel_weights])?;
    tape.sigmoid(weighted)
}

fn spatial_branch<T: Real>(
    tape: &mut Tape<T>,
    params: &Bound,
    f: Var,
    branch: &SamBranch,
) -> Result<Var> {
    let avg = tape.channelwise_avg(f)?;
    let max = tape.channelwise_max(f)?;
    let proj = tape.conv2d(f, params[branch.conv1x1], Some(params[branch.bias1x1]), 1, 0)?;
    let stacked = tape.concat_channels(&[avg, max, proj])?;
    tape.conv2d(stacked, params[branch.conv7x7], Some(params[branch.bias7x7]), 1, 3)
}

/// `σ(f7_E([avg • max • f1_E](E)) ⊕ f7_D([avg • max • f1_D](D)))`, shape `[n,1,h,w]`.
pub fn spatial_attention<T: Real>(
    tape: &mut Tape<T>,
    params: &Bound,
    f_enc: Var,
    f_dec: Var,
    state: &SamState,
) -> Result<Var> {
    same_shape("spatial_attention", tape, f_enc, f_dec, state.channels)?;
    let m_e = spatial_branch(tape, params, f_enc, &state.enc)?;
    let m_d = spatial_branch(tape, params, f_dec, &state.dec)?;
    let merged = tape.add(m_e, m_d)?;
    tape.sigmoid(merged)
}

pub fn dab<T: Real>(
    tape: &mut Tape<T>,
    params: &Bound,
    f_enc: Var,
    f_dec: Var,
    state: &DabState,
) -> Result<(Var, AttentionMaps)> {
    dab_with_hooks(tape, params, f_enc, f_dec, state, AttentionHooks::default())
}

pub fn dab_with_hooks<T: Real>(
    tape: &mut Tape<T>,
    params: &Bound,
    f_enc: Var,
    f_dec: Var,
    state: &DabState,
    hooks: AttentionHooks,
) -> Result<(Var, AttentionMaps)> {
    let m_ch = if hooks.unit_channel {
        same_shape("dab", tape, f_enc, f_dec, state.cam.channels)?;
        let s = tape.shape(f_enc);
        tape.constant(Tensor4::ones(Shape4::raw(s.n, s.c, 1, 1)))
    } else {
        channel_attention(tape, params, f_enc, f_dec, &state.cam)?
    };
    let ch_e = tape.mul(f_enc, m_ch)?;
    let ch_d = tape.mul(f_dec, m_ch)?;
    let m_sp = if hooks.unit_spatial {
        let s = tape.shape(f_enc);
        tape.constant(Tensor4::ones(Shape4::raw(s.n, 1, s.h, s.w)))
    } else {
        spatial_attention(tape, params, ch_e, ch_d, &state.sam)?
    };
    let merged = tape.add(ch_e, ch_d)?;
    let out = tape.mul(merged, m_sp)?;
    Ok((out, AttentionMaps { m_ch, m_sp }))
}
