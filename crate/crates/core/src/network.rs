//! The full segmentation network: dense-block encoder, decoder levels joined
//! to the encoder by attention-gated skip connections plus a fixed Sobel edge
//! channel, and auxiliary supervision heads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{self, AttentionMaps, DabState};
use crate::error::{Error, Result};
use crate::metrics::LabelMask;
use crate::ops::{BatchNormConfig, Mode, RunningStats};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Shape4, Tensor4};

/// `(channel gate, spatial gate)` per decoder level; `None` without attention.
pub type LevelMaps<T> = Vec<Option<(Tensor4<T>, Tensor4<T>)>>;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// Down-sampling stages.
    pub levels: usize,
    /// Channel width of the first level; doubled at every level below.
    pub base_channels: usize,
    pub dense_layers_per_block: usize,
    /// `None` uses half the level width.
    pub growth_rate: Option<usize>,
    pub num_classes: usize,
    pub input_channels: usize,
    /// Number of auxiliary supervision heads.
    pub supervision_paths: usize,
    /// `false` replaces every attention block by a plain skip connection.
    pub attention: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            levels: 4,
            base_channels: 16,
            dense_layers_per_block: 2,
            growth_rate: None,
            num_classes: 4,
            input_channels: 1,
            supervision_paths: 3,
            attention: true,
        }
    }
}

impl ModelConfig {
    pub fn with_levels(levels: usize, base_channels: usize) -> Self {
        ModelConfig {
            levels,
            base_channels,
            supervision_paths: levels.saturating_sub(1),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.levels < 2 {
            return fail(format!("levels must be >= 2, got {}", self.levels));
        }
        if self.levels > 8 {
            return fail(format!("levels must be <= 8, got {}", self.levels));
        }
        if self.base_channels == 0 || self.dense_layers_per_block == 0 {
            return fail("base_channels and dense_layers_per_block must be positive".into());
        }
        if self.growth_rate == Some(0) {
            return fail("growth_rate must be positive".into());
        }
        if self.num_classes < 2 || self.num_classes > 255 {
            return fail(format!("num_classes must be in 2..=255, got {}", self.num_classes));
        }
        if self.input_channels == 0 {
            return fail("input_channels must be positive".into());
        }
        if self.supervision_paths > self.levels - 1 {
            return fail(format!(
                "supervision_paths must be <= levels - 1 = {}",
                self.levels - 1
            ));
        }
        Ok(())
    }

    /// Channel width of level `i` (level `levels` is the bottleneck).
    pub fn width(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn growth(&self, level: usize) -> usize {
        self.growth_rate.unwrap_or((self.width(level) / 2).max(1))
    }

    /// Required divisor of the input height and width.
    pub fn divisor(&self) -> usize {
        1 << self.levels
    }

    /// Closed-form number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        let conv = |i: usize, o: usize, k: usize| o * i * k * k + o;
        let bn = |c: usize| 2 * c;
        let dense = |cin: usize, width: usize, growth: usize| {
            let mut total = 0;
            let mut c = cin;
            for _ in 0..self.dense_layers_per_block {
                total += conv(c, growth, 3) + bn(growth);
                c += growth;
            }
            total + conv(c, width, 1)
        };
        let mut total = 0;
        for i in 0..self.levels {
            let cin = if i == 0 { self.input_channels } else { self.width(i - 1) };
            total += dense(cin, self.width(i), self.growth(i));
        }
        total += dense(self.width(self.levels - 1), self.width(self.levels), self.growth(self.levels));
        for i in 0..self.levels {
            let w = self.width(i);
            total += conv(self.width(i + 1), w, 1);
            if self.attention {
                // cam weights + two (1x1 + 7x7) branches
                total += w + 2 * (conv(w, 1, 1) + conv(3, 1, 7));
            }
            total += conv(2 * w + 1, w, 3) + bn(w) + conv(w, w, 3) + bn(w);
        }
        total += (1..=self.supervision_paths)
            .map(|i| conv(self.width(i), self.num_classes, 1))
            .sum::<usize>();
        total + conv(self.width(0), self.num_classes, 1)
    }
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    weight: ParamId,
    bias: ParamId,
    padding: usize,
}

#[derive(Clone, Copy, Debug)]
struct BatchNorm {
    gamma: ParamId,
    beta: ParamId,
    stats: usize,
}

#[derive(Clone, Copy, Debug)]
struct ConvBnRelu {
    conv: Conv,
    bn: BatchNorm,
}

/// Layers consuming the concatenation of the block input and all previous
/// layer outputs, followed by a 1×1 transition to the level width.
#[derive(Clone, Debug)]
pub struct DenseBlock {
    layers: Vec<ConvBnRelu>,
    transition: Conv,
    pub in_channels: usize,
    pub growth: usize,
    pub out_channels: usize,
}

#[derive(Clone, Debug)]
pub struct EncoderLevel {
    pub dense: DenseBlock,
}

#[derive(Clone, Debug)]
pub struct DecoderLevel {
    pub level: usize,
    up: Conv,
    pub dab: Option<DabState>,
    fuse: [ConvBnRelu; 2],
}

#[derive(Clone, Copy, Debug)]
pub struct SupervisionHead {
    pub level: usize,
    conv: Conv,
}

/// Initial per-class probability of every output head (set through the bias).
pub const HEAD_PRIOR: f64 = 0.1;

struct Builder<'a, T: Real> {
    store: &'a mut ParamStore<T>,
    buffers: &'a mut Vec<(String, RunningStats<T>)>,
    rng: ChaCha8Rng,
}

impl<T: Real> Builder<'_, T> {
    /// `relu_gain` selects He-uniform init for convs feeding a ReLU.
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, relu_gain: bool) -> Conv {
        let fan_in = (cin * k * k) as f64;
        let bound = if relu_gain {
            (6.0 / fan_in).sqrt()
        } else {
            1.0 / fan_in.sqrt()
        };
        let w = Tensor4::uniform(Shape4::raw(cout, cin, k, k), -bound, bound, &mut self.rng);
        Conv {
            weight: self.store.push(format!("{name}.weight"), w),
            bias: self
                .store
                .push(format!("{name}.bias"), Tensor4::zeros(Shape4::raw(1, cout, 1, 1))),
            padding: k / 2,
        }
    }

    /// Output head whose bias starts every class at probability [`HEAD_PRIOR`].
    fn head(&mut self, name: &str, cin: usize, classes: usize) -> Conv {
        let c = self.conv(name, cin, classes, 1, false);
        let logit = T::from_f64_lossy((HEAD_PRIOR / (1.0 - HEAD_PRIOR)).ln());
        self.store.get_mut(c.bias).values_mut().fill(logit);
        c
    }

    fn bn(&mut self, name: &str, c: usize) -> BatchNorm {
        let shape = Shape4::raw(1, c, 1, 1);
        let gamma = self.store.push(format!("{name}.gamma"), Tensor4::ones(shape));
        let beta = self.store.push(format!("{name}.beta"), Tensor4::zeros(shape));
        self.buffers.push((name.to_string(), RunningStats::new(c)));
        BatchNorm {
            gamma,
            beta,
            stats: self.buffers.len() - 1,
        }
    }

    fn conv_bn_relu(&mut self, name: &str, cin: usize, cout: usize) -> ConvBnRelu {
        ConvBnRelu {
            conv: self.conv(&format!("{name}.conv"), cin, cout, 3, true),
            bn: self.bn(&format!("{name}.bn"), cout),
        }
    }

    fn dense(&mut self, name: &str, cin: usize, width: usize, growth: usize, layers: usize) -> DenseBlock {
        let mut c = cin;
        let mut ls = Vec::with_capacity(layers);
        for i in 0..layers {
            ls.push(self.conv_bn_relu(&format!("{name}.layer{i}"), c, growth));
            c += growth;
        }
        DenseBlock {
            layers: ls,
            transition: self.conv(&format!("{name}.transition"), c, width, 1, false),
            in_channels: cin,
            growth,
            out_channels: width,
        }
    }
}

/// Outputs of one forward pass, all recorded on the caller's tape.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Per-class probabilities `[n, K, H, W]`.
    pub main: Var,
    /// Auxiliary head probabilities, deepest level first, each `[n, K, H, W]`.
    pub aux: Vec<Var>,
    /// Attention gates per decoder level, deepest first; `None` when attention is off.
    pub maps: Vec<Option<AttentionMaps>>,
    /// Edge channels injected at each decoder level, deepest first (untracked).
    pub edges: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct DaduModel<T: Real> {
    config: ModelConfig,
    store: ParamStore<T>,
    buffers: Vec<(String, RunningStats<T>)>,
    encoders: Vec<EncoderLevel>,
    bottleneck: DenseBlock,
    /// Deepest level first.
    decoders: Vec<DecoderLevel>,
    heads: Vec<SupervisionHead>,
    final_head: Conv,
    bn: BatchNormConfig,
}

impl<T: Real> DaduModel<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut buffers = Vec::new();
        let mut b = Builder {
            store: &mut store,
            buffers: &mut buffers,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let l = config.levels;
        let layers = config.dense_layers_per_block;
        let mut encoders = Vec::with_capacity(l);
        for i in 0..l {
            let cin = if i == 0 { config.input_channels } else { config.width(i - 1) };
            encoders.push(EncoderLevel {
                dense: b.dense(&format!("enc{i}"), cin, config.width(i), config.growth(i), layers),
            });
        }
        let bottleneck = b.dense(
            "bottleneck",
            config.width(l - 1),
            config.width(l),
            config.growth(l),
            layers,
        );
        let mut decoders = Vec::with_capacity(l);
        for i in (0..l).rev() {
            let w = config.width(i);
            let up = b.conv(&format!("dec{i}.up"), config.width(i + 1), w, 1, false);
            let dab = config.attention.then(|| {
                let mut rng = ChaCha8Rng::seed_from_u64(b.rng.random());
                DabState::new(b.store, &format!("dec{i}.dab"), w, &mut rng)
            });
            let fuse = [
                b.conv_bn_relu(&format!("dec{i}.fuse0"), 2 * w + 1, w),
                b.conv_bn_relu(&format!("dec{i}.fuse1"), w, w),
            ];
            decoders.push(DecoderLevel {
                level: i,
                up,
                dab,
                fuse,
            });
        }
        let heads = (1..=config.supervision_paths)
            .rev()
            .map(|i| SupervisionHead {
                level: i,
                conv: b.head(&format!("head{i}"), config.width(i), config.num_classes),
            })
            .collect();
        let final_head = b.head("head0", config.width(0), config.num_classes);
        Ok(DaduModel {
            config,
            store,
            buffers,
            encoders,
            bottleneck,
            decoders,
            heads,
            final_head,
            bn: BatchNormConfig::default(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Learnable tensors in stable construction order.
    pub fn parameters(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn parameters_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Batch-norm running statistics, in construction order.
    pub fn buffers(&self) -> &[(String, RunningStats<T>)] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [(String, RunningStats<T>)] {
        &mut self.buffers
    }

    pub fn encoders(&self) -> &[EncoderLevel] {
        &self.encoders
    }

    pub fn decoders(&self) -> &[DecoderLevel] {
        &self.decoders
    }

    pub fn heads(&self) -> &[SupervisionHead] {
        &self.heads
    }

    pub fn bottleneck(&self) -> &DenseBlock {
        &self.bottleneck
    }

    /// Id of the first 3×3 kernel of the level-0 encoder.
    pub fn first_encoder_kernel(&self) -> ParamId {
        self.encoders[0].dense.layers[0].conv.weight
    }

    /// Kernel ids of the auxiliary heads, deepest first.
    pub fn head_kernels(&self) -> Vec<ParamId> {
        self.heads.iter().map(|h| h.conv.weight).collect()
    }

    pub fn check_input(&self, shape: Shape4) -> Result<()> {
        if shape.c != self.config.input_channels {
            return Err(Error::shape(
                "forward",
                format!("expected {} input channels, got {shape}", self.config.input_channels),
            ));
        }
        let d = self.config.divisor();
        if !shape.h.is_multiple_of(d) || !shape.w.is_multiple_of(d) {
            return Err(Error::Indivisible {
                h: shape.h,
                w: shape.w,
                divisor: d,
                pad_h: shape.h.div_ceil(d) * d,
                pad_w: shape.w.div_ceil(d) * d,
            });
        }
        Ok(())
    }

    /// Bind parameters on `tape` (tracked) and run the network.
    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        image: &Tensor4<T>,
        mode: Mode,
    ) -> Result<(ForwardOutput, Bound)> {
        let bound = self.store.bind(tape);
        let x = tape.constant(image.detached());
        let out = self.forward_bound(tape, &bound, x, mode)?;
        Ok((out, bound))
    }

    /// Run the network on already-bound parameters.
    pub fn forward_bound(
        &mut self,
        tape: &mut Tape<T>,
        p: &Bound,
        image: Var,
        mode: Mode,
    ) -> Result<ForwardOutput> {
        self.forward_with_edges(tape, p, image, mode, None)
    }

    /// As [`DaduModel::forward_bound`], optionally replaying fixed edge maps
    /// (deepest level first) instead of recomputing them from the skip features.
    pub fn forward_with_edges(
        &mut self,
        tape: &mut Tape<T>,
        p: &Bound,
        image: Var,
        mode: Mode,
        frozen_edges: Option<&[Tensor4<T>]>,
    ) -> Result<ForwardOutput> {
        self.check_input(tape.try_value(image)?.shape())?;
        if let Some(e) = frozen_edges {
            if e.len() != self.decoders.len() {
                return Err(Error::shape(
                    "forward",
                    format!("{} frozen edge maps for {} levels", e.len(), self.decoders.len()),
                ));
            }
        }
        let bn = self.bn;
        let buffers = &mut self.buffers;
        let mut x = image;
        let mut skips = Vec::with_capacity(self.encoders.len());
        for enc in &self.encoders {
            let f = dense_forward(tape, p, buffers, bn, x, &enc.dense, mode)?;
            skips.push(f);
            x = tape.maxpool2d(f)?;
        }
        x = dense_forward(tape, p, buffers, bn, x, &self.bottleneck, mode)?;

        let mut aux = Vec::with_capacity(self.heads.len());
        let mut maps = Vec::with_capacity(self.decoders.len());
        let mut edge_vars = Vec::with_capacity(self.decoders.len());
        let mut heads = self.heads.iter().peekable();
        for (k, dec) in self.decoders.iter().enumerate() {
            let skip = skips[dec.level];
            // 1×1 conv commutes with bilinear resampling; run it at the low resolution
            let reduced = conv(tape, p, x, &dec.up)?;
            let up = tape.upsample_bilinear(reduced, 2)?;
            let (gated, m) = match &dec.dab {
                Some(state) => {
                    let (g, m) = attention::dab(tape, p, skip, up, state)?;
                    (g, Some(m))
                }
                None => (skip, None),
            };
            maps.push(m);
            let edges = match frozen_edges {
                Some(e) => e[k].clone(),
                None => edge_features(tape.value(skip)),
            };
            let edges = tape.constant(edges);
            edge_vars.push(edges);
            let merged = tape.concat_channels(&[up, gated, edges])?;
            let mut h = conv_bn_relu(tape, p, buffers, bn, merged, &dec.fuse[0], mode)?;
            h = conv_bn_relu(tape, p, buffers, bn, h, &dec.fuse[1], mode)?;
            if let Some(head) = heads.next_if(|hd| hd.level == dec.level) {
                let logits = conv(tape, p, h, &head.conv)?;
                let full = tape.upsample_bilinear(logits, 1 << head.level)?;
                aux.push(tape.sigmoid(full)?);
            }
            x = h;
        }
        let logits = conv(tape, p, x, &self.final_head)?;
        let main = tape.sigmoid(logits)?;
        Ok(ForwardOutput {
            main,
            aux,
            maps,
            edges: edge_vars,
        })
    }

    /// Eval-mode class probabilities without recording gradients.
    pub fn predict_probs(&mut self, images: &Tensor4<T>) -> Result<Tensor4<T>> {
        let mut tape = Tape::new();
        let bound = self.bind_frozen(&mut tape);
        let x = tape.constant(images.detached());
        let out = self.forward_bound(&mut tape, &bound, x, Mode::Eval)?;
        Ok(tape.value(out.main).detached())
    }

    /// Eval-mode forward returning probabilities and the attention gates
    /// of every decoder level (deepest first).
    pub fn predict_with_maps(
        &mut self,
        image: &Tensor4<T>,
    ) -> Result<(Tensor4<T>, LevelMaps<T>)> {
        let mut tape = Tape::new();
        let bound = self.bind_frozen(&mut tape);
        let x = tape.constant(image.detached());
        let out = self.forward_bound(&mut tape, &bound, x, Mode::Eval)?;
        let maps = out
            .maps
            .iter()
            .map(|m| m.map(|m| (tape.value(m.m_ch).detached(), tape.value(m.m_sp).detached())))
            .collect();
        Ok((tape.value(out.main).detached(), maps))
    }

    /// Argmax label masks for a batch of images.
    pub fn segment(&mut self, images: &Tensor4<T>) -> Result<Vec<LabelMask>> {
        let probs = self.predict_probs(images)?;
        argmax_masks(&probs)
    }

    /// Parameters bound as untracked constants: no backward state is kept.
    fn bind_frozen(&self, tape: &mut Tape<T>) -> Bound {
        let vars = self
            .store
            .iter()
            .map(|p| tape.constant(p.value.detached()))
            .collect();
        Bound::from_vars(vars)
    }
}

fn conv<T: Real>(tape: &mut Tape<T>, p: &Bound, x: Var, c: &Conv) -> Result<Var> {
    tape.conv2d(x, p[c.weight], Some(p[c.bias]), 1, c.padding)
}

fn conv_bn_relu<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound,
    buffers: &mut [(String, RunningStats<T>)],
    bn: BatchNormConfig,
    x: Var,
    layer: &ConvBnRelu,
    mode: Mode,
) -> Result<Var> {
    let y = conv(tape, p, x, &layer.conv)?;
    let stats = &mut buffers[layer.bn.stats].1;
    let y = tape.batchnorm2d(y, p[layer.bn.gamma], p[layer.bn.beta], stats, mode, bn)?;
    tape.relu(y)
}

fn dense_forward<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound,
    buffers: &mut [(String, RunningStats<T>)],
    bn: BatchNormConfig,
    x: Var,
    block: &DenseBlock,
    mode: Mode,
) -> Result<Var> {
    let c = tape.try_value(x)?.shape().c;
    if c != block.in_channels {
        return Err(Error::shape(
            "dense_block",
            format!("input has {c} channels, block expects {}", block.in_channels),
        ));
    }
    let mut features = vec![x];
    for layer in &block.layers {
        let input = if features.len() == 1 {
            features[0]
        } else {
            tape.concat_channels(&features)?
        };
        features.push(conv_bn_relu(tape, p, buffers, bn, input, layer, mode)?);
    }
    let all = tape.concat_channels(&features)?;
    conv(tape, p, all, &block.transition)
}

/// Run one dense block in isolation (used for block-level checks).
pub fn dense_block_forward<T: Real>(
    model: &mut DaduModel<T>,
    tape: &mut Tape<T>,
    p: &Bound,
    x: Var,
    encoder_level: usize,
    mode: Mode,
) -> Result<Var> {
    let bn = model.bn;
    let block = model.encoders[encoder_level].dense.clone();
    dense_forward(tape, p, &mut model.buffers, bn, x, &block, mode)
}

const SOBEL_EPS: f64 = 1e-8;

/// Sobel gradient magnitude `sqrt(gx² + gy² + 1e-8)` of the channel mean,
/// with replicated borders. Returns `[n, 1, h, w]`; no gradient flows through it.
pub fn edge_features<T: Real>(features: &Tensor4<T>) -> Tensor4<T> {
    let s = features.shape();
    let plane = s.plane();
    let inv_c = T::one() / T::from_usize(s.c).unwrap();
    let eps = T::from_f64_lossy(SOBEL_EPS);
    let two = T::one() + T::one();
    let mut out = Vec::with_capacity(s.n * plane);
    let mut mean = vec![T::zero(); plane];
    for n in 0..s.n {
        mean.iter_mut().for_each(|m| *m = T::zero());
        for c in 0..s.c {
            let src = &features.values()[(n * s.c + c) * plane..(n * s.c + c + 1) * plane];
            mean.iter_mut().zip(src).for_each(|(m, &v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m *= inv_c);
        let at = |r: isize, c: isize| {
            let r = r.clamp(0, s.h as isize - 1) as usize;
            let c = c.clamp(0, s.w as isize - 1) as usize;
            mean[r * s.w + c]
        };
        for r in 0..s.h as isize {
            for c in 0..s.w as isize {
                let gx = (at(r - 1, c + 1) + two * at(r, c + 1) + at(r + 1, c + 1))
                    - (at(r - 1, c - 1) + two * at(r, c - 1) + at(r + 1, c - 1));
                let gy = (at(r + 1, c - 1) + two * at(r + 1, c) + at(r + 1, c + 1))
                    - (at(r - 1, c - 1) + two * at(r - 1, c) + at(r - 1, c + 1));
                out.push((gx * gx + gy * gy + eps).sqrt());
            }
        }
    }
    Tensor4::from_vec(Shape4::raw(s.n, 1, s.h, s.w), out).expect("edge shape")
}

/// Per-pixel argmax over the class axis.
pub fn argmax_masks<T: Real>(probs: &Tensor4<T>) -> Result<Vec<LabelMask>> {
    let s = probs.shape();
    let plane = s.plane();
    let v = probs.values();
    (0..s.n)
        .map(|n| {
            let labels = (0..plane)
                .map(|px| {
                    let mut best = 0;
                    for k in 1..s.c {
                        if v[(n * s.c + k) * plane + px] > v[(n * s.c + best) * plane + px] {
                            best = k;
                        }
                    }
                    best as u8
                })
                .collect();
            LabelMask::new(s.h, s.w, s.c, labels)
        })
        .collect()
}
