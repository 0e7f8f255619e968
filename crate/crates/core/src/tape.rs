//! Define-by-run reverse-mode differentiation.
//!
//! Every op appends a node holding its output value and enough saved state
//! to run its backward rule. Nodes are appended in execution order, so the
//! node list is always topologically sorted and `backward` is a single
//! reverse sweep.

use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};
use crate::loss;
use crate::ops::conv::{self, ConvGeometry};
use crate::ops::elementwise::{self, BatchNormConfig, BatchNormSaved, Broadcast, Mode, RunningStats};
use crate::ops::pool::{self, AxisTaps};
use crate::tensor::{Real, Shape4, Tensor4};

static NEXT_TAPE: AtomicUsize = AtomicUsize::new(1);

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: usize,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

enum Op<T: Real> {
    Leaf,
    Conv2d {
        input: usize,
        kernel: usize,
        bias: Option<usize>,
        geom: ConvGeometry,
    },
    MaxPool2d {
        input: usize,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        input: usize,
    },
    GlobalMaxPool {
        input: usize,
        argmax: Vec<usize>,
    },
    ChannelAvg {
        input: usize,
    },
    ChannelMax {
        input: usize,
        argmax: Vec<usize>,
    },
    BatchNorm {
        input: usize,
        gamma: usize,
        beta: usize,
        saved: BatchNormSaved<T>,
    },
    Relu {
        input: usize,
    },
    Sigmoid {
        input: usize,
    },
    Add {
        a: usize,
        b: usize,
        bc: Broadcast,
    },
    Mul {
        a: usize,
        b: usize,
        bc: Broadcast,
    },
    Concat {
        parts: Vec<usize>,
    },
    Resize {
        input: usize,
        ty: AxisTaps<T>,
        tx: AxisTaps<T>,
    },
    Sum {
        input: usize,
    },
    DiceLoss {
        probs: usize,
        target: usize,
        smooth: T,
    },
    WeightedSum {
        terms: Vec<(usize, T)>,
    },
}

impl<T: Real> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2d { .. } => "maxpool2d",
            Op::GlobalAvgPool { .. } => "global_avg_pool",
            Op::GlobalMaxPool { .. } => "global_max_pool",
            Op::ChannelAvg { .. } => "channelwise_avg",
            Op::ChannelMax { .. } => "channelwise_max",
            Op::BatchNorm { .. } => "batchnorm2d",
            Op::Relu { .. } => "relu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Concat { .. } => "concat_channels",
            Op::Resize { .. } => "upsample_bilinear",
            Op::Sum { .. } => "sum",
            Op::DiceLoss { .. } => "dice_loss",
            Op::WeightedSum { .. } => "weighted_sum",
        }
    }
}

struct Node<T: Real> {
    value: Tensor4<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Operation record for one forward pass.
pub struct Tape<T: Real> {
    id: usize,
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    retain_grads: bool,
    fault: Option<String>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            retain_grads: false,
            fault: None,
        }
    }

    /// Keep gradients of intermediate nodes after `backward`, not only leaves.
    pub fn retain_grads(mut self) -> Self {
        self.retain_grads = true;
        self
    }

    /// Test hook: the backward rule of every op named `op` returns gradients
    /// scaled by 1.5.
    #[doc(hidden)]
    pub fn with_fault(mut self, op: &str) -> Self {
        self.fault = Some(op.to_string());
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::ForeignVar);
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor4<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor4<T>, requires_grad: bool) -> Var {
        let value = value.detached();
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Tracked copy of a learnable tensor.
    pub fn param(&mut self, value: &Tensor4<T>) -> Var {
        self.push(value.detached(), Op::Leaf, true)
    }

    /// Untracked input (images, targets, fixed feature maps).
    pub fn constant(&mut self, value: Tensor4<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor4<T> {
        &self.nodes[self.idx(v).expect("var from another tape")].value
    }

    pub fn try_value(&self, v: Var) -> Result<&Tensor4<T>> {
        Ok(&self.nodes[self.idx(v)?].value)
    }

    pub fn shape(&self, v: Var) -> Shape4 {
        self.value(v).shape()
    }

    /// Accumulated gradient of `v`, if it received one.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.idx(v).ok().and_then(|i| self.grads[i].as_deref())
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.idx(v).map(|i| self.rg(i)).unwrap_or(false)
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.idx(v).map(|i| self.nodes[i].op.name()).unwrap_or("?")
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    // ---- ops -------------------------------------------------------------

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (i, k) = (self.idx(input)?, self.idx(kernel)?);
        let b = bias.map(|b| self.idx(b)).transpose()?;
        let (value, geom) = conv::conv2d_forward(
            &self.nodes[i].value,
            &self.nodes[k].value,
            b.map(|b| &self.nodes[b].value),
            stride,
            padding,
        )?;
        let rg = self.rg(i) || self.rg(k) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            value,
            Op::Conv2d {
                input: i,
                kernel: k,
                bias: b,
                geom,
            },
            rg,
        ))
    }

    pub fn maxpool2d(&mut self, input: Var) -> Result<Var> {
        let i = self.idx(input)?;
        let (value, argmax) = pool::maxpool2d_forward(&self.nodes[i].value);
        let rg = self.rg(i);
        Ok(self.push(value, Op::MaxPool2d { input: i, argmax }, rg))
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let i = self.idx(input)?;
        let value = pool::global_avg_pool_forward(&self.nodes[i].value);
        let rg = self.rg(i);
        Ok(self.push(value, Op::GlobalAvgPool { input: i }, rg))
    }

    pub fn global_max_pool(&mut self, input: Var) -> Result<Var> {
        let i = self.idx(input)?;
        let (value, argmax) = pool::global_max_pool_forward(&self.nodes[i].value);
        let rg = self.rg(i);
        Ok(self.push(value, Op::GlobalMaxPool { input: i, argmax }, rg))
    }

    pub fn channelwise_avg(&mut self, input: Var) -> Result<Var> {
        let i = self.idx(input)?;
        let value = pool::channelwise_avg_forward(&self.nodes[i].value);
        let rg = self.rg(i);
        Ok(self.push(value, Op::ChannelAvg { input: i }, rg))
    }

    pub fn channelwise_max(&mut self, input: Var) -> Result<Var> {
        let i = self.idx(input)?;
        let (value, argmax) = pool::channelwise_max_forward(&self.nodes[i].value);
        let rg = self.rg(i);
        Ok(self.push(value, Op::ChannelMax { input: i, argmax }, rg))
    }

    pub fn batchnorm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats<T>,
        mode: Mode,
        cfg: BatchNormConfig,
    ) -> Result<Var> {
        let (i, g, b) = (self.idx(input)?, self.idx(gamma)?, self.idx(beta)?);
        let (value, saved) = elementwise::batchnorm_forward(
            &self.nodes[i].value,
            &self.nodes[g].value,
            &self.nodes[b].value,
            stats,
            mode,
            cfg,
        )?;
        let rg = self.rg(i) || self.rg(g) || self.rg(b);
        Ok(self.push(
            value,
            Op::BatchNorm {
                input: i,
                gamma: g,
                beta: b,
                saved,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let i = self.idx(input)?;
        let value = elementwise::relu_forward(&self.nodes[i].value);
        let rg = self.rg(i);
        Ok(self.push(value, Op::Relu { input: i }, rg))
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        let i = self.idx(input)?;
        let value = elementwise::sigmoid_forward(&self.nodes[i].value);
        let rg = self.rg(i);
        Ok(self.push(value, Op::Sigmoid { input: i }, rg))
    }

    /// `a ⊕ b`; `b` may broadcast over any axis where its extent is 1.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let bc = Broadcast::new(
            "elementwise_add",
            self.nodes[ia].value.shape(),
            self.nodes[ib].value.shape(),
        )?;
        let value = elementwise::add_forward(&self.nodes[ia].value, &self.nodes[ib].value, &bc);
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(value, Op::Add { a: ia, b: ib, bc }, rg))
    }

    /// `a ⊗ b`; `b` may broadcast over any axis where its extent is 1.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let bc = Broadcast::new(
            "elementwise_mul",
            self.nodes[ia].value.shape(),
            self.nodes[ib].value.shape(),
        )?;
        let value = elementwise::mul_forward(&self.nodes[ia].value, &self.nodes[ib].value, &bc);
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(value, Op::Mul { a: ia, b: ib, bc }, rg))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let idx = parts
            .iter()
            .map(|&p| self.idx(p))
            .collect::<Result<Vec<_>>>()?;
        let first = idx
            .first()
            .map(|&i| self.nodes[i].value.shape())
            .ok_or_else(|| Error::shape("concat_channels", "no inputs"))?;
        let mut c = 0;
        for &i in &idx {
            let s = self.nodes[i].value.shape();
            if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
                return Err(Error::shape("concat_channels", format!("{s} vs {first}")));
            }
            c += s.c;
        }
        let shape = Shape4::raw(first.n, c, first.h, first.w);
        let plane = first.plane();
        let mut values = Vec::with_capacity(shape.len());
        for n in 0..first.n {
            for &i in &idx {
                let v = &self.nodes[i].value;
                let len = v.shape().c * plane;
                values.extend_from_slice(&v.values()[n * len..(n + 1) * len]);
            }
        }
        let rg = idx.iter().any(|&i| self.rg(i));
        Ok(self.push(
            Tensor4::from_vec(shape, values)?,
            Op::Concat { parts: idx },
            rg,
        ))
    }

    /// Bilinear upsampling by an integer factor (align-corners false).
    pub fn upsample_bilinear(&mut self, input: Var, factor: usize) -> Result<Var> {
        pool::check_factor("upsample_bilinear", factor)?;
        let i = self.idx(input)?;
        let s = self.nodes[i].value.shape();
        let (value, ty, tx) =
            pool::resize_bilinear_forward(&self.nodes[i].value, s.h * factor, s.w * factor);
        let rg = self.rg(i);
        Ok(self.push(value, Op::Resize { input: i, ty, tx }, rg))
    }

    /// Sum of all elements as a 1×1×1×1 tensor.
    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let i = self.idx(input)?;
        let value = Tensor4::scalar(self.nodes[i].value.sum());
        let rg = self.rg(i);
        Ok(self.push(value, Op::Sum { input: i }, rg))
    }

    /// Soft Dice loss, see [`loss::dice_loss_value`].
    pub fn dice_loss(&mut self, probs: Var, target: Var, smooth: T) -> Result<Var> {
        let (p, t) = (self.idx(probs)?, self.idx(target)?);
        let value = loss::dice_loss_value(&self.nodes[p].value, &self.nodes[t].value, smooth)?;
        let rg = self.rg(p);
        Ok(self.push(
            Tensor4::scalar(value),
            Op::DiceLoss {
                probs: p,
                target: t,
                smooth,
            },
            rg,
        ))
    }

    /// `Σ wᵢ·xᵢ` over scalar terms.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let mut idx = Vec::with_capacity(terms.len());
        let mut total = T::zero();
        for &(v, w) in terms {
            let i = self.idx(v)?;
            let s = self.nodes[i].value.shape();
            if s != Shape4::scalar() {
                return Err(Error::shape("weighted_sum", format!("term of shape {s}")));
            }
            total += w * self.nodes[i].value.item();
            idx.push((i, w));
        }
        let rg = idx.iter().any(|&(i, _)| self.rg(i));
        Ok(self.push(Tensor4::scalar(total), Op::WeightedSum { terms: idx }, rg))
    }

    // ---- backward --------------------------------------------------------

    /// Populate gradients of every tracked tensor with `∂loss/∂tensor`.
    /// Leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = self.idx(loss)?;
        let shape = self.nodes[root].value.shape();
        if shape != Shape4::scalar() {
            return Err(Error::NonScalarLoss(shape.to_string()));
        }
        if !self.rg(root) {
            return Ok(());
        }
        let mut work: Vec<Option<Vec<T>>> = (0..=root).map(|_| None).collect();
        work[root] = Some(vec![T::one()]);
        for i in (0..=root).rev() {
            let Some(g) = work[i].take() else { continue };
            if !self.rg(i) {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                match self.grads[i].as_mut() {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    None => self.grads[i] = Some(g),
                }
                continue;
            }
            for (j, gj) in self.input_grads(i, &g) {
                if !self.rg(j) {
                    continue;
                }
                match work[j].as_mut() {
                    Some(acc) => acc.iter_mut().zip(&gj).for_each(|(a, &b)| *a += b),
                    None => work[j] = Some(gj),
                }
            }
            if self.retain_grads {
                self.grads[i] = Some(g);
            }
        }
        Ok(())
    }

    /// Gradient contributions `v` receives from each node that consumed it,
    /// using retained gradients from the last `backward`. Requires
    /// [`Tape::retain_grads`].
    pub fn contributions(&self, v: Var) -> Result<Vec<(Var, Vec<T>)>> {
        let target = self.idx(v)?;
        let mut out = Vec::new();
        for i in target + 1..self.nodes.len() {
            let Some(g) = self.grads[i].as_deref() else { continue };
            if !self.consumes(i, target) {
                continue;
            }
            let mut acc: Option<Vec<T>> = None;
            for (j, gj) in self.input_grads(i, g) {
                if j != target {
                    continue;
                }
                match acc.as_mut() {
                    Some(a) => a.iter_mut().zip(&gj).for_each(|(a, &b)| *a += b),
                    None => acc = Some(gj),
                }
            }
            if let Some(acc) = acc {
                out.push((
                    Var {
                        tape: self.id,
                        index: i,
                    },
                    acc,
                ));
            }
        }
        Ok(out)
    }

    fn consumes(&self, node: usize, target: usize) -> bool {
        match &self.nodes[node].op {
            Op::Leaf => false,
            Op::Conv2d {
                input,
                kernel,
                bias,
                ..
            } => *input == target || *kernel == target || *bias == Some(target),
            Op::MaxPool2d { input, .. }
            | Op::GlobalAvgPool { input }
            | Op::GlobalMaxPool { input, .. }
            | Op::ChannelAvg { input }
            | Op::ChannelMax { input, .. }
            | Op::Relu { input }
            | Op::Sigmoid { input }
            | Op::Resize { input, .. }
            | Op::Sum { input } => *input == target,
            Op::BatchNorm {
                input, gamma, beta, ..
            } => *input == target || *gamma == target || *beta == target,
            Op::Add { a, b, .. } | Op::Mul { a, b, .. } => *a == target || *b == target,
            Op::Concat { parts } => parts.contains(&target),
            Op::DiceLoss { probs, target: t, .. } => *probs == target || *t == target,
            Op::WeightedSum { terms } => terms.iter().any(|&(i, _)| i == target),
        }
    }

    /// Backward rule of node `i` given its output gradient `g`.
    fn input_grads(&self, i: usize, g: &[T]) -> Vec<(usize, Vec<T>)> {
        let node = &self.nodes[i];
        let val = |j: usize| &self.nodes[j].value;
        let mut out: Vec<(usize, Vec<T>)> = match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let need = [self.rg(*input), self.rg(*kernel), bias.is_some_and(|b| self.rg(b))];
                let grads = conv::conv2d_backward(geom, val(*input), val(*kernel), g, need);
                let mut v = Vec::new();
                if let Some(dx) = grads.input {
                    v.push((*input, dx));
                }
                if let Some(dk) = grads.kernel {
                    v.push((*kernel, dk));
                }
                if let (Some(b), Some(db)) = (bias, grads.bias) {
                    v.push((*b, db));
                }
                v
            }
            Op::MaxPool2d { input, argmax }
            | Op::GlobalMaxPool { input, argmax }
            | Op::ChannelMax { input, argmax } => {
                let mut dx = vec![T::zero(); val(*input).len()];
                for (&a, &gv) in argmax.iter().zip(g) {
                    dx[a] += gv;
                }
                vec![(*input, dx)]
            }
            Op::GlobalAvgPool { input } => {
                let s = val(*input).shape();
                let inv = T::one() / T::from_usize(s.plane()).unwrap();
                let mut dx = vec![T::zero(); s.len()];
                for (plane, &gv) in dx.chunks_mut(s.plane()).zip(g) {
                    plane.iter_mut().for_each(|d| *d = gv * inv);
                }
                vec![(*input, dx)]
            }
            Op::ChannelAvg { input } => {
                let s = val(*input).shape();
                let plane = s.plane();
                let inv = T::one() / T::from_usize(s.c).unwrap();
                let mut dx = vec![T::zero(); s.len()];
                for n in 0..s.n {
                    let src = &g[n * plane..(n + 1) * plane];
                    for c in 0..s.c {
                        let dst = &mut dx[(n * s.c + c) * plane..(n * s.c + c + 1) * plane];
                        dst.iter_mut().zip(src).for_each(|(d, &gv)| *d = gv * inv);
                    }
                }
                vec![(*input, dx)]
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                saved,
            } => {
                let (dx, dg, db) = elementwise::batchnorm_backward(
                    val(*input).shape(),
                    val(*gamma).values(),
                    saved,
                    g,
                );
                vec![(*input, dx), (*gamma, dg), (*beta, db)]
            }
            Op::Relu { input } => {
                let dx = val(*input)
                    .values()
                    .iter()
                    .zip(g)
                    .map(|(&x, &gv)| if x > T::zero() { gv } else { T::zero() })
                    .collect();
                vec![(*input, dx)]
            }
            Op::Sigmoid { input } => {
                let dx = node
                    .value
                    .values()
                    .iter()
                    .zip(g)
                    .map(|(&s, &gv)| gv * s * (T::one() - s))
                    .collect();
                vec![(*input, dx)]
            }
            Op::Add { a, b, bc } => {
                vec![(*a, g.to_vec()), (*b, elementwise::reduce_to_small(bc, g))]
            }
            Op::Mul { a, b, bc } => {
                let (av, bv) = (val(*a).values(), val(*b).values());
                let mut da = g.to_vec();
                let mut gb = g.to_vec();
                if bc.is_identity() {
                    da.iter_mut().zip(bv).for_each(|(d, &x)| *d *= x);
                    gb.iter_mut().zip(av).for_each(|(d, &x)| *d *= x);
                } else {
                    bc.for_each(|i, j| {
                        da[i] *= bv[j];
                        gb[i] *= av[i];
                    });
                }
                vec![(*a, da), (*b, elementwise::reduce_to_small(bc, &gb))]
            }
            Op::Concat { parts } => {
                let s = node.value.shape();
                let plane = s.plane();
                let mut offset = 0;
                let mut v = Vec::with_capacity(parts.len());
                for &p in parts {
                    let pc = val(p).shape().c;
                    let mut dx = Vec::with_capacity(val(p).len());
                    for n in 0..s.n {
                        let base = (n * s.c + offset) * plane;
                        dx.extend_from_slice(&g[base..base + pc * plane]);
                    }
                    offset += pc;
                    v.push((p, dx));
                }
                v
            }
            Op::Resize { input, ty, tx } => {
                let dx = pool::resize_bilinear_backward(val(*input).shape(), ty, tx, g);
                vec![(*input, dx)]
            }
            Op::Sum { input } => vec![(*input, vec![g[0]; val(*input).len()])],
            Op::DiceLoss {
                probs,
                target,
                smooth,
            } => {
                let dp = loss::dice_loss_grad(val(*probs), val(*target), *smooth, g[0]);
                vec![(*probs, dp)]
            }
            Op::WeightedSum { terms } => terms.iter().map(|&(j, w)| (j, vec![w * g[0]])).collect(),
        };
        if self.fault.as_deref() == Some(node.op.name()) {
            let k = T::from_f64_lossy(1.5);
            for (_, d) in out.iter_mut() {
                d.iter_mut().for_each(|v| *v *= k);
            }
        }
        out
    }
}
