//! Central finite-difference checks of every backward rule, run in `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{self, DabState};
use crate::error::{Error, Result};
use crate::loss::{self, SupervisionWeights};
use crate::network::{DaduModel, ModelConfig};
use crate::ops::{BatchNormConfig, Mode, RunningStats};
use crate::params::{Bound, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Shape4, Tensor4};

/// Finite-difference step.
pub const STEP: f64 = 1e-4;
/// Maximum accepted relative error.
pub const TOLERANCE: f64 = 1e-3;
/// Gradients smaller than this are compared in absolute terms.
pub const ABS_FLOOR: f64 = 1e-6;

/// Every check the suite knows, in run order.
pub const OPS: &[&str] = &[
    "conv2d",
    "conv2d_strided",
    "maxpool2d",
    "global_avg_pool",
    "global_max_pool",
    "channelwise_avg",
    "channelwise_max",
    "batchnorm2d",
    "batchnorm2d_eval",
    "relu",
    "sigmoid",
    "elementwise_mul",
    "elementwise_add",
    "concat_channels",
    "upsample_bilinear",
    "channel_attention",
    "spatial_attention",
    "dab",
    "dice_loss",
    "deep_supervision_loss",
    "cam_sam_dice",
    "model",
];

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub op: String,
    pub checked: usize,
    pub max_rel_error: f64,
    /// Input index and flat offset of the worst coordinate.
    pub worst: (usize, usize),
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct CheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Coordinates sampled per input tensor; `None` checks all of them.
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Op whose backward rule is deliberately corrupted.
    pub fault: Option<String>,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            step: STEP,
            tolerance: TOLERANCE,
            max_coords: None,
            seed: 0,
            fault: None,
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

/// Compare the tape gradient of `build`'s scalar output with respect to every
/// input tensor against central differences.
pub fn check<F>(
    name: &str,
    mut inputs: Vec<Tensor4<f64>>,
    opts: &CheckOptions,
    mut build: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    if let Some(f) = &opts.fault {
        tape = tape.with_fault(f);
    }
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(&inputs)
        .map(|(&v, t)| tape.grad(v).map(<[f64]>::to_vec).unwrap_or(vec![0.0; t.len()]))
        .collect();
    drop(tape);

    let mut eval = |inputs: &[Tensor4<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let loss = build(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9e37_79b9);
    let mut report = GradCheckReport {
        op: name.to_string(),
        checked: 0,
        max_rel_error: 0.0,
        worst: (0, 0),
        passed: true,
    };
    for k in 0..inputs.len() {
        let len = inputs[k].len();
        let coords: Vec<usize> = match opts.max_coords {
            Some(m) if m < len => (0..m).map(|_| rng.random_range(0..len)).collect(),
            _ => (0..len).collect(),
        };
        for i in coords {
            let orig = inputs[k].values()[i];
            inputs[k].values_mut()[i] = orig + opts.step;
            let up = eval(&inputs)?;
            inputs[k].values_mut()[i] = orig - opts.step;
            let down = eval(&inputs)?;
            inputs[k].values_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * opts.step);
            let err = relative_error(analytic[k][i], numeric);
            report.checked += 1;
            if err > report.max_rel_error || err.is_nan() {
                report.max_rel_error = err;
                report.worst = (k, i);
            }
        }
    }
    report.passed = report.max_rel_error <= opts.tolerance;
    Ok(report)
}

/// Reduce a tensor to a scalar with fixed random weights so every output
/// element carries a distinct upstream gradient.
fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor4::uniform(tape.shape(out), -1.0, 1.0, &mut rng);
    let w = tape.constant(w);
    let p = tape.mul(out, w)?;
    tape.sum(p)
}

fn shape(n: usize, c: usize, h: usize, w: usize) -> Shape4 {
    Shape4::new(n, c, h, w).expect("static shape")
}

/// Well-separated values: a shuffled grid with jitter, so max ops have no
/// near-ties and ReLU inputs stay away from zero.
fn separated(s: Shape4, rng: &mut ChaCha8Rng) -> Tensor4<f64> {
    let len = s.len();
    let mut vals: Vec<f64> = (0..len)
        .map(|i| {
            let base = (i as f64 + 0.5) / len as f64 * 4.0 - 2.0;
            base + rng.random_range(-0.2..0.2) / len as f64
        })
        .collect();
    for i in (1..len).rev() {
        let j = rng.random_range(0..=i);
        vals.swap(i, j);
    }
    Tensor4::from_vec(s, vals).expect("shape")
}

fn one_hot_random(s: Shape4, rng: &mut ChaCha8Rng) -> Tensor4<f64> {
    let mut t = Tensor4::zeros(s);
    for n in 0..s.n {
        for h in 0..s.h {
            for w in 0..s.w {
                let k = rng.random_range(0..s.c);
                t.set(n, k, h, w, 1.0);
            }
        }
    }
    t
}

fn sam_store(channels: usize, rng: &mut ChaCha8Rng) -> (ParamStore<f64>, DabState) {
    let mut store = ParamStore::new();
    let st = DabState::new(&mut store, "gc", channels, rng);
    // perturb CAM weights away from exactly 1 and biases away from 0
    for p in store.iter_mut() {
        for v in p.value.values_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    (store, st)
}

fn run_one(name: &str, opts: &CheckOptions) -> Result<GradCheckReport> {
    let seed = opts.seed;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pseed = seed.wrapping_add(17);
    match name {
        "conv2d" => {
            let x = Tensor4::randn(shape(2, 3, 6, 6), &mut rng);
            let k = Tensor4::randn(shape(4, 3, 3, 3), &mut rng);
            let b = Tensor4::randn(shape(1, 4, 1, 1), &mut rng);
            check(name, vec![x, k, b], opts, |t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
                project(t, y, pseed)
            })
        }
        "conv2d_strided" => {
            let x = Tensor4::randn(shape(1, 2, 7, 7), &mut rng);
            let k = Tensor4::randn(shape(3, 2, 3, 3), &mut rng);
            check(name, vec![x, k], opts, |t, v| {
                let y = t.conv2d(v[0], v[1], None, 2, 1)?;
                project(t, y, pseed)
            })
        }
        "maxpool2d" => {
            let x = separated(shape(1, 2, 6, 5), &mut rng);
            check(name, vec![x], opts, |t, v| {
                let y = t.maxpool2d(v[0])?;
                project(t, y, pseed)
            })
        }
        "global_avg_pool" | "global_max_pool" | "channelwise_avg" | "channelwise_max" => {
            let x = separated(shape(2, 3, 4, 4), &mut rng);
            let op = name.to_string();
            check(name, vec![x], opts, move |t, v| {
                let y = match op.as_str() {
                    "global_avg_pool" => t.global_avg_pool(v[0])?,
                    "global_max_pool" => t.global_max_pool(v[0])?,
                    "channelwise_avg" => t.channelwise_avg(v[0])?,
                    _ => t.channelwise_max(v[0])?,
                };
                project(t, y, pseed)
            })
        }
        "batchnorm2d" | "batchnorm2d_eval" => {
            let x = Tensor4::randn(shape(2, 3, 4, 4), &mut rng);
            let g = Tensor4::uniform(shape(1, 3, 1, 1), 0.5, 1.5, &mut rng);
            let b = Tensor4::randn(shape(1, 3, 1, 1), &mut rng);
            let mode = if name == "batchnorm2d" { Mode::Train } else { Mode::Eval };
            let stats = RunningStats {
                mean: vec![0.1, -0.2, 0.3],
                var: vec![0.8, 1.2, 1.5],
            };
            check(name, vec![x, g, b], opts, move |t, v| {
                let mut st = stats.clone();
                let y = t.batchnorm2d(v[0], v[1], v[2], &mut st, mode, BatchNormConfig::default())?;
                project(t, y, pseed)
            })
        }
        "relu" => {
            let x = separated(shape(1, 2, 4, 4), &mut rng);
            check(name, vec![x], opts, |t, v| {
                let y = t.relu(v[0])?;
                project(t, y, pseed)
            })
        }
        "sigmoid" => {
            let x = Tensor4::randn(shape(1, 2, 4, 4), &mut rng);
            check(name, vec![x], opts, |t, v| {
                let y = t.sigmoid(v[0])?;
                project(t, y, pseed)
            })
        }
        "elementwise_mul" | "elementwise_add" => {
            let a = Tensor4::randn(shape(2, 3, 4, 4), &mut rng);
            let full = Tensor4::randn(shape(2, 3, 4, 4), &mut rng);
            let ch = Tensor4::randn(shape(2, 3, 1, 1), &mut rng);
            let sp = Tensor4::randn(shape(2, 1, 4, 4), &mut rng);
            let bc = Tensor4::randn(shape(1, 3, 1, 1), &mut rng);
            let mul = name == "elementwise_mul";
            check(name, vec![a, full, ch, sp, bc], opts, move |t, v| {
                let mut y = v[0];
                for &b in &v[1..] {
                    y = if mul { t.mul(y, b)? } else { t.add(y, b)? };
                }
                project(t, y, pseed)
            })
        }
        "concat_channels" => {
            let a = Tensor4::randn(shape(2, 1, 3, 3), &mut rng);
            let b = Tensor4::randn(shape(2, 2, 3, 3), &mut rng);
            check(name, vec![a, b], opts, |t, v| {
                let y = t.concat_channels(&[v[0], v[1], v[0]])?;
                project(t, y, pseed)
            })
        }
        "upsample_bilinear" => {
            let x = Tensor4::randn(shape(1, 2, 3, 4), &mut rng);
            check(name, vec![x], opts, |t, v| {
                let y = t.upsample_bilinear(v[0], 2)?;
                let z = t.upsample_bilinear(y, 2)?;
                project(t, z, pseed)
            })
        }
        "channel_attention" | "spatial_attention" | "dab" => {
            let c = 2;
            let (store, st) = sam_store(c, &mut rng);
            let e = separated(shape(1, c, 4, 4), &mut rng);
            let d = separated(shape(1, c, 4, 4), &mut rng);
            let mut inputs = vec![e, d];
            inputs.extend(store.iter().map(|p| p.value.detached()));
            let op = name.to_string();
            check(name, inputs, opts, move |t, v| {
                let bound = Bound::from_vars(v[2..].to_vec());
                let y = match op.as_str() {
                    "channel_attention" => {
                        attention::channel_attention(t, &bound, v[0], v[1], &st.cam)?
                    }
                    "spatial_attention" => {
                        attention::spatial_attention(t, &bound, v[0], v[1], &st.sam)?
                    }
                    _ => attention::dab(t, &bound, v[0], v[1], &st)?.0,
                };
                project(t, y, pseed)
            })
        }
        "dice_loss" => {
            let s = shape(1, 2, 4, 4);
            let p = Tensor4::uniform(s, 0.05, 0.95, &mut rng);
            let target = one_hot_random(s, &mut rng);
            check(name, vec![p], opts, move |t, v| {
                let tg = t.constant(target.clone());
                t.dice_loss(v[0], tg, loss::DICE_SMOOTH)
            })
        }
        "deep_supervision_loss" => {
            let terms: Vec<Tensor4<f64>> = (0..4)
                .map(|_| Tensor4::scalar(rng.random_range(0.1..0.9)))
                .collect();
            let weights = SupervisionWeights::new(vec![0.25, 0.5, 0.125])?;
            check(name, terms, opts, move |t, v| {
                // square each term so the weights meet a non-trivial upstream
                let sq: Vec<Var> = v.iter().map(|&x| t.mul(x, x)).collect::<Result<_>>()?;
                loss::deep_supervision_loss(t, sq[0], &sq[1..], &weights)
            })
        }
        "cam_sam_dice" => {
            // CAM -> SAM -> Dice on a 1x2x4x4 pair, every parameter checked
            let c = 2;
            let (store, st) = sam_store(c, &mut rng);
            let e = separated(shape(1, c, 4, 4), &mut rng);
            let d = separated(shape(1, c, 4, 4), &mut rng);
            let target = one_hot_random(shape(1, 1, 4, 4), &mut rng);
            let mut inputs = vec![e, d];
            inputs.extend(store.iter().map(|p| p.value.detached()));
            check(name, inputs, opts, move |t, v| {
                let bound = Bound::from_vars(v[2..].to_vec());
                let m_ch = attention::channel_attention(t, &bound, v[0], v[1], &st.cam)?;
                let ce = t.mul(v[0], m_ch)?;
                let cd = t.mul(v[1], m_ch)?;
                let m_sp = attention::spatial_attention(t, &bound, ce, cd, &st.sam)?;
                let tg = t.constant(target.clone());
                t.dice_loss(m_sp, tg, loss::DICE_SMOOTH)
            })
        }
        "model" => check_model(opts),
        other => Err(Error::Config(format!("unknown gradcheck op `{other}`"))),
    }
}

fn check_model(opts: &CheckOptions) -> Result<GradCheckReport> {
    let seed = opts.seed;
    let cfg = ModelConfig::with_levels(2, 2);
    let mut model = DaduModel::<f64>::new(cfg.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(3));
    let image = Tensor4::uniform(shape(2, 1, 8, 8), 0.0, 1.0, &mut rng);
    let target = one_hot_random(shape(2, cfg.num_classes, 8, 8), &mut rng);
    let weights = SupervisionWeights::uniform(cfg.supervision_paths, 0.25)?;

    // edge maps are a stopped-gradient input; hold them fixed at the base point
    let mut tape = Tape::new();
    let (out, _) = model.forward(&mut tape, &image, Mode::Train)?;
    let edges: Vec<Tensor4<f64>> = out.edges.iter().map(|&e| tape.value(e).detached()).collect();

    let inputs: Vec<Tensor4<f64>> = model.parameters().iter().map(|p| p.value.detached()).collect();
    let mut opts = opts.clone();
    opts.max_coords = opts.max_coords.or(Some(12));
    check("model", inputs, &opts, move |t, v| {
        let bound = Bound::from_vars(v.to_vec());
        let x = t.constant(image.clone());
        let out = model.forward_with_edges(t, &bound, x, Mode::Train, Some(&edges))?;
        let tg = t.constant(target.clone());
        let main = t.dice_loss(out.main, tg, loss::DICE_SMOOTH)?;
        let aux: Vec<Var> = out
            .aux
            .iter()
            .map(|&a| t.dice_loss(a, tg, loss::DICE_SMOOTH))
            .collect::<Result<_>>()?;
        loss::deep_supervision_loss(t, main, &aux, &weights)
    })
}

/// Run the named checks (`["all"]` for every op).
pub fn run_suite(ops: &[&str], opts: &CheckOptions) -> Result<Vec<GradCheckReport>> {
    let names: Vec<&str> = if ops.contains(&"all") {
        OPS.to_vec()
    } else {
        ops.to_vec()
    };
    names.iter().map(|n| run_one(n, opts)).collect()
}
