//! ADAM, the epoch loop, evaluation and cross-validation.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::data::{self, FoldSplit, Sample};
use crate::error::{Error, Result};
use crate::loss::{self, SupervisionWeights};
use crate::metrics::{self, CaseMetrics, LabelMask};
use crate::network::{DaduModel, ModelConfig};
use crate::ops::Mode;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Real> {
    pub config: AdamConfig,
    pub t: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        AdamState {
            config,
            t: 0,
            m: store.iter().map(|p| vec![T::zero(); p.value.len()]).collect(),
            v: store.iter().map(|p| vec![T::zero(); p.value.len()]).collect(),
        }
    }

    /// One bias-corrected update from the gradients held by `store`. Nothing
    /// is modified if any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if store.len() != self.m.len() {
            return Err(Error::shape(
                "adam_step",
                format!("{} parameters, optimizer tracks {}", store.len(), self.m.len()),
            ));
        }
        for p in store.iter() {
            if p.value.grad().is_some_and(|g| g.iter().any(|x| !x.is_finite())) {
                return Err(Error::NonFiniteGradient(p.name.clone()));
            }
        }
        self.t += 1;
        let c = self.config;
        let t = self.t as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::from_f64_lossy(c.beta1), T::from_f64_lossy(c.beta2));
        let (one_b1, one_b2) = (T::from_f64_lossy(1.0 - c.beta1), T::from_f64_lossy(1.0 - c.beta2));
        let inv_bc1 = T::from_f64_lossy(1.0 / bc1);
        let inv_bc2 = T::from_f64_lossy(1.0 / bc2);
        let lr = T::from_f64_lossy(c.lr);
        let eps = T::from_f64_lossy(c.epsilon);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let Some(g) = p.value.grad().map(<[T]>::to_vec) else { continue };
            for (i, theta) in p.value.values_mut().iter_mut().enumerate() {
                m[i] = b1 * m[i] + one_b1 * g[i];
                v[i] = b2 * v[i] + one_b2 * g[i] * g[i];
                let m_hat = m[i] * inv_bc1;
                let v_hat = v[i] * inv_bc2;
                *theta -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Rescale all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(store: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let total: f64 = store
        .iter()
        .filter_map(|p| p.value.grad())
        .flat_map(|g| g.iter().map(|x| x.to_f64_lossy().powi(2)))
        .sum();
    let norm = total.sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = T::from_f64_lossy(max_norm / norm);
        for p in store.iter_mut() {
            if let Some(g) = p.value.grad_mut() {
                g.iter_mut().for_each(|x| *x *= s);
            }
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Held-out fold for a single cross-validation run.
    pub fold: usize,
    pub folds: usize,
    /// Weight of every auxiliary supervision loss.
    pub eta: f64,
    pub seed: u64,
    /// Save a resumable checkpoint every N epochs; 0 disables.
    pub checkpoint_every: usize,
    /// Optional global gradient-norm clip.
    pub clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 10,
            lr: 1e-3,
            fold: 0,
            folds: data::DEFAULT_FOLDS,
            eta: 0.25,
            seed: 0,
            checkpoint_every: 0,
            clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return fail("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("learning rate {} must be positive", self.lr));
        }
        if self.folds < 2 {
            return fail(format!("{} folds; need at least 2", self.folds));
        }
        if self.fold >= self.folds {
            return fail(format!("fold {} outside 0..{}", self.fold, self.folds));
        }
        if self.clip.is_some_and(|c| !(c > 0.0)) {
            return fail("clip norm must be positive".into());
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

/// Anything that maps a batch of images to label masks.
pub trait Segmenter {
    fn segment(&mut self, images: &Tensor4<f32>) -> Result<Vec<LabelMask>>;
}

impl Segmenter for DaduModel<f32> {
    fn segment(&mut self, images: &Tensor4<f32>) -> Result<Vec<LabelMask>> {
        DaduModel::segment(self, images)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub cases: Vec<(String, CaseMetrics)>,
    /// Mean DSC of foreground classes `1..K`.
    pub class_dsc: Vec<f64>,
    /// Mean symmetric HD per foreground class over cases where it is defined.
    pub class_hd: Vec<Option<f64>>,
}

impl EvalReport {
    pub fn mean_dsc(&self) -> f64 {
        self.class_dsc.iter().sum::<f64>() / self.class_dsc.len().max(1) as f64
    }

    pub fn mean_hd(&self) -> Option<f64> {
        let d: Vec<f64> = self.class_hd.iter().flatten().copied().collect();
        (!d.is_empty()).then(|| d.iter().sum::<f64>() / d.len() as f64)
    }
}

/// Eval-mode prediction, argmax decoding and per-case metrics, averaged
/// without weighting.
pub fn evaluate<S: Segmenter + ?Sized>(
    model: &mut S,
    samples: &[Sample],
    batch_size: usize,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset("evaluation set".into()));
    }
    let mut cases = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let images: Vec<&Tensor4<f32>> = chunk.iter().map(|s| &s.image).collect();
        let preds = model.segment(&Tensor4::stack(&images)?)?;
        if preds.len() != chunk.len() {
            return Err(Error::shape(
                "evaluate",
                format!("{} predictions for {} images", preds.len(), chunk.len()),
            ));
        }
        for (pred, s) in preds.iter().zip(chunk) {
            cases.push((s.case_id.clone(), metrics::evaluate_case(pred, &s.mask)?));
        }
    }
    let classes = cases[0].1.per_class.len();
    let mut class_dsc = vec![0.0; classes];
    let mut hd_sum = vec![(0.0, 0usize); classes];
    for (_, m) in &cases {
        for (k, c) in m.per_class.iter().enumerate() {
            class_dsc[k] += c.dsc;
            if let Some(h) = c.hd.symmetric {
                hd_sum[k].0 += h;
                hd_sum[k].1 += 1;
            }
        }
    }
    class_dsc.iter_mut().for_each(|d| *d /= cases.len() as f64);
    let class_hd = hd_sum
        .into_iter()
        .map(|(s, n)| (n > 0).then(|| s / n as f64))
        .collect();
    Ok(EvalReport {
        cases,
        class_dsc,
        class_hd,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// One-based.
    pub epoch: usize,
    pub loss: f64,
    pub dsc: Vec<f64>,
    pub hd: Vec<Option<f64>>,
    pub seconds: f64,
}

impl EpochRecord {
    pub fn mean_dsc(&self) -> f64 {
        self.dsc.iter().sum::<f64>() / self.dsc.len().max(1) as f64
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

impl TrainLog {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// `epoch,loss,dsc_class1..,hd_class1..,seconds`; values use the shortest
    /// exact decimal form so a read-back log is identical.
    pub fn to_csv(&self, classes: usize) -> String {
        let mut s = String::from("epoch,loss");
        for k in 1..classes {
            let _ = write!(s, ",dsc_class{k}");
        }
        for k in 1..classes {
            let _ = write!(s, ",hd_class{k}");
        }
        s.push_str(",seconds\n");
        for r in &self.records {
            let _ = write!(s, "{},{}", r.epoch, r.loss);
            for d in &r.dsc {
                let _ = write!(s, ",{d}");
            }
            for h in &r.hd {
                let _ = write!(s, ",{}", opt(*h));
            }
            let _ = writeln!(s, ",{}", r.seconds);
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Config("empty training log".into()))?;
        let cols = header.split(',').count();
        if cols < 3 || (cols - 3) % 2 != 0 {
            return Err(Error::Config(format!("bad training log header `{header}`")));
        }
        let k = (cols - 3) / 2;
        let mut records = Vec::new();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = || Error::Config(format!("training log line {}: `{line}`", i + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != cols {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            let hd = f[2 + k..2 + 2 * k]
                .iter()
                .map(|s| if s.is_empty() { Ok(None) } else { num(s).map(Some) })
                .collect::<Result<_>>()?;
            records.push(EpochRecord {
                epoch: f[0].parse().map_err(|_| bad())?,
                loss: num(f[1])?,
                dsc: f[2..2 + k].iter().map(|s| num(s)).collect::<Result<_>>()?,
                hd,
                seconds: num(f[cols - 1])?,
            });
        }
        Ok(TrainLog { records })
    }
}

/// Seed of the shuffle for a given epoch; independent of earlier epochs so
/// resumed runs replay the same order.
fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0xd134_2543_de82_ef95)
}

pub const BEST_CHECKPOINT: &str = "best.dadu";
pub const LATEST_CHECKPOINT: &str = "latest.dadu";
pub const LATEST_STATE: &str = "latest.state";
pub const LOG_FILE: &str = "train_log.csv";

pub struct Trainer {
    pub model: DaduModel<f32>,
    pub adam: AdamState<f32>,
    pub config: TrainConfig,
    pub log: TrainLog,
    /// Best validation mean DSC so far and its epoch.
    pub best: Option<(usize, f64)>,
    pub best_model: Option<DaduModel<f32>>,
    weights: SupervisionWeights,
}

impl Trainer {
    pub fn new(model: ModelConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = DaduModel::new(model, config.seed)?;
        Self::from_model(model, config)
    }

    pub fn from_model(model: DaduModel<f32>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let weights = SupervisionWeights::uniform(model.config().supervision_paths, config.eta)?;
        Ok(Trainer {
            adam: AdamState::new(model.parameters(), config.adam()),
            model,
            config,
            log: TrainLog::default(),
            best: None,
            best_model: None,
            weights,
        })
    }

    pub fn epochs_done(&self) -> usize {
        self.log.len()
    }

    fn step(&mut self, batch: &[&Sample]) -> Result<f64> {
        let classes = self.model.config().num_classes;
        let (images, targets) = data::collate::<f32>(batch, classes)?;
        let mut tape = Tape::new();
        let (out, bound) = self.model.forward(&mut tape, &images, Mode::Train)?;
        let target = tape.constant(targets);
        let smooth = loss::DICE_SMOOTH as f32;
        let main = tape.dice_loss(out.main, target, smooth)?;
        let aux: Vec<Var> = out
            .aux
            .iter()
            .map(|&a| tape.dice_loss(a, target, smooth))
            .collect::<Result<_>>()?;
        let total = loss::deep_supervision_loss(&mut tape, main, &aux, &self.weights)?;
        let value = tape.value(total).item() as f64;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss {value} at epoch {}",
                self.epochs_done() + 1
            )));
        }
        tape.backward(total)?;
        let store = self.model.parameters_mut();
        store.zero_grads();
        store.accumulate(&tape, &bound)?;
        if let Some(c) = self.config.clip {
            clip_grad_norm(store, c);
        }
        self.adam.step(store)?;
        Ok(value)
    }

    /// One pass over `train` in seeded shuffled order; returns the mean batch loss.
    pub fn train_epoch(&mut self, train: &[Sample]) -> Result<f64> {
        if train.is_empty() {
            return Err(Error::EmptyDataset("training fold".into()));
        }
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed(
            self.config.seed,
            self.epochs_done(),
        )));
        let mut total = 0.0;
        let mut batches = 0;
        for idx in order.chunks(self.config.batch_size) {
            let batch: Vec<&Sample> = idx.iter().map(|&i| &train[i]).collect();
            total += self.step(&batch)?;
            batches += 1;
        }
        Ok(total / batches as f64)
    }

    /// Train and validate one epoch, tracking the best model.
    pub fn epoch(&mut self, train: &[Sample], val: &[Sample]) -> Result<&EpochRecord> {
        let start = Instant::now();
        let loss = self.train_epoch(train)?;
        let report = evaluate(&mut self.model, val, self.config.batch_size)?;
        let record = EpochRecord {
            epoch: self.epochs_done() + 1,
            loss,
            dsc: report.class_dsc.clone(),
            hd: report.class_hd.clone(),
            seconds: start.elapsed().as_secs_f64(),
        };
        let mean = report.mean_dsc();
        if self.best.is_none_or(|(_, b)| mean > b) {
            self.best = Some((record.epoch, mean));
            self.best_model = Some(self.model.clone());
        }
        self.log.records.push(record);
        Ok(self.log.records.last().expect("pushed"))
    }

    /// Run the remaining epochs. With `out_dir`, the best model, the
    /// training log and periodic resumable state are written there.
    pub fn fit(&mut self, train: &[Sample], val: &[Sample], out_dir: Option<&Path>) -> Result<()> {
        self.fit_with(train, val, out_dir, |_| {})
    }

    /// [`Trainer::fit`] calling `on_epoch` after every epoch.
    pub fn fit_with(
        &mut self,
        train: &[Sample],
        val: &[Sample],
        out_dir: Option<&Path>,
        mut on_epoch: impl FnMut(&EpochRecord),
    ) -> Result<()> {
        if let Some(dir) = out_dir {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        while self.epochs_done() < self.config.epochs {
            let improved_before = self.best.map(|b| b.0);
            on_epoch(self.epoch(train, val)?);
            let Some(dir) = out_dir else { continue };
            let classes = self.model.config().num_classes;
            let log_path = dir.join(LOG_FILE);
            fs::write(&log_path, self.log.to_csv(classes)).map_err(|e| Error::io(&log_path, e))?;
            if self.best.map(|b| b.0) != improved_before {
                checkpoint::save(&self.model, &dir.join(BEST_CHECKPOINT))?;
            }
            let every = self.config.checkpoint_every;
            if every > 0 && self.epochs_done().is_multiple_of(every) {
                self.save_state(dir)?;
            }
        }
        Ok(())
    }

    /// Write `latest.dadu` and `latest.state` (optimizer moments and progress).
    pub fn save_state(&self, dir: &Path) -> Result<()> {
        checkpoint::save(&self.model, &dir.join(LATEST_CHECKPOINT))?;
        let mut out = Vec::new();
        out.extend_from_slice(STATE_MAGIC);
        out.extend_from_slice(&(self.epochs_done() as u64).to_le_bytes());
        out.extend_from_slice(&self.adam.t.to_le_bytes());
        let (be, bd) = self.best.unwrap_or((0, f64::NAN));
        out.extend_from_slice(&(be as u64).to_le_bytes());
        out.extend_from_slice(&bd.to_le_bytes());
        out.extend_from_slice(&(self.adam.m.len() as u64).to_le_bytes());
        for (m, v) in self.adam.m.iter().zip(&self.adam.v) {
            out.extend_from_slice(&(m.len() as u64).to_le_bytes());
            m.iter().chain(v).for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        }
        let path = dir.join(LATEST_STATE);
        fs::write(&path, out).map_err(|e| Error::io(&path, e))
    }

    /// Continue from the state written by [`Trainer::save_state`] in `dir`.
    pub fn resume(dir: &Path, config: TrainConfig) -> Result<Self> {
        let model = checkpoint::load::<f32>(&dir.join(LATEST_CHECKPOINT))?;
        let mut trainer = Trainer::from_model(model, config)?;
        let path = dir.join(LATEST_STATE);
        let bytes = fs::read(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Missing(path.clone()),
            _ => Error::io(&path, e),
        })?;
        let mut r = StateReader { bytes: &bytes, pos: 0 };
        if r.take(4)? != STATE_MAGIC {
            return Err(Error::Checkpoint("not a training state file".into()));
        }
        let epochs = r.u64()? as usize;
        trainer.adam.t = r.u64()?;
        let be = r.u64()? as usize;
        let bd = f64::from_bits(r.u64()?);
        let count = r.u64()? as usize;
        if count != trainer.adam.m.len() {
            return Err(Error::Checkpoint("optimizer state does not match model".into()));
        }
        for i in 0..count {
            let n = r.u64()? as usize;
            if n != trainer.adam.m[i].len() {
                return Err(Error::Checkpoint("optimizer state does not match model".into()));
            }
            trainer.adam.m[i] = r.f32s(n)?;
            trainer.adam.v[i] = r.f32s(n)?;
        }
        let log_path = dir.join(LOG_FILE);
        let text = fs::read_to_string(&log_path).map_err(|e| Error::io(&log_path, e))?;
        let mut log = TrainLog::from_csv(&text)?;
        log.records.truncate(epochs);
        if log.len() != epochs {
            return Err(Error::Checkpoint(format!(
                "training log has {} epochs, state has {epochs}",
                log.len()
            )));
        }
        trainer.log = log;
        if !bd.is_nan() {
            trainer.best = Some((be, bd));
            let best = dir.join(BEST_CHECKPOINT);
            trainer.best_model = Some(if best.is_file() {
                checkpoint::load(&best)?
            } else {
                trainer.model.clone()
            });
        }
        Ok(trainer)
    }
}

const STATE_MAGIC: &[u8; 4] = b"DADS";

struct StateReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> StateReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::Checkpoint("truncated training state".into()))?;
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self
            .take(4 * n)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect())
    }
}

/// Samples whose ids appear in `ids`, in that order.
pub fn select(samples: &[Sample], ids: &[String]) -> Vec<Sample> {
    let by_id: std::collections::HashMap<&str, &Sample> =
        samples.iter().map(|s| (s.case_id.as_str(), s)).collect();
    ids.iter().filter_map(|id| by_id.get(id.as_str()).map(|&s| s.clone())).collect()
}

#[derive(Clone, Debug)]
pub struct FoldResult {
    pub fold: usize,
    pub best_epoch: usize,
    /// Validation metrics of the retained best model.
    pub report: EvalReport,
    pub log: TrainLog,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct CvReport {
    pub split: FoldSplit,
    pub folds: Vec<FoldResult>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len().max(1) as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// One aggregate row: label, mean and std of DSC, mean and std of HD.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregateRow {
    pub label: String,
    pub dsc: (f64, f64),
    pub hd: Option<(f64, f64)>,
}

impl CvReport {
    /// Per-class and overall mean/std across folds of the fold means.
    pub fn aggregate(&self) -> Vec<AggregateRow> {
        let classes = self.folds.first().map_or(0, |f| f.report.class_dsc.len());
        let mut rows = Vec::new();
        let row = |label: String, dsc: Vec<f64>, hd: Vec<f64>| AggregateRow {
            label,
            dsc: mean_std(&dsc),
            hd: (!hd.is_empty()).then(|| mean_std(&hd)),
        };
        for k in 0..classes {
            rows.push(row(
                format!("class{}", k + 1),
                self.folds.iter().map(|f| f.report.class_dsc[k]).collect(),
                self.folds.iter().filter_map(|f| f.report.class_hd[k]).collect(),
            ));
        }
        rows.push(row(
            "mean".into(),
            self.folds.iter().map(|f| f.report.mean_dsc()).collect(),
            self.folds.iter().filter_map(|f| f.report.mean_hd()).collect(),
        ));
        rows
    }
}

/// Train one model per fold, keep the best epoch of each by validation mean
/// DSC, and collect its metrics.
pub fn run_cv(
    samples: &[Sample],
    model: &ModelConfig,
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<CvReport> {
    config.validate()?;
    if samples.len() < config.folds {
        return Err(Error::EmptyDataset(format!(
            "{} cases for {} folds",
            samples.len(),
            config.folds
        )));
    }
    let ids: Vec<String> = samples.iter().map(|s| s.case_id.clone()).collect();
    let split = data::kfold_split(&ids, config.folds, config.seed)?;
    let mut folds = Vec::with_capacity(config.folds);
    for k in 0..config.folds {
        let (train_ids, val_ids) = split.train_val(k);
        let (train, val) = (select(samples, &train_ids), select(samples, &val_ids));
        let cfg = TrainConfig {
            fold: k,
            seed: config.seed.wrapping_add(k as u64),
            ..config.clone()
        };
        let dir = out_dir.map(|d| d.join(format!("fold{k}")));
        let mut trainer = Trainer::new(model.clone(), cfg)?;
        trainer.fit(&train, &val, dir.as_deref())?;
        let (best_epoch, _) = trainer.best.expect("at least one epoch");
        let mut best = trainer.best_model.take().expect("best model kept");
        let report = evaluate(&mut best, &val, config.batch_size)?;
        folds.push(FoldResult {
            fold: k,
            best_epoch,
            report,
            log: trainer.log,
            checkpoint: dir.map(|d| d.join(BEST_CHECKPOINT)),
        });
    }
    Ok(CvReport { split, folds })
}

