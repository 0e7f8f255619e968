use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use dadu::checkpoint;
use dadu::data::{self, LoadOptions, Sample};
use dadu::gradcheck::{self, CheckOptions};
use dadu::metrics::{self, LabelMask};
use dadu::network::{self, DaduModel};
use dadu::tensor::Tensor4;
use dadu::train::{self, EvalReport, TrainConfig, Trainer};
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};

pub const EXIT_MISSING: u8 = 2;
pub const EXIT_CONFIG: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;
pub const EXIT_GRADCHECK: u8 = 5;

/// Background black, RV red, LMyo green, LV blue.
pub const PALETTE: [u8; 12] = [0, 0, 0, 255, 0, 0, 0, 255, 0, 0, 0, 255];

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] dadu::Error),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error("cannot write {0}: {1}")]
    Write(PathBuf, #[source] std::io::Error),
    #[error("gradient check failed for: {}", .0.join(", "))]
    GradCheck(Vec<String>),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        use dadu::Error as E;
        match self {
            CliError::Config(ConfigError::Read(_, e)) if e.kind() == std::io::ErrorKind::NotFound => {
                EXIT_MISSING
            }
            CliError::Config(_) | CliError::Usage(_) => EXIT_CONFIG,
            CliError::GradCheck(_) => EXIT_GRADCHECK,
            CliError::Write(..) => 1,
            CliError::Core(e) => match e {
                E::Missing(_)
                | E::Decode { .. }
                | E::MaskLabel { .. }
                | E::ExtentMismatch { .. }
                | E::EmptyDataset(_)
                | E::Checkpoint(_) => EXIT_MISSING,
                E::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => EXIT_MISSING,
                E::Config(_) | E::Indivisible { .. } => EXIT_CONFIG,
                E::NonFinite(_) | E::NonFiniteGradient(_) => EXIT_NUMERIC,
                _ => 1,
            },
        }
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::Write(dir.to_path_buf(), e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::Write(path.to_path_buf(), e))
}

pub fn class_name(classes: usize, k: u8) -> String {
    match (classes, k) {
        (data::NUM_CLASSES, data::RV) => "RV".into(),
        (data::NUM_CLASSES, data::LMYO) => "LMyo".into(),
        (data::NUM_CLASSES, data::LV) => "LV".into(),
        _ => format!("class{k}"),
    }
}

fn field(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_default()
}

/// `class  DSC  HD` per foreground class plus the unweighted mean.
pub fn summary_table(report: &EvalReport) -> String {
    let classes = report.class_dsc.len() + 1;
    let mut s = String::from("class\tDSC\tHD\n");
    for (k, (d, h)) in report.class_dsc.iter().zip(&report.class_hd).enumerate() {
        let name = class_name(classes, k as u8 + 1);
        s.push_str(&format!("{name}\t{d:.4}\t{}\n", field(*h)));
    }
    s.push_str(&format!("mean\t{:.4}\t{}\n", report.mean_dsc(), field(report.mean_hd())));
    s
}

pub fn synth(out: &Path, count: usize, size: usize, seed: u64, noise: f64) -> Result<(), CliError> {
    if count == 0 {
        return Err(CliError::Usage("--count must be at least 1".into()));
    }
    let samples = data::phantom_set(count, size, seed, noise)?;
    data::write_dataset(out, &samples)?;
    eprintln!("wrote {count} phantoms to {}", out.display());
    Ok(())
}

fn load_options(size: Option<usize>, classes: usize) -> LoadOptions {
    LoadOptions {
        extent: size.map(|s| (s, s)),
        classes: Some(classes),
        ..LoadOptions::default()
    }
}

fn progress(label: &str) -> impl FnMut(&train::EpochRecord) + '_ {
    move |r| {
        let d: Vec<String> = r.dsc.iter().map(|x| format!("{x:.3}")).collect();
        eprintln!(
            "{label}epoch {} loss {:.4} dsc {:.4} [{}] {:.1}s",
            r.epoch,
            r.loss,
            r.mean_dsc(),
            d.join(" "),
            r.seconds
        );
    }
}

/// Train one model into `dir` and return its best-epoch validation report.
fn train_one(
    cfg: &RunConfig,
    tcfg: TrainConfig,
    trainset: &[Sample],
    val: &[Sample],
    dir: &Path,
    resume: bool,
    label: &str,
) -> Result<EvalReport, CliError> {
    let state = dir.join(train::LATEST_STATE);
    let mut trainer = if resume && state.is_file() {
        let t = Trainer::resume(dir, tcfg)?;
        if t.model.config() != &cfg.model {
            return Err(CliError::Usage(format!(
                "{} was trained with a different model configuration",
                dir.display()
            )));
        }
        eprintln!("{label}resuming after epoch {}", t.epochs_done());
        t
    } else {
        Trainer::new(cfg.model.clone(), tcfg)?
    };
    trainer.fit_with(trainset, val, Some(dir), progress(label))?;
    let mut best = match trainer.best_model.take() {
        Some(m) => m,
        None => checkpoint::load(&dir.join(train::BEST_CHECKPOINT))?,
    };
    let report = train::evaluate(&mut best, val, trainer.config.batch_size)?;
    let csv = dir.join("metrics.csv");
    let mut buf = Vec::new();
    metrics::write_metrics_csv(&mut buf, &report.cases).map_err(|e| CliError::Write(csv.clone(), e))?;
    write_file(&csv, &buf)?;
    Ok(report)
}

pub fn train(
    config: &Path,
    fold: Option<usize>,
    resume: bool,
    overrides: &[String],
) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(config)?;
    cfg.apply(overrides)?;
    if let Some(k) = fold {
        cfg.fold = Some(k);
        cfg.train.fold = k;
    }
    cfg.model.validate()?;
    cfg.train.validate()?;
    let Some(root) = cfg.data.clone() else {
        return Err(CliError::Usage(format!("{}: no `data` key", config.display())));
    };
    let opts = load_options(cfg.size, cfg.model.num_classes);
    let samples = data::load_dataset(&root, &opts)?;
    if resume {
        let any_state = if cfg.val_data.is_some() || cfg.fold.is_some() {
            let dir = match cfg.fold {
                Some(k) if cfg.val_data.is_none() => cfg.out.join(format!("fold{k}")),
                _ => cfg.out.clone(),
            };
            dir.join(train::LATEST_STATE)
        } else {
            cfg.out.join("fold0").join(train::LATEST_STATE)
        };
        if !any_state.is_file() {
            return Err(dadu::Error::Missing(any_state).into());
        }
    }

    if let Some(val_root) = &cfg.val_data {
        let val = data::load_dataset(val_root, &opts)?;
        let report = train_one(&cfg, cfg.train.clone(), &samples, &val, &cfg.out, resume, "")?;
        print!("{}", summary_table(&report));
        return Ok(());
    }

    let ids: Vec<String> = samples.iter().map(|s| s.case_id.clone()).collect();
    let split = data::kfold_split(&ids, cfg.train.folds, cfg.train.seed)?;
    let folds: Vec<usize> = match cfg.fold {
        Some(k) => vec![k],
        None => (0..cfg.train.folds).collect(),
    };
    let mut reports = Vec::new();
    for &k in &folds {
        let (train_ids, val_ids) = split.train_val(k);
        let (trainset, val) = (train::select(&samples, &train_ids), train::select(&samples, &val_ids));
        let tcfg = TrainConfig {
            fold: k,
            seed: cfg.train.seed.wrapping_add(k as u64),
            ..cfg.train.clone()
        };
        let dir = cfg.out.join(format!("fold{k}"));
        let label = format!("fold {k}: ");
        reports.push(train_one(&cfg, tcfg, &trainset, &val, &dir, resume, &label)?);
    }
    if let [report] = reports.as_slice() {
        print!("{}", summary_table(report));
        return Ok(());
    }
    let cv = train::CvReport {
        split,
        folds: folds
            .iter()
            .zip(reports)
            .map(|(&fold, report)| train::FoldResult {
                fold,
                best_epoch: 0,
                report,
                log: Default::default(),
                checkpoint: None,
            })
            .collect(),
    };
    println!("class\tDSC\tDSC_std\tHD\tHD_std");
    let classes = cfg.model.num_classes;
    for (k, row) in cv.aggregate().iter().enumerate() {
        let label = if row.label == "mean" {
            row.label.clone()
        } else {
            class_name(classes, k as u8 + 1)
        };
        let (hm, hs) = row.hd.map_or((None, None), |(m, s)| (Some(m), Some(s)));
        println!("{label}\t{:.4}\t{:.4}\t{}\t{}", row.dsc.0, row.dsc.1, field(hm), field(hs));
    }
    Ok(())
}

pub fn eval(
    ckpt: &Path,
    root: &Path,
    out: Option<PathBuf>,
    size: Option<usize>,
) -> Result<(), CliError> {
    let mut model = checkpoint::load::<f32>(ckpt)?;
    let samples = data::load_dataset(root, &load_options(size, model.config().num_classes))?;
    let report = train::evaluate(&mut model, &samples, 10)?;
    let out = out.unwrap_or_else(|| {
        let mut p = ckpt.as_os_str().to_owned();
        p.push(".metrics.csv");
        PathBuf::from(p)
    });
    let mut buf = Vec::new();
    metrics::write_metrics_csv(&mut buf, &report.cases).map_err(|e| CliError::Write(out.clone(), e))?;
    write_file(&out, &buf)?;
    print!("{}", summary_table(&report));
    Ok(())
}

/// Encode a label mask as an 8-bit indexed PNG with [`PALETTE`].
pub fn encode_mask(mask: &LabelMask) -> Result<Vec<u8>, png::EncodingError> {
    let mut bytes = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut bytes, mask.width() as u32, mask.height() as u32);
        enc.set_color(png::ColorType::Indexed);
        enc.set_depth(png::BitDepth::Eight);
        let entries = mask.classes().min(PALETTE.len() / 3).max(1);
        enc.set_palette(PALETTE[..entries * 3].to_vec());
        let mut w = enc.write_header()?;
        w.write_image_data(mask.labels())?;
    }
    Ok(bytes)
}

fn map_to_gray(t: &Tensor4<f32>) -> Vec<u8> {
    t.values().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

fn write_gray(path: &Path, h: usize, w: usize, pixels: Vec<u8>) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::Write(dir.to_path_buf(), e))?;
    }
    Ok(data::write_gray_png(path, h, w, pixels)?)
}

pub fn predict(
    ckpt: &Path,
    image: &Path,
    out: &Path,
    maps: Option<&Path>,
    size: Option<usize>,
) -> Result<(), CliError> {
    let mut model = checkpoint::load::<f32>(ckpt)?;
    let x = data::load_image(image, size.map(|s| (s, s)))?;
    let (probs, gates) = model.predict_with_maps(&x)?;
    let mask = network::argmax_masks(&probs)?.remove(0);
    if mask.classes() > PALETTE.len() / 3 {
        return Err(CliError::Usage(format!(
            "the palette covers 4 classes, model has {}",
            mask.classes()
        )));
    }
    let bytes = encode_mask(&mask).map_err(|e| CliError::Write(out.to_path_buf(), std::io::Error::other(e)))?;
    write_file(out, &bytes)?;
    if let Some(dir) = maps {
        write_maps(&model, &gates, dir)?;
    }
    Ok(())
}

type Gates = [Option<(Tensor4<f32>, Tensor4<f32>)>];

/// `level{l}_spatial.png` (H x W) and `level{l}_channel.png` (1 x C) per
/// decoder level, values mapped from `[0,1]` to `0..=255`.
fn write_maps(model: &DaduModel<f32>, gates: &Gates, dir: &Path) -> Result<(), CliError> {
    for (dec, gate) in model.decoders().iter().zip(gates) {
        let Some((m_ch, m_sp)) = gate else { continue };
        let l = dec.level;
        let s = m_sp.shape();
        write_gray(&dir.join(format!("level{l}_spatial.png")), s.h, s.w, map_to_gray(m_sp))?;
        let c = m_ch.shape().c;
        write_gray(&dir.join(format!("level{l}_channel.png")), 1, c, map_to_gray(m_ch))?;
    }
    Ok(())
}

pub fn gradcheck(ops: &str, seed: u64, fault: Option<String>) -> Result<(), CliError> {
    let names: Vec<&str> = ops.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if names.is_empty() {
        return Err(CliError::Usage("--ops is empty".into()));
    }
    let opts = CheckOptions {
        seed,
        fault,
        ..CheckOptions::default()
    };
    let reports = gradcheck::run_suite(&names, &opts)?;
    let stdout = std::io::stdout();
    let mut w = BufWriter::new(stdout.lock());
    let io = |e| CliError::Write(PathBuf::from("<stdout>"), e);
    writeln!(w, "op\tchecked\tmax_rel_error\tresult").map_err(io)?;
    let mut failed = Vec::new();
    for r in &reports {
        let verdict = if r.passed { "pass" } else { "FAIL" };
        writeln!(w, "{}\t{}\t{:.3e}\t{verdict}", r.op, r.checked, r.max_rel_error).map_err(io)?;
        if !r.passed {
            failed.push(r.op.clone());
        }
    }
    w.flush().map_err(io)?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::GradCheck(failed))
    }
}

