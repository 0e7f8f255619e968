//! Samples, synthetic cardiac phantoms, PNG datasets and fold splitting.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageReader};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::metrics::LabelMask;
use crate::ops::pool::resize_bilinear_forward;
use crate::tensor::{Real, Shape4, Tensor4};

pub const NUM_CLASSES: usize = 4;
pub const BACKGROUND: u8 = 0;
pub const RV: u8 = 1;
pub const LMYO: u8 = 2;
pub const LV: u8 = 3;

/// Base intensities of background, RV, LMyo and LV.
pub const INTENSITY: [f32; 4] = [0.1, 0.5, 0.35, 0.7];

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[1, 1, H, W]`, values in `[0, 1]`.
    pub image: Tensor4<f32>,
    pub mask: LabelMask,
    pub case_id: String,
}

impl Sample {
    pub fn new(image: Tensor4<f32>, mask: LabelMask, case_id: impl Into<String>) -> Result<Self> {
        let s = image.shape();
        if s.n != 1 || s.c != 1 {
            return Err(Error::shape("sample", format!("image must be [1,1,H,W], got {s}")));
        }
        if (s.h, s.w) != (mask.height(), mask.width()) {
            return Err(Error::ExtentMismatch {
                image: (s.h, s.w),
                mask: (mask.height(), mask.width()),
            });
        }
        Ok(Sample {
            image,
            mask,
            case_id: case_id.into(),
        })
    }

    pub fn height(&self) -> usize {
        self.mask.height()
    }

    pub fn width(&self) -> usize {
        self.mask.width()
    }

    /// Same sample with a min-max normalized image.
    pub fn normalized(mut self) -> Self {
        self.image = normalize(&self.image);
        self
    }
}

/// Per-image min-max scaling to `[0, 1]`; a constant image maps to zeros.
pub fn normalize<T: Real>(image: &Tensor4<T>) -> Tensor4<T> {
    let v = image.values();
    let lo = v.iter().copied().fold(T::infinity(), T::min);
    let hi = v.iter().copied().fold(T::neg_infinity(), T::max);
    let range = hi - lo;
    if !(range > T::zero()) {
        return Tensor4::zeros(image.shape());
    }
    image.map(|x| (x - lo) / range)
}

/// `[1, K, H, W]` indicator tensor of `mask`.
pub fn one_hot<T: Real>(mask: &LabelMask, classes: usize) -> Result<Tensor4<T>> {
    let (h, w) = (mask.height(), mask.width());
    let mut t = Tensor4::zeros(Shape4::new(1, classes, h, w)?);
    for (px, &l) in mask.labels().iter().enumerate() {
        if l as usize >= classes {
            return Err(Error::shape("one_hot", format!("label {l} with {classes} classes")));
        }
        t.values_mut()[l as usize * h * w + px] = T::one();
    }
    Ok(t)
}

/// Stack the images and one-hot masks of `samples` into batch tensors.
pub fn collate<T: Real>(samples: &[&Sample], classes: usize) -> Result<(Tensor4<T>, Tensor4<T>)> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset("empty batch".into()));
    }
    let images: Vec<Tensor4<T>> = samples.iter().map(|s| s.image.cast()).collect();
    let targets: Vec<Tensor4<T>> = samples
        .iter()
        .map(|s| one_hot(&s.mask, classes))
        .collect::<Result<_>>()?;
    let images: Vec<&Tensor4<T>> = images.iter().collect();
    let targets: Vec<&Tensor4<T>> = targets.iter().collect();
    Ok((Tensor4::stack(&images)?, Tensor4::stack(&targets)?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomParams {
    pub seed: u64,
    pub size: usize,
    /// Inclusive ranges in pixels.
    pub lv_radius: (f64, f64),
    pub myo_thickness: (f64, f64),
    /// Distance from the LV centre to the RV circle centre, as a multiple of
    /// the outer myocardium radius.
    pub rv_offset: (f64, f64),
    pub noise_sigma: f64,
}

impl Default for PhantomParams {
    fn default() -> Self {
        PhantomParams {
            seed: 0,
            size: 64,
            lv_radius: (5.0, 8.0),
            myo_thickness: (2.0, 4.0),
            rv_offset: (0.7, 1.1),
            noise_sigma: 0.05,
        }
    }
}

impl PhantomParams {
    /// Default ranges scaled linearly from the 64-pixel geometry.
    pub fn with_seed(seed: u64, size: usize) -> Self {
        let s = size as f64 / 64.0;
        PhantomParams {
            seed,
            size,
            lv_radius: (5.0 * s, 8.0 * s),
            myo_thickness: ((2.0 * s).max(1.0), (4.0 * s).max(1.0)),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        let ranges = [
            ("lv_radius", self.lv_radius),
            ("myo_thickness", self.myo_thickness),
            ("rv_offset", self.rv_offset),
        ];
        for (name, (lo, hi)) in ranges {
            if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && lo <= hi) {
                return fail(format!("{name} range ({lo}, {hi}) is not a positive interval"));
            }
        }
        if self.size < 8 {
            return fail(format!("phantom size {} below 8", self.size));
        }
        if self.lv_radius.1 + self.myo_thickness.1 >= self.size as f64 / 2.0 {
            return fail(format!(
                "lv_radius {} + myo_thickness {} must stay below size/2 = {}",
                self.lv_radius.1,
                self.myo_thickness.1,
                self.size as f64 / 2.0
            ));
        }
        if self.myo_thickness.0 < 1.0 {
            return fail("myo_thickness below 1 pixel lets LV touch RV".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return fail(format!("noise_sigma {} must be non-negative", self.noise_sigma));
        }
        Ok(())
    }
}

fn draw(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// LV disk (3) inside a myocardium annulus (2), with an RV crescent (1) on
/// the image-left side hugging the annulus. Raw intensities plus clamped
/// Gaussian noise.
pub fn synth_phantom(params: &PhantomParams) -> Result<Sample> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let size = params.size;
    let half = size as f64 / 2.0;
    let r_lv = draw(&mut rng, params.lv_radius);
    let r_out = r_lv + draw(&mut rng, params.myo_thickness);
    let d_rv = r_out * draw(&mut rng, params.rv_offset);
    let r_rv = r_out * rng.random_range(1.0..1.25);
    let angle = rng.random_range(-0.5f64..0.5);
    let jitter = size as f64 / 32.0;
    let cy = half + rng.random_range(-jitter..=jitter);
    let cx = half + size as f64 / 10.0 + rng.random_range(-jitter..=jitter);
    let (ry, rx) = (cy + d_rv * angle.sin(), cx - d_rv * angle.cos());

    let mut labels = Vec::with_capacity(size * size);
    for r in 0..size {
        for c in 0..size {
            let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
            let d = ((y - cy).powi(2) + (x - cx).powi(2)).sqrt();
            let drv = ((y - ry).powi(2) + (x - rx).powi(2)).sqrt();
            labels.push(if d <= r_lv {
                LV
            } else if d <= r_out {
                LMYO
            } else if drv <= r_rv {
                RV
            } else {
                BACKGROUND
            });
        }
    }
    let noise = Normal::new(0.0, params.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let pixels = labels
        .iter()
        .map(|&l| {
            let n = if params.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            (INTENSITY[l as usize] as f64 + n).clamp(0.0, 1.0) as f32
        })
        .collect();
    let image = Tensor4::from_vec(Shape4::new(1, 1, size, size)?, pixels)?;
    let mask = LabelMask::new(size, size, NUM_CLASSES, labels)?;
    Sample::new(image, mask, format!("phantom{:016x}", params.seed))
}

/// Seed of the `index`-th phantom of a set.
pub fn phantom_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x2545_f491_4f6c_dd1d)
        .wrapping_add((index as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

pub fn case_id(index: usize) -> String {
    format!("case{index:04}")
}

/// `count` normalized phantoms named `case0000...`.
pub fn phantom_set(count: usize, size: usize, seed: u64, noise_sigma: f64) -> Result<Vec<Sample>> {
    (0..count)
        .map(|i| {
            let params = PhantomParams {
                noise_sigma,
                ..PhantomParams::with_seed(phantom_seed(seed, i), size)
            };
            let mut s = synth_phantom(&params)?.normalized();
            s.case_id = case_id(i);
            Ok(s)
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LoadOptions {
    /// Target `(height, width)`; `None` keeps the file extent.
    pub extent: Option<(usize, usize)>,
    /// Stored mask value to class id; unmapped values are kept as-is.
    pub remap: BTreeMap<u8, u8>,
    pub classes: Option<usize>,
}

fn read_gray(path: &Path) -> Result<GrayImage> {
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    let decode = |reason: String| Error::Decode {
        path: path.to_path_buf(),
        reason,
    };
    let reader = ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let reader = reader.with_guessed_format().map_err(|e| Error::io(path, e))?;
    let img = reader.decode().map_err(|e| decode(e.to_string()))?;
    Ok(img.to_luma8())
}

fn nearest(src: usize, dst: usize, i: usize) -> usize {
    (((i as f64 + 0.5) * src as f64 / dst as f64) as usize).min(src - 1)
}

fn preprocess(img: &GrayImage, (h, w): (usize, usize)) -> Result<Tensor4<f32>> {
    if h == 0 || w == 0 {
        return Err(Error::Config(format!("target extent {h}x{w}")));
    }
    let (ih, iw) = (img.height() as usize, img.width() as usize);
    let raw = Tensor4::from_vec(
        Shape4::new(1, 1, ih, iw)?,
        img.as_raw().iter().map(|&p| p as f32 / 255.0).collect(),
    )?;
    let image = if (ih, iw) == (h, w) {
        raw
    } else {
        resize_bilinear_forward(&raw, h, w).0
    };
    Ok(normalize(&image))
}

/// Read a grayscale PNG as a normalized `[1,1,H,W]` image, optionally resized.
pub fn load_image(path: &Path, extent: Option<(usize, usize)>) -> Result<Tensor4<f32>> {
    let img = read_gray(path)?;
    let extent = extent.unwrap_or((img.height() as usize, img.width() as usize));
    preprocess(&img, extent)
}

/// Read an image/mask PNG pair: image scaled by 1/255, resized bilinearly,
/// then min-max normalized; mask remapped, resized by nearest neighbour and
/// range-checked. Without a target extent the two files must agree in size.
pub fn load_sample(image_path: &Path, mask_path: &Path, opts: &LoadOptions) -> Result<Sample> {
    let classes = opts.classes.unwrap_or(NUM_CLASSES);
    let img = read_gray(image_path)?;
    let mask = read_gray(mask_path)?;
    let (ih, iw) = (img.height() as usize, img.width() as usize);
    let (mh, mw) = (mask.height() as usize, mask.width() as usize);
    if opts.extent.is_none() && (ih, iw) != (mh, mw) {
        return Err(Error::ExtentMismatch {
            image: (ih, iw),
            mask: (mh, mw),
        });
    }
    let (h, w) = opts.extent.unwrap_or((ih, iw));
    let image = preprocess(&img, (h, w))?;

    let mut labels = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let (sr, sc) = if (mh, mw) == (h, w) {
                (r, c)
            } else {
                (nearest(mh, h, r), nearest(mw, w, c))
            };
            let v = mask.get_pixel(sc as u32, sr as u32).0[0];
            let l = opts.remap.get(&v).copied().unwrap_or(v);
            if l as usize >= classes {
                return Err(Error::MaskLabel {
                    path: mask_path.to_path_buf(),
                    value: l,
                    classes,
                });
            }
            labels.push(l);
        }
    }
    let mask = LabelMask::new(h, w, classes, labels)?;
    let case = image_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Sample::new(image, mask, case)
}

pub fn write_gray_png(path: &Path, h: usize, w: usize, pixels: Vec<u8>) -> Result<()> {
    let img = GrayImage::from_raw(w as u32, h as u32, pixels)
        .ok_or_else(|| Error::shape("write_png", format!("buffer does not fill {h}x{w}")))?;
    img.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Decode {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    })
}

/// Quantize a `[0,1]` image to 8 bits.
pub fn to_gray8(image: &Tensor4<f32>) -> Vec<u8> {
    image
        .values()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

pub const MANIFEST: &str = "manifest.txt";

pub fn image_path(root: &Path, case_id: &str) -> PathBuf {
    root.join("images").join(format!("{case_id}.png"))
}

pub fn mask_path(root: &Path, case_id: &str) -> PathBuf {
    root.join("masks").join(format!("{case_id}.png"))
}

/// Write `<root>/images/<id>.png`, `<root>/masks/<id>.png` and a manifest.
pub fn write_dataset(root: &Path, samples: &[Sample]) -> Result<()> {
    for sub in ["images", "masks"] {
        let dir = root.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut manifest = String::new();
    for s in samples {
        let (h, w) = (s.height(), s.width());
        write_gray_png(&image_path(root, &s.case_id), h, w, to_gray8(&s.image))?;
        write_gray_png(&mask_path(root, &s.case_id), h, w, s.mask.labels().to_vec())?;
        manifest.push_str(&s.case_id);
        manifest.push('\n');
    }
    let path = root.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

/// Case ids of a dataset directory: manifest order when present, otherwise
/// the sorted stems of `images/*.png`.
pub fn list_cases(root: &Path) -> Result<Vec<String>> {
    if !root.is_dir() {
        return Err(Error::Missing(root.to_path_buf()));
    }
    let manifest = root.join(MANIFEST);
    if manifest.is_file() {
        let text = fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
        return Ok(text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect());
    }
    let dir = root.join("images");
    if !dir.is_dir() {
        return Err(Error::Missing(dir));
    }
    let mut ids: Vec<String> = fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .collect();
    ids.sort();
    Ok(ids)
}

pub fn load_dataset(root: &Path, opts: &LoadOptions) -> Result<Vec<Sample>> {
    let ids = list_cases(root)?;
    if ids.is_empty() {
        return Err(Error::EmptyDataset(root.display().to_string()));
    }
    ids.iter()
        .map(|id| {
            let mut s = load_sample(&image_path(root, id), &mask_path(root, id), opts)?;
            s.case_id = id.clone();
            Ok(s)
        })
        .collect()
}

pub const DEFAULT_FOLDS: usize = 5;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldSplit {
    pub fold_count: usize,
    pub assignments: BTreeMap<String, usize>,
}

impl FoldSplit {
    /// Case ids of fold `k`, sorted.
    pub fn fold(&self, k: usize) -> Vec<String> {
        self.assignments
            .iter()
            .filter(|(_, &f)| f == k)
            .map(|(id, _)| id.clone())
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.fold_count];
        self.assignments.values().for_each(|&f| sizes[f] += 1);
        sizes
    }

    /// `(train, validation)` ids with fold `k` held out.
    pub fn train_val(&self, k: usize) -> (Vec<String>, Vec<String>) {
        let (val, train): (Vec<_>, Vec<_>) = self.assignments.iter().partition(|(_, &f)| f == k);
        (
            train.into_iter().map(|(id, _)| id.clone()).collect(),
            val.into_iter().map(|(id, _)| id.clone()).collect(),
        )
    }
}

/// Seeded shuffle of the sorted ids, then round-robin fold assignment.
pub fn kfold_split(case_ids: &[String], folds: usize, seed: u64) -> Result<FoldSplit> {
    if folds == 0 {
        return Err(Error::Config("fold count must be positive".into()));
    }
    let mut ids = case_ids.to_vec();
    ids.sort();
    ids.dedup();
    if ids.len() != case_ids.len() {
        return Err(Error::Config("duplicate case ids".into()));
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(FoldSplit {
        fold_count: folds,
        assignments: ids.into_iter().enumerate().map(|(i, id)| (id, i % folds)).collect(),
    })
}
