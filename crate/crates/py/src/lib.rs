//! Python module `dadu`: model construction and inference, phantoms,
//! metrics, fold splitting and the gradient checker.
//!
//! Images and masks cross the boundary as nested lists indexed `[row][col]`.

use std::path::PathBuf;

use ::dadu::data;
use ::dadu::gradcheck::{run_suite, CheckOptions};
use ::dadu::metrics::{self, ContourSet, LabelMask};
use ::dadu::network::{self, DaduModel, ModelConfig};
use ::dadu::tensor::{Shape4, Tensor4};
use ::dadu::{checkpoint, Error};
use pyo3::exceptions::{PyArithmeticError, PyFileNotFoundError, PyIOError, PyValueError};
use pyo3::prelude::*;

type Grid<T> = Vec<Vec<T>>;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Missing(p) => PyFileNotFoundError::new_err(p.display().to_string()),
        Error::Io { .. } | Error::Decode { .. } => PyIOError::new_err(e.to_string()),
        Error::NonFinite(_) | Error::NonFiniteGradient(_) => PyArithmeticError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn image_tensor(image: &[Vec<f32>]) -> PyResult<Tensor4<f32>> {
    let h = image.len();
    let w = image.first().map_or(0, Vec::len);
    if h == 0 || w == 0 || image.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("image must be a non-empty rectangular list of rows"));
    }
    let shape = Shape4::new(1, 1, h, w).map_err(to_py)?;
    Tensor4::from_vec(shape, image.concat()).map_err(to_py)
}

fn mask_from_rows(rows: &[Vec<i64>], classes: usize) -> PyResult<LabelMask> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("mask rows differ in length"));
    }
    let labels = rows
        .iter()
        .flatten()
        .map(|&v| u8::try_from(v).map_err(|_| PyValueError::new_err(format!("label {v} out of range"))))
        .collect::<PyResult<Vec<u8>>>()?;
    LabelMask::new(h, w, classes, labels).map_err(to_py)
}

fn mask_rows(mask: &LabelMask) -> Vec<Vec<u32>> {
    mask.labels()
        .chunks(mask.width().max(1))
        .map(|r| r.iter().map(|&v| v as u32).collect())
        .collect()
}

fn rows_of(t: &Tensor4<f32>, n: usize, c: usize) -> Vec<Vec<f32>> {
    let s = t.shape();
    (0..s.h).map(|r| (0..s.w).map(|col| t.at(n, c, r, col)).collect()).collect()
}

/// DADU network with `f32` weights.
#[pyclass(name = "Model", unsendable)]
struct PyModel {
    inner: DaduModel<f32>,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (levels=4, base_channels=16, num_classes=4, attention=true, seed=0))]
    fn new(levels: usize, base_channels: usize, num_classes: usize, attention: bool, seed: u64) -> PyResult<Self> {
        let config = ModelConfig {
            num_classes,
            attention,
            ..ModelConfig::with_levels(levels, base_channels)
        };
        let inner = DaduModel::new(config, seed).map_err(to_py)?;
        Ok(PyModel { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel {
            inner: checkpoint::load(&path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save(&self.inner, &path).map_err(to_py)
    }

    fn parameter_count(&self) -> usize {
        self.inner.parameters().iter().map(|p| p.value.len()).sum()
    }

    #[getter]
    fn levels(&self) -> usize {
        self.inner.config().levels
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.config().num_classes
    }

    /// Input height and width must be multiples of this.
    #[getter]
    fn divisor(&self) -> usize {
        self.inner.config().divisor()
    }

    /// Per-class sigmoid maps, indexed `[class][row][col]`.
    fn probabilities(&mut self, image: Vec<Vec<f32>>) -> PyResult<Vec<Vec<Vec<f32>>>> {
        let x = image_tensor(&image)?;
        let p = self.inner.predict_probs(&x).map_err(to_py)?;
        Ok((0..p.shape().c).map(|c| rows_of(&p, 0, c)).collect())
    }

    /// Argmax label image.
    fn predict(&mut self, image: Vec<Vec<f32>>) -> PyResult<Vec<Vec<u32>>> {
        let x = image_tensor(&image)?;
        let mut masks = self.inner.segment(&x).map_err(to_py)?;
        Ok(mask_rows(&masks.remove(0)))
    }

    /// Spatial attention map of every decoder level (deepest first);
    /// `None` where the skip connection has no attention block.
    fn attention_maps(&mut self, image: Vec<Vec<f32>>) -> PyResult<Vec<Option<Vec<Vec<f32>>>>> {
        let x = image_tensor(&image)?;
        let (_, maps) = self.inner.predict_with_maps(&x).map_err(to_py)?;
        Ok(maps.iter().map(|m| m.as_ref().map(|(_, sp)| rows_of(sp, 0, 0))).collect())
    }

    fn __repr__(&self) -> String {
        let c = self.inner.config();
        format!(
            "Model(levels={}, base_channels={}, num_classes={}, attention={})",
            c.levels, c.base_channels, c.num_classes, c.attention
        )
    }
}

/// One synthetic cardiac phantom: `(image, mask)` with the image in `[0, 1]`.
#[pyfunction]
#[pyo3(signature = (seed, size=64, noise=0.05))]
fn phantom(seed: u64, size: usize, noise: f64) -> PyResult<(Grid<f32>, Grid<u32>)> {
    let params = data::PhantomParams {
        noise_sigma: noise,
        ..data::PhantomParams::with_seed(seed, size)
    };
    let s = data::synth_phantom(&params).map_err(to_py)?.normalized();
    Ok((rows_of(&s.image, 0, 0), mask_rows(&s.mask)))
}

#[pyfunction]
#[pyo3(signature = (pred, truth, class_id, num_classes=4))]
fn dice(pred: Vec<Vec<i64>>, truth: Vec<Vec<i64>>, class_id: u8, num_classes: usize) -> PyResult<f64> {
    let (p, t) = (mask_from_rows(&pred, num_classes)?, mask_from_rows(&truth, num_classes)?);
    metrics::dice_coefficient(&p, &t, class_id).map_err(to_py)
}

/// Symmetric Hausdorff distance between two point sets; `None` if either is empty.
#[pyfunction]
fn hausdorff(a: Vec<(usize, usize)>, b: Vec<(usize, usize)>) -> Option<f64> {
    metrics::hausdorff_symmetric(&ContourSet { points: a }, &ContourSet { points: b }).symmetric
}

/// Per foreground class `(class, dsc, hd)`; `hd` is `None` when undefined.
#[pyfunction]
#[pyo3(signature = (pred, truth, num_classes=4))]
fn evaluate_case(
    pred: Vec<Vec<i64>>,
    truth: Vec<Vec<i64>>,
    num_classes: usize,
) -> PyResult<Vec<(u8, f64, Option<f64>)>> {
    let (p, t) = (mask_from_rows(&pred, num_classes)?, mask_from_rows(&truth, num_classes)?);
    let m = metrics::evaluate_case(&p, &t).map_err(to_py)?;
    Ok(m.per_class.iter().map(|c| (c.class_id, c.dsc, c.hd.symmetric)).collect())
}

/// Case ids of every fold.
#[pyfunction]
#[pyo3(signature = (ids, folds=5, seed=0))]
fn kfold(ids: Vec<String>, folds: usize, seed: u64) -> PyResult<Vec<Vec<String>>> {
    let split = data::kfold_split(&ids, folds, seed).map_err(to_py)?;
    Ok((0..folds).map(|k| split.fold(k)).collect())
}

/// `(op, max_rel_error, passed)` per checked op.
#[pyfunction]
#[pyo3(signature = (ops=vec!["all".to_string()], seed=0))]
fn gradcheck(ops: Vec<String>, seed: u64) -> PyResult<Vec<(String, f64, bool)>> {
    let names: Vec<&str> = ops.iter().map(String::as_str).collect();
    let opts = CheckOptions {
        seed,
        ..CheckOptions::default()
    };
    let reports = run_suite(&names, &opts).map_err(to_py)?;
    Ok(reports.into_iter().map(|r| (r.op, r.max_rel_error, r.passed)).collect())
}

/// Argmax over `[class][row][col]` probabilities.
#[pyfunction]
fn argmax(probs: Vec<Vec<Vec<f32>>>) -> PyResult<Vec<Vec<u32>>> {
    let k = probs.len();
    let h = probs.first().map_or(0, Vec::len);
    let w = probs.first().and_then(|p| p.first()).map_or(0, Vec::len);
    if probs.iter().any(|p| p.len() != h || p.iter().any(|r| r.len() != w)) {
        return Err(PyValueError::new_err("probability maps differ in shape"));
    }
    let shape = Shape4::new(1, k, h, w).map_err(to_py)?;
    let flat: Vec<f32> = probs.into_iter().flatten().flatten().collect();
    let t = Tensor4::from_vec(shape, flat).map_err(to_py)?;
    let mut masks = network::argmax_masks(&t).map_err(to_py)?;
    Ok(mask_rows(&masks.remove(0)))
}

#[pymodule]
fn dadu(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(phantom, m)?)?;
    m.add_function(wrap_pyfunction!(dice, m)?)?;
    m.add_function(wrap_pyfunction!(hausdorff, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_case, m)?)?;
    m.add_function(wrap_pyfunction!(kfold, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(argmax, m)?)?;
    m.add("NUM_CLASSES", data::NUM_CLASSES)?;
    Ok(())
}
