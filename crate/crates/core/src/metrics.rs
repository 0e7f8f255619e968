//! Overlap and boundary-distance metrics on integer label masks.

use std::io::Write;

use crate::error::{Error, Result};

/// Per-pixel class ids in row-major order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask {
    h: usize,
    w: usize,
    classes: usize,
    labels: Vec<u8>,
}

impl LabelMask {
    pub fn new(h: usize, w: usize, classes: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != h * w {
            return Err(Error::shape(
                "label_mask",
                format!("{} labels for {h}x{w}", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::shape(
                "label_mask",
                format!("label {bad} not below class count {classes}"),
            ));
        }
        Ok(LabelMask {
            h,
            w,
            classes,
            labels,
        })
    }

    pub fn filled(h: usize, w: usize, classes: usize, label: u8) -> Result<Self> {
        Self::new(h, w, classes, vec![label; h * w])
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.labels[row * self.w + col]
    }

    pub fn set(&mut self, row: usize, col: usize, label: u8) {
        assert!((label as usize) < self.classes);
        self.labels[row * self.w + col] = label;
    }

    pub fn count(&self, class_id: u8) -> usize {
        self.labels.iter().filter(|&&l| l == class_id).count()
    }

    fn same_extent(&self, other: &LabelMask) -> Result<()> {
        if (self.h, self.w) != (other.h, other.w) {
            return Err(Error::ExtentMismatch {
                image: (self.h, self.w),
                mask: (other.h, other.w),
            });
        }
        Ok(())
    }
}

/// Dice similarity `2|X∩Y| / (|X|+|Y|)` for one class. Both empty gives 1.
pub fn dice_coefficient(x: &LabelMask, y: &LabelMask, class_id: u8) -> Result<f64> {
    x.same_extent(y)?;
    let (mut inter, mut nx, mut ny) = (0usize, 0usize, 0usize);
    for (&a, &b) in x.labels.iter().zip(&y.labels) {
        let (ia, ib) = (a == class_id, b == class_id);
        nx += ia as usize;
        ny += ib as usize;
        inter += (ia && ib) as usize;
    }
    if nx + ny == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (nx + ny) as f64)
}

/// Boundary pixels `(row, col)` of one class region.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ContourSet {
    pub points: Vec<(usize, usize)>,
}

impl ContourSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Pixels of `class_id` that touch the image border or have a 4-neighbour of
/// another class.
pub fn extract_contour(mask: &LabelMask, class_id: u8) -> ContourSet {
    let (h, w) = (mask.h, mask.w);
    let mut points = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if mask.get(r, c) != class_id {
                continue;
            }
            let border = r == 0 || c == 0 || r + 1 == h || c + 1 == w;
            let edge = border
                || mask.get(r - 1, c) != class_id
                || mask.get(r + 1, c) != class_id
                || mask.get(r, c - 1) != class_id
                || mask.get(r, c + 1) != class_id;
            if edge {
                points.push((r, c));
            }
        }
    }
    ContourSet { points }
}

fn sq_dist(a: (usize, usize), b: (usize, usize)) -> u64 {
    let dr = a.0.abs_diff(b.0) as u64;
    let dc = a.1.abs_diff(b.1) as u64;
    dr * dr + dc * dc
}

/// `max_{x∈a} min_{y∈b} ‖x − y‖` in pixels; `None` when either set is empty.
pub fn hausdorff_directed(a: &ContourSet, b: &ContourSet) -> Option<f64> {
    if a.is_empty() || b.is_empty() {
        return None;
    }
    let mut worst = 0u64;
    for &p in &a.points {
        let mut best = u64::MAX;
        for &q in &b.points {
            let d = sq_dist(p, q);
            if d < best {
                best = d;
                if best <= worst {
                    // cannot raise the running max any more
                    break;
                }
            }
        }
        worst = worst.max(best);
    }
    Some((worst as f64).sqrt())
}

/// Symmetric distance plus both directed values.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HausdorffReport {
    pub symmetric: Option<f64>,
    pub a_to_b: Option<f64>,
    pub b_to_a: Option<f64>,
}

impl HausdorffReport {
    fn scaled(self, spacing: f64) -> Self {
        HausdorffReport {
            symmetric: self.symmetric.map(|v| v * spacing),
            a_to_b: self.a_to_b.map(|v| v * spacing),
            b_to_a: self.b_to_a.map(|v| v * spacing),
        }
    }
}

pub fn hausdorff_symmetric(a: &ContourSet, b: &ContourSet) -> HausdorffReport {
    let ab = hausdorff_directed(a, b);
    let ba = hausdorff_directed(b, a);
    let symmetric = match (ab, ba) {
        (Some(x), Some(y)) => Some(x.max(y)),
        _ => None,
    };
    HausdorffReport {
        symmetric,
        a_to_b: ab,
        b_to_a: ba,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassMetrics {
    pub class_id: u8,
    pub dsc: f64,
    /// Prediction-to-truth is `a_to_b`.
    pub hd: HausdorffReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseMetrics {
    pub per_class: Vec<ClassMetrics>,
    pub mean_dsc: f64,
    /// Mean over classes with a defined distance; `None` if none are defined.
    pub mean_hd: Option<f64>,
}

/// Foreground (classes `1..K`) DSC and symmetric HD. A class absent from both
/// masks scores DSC 1 and HD 0; absent from only one, HD is undefined.
pub fn evaluate_case(pred: &LabelMask, truth: &LabelMask) -> Result<CaseMetrics> {
    evaluate_case_with_spacing(pred, truth, 1.0)
}

/// As [`evaluate_case`] with distances multiplied by a pixel spacing (e.g. mm/pixel).
pub fn evaluate_case_with_spacing(
    pred: &LabelMask,
    truth: &LabelMask,
    spacing: f64,
) -> Result<CaseMetrics> {
    pred.same_extent(truth)?;
    let classes = truth.classes.max(pred.classes);
    let mut per_class = Vec::with_capacity(classes.saturating_sub(1));
    for c in 1..classes as u8 {
        let dsc = dice_coefficient(pred, truth, c)?;
        let (pc, tc) = (extract_contour(pred, c), extract_contour(truth, c));
        let hd = if pc.is_empty() && tc.is_empty() {
            HausdorffReport {
                symmetric: Some(0.0),
                a_to_b: Some(0.0),
                b_to_a: Some(0.0),
            }
        } else {
            hausdorff_symmetric(&pc, &tc).scaled(spacing)
        };
        per_class.push(ClassMetrics {
            class_id: c,
            dsc,
            hd,
        });
    }
    let mean_dsc = per_class.iter().map(|m| m.dsc).sum::<f64>() / per_class.len().max(1) as f64;
    let defined: Vec<f64> = per_class.iter().filter_map(|m| m.hd.symmetric).collect();
    let mean_hd = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    Ok(CaseMetrics {
        per_class,
        mean_dsc,
        mean_hd,
    })
}

fn opt_field(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// Metrics CSV: `case_id,class,dsc,hd_sym,hd_ab,hd_ba`, undefined distances empty.
pub fn write_metrics_csv<W: Write>(out: &mut W, cases: &[(String, CaseMetrics)]) -> std::io::Result<()> {
    writeln!(out, "case_id,class,dsc,hd_sym,hd_ab,hd_ba")?;
    for (id, m) in cases {
        for c in &m.per_class {
            writeln!(
                out,
                "{id},{},{:.6},{},{},{}",
                c.class_id,
                c.dsc,
                opt_field(c.hd.symmetric),
                opt_field(c.hd.a_to_b),
                opt_field(c.hd.b_to_a)
            )?;
        }
    }
    Ok(())
}
