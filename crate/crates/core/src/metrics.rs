//! Dice similarity and Hausdorff distance over label masks.
//!
//! Conventions where the formulas are undefined:
//! * Dice of two empty masks is 1.0, of exactly one empty mask 0.0.
//! * Hausdorff distance involving an empty point set is `None`.
//!
//! Hausdorff distances are measured between mask contours (see
//! [`boundary_points`]), in pixels and, when the mask carries a pixel
//! spacing, in millimetres.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// ACDC label convention.
pub const BACKGROUND: u8 = 0;
pub const RV: u8 = 1;
pub const LMYO: u8 = 2;
pub const LV: u8 = 3;
pub const CLASS_NAMES: [&str; 4] = ["background", "RV", "LMyo", "LV"];

pub fn class_name(class: usize) -> String {
    CLASS_NAMES
        .get(class)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("class{class}"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationMask {
    height: usize,
    width: usize,
    classes: usize,
    labels: Vec<u8>,
    /// Millimetres per pixel along (rows, columns).
    spacing: Option<(f64, f64)>,
}

impl SegmentationMask {
    pub fn new(height: usize, width: usize, classes: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Data(format!(
                "{} labels for a {height}×{width} mask",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::Data(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(Self {
            height,
            width,
            classes,
            labels,
            spacing: None,
        })
    }

    pub fn with_spacing(mut self, rows_mm: f64, cols_mm: f64) -> Self {
        self.spacing = Some((rows_mm, cols_mm));
        self
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn spacing(&self) -> Option<(f64, f64)> {
        self.spacing
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.labels[row * self.width + col]
    }

    pub fn binary(&self, class: u8) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            bits: self.labels.iter().map(|&l| l == class).collect(),
        }
    }

    /// Pixel count per class.
    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), height * width);
        Self {
            height,
            width,
            bits,
        }
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }
}

fn same_extents(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::Data(format!(
            "mask extents differ: {}×{} vs {}×{}",
            a.height, a.width, b.height, b.width
        )));
    }
    Ok(())
}

/// `2|X∩Y| / (|X|+|Y|)`.
pub fn dsc(x: &BinaryMask, y: &BinaryMask) -> Result<f64> {
    same_extents(x, y)?;
    let (mut inter, mut nx, mut ny) = (0usize, 0usize, 0usize);
    for (&a, &b) in x.bits.iter().zip(&y.bits) {
        nx += a as usize;
        ny += b as usize;
        inter += (a && b) as usize;
    }
    Ok(if nx + ny == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (nx + ny) as f64
    })
}

/// (row, column) pixel coordinate.
pub type Point = (usize, usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum HausdorffMode {
    /// `max_{x∈X} min_{y∈Y} ‖x − y‖`.
    Directed,
    /// Larger of the two directed distances.
    #[default]
    Symmetric,
}

fn directed(x: &[Point], y: &[Point], spacing: (f64, f64)) -> f64 {
    let mut worst: f64 = 0.0;
    for &(xr, xc) in x {
        let mut best = f64::INFINITY;
        for &(yr, yc) in y {
            let dr = (xr as f64 - yr as f64) * spacing.0;
            let dc = (xc as f64 - yc as f64) * spacing.1;
            best = best.min(dr * dr + dc * dc);
        }
        worst = worst.max(best);
    }
    worst.sqrt()
}

/// Hausdorff distance, `None` when either set is empty. `spacing` scales
/// row and column offsets (use `(1.0, 1.0)` for pixels).
pub fn hausdorff(x: &[Point], y: &[Point], mode: HausdorffMode, spacing: (f64, f64)) -> Option<f64> {
    if x.is_empty() || y.is_empty() {
        return None;
    }
    Some(match mode {
        HausdorffMode::Directed => directed(x, y, spacing),
        HausdorffMode::Symmetric => directed(x, y, spacing).max(directed(y, x, spacing)),
    })
}

/// Foreground pixels with at least one 4-neighbour that is background or
/// outside the image.
pub fn boundary_points(mask: &BinaryMask) -> Vec<Point> {
    let (h, w) = (mask.height, mask.width);
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if !mask.get(r, c) {
                continue;
            }
            let edge = r == 0
                || c == 0
                || r + 1 == h
                || c + 1 == w
                || !mask.get(r - 1, c)
                || !mask.get(r + 1, c)
                || !mask.get(r, c - 1)
                || !mask.get(r, c + 1);
            if edge {
                out.push((r, c));
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub name: String,
    pub dsc: f64,
    /// `None` when either contour is empty.
    pub hd_px: Option<f64>,
    pub hd_mm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Foreground classes in reporting order.
    pub classes: Vec<ClassMetrics>,
    pub mean_dsc: f64,
    /// Mean over classes with a defined distance.
    pub mean_hd_px: Option<f64>,
    pub mean_hd_mm: Option<f64>,
}

/// Foreground classes in report column order: LV, RV, LMyo for the
/// four-class cardiac labelling, ascending otherwise.
pub fn report_order(classes: usize) -> Vec<usize> {
    if classes == 4 {
        vec![LV as usize, RV as usize, LMYO as usize]
    } else {
        (1..classes).collect()
    }
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Per-class Dice and symmetric contour Hausdorff for every foreground class.
pub fn evaluate(pred: &SegmentationMask, truth: &SegmentationMask) -> Result<MetricReport> {
    if (pred.height, pred.width) != (truth.height, truth.width) {
        return Err(Error::Data(format!(
            "prediction {}×{} vs truth {}×{}",
            pred.height, pred.width, truth.height, truth.width
        )));
    }
    let classes = pred.classes.max(truth.classes);
    let spacing = truth.spacing.or(pred.spacing);
    let mut rows = Vec::new();
    for class in report_order(classes) {
        let p = pred.binary(class as u8);
        let t = truth.binary(class as u8);
        let (bp, bt) = (boundary_points(&p), boundary_points(&t));
        rows.push(ClassMetrics {
            class,
            name: class_name(class),
            dsc: dsc(&p, &t)?,
            hd_px: hausdorff(&bp, &bt, HausdorffMode::Symmetric, (1.0, 1.0)),
            hd_mm: spacing.and_then(|s| hausdorff(&bp, &bt, HausdorffMode::Symmetric, s)),
        });
    }
    Ok(MetricReport {
        mean_dsc: rows.iter().map(|r| r.dsc).sum::<f64>() / rows.len().max(1) as f64,
        mean_hd_px: mean_defined(rows.iter().map(|r| r.hd_px)),
        mean_hd_mm: mean_defined(rows.iter().map(|r| r.hd_mm)),
        classes: rows,
    })
}

/// Averages per-sample reports class by class.
pub fn aggregate(reports: &[MetricReport]) -> Option<MetricReport> {
    let first = reports.first()?;
    let n = reports.len() as f64;
    let classes = first
        .classes
        .iter()
        .enumerate()
        .map(|(i, c)| ClassMetrics {
            class: c.class,
            name: c.name.clone(),
            dsc: reports.iter().map(|r| r.classes[i].dsc).sum::<f64>() / n,
            hd_px: mean_defined(reports.iter().map(|r| r.classes[i].hd_px)),
            hd_mm: mean_defined(reports.iter().map(|r| r.classes[i].hd_mm)),
        })
        .collect();
    Some(MetricReport {
        classes,
        mean_dsc: reports.iter().map(|r| r.mean_dsc).sum::<f64>() / n,
        mean_hd_px: mean_defined(reports.iter().map(|r| r.mean_hd_px)),
        mean_hd_mm: mean_defined(reports.iter().map(|r| r.mean_hd_mm)),
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "NA".into())
}

impl MetricReport {
    /// Column names: per-class DSC, per-class HD, then averages.
    pub fn header(&self, delimiter: char) -> String {
        let mut cols: Vec<String> = self.classes.iter().map(|c| format!("{}_DSC", c.name)).collect();
        cols.extend(self.classes.iter().map(|c| format!("{}_HD", c.name)));
        cols.push("mean_DSC".into());
        cols.push("mean_HD".into());
        cols.join(&delimiter.to_string())
    }

    /// One delimited row matching [`MetricReport::header`]; HD in mm when
    /// available, else pixels. Undefined values print as `NA`.
    pub fn row(&self, delimiter: char) -> String {
        let mm = self.classes.iter().any(|c| c.hd_mm.is_some());
        let hd = |c: &ClassMetrics| if mm { c.hd_mm } else { c.hd_px };
        let mut cols: Vec<String> = self.classes.iter().map(|c| format!("{:.4}", c.dsc)).collect();
        cols.extend(self.classes.iter().map(|c| fmt_opt(hd(c))));
        cols.push(format!("{:.4}", self.mean_dsc));
        cols.push(fmt_opt(if mm { self.mean_hd_mm } else { self.mean_hd_px }));
        cols.join(&delimiter.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(h: usize, w: usize, on: &[Point]) -> BinaryMask {
        let mut bits = vec![false; h * w];
        for &(r, c) in on {
            bits[r * w + c] = true;
        }
        BinaryMask::new(h, w, bits)
    }

    #[test]
    fn dsc_examples() {
        let a = mask(3, 3, &[(0, 0), (1, 1)]);
        assert_eq!(dsc(&a, &a).unwrap(), 1.0);
        let b = mask(3, 3, &[(2, 2)]);
        assert_eq!(dsc(&a, &b).unwrap(), 0.0);
        let x = mask(4, 4, &[(0, 0), (0, 1), (0, 2), (0, 3)]);
        let y = mask(4, 4, &[(0, 2), (0, 3), (1, 0), (1, 1)]);
        assert_eq!(dsc(&x, &y).unwrap(), 0.5);
        let e = mask(3, 3, &[]);
        assert_eq!(dsc(&e, &e).unwrap(), 1.0);
        assert_eq!(dsc(&e, &a).unwrap(), 0.0);
        assert!(dsc(&e, &mask(2, 3, &[])).is_err());
    }

    #[test]
    fn hausdorff_examples() {
        let p = [(0, 0), (10, 0)];
        assert_eq!(hausdorff(&p, &p, HausdorffMode::Symmetric, (1.0, 1.0)), Some(0.0));
        assert_eq!(
            hausdorff(&[(0, 0)], &[(3, 4)], HausdorffMode::Symmetric, (1.0, 1.0)),
            Some(5.0)
        );
        let y = [(0, 0)];
        assert_eq!(hausdorff(&p, &y, HausdorffMode::Directed, (1.0, 1.0)), Some(10.0));
        assert_eq!(hausdorff(&y, &p, HausdorffMode::Directed, (1.0, 1.0)), Some(0.0));
        assert_eq!(hausdorff(&p, &y, HausdorffMode::Symmetric, (1.0, 1.0)), Some(10.0));
        assert_eq!(hausdorff(&p, &[], HausdorffMode::Symmetric, (1.0, 1.0)), None);
        assert_eq!(
            hausdorff(&[(0, 0)], &[(3, 4)], HausdorffMode::Symmetric, (2.0, 0.5)),
            Some((36.0f64 + 4.0).sqrt())
        );
    }

    #[test]
    fn boundary_examples() {
        assert_eq!(boundary_points(&mask(5, 5, &[(2, 2)])), vec![(2, 2)]);
        let square: Vec<Point> = (1..4).flat_map(|r| (1..4).map(move |c| (r, c))).collect();
        let b = boundary_points(&mask(5, 5, &square));
        assert_eq!(b.len(), 8);
        assert!(!b.contains(&(2, 2)));
        assert!(boundary_points(&mask(4, 4, &[])).is_empty());
    }

    #[test]
    fn evaluate_identity_and_empty_prediction() {
        let labels: Vec<u8> = (0..36).map(|i| (i % 4) as u8).collect();
        let truth = SegmentationMask::new(6, 6, 4, labels).unwrap();
        let r = evaluate(&truth, &truth).unwrap();
        assert_eq!(r.classes.iter().map(|c| c.name.as_str()).collect::<Vec<_>>(), ["LV", "RV", "LMyo"]);
        assert!(r.classes.iter().all(|c| c.dsc == 1.0 && c.hd_px == Some(0.0)));
        let bg = SegmentationMask::new(6, 6, 4, vec![0; 36]).unwrap();
        let r = evaluate(&bg, &truth).unwrap();
        assert!(r.classes.iter().all(|c| c.dsc == 0.0 && c.hd_px.is_none()));
        assert_eq!(r.mean_hd_px, None);
        let small = SegmentationMask::new(5, 6, 4, vec![0; 30]).unwrap();
        assert!(evaluate(&small, &truth).is_err());
    }

    #[test]
    fn mask_rejects_out_of_range_labels() {
        assert!(SegmentationMask::new(1, 2, 4, vec![0, 4]).is_err());
        assert!(SegmentationMask::new(1, 2, 4, vec![0]).is_err());
    }

    #[test]
    fn report_table_layout() {
        let truth = SegmentationMask::new(2, 2, 4, vec![1, 2, 3, 0]).unwrap().with_spacing(1.5, 1.5);
        let r = evaluate(&truth, &truth).unwrap();
        assert_eq!(
            r.header(','),
            "LV_DSC,RV_DSC,LMyo_DSC,LV_HD,RV_HD,LMyo_HD,mean_DSC,mean_HD"
        );
        assert_eq!(r.row(','), "1.0000,1.0000,1.0000,0.0000,0.0000,0.0000,1.0000,0.0000");
    }
}
