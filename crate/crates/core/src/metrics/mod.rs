//! Volumetric evaluation: Dice, HD95, sensitivity, surface distances,
//! paired t-test and CSV reports.

mod report;
mod surface;

use std::fmt::Write as _;
use std::path::Path;

use statrs::distribution::{ContinuousCDF, StudentsT};

pub use report::{MetricsReport, Summary, VolumeMetrics};
pub use surface::{boundary_voxels, squared_distance_to};

use crate::error::{Error, Result};
use crate::volume::{MaskVolume, Spacing};

fn check_dims(a: &MaskVolume, b: &MaskVolume) -> Result<()> {
    if a.dims() == b.dims() {
        Ok(())
    } else {
        Err(Error::Shape(format!("mask dims {:?} vs {:?}", a.dims(), b.dims())))
    }
}

/// `2|A∩B| / (|A|+|B|)`; two empty masks score 1.
pub fn dice_coeff(a: &MaskVolume, b: &MaskVolume) -> Result<f64> {
    check_dims(a, b)?;
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.labels.iter().zip(b.labels.iter()) {
        let (x, y) = (x != 0, y != 0);
        na += x as usize;
        nb += y as usize;
        inter += (x && y) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// `TP / (TP + FN)`; fails on an empty ground truth.
pub fn sensitivity(pred: &MaskVolume, gt: &MaskVolume) -> Result<f64> {
    check_dims(pred, gt)?;
    let (mut tp, mut pos) = (0usize, 0usize);
    for (&p, &g) in pred.labels.iter().zip(gt.labels.iter()) {
        if g != 0 {
            pos += 1;
            tp += (p != 0) as usize;
        }
    }
    if pos == 0 {
        return Err(Error::EmptyMask("ground truth"));
    }
    Ok(tp as f64 / pos as f64)
}

/// Percentile with linear interpolation between order statistics
/// (position `q/100 · (n − 1)` in the sorted sample).
pub fn percentile(values: &mut [f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let pos = (q / 100.0).clamp(0.0, 1.0) * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    Some(values[lo] + (values[hi] - values[lo]) * frac)
}

/// Nearest-surface distance (mm) from each boundary voxel of `from` to the boundary of `to`.
fn directed_distances(from: &[[usize; 3]], to: &[[usize; 3]], dims: (usize, usize, usize), spacing: &Spacing) -> Vec<f64> {
    let dt = squared_distance_to(dims, to, spacing);
    from.iter().map(|p| dt[[p[0], p[1], p[2]]].sqrt()).collect()
}

/// Pooled symmetric surface distances `d(∂A→∂B) ∪ d(∂B→∂A)` in mm.
pub fn symmetric_surface_distances(a: &MaskVolume, b: &MaskVolume, spacing: &Spacing) -> Result<Vec<f64>> {
    check_dims(a, b)?;
    spacing.validate()?;
    let ba = boundary_voxels(a);
    let bb = boundary_voxels(b);
    if ba.is_empty() {
        return Err(Error::EmptyMask("first mask"));
    }
    if bb.is_empty() {
        return Err(Error::EmptyMask("second mask"));
    }
    let mut d = directed_distances(&ba, &bb, a.dims(), spacing);
    d.extend(directed_distances(&bb, &ba, a.dims(), spacing));
    Ok(d)
}

/// 95th percentile of the pooled symmetric boundary distances, in mm.
pub fn hd95(a: &MaskVolume, b: &MaskVolume, spacing: &Spacing) -> Result<f64> {
    let mut d = symmetric_surface_distances(a, b, spacing)?;
    Ok(percentile(&mut d, 95.0).expect("non-empty boundaries"))
}

/// Boundary voxels of a prediction with their distance to the reference surface.
#[derive(Clone, Debug, PartialEq)]
pub struct SurfaceDistanceMap {
    /// `([z, y, x], distance_mm)`
    pub points: Vec<([usize; 3], f64)>,
}

impl SurfaceDistanceMap {
    pub fn max(&self) -> f64 {
        self.points.iter().map(|p| p.1).fold(0.0, f64::max)
    }

    /// One `x,y,z,distance_mm` line per boundary voxel.
    pub fn to_text(&self) -> String {
        let mut s = String::from("x,y,z,distance_mm\n");
        for ([z, y, x], d) in &self.points {
            let _ = writeln!(s, "{x},{y},{z},{d:.6}");
        }
        s
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

pub fn surface_distance_map(pred: &MaskVolume, gt: &MaskVolume, spacing: &Spacing) -> Result<SurfaceDistanceMap> {
    check_dims(pred, gt)?;
    spacing.validate()?;
    let bp = boundary_voxels(pred);
    let bg = boundary_voxels(gt);
    if bp.is_empty() {
        return Err(Error::EmptyMask("prediction"));
    }
    if bg.is_empty() {
        return Err(Error::EmptyMask("ground truth"));
    }
    let d = directed_distances(&bp, &bg, pred.dims(), spacing);
    Ok(SurfaceDistanceMap {
        points: bp.into_iter().zip(d).collect(),
    })
}

/// Outcome of a paired two-sided Student t-test.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TTest {
    /// `None` when the differences have zero variance.
    pub t: Option<f64>,
    pub p: f64,
    pub degenerate: bool,
}

pub fn paired_ttest(x: &[f64], y: &[f64]) -> Result<TTest> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("paired samples of length {} and {}", x.len(), y.len())));
    }
    let n = x.len();
    if n < 2 {
        return Err(Error::Invalid("paired t-test needs n >= 2".into()));
    }
    let diffs: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    // relative tolerance: floating-point differences of equal shifts are not bit-equal
    let scale = diffs.iter().fold(0.0f64, |m, d| m.max(d.abs()));
    if var <= (1e-12 * scale).powi(2) {
        let all_zero = scale == 0.0;
        return Ok(TTest {
            t: None,
            p: if all_zero { 1.0 } else { 0.0 },
            degenerate: true,
        });
    }
    let t = mean / (var / n as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).map_err(|e| Error::Invalid(e.to_string()))?;
    let p = 2.0 * dist.cdf(-t.abs());
    Ok(TTest {
        t: Some(t),
        p,
        degenerate: false,
    })
}
