//! Geodesic error of a predicted point map against ground truth.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geodesics::GeodesicMatrix;
use crate::matching::PointMap;

/// Error thresholds `0.00, 0.01, ..., 0.25`.
pub fn default_pck_thresholds() -> Vec<f64> {
    (0..=25).map(|i| i as f64 / 100.0).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PckPoint {
    pub threshold: f64,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Normalized geodesic error per part vertex.
    pub per_vertex: Vec<f64>,
    pub mean_error: f64,
    /// `mean_error * 100`, the customary reporting unit.
    pub mean_error_x100: f64,
    pub pck: Vec<PckPoint>,
    /// Distances were divided by this (square root of the full-shape area).
    pub normalization: f64,
    pub metadata: BTreeMap<String, String>,
}

/// Mean geodesic distance on the full shape between predicted and true
/// targets, divided by `sqrt(full_area)`.
pub fn evaluate(pred: &PointMap, gt: &[usize], geo_x: &GeodesicMatrix, full_area: f64) -> Result<EvalReport> {
    if pred.len() != gt.len() {
        return Err(Error::dims("predicted map length", gt.len(), pred.len()));
    }
    if gt.is_empty() {
        return Err(Error::InvalidArgument("empty ground-truth map".into()));
    }
    if !(full_area > 0.0) {
        return Err(Error::ZeroArea);
    }
    let n = geo_x.size();
    let norm = full_area.sqrt();
    let mut per_vertex = Vec::with_capacity(gt.len());
    for (i, (&p, &g)) in pred.targets.iter().zip(gt).enumerate() {
        if p >= n || g >= n {
            return Err(Error::InvalidArgument(format!("map entry {i} outside the {n} full-shape vertices")));
        }
        let d = geo_x.get(p, g);
        if !d.is_finite() {
            return Err(Error::InfiniteDistance);
        }
        per_vertex.push(d / norm);
    }
    let mean_error = per_vertex.iter().sum::<f64>() / per_vertex.len() as f64;
    let pck = pck_curve(&per_vertex, &default_pck_thresholds());
    Ok(EvalReport {
        per_vertex,
        mean_error,
        mean_error_x100: mean_error * 100.0,
        pck,
        normalization: norm,
        metadata: BTreeMap::new(),
    })
}

/// Fraction of errors at or below each threshold.
pub fn pck_curve(errors: &[f64], thresholds: &[f64]) -> Vec<PckPoint> {
    let n = errors.len().max(1) as f64;
    thresholds
        .iter()
        .map(|&t| PckPoint {
            threshold: t,
            fraction: errors.iter().filter(|&&e| e <= t).count() as f64 / n,
        })
        .collect()
}

impl EvalReport {
    pub fn with_metadata(mut self, key: &str, value: impl ToString) -> Self {
        self.metadata.insert(key.into(), value.to_string());
        self
    }

    pub fn write_pck_csv(&self, out: &mut impl Write) -> Result<()> {
        if self.per_vertex.is_empty() {
            return Err(Error::InvalidArgument("no evaluated vertices".into()));
        }
        writeln!(out, "threshold,fraction")?;
        for p in &self.pck {
            writeln!(out, "{:.2},{}", p.threshold, p.fraction)?;
        }
        Ok(())
    }
}

pub fn emit_pck_csv(report: &EvalReport, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    report.write_pck_csv(&mut f)?;
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geodesics::geodesic_matrix;
    use crate::matching::MapMethod;
    use crate::mesh::shapes;

    #[test]
    fn perfect_map_scores_zero() {
        let m = shapes::grid(3, 3, 1.0, 1.0);
        let g = geodesic_matrix(&m).unwrap();
        let gt: Vec<usize> = (0..16).collect();
        let r = evaluate(&PointMap::new(gt.clone(), 16, MapMethod::GroundTruth), &gt, &g, 1.0).unwrap();
        assert_eq!(r.mean_error, 0.0);
        assert_eq!(r.pck.len(), 26);
        assert!(r.pck.iter().all(|p| p.fraction == 1.0));
    }

    #[test]
    fn pck_is_monotone_and_ends_at_tail() {
        let errs = [0.0, 0.005, 0.02, 0.3, 0.11];
        let c = pck_curve(&errs, &default_pck_thresholds());
        assert!(c.windows(2).all(|w| w[0].fraction <= w[1].fraction));
        assert_eq!(c[0].fraction, 0.2);
        assert_eq!(c[25].fraction, 0.8);
    }

    #[test]
    fn x100_scaling() {
        let m = shapes::grid(2, 1, 2.0, 1.0);
        let g = geodesic_matrix(&m).unwrap();
        let pred = PointMap::new(vec![1], 6, MapMethod::NearestNeighbor);
        let r = evaluate(&pred, &[0], &g, 4.0).unwrap();
        assert!((r.mean_error - 0.5).abs() < 1e-6);
        assert!((r.mean_error_x100 - 100.0 * r.mean_error).abs() < 1e-12);
    }

    #[test]
    fn empty_rejected() {
        let m = shapes::single_triangle();
        let g = geodesic_matrix(&m).unwrap();
        assert!(evaluate(&PointMap::new(vec![], 3, MapMethod::GroundTruth), &[], &g, 0.5).is_err());
    }
}
