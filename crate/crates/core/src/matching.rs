//! Feature similarity, soft correspondences and hard point maps.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::SpectralBasis;

/// Row-normalized copy of `f` plus the original row norms.
pub(crate) fn normalize_rows(f: &DMatrix<f64>) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let mut u = f.clone();
    let mut norms = DVector::zeros(f.nrows());
    for (r, mut row) in u.row_iter_mut().enumerate() {
        let n = row.norm();
        if !n.is_finite() {
            return Err(Error::NonFinite(format!("feature row {r}")));
        }
        if n == 0.0 {
            return Err(Error::ZeroNormRow { vertex: r });
        }
        row /= n;
        norms[r] = n;
    }
    Ok((u, norms))
}

/// `S_ij = <f_y(i), f_x(j)> / (|f_y(i)| |f_x(j)|)`, shape `n_y x n_x`.
pub fn cosine_similarity(fy: &DMatrix<f64>, fx: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if fy.ncols() != fx.ncols() {
        return Err(Error::dims("feature dimension", fy.ncols(), fx.ncols()));
    }
    let (u, _) = normalize_rows(fy)?;
    let (v, _) = normalize_rows(fx)?;
    Ok(u * v.transpose())
}

/// Row-wise softmax of `s / tau` with the row maximum subtracted first.
pub fn row_softmax(s: &DMatrix<f64>, tau: f64) -> Result<DMatrix<f64>> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    let mut p = s.clone();
    for mut row in p.row_iter_mut() {
        let max = row.max();
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = ((*x - max) / tau).exp();
            sum += *x;
        }
        row /= sum;
    }
    Ok(p)
}

/// Soft correspondence `P` (`n_y x n_x`). Row-stochastic when produced by
/// softmax; maps converted from a functional map need not be.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftCorrespondence {
    matrix: DMatrix<f64>,
    temperature: Option<f64>,
    row_stochastic: bool,
}

impl SoftCorrespondence {
    pub fn from_matrix(matrix: DMatrix<f64>, temperature: Option<f64>, row_stochastic: bool) -> Self {
        Self {
            matrix,
            temperature,
            row_stochastic,
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn temperature(&self) -> Option<f64> {
        self.temperature
    }

    pub fn is_row_stochastic(&self) -> bool {
        self.row_stochastic
    }

    pub fn shape(&self) -> (usize, usize) {
        self.matrix.shape()
    }

    /// Largest deviation of any row sum from one.
    pub fn row_sum_error(&self) -> f64 {
        self.matrix
            .row_iter()
            .map(|r| (r.sum() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Hard assignment by row argmax (lowest index on ties).
    pub fn argmax(&self) -> PointMap {
        PointMap::new(row_argmax(&self.matrix), self.matrix.ncols(), MapMethod::NearestNeighbor)
    }
}

/// `softmax(cos(F_y, F_x) / tau)` row by row.
pub fn soft_correspondence(fy: &DMatrix<f64>, fx: &DMatrix<f64>, tau: f64) -> Result<SoftCorrespondence> {
    let s = cosine_similarity(fy, fx)?;
    Ok(SoftCorrespondence::from_matrix(row_softmax(&s, tau)?, Some(tau), true))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MapMethod {
    NearestNeighbor,
    SpectrallySmoothed,
    GroundTruth,
}

/// Hard map from each part vertex to a full-shape vertex.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PointMap {
    pub targets: Vec<usize>,
    pub target_count: usize,
    pub method: MapMethod,
}

impl PointMap {
    pub fn new(targets: Vec<usize>, target_count: usize, method: MapMethod) -> Self {
        Self {
            targets,
            target_count,
            method,
        }
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// One target per line.
    pub fn write_text(&self, out: &mut impl Write) -> Result<()> {
        for t in &self.targets {
            writeln!(out, "{t}")?;
        }
        Ok(())
    }

    pub fn save_text(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_text(&mut f)?;
        f.flush()?;
        Ok(())
    }

    /// Reads a one-index-per-line file, validating indices against `target_count`.
    pub fn load_text(path: &Path, target_count: usize, method: MapMethod) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut targets = Vec::new();
        let mut offset = 0u64;
        for line in text.split_inclusive('\n') {
            let t = line.trim();
            if !t.is_empty() {
                let v: i64 = t
                    .parse()
                    .map_err(|_| Error::parse(offset, format!("expected a vertex index, found {t:?}")))?;
                if v < 0 || v as usize >= target_count {
                    return Err(Error::IndexOutOfRange {
                        offset,
                        index: v,
                        count: target_count,
                    });
                }
                targets.push(v as usize);
            }
            offset += line.len() as u64;
        }
        Ok(Self::new(targets, target_count, method))
    }
}

fn row_argmax(m: &DMatrix<f64>) -> Vec<usize> {
    (0..m.nrows())
        .map(|r| {
            let row = m.row(r);
            let mut best = 0;
            for c in 1..row.len() {
                if row[c] > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Nearest neighbour in cosine similarity. Ties go to the lowest index.
pub fn nearest_neighbor_map(fy: &DMatrix<f64>, fx: &DMatrix<f64>) -> Result<PointMap> {
    let s = cosine_similarity(fy, fx)?;
    Ok(PointMap::new(row_argmax(&s), fx.nrows(), MapMethod::NearestNeighbor))
}

/// Projects a hard map onto the two spectral bases and back, then takes the
/// row argmax of `Psi_y Psi_y^T A_y Pi A_x Psi_x Psi_x^T`.
pub fn spectrally_smoothed_map(
    map: &PointMap,
    basis_x: &SpectralBasis,
    basis_y: &SpectralBasis,
) -> Result<PointMap> {
    let (ny, nx) = (basis_y.vertex_count(), basis_x.vertex_count());
    if map.len() != ny {
        return Err(Error::dims("point map length", ny, map.len()));
    }
    if map.target_count != nx {
        return Err(Error::dims("point map targets", nx, map.target_count));
    }
    let psi_y = basis_y.eigenvectors();
    let psi_x = basis_x.eigenvectors();
    let ax_psi_x = basis_x.mass_weighted();
    // Psi_y^T A_y Pi A_x Psi_x: k_y x k_x.
    let mut mid = DMatrix::zeros(basis_y.k(), basis_x.k());
    for (i, &j) in map.targets.iter().enumerate() {
        let a = basis_y.mass()[i];
        for p in 0..basis_y.k() {
            let w = a * psi_y[(i, p)];
            for q in 0..basis_x.k() {
                mid[(p, q)] += w * ax_psi_x[(j, q)];
            }
        }
    }
    // Rows of Psi_y * mid, scored against Psi_x^T in chunks.
    let left = psi_y * mid;
    let psi_x_t = psi_x.transpose();
    const CHUNK: usize = 256;
    let targets: Vec<usize> = (0..ny)
        .step_by(CHUNK)
        .collect::<Vec<_>>()
        .into_par_iter()
        .flat_map_iter(|start| {
            let end = (start + CHUNK).min(ny);
            let scores = left.rows(start, end - start) * &psi_x_t;
            row_argmax(&scores)
        })
        .collect();
    Ok(PointMap::new(targets, nx, MapMethod::SpectrallySmoothed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn rand_matrix(r: usize, c: usize, seed: u64) -> DMatrix<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(r, c, |_, _| rng.gen::<f64>() - 0.5)
    }

    #[test]
    fn identical_features_give_unit_similarity() {
        let f = rand_matrix(7, 4, 1);
        let s = cosine_similarity(&f, &f).unwrap();
        for i in 0..7 {
            assert_relative_eq!(s[(i, i)], 1.0, epsilon = 1e-12);
        }
        assert!(s.iter().all(|&x| x <= 1.0 + 1e-12 && x >= -1.0 - 1e-12));
    }

    #[test]
    fn zero_row_rejected() {
        let mut f = rand_matrix(3, 2, 2);
        f.row_mut(1).fill(0.0);
        assert!(matches!(cosine_similarity(&f, &f), Err(Error::ZeroNormRow { vertex: 1 })));
    }

    #[test]
    fn softmax_rows_and_limits() {
        let s = DMatrix::from_row_slice(1, 3, &[0.9, 0.7, 0.2]);
        let p = row_softmax(&s, 0.01).unwrap();
        assert_relative_eq!(p.row(0).sum(), 1.0, epsilon = 1e-12);
        assert_relative_eq!(p[(0, 1)], (-20.0f64).exp(), max_relative = 1e-6);
        let flat = row_softmax(&s, 1e9).unwrap();
        for c in 0..3 {
            assert_relative_eq!(flat[(0, c)], 1.0 / 3.0, epsilon = 1e-8);
        }
        let large = DMatrix::from_row_slice(1, 2, &[1e6, 1e6 - 1.0]);
        assert!(row_softmax(&large, 1e-3).unwrap().iter().all(|x| x.is_finite()));
        assert!(row_softmax(&s, 0.0).is_err());
    }

    #[test]
    fn tie_breaks_to_lowest_index() {
        let fx = DMatrix::from_row_slice(6, 2, &[0.0, 1.0, 0.0, -1.0, 1.0, 0.5, -1.0, 0.0, 0.3, -0.2, 1.0, 0.5]);
        let fy = DMatrix::from_row_slice(1, 2, &[2.0, 1.0]);
        assert_eq!(nearest_neighbor_map(&fy, &fx).unwrap().targets, vec![2]);
    }

    #[test]
    fn point_map_text_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("map.txt");
        let m = PointMap::new(vec![3, 0, 2], 4, MapMethod::NearestNeighbor);
        m.save_text(&p).unwrap();
        assert_eq!(PointMap::load_text(&p, 4, MapMethod::NearestNeighbor).unwrap(), m);
        assert!(PointMap::load_text(&p, 3, MapMethod::NearestNeighbor).is_err());
    }
}
