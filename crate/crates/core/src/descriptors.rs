//! Axiomatic per-vertex input features.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{TriangleMesh, VertexSubset};
use crate::spectral::SpectralBasis;

/// Where a feature matrix came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    XyzNormals,
    Hks,
    Wks,
    Optimized,
    Loaded,
    Random,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::XyzNormals => "xyz-normals",
            Provenance::Hks => "hks",
            Provenance::Wks => "wks",
            Provenance::Optimized => "optimized",
            Provenance::Loaded => "loaded",
            Provenance::Random => "random",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "xyz-normals" => Self::XyzNormals,
            "hks" => Self::Hks,
            "wks" => Self::Wks,
            "optimized" => Self::Optimized,
            "loaded" => Self::Loaded,
            "random" => Self::Random,
            _ => return None,
        })
    }
}

/// `n x d` pointwise descriptors, one row per vertex.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    values: DMatrix<f64>,
    provenance: Provenance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Zero,
    Tile,
}

impl FeatureMatrix {
    pub fn new(values: DMatrix<f64>, provenance: Provenance) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature matrix".into()));
        }
        Ok(Self { values, provenance })
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn into_values(self) -> DMatrix<f64> {
        self.values
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    /// Widens to `d` columns by zero-padding or cyclic tiling, or truncates.
    pub fn fit_dim(&self, d: usize, padding: Padding) -> Self {
        let src = self.dim();
        let values = DMatrix::from_fn(self.rows(), d, |r, c| {
            if c < src {
                self.values[(r, c)]
            } else {
                match padding {
                    Padding::Zero => 0.0,
                    Padding::Tile => self.values[(r, c % src)],
                }
            }
        });
        Self {
            values,
            provenance: self.provenance,
        }
    }

    /// Unit Euclidean norm per row (zero rows stay zero).
    pub fn normalized_rows(&self) -> Self {
        let mut values = self.values.clone();
        for mut row in values.row_iter_mut() {
            let n = row.norm();
            if n > 0.0 {
                row /= n;
            }
        }
        Self {
            values,
            provenance: self.provenance,
        }
    }

    /// Column-wise standardization with statistics taken from `reference`,
    /// so two shapes stay on a common scale.
    pub fn standardized_like(&self, reference: &FeatureMatrix) -> Result<Self> {
        if reference.dim() != self.dim() {
            return Err(Error::dims("feature standardization", reference.dim(), self.dim()));
        }
        let n = reference.rows() as f64;
        let mut values = self.values.clone();
        for c in 0..self.dim() {
            let col = reference.values.column(c);
            let mean = col.sum() / n;
            let sd = (col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
            let sd = if sd > 0.0 { sd } else { 1.0 };
            for r in 0..values.nrows() {
                values[(r, c)] = (values[(r, c)] - mean) / sd;
            }
        }
        Ok(Self {
            values,
            provenance: self.provenance,
        })
    }

    pub fn with_provenance(self, provenance: Provenance) -> Self {
        Self { provenance, ..self }
    }
}

/// Positions in columns 0-2, unit normals in columns 3-5.
pub fn xyz_normal_features(mesh: &TriangleMesh) -> FeatureMatrix {
    let values = DMatrix::from_fn(mesh.vertex_count(), 6, |r, c| {
        if c < 3 {
            mesh.vertices()[r][c]
        } else {
            mesh.vertex_normals()[r][c - 3]
        }
    });
    FeatureMatrix {
        values,
        provenance: Provenance::XyzNormals,
    }
}

/// `HKS(i, t) = sum_j exp(-lambda_j t) psi_j(i)^2`.
pub fn heat_kernel_signature(basis: &SpectralBasis, times: &[f64]) -> Result<FeatureMatrix> {
    if times.is_empty() {
        return Err(Error::InvalidArgument("empty time list".into()));
    }
    if times.iter().any(|t| !(*t > 0.0)) {
        return Err(Error::InvalidArgument("heat times must be positive".into()));
    }
    let psi2 = basis.eigenvectors().map(|x| x * x);
    let weights = DMatrix::from_fn(basis.k(), times.len(), |j, t| {
        (-basis.eigenvalues()[j].max(0.0) * times[t]).exp()
    });
    FeatureMatrix::new(psi2 * weights, Provenance::Hks)
}

/// `count` log-spaced times over `[4 ln 10 / lambda_max, 4 ln 10 / lambda_1]`
/// (`lambda_1` the first nonzero eigenvalue).
pub fn hks_log_times(basis: &SpectralBasis, count: usize) -> Result<Vec<f64>> {
    let nonzero: Vec<f64> = basis.eigenvalues().iter().copied().filter(|&l| l > 1e-8).collect();
    let (first, last) = match (nonzero.first(), nonzero.last()) {
        (Some(&f), Some(&l)) => (f, l),
        _ => return Err(Error::InvalidArgument("basis has no nonzero eigenvalue".into())),
    };
    let c = 4.0 * std::f64::consts::LN_10;
    let (lo, hi) = ((c / last).ln(), (c / first).ln());
    Ok(log_space(lo, hi, count))
}

fn log_space(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![lo.exp()];
    }
    (0..count)
        .map(|i| (lo + (hi - lo) * i as f64 / (count - 1) as f64).exp())
        .collect()
}

/// Log-energy grid for the wave kernel signature: `bins` centres spread over
/// the nonzero log-eigenvalues of `basis`, pulled in by two band widths, with
/// band width `7 * (e_max - e_min) / bins`.
#[derive(Debug, Clone, PartialEq)]
pub struct WksEnergies {
    pub centers: Vec<f64>,
    pub sigma: f64,
}

pub fn wks_energies(basis: &SpectralBasis, bins: usize) -> Result<WksEnergies> {
    if bins == 0 {
        return Err(Error::InvalidArgument("zero energy bins".into()));
    }
    let log_l: Vec<f64> = basis.eigenvalues().iter().filter(|&&l| l > 1e-8).map(|l| l.ln()).collect();
    if log_l.len() < 2 {
        return Err(Error::InvalidArgument("wave kernel needs at least two nonzero modes".into()));
    }
    let (mut e_min, mut e_max) = (log_l[0], log_l[log_l.len() - 1]);
    let sigma = 7.0 * (e_max - e_min) / bins as f64;
    e_min += 2.0 * sigma;
    e_max -= 2.0 * sigma;
    let centers = if bins == 1 {
        vec![0.5 * (e_min + e_max)]
    } else {
        (0..bins)
            .map(|i| e_min + (e_max - e_min) * i as f64 / (bins - 1) as f64)
            .collect()
    };
    Ok(WksEnergies { centers, sigma })
}

/// Wave kernel signature on the basis' own energy grid.
pub fn wave_kernel_signature(basis: &SpectralBasis, bins: usize) -> Result<FeatureMatrix> {
    wave_kernel_signature_at(basis, &wks_energies(basis, bins)?)
}

/// Wave kernel signature on a given energy grid; each band is normalized by
/// its total weight over the modes. Zero modes do not contribute.
pub fn wave_kernel_signature_at(basis: &SpectralBasis, energies: &WksEnergies) -> Result<FeatureMatrix> {
    let modes: Vec<usize> = (0..basis.k()).filter(|&j| basis.eigenvalues()[j] > 1e-8).collect();
    if modes.is_empty() || !(energies.sigma > 0.0) {
        return Err(Error::InvalidArgument("wave kernel needs nonzero modes and a positive band width".into()));
    }
    let log_l: Vec<f64> = modes.iter().map(|&j| basis.eigenvalues()[j].ln()).collect();
    let bins = energies.centers.len();
    let s2 = 2.0 * energies.sigma * energies.sigma;
    let mut weights = DMatrix::zeros(modes.len(), bins);
    for (e, &energy) in energies.centers.iter().enumerate() {
        let col: Vec<f64> = log_l.iter().map(|l| (-(energy - l).powi(2) / s2).exp()).collect();
        let total: f64 = col.iter().sum();
        if total > 0.0 {
            for (m, w) in col.into_iter().enumerate() {
                weights[(m, e)] = w / total;
            }
        }
    }
    let psi2 = DMatrix::from_fn(basis.vertex_count(), modes.len(), |r, m| {
        basis.eigenvectors()[(r, modes[m])].powi(2)
    });
    FeatureMatrix::new(psi2 * weights, Provenance::Wks)
}

/// Rows of `features` at `subset`, in subset order.
pub fn restrict_features(features: &FeatureMatrix, subset: &VertexSubset) -> Result<FeatureMatrix> {
    if subset.parent_size() != features.rows() {
        return Err(Error::InvalidSubset(format!(
            "subset over {} vertices applied to {} feature rows",
            subset.parent_size(),
            features.rows()
        )));
    }
    Ok(FeatureMatrix {
        values: features.values.select_rows(subset.indices()),
        provenance: features.provenance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::shapes;
    use crate::spectral::eigenbasis;
    use approx::assert_relative_eq;

    #[test]
    fn xyz_normals_on_plane() {
        let m = shapes::grid(3, 3, 1.0, 1.0);
        let f = xyz_normal_features(&m);
        assert_eq!(f.dim(), 6);
        for r in 0..f.rows() {
            assert_relative_eq!(f.values()[(r, 5)].abs(), 1.0, epsilon = 1e-12);
            assert_eq!(f.values()[(r, 3)], 0.0);
            assert_eq!(f.values()[(r, 0)], m.vertices()[r].x);
        }
    }

    #[test]
    fn xyz_shift_under_translation() {
        let m = shapes::humanoid(4, 0);
        let t = nalgebra::Vector3::new(0.5, -2.0, 3.0);
        let moved = m.transformed(&nalgebra::Rotation3::identity(), 1.0, t).unwrap();
        let (a, b) = (xyz_normal_features(&m), xyz_normal_features(&moved));
        for r in 0..a.rows() {
            for c in 0..3 {
                assert_relative_eq!(b.values()[(r, c)] - a.values()[(r, c)], t[c], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn hks_limits() {
        let m = shapes::cube_sphere(2);
        let n = m.vertex_count();
        let b = eigenbasis(&m, n).unwrap();
        let late = heat_kernel_signature(&b, &[1e4]).unwrap();
        let area = m.total_area();
        for r in 0..n {
            assert_relative_eq!(late.values()[(r, 0)], 1.0 / area, max_relative = 1e-6);
        }
        let early = heat_kernel_signature(&b, &[1e-12]).unwrap();
        for r in 0..n {
            assert_relative_eq!(early.values()[(r, 0)], 1.0 / m.vertex_areas()[r], max_relative = 1e-6);
        }
        assert!(heat_kernel_signature(&b, &[]).is_err());
    }

    #[test]
    fn log_times_span() {
        let b = eigenbasis(&shapes::icosphere(2), 20).unwrap();
        let t = hks_log_times(&b, 5).unwrap();
        assert_eq!(t.len(), 5);
        assert!(t.windows(2).all(|w| w[0] < w[1]));
        let c = 4.0 * std::f64::consts::LN_10;
        assert_relative_eq!(t[0], c / b.max_eigenvalue(), max_relative = 1e-12);
    }

    #[test]
    fn wks_is_finite_and_positive() {
        let b = eigenbasis(&shapes::humanoid(5, 1), 40).unwrap();
        let w = wave_kernel_signature(&b, 16).unwrap();
        assert_eq!(w.dim(), 16);
        assert!(w.values().iter().all(|&x| x >= 0.0 && x.is_finite()));
    }

    #[test]
    fn restriction_rules() {
        let m = shapes::grid(2, 2, 1.0, 1.0);
        let f = xyz_normal_features(&m);
        let all = VertexSubset::all(m.vertex_count());
        assert_eq!(restrict_features(&f, &all).unwrap(), f);
        let one = VertexSubset::new(m.vertex_count(), vec![4]).unwrap();
        let r = restrict_features(&f, &one).unwrap();
        assert_eq!(r.rows(), 1);
        assert_eq!(r.values().row(0), f.values().row(4));
        let s = VertexSubset::new(m.vertex_count(), vec![1, 3, 8]).unwrap();
        let rs = restrict_features(&f, &s).unwrap();
        assert_eq!(restrict_features(&rs, &VertexSubset::all(3)).unwrap(), rs);
        assert!(restrict_features(&f, &VertexSubset::all(3)).is_err());
    }

    #[test]
    fn padding_modes() {
        let f = FeatureMatrix::new(DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]), Provenance::Loaded).unwrap();
        let z = f.fit_dim(5, Padding::Zero);
        assert_eq!(z.values().row(0).iter().copied().collect::<Vec<_>>(), vec![1.0, 2.0, 0.0, 0.0, 0.0]);
        let t = f.fit_dim(5, Padding::Tile);
        assert_eq!(t.values().row(1).iter().copied().collect::<Vec<_>>(), vec![3.0, 4.0, 3.0, 4.0, 3.0]);
        assert_eq!(f.fit_dim(1, Padding::Zero).dim(), 1);
    }
}
