//! Cotangent Laplace-Beltrami discretization, lumped mass, truncated
//! generalized eigenbasis and the projections built on it.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::mesh::TriangleMesh;

/// Residual bound `|L psi - lambda A psi| <= tol * |A psi|` every mode must meet.
pub const EIGEN_RESIDUAL_TOL: f64 = 1e-6;

/// Compressed sparse row matrix with sorted column indices per row.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl SparseMatrix {
    /// Sums duplicate triplets.
    pub fn from_triplets(n: usize, mut triplets: Vec<(usize, usize, f64)>) -> Self {
        triplets.sort_unstable_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut row_ptr = vec![0; n + 1];
        let mut cols = Vec::with_capacity(triplets.len());
        let mut vals: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            if last == Some((r, c)) {
                *vals.last_mut().expect("non-empty") += v;
            } else {
                cols.push(c);
                vals.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for r in 0..n {
            row_ptr[r + 1] += row_ptr[r];
        }
        Self { n, row_ptr, cols, vals }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let row = &self.cols[self.row_ptr[r]..self.row_ptr[r + 1]];
        match row.binary_search(&c) {
            Ok(p) => self.vals[self.row_ptr[r] + p],
            Err(_) => 0.0,
        }
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.cols[span.clone()].iter().copied().zip(self.vals[span].iter().copied())
    }

    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.n, |r, _| self.row(r).map(|(c, v)| v * x[c]).sum())
    }

    pub fn mul_dense(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.n, x.ncols());
        for r in 0..self.n {
            for (c, v) in self.row(r) {
                for j in 0..x.ncols() {
                    out[(r, j)] += v * x[(c, j)];
                }
            }
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(self.n, self.n);
        for r in 0..self.n {
            for (c, v) in self.row(r) {
                d[(r, c)] = v;
            }
        }
        d
    }
}

/// Stiffness matrix with `L_ij = -(cot a_ij + cot b_ij) / 2` over shared
/// edges (a single cotangent on boundary edges) and zero row sums.
pub fn cotangent_laplacian(mesh: &TriangleMesh) -> Result<SparseMatrix> {
    let v = mesh.vertices();
    let mut trip = Vec::with_capacity(mesh.face_count() * 9);
    for (fi, f) in mesh.faces().iter().enumerate() {
        for corner in 0..3 {
            let o = f[corner];
            let i = f[(corner + 1) % 3];
            let j = f[(corner + 2) % 3];
            let e1 = v[i] - v[o];
            let e2 = v[j] - v[o];
            let cot = e1.dot(&e2) / e1.cross(&e2).norm();
            if !cot.is_finite() {
                return Err(Error::DegenerateFace {
                    face: fi,
                    reason: "non-finite cotangent",
                });
            }
            let w = 0.5 * cot;
            trip.push((i, j, -w));
            trip.push((j, i, -w));
            trip.push((i, i, w));
            trip.push((j, j, w));
        }
    }
    Ok(SparseMatrix::from_triplets(mesh.vertex_count(), trip))
}

/// Leading LBO eigenpairs with the lumped mass they are orthonormal under.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralBasis {
    eigenvalues: DVector<f64>,
    eigenvectors: DMatrix<f64>,
    mass: DVector<f64>,
}

impl SpectralBasis {
    /// Assembles a basis from parts, checking shapes only.
    pub fn from_parts(eigenvalues: DVector<f64>, eigenvectors: DMatrix<f64>, mass: DVector<f64>) -> Result<Self> {
        if eigenvectors.ncols() != eigenvalues.len() {
            return Err(Error::dims("basis columns", eigenvalues.len(), eigenvectors.ncols()));
        }
        if eigenvectors.nrows() != mass.len() {
            return Err(Error::dims("basis rows", mass.len(), eigenvectors.nrows()));
        }
        Ok(Self {
            eigenvalues,
            eigenvectors,
            mass,
        })
    }

    pub fn k(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn vertex_count(&self) -> usize {
        self.mass.len()
    }

    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    /// `n x k`, one mode per column.
    pub fn eigenvectors(&self) -> &DMatrix<f64> {
        &self.eigenvectors
    }

    pub fn mass(&self) -> &DVector<f64> {
        &self.mass
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// First `k` modes.
    pub fn truncated(&self, k: usize) -> Result<Self> {
        if k == 0 || k > self.k() {
            return Err(Error::InvalidArgument(format!("cannot truncate a {}-mode basis to {k}", self.k())));
        }
        Ok(Self {
            eigenvalues: self.eigenvalues.rows(0, k).into_owned(),
            eigenvectors: self.eigenvectors.columns(0, k).into_owned(),
            mass: self.mass.clone(),
        })
    }

    /// `A Psi` (rows scaled by the vertex areas).
    pub fn mass_weighted(&self) -> DMatrix<f64> {
        let mut m = self.eigenvectors.clone();
        for (r, &a) in self.mass.iter().enumerate() {
            m.row_mut(r).scale_mut(a);
        }
        m
    }

    /// `Psi^T A Psi`, the identity for a valid basis.
    pub fn gram(&self) -> DMatrix<f64> {
        self.eigenvectors.transpose() * self.mass_weighted()
    }

    /// Largest entrywise deviation of the Gram matrix from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        let g = self.gram();
        let mut worst: f64 = 0.0;
        for i in 0..g.nrows() {
            for j in 0..g.ncols() {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((g[(i, j)] - target).abs());
            }
        }
        worst
    }

    /// Per-mode relative residuals `|L psi - lambda A psi| / |A psi|`.
    pub fn residuals(&self, stiffness: &SparseMatrix) -> Vec<f64> {
        let lpsi = stiffness.mul_dense(&self.eigenvectors);
        let apsi = self.mass_weighted();
        (0..self.k())
            .map(|i| {
                let r = lpsi.column(i) - apsi.column(i) * self.eigenvalues[i];
                r.norm() / apsi.column(i).norm()
            })
            .collect()
    }
}

/// Spectral coefficients `Psi^T A F` (`k x d`).
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralCoefficients(pub DMatrix<f64>);

/// Flips `v` so its first entry with magnitude above `1e-8` is positive.
pub fn fix_sign(mut v: nalgebra::DVectorViewMut<'_, f64>) {
    if let Some(&first) = v.iter().find(|x| x.abs() > 1e-8) {
        if first < 0.0 {
            v.neg_mut();
        }
    }
}

/// Solves `L psi = lambda A psi` for the `k` smallest eigenvalues.
///
/// The lumped mass is diagonal, so the pencil is reduced to the symmetric
/// matrix `A^{-1/2} L A^{-1/2}` and handed to a dense self-adjoint solver;
/// modes come back A-orthonormal, ascending and sign-fixed. Every mode's
/// residual is checked against [`EIGEN_RESIDUAL_TOL`].
pub fn eigenbasis(mesh: &TriangleMesh, k: usize) -> Result<SpectralBasis> {
    let n = mesh.vertex_count();
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("basis size {k} outside 1..={n}")));
    }
    let stiffness = cotangent_laplacian(mesh)?;
    let mass = DVector::from_column_slice(mesh.vertex_areas());
    let inv_sqrt: Vec<f64> = mass.iter().map(|a| 1.0 / a.sqrt()).collect();

    let mut sym = faer::Mat::<f64>::zeros(n, n);
    for r in 0..n {
        for (c, v) in stiffness.row(r) {
            sym.write(r, c, v * inv_sqrt[r] * inv_sqrt[c]);
        }
    }
    let eig = sym.selfadjoint_eigendecomposition(faer::Side::Lower);
    let s = eig.s().column_vector();
    let u = eig.u();

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| s.read(a).total_cmp(&s.read(b)));
    let order = &order[..k];

    let mut eigenvalues = DVector::zeros(k);
    let mut eigenvectors = DMatrix::zeros(n, k);
    for (col, &src) in order.iter().enumerate() {
        eigenvalues[col] = s.read(src);
        for r in 0..n {
            eigenvectors[(r, col)] = u.read(r, src) * inv_sqrt[r];
        }
        fix_sign(eigenvectors.column_mut(col));
    }

    let basis = SpectralBasis {
        eigenvalues,
        eigenvectors,
        mass,
    };
    let worst = basis.residuals(&stiffness).into_iter().fold(0.0, f64::max);
    if !(worst <= EIGEN_RESIDUAL_TOL) {
        return Err(Error::Eigensolver {
            message: format!("residual above {EIGEN_RESIDUAL_TOL:e}"),
            residual: worst,
        });
    }
    Ok(basis)
}

/// `Psi^T A F`.
pub fn project(basis: &SpectralBasis, functions: &DMatrix<f64>) -> Result<SpectralCoefficients> {
    if functions.nrows() != basis.vertex_count() {
        return Err(Error::dims("projection rows", basis.vertex_count(), functions.nrows()));
    }
    Ok(SpectralCoefficients(basis.mass_weighted().transpose() * functions))
}

/// `Psi C`.
pub fn reconstruct(basis: &SpectralBasis, coeffs: &SpectralCoefficients) -> Result<DMatrix<f64>> {
    if coeffs.0.nrows() != basis.k() {
        return Err(Error::dims("reconstruction coefficients", basis.k(), coeffs.0.nrows()));
    }
    Ok(basis.eigenvectors() * &coeffs.0)
}

/// Geometric low-pass filter `Psi Psi^T A F`.
pub fn low_pass(basis: &SpectralBasis, functions: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    reconstruct(basis, &project(basis, functions)?)
}
