//! Functional maps between a partial shape `Y` and a full shape `X`: the
//! least-squares layer, its ideal/error split, and conversions to and from
//! soft correspondences.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::descriptors::{
    restrict_features, wave_kernel_signature_at, wks_energies, FeatureMatrix, Provenance, WksEnergies,
};
use crate::error::{Error, Result};
use crate::matching::SoftCorrespondence;
use crate::mesh::{extract_submesh, TriangleMesh, VertexSubset};
use crate::spectral::{eigenbasis, fix_sign, SpectralBasis};

/// Which shape of a pair a basis or map side refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Side {
    Full,
    Part,
}

/// Spectral map taking `source` coefficients to `target` coefficients:
/// `matrix` is `k_target x k_source`.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionalMap {
    pub matrix: DMatrix<f64>,
    pub source: Side,
    pub target: Side,
}

impl FunctionalMap {
    pub fn new(matrix: DMatrix<f64>, source: Side, target: Side) -> Self {
        Self { matrix, source, target }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.matrix.shape()
    }

    /// `|C|` as comma-separated rows.
    pub fn write_heatmap_csv(&self, out: &mut impl Write) -> Result<()> {
        write_matrix_csv(&self.matrix.map(f64::abs), out)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "source": self.source,
            "target": self.target,
            "rows": self.matrix.nrows(),
            "cols": self.matrix.ncols(),
            "matrix": rows_of(&self.matrix),
        })
    }
}

pub(crate) fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub(crate) fn write_matrix_csv(m: &DMatrix<f64>, out: &mut impl Write) -> Result<()> {
    for row in m.row_iter() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        writeln!(out, "{}", cells.join(","))?;
    }
    Ok(())
}

/// `C = C_ideal + C_error` for a part embedded in the full shape.
#[derive(Debug, Clone)]
pub struct FmDecomposition {
    pub total: FunctionalMap,
    pub ideal: FunctionalMap,
    pub error: FunctionalMap,
    pub missing_area_fraction: f64,
}

impl FmDecomposition {
    /// `|C_error| / |C|` in the Frobenius norm.
    pub fn relative_error(&self) -> f64 {
        let t = self.total.matrix.norm();
        if t == 0.0 {
            0.0
        } else {
            self.error.matrix.norm() / t
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "missing_area_fraction": self.missing_area_fraction,
            "relative_error": self.relative_error(),
            "total_norm": self.total.matrix.norm(),
            "ideal_norm": self.ideal.matrix.norm(),
            "error_norm": self.error.matrix.norm(),
            "total": self.total.to_json(),
            "ideal": self.ideal.to_json(),
            "error": self.error.to_json(),
        })
    }

    /// Writes `total.csv`, `ideal.csv`, `error.csv` (absolute values) and
    /// `decomposition.json` into `dir`.
    pub fn export(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, map) in [("total", &self.total), ("ideal", &self.ideal), ("error", &self.error)] {
            let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join(format!("{name}.csv")))?);
            map.write_heatmap_csv(&mut f)?;
            f.flush()?;
        }
        std::fs::write(
            dir.join("decomposition.json"),
            serde_json::to_string_pretty(&self.to_json())?,
        )?;
        Ok(())
    }
}

/// Relative eigenvalue floor below which the feature Gram matrix counts as
/// singular.
const SINGULAR_RATIO: f64 = 1e-12;

/// Factorization of `Q = F_y F_y^T + ridge I` used to apply `Q^{-1}`.
struct GramSolver {
    chol: nalgebra::linalg::Cholesky<f64, nalgebra::Dyn>,
    q: DMatrix<f64>,
}

impl GramSolver {
    fn new(q: DMatrix<f64>) -> Result<Self> {
        if q.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("feature Gram matrix".into()));
        }
        let eig = q.clone().symmetric_eigenvalues();
        let (lo, hi) = (eig.min(), eig.max());
        if !(hi > 0.0) || lo <= SINGULAR_RATIO * hi {
            return Err(Error::Singular {
                smallest_singular_value: lo.max(0.0),
            });
        }
        let chol = nalgebra::linalg::Cholesky::new(q.clone()).ok_or(Error::Singular {
            smallest_singular_value: lo,
        })?;
        Ok(Self { chol, q })
    }

    /// `B Q^{-1}` for `B` with `k_y` columns.
    fn right_solve(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let bt = b.transpose();
        let xt = self.chol.solve(&bt);
        let residual = (&self.q * &xt - &bt).norm();
        let scale = bt.norm().max(f64::MIN_POSITIVE);
        if !(residual <= 1e-6 * scale) {
            return Err(Error::Singular {
                smallest_singular_value: self.q.clone().symmetric_eigenvalues().min().max(0.0),
            });
        }
        Ok(xt.transpose())
    }
}

fn check_features(basis: &SpectralBasis, f: &FeatureMatrix, what: &str) -> Result<()> {
    if f.rows() != basis.vertex_count() {
        return Err(Error::dims(
            if what == "x" { "full-shape feature rows" } else { "part feature rows" },
            basis.vertex_count(),
            f.rows(),
        ));
    }
    Ok(())
}

/// `Psi^T A F` restricted to the given rows of the basis.
fn coeffs_on(basis: &SpectralBasis, f: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    let k = basis.k();
    let mut out = DMatrix::zeros(k, f.ncols());
    for (local, &v) in rows.iter().enumerate() {
        let a = basis.mass()[v];
        for p in 0..k {
            let w = a * basis.eigenvectors()[(v, p)];
            if w != 0.0 {
                for c in 0..f.ncols() {
                    out[(p, c)] += w * f[(local, c)];
                }
            }
        }
    }
    out
}

/// Least-squares map `C = argmin |C F_y - F_x|` on spectral coefficients,
/// `C = F_x F_y^T (F_y F_y^T + ridge I)^{-1}` with `F = Psi^T A F`. The result
/// maps part coefficients to full-shape coefficients (`k_x x k_y`).
pub fn fm_layer(
    basis_x: &SpectralBasis,
    basis_y: &SpectralBasis,
    fx: &FeatureMatrix,
    fy: &FeatureMatrix,
    ridge: f64,
) -> Result<FunctionalMap> {
    check_features(basis_x, fx, "x")?;
    check_features(basis_y, fy, "y")?;
    if fx.dim() != fy.dim() {
        return Err(Error::dims("feature dimension", fx.dim(), fy.dim()));
    }
    let hx = basis_x.mass_weighted().transpose() * fx.values();
    let hy = basis_y.mass_weighted().transpose() * fy.values();
    let solver = gram_solver(&hy, ridge)?;
    let c = solver.right_solve(&(hx * hy.transpose()))?;
    Ok(FunctionalMap::new(c, Side::Part, Side::Full))
}

fn gram_solver(hy: &DMatrix<f64>, ridge: f64) -> Result<GramSolver> {
    if !(ridge >= 0.0) {
        return Err(Error::InvalidArgument(format!("ridge must be non-negative, got {ridge}")));
    }
    let mut q = hy * hy.transpose();
    for i in 0..q.nrows() {
        q[(i, i)] += ridge;
    }
    GramSolver::new(q)
}

/// Resolvent-style mask `W_ij` penalizing entries far from the spectral
/// diagonal (`i` indexes full-shape modes, `j` part modes). Eigenvalues are
/// scaled by the larger of the two maxima.
pub fn resolvent_mask(evals_x: &DVector<f64>, evals_y: &DVector<f64>, gamma: f64) -> DMatrix<f64> {
    let scale = evals_x.max().max(evals_y.max()).max(f64::MIN_POSITIVE);
    let parts = |l: f64| {
        let g = (l.max(0.0) / scale).powf(gamma);
        (g / (g * g + 1.0), 1.0 / (g * g + 1.0))
    };
    DMatrix::from_fn(evals_x.len(), evals_y.len(), |i, j| {
        let (re_i, im_i) = parts(evals_x[i]);
        let (re_j, im_j) = parts(evals_y[j]);
        (re_i - re_j).powi(2) + (im_i - im_j).powi(2)
    })
}

/// Least squares with the resolvent mask penalty `mu * sum W_ij C_ij^2`,
/// solved one row at a time.
pub fn fm_layer_masked(
    basis_x: &SpectralBasis,
    basis_y: &SpectralBasis,
    fx: &FeatureMatrix,
    fy: &FeatureMatrix,
    mu: f64,
    gamma: f64,
) -> Result<FunctionalMap> {
    check_features(basis_x, fx, "x")?;
    check_features(basis_y, fy, "y")?;
    if fx.dim() != fy.dim() {
        return Err(Error::dims("feature dimension", fx.dim(), fy.dim()));
    }
    if !(mu >= 0.0) {
        return Err(Error::InvalidArgument(format!("mask weight must be non-negative, got {mu}")));
    }
    let hx = basis_x.mass_weighted().transpose() * fx.values();
    let hy = basis_y.mass_weighted().transpose() * fy.values();
    let q = &hy * hy.transpose();
    let b = hx * hy.transpose();
    let w = resolvent_mask(basis_x.eigenvalues(), basis_y.eigenvalues(), gamma);
    let mut c = DMatrix::zeros(basis_x.k(), basis_y.k());
    for i in 0..basis_x.k() {
        let mut qi = q.clone();
        for j in 0..basis_y.k() {
            qi[(j, j)] += mu * w[(i, j)];
        }
        let solver = GramSolver::new(qi)?;
        let row = solver.right_solve(&DMatrix::from_rows(&[b.row(i).into_owned()]))?;
        c.set_row(i, &row.row(0));
    }
    Ok(FunctionalMap::new(c, Side::Part, Side::Full))
}

/// Splits the layer output into the part explained by the vertices of the
/// full shape that survive in the part (`part`, in part-vertex order) and the
/// part contributed by the missing region. `fx` lives on the full shape and
/// `fy` on the part.
pub fn fm_decompose(
    part: &VertexSubset,
    basis_x: &SpectralBasis,
    basis_y: &SpectralBasis,
    fx: &FeatureMatrix,
    fy: &FeatureMatrix,
    ridge: f64,
) -> Result<FmDecomposition> {
    check_features(basis_x, fx, "x")?;
    check_features(basis_y, fy, "y")?;
    if part.parent_size() != basis_x.vertex_count() {
        return Err(Error::dims("part subset parent", basis_x.vertex_count(), part.parent_size()));
    }
    if part.len() != basis_y.vertex_count() {
        return Err(Error::dims("part subset size", basis_y.vertex_count(), part.len()));
    }
    if fx.dim() != fy.dim() {
        return Err(Error::dims("feature dimension", fx.dim(), fy.dim()));
    }
    let missing = part.complement();
    let hy = basis_y.mass_weighted().transpose() * fy.values();
    let solver = gram_solver(&hy, ridge)?;
    let hx_y = coeffs_on(basis_x, &fx.values().select_rows(part.indices()), part.indices());
    let hx_z = coeffs_on(basis_x, &fx.values().select_rows(missing.indices()), missing.indices());
    let hy_t = hy.transpose();
    let total = solver.right_solve(&((&hx_y + &hx_z) * &hy_t))?;
    let ideal = solver.right_solve(&(hx_y * &hy_t))?;
    let error = solver.right_solve(&(hx_z * &hy_t))?;
    let mass = basis_x.mass();
    let missing_area_fraction =
        missing.indices().iter().map(|&v| mass[v]).sum::<f64>() / mass.sum();
    Ok(FmDecomposition {
        total: FunctionalMap::new(total, Side::Part, Side::Full),
        ideal: FunctionalMap::new(ideal, Side::Part, Side::Full),
        error: FunctionalMap::new(error, Side::Part, Side::Full),
        missing_area_fraction,
    })
}

/// `C* = Psi_x^T A_x Pi* Psi_y` for the ground-truth map `targets[i]`
/// (part vertex `i` to full vertex `targets[i]`).
pub fn ideal_map_from_correspondence(
    basis_x: &SpectralBasis,
    basis_y: &SpectralBasis,
    targets: &[usize],
) -> Result<FunctionalMap> {
    if targets.len() != basis_y.vertex_count() {
        return Err(Error::dims("correspondence length", basis_y.vertex_count(), targets.len()));
    }
    let nx = basis_x.vertex_count();
    let mut c = DMatrix::zeros(basis_x.k(), basis_y.k());
    for (i, &j) in targets.iter().enumerate() {
        if j >= nx {
            return Err(Error::InvalidArgument(format!(
                "correspondence entry {i} targets vertex {j} of {nx}"
            )));
        }
        let a = basis_x.mass()[j];
        for p in 0..basis_x.k() {
            let w = a * basis_x.eigenvectors()[(j, p)];
            for q in 0..basis_y.k() {
                c[(p, q)] += w * basis_y.eigenvectors()[(i, q)];
            }
        }
    }
    Ok(FunctionalMap::new(c, Side::Part, Side::Full))
}

/// `C = Psi_y^T A_y P Psi_x` (`k_y x k_x`, full to part).
pub fn map_from_soft_correspondence(
    p: &SoftCorrespondence,
    basis_x: &SpectralBasis,
    basis_y: &SpectralBasis,
) -> Result<FunctionalMap> {
    let (ny, nx) = p.shape();
    if ny != basis_y.vertex_count() {
        return Err(Error::dims("correspondence rows", basis_y.vertex_count(), ny));
    }
    if nx != basis_x.vertex_count() {
        return Err(Error::dims("correspondence columns", basis_x.vertex_count(), nx));
    }
    let c = basis_y.mass_weighted().transpose() * (p.matrix() * basis_x.eigenvectors());
    Ok(FunctionalMap::new(c, Side::Full, Side::Part))
}

/// `P = Psi_y C Psi_x^T A_x` for a full-to-part map `C`; a part-to-full map is
/// transposed first. Converting back with [`map_from_soft_correspondence`]
/// returns the full-to-part matrix exactly. The result is generally not
/// row-stochastic.
pub fn correspondence_from_map(
    map: &FunctionalMap,
    basis_x: &SpectralBasis,
    basis_y: &SpectralBasis,
) -> Result<SoftCorrespondence> {
    let c = match (map.source, map.target) {
        (Side::Full, Side::Part) => map.matrix.clone(),
        (Side::Part, Side::Full) => map.matrix.transpose(),
        _ => {
            return Err(Error::InvalidArgument(
                "map must go between the part and the full shape".into(),
            ))
        }
    };
    if c.shape() != (basis_y.k(), basis_x.k()) {
        return Err(Error::dims("functional map rows", basis_y.k(), c.nrows()));
    }
    let p = basis_y.eigenvectors() * c * basis_x.mass_weighted().transpose();
    Ok(SoftCorrespondence::from_matrix(p, None, false))
}

/// How a sweep obtains features on the full shape and on each part.
#[derive(Debug, Clone)]
pub enum SweepFeatures {
    /// Fixed full-shape features restricted to each part's surviving vertices.
    Restricted(FeatureMatrix),
    /// Wave kernel signature computed on every shape over the full shape's
    /// energy grid.
    Wks { bins: usize },
}

/// Dense i.i.d. uniform features in `[-1, 1)`.
pub fn random_features(n: usize, d: usize, seed: u64) -> FeatureMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = DMatrix::from_fn(n, d, |_, _| rng.gen::<f64>() * 2.0 - 1.0);
    FeatureMatrix::new(values, Provenance::Random).expect("finite")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub missing_area_fraction: f64,
    pub relative_error: f64,
    pub ideal_norm: f64,
    pub error_norm: f64,
    pub part_vertices: usize,
}

/// Relative error norm `|C_error| / |C|` for each partial shape given as a
/// kept-vertex subset of `mesh_x`, sorted by missing area. Each part gets its
/// own basis with `min(k, n_y - 1)` modes.
pub fn error_vs_area_sweep(
    mesh_x: &TriangleMesh,
    basis_x: &SpectralBasis,
    parts: &[VertexSubset],
    features: &SweepFeatures,
    ridge: f64,
) -> Result<Vec<SweepPoint>> {
    let (fx, energies): (FeatureMatrix, Option<WksEnergies>) = match features {
        SweepFeatures::Restricted(f) => (f.clone(), None),
        SweepFeatures::Wks { bins } => {
            let e = wks_energies(basis_x, *bins)?;
            (wave_kernel_signature_at(basis_x, &e)?, Some(e))
        }
    };
    let mut out = Vec::with_capacity(parts.len());
    for keep in parts {
        let (mesh_y, surviving) = extract_submesh(mesh_x, keep)?;
        let ky = basis_x.k().min(mesh_y.vertex_count() - 1).max(1);
        let basis_y = eigenbasis(&mesh_y, ky)?;
        let fy = match features {
            SweepFeatures::Restricted(_) => restrict_features(&fx, &surviving)?,
            SweepFeatures::Wks { .. } => {
                wave_kernel_signature_at(&basis_y, energies.as_ref().expect("energies set"))?
            }
        };
        let dec = fm_decompose(&surviving, basis_x, &basis_y, &fx, &fy, ridge)?;
        log::debug!(
            "sweep part with {} vertices: missing {:.4}, relative error {:.4}",
            surviving.len(),
            dec.missing_area_fraction,
            dec.relative_error()
        );
        out.push(SweepPoint {
            missing_area_fraction: dec.missing_area_fraction,
            relative_error: dec.relative_error(),
            ideal_norm: dec.ideal.matrix.norm(),
            error_norm: dec.error.matrix.norm(),
            part_vertices: surviving.len(),
        });
    }
    out.sort_by(|a, b| a.missing_area_fraction.total_cmp(&b.missing_area_fraction));
    Ok(out)
}

/// Spearman rank correlation of two equally long samples (average ranks on
/// ties).
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        let mut s = 0;
        while s < idx.len() {
            let mut e = s;
            while e + 1 < idx.len() && v[idx[e + 1]] == v[idx[s]] {
                e += 1;
            }
            let avg = (s + e) as f64 / 2.0;
            for &i in &idx[s..=e] {
                r[i] = avg;
            }
            s = e + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// Outcome of embedding a part as one connected component of a
/// disconnected full shape `X = Y + Z`.
#[derive(Debug, Clone)]
pub struct DisconnectedReport {
    /// Decomposition computed with the reordered full-shape basis.
    pub decomposition: FmDecomposition,
    /// Full-shape basis with `Y`-supported modes first, then `Z`-supported,
    /// then any mode that could not be attributed.
    pub basis_x: SpectralBasis,
    pub basis_y: SpectralBasis,
    pub y_modes: usize,
    pub z_modes: usize,
    /// Eigenvalues of modes whose support is split between components.
    pub ambiguous: Vec<f64>,
    /// `C* = Psi_x^T A_x Pi* Psi_y` for the identity embedding of `Y`.
    pub ideal_star: FunctionalMap,
    /// Energy of the ideal part outside the leading `y_modes` diagonal block,
    /// over its total energy.
    pub off_block_energy: f64,
    /// Largest entrywise gap between the ideal part and `J`.
    pub ideal_deviation: f64,
    /// Energy of the error part on `Y`-supported rows.
    pub error_on_y_rows: f64,
}

impl DisconnectedReport {
    /// `J`: identity on the leading `y_modes` diagonal, zero elsewhere.
    pub fn j_structure(&self) -> DMatrix<f64> {
        let (kx, ky) = self.ideal_star.shape();
        DMatrix::from_fn(kx, ky, |i, j| if i == j && i < self.y_modes { 1.0 } else { 0.0 })
    }
}

/// Share of a mode's mass-weighted energy carried by the first `ny` vertices.
fn y_share(basis: &SpectralBasis, col: usize, ny: usize) -> f64 {
    let v = basis.eigenvectors().column(col);
    let m = basis.mass();
    let on: f64 = (0..ny).map(|i| m[i] * v[i] * v[i]).sum();
    let all: f64 = (0..v.len()).map(|i| m[i] * v[i] * v[i]).sum();
    on / all
}

/// Builds `X = Y + Z` (vertices of `Y` first), computes `k`-mode bases on `X`
/// and `Y`, separates each degenerate eigenvalue cluster of `X` by support,
/// and reports the functional-map decomposition for features `[fy; fz]` on
/// `X` and `fy` on `Y`.
pub fn disconnected_analysis(
    mesh_y: &TriangleMesh,
    mesh_z: &TriangleMesh,
    k: usize,
    fy: &FeatureMatrix,
    fz: &FeatureMatrix,
    ridge: f64,
) -> Result<DisconnectedReport> {
    let ny = mesh_y.vertex_count();
    let mesh_x = mesh_y.disjoint_union(mesh_z)?;
    let nx = mesh_x.vertex_count();
    if fy.rows() != ny {
        return Err(Error::dims("part feature rows", ny, fy.rows()));
    }
    if fz.rows() != mesh_z.vertex_count() {
        return Err(Error::dims("remainder feature rows", mesh_z.vertex_count(), fz.rows()));
    }
    if fy.dim() != fz.dim() {
        return Err(Error::dims("feature dimension", fy.dim(), fz.dim()));
    }
    let raw = eigenbasis(&mesh_x, k.min(nx))?;
    let basis_y = eigenbasis(mesh_y, k.min(ny))?;
    let separated = separate_supports(&raw, ny)?;

    let mut y_idx = Vec::new();
    let mut z_idx = Vec::new();
    let mut amb_idx = Vec::new();
    for c in 0..separated.k() {
        let s = y_share(&separated, c, ny);
        if s > 0.99 {
            y_idx.push(c);
        } else if s < 0.01 {
            z_idx.push(c);
        } else {
            amb_idx.push(c);
        }
    }
    if !amb_idx.is_empty() {
        log::warn!("{} modes have support on both components", amb_idx.len());
    }
    let order: Vec<usize> = y_idx.iter().chain(&z_idx).chain(&amb_idx).copied().collect();
    let basis_x = SpectralBasis::from_parts(
        DVector::from_iterator(order.len(), order.iter().map(|&c| separated.eigenvalues()[c])),
        separated.eigenvectors().select_columns(&order),
        separated.mass().clone(),
    )?;

    let fx_vals = DMatrix::from_fn(nx, fy.dim(), |r, c| {
        if r < ny {
            fy.values()[(r, c)]
        } else {
            fz.values()[(r - ny, c)]
        }
    });
    let fx = FeatureMatrix::new(fx_vals, fy.provenance())?;
    let part = VertexSubset::new(nx, (0..ny).collect())?;
    let decomposition = fm_decompose(&part, &basis_x, &basis_y, &fx, fy, ridge)?;
    let identity: Vec<usize> = (0..ny).collect();
    let ideal_star = ideal_map_from_correspondence(&basis_x, &basis_y, &identity)?;

    let m = y_idx.len();
    let ideal = &decomposition.ideal.matrix;
    let mut off = 0.0;
    let mut dev: f64 = 0.0;
    for i in 0..ideal.nrows() {
        for j in 0..ideal.ncols() {
            let x = ideal[(i, j)];
            if i >= m || j >= m {
                off += x * x;
            }
            let target = if i == j && i < m { 1.0 } else { 0.0 };
            dev = dev.max((x - target).abs());
        }
    }
    let total_energy = ideal.norm_squared();
    let error_on_y_rows = decomposition.error.matrix.rows(0, m).norm_squared();
    Ok(DisconnectedReport {
        off_block_energy: if total_energy > 0.0 { off / total_energy } else { 0.0 },
        ideal_deviation: dev,
        error_on_y_rows,
        y_modes: m,
        z_modes: z_idx.len(),
        ambiguous: amb_idx.iter().map(|&c| separated.eigenvalues()[c]).collect(),
        decomposition,
        basis_x,
        basis_y,
        ideal_star,
    })
}

/// Within every cluster of (numerically) equal eigenvalues, rotates the modes
/// onto the eigenvectors of their Gram matrix restricted to the first `ny`
/// vertices, so each resulting mode lives on one side where possible.
fn separate_supports(basis: &SpectralBasis, ny: usize) -> Result<SpectralBasis> {
    let k = basis.k();
    let ev = basis.eigenvalues();
    let mut vecs = basis.eigenvectors().clone();
    let mass = basis.mass();
    let mut start = 0;
    while start < k {
        let mut end = start + 1;
        while end < k && (ev[end] - ev[end - 1]).abs() <= 1e-6 * ev[end].abs().max(1.0) {
            end += 1;
        }
        if end - start > 1 {
            let v = vecs.columns(start, end - start).into_owned();
            let mut av = v.rows(0, ny).into_owned();
            for r in 0..ny {
                av.row_mut(r).scale_mut(mass[r]);
            }
            let g = v.rows(0, ny).transpose() * av;
            let eig = g.symmetric_eigen();
            // Descending share on Y.
            let mut idx: Vec<usize> = (0..eig.eigenvalues.len()).collect();
            idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
            let rot = eig.eigenvectors.select_columns(&idx);
            let rotated = v * rot;
            for c in 0..(end - start) {
                vecs.set_column(start + c, &rotated.column(c));
                fix_sign(vecs.column_mut(start + c));
            }
        }
        start = end;
    }
    SpectralBasis::from_parts(ev.clone(), vecs, mass.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::shapes;
    use approx::assert_relative_eq;

    fn pinv_oracle(hx: &DMatrix<f64>, hy: &DMatrix<f64>) -> DMatrix<f64> {
        // Moore-Penrose inverse via SVD, independent of the Gram solve.
        hx * hy.clone().pseudo_inverse(1e-14).unwrap()
    }

    #[test]
    fn layer_matches_pseudo_inverse() {
        let mx = shapes::humanoid(4, 3);
        let (my, _) = extract_submesh(&mx, &VertexSubset::from_mask(
            &mx.vertices().iter().map(|p| p.y > -0.3).collect::<Vec<_>>(),
        ))
        .unwrap();
        let bx = eigenbasis(&mx, 20).unwrap();
        let by = eigenbasis(&my, 15).unwrap();
        let fx = random_features(mx.vertex_count(), 40, 1);
        let fy = random_features(my.vertex_count(), 40, 2);
        let c = fm_layer(&bx, &by, &fx, &fy, 0.0).unwrap();
        assert_eq!(c.shape(), (20, 15));
        let hx = bx.mass_weighted().transpose() * fx.values();
        let hy = by.mass_weighted().transpose() * fy.values();
        let oracle = pinv_oracle(&hx, &hy);
        assert!((&c.matrix - &oracle).norm() <= 1e-8 * oracle.norm());
    }

    #[test]
    fn rank_deficient_features_are_singular() {
        let m = shapes::icosphere(1);
        let b = eigenbasis(&m, 12).unwrap();
        let f = random_features(m.vertex_count(), 5, 1);
        assert!(matches!(fm_layer(&b, &b, &f, &f, 0.0), Err(Error::Singular { .. })));
        assert!(fm_layer(&b, &b, &f, &f, 1e-3).is_ok());
    }

    #[test]
    fn self_map_is_identity() {
        let m = shapes::humanoid(4, 0);
        let b = eigenbasis(&m, 12).unwrap();
        let f = random_features(m.vertex_count(), 30, 4);
        let c = fm_layer(&b, &b, &f, &f, 0.0).unwrap();
        assert!((c.matrix - DMatrix::identity(12, 12)).amax() < 1e-8);
        let star = ideal_map_from_correspondence(&b, &b, &(0..m.vertex_count()).collect::<Vec<_>>()).unwrap();
        assert!((star.matrix - DMatrix::identity(12, 12)).amax() < 1e-10);
    }

    #[test]
    fn decomposition_sums_to_total() {
        let mx = shapes::humanoid(5, 2);
        let keep = VertexSubset::from_mask(&mx.vertices().iter().map(|p| p.x < 0.4).collect::<Vec<_>>());
        let (my, part) = extract_submesh(&mx, &keep).unwrap();
        let bx = eigenbasis(&mx, 25).unwrap();
        let by = eigenbasis(&my, 20).unwrap();
        let fx = random_features(mx.vertex_count(), 50, 7);
        let fy = restrict_features(&fx, &part).unwrap();
        let d = fm_decompose(&part, &bx, &by, &fx, &fy, 0.0).unwrap();
        let sum = &d.ideal.matrix + &d.error.matrix;
        assert!((&sum - &d.total.matrix).norm() <= 1e-8 * d.total.matrix.norm());
        let direct = fm_layer(&bx, &by, &fx, &fy, 0.0).unwrap();
        assert!((&direct.matrix - &d.total.matrix).norm() <= 1e-8 * direct.matrix.norm());
        assert!(d.missing_area_fraction > 0.0 && d.missing_area_fraction < 1.0);
        assert_relative_eq!(
            d.missing_area_fraction,
            crate::mesh::area_fraction(&mx, &part.complement()),
            epsilon = 1e-12
        );
    }

    #[test]
    fn full_part_has_no_error() {
        let m = shapes::humanoid(4, 5);
        let b = eigenbasis(&m, 10).unwrap();
        let f = random_features(m.vertex_count(), 20, 3);
        let d = fm_decompose(&VertexSubset::all(m.vertex_count()), &b, &b, &f, &f, 0.0).unwrap();
        assert_eq!(d.error.matrix.norm(), 0.0);
        assert_eq!(d.missing_area_fraction, 0.0);
    }

    #[test]
    fn soft_round_trip() {
        let mx = shapes::humanoid(4, 1);
        let my = shapes::humanoid(3, 2);
        let bx = eigenbasis(&mx, 14).unwrap();
        let by = eigenbasis(&my, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let c = DMatrix::from_fn(9, 14, |_, _| rng.gen::<f64>() - 0.5);
        let map = FunctionalMap::new(c.clone(), Side::Full, Side::Part);
        let p = correspondence_from_map(&map, &bx, &by).unwrap();
        let back = map_from_soft_correspondence(&p, &bx, &by).unwrap();
        assert!((back.matrix - c).amax() < 1e-10);
    }

    #[test]
    fn mask_zero_on_diagonal_of_equal_spectra() {
        let ev = DVector::from_vec(vec![0.0, 1.0, 4.0, 9.0]);
        let w = resolvent_mask(&ev, &ev, 0.5);
        for i in 0..4 {
            assert_eq!(w[(i, i)], 0.0);
            assert!(w[(i, (i + 1) % 4)] > 0.0);
        }
    }

    #[test]
    fn masked_with_zero_weight_matches_plain() {
        let m = shapes::humanoid(4, 6);
        let b = eigenbasis(&m, 10).unwrap();
        let f = random_features(m.vertex_count(), 25, 3);
        let g = random_features(m.vertex_count(), 25, 8);
        let plain = fm_layer(&b, &b, &f, &g, 0.0).unwrap();
        let masked = fm_layer_masked(&b, &b, &f, &g, 0.0, 0.5).unwrap();
        assert!((plain.matrix - masked.matrix).amax() < 1e-8);
    }

    #[test]
    fn spearman_basics() {
        assert_relative_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), 1.0);
        assert_relative_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), -1.0);
    }

    #[test]
    fn disconnected_components_separate() {
        let y = shapes::humanoid(4, 11);
        let z = shapes::icosphere(1)
            .transformed(&nalgebra::Rotation3::identity(), 0.7, nalgebra::Vector3::new(10.0, 0.0, 0.0))
            .unwrap();
        let fy = random_features(y.vertex_count(), 60, 1);
        let fz = random_features(z.vertex_count(), 60, 2);
        let r = disconnected_analysis(&y, &z, 20, &fy, &fz, 0.0).unwrap();
        assert!(r.ambiguous.is_empty());
        assert_eq!(r.y_modes + r.z_modes, 20);
        assert!(r.z_modes >= 1);
        assert!(r.ideal_deviation < 1e-5, "{}", r.ideal_deviation);
        assert!(r.off_block_energy < 1e-4);
        assert!(r.error_on_y_rows < 1e-16);
        let j = r.j_structure();
        assert!((&r.ideal_star.matrix - &j).amax() < 1e-6);
    }
}
