//! Unsupervised objective on a soft correspondence: Gromov distortion plus a
//! spectral regularizer, with analytic gradients back to the features.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geodesics::GeodesicMatrix;
use crate::matching::{normalize_rows, row_softmax};
use crate::spectral::SpectralBasis;

/// Which spectral regularizer accompanies the Gromov term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    Orth,
    Lpf,
}

impl std::str::FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "orth" => Ok(Self::Orth),
            "lpf" => Ok(Self::Lpf),
            other => Err(Error::InvalidArgument(format!("unknown loss mode {other:?} (orth|lpf)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossTerm {
    Gromov,
    Orth,
    Lpf,
    Total,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub gromov: f64,
    pub orth: f64,
    pub lpf: f64,
    pub total: f64,
    pub mode: LossMode,
}

/// Number of leading part modes that the regularizers ask to be preserved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruncationSelector {
    pub r: usize,
}

/// `r = #{ j : lambda_j^Y <= max lambda^X }`, at least one.
pub fn select_r(basis_x: &SpectralBasis, basis_y: &SpectralBasis) -> TruncationSelector {
    let cap = basis_x.max_eigenvalue();
    let r = basis_y.eigenvalues().iter().filter(|&&l| l <= cap).count();
    TruncationSelector { r: r.max(1) }
}

/// `sum_ij a_i a_j (P D_x P^T - D_y)_ij^2`.
pub fn gromov_loss(p: &DMatrix<f64>, dx: &DMatrix<f64>, dy: &DMatrix<f64>, mass_y: &DVector<f64>) -> Result<f64> {
    check_gromov(p, dx, dy, mass_y)?;
    Ok(gromov(p, dx, dy, mass_y, false).0)
}

fn check_gromov(p: &DMatrix<f64>, dx: &DMatrix<f64>, dy: &DMatrix<f64>, a: &DVector<f64>) -> Result<()> {
    if dx.shape() != (p.ncols(), p.ncols()) {
        return Err(Error::dims("full-shape distances", p.ncols(), dx.nrows()));
    }
    if dy.shape() != (p.nrows(), p.nrows()) {
        return Err(Error::dims("part distances", p.nrows(), dy.nrows()));
    }
    if a.len() != p.nrows() {
        return Err(Error::dims("part areas", p.nrows(), a.len()));
    }
    Ok(())
}

fn gromov(
    p: &DMatrix<f64>,
    dx: &DMatrix<f64>,
    dy: &DMatrix<f64>,
    a: &DVector<f64>,
    grad: bool,
) -> (f64, Option<DMatrix<f64>>) {
    let pd = p * dx;
    let mut m = &pd * p.transpose() - dy;
    let mut value = 0.0;
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            let w = a[i] * a[j];
            let x = m[(i, j)];
            value += w * x * x;
            // G_M = 2 (a a^T) o M, reusing the buffer.
            m[(i, j)] = 2.0 * w * x;
        }
    }
    if !grad {
        return (value, None);
    }
    // D_x and G_M are symmetric: dL/dP = G_M P D_x^T + G_M^T P D_x = 2 G_M P D_x.
    let g = (m * pd) * 2.0;
    (value, Some(g))
}

/// `|C C^T - J_r|_F^2` with `J_r` the identity on the first `r` diagonal
/// entries.
pub fn orth_loss(c: &DMatrix<f64>, r: usize) -> f64 {
    orth(c, r, false).0
}

fn orth(c: &DMatrix<f64>, r: usize, grad: bool) -> (f64, Option<DMatrix<f64>>) {
    let mut e = c * c.transpose();
    for i in 0..r.min(e.nrows()) {
        e[(i, i)] -= 1.0;
    }
    let value = e.norm_squared();
    (value, grad.then(|| (e * c) * 4.0))
}

/// `trace(A B A B)` with `B = (P Psi_x)(P Psi_x)^T - (Psi_y J_r)(Psi_y J_r)^T`,
/// evaluated in low rank.
pub fn lpf_loss(p: &DMatrix<f64>, basis_x: &SpectralBasis, basis_y: &SpectralBasis, r: usize) -> Result<f64> {
    check_p(p, basis_x, basis_y)?;
    Ok(lpf(p, basis_x, basis_y, r, false).0)
}

fn check_p(p: &DMatrix<f64>, basis_x: &SpectralBasis, basis_y: &SpectralBasis) -> Result<()> {
    if p.nrows() != basis_y.vertex_count() {
        return Err(Error::dims("correspondence rows", basis_y.vertex_count(), p.nrows()));
    }
    if p.ncols() != basis_x.vertex_count() {
        return Err(Error::dims("correspondence columns", basis_x.vertex_count(), p.ncols()));
    }
    Ok(())
}

fn lpf(
    p: &DMatrix<f64>,
    basis_x: &SpectralBasis,
    basis_y: &SpectralBasis,
    r: usize,
    grad: bool,
) -> (f64, Option<DMatrix<f64>>) {
    let sqrt_a: Vec<f64> = basis_y.mass().iter().map(|a| a.sqrt()).collect();
    let mut gh = p * basis_x.eigenvectors();
    for (i, s) in sqrt_a.iter().enumerate() {
        gh.row_mut(i).scale_mut(*s);
    }
    let r = r.min(basis_y.k());
    let mut th = basis_y.eigenvectors().columns(0, r).into_owned();
    for (i, s) in sqrt_a.iter().enumerate() {
        th.row_mut(i).scale_mut(*s);
    }
    let gg = gh.transpose() * &gh;
    let gt = gh.transpose() * &th;
    let tt = th.transpose() * &th;
    let value = gg.norm_squared() - 2.0 * gt.norm_squared() + tt.norm_squared();
    if !grad {
        return (value, None);
    }
    // dL/dG^ = 4 (G^ (G^T G^) - T^ (T^T G^)); back through A^{1/2} and Psi_x^T.
    let mut dg = (&gh * gg - th * gt.transpose()) * 4.0;
    for (i, s) in sqrt_a.iter().enumerate() {
        dg.row_mut(i).scale_mut(*s);
    }
    (value, Some(dg * basis_x.eigenvectors().transpose()))
}

/// Objective weights and temperature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSettings {
    pub tau: f64,
    pub lambda_orth: f64,
    pub lambda_lpf: f64,
    pub mode: LossMode,
}

impl Default for LossSettings {
    fn default() -> Self {
        Self {
            tau: 0.01,
            lambda_orth: 1e-3,
            lambda_lpf: 0.02,
            mode: LossMode::Orth,
        }
    }
}

/// Vertex counts above which the Gromov term is estimated on random
/// row/column subsets. The other terms always use the full matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Subsampling {
    pub threshold: usize,
    pub size: usize,
}

impl Default for Subsampling {
    fn default() -> Self {
        Self {
            threshold: 1500,
            size: 1000,
        }
    }
}

/// Everything the objective needs besides the two feature matrices.
#[derive(Debug, Clone)]
pub struct LossContext<'a> {
    pub basis_x: &'a SpectralBasis,
    pub basis_y: &'a SpectralBasis,
    geo_x: &'a GeodesicMatrix,
    geo_y: &'a GeodesicMatrix,
    pub settings: LossSettings,
    pub r: usize,
    subsampling: Subsampling,
    rows: Option<Vec<usize>>,
    cols: Option<Vec<usize>>,
    dx: DMatrix<f64>,
    dy: DMatrix<f64>,
    mass_y: DVector<f64>,
}

impl<'a> LossContext<'a> {
    pub fn new(
        basis_x: &'a SpectralBasis,
        basis_y: &'a SpectralBasis,
        geo_x: &'a GeodesicMatrix,
        geo_y: &'a GeodesicMatrix,
        settings: LossSettings,
        subsampling: Subsampling,
        seed: u64,
    ) -> Result<Self> {
        if geo_x.size() != basis_x.vertex_count() {
            return Err(Error::dims("full-shape geodesics", basis_x.vertex_count(), geo_x.size()));
        }
        if geo_y.size() != basis_y.vertex_count() {
            return Err(Error::dims("part geodesics", basis_y.vertex_count(), geo_y.size()));
        }
        if geo_x.is_disconnected() || geo_y.is_disconnected() {
            return Err(Error::InfiniteDistance);
        }
        if !(settings.tau > 0.0) {
            return Err(Error::InvalidArgument(format!("temperature must be positive, got {}", settings.tau)));
        }
        let r = select_r(basis_x, basis_y).r;
        let mut ctx = Self {
            basis_x,
            basis_y,
            geo_x,
            geo_y,
            settings,
            r,
            subsampling,
            rows: None,
            cols: None,
            dx: DMatrix::zeros(0, 0),
            dy: DMatrix::zeros(0, 0),
            mass_y: DVector::zeros(0),
        };
        ctx.resample(seed);
        Ok(ctx)
    }

    pub fn is_subsampled(&self) -> bool {
        self.rows.is_some() || self.cols.is_some()
    }

    /// Draws fresh Gromov subsets (no-op below the threshold).
    pub fn resample(&mut self, seed: u64) {
        let (ny, nx) = (self.basis_y.vertex_count(), self.basis_x.vertex_count());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize| -> Option<Vec<usize>> {
            if n <= self.subsampling.threshold {
                return None;
            }
            let mut v = sample(&mut rng, n, self.subsampling.size.min(n)).into_vec();
            v.sort_unstable();
            Some(v)
        };
        let rows = draw(ny);
        let cols = draw(nx);
        let all_y: Vec<usize> = (0..ny).collect();
        let all_x: Vec<usize> = (0..nx).collect();
        let ry = rows.as_deref().unwrap_or(&all_y);
        let cx = cols.as_deref().unwrap_or(&all_x);
        if rows.is_some() || cols.is_some() || self.dx.nrows() == 0 {
            self.dy = self.geo_y.select(ry);
            self.dx = self.geo_x.select(cx);
            self.mass_y = DVector::from_iterator(ry.len(), ry.iter().map(|&i| self.basis_y.mass()[i]));
        }
        self.rows = rows;
        self.cols = cols;
    }

    pub fn total_weight(&self) -> f64 {
        match self.settings.mode {
            LossMode::Orth => self.settings.lambda_orth,
            LossMode::Lpf => self.settings.lambda_lpf,
        }
    }

    fn sub_p(&self, p: &DMatrix<f64>) -> DMatrix<f64> {
        match (&self.rows, &self.cols) {
            (None, None) => p.clone(),
            (r, c) => {
                let rows: Vec<usize> = r.clone().unwrap_or_else(|| (0..p.nrows()).collect());
                let cols: Vec<usize> = c.clone().unwrap_or_else(|| (0..p.ncols()).collect());
                DMatrix::from_fn(rows.len(), cols.len(), |i, j| p[(rows[i], cols[j])])
            }
        }
    }

    fn scatter(&self, g_sub: DMatrix<f64>, out: &mut DMatrix<f64>) {
        match (&self.rows, &self.cols) {
            (None, None) => *out += g_sub,
            (r, c) => {
                for i in 0..g_sub.nrows() {
                    let ri = r.as_ref().map_or(i, |v| v[i]);
                    for j in 0..g_sub.ncols() {
                        let cj = c.as_ref().map_or(j, |v| v[j]);
                        out[(ri, cj)] += g_sub[(i, j)];
                    }
                }
            }
        }
    }

    /// Loss terms at `P` and, for `term`, `dL/dP`.
    pub fn evaluate_p(&self, p: &DMatrix<f64>, term: Option<LossTerm>) -> Result<(LossBreakdown, Option<DMatrix<f64>>)> {
        check_p(p, self.basis_x, self.basis_y)?;
        let wants = |t: LossTerm| match term {
            Some(LossTerm::Total) => match t {
                LossTerm::Gromov => true,
                LossTerm::Orth => self.settings.mode == LossMode::Orth,
                LossTerm::Lpf => self.settings.mode == LossMode::Lpf,
                LossTerm::Total => false,
            },
            Some(x) => x == t,
            None => false,
        };
        let scale = |t: LossTerm| if term == Some(LossTerm::Total) && t != LossTerm::Gromov { self.total_weight() } else { 1.0 };
        let mut grad = term.map(|_| DMatrix::zeros(p.nrows(), p.ncols()));

        let ps = self.sub_p(p);
        let (g_val, g_grad) = gromov(&ps, &self.dx, &self.dy, &self.mass_y, wants(LossTerm::Gromov));
        if let (Some(g), Some(out)) = (g_grad, grad.as_mut()) {
            self.scatter(g, out);
        }

        // C = Psi_y^T A_y P Psi_x.
        let ay_psi_y = self.basis_y.mass_weighted();
        let p_psi = p * self.basis_x.eigenvectors();
        let c = ay_psi_y.transpose() * &p_psi;
        let (o_val, o_grad) = orth(&c, self.r, wants(LossTerm::Orth));
        if let (Some(gc), Some(out)) = (o_grad, grad.as_mut()) {
            *out += (&ay_psi_y * gc * self.basis_x.eigenvectors().transpose()) * scale(LossTerm::Orth);
        }

        let (l_val, l_grad) = lpf(p, self.basis_x, self.basis_y, self.r, wants(LossTerm::Lpf));
        if let (Some(gl), Some(out)) = (l_grad, grad.as_mut()) {
            *out += gl * scale(LossTerm::Lpf);
        }

        let reg = match self.settings.mode {
            LossMode::Orth => o_val,
            LossMode::Lpf => l_val,
        };
        let b = LossBreakdown {
            gromov: g_val,
            orth: o_val,
            lpf: l_val,
            total: g_val + self.total_weight() * reg,
            mode: self.settings.mode,
        };
        if ![b.gromov, b.orth, b.lpf, b.total].iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("loss value".into()));
        }
        Ok((b, grad))
    }

    /// Loss breakdown plus gradients of `term` with respect to both feature
    /// matrices.
    pub fn term_value_and_gradient(
        &self,
        term: LossTerm,
        fy: &DMatrix<f64>,
        fx: &DMatrix<f64>,
    ) -> Result<(LossBreakdown, DMatrix<f64>, DMatrix<f64>)> {
        if fy.ncols() != fx.ncols() {
            return Err(Error::dims("feature dimension", fy.ncols(), fx.ncols()));
        }
        if fy.iter().chain(fx.iter()).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("features".into()));
        }
        let (u, ny) = normalize_rows(fy)?;
        let (v, nx) = normalize_rows(fx)?;
        let s = &u * v.transpose();
        let p = row_softmax(&s, self.settings.tau)?;
        let (b, gp) = self.evaluate_p(&p, Some(term))?;
        let gp = gp.expect("gradient requested");

        // Softmax: G_S = P o (G_P - rowsum(P o G_P)) / tau.
        let mut gs = p.component_mul(&gp);
        for i in 0..gs.nrows() {
            let dot: f64 = gs.row(i).sum();
            for j in 0..gs.ncols() {
                gs[(i, j)] = (gs[(i, j)] - p[(i, j)] * dot) / self.settings.tau;
            }
        }
        let gu = &gs * &v;
        let gv = gs.transpose() * &u;
        Ok((b, cosine_backward(&gu, &u, &ny), cosine_backward(&gv, &v, &nx)))
    }
}

/// Gradient through row normalization `u = f / |f|`.
fn cosine_backward(g: &DMatrix<f64>, u: &DMatrix<f64>, norms: &DVector<f64>) -> DMatrix<f64> {
    let mut out = g.clone();
    for i in 0..out.nrows() {
        let dot = g.row(i).dot(&u.row(i));
        for c in 0..out.ncols() {
            out[(i, c)] = (g[(i, c)] - dot * u[(i, c)]) / norms[i];
        }
    }
    out
}

/// Total loss and its gradients with respect to `F_y` and `F_x`.
pub fn loss_and_gradient(
    fy: &DMatrix<f64>,
    fx: &DMatrix<f64>,
    ctx: &LossContext<'_>,
) -> Result<(LossBreakdown, DMatrix<f64>, DMatrix<f64>)> {
    ctx.term_value_and_gradient(LossTerm::Total, fy, fx)
}

/// Per-iteration loss record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub learning_rate: f64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

pub fn write_loss_csv(records: &[LossRecord], out: &mut impl Write) -> Result<()> {
    writeln!(out, "iteration,learning_rate,gromov,orth,lpf,total")?;
    for r in records {
        writeln!(
            out,
            "{},{:e},{:e},{:e},{:e},{:e}",
            r.iteration, r.learning_rate, r.loss.gromov, r.loss.orth, r.loss.lpf, r.loss.total
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geodesics::geodesic_matrix;
    use crate::mesh::{extract_submesh, shapes, VertexSubset};
    use crate::spectral::eigenbasis;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn dense_lpf(p: &DMatrix<f64>, bx: &SpectralBasis, by: &SpectralBasis, r: usize) -> f64 {
        let g = p * bx.eigenvectors();
        let t = by.eigenvectors().columns(0, r).into_owned();
        let b = &g * g.transpose() - &t * t.transpose();
        let a = DMatrix::from_diagonal(by.mass());
        (&a * &b * &a * &b).trace()
    }

    fn dense_gromov(p: &DMatrix<f64>, dx: &DMatrix<f64>, dy: &DMatrix<f64>, a: &DVector<f64>) -> f64 {
        let mut s = 0.0;
        for i in 0..p.nrows() {
            for j in 0..p.nrows() {
                let mut m = -dy[(i, j)];
                for k in 0..p.ncols() {
                    for l in 0..p.ncols() {
                        m += p[(i, k)] * dx[(k, l)] * p[(j, l)];
                    }
                }
                s += a[i] * a[j] * m * m;
            }
        }
        s
    }

    struct Fixture {
        bx: SpectralBasis,
        by: SpectralBasis,
        gx: GeodesicMatrix,
        gy: GeodesicMatrix,
        part: VertexSubset,
    }

    fn fixture() -> Fixture {
        let mx = shapes::grid(4, 3, 1.0, 0.8);
        let keep = VertexSubset::new(20, vec![0, 1, 2, 5, 6, 7, 10, 11, 12, 15, 16, 17]).unwrap();
        let (my, part) = extract_submesh(&mx, &keep).unwrap();
        Fixture {
            bx: eigenbasis(&mx, 8).unwrap(),
            by: eigenbasis(&my, 6).unwrap(),
            gx: geodesic_matrix(&mx).unwrap(),
            gy: geodesic_matrix(&my).unwrap(),
            part,
        }
    }

    #[test]
    fn lpf_low_rank_matches_dense() {
        let f = fixture();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = DMatrix::from_fn(12, 20, |_, _| rng.gen::<f64>());
        for r in [1, 3, 6] {
            let low = lpf_loss(&p, &f.bx, &f.by, r).unwrap();
            assert_relative_eq!(low, dense_lpf(&p, &f.bx, &f.by, r), max_relative = 1e-10);
        }
        assert_relative_eq!(lpf_loss(&DMatrix::zeros(12, 20), &f.bx, &f.by, 4).unwrap(), 4.0, epsilon = 1e-10);
    }

    #[test]
    fn gromov_matches_dense_and_vanishes_on_isometry() {
        let f = fixture();
        let dx = f.gx.to_f64().unwrap();
        let dy = f.gy.to_f64().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = DMatrix::from_fn(12, 20, |_, _| rng.gen::<f64>() * 0.1);
        let a = f.by.mass().clone();
        assert_relative_eq!(
            gromov_loss(&p, &dx, &dy, &a).unwrap(),
            dense_gromov(&p, &dx, &dy, &a),
            max_relative = 1e-10
        );
        let restricted = f.gx.select(f.part.indices());
        let mut pi = DMatrix::zeros(12, 20);
        for (i, &j) in f.part.indices().iter().enumerate() {
            pi[(i, j)] = 1.0;
        }
        assert_eq!(gromov_loss(&pi, &dx, &restricted, &a).unwrap(), 0.0);
    }

    #[test]
    fn orth_zero_on_truncated_identity() {
        let c = DMatrix::from_fn(5, 7, |i, j| if i == j && i < 3 { 1.0 } else { 0.0 });
        assert_eq!(orth_loss(&c, 3), 0.0);
        assert_relative_eq!(orth_loss(&c, 4), 1.0);
    }

    #[test]
    fn selector_counts_overlapping_spectrum() {
        let f = fixture();
        let r = select_r(&f.bx, &f.by).r;
        let cap = f.bx.max_eigenvalue();
        assert!(r >= 1 && r <= f.by.k());
        assert!(f.by.eigenvalues().iter().take(r).all(|&l| l <= cap));
    }

    /// Central differences on every feature entry.
    fn finite_difference(
        ctx: &LossContext<'_>,
        term: LossTerm,
        fy: &DMatrix<f64>,
        fx: &DMatrix<f64>,
        h: f64,
    ) -> (DMatrix<f64>, DMatrix<f64>) {
        let value = |fy: &DMatrix<f64>, fx: &DMatrix<f64>| {
            let b = ctx.term_value_and_gradient(term, fy, fx).unwrap().0;
            match term {
                LossTerm::Gromov => b.gromov,
                LossTerm::Orth => b.orth,
                LossTerm::Lpf => b.lpf,
                LossTerm::Total => b.total,
            }
        };
        let fd = |m: &DMatrix<f64>, which: bool| {
            DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| {
                let (mut a, mut b) = (m.clone(), m.clone());
                a[(i, j)] += h;
                b[(i, j)] -= h;
                let (va, vb) = if which { (value(&a, fx), value(&b, fx)) } else { (value(fy, &a), value(fy, &b)) };
                (va - vb) / (2.0 * h)
            })
        };
        (fd(fy, true), fd(fx, false))
    }

    #[test]
    fn gradients_match_finite_differences() {
        let f = fixture();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let fy = DMatrix::from_fn(12, 5, |_, _| rng.gen::<f64>() - 0.3);
        let fx = DMatrix::from_fn(20, 5, |_, _| rng.gen::<f64>() - 0.3);
        for mode in [LossMode::Orth, LossMode::Lpf] {
            let settings = LossSettings {
                tau: 0.07,
                mode,
                ..LossSettings::default()
            };
            let ctx = LossContext::new(&f.bx, &f.by, &f.gx, &f.gy, settings, Subsampling::default(), 0).unwrap();
            for term in [LossTerm::Gromov, LossTerm::Orth, LossTerm::Lpf, LossTerm::Total] {
                let (_, gy, gx) = ctx.term_value_and_gradient(term, &fy, &fx).unwrap();
                let (ny, nx) = finite_difference(&ctx, term, &fy, &fx, 1e-6);
                for (an, fd) in [(&gy, &ny), (&gx, &nx)] {
                    let floor = 1e-3 * fd.amax();
                    for (a, b) in an.iter().zip(fd.iter()) {
                        let rel = (a - b).abs() / b.abs().max(floor).max(1e-12);
                        assert!(rel < 1e-4, "{term:?} {mode:?}: {a} vs {b}");
                    }
                }
            }
        }
    }

    #[test]
    fn subsampled_gradient_matches_its_own_estimate() {
        let f = fixture();
        let settings = LossSettings {
            tau: 0.1,
            ..LossSettings::default()
        };
        let sub = Subsampling { threshold: 10, size: 8 };
        let ctx = LossContext::new(&f.bx, &f.by, &f.gx, &f.gy, settings, sub, 5).unwrap();
        assert!(ctx.is_subsampled());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let fy = DMatrix::from_fn(12, 4, |_, _| rng.gen::<f64>() - 0.3);
        let fx = DMatrix::from_fn(20, 4, |_, _| rng.gen::<f64>() - 0.3);
        let (_, gy, _) = ctx.term_value_and_gradient(LossTerm::Gromov, &fy, &fx).unwrap();
        let (ny, _) = finite_difference(&ctx, LossTerm::Gromov, &fy, &fx, 1e-6);
        assert!((gy - &ny).amax() <= 1e-5 * ny.amax().max(1e-12));
    }

    #[test]
    fn zero_feature_row_is_an_error() {
        let f = fixture();
        let ctx = LossContext::new(&f.bx, &f.by, &f.gx, &f.gy, LossSettings::default(), Subsampling::default(), 0).unwrap();
        let mut fy = DMatrix::from_element(12, 3, 1.0);
        fy.row_mut(4).fill(0.0);
        let fx = DMatrix::from_element(20, 3, 1.0);
        assert!(matches!(loss_and_gradient(&fy, &fx, &ctx), Err(Error::ZeroNormRow { vertex: 4 })));
    }
}
