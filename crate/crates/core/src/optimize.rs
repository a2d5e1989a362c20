//! Adam on the feature matrices of one pair, and dataset-level training.

use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::descriptors::{wave_kernel_signature_at, wks_energies, FeatureMatrix, Padding, Provenance};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::geodesics::{geodesic_matrix, GeodesicMatrix};
use crate::losses::{loss_and_gradient, LossBreakdown, LossContext, LossMode, LossRecord, LossSettings, Subsampling};
use crate::matching::{nearest_neighbor_map, spectrally_smoothed_map, PointMap};
use crate::mesh::TriangleMesh;
use crate::spectral::{eigenbasis, SpectralBasis};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Schedule {
    Constant,
    /// `lr_t = eta_min + (lr - eta_min) (1 + cos(pi t / t_max)) / 2`.
    Cosine { eta_min: f64, t_max: usize },
}

impl Schedule {
    pub fn rate(&self, base: f64, t: usize) -> f64 {
        match *self {
            Schedule::Constant => base,
            Schedule::Cosine { eta_min, t_max } => {
                let phase = std::f64::consts::PI * t as f64 / t_max.max(1) as f64;
                eta_min + (base - eta_min) * (1.0 + phase.cos()) / 2.0
            }
        }
    }
}

/// Run parameters. The field names double as configuration-file keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizationConfig {
    pub tau: f64,
    pub lambda_orth: f64,
    pub lambda_lpf: f64,
    /// Spectral basis size, capped at `n_y - 1` per pair.
    pub k: usize,
    /// Feature width after padding.
    pub d: usize,
    pub lr: f64,
    pub iterations: usize,
    pub mode: LossMode,
    pub seed: u64,
    pub schedule: Schedule,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub subsampling: Subsampling,
    /// Energy bins of the initial wave kernel signature.
    pub wks_bins: usize,
    /// Optional early stop; off by default.
    pub plateau: Option<PlateauStop>,
}

/// Stops once the total loss improved by less than `rel_tol` (relative)
/// over the last `window` iterations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlateauStop {
    pub window: usize,
    pub rel_tol: f64,
}

impl Default for OptimizationConfig {
    fn default() -> Self {
        let loss = LossSettings::default();
        Self {
            tau: loss.tau,
            lambda_orth: loss.lambda_orth,
            lambda_lpf: loss.lambda_lpf,
            k: 200,
            d: 256,
            lr: 1e-3,
            iterations: 20_000,
            mode: loss.mode,
            seed: 0,
            schedule: Schedule::Cosine {
                eta_min: 1e-4,
                t_max: 300,
            },
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            subsampling: Subsampling::default(),
            wks_bins: 128,
            plateau: None,
        }
    }
}

impl OptimizationConfig {
    /// Settings for hole-type partiality (softer temperature).
    pub fn holes() -> Self {
        Self {
            tau: 0.07,
            ..Self::default()
        }
    }

    /// Short per-pair refinement.
    pub fn refinement() -> Self {
        Self {
            iterations: 15,
            ..Self::default()
        }
    }

    pub fn loss_settings(&self) -> LossSettings {
        LossSettings {
            tau: self.tau,
            lambda_orth: self.lambda_orth,
            lambda_lpf: self.lambda_lpf,
            mode: self.mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.tau > 0.0) {
            return bad("tau must be positive");
        }
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if self.lambda_orth < 0.0 || self.lambda_lpf < 0.0 {
            return bad("loss weights must be non-negative");
        }
        if self.k == 0 || self.d == 0 || self.wks_bins == 0 {
            return bad("k, d and wks_bins must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if let Some(p) = self.plateau {
            if p.window == 0 || !(p.rel_tol >= 0.0) {
                return bad("plateau window must be positive and rel_tol non-negative");
            }
        }
        Ok(())
    }
}

/// Adam state for one parameter matrix.
#[derive(Debug, Clone)]
struct Adam {
    m: DMatrix<f64>,
    v: DMatrix<f64>,
}

impl Adam {
    fn new(shape: (usize, usize)) -> Self {
        Self {
            m: DMatrix::zeros(shape.0, shape.1),
            v: DMatrix::zeros(shape.0, shape.1),
        }
    }

    /// Step `t` counts from one.
    fn step(&mut self, x: &mut DMatrix<f64>, g: &DMatrix<f64>, lr: f64, t: usize, cfg: &OptimizationConfig) {
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(t as i32);
        let c2 = 1.0 - b2.powi(t as i32);
        for ((xi, gi), (mi, vi)) in x.iter_mut().zip(g.iter()).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            *xi -= lr * (*mi / c1) / ((*vi / c2).sqrt() + cfg.eps);
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    /// Loss at the start of each iteration run.
    pub losses: Vec<LossRecord>,
    /// Loss of the returned features.
    pub final_breakdown: Option<LossBreakdown>,
    pub nearest_map: PointMap,
    pub final_map: PointMap,
    /// Not serialized, so reports of identical runs are byte-identical.
    #[serde(skip)]
    pub wall_time_secs: f64,
    pub warnings: Vec<String>,
    pub config: OptimizationConfig,
}

impl RunReport {
    pub fn initial_loss(&self) -> Option<f64> {
        self.losses.first().map(|r| r.loss.total)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.final_breakdown.map(|b| b.total)
    }

    pub fn iterations_run(&self) -> usize {
        self.losses.len()
    }
}

#[derive(Debug, Clone)]
pub struct Optimized {
    pub fy: FeatureMatrix,
    pub fx: FeatureMatrix,
    pub report: RunReport,
}

const GUARD_WINDOW: usize = 50;
const GUARD_SLACK: f64 = 1.05;

/// Minimizes the configured objective over both feature matrices.
pub fn optimize_pair(
    fy0: &FeatureMatrix,
    fx0: &FeatureMatrix,
    ctx: &mut LossContext<'_>,
    config: &OptimizationConfig,
) -> Result<Optimized> {
    config.validate()?;
    let start = Instant::now();
    let mut fy = fy0.values().clone();
    let mut fx = fx0.values().clone();
    let (mut adam_y, mut adam_x) = (Adam::new(fy.shape()), Adam::new(fx.shape()));
    let mut losses: Vec<LossRecord> = Vec::with_capacity(config.iterations);
    let mut warnings = Vec::new();
    let resample = ctx.is_subsampled();

    for t in 0..config.iterations {
        if resample {
            ctx.resample(config.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(t as u64));
        }
        let lr = config.schedule.rate(config.lr, t);
        let (loss, gy, gx) = loss_and_gradient(&fy, &fx, ctx).map_err(|e| diverged(t, e))?;
        losses.push(LossRecord {
            iteration: t,
            learning_rate: lr,
            loss,
        });

        if t == 0 && !resample {
            // The first step must not increase the loss; retry once with a
            // tenth of the rate before giving up on the check.
            let (sy, sx) = (adam_y.clone(), adam_x.clone());
            let (mut ty, mut tx) = (fy.clone(), fx.clone());
            adam_y.step(&mut ty, &gy, lr, 1, config);
            adam_x.step(&mut tx, &gx, lr, 1, config);
            let after = crate::losses::loss_and_gradient(&ty, &tx, ctx).map_err(|e| diverged(t, e))?.0;
            if after.total > loss.total {
                log::info!("first step raised the loss; retrying at lr/10");
                adam_y = sy;
                adam_x = sx;
                let (mut ty, mut tx) = (fy.clone(), fx.clone());
                adam_y.step(&mut ty, &gy, lr / 10.0, 1, config);
                adam_x.step(&mut tx, &gx, lr / 10.0, 1, config);
                let retry = loss_and_gradient(&ty, &tx, ctx).map_err(|e| diverged(t, e))?.0;
                if retry.total > loss.total {
                    let w = format!("first step did not decrease the loss ({} -> {})", loss.total, retry.total);
                    log::warn!("{w}");
                    warnings.push(w);
                }
                fy = ty;
                fx = tx;
            } else {
                fy = ty;
                fx = tx;
            }
        } else {
            adam_y.step(&mut fy, &gy, lr, t + 1, config);
            adam_x.step(&mut fx, &gx, lr, t + 1, config);
        }

        if t >= GUARD_WINDOW && t % GUARD_WINDOW == 0 {
            let (now, before) = (losses[t].loss.total, losses[t - GUARD_WINDOW].loss.total);
            if now > before * GUARD_SLACK {
                let w = format!("loss rose from {before:.6e} to {now:.6e} between iterations {} and {t}", t - GUARD_WINDOW);
                log::warn!("{w}");
                warnings.push(w);
            }
        }
        if t % 100 == 0 {
            log::debug!("iteration {t}: total {:.6e} (lr {lr:.2e})", loss.total);
        }
        if let Some(p) = config.plateau {
            if t >= p.window {
                let before = losses[t - p.window].loss.total;
                if before - loss.total <= p.rel_tol * before.abs() {
                    log::info!("plateau reached at iteration {t}");
                    break;
                }
            }
        }
    }
    let final_breakdown = if losses.is_empty() {
        None
    } else {
        Some(loss_and_gradient(&fy, &fx, ctx).map_err(|e| diverged(losses.len(), e))?.0)
    };

    let nearest_map = nearest_neighbor_map(&fy, &fx)?;
    let final_map = spectrally_smoothed_map(&nearest_map, ctx.basis_x, ctx.basis_y)?;
    Ok(Optimized {
        fy: FeatureMatrix::new(fy, Provenance::Optimized)?,
        fx: FeatureMatrix::new(fx, Provenance::Optimized)?,
        report: RunReport {
            losses,
            final_breakdown,
            nearest_map,
            final_map,
            wall_time_secs: start.elapsed().as_secs_f64(),
            warnings,
            config: config.clone(),
        },
    })
}

fn diverged(iteration: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(what) => Error::Diverged {
            iteration,
            message: format!("non-finite {what}"),
        },
        other => other,
    }
}

/// A pair with everything the optimizer needs precomputed.
#[derive(Debug, Clone)]
pub struct PreparedPair {
    pub name: String,
    pub basis_x: SpectralBasis,
    pub basis_y: SpectralBasis,
    pub geo_x: GeodesicMatrix,
    pub geo_y: GeodesicMatrix,
    pub fx0: FeatureMatrix,
    pub fy0: FeatureMatrix,
    pub full_area: f64,
    pub ground_truth: Option<Vec<usize>>,
}

/// Initial features: wave kernel signatures of both shapes on the full
/// shape's energy grid, rows normalized, zero-padded to `d`.
pub fn initial_features(
    basis_x: &SpectralBasis,
    basis_y: &SpectralBasis,
    bins: usize,
    d: usize,
) -> Result<(FeatureMatrix, FeatureMatrix)> {
    let energies = wks_energies(basis_x, bins)?;
    let fx = wave_kernel_signature_at(basis_x, &energies)?.normalized_rows().fit_dim(d, Padding::Zero);
    let fy = wave_kernel_signature_at(basis_y, &energies)?.normalized_rows().fit_dim(d, Padding::Zero);
    Ok((fx, fy))
}

/// Basis size for a pair: `k` capped at `n_y - 1` (and at `n_x`).
pub fn basis_size(k: usize, n_x: usize, n_y: usize) -> usize {
    k.min(n_y.saturating_sub(1)).min(n_x).max(1)
}

/// Computes bases, geodesics and initial features for one pair.
pub fn prepare_pair(
    name: &str,
    full: &TriangleMesh,
    part: &TriangleMesh,
    ground_truth: Option<Vec<usize>>,
    config: &OptimizationConfig,
) -> Result<PreparedPair> {
    let k = basis_size(config.k, full.vertex_count(), part.vertex_count());
    let basis_x = eigenbasis(full, k)?;
    let basis_y = eigenbasis(part, k)?;
    let geo_x = geodesic_matrix(full)?;
    let geo_y = geodesic_matrix(part)?;
    let (fx0, fy0) = initial_features(&basis_x, &basis_y, config.wks_bins, config.d)?;
    Ok(PreparedPair {
        name: name.into(),
        basis_x,
        basis_y,
        geo_x,
        geo_y,
        fx0,
        fy0,
        full_area: full.total_area(),
        ground_truth,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairOutcome {
    pub name: String,
    pub report: Option<RunReport>,
    pub eval: Option<EvalReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchReport {
    pub pairs: Vec<PairOutcome>,
    /// Mean over pairs with ground truth that finished.
    pub mean_error: Option<f64>,
}

/// Runs [`optimize_pair`] on every pair. A failing pair is recorded and the
/// rest continue.
pub fn batch_train(pairs: &[PreparedPair], config: &OptimizationConfig) -> Result<BatchReport> {
    config.validate()?;
    let outcomes: Vec<PairOutcome> = pairs
        .par_iter()
        .map(|pair| match run_pair(pair, config) {
            Ok((report, eval)) => PairOutcome {
                name: pair.name.clone(),
                report: Some(report),
                eval,
                error: None,
            },
            Err(e) => {
                log::error!("pair {}: {e}", pair.name);
                PairOutcome {
                    name: pair.name.clone(),
                    report: None,
                    eval: None,
                    error: Some(e.to_string()),
                }
            }
        })
        .collect();
    let errs: Vec<f64> = outcomes.iter().filter_map(|o| o.eval.as_ref().map(|e| e.mean_error)).collect();
    let mean_error = (!errs.is_empty()).then(|| errs.iter().sum::<f64>() / errs.len() as f64);
    Ok(BatchReport {
        pairs: outcomes,
        mean_error,
    })
}

fn run_pair(pair: &PreparedPair, config: &OptimizationConfig) -> Result<(RunReport, Option<EvalReport>)> {
    let mut ctx = LossContext::new(
        &pair.basis_x,
        &pair.basis_y,
        &pair.geo_x,
        &pair.geo_y,
        config.loss_settings(),
        config.subsampling,
        config.seed,
    )?;
    let out = optimize_pair(&pair.fy0, &pair.fx0, &mut ctx, config)?;
    let eval = match &pair.ground_truth {
        Some(gt) => Some(evaluate(&out.report.final_map, gt, &pair.geo_x, pair.full_area)?),
        None => None,
    };
    Ok((out.report, eval))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{normalize_area, shapes};
    use crate::partialgen::plane_cut;
    use approx::assert_relative_eq;

    #[test]
    fn cosine_schedule_closed_form() {
        let s = Schedule::Cosine { eta_min: 1e-4, t_max: 300 };
        assert_relative_eq!(s.rate(1e-3, 0), 1e-3);
        assert_relative_eq!(s.rate(1e-3, 300), 1e-4);
        assert_relative_eq!(s.rate(1e-3, 150), 5.5e-4, max_relative = 1e-12);
        assert_relative_eq!(s.rate(1e-3, 600), 1e-3, max_relative = 1e-12);
    }

    #[test]
    fn adam_first_step_has_size_lr() {
        let cfg = OptimizationConfig::default();
        let mut x = DMatrix::from_element(1, 2, 0.0);
        let g = DMatrix::from_row_slice(1, 2, &[3.0, -0.01]);
        Adam::new((1, 2)).step(&mut x, &g, 0.1, 1, &cfg);
        assert_relative_eq!(x[(0, 0)], -0.1, max_relative = 1e-6);
        assert_relative_eq!(x[(0, 1)], 0.1, max_relative = 1e-4);
    }

    #[test]
    fn config_from_toml_keys() {
        let c: OptimizationConfig = toml::from_str("tau = 0.05\nlr = 0.01\nmode = \"lpf\"\niterations = 3\nseed = 9\nk = 30\nlambda_orth = 0.5\nlambda_lpf = 0.1\n").unwrap();
        assert_eq!(c.mode, LossMode::Lpf);
        assert_eq!(c.iterations, 3);
        assert!(toml::from_str::<OptimizationConfig>("bogus = 1").is_err());
    }

    fn small_pair() -> PreparedPair {
        let full = normalize_area(&shapes::humanoid(5, 4)).unwrap();
        let part = plane_cut(&full, [1.0, 0.0, 0.0], -0.15).unwrap();
        let cfg = OptimizationConfig {
            k: 20,
            d: 24,
            wks_bins: 16,
            ..OptimizationConfig::default()
        };
        prepare_pair("small", &full, &part.mesh, Some(part.map().to_vec()), &cfg).unwrap()
    }

    #[test]
    fn short_run_decreases_loss_and_is_deterministic() {
        let pair = small_pair();
        let cfg = OptimizationConfig {
            k: 20,
            d: 24,
            iterations: 40,
            lr: 1e-2,
            ..OptimizationConfig::holes()
        };
        let run = |cfg: &OptimizationConfig| {
            let mut ctx = LossContext::new(
                &pair.basis_x,
                &pair.basis_y,
                &pair.geo_x,
                &pair.geo_y,
                cfg.loss_settings(),
                cfg.subsampling,
                cfg.seed,
            )
            .unwrap();
            optimize_pair(&pair.fy0, &pair.fx0, &mut ctx, cfg).unwrap()
        };
        let a = run(&cfg);
        let b = run(&cfg);
        assert!(a.report.final_loss().unwrap() < a.report.initial_loss().unwrap());
        assert_eq!(a.fy.values(), b.fy.values());
        assert_eq!(a.report.final_map, b.report.final_map);
        assert_eq!(a.report.losses.len(), 40);
    }

    #[test]
    fn plateau_stops_early() {
        let pair = small_pair();
        let cfg = OptimizationConfig {
            k: 20,
            d: 24,
            iterations: 60,
            plateau: Some(PlateauStop {
                window: 5,
                rel_tol: 1.0,
            }),
            ..OptimizationConfig::holes()
        };
        let mut ctx = LossContext::new(
            &pair.basis_x,
            &pair.basis_y,
            &pair.geo_x,
            &pair.geo_y,
            cfg.loss_settings(),
            cfg.subsampling,
            0,
        )
        .unwrap();
        let out = optimize_pair(&pair.fy0, &pair.fx0, &mut ctx, &cfg).unwrap();
        assert_eq!(out.report.iterations_run(), 6);
    }

    #[test]
    fn zero_iterations_return_inputs() {
        let pair = small_pair();
        let cfg = OptimizationConfig {
            iterations: 0,
            ..OptimizationConfig::default()
        };
        let mut ctx = LossContext::new(
            &pair.basis_x,
            &pair.basis_y,
            &pair.geo_x,
            &pair.geo_y,
            cfg.loss_settings(),
            cfg.subsampling,
            0,
        )
        .unwrap();
        let out = optimize_pair(&pair.fy0, &pair.fx0, &mut ctx, &cfg).unwrap();
        assert_eq!(out.fy.values(), pair.fy0.values());
        assert!(out.report.losses.is_empty());
    }

    #[test]
    fn batch_continues_past_failures() {
        let good = small_pair();
        let mut bad = good.clone();
        bad.name = "bad".into();
        bad.fy0 = FeatureMatrix::new(DMatrix::zeros(bad.fy0.rows(), bad.fy0.dim()), Provenance::Loaded).unwrap();
        let cfg = OptimizationConfig {
            iterations: 2,
            k: 20,
            d: 24,
            ..OptimizationConfig::default()
        };
        let rep = batch_train(&[good, bad], &cfg).unwrap();
        assert!(rep.pairs[0].error.is_none());
        assert!(rep.pairs[1].error.is_some());
        assert!(rep.mean_error.is_some());
    }
}
