//! Maximum likelihood fitting of discrete-time linear mixed models.
//!
//! The residual variance is profiled out analytically, so the optimiser only
//! searches over the covariance ratios: one coordinate for EXCH and two for
//! NE and DTD.

pub mod dense;
pub mod frame;
pub mod gls;
pub mod optim;
#[cfg(test)]
pub(crate) mod testutil;

use nalgebra::{DMatrix, DVector};

use crate::covariance::{Structure, VarianceComponents};
use crate::datagen::Dataset;
use crate::error::{Error, Result};
pub use frame::{EffectKind, ModelFrame};
use gls::{profile, Profiled, Ratios};
use optim::{nelder_mead, NelderMeadOptions};

/// Smallest ratio the optimiser can propose.
pub const RATIO_FLOOR: f64 = 1e-10;
const BOUNDARY_RATIO: f64 = 1e-8;
const BOUNDARY_R: f64 = 1.0 - 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct WorkingModel {
    pub structure: Structure,
    pub effect: EffectKind,
}

impl WorkingModel {
    pub fn new(structure: Structure, effect: EffectKind) -> Result<Self> {
        if !structure.is_working() {
            return Err(Error::Parameter(
                "CTD is not available as a working model".into(),
            ));
        }
        Ok(Self { structure, effect })
    }

    fn ratios(&self, x: &[f64]) -> Ratios {
        let pos = |v: f64| v.exp().max(RATIO_FLOOR);
        match self.structure {
            Structure::Exch => Ratios {
                phi_alpha: pos(x[0]),
                phi_gamma: 0.0,
                r: 1.0,
            },
            Structure::Ne => Ratios {
                phi_alpha: pos(x[0]),
                phi_gamma: pos(x[1]),
                r: 1.0,
            },
            _ => Ratios {
                phi_alpha: 0.0,
                phi_gamma: pos(x[0]),
                r: 1.0 / (1.0 + (-x[1]).exp()),
            },
        }
    }

    fn coords(&self, r: &Ratios) -> Vec<f64> {
        let ln = |v: f64| v.max(RATIO_FLOOR).ln();
        match self.structure {
            Structure::Exch => vec![ln(r.phi_alpha)],
            Structure::Ne => vec![ln(r.phi_alpha), ln(r.phi_gamma)],
            _ => {
                let rr = r.r.clamp(1e-9, 1.0 - 1e-9);
                vec![ln(r.phi_gamma), (rr / (1.0 - rr)).ln()]
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    /// Restricted instead of full maximum likelihood.
    pub reml: bool,
    pub max_iter: usize,
    pub ftol: f64,
    pub xtol: f64,
    /// Restart the simplex once from the best start.
    pub polish: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            reml: false,
            max_iter: 500,
            ftol: 1e-9,
            xtol: 1e-7,
            polish: true,
        }
    }
}

/// `D_i' W_i^-1 D_i` and `D_i' W_i^-1 r_i` for one cluster at the fit.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterContribution {
    pub info: DMatrix<f64>,
    pub score: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub model: WorkingModel,
    pub columns: Vec<String>,
    pub dropped_columns: Vec<String>,
    pub effect_columns: Vec<usize>,
    pub zeta_hat: DVector<f64>,
    pub vc_hat: VarianceComponents,
    pub loglik: f64,
    /// `(sum D'W^-1 D)^-1`.
    pub vcov_model: DMatrix<f64>,
    /// `sum D'W^-1 D`.
    pub bread: DMatrix<f64>,
    pub contributions: Vec<ClusterContribution>,
    pub cluster_labels: Vec<String>,
    pub converged: bool,
    pub at_boundary: bool,
    pub n_iter: usize,
    /// Best log-likelihood after each optimiser iteration.
    pub trace: Vec<f64>,
    pub n_obs: usize,
    pub reml: bool,
}

impl FitResult {
    pub fn n_clusters(&self) -> usize {
        self.contributions.len()
    }

    pub fn coef(&self, name: &str) -> Option<f64> {
        self.columns
            .iter()
            .position(|c| c == name)
            .map(|k| self.zeta_hat[k])
    }

    /// Constant-effect estimate, if the model has a treatment column.
    pub fn treatment_effect(&self) -> Option<f64> {
        self.coef("treatment")
    }
}

fn moment_start(frame: &ModelFrame, model: &WorkingModel) -> Result<Ratios> {
    let ols = profile(
        frame,
        model.structure,
        &Ratios {
            phi_alpha: 0.0,
            phi_gamma: 0.0,
            r: 1.0,
        },
        false,
    )?;
    let (mut ss_w, mut df_w) = (0.0, 0.0);
    let (mut cell_sq, mut cells) = (0.0, 0.0);
    let (mut cross, mut pairs) = (0.0, 0.0);
    for cf in &frame.clusters {
        let fitted = &cf.x * &ols.zeta;
        let means: Vec<f64> = cf
            .cells
            .iter()
            .enumerate()
            .map(|(a, c)| c.sum / c.n as f64 - fitted[a])
            .collect();
        for c in &cf.cells {
            ss_w += c.ss_within;
            df_w += (c.n - 1) as f64;
        }
        for a in 0..means.len() {
            cell_sq += means[a] * means[a];
            cells += 1.0;
            for b in a + 1..means.len() {
                cross += means[a] * means[b];
                pairs += 1.0;
            }
        }
    }
    let s2 = if df_w > 0.0 {
        ss_w / df_w
    } else {
        ols.sigma_sq
    };
    let n_bar = frame.n_obs as f64 / cells;
    let cell_var = (cell_sq / cells - s2 / n_bar).max(0.0);
    let between = if pairs > 0.0 {
        (cross / pairs).max(0.0)
    } else {
        0.0
    };
    let floor = 1e-4;
    Ok(match model.structure {
        Structure::Exch => Ratios {
            phi_alpha: (cell_var / s2).max(floor),
            phi_gamma: 0.0,
            r: 1.0,
        },
        Structure::Ne => Ratios {
            phi_alpha: (between / s2).max(floor),
            phi_gamma: ((cell_var - between) / s2).max(floor),
            r: 1.0,
        },
        _ => Ratios {
            phi_alpha: 0.0,
            phi_gamma: (cell_var / s2).max(floor),
            r: if cell_var > 0.0 {
                (between / cell_var).clamp(0.05, 0.95)
            } else {
                0.5
            },
        },
    })
}

pub fn fit_ml(dataset: &Dataset, model: WorkingModel, opts: &FitOptions) -> Result<FitResult> {
    let frame = ModelFrame::new(dataset, model.effect)?;
    fit_frame(&frame, model.structure, opts)
}

/// Fit one working structure to a prepared frame.
pub fn fit_frame(frame: &ModelFrame, structure: Structure, opts: &FitOptions) -> Result<FitResult> {
    let model = WorkingModel::new(structure, frame.effect)?;
    let objective = |x: &[f64]| match profile(frame, structure, &model.ratios(x), opts.reml) {
        Ok(p) => -p.loglik,
        Err(_) => f64::INFINITY,
    };
    let nm = NelderMeadOptions {
        max_iter: opts.max_iter,
        ftol: opts.ftol,
        xtol: opts.xtol,
        initial_step: 1.0,
    };
    let starts = [
        moment_start(frame, &model)?,
        Ratios {
            phi_alpha: 1e-3,
            phi_gamma: 1e-3,
            r: 0.5,
        },
        Ratios {
            phi_alpha: 0.1,
            phi_gamma: 0.1,
            r: 0.8,
        },
    ];
    let mut best: Option<optim::NelderMeadResult> = None;
    let mut n_iter = 0;
    for s in &starts {
        let run = nelder_mead(objective, &model.coords(s), &nm);
        n_iter += run.iterations;
        if best.as_ref().is_none_or(|b| run.fx < b.fx) {
            best = Some(run);
        }
    }
    let mut best = best.expect("at least one start");
    if !best.fx.is_finite() {
        return Err(Error::Fit(
            "log-likelihood is not finite at any start".into(),
        ));
    }
    let mut trace: Vec<f64> = best.trace.iter().map(|f| -f).collect();
    if opts.polish {
        let polish = nelder_mead(
            objective,
            &best.x,
            &NelderMeadOptions {
                initial_step: 0.1,
                ..nm
            },
        );
        n_iter += polish.iterations;
        trace.extend(polish.trace.iter().map(|f| -f));
        if polish.fx <= best.fx {
            best = polish;
        } else {
            best.converged &= polish.converged;
        }
    }
    let ratios = model.ratios(&best.x);
    let fitted = profile(frame, structure, &ratios, opts.reml)?;
    let at_boundary = match structure {
        Structure::Exch => ratios.phi_alpha <= BOUNDARY_RATIO,
        Structure::Ne => ratios.phi_alpha <= BOUNDARY_RATIO || ratios.phi_gamma <= BOUNDARY_RATIO,
        _ => ratios.phi_gamma <= BOUNDARY_RATIO || ratios.r >= BOUNDARY_R,
    };
    Ok(assemble(
        frame,
        model,
        ratios,
        fitted,
        best.converged,
        at_boundary,
        n_iter,
        trace,
        opts.reml,
    ))
}

/// Fit at fixed covariance ratios without optimisation.
pub fn fit_at(frame: &ModelFrame, structure: Structure, ratios: Ratios) -> Result<FitResult> {
    let model = WorkingModel::new(structure, frame.effect)?;
    let fitted = profile(frame, structure, &ratios, false)?;
    Ok(assemble(
        frame,
        model,
        ratios,
        fitted,
        true,
        false,
        0,
        Vec::new(),
        false,
    ))
}

#[allow(clippy::too_many_arguments)]
fn assemble(
    frame: &ModelFrame,
    model: WorkingModel,
    ratios: Ratios,
    fitted: Profiled,
    converged: bool,
    at_boundary: bool,
    n_iter: usize,
    trace: Vec<f64>,
    reml: bool,
) -> FitResult {
    let s2 = fitted.sigma_sq;
    let contributions = fitted
        .systems
        .iter()
        .map(|s| ClusterContribution {
            info: &s.xcx / s2,
            score: (&s.xcy - &s.xcx * &fitted.zeta) / s2,
        })
        .collect();
    let bread = &fitted.bread_tilde / s2;
    let p = bread.nrows();
    let names: Vec<String> = (0..p).map(|k| frame.columns[k].clone()).collect();
    let vcov_model = gls::solve_normal(&fitted.bread_tilde, &DVector::zeros(p), &names)
        .map(|(_, inv)| inv * s2)
        .expect("normal matrix was already factorised");
    FitResult {
        model,
        columns: frame.columns.clone(),
        dropped_columns: frame.dropped.clone(),
        effect_columns: frame.effect_columns.clone(),
        zeta_hat: fitted.zeta,
        vc_hat: ratios.components(model.structure, s2),
        loglik: fitted.loglik,
        vcov_model,
        bread,
        contributions,
        cluster_labels: frame.clusters.iter().map(|c| c.label.clone()).collect(),
        converged,
        at_boundary,
        n_iter,
        trace,
        n_obs: frame.n_obs,
        reml,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::Dataset;
    use testutil::random_dataset;

    fn permute_within_cells(ds: &Dataset) -> Dataset {
        let mut out = ds.clone();
        let mut start = 0;
        while start < out.records.len() {
            let key = (out.records[start].cluster, out.records[start].period);
            let end = start
                + out.records[start..]
                    .iter()
                    .take_while(|r| (r.cluster, r.period) == key)
                    .count();
            let ys: Vec<f64> = out.records[start..end]
                .iter()
                .rev()
                .map(|r| r.outcome)
                .collect();
            for (r, y) in out.records[start..end].iter_mut().zip(ys) {
                r.outcome = y;
            }
            start = end;
        }
        out
    }

    #[test]
    fn optimum_beats_truth_and_matches_dense_evaluation() {
        let ds = random_dataset(21, 4, 3, false);
        let truth = VarianceComponents {
            tau_alpha_sq: 0.49,
            tau_gamma_sq: 0.16,
            sigma_eps_sq: 1.0,
            ..Default::default()
        };
        let model = WorkingModel::new(Structure::Ne, EffectKind::Constant).unwrap();
        let fit = fit_ml(&ds, model, &FitOptions::default()).unwrap();
        let frame = ModelFrame::new(&ds, EffectKind::Constant).unwrap();
        let at_opt = dense::loglik_dense(&ds, &frame, Structure::Ne, &fit.vc_hat).unwrap();
        let at_truth = dense::loglik_dense(&ds, &frame, Structure::Ne, &truth).unwrap();
        assert!(
            (at_opt - fit.loglik).abs() < 1e-8,
            "{at_opt} vs {}",
            fit.loglik
        );
        assert!(at_opt >= at_truth - 1e-9);
    }

    #[test]
    fn zero_variance_truth_recovers_ols() {
        // exact fixed effects plus a +e/-e pair in every cell: no cluster structure
        let mut ds = random_dataset(5, 6, 4, false);
        for pair in ds.records.chunks_mut(2) {
            let mean = 0.2 * pair[0].period as f64 + 0.5 * pair[0].treatment as u8 as f64;
            pair[0].outcome = mean + 0.01;
            pair[1].outcome = mean - 0.01;
        }
        let model = WorkingModel::new(Structure::Exch, EffectKind::Constant).unwrap();
        let fit = fit_ml(&ds, model, &FitOptions::default()).unwrap();
        let frame = ModelFrame::new(&ds, EffectKind::Constant).unwrap();
        let ols = dense::ols(&ds, &frame).unwrap();
        assert!(fit.vc_hat.tau_alpha_sq < 1e-6, "{:?}", fit.vc_hat);
        assert!(fit.at_boundary);
        assert!(
            (fit.treatment_effect().unwrap() - ols[frame.column_index("treatment").unwrap()]).abs()
                < 1e-6
        );
    }

    #[test]
    fn trace_is_monotone() {
        for structure in Structure::WORKING {
            let ds = random_dataset(8, 6, 4, true);
            let fit = fit_ml(
                &ds,
                WorkingModel::new(structure, EffectKind::Constant).unwrap(),
                &FitOptions::default(),
            )
            .unwrap();
            assert!(
                fit.trace.windows(2).all(|w| w[1] >= w[0] - 1e-12),
                "{structure}"
            );
            assert!(fit.trace.last().unwrap() <= &(fit.loglik + 1e-9));
        }
    }

    #[test]
    fn permutation_within_cells_is_invariant() {
        let ds = random_dataset(13, 6, 4, true);
        let perm = permute_within_cells(&ds);
        assert_ne!(ds.records, perm.records);
        for structure in Structure::WORKING {
            let m = WorkingModel::new(structure, EffectKind::Constant).unwrap();
            let a = fit_ml(&ds, m, &FitOptions::default()).unwrap();
            let b = fit_ml(&perm, m, &FitOptions::default()).unwrap();
            assert!((a.loglik - b.loglik).abs() < 1e-10);
            // the optimiser path may differ in the last bits
            assert!((&a.zeta_hat - &b.zeta_hat).amax() < 1e-6);
            let fixed = gls::Ratios::from_components(&a.vc_hat);
            let fa = fit_at(
                &ModelFrame::new(&ds, EffectKind::Constant).unwrap(),
                structure,
                fixed,
            )
            .unwrap();
            let fb = fit_at(
                &ModelFrame::new(&perm, EffectKind::Constant).unwrap(),
                structure,
                fixed,
            )
            .unwrap();
            assert!((&fa.zeta_hat - &fb.zeta_hat).amax() < 1e-12);
        }
    }

    #[test]
    fn vcov_is_inverse_bread_and_symmetric() {
        let ds = random_dataset(2, 6, 4, true);
        let fit = fit_ml(
            &ds,
            WorkingModel::new(Structure::Dtd, EffectKind::ExposureDependent).unwrap(),
            &FitOptions::default(),
        )
        .unwrap();
        let p = fit.columns.len();
        assert_eq!(p, 7);
        let prod = &fit.vcov_model * &fit.bread;
        assert!((prod - DMatrix::<f64>::identity(p, p)).amax() < 1e-9);
        assert!((&fit.vcov_model - fit.vcov_model.transpose()).amax() < 1e-12);
        let sum_info: DMatrix<f64> = fit
            .contributions
            .iter()
            .fold(DMatrix::zeros(p, p), |acc, c| acc + &c.info);
        assert!((sum_info - &fit.bread).amax() < 1e-9);
        // scores sum to zero at the GLS solution
        let total: DVector<f64> = fit
            .contributions
            .iter()
            .fold(DVector::zeros(p), |acc, c| acc + &c.score);
        assert!(total.amax() < 1e-8);
    }

    #[test]
    fn reml_flag_changes_variance_estimate() {
        let ds = random_dataset(4, 6, 4, false);
        let m = WorkingModel::new(Structure::Exch, EffectKind::Constant).unwrap();
        let ml = fit_ml(&ds, m, &FitOptions::default()).unwrap();
        let reml = fit_ml(
            &ds,
            m,
            &FitOptions {
                reml: true,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(reml.reml && !ml.reml);
        assert!(reml.vc_hat.sigma_eps_sq > ml.vc_hat.sigma_eps_sq);
    }

    #[test]
    fn ctd_working_model_rejected() {
        assert!(WorkingModel::new(Structure::Ctd, EffectKind::Constant).is_err());
    }
}
