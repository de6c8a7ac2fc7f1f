//! Sandwich variances, t intervals on `I - 2` degrees of freedom, the
//! exposure-heterogeneity likelihood ratio test and the recruitment check.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use statrs::distribution::{ChiSquared, ContinuousCDF, StudentsT};

use crate::covariance::Structure;
use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::estimator::dense::{dense_working_cov, spd_inverse, DenseCluster};
use crate::estimator::frame::{dense_cluster, EffectKind, ModelFrame};
use crate::estimator::{fit_frame, gls, FitOptions, FitResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VcovKind {
    ModelBased,
    Cr0,
    Md,
}

impl VcovKind {
    pub const ALL: [VcovKind; 3] = [VcovKind::ModelBased, VcovKind::Cr0, VcovKind::Md];

    pub fn label(self) -> &'static str {
        match self {
            VcovKind::ModelBased => "model",
            VcovKind::Cr0 => "cr0",
            VcovKind::Md => "md",
        }
    }
}

impl std::str::FromStr for VcovKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "model" | "naive" | "model-based" => Ok(VcovKind::ModelBased),
            "cr0" | "rve" => Ok(VcovKind::Cr0),
            "md" => Ok(VcovKind::Md),
            other => Err(Error::Parameter(format!(
                "unknown variance estimator `{other}`"
            ))),
        }
    }
}

/// Which leverage adjustment the MD estimator applies to each cluster score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MdForm {
    /// `(I - H_i)^-1 r_i`, evaluated through `B (B - B_i)^-1 g_i`.
    #[default]
    Inverse,
    /// `(I - H_i) r_i`, without the inverse.
    Literal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobustVcov {
    pub kind: VcovKind,
    pub matrix: DMatrix<f64>,
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

fn bread_inverse(fit: &FitResult) -> DMatrix<f64> {
    fit.vcov_model.clone()
}

fn sandwich(fit: &FitResult, scores: impl Iterator<Item = DVector<f64>>) -> DMatrix<f64> {
    let p = fit.zeta_hat.len();
    let meat = scores.fold(DMatrix::zeros(p, p), |acc, u| acc + &u * u.transpose());
    let b_inv = bread_inverse(fit);
    symmetrize(&b_inv * meat * &b_inv)
}

/// Liang-Zeger sandwich `B^-1 (sum g_i g_i') B^-1`.
pub fn sandwich_cr0(fit: &FitResult) -> RobustVcov {
    RobustVcov {
        kind: VcovKind::Cr0,
        matrix: sandwich(fit, fit.contributions.iter().map(|c| c.score.clone())),
    }
}

/// Solve `m x = v` for symmetric positive definite `m`; `None` when `m` is
/// numerically singular.
fn spd_solve(m: &DMatrix<f64>, v: &DVector<f64>) -> Option<DVector<f64>> {
    let p = m.nrows();
    let d: Vec<f64> = (0..p).map(|k| m[(k, k)].max(0.0).sqrt()).collect();
    if d.contains(&0.0) {
        return None;
    }
    let scaled = DMatrix::from_fn(p, p, |a, b| m[(a, b)] / (d[a] * d[b]));
    let l = crate::covariance::cholesky_factor(&scaled).ok()?;
    let rhs = DVector::from_fn(p, |a, _| v[a] / d[a]);
    let y = l.solve_lower_triangular(&rhs)?;
    let x = l.transpose().solve_upper_triangular(&y)?;
    Some(DVector::from_fn(p, |a, _| x[a] / d[a]))
}

/// Mancl-DeRouen sandwich from the per-cluster contributions.
pub fn sandwich_md(fit: &FitResult, form: MdForm) -> Result<RobustVcov> {
    let b = &fit.bread;
    let b_inv = bread_inverse(fit);
    let mut scores = Vec::with_capacity(fit.n_clusters());
    for (c, label) in fit.contributions.iter().zip(&fit.cluster_labels) {
        let u = match form {
            MdForm::Inverse => {
                let x =
                    spd_solve(&(b - &c.info), &c.score).ok_or_else(|| Error::SingularLeverage {
                        cluster: label.clone(),
                    })?;
                b * x
            }
            MdForm::Literal => &c.score - &c.info * (&b_inv * &c.score),
        };
        scores.push(u);
    }
    Ok(RobustVcov {
        kind: VcovKind::Md,
        matrix: sandwich(fit, scores.into_iter()),
    })
}

/// Per-cluster `(D_i, r_i, W_i^-1)` at the fitted parameters, individual level.
fn dense_residuals(fit: &FitResult, dataset: &Dataset) -> Result<Vec<DenseCluster>> {
    let frame = ModelFrame::new(dataset, fit.model.effect)?;
    if frame.columns != fit.columns {
        return Err(Error::Validation(
            "dataset does not match the fitted model".into(),
        ));
    }
    (0..dataset.design.n_clusters())
        .map(|i| {
            let (d, y) = dense_cluster(dataset, &frame, i);
            let periods: Vec<usize> = dataset
                .cluster_records(i)
                .iter()
                .map(|r| r.period)
                .collect();
            let w = dense_working_cov(fit.model.structure, &fit.vc_hat, &periods, frame.n_periods)?;
            let r = y - &d * &fit.zeta_hat;
            Ok((d, r, spd_inverse(&w)?))
        })
        .collect()
}

/// CR0 from individual-level matrices.
pub fn sandwich_cr0_dense(fit: &FitResult, dataset: &Dataset) -> Result<RobustVcov> {
    let parts = dense_residuals(fit, dataset)?;
    let scores = parts.iter().map(|(d, r, wi)| d.transpose() * wi * r);
    Ok(RobustVcov {
        kind: VcovKind::Cr0,
        matrix: sandwich(fit, scores),
    })
}

/// MD from individual-level matrices: `(I - H_i) x = r_i` is solved by LU on
/// the full `K_i x K_i` system.
pub fn sandwich_md_dense(fit: &FitResult, dataset: &Dataset, form: MdForm) -> Result<RobustVcov> {
    let parts = dense_residuals(fit, dataset)?;
    let b_inv = bread_inverse(fit);
    let mut scores = Vec::with_capacity(parts.len());
    for ((d, r, wi), label) in parts.iter().zip(&fit.cluster_labels) {
        let k = r.len();
        let h = d * &b_inv * d.transpose() * wi;
        let a = DMatrix::identity(k, k) - h;
        let adj = match form {
            MdForm::Inverse => {
                let lu = a.lu();
                let scale = lu.u().diagonal().amax();
                let min_pivot = lu
                    .u()
                    .diagonal()
                    .iter()
                    .fold(f64::INFINITY, |m, x| m.min(x.abs()));
                if !(min_pivot > 1e-12 * scale) {
                    return Err(Error::SingularLeverage {
                        cluster: label.clone(),
                    });
                }
                lu.solve(r).ok_or_else(|| Error::SingularLeverage {
                    cluster: label.clone(),
                })?
            }
            MdForm::Literal => a * r,
        };
        scores.push(d.transpose() * wi * adj);
    }
    Ok(RobustVcov {
        kind: VcovKind::Md,
        matrix: sandwich(fit, scores.into_iter()),
    })
}

/// The variance-covariance matrix of the requested kind.
pub fn vcov(fit: &FitResult, kind: VcovKind) -> Result<RobustVcov> {
    match kind {
        VcovKind::ModelBased => Ok(RobustVcov {
            kind,
            matrix: fit.vcov_model.clone(),
        }),
        VcovKind::Cr0 => Ok(sandwich_cr0(fit)),
        VcovKind::Md => sandwich_md(fit, MdForm::default()),
    }
}

/// Symmetric and positive semidefinite to `tol * trace`.
pub fn is_symmetric_psd(m: &DMatrix<f64>, tol: f64) -> bool {
    let asym = (m - m.transpose()).amax();
    let trace = m.trace().abs().max(f64::MIN_POSITIVE);
    if asym > tol * trace {
        return false;
    }
    let eig = SymmetricEigen::new(symmetrize(m.clone()));
    eig.eigenvalues.iter().all(|&l| l >= -tol * trace)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EffectInference {
    pub estimate: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub dof: f64,
    pub p_value: f64,
}

impl EffectInference {
    pub fn covers(&self, truth: f64) -> bool {
        self.ci_low <= truth && truth <= self.ci_high
    }
}

/// Two-sided `1 - alpha/2` quantile of Student's t.
pub fn t_quantile(level: f64, dof: f64) -> Result<f64> {
    let t = StudentsT::new(0.0, 1.0, dof).map_err(|e| Error::Inference(e.to_string()))?;
    Ok(t.inverse_cdf(0.5 + level / 2.0))
}

/// Wald interval and two-sided p-value from an estimate and standard error.
pub fn interval_from_se(estimate: f64, se: f64, dof: f64, level: f64) -> Result<EffectInference> {
    if !(dof > 0.0) {
        return Err(Error::Inference(format!(
            "degrees of freedom must be positive, got {dof}"
        )));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Inference(format!(
            "confidence level must lie in (0, 1), got {level}"
        )));
    }
    if !(se >= 0.0) {
        return Err(Error::Inference(format!(
            "standard error must be non-negative, got {se}"
        )));
    }
    let q = t_quantile(level, dof)?;
    let p_value = if se == 0.0 {
        if estimate == 0.0 {
            1.0
        } else {
            0.0
        }
    } else {
        let t = StudentsT::new(0.0, 1.0, dof).map_err(|e| Error::Inference(e.to_string()))?;
        2.0 * t.cdf(-(estimate / se).abs())
    };
    Ok(EffectInference {
        estimate,
        se,
        ci_low: estimate - q * se,
        ci_high: estimate + q * se,
        dof,
        p_value,
    })
}

/// Inference for the contrast `c' zeta` with `I - 2` degrees of freedom.
pub fn effect_inference(
    estimate: f64,
    vcov: &DMatrix<f64>,
    contrast: &DVector<f64>,
    n_clusters: usize,
    level: f64,
) -> Result<EffectInference> {
    if n_clusters < 3 {
        return Err(Error::Inference(format!(
            "t inference needs at least 3 clusters, got {n_clusters}"
        )));
    }
    if contrast.len() != vcov.nrows() {
        return Err(Error::Inference(
            "contrast does not conform to the covariance matrix".into(),
        ));
    }
    let var = (contrast.transpose() * vcov * contrast)[(0, 0)];
    interval_from_se(
        estimate,
        var.max(0.0).sqrt(),
        (n_clusters - 2) as f64,
        level,
    )
}

/// Contrast picking out the constant effect, or averaging the exposure effects.
pub fn effect_contrast(fit: &FitResult) -> DVector<f64> {
    let mut c = DVector::zeros(fit.zeta_hat.len());
    let w = 1.0 / fit.effect_columns.len() as f64;
    for &k in &fit.effect_columns {
        c[k] = w;
    }
    c
}

/// Inference for `delta` (constant model) or `Delta` (exposure model).
pub fn primary_effect(fit: &FitResult, kind: VcovKind, level: f64) -> Result<EffectInference> {
    effect_with_vcov(fit, &vcov(fit, kind)?, level)
}

pub fn effect_with_vcov(fit: &FitResult, vcov: &RobustVcov, level: f64) -> Result<EffectInference> {
    let c = effect_contrast(fit);
    effect_inference(
        c.dot(&fit.zeta_hat),
        &vcov.matrix,
        &c,
        fit.n_clusters(),
        level,
    )
}

/// Exposure-time averaged effect `Delta = mean delta(s)`.
pub fn average_effect(fit: &FitResult, vcov: &RobustVcov, level: f64) -> Result<EffectInference> {
    if fit.model.effect != EffectKind::ExposureDependent {
        return Err(Error::Inference(
            "the averaged effect needs an exposure-dependent fit".into(),
        ));
    }
    let c = effect_contrast(fit);
    effect_inference(
        c.dot(&fit.zeta_hat),
        &vcov.matrix,
        &c,
        fit.n_clusters(),
        level,
    )
}

/// Inference for each `delta(s)` of an exposure-dependent fit.
pub fn exposure_effects(
    fit: &FitResult,
    vcov: &RobustVcov,
    level: f64,
) -> Result<Vec<(String, EffectInference)>> {
    fit.effect_columns
        .iter()
        .map(|&k| {
            let mut c = DVector::zeros(fit.zeta_hat.len());
            c[k] = 1.0;
            Ok((
                fit.columns[k].clone(),
                effect_inference(fit.zeta_hat[k], &vcov.matrix, &c, fit.n_clusters(), level)?,
            ))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrtResult {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
    pub loglik_constant: f64,
    pub loglik_exposure: f64,
}

/// `2 (l_exposure - l_constant)` against chi-square on `p_exp - p_const` DoF.
pub fn lrt_from_fits(constant: &FitResult, exposure: &FitResult) -> Result<LrtResult> {
    if constant.reml || exposure.reml {
        return Err(Error::Inference(
            "restricted likelihoods of different mean models are not comparable".into(),
        ));
    }
    let dof = exposure
        .zeta_hat
        .len()
        .saturating_sub(constant.zeta_hat.len());
    let raw = 2.0 * (exposure.loglik - constant.loglik);
    if raw < -1e-6 {
        return Err(Error::Fit(format!(
            "likelihood ratio statistic {raw} is negative: the larger model was not maximised"
        )));
    }
    let statistic = if dof == 0 { 0.0 } else { raw.max(0.0) };
    let p_value = if dof == 0 {
        1.0
    } else {
        let chi = ChiSquared::new(dof as f64).map_err(|e| Error::Inference(e.to_string()))?;
        chi.sf(statistic)
    };
    Ok(LrtResult {
        statistic,
        dof,
        p_value,
        loglik_constant: constant.loglik,
        loglik_exposure: exposure.loglik,
    })
}

/// Test `delta(1) = ... = delta(J-1)` by ML fits of both effect models.
pub fn lrt_exposure_heterogeneity(
    dataset: &Dataset,
    structure: Structure,
    opts: &FitOptions,
) -> Result<LrtResult> {
    let opts = FitOptions {
        reml: false,
        ..*opts
    };
    let c = fit_frame(
        &ModelFrame::new(dataset, EffectKind::Constant)?,
        structure,
        &opts,
    )?;
    let e = fit_frame(
        &ModelFrame::new(dataset, EffectKind::ExposureDependent)?,
        structure,
        &opts,
    )?;
    if !(c.converged && e.converged) {
        return Err(Error::Fit("a likelihood ratio fit did not converge".into()));
    }
    lrt_from_fits(&c, &e)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionTerm {
    pub name: String,
    pub estimate: f64,
    pub se: f64,
    pub t: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionReport {
    pub terms: Vec<RegressionTerm>,
    pub dof: usize,
    pub residual_variance: f64,
}

impl RegressionReport {
    pub fn term(&self, name: &str) -> Option<&RegressionTerm> {
        self.terms.iter().find(|t| t.name == name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecruitmentCheck {
    pub treatment_model: RegressionReport,
    pub exposure_model: RegressionReport,
}

fn ols_report(x: &DMatrix<f64>, y: &DVector<f64>, names: &[String]) -> Result<RegressionReport> {
    let (n, p) = (x.nrows(), x.ncols());
    if n <= p {
        return Err(Error::Validation(format!(
            "{n} cluster-periods cannot support {p} coefficients"
        )));
    }
    let xtx = x.transpose() * x;
    let xty = x.transpose() * y;
    let (beta, inv) = gls::solve_normal(&xtx, &xty, names).map_err(|e| match e {
        Error::RankDeficient { column } => {
            Error::Validation(format!("recruitment regression is collinear at `{column}`"))
        }
        other => other,
    })?;
    let resid = y - x * &beta;
    let dof = n - p;
    // exact fits (e.g. constant sizes) leave only rounding noise
    let s2 = if resid.amax() <= 1e-9 * (1.0 + y.amax()) {
        0.0
    } else {
        resid.dot(&resid) / dof as f64
    };
    let tdist =
        StudentsT::new(0.0, 1.0, dof as f64).map_err(|e| Error::Inference(e.to_string()))?;
    let terms = (0..p)
        .map(|k| {
            let se = (s2 * inv[(k, k)]).max(0.0).sqrt();
            let est = beta[k];
            let (t, p_value) = if se > 0.0 {
                let t = est / se;
                (t, 2.0 * tdist.cdf(-t.abs()))
            } else if est.abs() < 1e-9 * (1.0 + y.amax()) {
                (0.0, 1.0)
            } else {
                (f64::INFINITY.copysign(est), 0.0)
            };
            RegressionTerm {
                name: names[k].clone(),
                estimate: est,
                se,
                t,
                p_value,
            }
        })
        .collect();
    Ok(RegressionReport {
        terms,
        dof,
        residual_variance: s2,
    })
}

/// Regress cluster-period sizes on period dummies plus the treatment
/// indicator, and on period dummies plus exposure dummies.
pub fn recruitment_dependence_check(dataset: &Dataset) -> Result<RecruitmentCheck> {
    let design = &dataset.design;
    let (i_n, j) = (design.n_clusters(), design.n_periods());
    if j < 2 {
        return Err(Error::Validation(
            "at least two periods are required".into(),
        ));
    }
    let mut rows = Vec::with_capacity(i_n * j);
    let mut y = Vec::with_capacity(i_n * j);
    for i in 0..i_n {
        for p in 1..=j {
            rows.push((p, design.exposure(i, p).0));
            y.push(design.cell_size(i, p) as f64);
        }
    }
    let y = DVector::from_vec(y);
    let mut base: Vec<String> = vec!["intercept".into()];
    base.extend((2..=j).map(|p| format!("period{p}")));
    let build = |extra: usize, f: &dyn Fn(usize, usize, usize) -> f64| {
        DMatrix::from_fn(rows.len(), j + extra, |r, c| {
            let (p, s) = rows[r];
            if c == 0 {
                1.0
            } else if c < j {
                (p == c + 1) as u8 as f64
            } else {
                f(p, s, c - j)
            }
        })
    };
    let x1 = build(1, &|_, s, _| (s > 0) as u8 as f64);
    let mut n1 = base.clone();
    n1.push("treatment".into());
    let x2 = build(j - 1, &|_, s, k| (s == k + 1) as u8 as f64);
    let mut n2 = base;
    n2.extend((1..j).map(|s| format!("exposure{s}")));
    Ok(RecruitmentCheck {
        treatment_model: ols_report(&x1, &y, &n1)?,
        exposure_model: ols_report(&x2, &y, &n2)?,
    })
}
