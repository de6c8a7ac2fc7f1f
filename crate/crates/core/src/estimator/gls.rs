//! Profiled Gaussian likelihood for blocked working covariances.
//!
//! With `W = sigma^2 (I + E G~ E')`, `N` the diagonal of cell counts and
//! `R = N^(1/2)`, put `C = I + R G~ R` (one row per non-empty cell). Then
//!
//! * `log det(I + E G~ E') = log det C`
//! * `a' (I + E G~ E')^-1 b = sum of within-cell cross-products + a_c' C^-1 b_c`
//!   where `a_c` holds cell sums divided by `sqrt(n_j)`.
//!
//! Design rows are constant within a cell, so `D' W~^-1 D = X~' C^-1 X~` with
//! `X~ = R X`. The cost per cluster is `O(J^3)` whatever the cell sizes.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::covariance::{self, cholesky_factor, Structure, VarianceComponents};
use crate::error::{Error, Result};
use crate::estimator::frame::{ClusterFrame, ModelFrame};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Covariance parameters relative to the residual variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ratios {
    pub phi_alpha: f64,
    pub phi_gamma: f64,
    pub r: f64,
}

impl Ratios {
    pub fn from_components(vc: &VarianceComponents) -> Self {
        Self {
            phi_alpha: vc.tau_alpha_sq / vc.sigma_eps_sq,
            phi_gamma: vc.tau_gamma_sq / vc.sigma_eps_sq,
            r: vc.r,
        }
    }

    pub fn components(&self, structure: Structure, sigma_sq: f64) -> VarianceComponents {
        let mut vc = VarianceComponents {
            sigma_eps_sq: sigma_sq,
            ..Default::default()
        };
        match structure {
            Structure::Exch => vc.tau_alpha_sq = self.phi_alpha * sigma_sq,
            Structure::Ne => {
                vc.tau_alpha_sq = self.phi_alpha * sigma_sq;
                vc.tau_gamma_sq = self.phi_gamma * sigma_sq;
            }
            Structure::Dtd | Structure::Ctd => {
                vc.tau_gamma_sq = self.phi_gamma * sigma_sq;
                vc.r = self.r;
            }
        }
        vc
    }

    fn cell_matrix(&self, structure: Structure, n_periods: usize) -> Result<DMatrix<f64>> {
        covariance::cell_covariance(structure, &self.components(structure, 1.0), n_periods)
    }
}

/// Per-cluster reduced system at fixed ratios.
#[derive(Debug, Clone)]
pub struct ClusterSystem {
    pub logdet_c: f64,
    /// `X~' C^-1 X~`
    pub xcx: DMatrix<f64>,
    /// `X~' C^-1 y_c`
    pub xcy: DVector<f64>,
    /// `y' W~^-1 y`
    pub ycy: f64,
}

pub fn cluster_system(cf: &ClusterFrame, g: &DMatrix<f64>) -> Result<ClusterSystem> {
    let m = cf.cells.len();
    let sq: Vec<f64> = cf.cells.iter().map(|c| (c.n as f64).sqrt()).collect();
    let c = DMatrix::from_fn(m, m, |a, b| {
        let v = sq[a] * sq[b] * g[(cf.cells[a].period - 1, cf.cells[b].period - 1)];
        if a == b {
            1.0 + v
        } else {
            v
        }
    });
    let chol = Cholesky::<f64, Dyn>::new(c).ok_or(Error::NotPositiveDefinite {
        pivot: 0,
        value: f64::NAN,
    })?;
    let logdet_c = 2.0
        * chol
            .l_dirty()
            .diagonal()
            .iter()
            .map(|d| d.ln())
            .sum::<f64>();
    let xt = DMatrix::from_fn(m, cf.x.ncols(), |a, b| sq[a] * cf.x[(a, b)]);
    let yc = DVector::from_iterator(m, cf.cells.iter().zip(&sq).map(|(c, s)| c.sum / s));
    let cx = chol.solve(&xt);
    let cy = chol.solve(&yc);
    let ss_within: f64 = cf.cells.iter().map(|c| c.ss_within).sum();
    Ok(ClusterSystem {
        logdet_c,
        xcx: xt.transpose() * &cx,
        xcy: xt.transpose() * &cy,
        ycy: ss_within + yc.dot(&cy),
    })
}

/// GLS solution and profiled likelihood at fixed ratios.
#[derive(Debug, Clone)]
pub struct Profiled {
    pub zeta: DVector<f64>,
    pub sigma_sq: f64,
    pub loglik: f64,
    /// `sum X~' C^-1 X~`, i.e. `sigma^2` times the GLS information.
    pub bread_tilde: DMatrix<f64>,
    /// Weighted residual sum of squares `(y - D zeta)' W~^-1 (y - D zeta)`.
    pub quad: f64,
    pub logdet_c: f64,
    pub systems: Vec<ClusterSystem>,
}

/// Solve `b zeta = h` for symmetric positive definite `b`, naming the first
/// column that is (numerically) a combination of earlier ones.
pub fn solve_normal(
    b: &DMatrix<f64>,
    h: &DVector<f64>,
    columns: &[String],
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    // scale to unit diagonal so the pivot guard is relative per column
    let p = b.nrows();
    let d: Vec<f64> = (0..p).map(|k| b[(k, k)].max(0.0).sqrt()).collect();
    if let Some(k) = d.iter().position(|&x| x == 0.0) {
        return Err(Error::RankDeficient {
            column: columns.get(k).cloned().unwrap_or_else(|| k.to_string()),
        });
    }
    let scaled = DMatrix::from_fn(p, p, |a, c| b[(a, c)] / (d[a] * d[c]));
    let l = cholesky_factor(&scaled).map_err(|e| match e {
        Error::NotPositiveDefinite { pivot, .. } => Error::RankDeficient {
            column: columns
                .get(pivot)
                .cloned()
                .unwrap_or_else(|| pivot.to_string()),
        },
        other => other,
    })?;
    let l_inv = l
        .solve_lower_triangular(&DMatrix::identity(p, p))
        .ok_or_else(|| Error::RankDeficient {
            column: columns.last().cloned().unwrap_or_default(),
        })?;
    let inv_scaled = l_inv.transpose() * &l_inv;
    let inv = DMatrix::from_fn(p, p, |a, c| inv_scaled[(a, c)] / (d[a] * d[c]));
    let zeta = &inv * h;
    Ok((zeta, inv))
}

pub fn profile(
    frame: &ModelFrame,
    structure: Structure,
    ratios: &Ratios,
    reml: bool,
) -> Result<Profiled> {
    let g = ratios.cell_matrix(structure, frame.n_periods)?;
    let p = frame.n_params();
    let mut b = DMatrix::zeros(p, p);
    let mut h = DVector::zeros(p);
    let mut yy = 0.0;
    let mut logdet_c = 0.0;
    let mut systems = Vec::with_capacity(frame.n_clusters());
    for cf in &frame.clusters {
        let s = cluster_system(cf, &g)?;
        b += &s.xcx;
        h += &s.xcy;
        yy += s.ycy;
        logdet_c += s.logdet_c;
        systems.push(s);
    }
    let (zeta, b_inv) = solve_normal(&b, &h, &frame.columns)?;
    let quad = (yy - zeta.dot(&h)).max(0.0);
    let n = frame.n_obs as f64;
    let (sigma_sq, loglik) = if reml {
        let m = n - p as f64;
        if m <= 0.0 {
            return Err(Error::Fit("no residual degrees of freedom".into()));
        }
        let s2 = quad / m;
        let logdet_b = -logdet_spd(&b_inv)?;
        (
            s2,
            -0.5 * (m * LN_2PI + m * s2.ln() + logdet_c + logdet_b + m),
        )
    } else {
        let s2 = quad / n;
        (s2, -0.5 * (n * LN_2PI + n * s2.ln() + logdet_c + n))
    };
    if !(sigma_sq > 0.0) {
        return Err(Error::Fit("residual variance estimate is zero".into()));
    }
    Ok(Profiled {
        zeta,
        sigma_sq,
        loglik,
        bread_tilde: b,
        quad,
        logdet_c,
        systems,
    })
}

fn logdet_spd(m: &DMatrix<f64>) -> Result<f64> {
    let chol = Cholesky::<f64, Dyn>::new(m.clone()).ok_or(Error::NotPositiveDefinite {
        pivot: 0,
        value: f64::NAN,
    })?;
    Ok(2.0
        * chol
            .l_dirty()
            .diagonal()
            .iter()
            .map(|d| d.ln())
            .sum::<f64>())
}

/// ML log-likelihood at fully specified components, fixed effects at their
/// GLS values.
pub fn loglik_at(frame: &ModelFrame, structure: Structure, vc: &VarianceComponents) -> Result<f64> {
    vc.validate()?;
    let pr = profile(frame, structure, &Ratios::from_components(vc), false)?;
    let n = frame.n_obs as f64;
    let s2 = vc.sigma_eps_sq;
    Ok(-0.5 * (n * LN_2PI + n * s2.ln() + pr.logdet_c + pr.quad / s2))
}
