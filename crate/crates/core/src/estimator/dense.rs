//! Dense individual-level reference computations.
//!
//! These expand every working covariance to a full `K_i x K_i` matrix. They
//! are slow and exist to cross-check the structured algebra.

use nalgebra::{DMatrix, DVector};

use crate::covariance::{self, cholesky_factor, Structure, VarianceComponents};
use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::estimator::frame::{dense_cluster, ModelFrame};

/// Individual-level `(D_i, y_i, W_i^-1)` or similar per-cluster blocks.
pub type DenseCluster = (DMatrix<f64>, DVector<f64>, DMatrix<f64>);

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Working covariance for individuals observed in `periods` (one entry per row).
pub fn dense_working_cov(
    structure: Structure,
    vc: &VarianceComponents,
    periods: &[usize],
    n_periods: usize,
) -> Result<DMatrix<f64>> {
    let g = covariance::cell_covariance(structure, vc, n_periods)?;
    let n = periods.len();
    Ok(DMatrix::from_fn(n, n, |a, b| {
        g[(periods[a] - 1, periods[b] - 1)] + if a == b { vc.sigma_eps_sq } else { 0.0 }
    }))
}

/// `(D_i, Y_i, W_i)` for every cluster.
pub fn dense_inputs(
    dataset: &Dataset,
    frame: &ModelFrame,
    structure: Structure,
    vc: &VarianceComponents,
) -> Result<Vec<DenseCluster>> {
    (0..dataset.design.n_clusters())
        .map(|i| {
            let (d, y) = dense_cluster(dataset, frame, i);
            let periods: Vec<usize> = dataset
                .cluster_records(i)
                .iter()
                .map(|r| r.period)
                .collect();
            let w = dense_working_cov(structure, vc, &periods, frame.n_periods)?;
            Ok((d, y, w))
        })
        .collect()
}

pub fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    let l = cholesky_factor(m)?;
    let l_inv =
        l.solve_lower_triangular(&DMatrix::identity(n, n))
            .ok_or(Error::NotPositiveDefinite {
                pivot: 0,
                value: 0.0,
            })?;
    Ok(l_inv.transpose() * l_inv)
}

fn logdet_spd(m: &DMatrix<f64>) -> Result<f64> {
    let l = cholesky_factor(m)?;
    Ok(2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

/// GLS: `zeta = (sum D'W^-1 D)^-1 sum D'W^-1 Y` and its model-based variance
/// `(sum D'W^-1 D)^-1`. A singular normal matrix is reported with the index of
/// the first dependent column.
pub fn profiled_wls(clusters: &[DenseCluster]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let p = clusters
        .first()
        .map(|c| c.0.ncols())
        .ok_or_else(|| Error::Fit("no clusters".into()))?;
    let mut b = DMatrix::zeros(p, p);
    let mut h = DVector::zeros(p);
    for (d, y, w) in clusters {
        let wi = spd_inverse(w)?;
        let dtw = d.transpose() * wi;
        b += &dtw * d;
        h += &dtw * y;
    }
    let names: Vec<String> = (0..p).map(|k| format!("column {k}")).collect();
    crate::estimator::gls::solve_normal(&b, &h, &names)
}

/// ML log-likelihood with fixed effects at their GLS values.
pub fn loglik_dense(
    dataset: &Dataset,
    frame: &ModelFrame,
    structure: Structure,
    vc: &VarianceComponents,
) -> Result<f64> {
    let inputs = dense_inputs(dataset, frame, structure, vc)?;
    let (zeta, _) = profiled_wls(&inputs)?;
    let mut ll = 0.0;
    for (d, y, w) in &inputs {
        let r = y - d * &zeta;
        let wi = spd_inverse(w)?;
        ll -= 0.5 * (y.len() as f64 * LN_2PI + logdet_spd(w)? + (r.transpose() * wi * &r)[(0, 0)]);
    }
    Ok(ll)
}

/// Restricted log-likelihood.
pub fn reml_loglik_dense(
    dataset: &Dataset,
    frame: &ModelFrame,
    structure: Structure,
    vc: &VarianceComponents,
) -> Result<f64> {
    let inputs = dense_inputs(dataset, frame, structure, vc)?;
    let (zeta, vcov) = profiled_wls(&inputs)?;
    let p = zeta.len() as f64;
    let n: usize = inputs.iter().map(|c| c.1.len()).sum();
    let mut ll = -0.5 * ((n as f64 - p) * LN_2PI - logdet_spd(&vcov)?);
    for (d, y, w) in &inputs {
        let r = y - d * &zeta;
        let wi = spd_inverse(w)?;
        ll -= 0.5 * (logdet_spd(w)? + (r.transpose() * wi * &r)[(0, 0)]);
    }
    Ok(ll)
}

/// Ordinary least squares via the normal equations on the stacked data.
pub fn ols(dataset: &Dataset, frame: &ModelFrame) -> Result<DVector<f64>> {
    let vc = VarianceComponents::default();
    let inputs: Vec<_> = dense_inputs(dataset, frame, Structure::Exch, &vc)?;
    let p = frame.n_params();
    let n: usize = inputs.iter().map(|c| c.1.len()).sum();
    let mut d_all = DMatrix::zeros(n, p);
    let mut y_all = DVector::zeros(n);
    let mut row = 0;
    for (d, y, _) in &inputs {
        d_all.rows_mut(row, d.nrows()).copy_from(d);
        y_all.rows_mut(row, y.len()).copy_from(y);
        row += d.nrows();
    }
    let qr = d_all.clone().qr();
    let qty = qr.q().transpose() * &y_all;
    qr.r()
        .solve_upper_triangular(&qty)
        .ok_or_else(|| Error::RankDeficient {
            column: "unknown".into(),
        })
}
