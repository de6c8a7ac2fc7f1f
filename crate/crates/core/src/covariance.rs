//! Variance components, ICC/CAC conversion and per-cluster covariance matrices.
//!
//! Working structures (EXCH, NE, DTD) are kept in blocked form: a `J x J`
//! cell-level matrix `G` plus residual variance, so that the covariance of the
//! stacked cluster vector is `sigma^2 I + E G E'` with `E` the cell incidence
//! matrix. The continuous-time decay structure is dense.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Structure {
    Exch,
    Ne,
    Dtd,
    Ctd,
}

impl Structure {
    pub const WORKING: [Structure; 3] = [Structure::Exch, Structure::Ne, Structure::Dtd];

    pub fn label(self) -> &'static str {
        match self {
            Structure::Exch => "EXCH",
            Structure::Ne => "NE",
            Structure::Dtd => "DTD",
            Structure::Ctd => "CTD",
        }
    }

    pub fn is_working(self) -> bool {
        self != Structure::Ctd
    }
}

impl std::fmt::Display for Structure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for Structure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "exch" => Ok(Structure::Exch),
            "ne" => Ok(Structure::Ne),
            "dtd" => Ok(Structure::Dtd),
            "ctd" => Ok(Structure::Ctd),
            other => Err(Error::Parameter(format!(
                "unknown correlation structure `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceComponents {
    pub tau_alpha_sq: f64,
    pub tau_gamma_sq: f64,
    pub tau_v_sq: f64,
    pub sigma_eps_sq: f64,
    /// Per-period (DTD) or per-unit-time (CTD) decay; 1 elsewhere.
    pub r: f64,
}

impl Default for VarianceComponents {
    fn default() -> Self {
        Self {
            tau_alpha_sq: 0.0,
            tau_gamma_sq: 0.0,
            tau_v_sq: 0.0,
            sigma_eps_sq: 1.0,
            r: 1.0,
        }
    }
}

impl VarianceComponents {
    pub fn validate(&self) -> Result<()> {
        let nonneg = |x: f64| x >= 0.0 && x.is_finite();
        if !(nonneg(self.tau_alpha_sq) && nonneg(self.tau_gamma_sq) && nonneg(self.tau_v_sq)) {
            return Err(Error::Parameter(format!(
                "variance components must be non-negative: {self:?}"
            )));
        }
        if !(self.sigma_eps_sq > 0.0 && self.sigma_eps_sq.is_finite()) {
            return Err(Error::Parameter(format!(
                "residual variance must be positive, got {}",
                self.sigma_eps_sq
            )));
        }
        if !(self.r > 0.0 && self.r <= 1.0) {
            return Err(Error::Parameter(format!(
                "decay r must lie in (0, 1], got {}",
                self.r
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DesignCorrelationParams {
    pub rho0: f64,
    pub rho1: f64,
    pub cac: f64,
    pub sigma_eps_sq: f64,
}

/// Invert the ICC/CAC relations to variance components.
///
/// `A = rho0 sigma^2 / (1 - rho0)` is the total cluster-level variance of a
/// control observation. EXCH puts all of it in `tau_alpha`, NE splits it by
/// CAC, and DTD/CTD put it in `tau_gamma` with `r = CAC`. With a random
/// intervention, `tau_v^2 = rho1 sigma^2 / (1 - rho1) - A`.
pub fn components_from_design_params(
    structure: Structure,
    p: &DesignCorrelationParams,
    with_random_intervention: bool,
) -> Result<VarianceComponents> {
    let in_unit = |x: f64| x > 0.0 && x < 1.0;
    if !in_unit(p.rho0) {
        return Err(Error::Parameter(format!(
            "rho0 must lie in (0, 1), got {}",
            p.rho0
        )));
    }
    if with_random_intervention && !in_unit(p.rho1) {
        return Err(Error::Parameter(format!(
            "rho1 must lie in (0, 1), got {}",
            p.rho1
        )));
    }
    if structure != Structure::Exch && !(p.cac > 0.0 && p.cac <= 1.0) {
        return Err(Error::Parameter(format!(
            "CAC must lie in (0, 1], got {}",
            p.cac
        )));
    }
    if !(p.sigma_eps_sq > 0.0 && p.sigma_eps_sq.is_finite()) {
        return Err(Error::Parameter(format!(
            "residual variance must be positive, got {}",
            p.sigma_eps_sq
        )));
    }
    let s2 = p.sigma_eps_sq;
    let a = p.rho0 * s2 / (1.0 - p.rho0);
    let mut vc = VarianceComponents {
        sigma_eps_sq: s2,
        ..Default::default()
    };
    match structure {
        Structure::Exch => vc.tau_alpha_sq = a,
        Structure::Ne => {
            vc.tau_alpha_sq = p.cac * a;
            vc.tau_gamma_sq = (1.0 - p.cac) * a;
        }
        Structure::Dtd | Structure::Ctd => {
            vc.tau_gamma_sq = a;
            vc.r = p.cac;
        }
    }
    if with_random_intervention {
        let tv = p.rho1 * s2 / (1.0 - p.rho1) - a;
        if tv < 0.0 {
            return Err(Error::Parameter(format!(
                "rho1 = {} below rho0 = {} implies a negative random-intervention variance",
                p.rho1, p.rho0
            )));
        }
        vc.tau_v_sq = tv;
    }
    Ok(vc)
}

/// Forward relations: control and intervention within-period ICC and the
/// control CAC implied by a set of components. EXCH reports CAC = 1.
pub fn design_params_from_components(
    structure: Structure,
    vc: &VarianceComponents,
) -> DesignCorrelationParams {
    let s2 = vc.sigma_eps_sq;
    let a = match structure {
        Structure::Exch => vc.tau_alpha_sq,
        Structure::Ne => vc.tau_alpha_sq + vc.tau_gamma_sq,
        Structure::Dtd | Structure::Ctd => vc.tau_gamma_sq,
    };
    let cac = match structure {
        Structure::Exch => 1.0,
        Structure::Ne => vc.tau_alpha_sq / (vc.tau_alpha_sq + vc.tau_gamma_sq),
        Structure::Dtd | Structure::Ctd => vc.r,
    };
    DesignCorrelationParams {
        rho0: a / (a + s2),
        rho1: (a + vc.tau_v_sq) / (a + vc.tau_v_sq + s2),
        cac,
        sigma_eps_sq: s2,
    }
}

/// `J x J` cell-level covariance `G` of a working structure.
pub fn cell_covariance(
    structure: Structure,
    vc: &VarianceComponents,
    n_periods: usize,
) -> Result<DMatrix<f64>> {
    let j = n_periods;
    Ok(match structure {
        Structure::Exch => DMatrix::from_element(j, j, vc.tau_alpha_sq),
        Structure::Ne => {
            let mut g = DMatrix::from_element(j, j, vc.tau_alpha_sq);
            for k in 0..j {
                g[(k, k)] += vc.tau_gamma_sq;
            }
            g
        }
        Structure::Dtd => {
            if !(vc.r > 0.0 && vc.r <= 1.0) {
                return Err(Error::Parameter(format!(
                    "decay r must lie in (0, 1], got {}",
                    vc.r
                )));
            }
            DMatrix::from_fn(j, j, |a, b| {
                vc.tau_gamma_sq * vc.r.powi(a.abs_diff(b) as i32)
            })
        }
        Structure::Ctd => {
            return Err(Error::Parameter(
                "CTD has no cell-level representation".into(),
            ));
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum CovarianceRepr {
    /// `sigma^2 I + E G E'`, rows ordered by period then individual.
    Blocked {
        cell_cov: DMatrix<f64>,
        cell_sizes: Vec<usize>,
        sigma_eps_sq: f64,
    },
    Dense(DMatrix<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterCovariance {
    pub structure: Structure,
    pub repr: CovarianceRepr,
}

impl ClusterCovariance {
    pub fn dim(&self) -> usize {
        match &self.repr {
            CovarianceRepr::Blocked { cell_sizes, .. } => cell_sizes.iter().sum(),
            CovarianceRepr::Dense(m) => m.nrows(),
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match &self.repr {
            CovarianceRepr::Dense(m) => m.clone(),
            CovarianceRepr::Blocked {
                cell_cov,
                cell_sizes,
                sigma_eps_sq,
            } => {
                let cell: Vec<usize> = cell_sizes
                    .iter()
                    .enumerate()
                    .flat_map(|(j, &k)| std::iter::repeat_n(j, k))
                    .collect();
                let n = cell.len();
                DMatrix::from_fn(n, n, |a, b| {
                    cell_cov[(cell[a], cell[b])] + if a == b { *sigma_eps_sq } else { 0.0 }
                })
            }
        }
    }

    pub fn cholesky(&self) -> Result<DMatrix<f64>> {
        cholesky_factor(&self.to_dense())
    }
}

/// Working covariance of one cluster under EXCH, NE or DTD.
pub fn build_working_cov(
    structure: Structure,
    vc: &VarianceComponents,
    design: &crate::trial::TrialDesign,
    cluster: usize,
) -> Result<ClusterCovariance> {
    if !structure.is_working() {
        return Err(Error::Parameter("CTD is not a working structure".into()));
    }
    vc.validate()?;
    if cluster >= design.n_clusters() {
        return Err(Error::OutOfRange(format!("cluster {cluster}")));
    }
    let j = design.n_periods();
    Ok(ClusterCovariance {
        structure,
        repr: CovarianceRepr::Blocked {
            cell_cov: cell_covariance(structure, vc, j)?,
            cell_sizes: (1..=j).map(|p| design.cell_size(cluster, p)).collect(),
            sigma_eps_sq: vc.sigma_eps_sq,
        },
    })
}

/// Per-individual inputs to the CTD covariance of one cluster.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Recruit {
    pub period: usize,
    pub time: f64,
    pub treated: bool,
}

/// Dense CTD covariance of one cluster.
///
/// Distinct individuals covary by `tau_gamma^2 r^|t - t'|` plus `tau_v^2` when
/// both are treated and the random intervention is on. With
/// `within_period_decay` off, two individuals in the same period get the
/// undecayed `tau_gamma^2`.
pub fn build_ctd_cov(
    vc: &VarianceComponents,
    recruits: &[Recruit],
    with_random_intervention: bool,
    within_period_decay: bool,
) -> Result<ClusterCovariance> {
    vc.validate()?;
    if let Some(k) = recruits
        .windows(2)
        .position(|w| w[1].time < w[0].time || w[1].period < w[0].period)
    {
        return Err(Error::Parameter(format!(
            "recruitment times are not sorted at position {}",
            k + 1
        )));
    }
    let n = recruits.len();
    let tv = if with_random_intervention {
        vc.tau_v_sq
    } else {
        0.0
    };
    let m = DMatrix::from_fn(n, n, |a, b| {
        let (x, y) = (&recruits[a], &recruits[b]);
        let decay = if !within_period_decay && x.period == y.period {
            1.0
        } else {
            vc.r.powf((x.time - y.time).abs())
        };
        let mut c = vc.tau_gamma_sq * decay;
        if x.treated && y.treated {
            c += tv;
        }
        if a == b {
            c += vc.sigma_eps_sq;
        }
        c
    });
    Ok(ClusterCovariance {
        structure: Structure::Ctd,
        repr: CovarianceRepr::Dense(m),
    })
}

/// Lower-triangular `L` with `L L' = a`.
///
/// Fails with the pivot index when a pivot drops below `1e-12` times the
/// largest diagonal entry.
pub fn cholesky_factor(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::Parameter(format!(
            "matrix is {}x{}, not square",
            n,
            a.ncols()
        )));
    }
    let max_diag = (0..n).map(|i| a[(i, i)]).fold(0.0_f64, f64::max);
    let guard = 1e-12 * max_diag;
    // rows[i] holds row i of L up to the diagonal
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    for i in 0..n {
        let mut row = vec![0.0; i + 1];
        for j in 0..i {
            row[j] = (a[(i, j)] - dot(&row[..j], &rows[j][..j])) / rows[j][j];
        }
        let d = a[(i, i)] - dot(&row[..i], &row[..i]);
        if !(d > guard) {
            return Err(Error::NotPositiveDefinite { pivot: i, value: d });
        }
        row[i] = d.sqrt();
        rows.push(row);
    }
    Ok(DMatrix::from_fn(n, n, |i, j| {
        if j <= i {
            rows[i][j]
        } else {
            0.0
        }
    }))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for k in 0..4 {
            acc[k] += a[4 * c + k] * b[4 * c + k];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for k in 4 * chunks..a.len() {
        s += a[k] * b[k];
    }
    s
}

/// Apply the Cholesky factor of the correlation `r^|t_k - t_m|` to `z`.
///
/// For sorted times this correlation is that of a stationary Ornstein-Uhlenbeck
/// path, whose factor is the Markov recursion
/// `x_{k+1} = rho_k x_k + sqrt(1 - rho_k^2) z_{k+1}` with `rho_k = r^(t_{k+1} - t_k)`.
/// Exact time ties give `rho_k = 1`, which the recursion handles where a dense
/// factorization of the singular correlation would not.
pub fn decay_path(times: &[f64], r: f64, z: &[f64]) -> Result<Vec<f64>> {
    if times.len() != z.len() {
        return Err(Error::Parameter(
            "times and innovations differ in length".into(),
        ));
    }
    if !(r > 0.0 && r <= 1.0) {
        return Err(Error::Parameter(format!(
            "decay r must lie in (0, 1], got {r}"
        )));
    }
    let mut out = Vec::with_capacity(z.len());
    let mut prev: Option<(f64, f64)> = None;
    for (&t, &e) in times.iter().zip(z) {
        let x = match prev {
            None => e,
            Some((tp, xp)) => {
                let gap = t - tp;
                if gap < 0.0 {
                    return Err(Error::Parameter("recruitment times are not sorted".into()));
                }
                let rho = r.powf(gap);
                rho * xp + (1.0 - rho * rho).max(0.0).sqrt() * e
            }
        };
        out.push(x);
        prev = Some((t, x));
    }
    Ok(out)
}

/// Dense form of the factor applied by [`decay_path`].
pub fn decay_factor(times: &[f64], r: f64) -> Result<DMatrix<f64>> {
    let n = times.len();
    let mut l = DMatrix::zeros(n, n);
    for m in 0..n {
        let mut e = vec![0.0; n];
        e[m] = 1.0;
        let col = decay_path(times, r, &e)?;
        for k in 0..n {
            l[(k, m)] = col[k];
        }
    }
    Ok(l)
}
