//! Outcome generation under the continuous-time decay model.
//!
//! `Y = mu + period effect + (delta(s) + v_i) Z + gamma + eps`, where `gamma`
//! is a cluster-level process correlated by `r^|t - t'|` in recruitment time.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::covariance::{self, Recruit, VarianceComponents};
use crate::error::{Error, Result};
use crate::recruitment::{self, RecruitmentPlan};
use crate::streams::{self, Purpose};
use crate::trial::TrialDesign;

/// Exposure-specific effects that average to zero over four exposure times.
pub const REFERENCE_EXPOSURE_EFFECTS: [f64; 4] = [-1.3768, 0.3831, 0.9785, 0.0152];

#[derive(Debug, Clone, PartialEq)]
pub enum PeriodEffectSpec {
    /// `mu + beta_j`, with `betas[0] = beta_1 = 0`.
    Discrete { mu: f64, betas: Vec<f64> },
    /// `mu + (quad t^2 + amp sin(freq pi t)) / J`.
    Continuous {
        mu: f64,
        quad: f64,
        amp: f64,
        freq: f64,
    },
}

impl PeriodEffectSpec {
    /// `beta_1 = 0`, `beta_j = 0.5 j^2 / J` for `j >= 2`.
    pub fn quadratic_discrete(n_periods: usize) -> Self {
        let j = n_periods as f64;
        let betas = (1..=n_periods)
            .map(|p| {
                if p == 1 {
                    0.0
                } else {
                    0.5 * (p * p) as f64 / j
                }
            })
            .collect();
        PeriodEffectSpec::Discrete { mu: 0.0, betas }
    }

    /// `(0.5 t^2 + sin(6 pi t)) / J`.
    pub fn seasonal_continuous() -> Self {
        PeriodEffectSpec::Continuous {
            mu: 0.0,
            quad: 0.5,
            amp: 1.0,
            freq: 6.0,
        }
    }

    pub fn is_continuous(&self) -> bool {
        matches!(self, PeriodEffectSpec::Continuous { .. })
    }

    pub fn validate(&self, n_periods: usize) -> Result<()> {
        if let PeriodEffectSpec::Discrete { betas, .. } = self {
            if betas.len() != n_periods {
                return Err(Error::Parameter(format!(
                    "discrete period effect needs {n_periods} values, got {}",
                    betas.len()
                )));
            }
            if betas[0] != 0.0 {
                return Err(Error::Parameter("beta_1 must be 0".into()));
            }
        }
        Ok(())
    }
}

/// Period effect at recruitment time `t` of period `period`.
pub fn eval_period_effect(
    spec: &PeriodEffectSpec,
    n_periods: usize,
    period: usize,
    t: f64,
) -> Result<f64> {
    if period == 0 || period > n_periods {
        return Err(Error::OutOfRange(format!(
            "period {period} (periods are 1..={n_periods})"
        )));
    }
    let lo = (period - 1) as f64;
    if !(t >= lo && t <= period as f64) {
        return Err(Error::OutOfRange(format!(
            "time {t} lies outside period {period}"
        )));
    }
    Ok(match spec {
        PeriodEffectSpec::Discrete { mu, betas } => {
            let b = betas.get(period - 1).ok_or_else(|| {
                Error::Parameter(format!(
                    "discrete period effect has no value for period {period}"
                ))
            })?;
            mu + b
        }
        PeriodEffectSpec::Continuous {
            mu,
            quad,
            amp,
            freq,
        } => mu + (quad * t * t + amp * (freq * std::f64::consts::PI * t).sin()) / n_periods as f64,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum InterventionEffect {
    Constant(f64),
    /// `delta(s)` for `s = 1..=J-1`.
    ExposureDependent(Vec<f64>),
}

impl InterventionEffect {
    pub fn at(&self, exposure: usize) -> f64 {
        match self {
            _ if exposure == 0 => 0.0,
            InterventionEffect::Constant(d) => *d,
            InterventionEffect::ExposureDependent(v) => v[exposure - 1],
        }
    }

    /// Exposure-time averaged effect.
    pub fn average(&self) -> f64 {
        match self {
            InterventionEffect::Constant(d) => *d,
            InterventionEffect::ExposureDependent(v) => v.iter().sum::<f64>() / v.len() as f64,
        }
    }

    pub fn is_exposure_dependent(&self) -> bool {
        matches!(self, InterventionEffect::ExposureDependent(_))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterventionEffectSpec {
    pub effect: InterventionEffect,
    /// Draw `v_i ~ N(0, tau_v^2)` per cluster.
    pub random_intervention: bool,
}

impl InterventionEffectSpec {
    pub fn validate(&self, n_periods: usize) -> Result<()> {
        if let InterventionEffect::ExposureDependent(v) = &self.effect {
            if v.len() != n_periods - 1 {
                return Err(Error::Parameter(format!(
                    "exposure-dependent effect needs {} values, got {}",
                    n_periods - 1,
                    v.len()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerativeSpec {
    pub period_effect: PeriodEffectSpec,
    pub intervention: InterventionEffectSpec,
    pub components: VarianceComponents,
    /// Apply time decay to same-period pairs too (default). When off, two
    /// individuals in the same period share the undecayed cluster-period
    /// covariance.
    pub within_period_decay: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Record {
    pub cluster: usize,
    pub period: usize,
    pub time: f64,
    pub treatment: bool,
    pub exposure: usize,
    pub outcome: f64,
}

/// Long-format individual records, sorted by cluster, period and time.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub design: TrialDesign,
    pub records: Vec<Record>,
    pub cluster_labels: Vec<String>,
}

impl Dataset {
    /// Build from records, checking them against the design.
    pub fn new(
        design: TrialDesign,
        mut records: Vec<Record>,
        cluster_labels: Vec<String>,
    ) -> Result<Self> {
        if cluster_labels.len() != design.n_clusters() {
            return Err(Error::Validation(
                "one label per cluster is required".into(),
            ));
        }
        records.sort_by(|a, b| {
            (a.cluster, a.period)
                .cmp(&(b.cluster, b.period))
                .then(a.time.total_cmp(&b.time))
        });
        let j = design.n_periods();
        let mut counts = vec![0usize; design.n_clusters() * j];
        for r in &records {
            if r.cluster >= design.n_clusters() || r.period == 0 || r.period > j {
                return Err(Error::Validation(format!(
                    "record outside the design: cluster {} period {}",
                    r.cluster, r.period
                )));
            }
            let (z, s) = design.cell_status(r.cluster, r.period);
            if z != r.treatment || s.0 != r.exposure {
                return Err(Error::Validation(format!(
                    "cluster {} period {}: treatment/exposure disagree with the design",
                    cluster_labels[r.cluster], r.period
                )));
            }
            counts[r.cluster * j + r.period - 1] += 1;
        }
        for i in 0..design.n_clusters() {
            for p in 1..=j {
                if counts[i * j + p - 1] != design.cell_size(i, p) {
                    return Err(Error::Validation(format!(
                        "cluster {} period {}: {} records but cell size {}",
                        cluster_labels[i],
                        p,
                        counts[i * j + p - 1],
                        design.cell_size(i, p)
                    )));
                }
            }
        }
        Ok(Self {
            design,
            records,
            cluster_labels,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records of one cluster.
    pub fn cluster_records(&self, cluster: usize) -> &[Record] {
        let start = self.records.partition_point(|r| r.cluster < cluster);
        let end = self.records.partition_point(|r| r.cluster <= cluster);
        &self.records[start..end]
    }

    /// Same data with every outcome replaced.
    pub fn with_outcomes(&self, f: impl Fn(&Record) -> f64) -> Self {
        let mut out = self.clone();
        for r in &mut out.records {
            r.outcome = f(r);
        }
        out
    }
}

pub fn default_cluster_labels(n: usize) -> Vec<String> {
    (1..=n).map(|i| i.to_string()).collect()
}

fn normals<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Simulate one trial. All randomness comes from keyed streams of
/// `replicate_seed` (see [`crate::streams`]).
pub fn simulate_dataset(
    design: &TrialDesign,
    plan: &RecruitmentPlan,
    gen: &GenerativeSpec,
    replicate_seed: u64,
) -> Result<Dataset> {
    let j = design.n_periods();
    gen.period_effect.validate(j)?;
    gen.intervention.validate(j)?;
    let vc = &gen.components;
    vc.validate()?;
    let sizes = recruitment::resolve_sizes(design, &plan.sizes)?;
    let design = design.clone().with_cell_sizes(sizes)?;
    let tau_g = vc.tau_gamma_sq.sqrt();
    let sigma = vc.sigma_eps_sq.sqrt();
    let tau_v = if gen.intervention.random_intervention {
        vc.tau_v_sq.sqrt()
    } else {
        0.0
    };

    let mut records = Vec::with_capacity(design.total_size());
    for i in 0..design.n_clusters() {
        let times = plan.sample_cluster_times(&design, replicate_seed, i)?;
        let periods: Vec<usize> = (1..=j)
            .flat_map(|p| std::iter::repeat_n(p, design.cell_size(i, p)))
            .collect();
        let n = times.len();
        let z = normals(
            &mut streams::stream(replicate_seed, Purpose::CorrelatedEffect, i, 0),
            n,
        );
        let noise: Vec<f64> = if gen.within_period_decay {
            let gamma = covariance::decay_path(&times, vc.r, &z)?;
            let eps = normals(
                &mut streams::stream(replicate_seed, Purpose::Residual, i, 0),
                n,
            );
            gamma
                .iter()
                .zip(&eps)
                .map(|(g, e)| tau_g * g + sigma * e)
                .collect()
        } else {
            let recruits: Vec<Recruit> = times
                .iter()
                .zip(&periods)
                .map(|(&time, &period)| Recruit {
                    period,
                    time,
                    treated: false,
                })
                .collect();
            let l = covariance::build_ctd_cov(vc, &recruits, false, false)?.cholesky()?;
            (&l * nalgebra::DVector::from_vec(z))
                .iter()
                .copied()
                .collect()
        };
        let v_i = if tau_v > 0.0 {
            let mut rng = streams::stream(replicate_seed, Purpose::RandomIntervention, i, 0);
            tau_v * rng.sample::<f64, _>(StandardNormal)
        } else {
            0.0
        };
        for k in 0..n {
            let (period, time) = (periods[k], times[k]);
            let (treated, s) = design.cell_status(i, period);
            let mut y = eval_period_effect(&gen.period_effect, j, period, time)? + noise[k];
            if treated {
                y += gen.intervention.effect.at(s.0) + v_i;
            }
            records.push(Record {
                cluster: i,
                period,
                time,
                treatment: treated,
                exposure: s.0,
                outcome: y,
            });
        }
    }
    let labels = default_cluster_labels(design.n_clusters());
    Ok(Dataset {
        design,
        records,
        cluster_labels: labels,
    })
}
