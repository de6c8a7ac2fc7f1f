//! Scenario catalog, Monte Carlo runs and performance metrics.

mod config;
mod metrics;
mod run;

pub use config::{parse_config, parse_config_file};
pub use metrics::{
    read_failures_csv, read_replicates_csv, summarize, summary_markdown, write_failures_csv,
    write_replicates_csv, write_summary_csv, KindMetrics, MetricsSummary,
};
pub use run::{
    run_replicate, run_scenario, ReplicateFailure, ReplicateRow, RunOptions, ScenarioRun,
};

use crate::covariance::{
    components_from_design_params, DesignCorrelationParams, Structure, VarianceComponents,
};
use crate::datagen::{
    GenerativeSpec, InterventionEffect, InterventionEffectSpec, PeriodEffectSpec,
    REFERENCE_EXPOSURE_EFFECTS,
};
use crate::error::{Error, Result};
use crate::estimator::{EffectKind, WorkingModel};
use crate::recruitment::{PatternKind, RecruitmentPlan, SizeRule, DEFAULT_EXPONENTIAL_RATE};
use crate::trial::TrialDesign;

pub const DEFAULT_REPS: usize = 2000;
pub const MAX_FAILURE_RATE: f64 = 0.05;

/// One simulation setting: the true data-generating model, the working
/// model and the design.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    /// Catalog id (1-24) the setting was built from, if any.
    pub id: Option<usize>,
    pub name: String,
    pub continuous_period: bool,
    pub exposure_dependent: bool,
    pub random_intervention: bool,
    pub working: Structure,
    pub n_clusters: usize,
    pub n_periods: usize,
    pub sizes: SizeRule,
    pub control_pattern: PatternKind,
    pub treated_pattern: PatternKind,
    pub exponential_rate: f64,
    pub rho0: f64,
    pub rho1: f64,
    pub cac: f64,
    pub sigma_eps_sq: f64,
    /// Constant effect.
    pub delta: f64,
    /// `delta(s)`, `s = 1..=J-1`, for exposure-dependent settings.
    pub delta_s: Vec<f64>,
    pub within_period_decay: bool,
    pub level: f64,
}

/// `(continuous period effect, exposure-dependent effect, random intervention)`
/// for each block of three ids.
const CATALOG_FLAGS: [(bool, bool, bool); 8] = [
    (false, false, true),
    (true, false, true),
    (false, false, false),
    (true, false, false),
    (false, true, true),
    (true, true, true),
    (false, true, false),
    (true, true, false),
];

impl Scenario {
    /// Catalog scenario with the default desk settings: `I = 32`, `J = 5`,
    /// `K = 50`, cluster-period mixed recruitment, `rho0 = 0.01`,
    /// `rho1 = 0.1`, CAC 0.5 and a zero effect.
    pub fn catalog(id: usize) -> Result<Self> {
        if !(1..=24).contains(&id) {
            return Err(Error::Config(format!("scenario id must be 1-24, got {id}")));
        }
        let (continuous_period, exposure_dependent, random_intervention) =
            CATALOG_FLAGS[(id - 1) / 3];
        Ok(Self {
            id: Some(id),
            name: format!("S{id:02}"),
            continuous_period,
            exposure_dependent,
            random_intervention,
            working: Structure::WORKING[(id - 1) % 3],
            n_clusters: 32,
            n_periods: 5,
            sizes: SizeRule::constant(50),
            control_pattern: PatternKind::ClusterPeriodMixed,
            treated_pattern: PatternKind::ClusterPeriodMixed,
            exponential_rate: DEFAULT_EXPONENTIAL_RATE,
            rho0: 0.01,
            rho1: 0.1,
            cac: 0.5,
            sigma_eps_sq: 1.0,
            delta: 0.0,
            delta_s: if exposure_dependent {
                REFERENCE_EXPOSURE_EFFECTS.to_vec()
            } else {
                Vec::new()
            },
            within_period_decay: true,
            level: 0.95,
        })
    }

    pub fn all() -> Vec<Self> {
        (1..=24)
            .map(|id| Self::catalog(id).expect("catalog ids are valid"))
            .collect()
    }

    pub fn flags(&self) -> (bool, bool, bool, Structure) {
        (
            self.continuous_period,
            self.exposure_dependent,
            self.random_intervention,
            self.working,
        )
    }

    pub fn with_pattern(mut self, pattern: PatternKind) -> Self {
        self.control_pattern = pattern;
        self.treated_pattern = pattern;
        self
    }

    pub fn with_working(mut self, working: Structure) -> Self {
        self.working = working;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !self.working.is_working() {
            return Err(Error::Config(
                "the working structure must be exch, ne or dtd".into(),
            ));
        }
        if self.n_periods < 2 {
            return Err(Error::Config("at least two periods are required".into()));
        }
        if self.n_clusters < 3 {
            return Err(Error::Config(
                "t inference needs at least 3 clusters".into(),
            ));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::Config(format!(
                "confidence level must lie in (0, 1), got {}",
                self.level
            )));
        }
        if self.exposure_dependent && self.delta_s.len() != self.n_periods - 1 {
            return Err(Error::Config(format!(
                "delta_s needs {} values for {} periods, got {}",
                self.n_periods - 1,
                self.n_periods,
                self.delta_s.len()
            )));
        }
        self.sizes.validate()?;
        self.design()?;
        self.true_components()?;
        RecruitmentPlan::switching(
            self.control_pattern,
            self.treated_pattern,
            self.sizes.clone(),
        )
        .with_rate(self.exponential_rate)?;
        Ok(())
    }

    pub fn design(&self) -> Result<TrialDesign> {
        TrialDesign::standard(self.n_clusters, self.n_periods, self.sizes.control)
    }

    pub fn plan(&self) -> Result<RecruitmentPlan> {
        RecruitmentPlan::switching(
            self.control_pattern,
            self.treated_pattern,
            self.sizes.clone(),
        )
        .with_rate(self.exponential_rate)
    }

    /// CTD components of the true model.
    pub fn true_components(&self) -> Result<VarianceComponents> {
        let p = DesignCorrelationParams {
            rho0: self.rho0,
            rho1: self.rho1,
            cac: self.cac,
            sigma_eps_sq: self.sigma_eps_sq,
        };
        components_from_design_params(Structure::Ctd, &p, self.random_intervention)
    }

    pub fn intervention(&self) -> InterventionEffect {
        if self.exposure_dependent {
            InterventionEffect::ExposureDependent(self.delta_s.clone())
        } else {
            InterventionEffect::Constant(self.delta)
        }
    }

    pub fn generative(&self) -> Result<GenerativeSpec> {
        Ok(GenerativeSpec {
            period_effect: if self.continuous_period {
                PeriodEffectSpec::seasonal_continuous()
            } else {
                PeriodEffectSpec::quadratic_discrete(self.n_periods)
            },
            intervention: InterventionEffectSpec {
                effect: self.intervention(),
                random_intervention: self.random_intervention,
            },
            components: self.true_components()?,
            within_period_decay: self.within_period_decay,
        })
    }

    /// Working model: discrete periods, no random intervention and the same
    /// effect form as the truth.
    pub fn working_model(&self) -> Result<WorkingModel> {
        let effect = if self.exposure_dependent {
            EffectKind::ExposureDependent
        } else {
            EffectKind::Constant
        };
        WorkingModel::new(self.working, effect)
    }

    pub fn describe(&self) -> String {
        let yes = |b: bool| if b { "yes" } else { "no" };
        format!(
            "{}: continuous period {}, exposure-dependent {}, RI {}, working {}, I={} J={} K={} pattern {}, rho0={} rho1={} CAC={}",
            self.name,
            yes(self.continuous_period),
            yes(self.exposure_dependent),
            yes(self.random_intervention),
            self.working,
            self.n_clusters,
            self.n_periods,
            self.sizes.label(),
            self.plan().map(|p| p.pattern_label()).unwrap_or_default(),
            self.rho0,
            self.rho1,
            self.cac,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn catalog_is_complete_and_distinct() {
        let all = Scenario::all();
        assert_eq!(all.len(), 24);
        let flags: HashSet<_> = all.iter().map(|s| s.flags()).collect();
        assert_eq!(flags.len(), 24);
        for s in &all {
            s.validate().unwrap();
        }
    }

    #[test]
    fn catalog_rows() {
        let s = Scenario::catalog(4).unwrap();
        assert_eq!(s.flags(), (true, false, true, Structure::Exch));
        let s = Scenario::catalog(9).unwrap();
        assert_eq!(s.flags(), (false, false, false, Structure::Dtd));
        let s = Scenario::catalog(17).unwrap();
        assert_eq!(s.flags(), (true, true, true, Structure::Ne));
        assert_eq!(
            s.working_model().unwrap().effect,
            EffectKind::ExposureDependent
        );
        let s = Scenario::catalog(24).unwrap();
        assert_eq!(s.flags(), (true, true, false, Structure::Dtd));
        assert!(Scenario::catalog(0).is_err() && Scenario::catalog(25).is_err());
    }

    #[test]
    fn true_components_follow_design_params() {
        let vc = Scenario::catalog(4).unwrap().true_components().unwrap();
        let a = 0.01 / 0.99;
        assert!((vc.tau_gamma_sq - a).abs() < 1e-15);
        assert!((vc.tau_v_sq - (0.1 / 0.9 - a)).abs() < 1e-15);
        assert_eq!(vc.r, 0.5);
        let vc = Scenario::catalog(10).unwrap().true_components().unwrap();
        assert_eq!(vc.tau_v_sq, 0.0);
    }
}
