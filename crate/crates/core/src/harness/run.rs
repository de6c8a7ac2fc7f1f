use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Scenario, MAX_FAILURE_RATE};
use crate::datagen::simulate_dataset;
use crate::error::{Error, Result};
use crate::estimator::{fit_ml, EffectKind, FitOptions};
use crate::inference::{effect_contrast, effect_inference, vcov, VcovKind};
use crate::streams::replicate_seed;

/// One estimand under one variance estimator in one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRow {
    pub scenario: String,
    pub working: String,
    pub replicate: usize,
    pub seed: u64,
    pub estimand: String,
    pub vcov: String,
    pub truth: f64,
    pub estimate: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub covered: bool,
    pub converged: bool,
    pub at_boundary: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateFailure {
    pub scenario: String,
    pub replicate: usize,
    pub seed: u64,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions {
    pub n_reps: usize,
    pub base_seed: u64,
    /// Worker threads; 0 uses every available core.
    pub threads: usize,
    pub fit: FitOptions,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            n_reps: super::DEFAULT_REPS,
            base_seed: 20_250_101,
            threads: 0,
            fit: FitOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioRun {
    pub scenario: Scenario,
    pub n_reps: usize,
    pub base_seed: u64,
    pub rows: Vec<ReplicateRow>,
    pub failures: Vec<ReplicateFailure>,
}

impl ScenarioRun {
    /// Estimand names in first-seen order.
    pub fn estimands(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.estimand) {
                out.push(r.estimand.clone());
            }
        }
        out
    }
}

/// Simulate, fit and summarise one replicate.
pub fn run_replicate(
    scenario: &Scenario,
    base_seed: u64,
    replicate: usize,
    fit_opts: &FitOptions,
) -> Result<Vec<ReplicateRow>> {
    let seed = replicate_seed(base_seed, replicate as u64);
    let design = scenario.design()?;
    let ds = simulate_dataset(&design, &scenario.plan()?, &scenario.generative()?, seed)?;
    let fit = fit_ml(&ds, scenario.working_model()?, fit_opts)?;
    let vcovs = VcovKind::ALL
        .iter()
        .map(|&k| vcov(&fit, k))
        .collect::<Result<Vec<_>>>()?;
    let effect = scenario.intervention();

    // (name, contrast, truth)
    let mut estimands = Vec::new();
    match fit.model.effect {
        EffectKind::Constant => {
            estimands.push(("delta".to_string(), effect_contrast(&fit), effect.average()))
        }
        EffectKind::ExposureDependent => {
            for &k in &fit.effect_columns {
                let s: usize = fit.columns[k]
                    .strip_prefix("exposure")
                    .and_then(|x| x.parse().ok())
                    .ok_or_else(|| {
                        Error::Fit(format!("unexpected effect column `{}`", fit.columns[k]))
                    })?;
                let mut c = nalgebra::DVector::zeros(fit.zeta_hat.len());
                c[k] = 1.0;
                estimands.push((format!("delta({s})"), c, effect.at(s)));
            }
            estimands.push(("Delta".to_string(), effect_contrast(&fit), effect.average()));
        }
    }

    let mut rows = Vec::with_capacity(estimands.len() * vcovs.len());
    for (name, c, truth) in &estimands {
        let est = c.dot(&fit.zeta_hat);
        for v in &vcovs {
            let inf = effect_inference(est, &v.matrix, c, fit.n_clusters(), scenario.level)?;
            rows.push(ReplicateRow {
                scenario: scenario.name.clone(),
                working: scenario.working.label().to_string(),
                replicate,
                seed,
                estimand: name.clone(),
                vcov: v.kind.label().to_string(),
                truth: *truth,
                estimate: est,
                se: inf.se,
                ci_low: inf.ci_low,
                ci_high: inf.ci_high,
                covered: inf.covers(*truth),
                converged: fit.converged,
                at_boundary: fit.at_boundary,
            });
        }
    }
    Ok(rows)
}

/// Run `n_reps` replicates. Output is identical for any thread count.
/// Replicates that error are recorded as failures; more than 5% failures
/// abort the run.
pub fn run_scenario(scenario: &Scenario, opts: &RunOptions) -> Result<ScenarioRun> {
    if opts.n_reps == 0 {
        return Err(Error::Config("at least one replicate is required".into()));
    }
    scenario.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.threads)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    let results: Vec<Result<Vec<ReplicateRow>>> = pool.install(|| {
        (0..opts.n_reps)
            .into_par_iter()
            .map(|p| run_replicate(scenario, opts.base_seed, p, &opts.fit))
            .collect()
    });

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (p, res) in results.into_iter().enumerate() {
        match res {
            Ok(r) => rows.extend(r),
            Err(e) => failures.push(ReplicateFailure {
                scenario: scenario.name.clone(),
                replicate: p,
                seed: replicate_seed(opts.base_seed, p as u64),
                message: e.to_string(),
            }),
        }
    }
    if failures.len() as f64 > MAX_FAILURE_RATE * opts.n_reps as f64 {
        let sample: Vec<String> = failures
            .iter()
            .take(5)
            .map(|f| format!("replicate {}: {}", f.replicate, f.message))
            .collect();
        return Err(Error::Fit(format!(
            "{} of {} replicates of {} failed (limit {:.0}%); first failures: {}",
            failures.len(),
            opts.n_reps,
            scenario.name,
            100.0 * MAX_FAILURE_RATE,
            sample.join("; ")
        )));
    }
    Ok(ScenarioRun {
        scenario: scenario.clone(),
        n_reps: opts.n_reps,
        base_seed: opts.base_seed,
        rows,
        failures,
    })
}
