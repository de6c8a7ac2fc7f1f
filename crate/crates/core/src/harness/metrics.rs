use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use super::run::{ReplicateFailure, ReplicateRow, ScenarioRun};
use crate::error::{Error, Result};
use crate::inference::VcovKind;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KindMetrics {
    pub kind: VcovKind,
    pub avg_se: f64,
    pub coverage: f64,
    /// `sqrt(c (1 - c) / n_converged)`
    pub coverage_mc_se: f64,
}

/// Performance over the converged replicates of one estimand.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsSummary {
    pub scenario: String,
    pub working: String,
    pub estimand: String,
    pub truth: f64,
    pub n_reps: usize,
    pub n_converged: usize,
    pub n_failed: usize,
    pub bias: f64,
    /// Divisor `n`, not `n - 1`.
    pub empirical_sd: f64,
    pub kinds: Vec<KindMetrics>,
}

impl MetricsSummary {
    pub fn kind(&self, kind: VcovKind) -> Option<&KindMetrics> {
        self.kinds.iter().find(|k| k.kind == kind)
    }
}

/// Metrics for rows of a single estimand (any mix of variance kinds).
/// Non-converged replicates are counted but excluded.
pub fn summarize(rows: &[ReplicateRow], truth: f64) -> Result<MetricsSummary> {
    let first = rows
        .first()
        .ok_or_else(|| Error::Inference("no replicate rows to summarise".into()))?;
    if rows
        .iter()
        .any(|r| r.estimand != first.estimand || r.scenario != first.scenario)
    {
        return Err(Error::Inference(
            "rows mix several estimands or scenarios".into(),
        ));
    }
    let all: BTreeSet<usize> = rows.iter().map(|r| r.replicate).collect();
    let conv: Vec<&ReplicateRow> = rows.iter().filter(|r| r.converged).collect();
    // one estimate per converged replicate
    let mut seen = BTreeSet::new();
    let estimates: Vec<f64> = conv
        .iter()
        .filter(|r| seen.insert(r.replicate))
        .map(|r| r.estimate)
        .collect();
    let n = estimates.len();
    if n == 0 {
        return Err(Error::Inference(format!(
            "no converged replicates for {}",
            first.estimand
        )));
    }
    let mean = estimates.iter().sum::<f64>() / n as f64;
    let sd = (estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    let kinds = VcovKind::ALL
        .iter()
        .filter_map(|&kind| {
            let of: Vec<&&ReplicateRow> = conv.iter().filter(|r| r.vcov == kind.label()).collect();
            if of.is_empty() {
                return None;
            }
            let m = of.len() as f64;
            let coverage = of.iter().filter(|r| r.covered).count() as f64 / m;
            Some(KindMetrics {
                kind,
                avg_se: of.iter().map(|r| r.se).sum::<f64>() / m,
                coverage,
                coverage_mc_se: (coverage * (1.0 - coverage) / m).sqrt(),
            })
        })
        .collect();
    Ok(MetricsSummary {
        scenario: first.scenario.clone(),
        working: first.working.clone(),
        estimand: first.estimand.clone(),
        truth,
        n_reps: all.len(),
        n_converged: n,
        n_failed: 0,
        bias: mean - truth,
        empirical_sd: sd,
        kinds,
    })
}

impl ScenarioRun {
    /// One summary per estimand, counting failed replicates.
    pub fn summaries(&self) -> Result<Vec<MetricsSummary>> {
        self.estimands()
            .iter()
            .map(|e| {
                let rows: Vec<ReplicateRow> = self
                    .rows
                    .iter()
                    .filter(|r| &r.estimand == e)
                    .cloned()
                    .collect();
                let mut s = summarize(&rows, rows[0].truth)?;
                s.n_reps = self.n_reps;
                s.n_failed = self.failures.len();
                Ok(s)
            })
            .collect()
    }
}

pub fn write_replicates_csv(path: &Path, rows: &[ReplicateRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_replicates_csv(path: &Path) -> Result<Vec<ReplicateRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|x| x.map_err(Error::from)).collect()
}

pub fn read_failures_csv(path: &Path) -> Result<Vec<ReplicateFailure>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|x| x.map_err(Error::from)).collect()
}

pub fn write_failures_csv(path: &Path, failures: &[ReplicateFailure]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)?;
    if failures.is_empty() {
        w.write_record(["scenario", "replicate", "seed", "message"])?;
    }
    for f in failures {
        w.serialize(f)?;
    }
    w.flush()?;
    Ok(())
}

fn kind_cols(s: &MetricsSummary, kind: VcovKind) -> (f64, f64, f64) {
    s.kind(kind).map_or((f64::NAN, f64::NAN, f64::NAN), |k| {
        (k.avg_se, k.coverage, k.coverage_mc_se)
    })
}

pub fn write_summary_csv(path: &Path, summaries: &[MetricsSummary]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)?;
    w.write_record([
        "scenario",
        "working",
        "estimand",
        "truth",
        "n_reps",
        "n_converged",
        "n_failed",
        "bias",
        "sd",
        "V_Naive",
        "C_Naive",
        "V_RVE",
        "C_RVE",
        "V_RVE_MD",
        "C_RVE_MD",
        "mcse_C_RVE_MD",
    ])?;
    for s in summaries {
        let (vn, cn, _) = kind_cols(s, VcovKind::ModelBased);
        let (vr, cr, _) = kind_cols(s, VcovKind::Cr0);
        let (vm, cm, em) = kind_cols(s, VcovKind::Md);
        let mut rec = vec![s.scenario.clone(), s.working.clone(), s.estimand.clone()];
        rec.extend([s.truth].iter().map(|x| x.to_string()));
        rec.extend(
            [s.n_reps, s.n_converged, s.n_failed]
                .iter()
                .map(|x| x.to_string()),
        );
        rec.extend(
            [s.bias, s.empirical_sd, vn, cn, vr, cr, vm, cm, em]
                .iter()
                .map(|x| x.to_string()),
        );
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Markdown table with bias, empirical SD, then average SE and coverage (%)
/// for model-based, CR0 and MD variances.
pub fn summary_markdown(summaries: &[MetricsSummary]) -> String {
    let mut out = String::new();
    out.push_str("| Scenario | Working | Estimand | Bias | sd | V_Naive | C_Naive | V_RVE | C_RVE | V_RVE^MD | C_RVE^MD | MC SE | Converged |\n");
    out.push_str("|---|---|---|---:|---:|---:|---:|---:|---:|---:|---:|---:|---:|\n");
    for s in summaries {
        let (vn, cn, _) = kind_cols(s, VcovKind::ModelBased);
        let (vr, cr, _) = kind_cols(s, VcovKind::Cr0);
        let (vm, cm, em) = kind_cols(s, VcovKind::Md);
        let _ = writeln!(
            out,
            "| {} | {} | {} | {:.4} | {:.4} | {:.4} | {:.2} | {:.4} | {:.2} | {:.4} | {:.2} | {:.2} | {}/{} |",
            s.scenario,
            s.working,
            s.estimand,
            s.bias,
            s.empirical_sd,
            vn,
            100.0 * cn,
            vr,
            100.0 * cr,
            vm,
            100.0 * cm,
            100.0 * em,
            s.n_converged,
            s.n_reps,
        );
    }
    let excluded: usize = summaries
        .iter()
        .map(|s| s.n_reps - s.n_converged)
        .max()
        .unwrap_or(0);
    if excluded > 0 {
        let _ = writeln!(
            out,
            "\nNon-converged and failed replicates are excluded from every metric (at most {excluded} per row)."
        );
    }
    out
}
