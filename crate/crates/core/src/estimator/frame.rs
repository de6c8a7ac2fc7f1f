//! Fixed-effect design and cell-level sufficient statistics.
//!
//! Design rows of the working models are constant within a cluster-period, so
//! everything the likelihood needs from a cluster is, per non-empty cell, the
//! count, the outcome sum and the within-cell sum of squares.

use nalgebra::{DMatrix, DVector};

use crate::datagen::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EffectKind {
    Constant,
    ExposureDependent,
}

impl std::str::FromStr for EffectKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "constant" | "const" => Ok(EffectKind::Constant),
            "exposure" | "exposure-dependent" | "tv" => Ok(EffectKind::ExposureDependent),
            other => Err(Error::Parameter(format!("unknown effect kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellStats {
    pub period: usize,
    pub n: usize,
    pub sum: f64,
    /// Sum of squared deviations from the cell mean.
    pub ss_within: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterFrame {
    pub label: String,
    /// Non-empty cells in period order.
    pub cells: Vec<CellStats>,
    /// Design row of each cell in `cells`, `n_cells x p`.
    pub x: DMatrix<f64>,
    pub n_obs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelFrame {
    pub effect: EffectKind,
    pub n_periods: usize,
    /// Names of the retained columns.
    pub columns: Vec<String>,
    /// Names of columns dropped because no observation activates them.
    pub dropped: Vec<String>,
    pub clusters: Vec<ClusterFrame>,
    pub n_obs: usize,
    /// Position of the treatment or exposure block within the retained columns.
    pub effect_columns: Vec<usize>,
}

fn full_row(
    effect: EffectKind,
    n_periods: usize,
    period: usize,
    treated: bool,
    exposure: usize,
) -> Vec<f64> {
    let j = n_periods;
    let width = match effect {
        EffectKind::Constant => j + 1,
        EffectKind::ExposureDependent => 2 * j - 1,
    };
    let mut row = vec![0.0; width];
    row[0] = 1.0;
    if period >= 2 {
        row[period - 1] = 1.0;
    }
    match effect {
        EffectKind::Constant => {
            if treated {
                row[j] = 1.0;
            }
        }
        EffectKind::ExposureDependent => {
            if exposure >= 1 {
                row[j - 1 + exposure] = 1.0;
            }
        }
    }
    row
}

fn full_names(effect: EffectKind, n_periods: usize) -> Vec<String> {
    let mut names = vec!["intercept".to_string()];
    names.extend((2..=n_periods).map(|j| format!("period{j}")));
    match effect {
        EffectKind::Constant => names.push("treatment".into()),
        EffectKind::ExposureDependent => {
            names.extend((1..n_periods).map(|s| format!("exposure{s}")))
        }
    }
    names
}

impl ModelFrame {
    /// Intercept, period dummies `2..=J`, then a treatment column or exposure
    /// dummies `1..=J-1`. Columns no observation activates are dropped.
    pub fn new(dataset: &Dataset, effect: EffectKind) -> Result<Self> {
        let design = &dataset.design;
        let j = design.n_periods();
        if design.n_clusters() < 2 {
            return Err(Error::Validation(
                "at least two clusters are required".into(),
            ));
        }
        let names = full_names(effect, j);
        let mut active = vec![false; names.len()];
        let mut raw = Vec::with_capacity(design.n_clusters());
        for i in 0..design.n_clusters() {
            let recs = dataset.cluster_records(i);
            let mut cells = Vec::new();
            let mut rows = Vec::new();
            let mut start = 0;
            while start < recs.len() {
                let period = recs[start].period;
                let end = start
                    + recs[start..]
                        .iter()
                        .take_while(|r| r.period == period)
                        .count();
                let ys = &recs[start..end];
                let n = ys.len();
                let sum: f64 = ys.iter().map(|r| r.outcome).sum();
                let mean = sum / n as f64;
                let ss_within = ys.iter().map(|r| (r.outcome - mean).powi(2)).sum();
                let row = full_row(effect, j, period, ys[0].treatment, ys[0].exposure);
                for (a, v) in active.iter_mut().zip(&row) {
                    *a |= *v != 0.0;
                }
                cells.push(CellStats {
                    period,
                    n,
                    sum,
                    ss_within,
                });
                rows.push(row);
                start = end;
            }
            raw.push((cells, rows));
        }
        let keep: Vec<usize> = (0..names.len()).filter(|&c| active[c]).collect();
        let dropped = (0..names.len())
            .filter(|&c| !active[c])
            .map(|c| names[c].clone())
            .collect();
        let columns: Vec<String> = keep.iter().map(|&c| names[c].clone()).collect();
        let effect_columns = columns
            .iter()
            .enumerate()
            .filter(|(_, n)| n.starts_with("treatment") || n.starts_with("exposure"))
            .map(|(k, _)| k)
            .collect();
        let mut n_obs = 0;
        let clusters = raw
            .into_iter()
            .enumerate()
            .map(|(i, (cells, rows))| {
                let x = DMatrix::from_fn(cells.len(), keep.len(), |a, b| rows[a][keep[b]]);
                let n = cells.iter().map(|c| c.n).sum();
                n_obs += n;
                ClusterFrame {
                    label: dataset.cluster_labels[i].clone(),
                    cells,
                    x,
                    n_obs: n,
                }
            })
            .collect();
        Ok(Self {
            effect,
            n_periods: j,
            columns,
            dropped,
            clusters,
            n_obs,
            effect_columns,
        })
    }

    pub fn n_params(&self) -> usize {
        self.columns.len()
    }

    pub fn n_clusters(&self) -> usize {
        self.clusters.len()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }
}

/// Individual-level design matrix and response of one cluster, rows ordered
/// by period and then recruitment time. Used by the dense reference paths.
pub fn dense_cluster(
    dataset: &Dataset,
    frame: &ModelFrame,
    cluster: usize,
) -> (DMatrix<f64>, DVector<f64>) {
    let recs = dataset.cluster_records(cluster);
    let names = full_names(frame.effect, frame.n_periods);
    let keep: Vec<usize> = frame
        .columns
        .iter()
        .map(|c| names.iter().position(|n| n == c).expect("retained column"))
        .collect();
    let d = DMatrix::from_fn(recs.len(), keep.len(), |a, b| {
        let r = &recs[a];
        full_row(
            frame.effect,
            frame.n_periods,
            r.period,
            r.treatment,
            r.exposure,
        )[keep[b]]
    });
    let y = DVector::from_iterator(recs.len(), recs.iter().map(|r| r.outcome));
    (d, y)
}
