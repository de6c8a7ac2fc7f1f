//! Stepped wedge layout: clusters, crossover sequences and cluster-period sizes.
//!
//! Clusters are indexed from 0. Periods and sequences are indexed from 1 so that
//! a cluster in sequence `q` is under control for periods `1..=q` and treated
//! for periods `q+1..=J`.

use crate::error::{Error, Result};

/// Periods elapsed since the cluster adopted the intervention.
///
/// `0` marks a control cell; treated cells have `s = j - q >= 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Exposure(pub usize);

impl Exposure {
    pub fn is_treated(self) -> bool {
        self.0 > 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrialDesign {
    n_periods: usize,
    n_sequences: usize,
    sequence_of_cluster: Vec<usize>,
    /// Row-major `n_clusters x n_periods`.
    cell_sizes: Vec<usize>,
}

impl TrialDesign {
    /// Balanced complete design: `Q = J - 1` sequences with `I / Q` clusters
    /// each, assigned in cluster index order, and constant cell size `K`.
    pub fn standard(n_clusters: usize, n_periods: usize, cell_size: usize) -> Result<Self> {
        if n_periods < 2 {
            return Err(Error::Design(format!(
                "a stepped wedge design needs at least 2 periods, got {n_periods}"
            )));
        }
        if n_clusters == 0 {
            return Err(Error::Design("number of clusters must be positive".into()));
        }
        if cell_size == 0 {
            return Err(Error::Design("cluster-period size must be positive".into()));
        }
        let q = n_periods - 1;
        if !n_clusters.is_multiple_of(q) {
            return Err(Error::Design(format!(
                "{n_clusters} clusters cannot be split evenly over {q} sequences"
            )));
        }
        let per_sequence = n_clusters / q;
        let sequence_of_cluster = (0..n_clusters).map(|i| i / per_sequence + 1).collect();
        Ok(Self {
            n_periods,
            n_sequences: q,
            sequence_of_cluster,
            cell_sizes: vec![cell_size; n_clusters * n_periods],
        })
    }

    /// General constructor. `sequence_of_cluster[i]` is the last control period
    /// of cluster `i` and must lie in `1..=J-1`. Cells may be empty only when
    /// `allow_empty_cells` is set (observed data with missing cluster-periods).
    pub fn new(
        n_periods: usize,
        sequence_of_cluster: Vec<usize>,
        cell_sizes: Vec<usize>,
        allow_empty_cells: bool,
    ) -> Result<Self> {
        if n_periods < 2 {
            return Err(Error::Design(format!(
                "a stepped wedge design needs at least 2 periods, got {n_periods}"
            )));
        }
        if sequence_of_cluster.is_empty() {
            return Err(Error::Design("design has no clusters".into()));
        }
        if cell_sizes.len() != sequence_of_cluster.len() * n_periods {
            return Err(Error::Design(format!(
                "expected {} cell sizes, got {}",
                sequence_of_cluster.len() * n_periods,
                cell_sizes.len()
            )));
        }
        for (i, &q) in sequence_of_cluster.iter().enumerate() {
            if q == 0 || q >= n_periods {
                return Err(Error::Design(format!(
                    "cluster {i} has sequence {q}; sequences must lie in 1..={}",
                    n_periods - 1
                )));
            }
        }
        if !allow_empty_cells {
            if let Some(pos) = cell_sizes.iter().position(|&k| k == 0) {
                return Err(Error::Design(format!(
                    "cluster {} period {} has no individuals",
                    pos / n_periods,
                    pos % n_periods + 1
                )));
            }
        }
        Ok(Self {
            n_periods,
            n_sequences: n_periods - 1,
            sequence_of_cluster,
            cell_sizes,
        })
    }

    pub fn n_clusters(&self) -> usize {
        self.sequence_of_cluster.len()
    }

    pub fn n_periods(&self) -> usize {
        self.n_periods
    }

    pub fn n_sequences(&self) -> usize {
        self.n_sequences
    }

    pub fn sequence(&self, cluster: usize) -> usize {
        self.sequence_of_cluster[cluster]
    }

    pub fn clusters_in_sequence(&self, q: usize) -> usize {
        self.sequence_of_cluster.iter().filter(|&&s| s == q).count()
    }

    pub fn cell_size(&self, cluster: usize, period: usize) -> usize {
        self.cell_sizes[cluster * self.n_periods + period - 1]
    }

    /// `K_i.`: individuals in a cluster across all periods.
    pub fn cluster_size(&self, cluster: usize) -> usize {
        let start = cluster * self.n_periods;
        self.cell_sizes[start..start + self.n_periods].iter().sum()
    }

    pub fn total_size(&self) -> usize {
        self.cell_sizes.iter().sum()
    }

    /// Replace the cell sizes, e.g. with a resolved condition-dependent rule.
    pub fn with_cell_sizes(mut self, sizes: Vec<usize>) -> Result<Self> {
        if sizes.len() != self.cell_sizes.len() {
            return Err(Error::Design(format!(
                "expected {} cell sizes, got {}",
                self.cell_sizes.len(),
                sizes.len()
            )));
        }
        if sizes.contains(&0) {
            return Err(Error::Design(
                "every cluster-period needs at least one individual".into(),
            ));
        }
        self.cell_sizes = sizes;
        Ok(self)
    }

    /// Reassign clusters to sequences by permutation: cluster `i` takes the
    /// sequence previously held by cluster `perm[i]`. Cell sizes move with
    /// the sequence.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n = self.n_clusters();
        let mut seen = vec![false; n];
        if perm.len() != n
            || !perm
                .iter()
                .all(|&p| p < n && !std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::Design(
                "cluster permutation is not a permutation".into(),
            ));
        }
        let j = self.n_periods;
        let mut sizes = Vec::with_capacity(self.cell_sizes.len());
        for &p in perm {
            sizes.extend_from_slice(&self.cell_sizes[p * j..(p + 1) * j]);
        }
        Ok(Self {
            n_periods: j,
            n_sequences: self.n_sequences,
            sequence_of_cluster: perm.iter().map(|&p| self.sequence_of_cluster[p]).collect(),
            cell_sizes: sizes,
        })
    }

    /// Treatment indicator and exposure time for a cell.
    pub fn treatment_and_exposure(
        &self,
        cluster: usize,
        period: usize,
    ) -> Result<(bool, Exposure)> {
        self.check_cell(cluster, period)?;
        Ok(self.cell_status(cluster, period))
    }

    pub(crate) fn cell_status(&self, cluster: usize, period: usize) -> (bool, Exposure) {
        let q = self.sequence_of_cluster[cluster];
        let s = period.saturating_sub(q);
        (s > 0, Exposure(s))
    }

    pub fn exposure(&self, cluster: usize, period: usize) -> Exposure {
        self.cell_status(cluster, period).1
    }

    fn check_cell(&self, cluster: usize, period: usize) -> Result<()> {
        if cluster >= self.n_clusters() {
            return Err(Error::OutOfRange(format!(
                "cluster {cluster} (design has {})",
                self.n_clusters()
            )));
        }
        if period == 0 || period > self.n_periods {
            return Err(Error::OutOfRange(format!(
                "period {period} (periods are 1..={})",
                self.n_periods
            )));
        }
        Ok(())
    }
}
