use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::datagen::{default_cluster_labels, Dataset, Record};
use crate::trial::TrialDesign;

/// Small dataset with cluster and cluster-period effects. With `unequal`,
/// cell sizes vary between 1 and 3.
pub fn random_dataset(seed: u64, n_clusters: usize, n_periods: usize, unequal: bool) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seqs: Vec<usize> = (0..n_clusters).map(|i| i % (n_periods - 1) + 1).collect();
    let sizes: Vec<usize> = (0..n_clusters * n_periods)
        .map(|_| if unequal { rng.random_range(1..=3) } else { 2 })
        .collect();
    let design = TrialDesign::new(n_periods, seqs, sizes, false).unwrap();
    let mut recs = Vec::new();
    for i in 0..n_clusters {
        let a: f64 = 0.7 * rng.sample::<f64, _>(StandardNormal);
        for p in 1..=n_periods {
            let g: f64 = 0.4 * rng.sample::<f64, _>(StandardNormal);
            let (z, s) = design.treatment_and_exposure(i, p).unwrap();
            for _ in 0..design.cell_size(i, p) {
                let e: f64 = rng.sample(StandardNormal);
                let t = p as f64 - rng.random::<f64>();
                recs.push(Record {
                    cluster: i,
                    period: p,
                    time: t,
                    treatment: z,
                    exposure: s.0,
                    outcome: 0.3 * p as f64 + 0.5 * z as u8 as f64 + a + g + e,
                });
            }
        }
    }
    Dataset::new(design, recs, default_cluster_labels(n_clusters)).unwrap()
}
