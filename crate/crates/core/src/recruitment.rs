//! Individual recruitment times within cluster-periods and cell-size rules.

use rand::Rng;
use rand_distr::{Distribution, Exp, StandardNormal};

use crate::error::{Error, Result};
use crate::streams::{self, Purpose};
use crate::trial::TrialDesign;

pub const DEFAULT_EXPONENTIAL_RATE: f64 = 1.5;

/// One of the three enrollment densities a cluster-period can follow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BasicPattern {
    Uniform,
    NormalRescaled,
    ExponentialRescaled,
}

impl BasicPattern {
    pub const ALL: [BasicPattern; 3] = [
        BasicPattern::Uniform,
        BasicPattern::NormalRescaled,
        BasicPattern::ExponentialRescaled,
    ];

    /// Uniform draw over the three patterns.
    pub fn draw<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self::ALL[rng.random_range(0..3)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PatternKind {
    Uniform,
    NormalRescaled,
    ExponentialRescaled,
    /// One basic pattern per cluster, held over all periods.
    ClusterMixed,
    /// One basic pattern per cluster-period.
    ClusterPeriodMixed,
}

impl PatternKind {
    pub fn basic(self) -> Option<BasicPattern> {
        match self {
            PatternKind::Uniform => Some(BasicPattern::Uniform),
            PatternKind::NormalRescaled => Some(BasicPattern::NormalRescaled),
            PatternKind::ExponentialRescaled => Some(BasicPattern::ExponentialRescaled),
            PatternKind::ClusterMixed | PatternKind::ClusterPeriodMixed => None,
        }
    }

    pub fn is_mixture(self) -> bool {
        self.basic().is_none()
    }

    pub fn label(self) -> &'static str {
        match self {
            PatternKind::Uniform => "uniform",
            PatternKind::NormalRescaled => "normal",
            PatternKind::ExponentialRescaled => "exponential",
            PatternKind::ClusterMixed => "cluster-mixed",
            PatternKind::ClusterPeriodMixed => "cluster-period-mixed",
        }
    }

    pub fn short_label(self) -> &'static str {
        match self {
            PatternKind::Uniform => "U",
            PatternKind::NormalRescaled => "N",
            PatternKind::ExponentialRescaled => "E",
            PatternKind::ClusterMixed => "C",
            PatternKind::ClusterPeriodMixed => "CP",
        }
    }
}

impl std::str::FromStr for PatternKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "u" | "uniform" => Ok(PatternKind::Uniform),
            "n" | "normal" => Ok(PatternKind::NormalRescaled),
            "e" | "exponential" => Ok(PatternKind::ExponentialRescaled),
            "c" | "cluster-mixed" | "cluster" => Ok(PatternKind::ClusterMixed),
            "cp" | "cluster-period-mixed" | "cluster-period" => Ok(PatternKind::ClusterPeriodMixed),
            other => Err(Error::Recruitment(format!(
                "unknown recruitment pattern `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecruitmentPattern {
    pub kind: PatternKind,
    /// Rate of the exponential draws before rescaling.
    pub rate: f64,
}

impl RecruitmentPattern {
    pub fn new(kind: PatternKind) -> Self {
        Self {
            kind,
            rate: DEFAULT_EXPONENTIAL_RATE,
        }
    }

    pub fn with_rate(kind: PatternKind, rate: f64) -> Result<Self> {
        if !(rate > 0.0 && rate.is_finite()) {
            return Err(Error::Recruitment(format!(
                "exponential rate must be positive, got {rate}"
            )));
        }
        Ok(Self { kind, rate })
    }

    /// Sample `n` recruitment times in period `period`, sorted ascending.
    ///
    /// Uniform times lie in `(j-1, j]`. Rescaled patterns map the sample
    /// minimum to `j-1` and the sample maximum to `j`.
    pub fn sample_cell_times<R: Rng + ?Sized>(
        &self,
        period: usize,
        n: usize,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        let basic = self.kind.basic().ok_or_else(|| {
            Error::Recruitment(format!(
                "`{}` is a mixture; resolve it to a basic pattern per cell first",
                self.kind.label()
            ))
        })?;
        sample_times(basic, self.rate, period, n, rng)
    }
}

pub(crate) fn sample_times<R: Rng + ?Sized>(
    pattern: BasicPattern,
    rate: f64,
    period: usize,
    n: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if period == 0 {
        return Err(Error::Recruitment("periods are numbered from 1".into()));
    }
    if !(rate > 0.0 && rate.is_finite()) {
        return Err(Error::Recruitment(format!(
            "exponential rate must be positive, got {rate}"
        )));
    }
    let lower = (period - 1) as f64;
    let upper = period as f64;
    let mut times = match pattern {
        BasicPattern::Uniform => (0..n)
            .map(|_| upper - rng.random::<f64>())
            .collect::<Vec<_>>(),
        BasicPattern::NormalRescaled | BasicPattern::ExponentialRescaled => {
            if n < 2 {
                return Err(Error::Recruitment(format!(
                    "rescaled patterns need at least 2 individuals per cell, got {n}"
                )));
            }
            let raw: Vec<f64> = if pattern == BasicPattern::NormalRescaled {
                (0..n)
                    .map(|_| rng.sample::<f64, _>(StandardNormal))
                    .collect()
            } else {
                let exp = Exp::new(rate).map_err(|e| Error::Recruitment(e.to_string()))?;
                (0..n).map(|_| exp.sample(rng)).collect()
            };
            let (lo, hi) = raw
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| {
                    (a.min(x), b.max(x))
                });
            let span = hi - lo;
            if !(span > 0.0) {
                return Err(Error::Recruitment(
                    "degenerate sample: all draws equal".into(),
                ));
            }
            raw.into_iter()
                .map(|x| {
                    if x == hi {
                        upper
                    } else {
                        lower + (x - lo) / span
                    }
                })
                .collect()
        }
    };
    times.sort_by(f64::total_cmp);
    Ok(times)
}

/// Basic pattern per cluster-period, row-major `I x J`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternMap {
    n_periods: usize,
    cells: Vec<BasicPattern>,
}

impl PatternMap {
    pub fn get(&self, cluster: usize, period: usize) -> BasicPattern {
        self.cells[cluster * self.n_periods + period - 1]
    }

    pub fn cells(&self) -> &[BasicPattern] {
        &self.cells
    }
}

/// Draw basic patterns for a mixture kind using a single stream, cluster-major.
pub fn assign_patterns<R: Rng + ?Sized>(
    design: &TrialDesign,
    kind: PatternKind,
    rng: &mut R,
) -> Result<PatternMap> {
    let j = design.n_periods();
    let cells = match kind {
        PatternKind::ClusterMixed => (0..design.n_clusters())
            .flat_map(|_| std::iter::repeat_n(BasicPattern::draw(rng), j))
            .collect(),
        PatternKind::ClusterPeriodMixed => (0..design.n_clusters() * j)
            .map(|_| BasicPattern::draw(rng))
            .collect(),
        _ => {
            return Err(Error::Recruitment(format!(
                "`{}` is not a mixture pattern",
                kind.label()
            )))
        }
    };
    Ok(PatternMap {
        n_periods: j,
        cells,
    })
}

/// Sizes under treatment: constant, or indexed by exposure time `s = 1, 2, ...`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TreatedSize {
    Constant(usize),
    ByExposure(Vec<usize>),
}

/// Condition- or exposure-dependent cluster-period sizes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SizeRule {
    pub control: usize,
    pub treated: TreatedSize,
}

impl SizeRule {
    pub fn constant(size: usize) -> Self {
        Self {
            control: size,
            treated: TreatedSize::Constant(size),
        }
    }

    pub fn by_condition(control: usize, treated: usize) -> Self {
        Self {
            control,
            treated: TreatedSize::Constant(treated),
        }
    }

    pub fn by_exposure(control: usize, treated: Vec<usize>) -> Self {
        Self {
            control,
            treated: TreatedSize::ByExposure(treated),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |k: usize| k >= 2;
        let treated_ok = match &self.treated {
            TreatedSize::Constant(k) => ok(*k),
            TreatedSize::ByExposure(v) => !v.is_empty() && v.iter().all(|&k| ok(k)),
        };
        if !ok(self.control) || !treated_ok {
            return Err(Error::Recruitment(
                "cluster-period sizes must be at least 2".into(),
            ));
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        match &self.treated {
            TreatedSize::Constant(k) if *k == self.control => format!("{k}"),
            TreatedSize::Constant(k) => format!("{}+{k}", self.control),
            TreatedSize::ByExposure(v) => format!(
                "{}+({})",
                self.control,
                v.iter()
                    .map(|k| k.to_string())
                    .collect::<Vec<_>>()
                    .join("/")
            ),
        }
    }
}

/// Concrete `K_ij` for every cell, row-major `I x J`.
pub fn resolve_sizes(design: &TrialDesign, rule: &SizeRule) -> Result<Vec<usize>> {
    rule.validate()?;
    let mut sizes = Vec::with_capacity(design.n_clusters() * design.n_periods());
    for i in 0..design.n_clusters() {
        for j in 1..=design.n_periods() {
            let s = design.exposure(i, j).0;
            let k = if s == 0 {
                rule.control
            } else {
                match &rule.treated {
                    TreatedSize::Constant(k) => *k,
                    TreatedSize::ByExposure(v) => *v.get(s - 1).ok_or_else(|| {
                        Error::Recruitment(format!("size rule has no entry for exposure time {s}"))
                    })?,
                }
            };
            sizes.push(k);
        }
    }
    Ok(sizes)
}

/// Patterns for control and treated cells, the exponential rate, and sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct RecruitmentPlan {
    pub control: PatternKind,
    pub treated: PatternKind,
    pub rate: f64,
    pub sizes: SizeRule,
}

impl RecruitmentPlan {
    pub fn new(pattern: PatternKind, sizes: SizeRule) -> Self {
        Self {
            control: pattern,
            treated: pattern,
            rate: DEFAULT_EXPONENTIAL_RATE,
            sizes,
        }
    }

    pub fn switching(control: PatternKind, treated: PatternKind, sizes: SizeRule) -> Self {
        Self {
            control,
            treated,
            rate: DEFAULT_EXPONENTIAL_RATE,
            sizes,
        }
    }

    pub fn with_rate(mut self, rate: f64) -> Result<Self> {
        if !(rate > 0.0 && rate.is_finite()) {
            return Err(Error::Recruitment(format!(
                "exponential rate must be positive, got {rate}"
            )));
        }
        self.rate = rate;
        Ok(self)
    }

    pub fn pattern_label(&self) -> String {
        if self.control == self.treated {
            self.control.short_label().to_string()
        } else {
            format!(
                "{}+{}",
                self.control.short_label(),
                self.treated.short_label()
            )
        }
    }

    /// Basic pattern of one cell, drawn from keyed streams so that the
    /// assignment of a cell does not depend on any other cell.
    pub fn cell_pattern(
        &self,
        design: &TrialDesign,
        replicate_seed: u64,
        cluster: usize,
        period: usize,
    ) -> BasicPattern {
        let kind = if design.exposure(cluster, period).is_treated() {
            self.treated
        } else {
            self.control
        };
        match kind {
            PatternKind::ClusterMixed => BasicPattern::draw(&mut streams::stream(
                replicate_seed,
                Purpose::PatternAssignment,
                cluster,
                0,
            )),
            PatternKind::ClusterPeriodMixed => BasicPattern::draw(&mut streams::stream(
                replicate_seed,
                Purpose::PatternAssignment,
                cluster,
                period,
            )),
            basic => basic.basic().expect("basic pattern"),
        }
    }

    /// Recruitment times for every cell of a cluster, concatenated in period order.
    pub fn sample_cluster_times(
        &self,
        design: &TrialDesign,
        replicate_seed: u64,
        cluster: usize,
    ) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(design.cluster_size(cluster));
        for j in 1..=design.n_periods() {
            let pattern = self.cell_pattern(design, replicate_seed, cluster, j);
            let mut rng = streams::stream(replicate_seed, Purpose::RecruitmentTimes, cluster, j);
            out.extend(sample_times(
                pattern,
                self.rate,
                j,
                design.cell_size(cluster, j),
                &mut rng,
            )?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn uniform_support_and_mean() {
        let p = RecruitmentPattern::new(PatternKind::Uniform);
        let t = p.sample_cell_times(3, 1000, &mut rng(1)).unwrap();
        assert!(t.iter().all(|&x| x > 2.0 && x <= 3.0));
        let mean = t.iter().sum::<f64>() / 1000.0;
        // sd of the mean is sqrt(1/12/1000) ~ 0.009
        assert!((mean - 2.5).abs() < 0.03, "mean {mean}");
        assert!(t.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn exponential_rescaled_hits_both_endpoints() {
        let p = RecruitmentPattern::new(PatternKind::ExponentialRescaled);
        let t = p.sample_cell_times(1, 100, &mut rng(2)).unwrap();
        assert_eq!(t[0], 0.0);
        assert_eq!(t[99], 1.0);
        let n = RecruitmentPattern::new(PatternKind::NormalRescaled);
        let t = n.sample_cell_times(4, 10, &mut rng(3)).unwrap();
        assert_eq!((t[0], t[9]), (3.0, 4.0));
    }

    #[test]
    fn exponential_rescaled_is_early_heavy() {
        let p = RecruitmentPattern::new(PatternKind::ExponentialRescaled);
        let t = p.sample_cell_times(1, 10_000, &mut rng(4)).unwrap();
        let median = (t[4999] + t[5000]) / 2.0;
        assert!(median < 0.5, "median {median}");
    }

    #[test]
    fn rejects_bad_inputs() {
        let p = RecruitmentPattern::new(PatternKind::NormalRescaled);
        assert!(p.sample_cell_times(1, 1, &mut rng(0)).is_err());
        assert!(RecruitmentPattern::with_rate(PatternKind::ExponentialRescaled, 0.0).is_err());
        assert!(RecruitmentPattern::with_rate(PatternKind::ExponentialRescaled, -1.0).is_err());
        let mixed = RecruitmentPattern::new(PatternKind::ClusterMixed);
        assert!(mixed.sample_cell_times(1, 10, &mut rng(0)).is_err());
        // a single uniform individual is fine
        assert_eq!(
            RecruitmentPattern::new(PatternKind::Uniform)
                .sample_cell_times(2, 1, &mut rng(0))
                .unwrap()
                .len(),
            1
        );
    }

    #[test]
    fn cluster_mixed_is_constant_over_periods() {
        let d = TrialDesign::standard(4, 5, 10).unwrap();
        let m = assign_patterns(&d, PatternKind::ClusterMixed, &mut rng(5)).unwrap();
        for i in 0..4 {
            assert!((2..=5).all(|j| m.get(i, j) == m.get(i, 1)));
        }
        let cp = assign_patterns(&d, PatternKind::ClusterPeriodMixed, &mut rng(5)).unwrap();
        assert_eq!(cp.cells().len(), 20);
        assert!(assign_patterns(&d, PatternKind::Uniform, &mut rng(5)).is_err());
    }

    #[test]
    fn mixture_draws_are_uniform_over_patterns() {
        let d = TrialDesign::standard(3000, 11, 2).unwrap();
        let m = assign_patterns(&d, PatternKind::ClusterMixed, &mut rng(6)).unwrap();
        // 3000 clusters x 10 further periods would be correlated, so count clusters
        // across ten independent designs to reach 30,000 draws.
        let mut counts = [0usize; 3];
        let mut total = 0;
        for seed in 0..10 {
            let m2 = if seed == 0 {
                m.clone()
            } else {
                assign_patterns(&d, PatternKind::ClusterMixed, &mut rng(100 + seed)).unwrap()
            };
            for i in 0..3000 {
                let k = BasicPattern::ALL
                    .iter()
                    .position(|&p| p == m2.get(i, 1))
                    .unwrap();
                counts[k] += 1;
                total += 1;
            }
        }
        assert_eq!(total, 30_000);
        for c in counts {
            let f = c as f64 / total as f64;
            assert!((f - 1.0 / 3.0).abs() < 0.01, "frequency {f}");
        }
    }

    #[test]
    fn resolve_sizes_examples() {
        let d = TrialDesign::standard(4, 5, 1).unwrap();
        let s = resolve_sizes(&d, &SizeRule::by_condition(25, 75)).unwrap();
        assert_eq!(&s[0..5], &[25, 75, 75, 75, 75]);
        let s = resolve_sizes(&d, &SizeRule::by_exposure(10, vec![100, 110, 130, 160])).unwrap();
        assert_eq!(&s[0..5], &[10, 100, 110, 130, 160]);
        assert_eq!(&s[15..20], &[10, 10, 10, 10, 100]);
        let s = resolve_sizes(&d, &SizeRule::constant(50)).unwrap();
        assert!(s.iter().all(|&k| k == 50));
        assert!(resolve_sizes(&d, &SizeRule::by_exposure(10, vec![100, 110])).is_err());
        assert!(resolve_sizes(&d, &SizeRule::constant(1)).is_err());
    }

    /// Two-sample Kolmogorov-Smirnov p-value (asymptotic).
    fn ks_p_value(a: &[f64], b: &[f64]) -> f64 {
        let sorted = |v: &[f64]| {
            let mut v = v.to_vec();
            v.sort_by(f64::total_cmp);
            v
        };
        let (a, b) = (sorted(a), sorted(b));
        let (mut i, mut j, mut d) = (0, 0, 0.0_f64);
        let (n, m) = (a.len() as f64, b.len() as f64);
        while i < a.len() && j < b.len() {
            // step over every copy of the smallest value so ties do not open a gap
            let x = a[i].min(b[j]);
            while i < a.len() && a[i] == x {
                i += 1;
            }
            while j < b.len() && b[j] == x {
                j += 1;
            }
            d = d.max((i as f64 / n - j as f64 / m).abs());
        }
        let en = (n * m / (n + m)).sqrt();
        let lambda = (en + 0.12 + 0.11 / en) * d;
        let mut p = 0.0;
        for k in 1..=100 {
            let k = k as f64;
            p += 2.0 * (-1.0f64).powf(k - 1.0) * (-2.0 * k * k * lambda * lambda).exp();
        }
        p.clamp(0.0, 1.0)
    }

    #[test]
    fn cluster_mixed_times_are_stationary_over_periods() {
        // Rescaling to the cell's own extremes gives every cell a random
        // scale, so a single cell is not an iid sample of the marginal law.
        // Pool small cells over independent replicates instead.
        let d = TrialDesign::standard(4, 5, 20).unwrap();
        let plan = RecruitmentPlan::new(PatternKind::ClusterMixed, SizeRule::constant(20));
        for i in 0..4 {
            let (mut first, mut last) = (Vec::new(), Vec::new());
            for seed in 0..500u64 {
                let t = plan.sample_cluster_times(&d, 1000 + seed, i).unwrap();
                first.extend_from_slice(&t[..20]);
                last.extend(t[4 * 20..].iter().map(|x| x - 4.0));
            }
            let p = ks_p_value(&first, &last);
            assert!(p > 0.01, "cluster {i}: p = {p}");
        }
    }

    #[test]
    fn switching_plan_uses_condition_patterns() {
        let d = TrialDesign::standard(8, 5, 20).unwrap();
        let plan = RecruitmentPlan::switching(
            PatternKind::Uniform,
            PatternKind::ExponentialRescaled,
            SizeRule::constant(20),
        );
        for i in 0..8 {
            for j in 1..=5 {
                let expected = if d.exposure(i, j).is_treated() {
                    BasicPattern::ExponentialRescaled
                } else {
                    BasicPattern::Uniform
                };
                assert_eq!(plan.cell_pattern(&d, 3, i, j), expected);
            }
        }
        let times = plan.sample_cluster_times(&d, 3, 0).unwrap();
        assert_eq!(times.len(), 100);
        for (c, chunk) in times.chunks(20).enumerate() {
            let j = (c + 1) as f64;
            assert!(chunk.iter().all(|&t| t >= j - 1.0 && t <= j));
        }
    }
}
