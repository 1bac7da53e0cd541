//! Monte-Carlo ensembles of exactly solved sampled MDPs and their
//! statistical comparison with DMFP theory.
//!
//! Replicate `k` samples its MDP with `derive_replicate_seed(master, k)`.
//! Replicates are grouped into fixed blocks of [`BLOCK`] consecutive indices;
//! each block is accumulated in index order and blocks are merged in index
//! order, so the statistics are bitwise identical for any number of workers.

use serde::{Deserialize, Serialize};

use crate::bellman::{solve_policy_q_observed, solve_q_observed};
use crate::dmfp::{DmfpMode, DmfpTrajectory};
use crate::error::{DmfpError, Result};
use crate::numerics::{std_normal_cdf, std_normal_quantile, MomentAccumulator};
use crate::parallel;
use crate::sampler::{derive_replicate_seed, mix64, sample_mdp_unchecked, Rng};
use crate::types::{validate_prior, MomentField, PriorSpec, QTable};

/// Replicates accumulated together before merging.
pub const BLOCK: usize = 8;
/// Blocks in flight at once; bounds peak memory of per-block accumulators.
const WAVE: usize = 16;
/// Theory magnitudes below this get no relative error.
pub const REL_ERR_FLOOR: f64 = 1e-9;
/// Default number of `(s, a)` pairs whose raw converged samples are kept.
pub const DEFAULT_RETAINED: usize = 32;

pub type Pair = (usize, usize);

/// Every iteration up to 10, then powers of two up to `max_iters`.
pub fn default_snapshots(max_iters: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (1..=max_iters.min(10)).collect();
    let mut p = 16;
    while p <= max_iters {
        out.push(p);
        p *= 2;
    }
    out
}

/// `count` distinct `(s, a)` pairs chosen by a seeded partial shuffle
/// (all pairs, in order, if `count` covers them).
pub fn default_retained_pairs(
    num_states: usize,
    num_actions: usize,
    count: usize,
    seed: u64,
) -> Vec<Pair> {
    let total = num_states * num_actions;
    let mut idx: Vec<usize> = (0..total).collect();
    if count < total {
        let mut rng = Rng::seed_from_u64(mix64(seed ^ 0x7265_7461_696e_6564));
        for i in 0..count {
            let j = i + rng.below(total - i);
            idx.swap(i, j);
        }
        idx.truncate(count);
    }
    idx.into_iter()
        .map(|i| (i / num_actions, i % num_actions))
        .collect()
}

/// `count` distinct unordered pairs drawn from `pairs`, seeded.
pub fn random_pair_pairs(pairs: &[Pair], count: usize, seed: u64) -> Vec<(Pair, Pair)> {
    let n = pairs.len();
    let available = n * n.saturating_sub(1) / 2;
    let count = count.min(available);
    let mut rng = Rng::seed_from_u64(mix64(seed ^ 0x636f_7272));
    let mut chosen = std::collections::BTreeSet::new();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let i = rng.below(n);
        let j = rng.below(n);
        if i == j {
            continue;
        }
        let key = (i.min(j), i.max(j));
        if chosen.insert(key) {
            out.push((pairs[key.0], pairs[key.1]));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleConfig {
    pub replicates: usize,
    /// Index of the first replicate; an ensemble over `[k0, k0 + K)` merged
    /// with one over `[0, k0)` covers the same MDPs as one over `[0, k0 + K)`.
    pub first_replicate: usize,
    pub master_seed: u64,
    /// Iterates `Q^n` to record, strictly increasing, `n >= 1`.
    pub snapshots: Vec<usize>,
    pub retain_pairs: Vec<Pair>,
    pub eps: f64,
    pub max_iters: usize,
    pub mode: DmfpMode,
}

/// Streaming per-`(s, a)` moments of the ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleStats {
    pub num_states: usize,
    pub num_actions: usize,
    pub replicates: usize,
    pub snapshots: Vec<usize>,
    /// `[snapshot][pair]` accumulators of `Q^n`.
    pub snapshot_moments: Vec<Vec<MomentAccumulator>>,
    /// Accumulators of the converged table.
    pub final_moments: Vec<MomentAccumulator>,
    pub retain_pairs: Vec<Pair>,
    /// `[retained pair][replicate]` converged Q-values, in replicate order.
    pub retained: Vec<Vec<f64>>,
    /// Replicate indices whose solve hit `max_iters`.
    pub non_converged: Vec<usize>,
    pub iterations: MomentAccumulator,
}

impl EnsembleStats {
    fn empty(num_states: usize, num_actions: usize, snapshots: &[usize], retain: &[Pair]) -> Self {
        let n_sa = num_states * num_actions;
        EnsembleStats {
            num_states,
            num_actions,
            replicates: 0,
            snapshots: snapshots.to_vec(),
            snapshot_moments: vec![vec![MomentAccumulator::new(); n_sa]; snapshots.len()],
            final_moments: vec![MomentAccumulator::new(); n_sa],
            retain_pairs: retain.to_vec(),
            retained: vec![Vec::new(); retain.len()],
            non_converged: Vec::new(),
            iterations: MomentAccumulator::new(),
        }
    }

    /// Folds in an ensemble over other replicates of the same prior and
    /// schedule. Retained samples of `other` are appended after ours.
    pub fn merge(&mut self, other: EnsembleStats) -> Result<()> {
        if (self.num_states, self.num_actions) != (other.num_states, other.num_actions)
            || self.snapshots != other.snapshots
            || self.retain_pairs != other.retain_pairs
        {
            return Err(DmfpError::ShapeMismatch(
                "ensembles differ in shape, snapshots or retained pairs".into(),
            ));
        }
        self.absorb(other);
        Ok(())
    }

    fn absorb(&mut self, other: EnsembleStats) {
        self.replicates += other.replicates;
        for (mine, theirs) in self
            .snapshot_moments
            .iter_mut()
            .zip(&other.snapshot_moments)
        {
            for (a, b) in mine.iter_mut().zip(theirs) {
                a.merge(b);
            }
        }
        for (a, b) in self.final_moments.iter_mut().zip(&other.final_moments) {
            a.merge(b);
        }
        for (mine, theirs) in self.retained.iter_mut().zip(other.retained) {
            mine.extend(theirs);
        }
        self.non_converged.extend(other.non_converged);
        self.iterations.merge(&other.iterations);
    }

    fn record(
        &mut self,
        index: usize,
        snaps: &[QTable],
        last: &QTable,
        iterations: usize,
        converged: bool,
    ) {
        self.replicates += 1;
        for (accs, q) in self.snapshot_moments.iter_mut().zip(snaps) {
            for (acc, &v) in accs.iter_mut().zip(&q.values) {
                acc.push(v);
            }
        }
        for (acc, &v) in self.final_moments.iter_mut().zip(&last.values) {
            acc.push(v);
        }
        for (store, &(s, a)) in self.retained.iter_mut().zip(&self.retain_pairs) {
            store.push(last.get(s, a));
        }
        if !converged {
            self.non_converged.push(index);
        }
        self.iterations.push(iterations as f64);
    }

    /// Empirical `(mean, sample variance)` tables of a set of accumulators.
    pub fn moments(accs: &[MomentAccumulator]) -> (Vec<f64>, Vec<f64>) {
        accs.iter().map(|a| (a.mean, a.sample_variance())).unzip()
    }

    pub fn final_field(&self) -> MomentField {
        let (mean, var) = Self::moments(&self.final_moments);
        MomentField {
            num_states: self.num_states,
            num_actions: self.num_actions,
            mean,
            var,
        }
    }

    pub fn snapshot_field(&self, i: usize) -> MomentField {
        let (mean, var) = Self::moments(&self.snapshot_moments[i]);
        MomentField {
            num_states: self.num_states,
            num_actions: self.num_actions,
            mean,
            var,
        }
    }

    pub fn retained_samples(&self, pair: Pair) -> Option<&[f64]> {
        self.retain_pairs
            .iter()
            .position(|&p| p == pair)
            .map(|i| self.retained[i].as_slice())
    }
}

fn check_ensemble(prior: &PriorSpec, cfg: &EnsembleConfig) -> Result<()> {
    validate_prior(prior).map_err(DmfpError::InvalidPrior)?;
    if cfg.replicates < 2 {
        return Err(DmfpError::InvalidArgument(
            "an ensemble needs at least 2 replicates".into(),
        ));
    }
    if cfg.snapshots.first() == Some(&0) || cfg.snapshots.windows(2).any(|w| w[0] >= w[1]) {
        return Err(DmfpError::InvalidArgument(
            "snapshot iterations must be strictly increasing and >= 1".into(),
        ));
    }
    if let Some(&(s, a)) = cfg
        .retain_pairs
        .iter()
        .find(|(s, a)| *s >= prior.num_states || *a >= prior.num_actions)
    {
        return Err(DmfpError::InvalidArgument(format!(
            "retained pair ({s}, {a}) out of range"
        )));
    }
    if let DmfpMode::Policy(pi) = &cfg.mode {
        if pi.num_states() != prior.num_states || pi.num_actions != prior.num_actions {
            return Err(DmfpError::ShapeMismatch(
                "policy does not match prior".into(),
            ));
        }
    }
    Ok(())
}

fn run_replicate(
    prior: &PriorSpec,
    cfg: &EnsembleConfig,
    index: usize,
    stats: &mut EnsembleStats,
) -> Result<()> {
    let mdp = sample_mdp_unchecked(prior, derive_replicate_seed(cfg.master_seed, index as u64));
    let mut snaps: Vec<QTable> = Vec::with_capacity(cfg.snapshots.len());
    let mut next = 0;
    let observe = |n: usize, q: &QTable| {
        if next < cfg.snapshots.len() && cfg.snapshots[next] == n {
            snaps.push(q.clone());
            next += 1;
        }
    };
    let report = match &cfg.mode {
        DmfpMode::Optimal => solve_q_observed(&mdp, cfg.eps, cfg.max_iters, observe)?,
        DmfpMode::Policy(pi) => solve_policy_q_observed(&mdp, pi, cfg.eps, cfg.max_iters, observe)?,
    };
    // snapshots past convergence take the converged table
    while snaps.len() < cfg.snapshots.len() {
        snaps.push(report.q.clone());
    }
    stats.record(
        index,
        &snaps,
        &report.q,
        report.iterations,
        report.converged,
    );
    Ok(())
}

/// Runs `cfg.replicates` sampled MDPs through value iteration (or policy
/// evaluation) and accumulates per-`(s, a)` moments at every snapshot and at
/// convergence.
pub fn run_ensemble(prior: &PriorSpec, cfg: &EnsembleConfig) -> Result<EnsembleStats> {
    check_ensemble(prior, cfg)?;
    let (n, na) = (prior.num_states, prior.num_actions);
    let mut total = EnsembleStats::empty(n, na, &cfg.snapshots, &cfg.retain_pairs);
    let blocks = cfg.replicates.div_ceil(BLOCK);
    let mut start_block = 0;
    while start_block < blocks {
        let wave = WAVE.min(blocks - start_block);
        let results = parallel::map_range(wave, |w| {
            let b = start_block + w;
            let mut stats = EnsembleStats::empty(n, na, &cfg.snapshots, &cfg.retain_pairs);
            for offset in b * BLOCK..((b + 1) * BLOCK).min(cfg.replicates) {
                run_replicate(prior, cfg, cfg.first_replicate + offset, &mut stats)?;
            }
            Ok::<_, DmfpError>(stats)
        });
        for r in results {
            total.absorb(r?);
        }
        start_block += wave;
    }
    Ok(total)
}

/// Theory moments at the ensemble's snapshot iterations plus the fixed point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheorySeries {
    pub snapshots: Vec<usize>,
    pub fields: Vec<MomentField>,
    pub fixed_point: MomentField,
}

impl TheorySeries {
    pub fn from_trajectory(trajectory: &DmfpTrajectory, snapshots: &[usize]) -> Self {
        TheorySeries {
            snapshots: snapshots.to_vec(),
            fields: snapshots
                .iter()
                .map(|&n| trajectory.at(n).clone())
                .collect(),
            fixed_point: trajectory.last().clone(),
        }
    }
}

/// One `(iteration, s, a)` comparison. `iteration == -1` is the converged
/// table against the theory fixed point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub iteration: i64,
    pub s: usize,
    pub a: usize,
    pub emp_mean: f64,
    pub emp_var: f64,
    pub theory_mean: f64,
    pub theory_var: f64,
    pub rel_err_mean: Option<f64>,
    pub rel_err_var: Option<f64>,
}

/// Error quantiles across `(s, a)` at one iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotSummary {
    pub iteration: i64,
    pub mean_abs_err_mean: f64,
    pub mean_abs_err_var: f64,
    pub median_rel_err_mean: Option<f64>,
    pub max_rel_err_mean: Option<f64>,
    pub median_rel_err_var: Option<f64>,
    pub max_rel_err_var: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KsRecord {
    pub s: usize,
    pub a: usize,
    pub statistic: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationSummary {
    pub pairs: Vec<(Pair, Pair)>,
    pub correlations: Vec<f64>,
    pub median_abs: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub seed: u64,
    pub config_digest: String,
    pub wall_time_secs: f64,
    pub replicates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub rows: Vec<ComparisonRow>,
    pub summaries: Vec<SnapshotSummary>,
    pub ks: Vec<KsRecord>,
    pub qq: Vec<(f64, f64)>,
    pub correlation: Option<CorrelationSummary>,
    pub metadata: RunMetadata,
}

fn relative(theory: f64, emp: f64) -> Option<f64> {
    (theory.abs() > REL_ERR_FLOOR).then(|| (emp - theory).abs() / theory.abs())
}

fn median(mut xs: Vec<f64>) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    Some(if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    })
}

fn compare_field(
    iteration: i64,
    emp: &MomentField,
    theory: &MomentField,
) -> (Vec<ComparisonRow>, SnapshotSummary) {
    let na = emp.num_actions;
    let rows: Vec<ComparisonRow> = (0..emp.mean.len())
        .map(|i| ComparisonRow {
            iteration,
            s: i / na,
            a: i % na,
            emp_mean: emp.mean[i],
            emp_var: emp.var[i],
            theory_mean: theory.mean[i],
            theory_var: theory.var[i],
            rel_err_mean: relative(theory.mean[i], emp.mean[i]),
            rel_err_var: relative(theory.var[i], emp.var[i]),
        })
        .collect();
    let n = rows.len() as f64;
    let rel_m: Vec<f64> = rows.iter().filter_map(|r| r.rel_err_mean).collect();
    let rel_v: Vec<f64> = rows.iter().filter_map(|r| r.rel_err_var).collect();
    let max = |v: &[f64]| v.iter().copied().reduce(f64::max);
    let summary = SnapshotSummary {
        iteration,
        mean_abs_err_mean: rows
            .iter()
            .map(|r| (r.emp_mean - r.theory_mean).abs())
            .sum::<f64>()
            / n,
        mean_abs_err_var: rows
            .iter()
            .map(|r| (r.emp_var - r.theory_var).abs())
            .sum::<f64>()
            / n,
        max_rel_err_mean: max(&rel_m),
        max_rel_err_var: max(&rel_v),
        median_rel_err_mean: median(rel_m),
        median_rel_err_var: median(rel_v),
    };
    (rows, summary)
}

/// Per-snapshot and fixed-point comparison of empirical and theory moments.
/// KS statistics and Q-Q points are computed for every retained pair that
/// has enough samples.
pub fn compare_theory(stats: &EnsembleStats, theory: &TheorySeries) -> Result<ComparisonReport> {
    if stats.snapshots != theory.snapshots || theory.fields.len() != theory.snapshots.len() {
        return Err(DmfpError::InvalidArgument(format!(
            "snapshot schedules differ: ensemble {:?} vs theory {:?}",
            stats.snapshots, theory.snapshots
        )));
    }
    let shape_ok =
        |f: &MomentField| f.num_states == stats.num_states && f.num_actions == stats.num_actions;
    if !theory.fields.iter().all(shape_ok) || !shape_ok(&theory.fixed_point) {
        return Err(DmfpError::ShapeMismatch(
            "theory and ensemble shapes differ".into(),
        ));
    }
    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    for (i, &n) in stats.snapshots.iter().enumerate() {
        let (r, s) = compare_field(n as i64, &stats.snapshot_field(i), &theory.fields[i]);
        rows.extend(r);
        summaries.push(s);
    }
    let (r, s) = compare_field(-1, &stats.final_field(), &theory.fixed_point);
    rows.extend(r);
    summaries.push(s);

    let mut ks = Vec::new();
    for (&(s, a), samples) in stats.retain_pairs.iter().zip(&stats.retained) {
        if samples.len() >= KS_MIN_SAMPLES {
            let (statistic, p_value) = ks_normality(samples)?;
            ks.push(KsRecord {
                s,
                a,
                statistic,
                p_value,
            });
        }
    }
    let qq = match stats.retained.first() {
        Some(samples) if samples.len() >= 2 => qq_points(samples).unwrap_or_default(),
        _ => Vec::new(),
    };
    Ok(ComparisonReport {
        rows,
        summaries,
        ks,
        qq,
        correlation: None,
        metadata: RunMetadata {
            replicates: stats.replicates,
            ..RunMetadata::default()
        },
    })
}

pub const KS_MIN_SAMPLES: usize = 8;

/// Sample mean and unbiased standard deviation.
fn mean_sd(samples: &[f64]) -> (f64, f64) {
    let acc: MomentAccumulator = samples.iter().copied().collect();
    (acc.mean, acc.sample_variance().sqrt())
}

/// Kolmogorov survival function `Q(lambda) = 2 sum (-1)^(k-1) exp(-2 k^2 lambda^2)`.
pub fn kolmogorov_survival(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    if lambda < 0.2 {
        return 1.0; // series converges to 1 to double precision
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        sum += sign * term;
        if term < 1e-18 {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// One-sample Kolmogorov-Smirnov test against a normal with the sample's own
/// mean and standard deviation. The p-value uses the asymptotic Kolmogorov
/// distribution with Stephens' small-sample factor; since the parameters are
/// estimated it is conservative (the Lilliefors caveat). A constant sample
/// standardizes to all zeros and gives `D = 0.5`.
pub fn ks_normality(samples: &[f64]) -> Result<(f64, f64)> {
    if samples.len() < KS_MIN_SAMPLES {
        return Err(DmfpError::InvalidArgument(format!(
            "KS test needs at least {KS_MIN_SAMPLES} samples, got {}",
            samples.len()
        )));
    }
    let (mean, sd) = mean_sd(samples);
    let mut z: Vec<f64> = samples
        .iter()
        .map(|x| if sd > 0.0 { (x - mean) / sd } else { 0.0 })
        .collect();
    z.sort_by(f64::total_cmp);
    let n = z.len() as f64;
    let d = z
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = std_normal_cdf(x);
            ((i + 1) as f64 / n - f).max(f - i as f64 / n)
        })
        .fold(0.0, f64::max);
    let sqrt_n = n.sqrt();
    let lambda = (sqrt_n + 0.12 + 0.11 / sqrt_n) * d;
    Ok((d, kolmogorov_survival(lambda)))
}

/// Standardized order statistics against normal plotting positions
/// `Phi^-1((i - 0.5) / n)`, as `(theoretical, sample)` pairs.
pub fn qq_points(samples: &[f64]) -> Result<Vec<(f64, f64)>> {
    if samples.len() < 2 {
        return Err(DmfpError::InvalidArgument(
            "Q-Q needs at least 2 samples".into(),
        ));
    }
    let (mean, sd) = mean_sd(samples);
    if !(sd > 0.0) {
        return Err(DmfpError::DegenerateData("zero sample variance".into()));
    }
    let mut z: Vec<f64> = samples.iter().map(|x| (x - mean) / sd).collect();
    z.sort_by(f64::total_cmp);
    let n = z.len() as f64;
    Ok(z.into_iter()
        .enumerate()
        .map(|(i, x)| (std_normal_quantile((i as f64 + 0.5) / n), x))
        .collect())
}

/// Pearson correlation.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(DmfpError::InvalidArgument(
            "correlation needs two equal series of length >= 2".into(),
        ));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(DmfpError::DegenerateData("constant series".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

pub const CORRELATION_MIN_REPLICATES: usize = 30;

/// Correlation of converged Q-values across replicates for each requested
/// pair of retained `(s, a)` entries.
pub fn cross_pair_correlation(
    stats: &EnsembleStats,
    pairs: &[(Pair, Pair)],
) -> Result<CorrelationSummary> {
    if stats.replicates < CORRELATION_MIN_REPLICATES {
        return Err(DmfpError::InvalidArgument(format!(
            "correlations need at least {CORRELATION_MIN_REPLICATES} replicates, got {}",
            stats.replicates
        )));
    }
    let lookup = |p: Pair| {
        stats
            .retained_samples(p)
            .ok_or_else(|| DmfpError::InvalidArgument(format!("pair {p:?} was not retained")))
    };
    let correlations = pairs
        .iter()
        .map(|&(p, q)| pearson(lookup(p)?, lookup(q)?))
        .collect::<Result<Vec<f64>>>()?;
    let median_abs = median(correlations.iter().map(|c| c.abs()).collect()).unwrap_or(0.0);
    Ok(CorrelationSummary {
        pairs: pairs.to_vec(),
        correlations,
        median_abs,
    })
}
