//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! `cargo test --test acceptance -- 3 8` runs only criteria 3 and 8;
//! `-- criterion_03` works too.
//!
//! Ensembles are shared between criteria. Replicate `k` always uses
//! `derive_replicate_seed(seed, k)`, so the K = 500 ensembles used by
//! criteria 3, 4 and 10 are exactly the first halves of the K = 1000
//! ensembles used by criteria 6 and 7.

use std::path::Path;
use std::process::{Command, ExitCode};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use dmfp_core::bellman::{greedy_policy, solve_q};
use dmfp_core::dmfp::{
    gumbel_constants, iid_dmfp_step, iid_fixed_point, jacobian_spectrum, max_moments_general,
    run_dmfp, DmfpMode, DmfpTrajectory, IidParams, MaxMomentBackend,
};
use dmfp_core::harness::{
    cross_pair_correlation, default_retained_pairs, default_snapshots, ks_normality,
    random_pair_pairs, run_ensemble, EnsembleConfig, EnsembleStats, DEFAULT_RETAINED,
};
use dmfp_core::sampler::{sample_mdp, Rng};
use dmfp_core::{AlphaSpec, MomentField, Policy, PriorSpec, SampledMdp};

const SEED: u64 = 20_240_611;
const ACTIONS: usize = 20;
const DISCOUNT: f64 = 0.9;
const REWARD_VAR: f64 = 0.01;
const EPS: f64 = 1e-8;
const MAX_ITERS: usize = 2000;
const HALF: usize = 500;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn figure_prior(n: usize, alpha: AlphaSpec) -> PriorSpec {
    PriorSpec::iid(n, ACTIONS, DISCOUNT, &alpha, 0.0, REWARD_VAR).unwrap()
}

fn ensemble_config(n: usize, replicates: usize, first: usize, mode: DmfpMode) -> EnsembleConfig {
    EnsembleConfig {
        replicates,
        first_replicate: first,
        master_seed: SEED,
        snapshots: default_snapshots(MAX_ITERS),
        retain_pairs: default_retained_pairs(n, ACTIONS, DEFAULT_RETAINED, SEED),
        eps: EPS,
        max_iters: MAX_ITERS,
        mode,
    }
}

/// K = 500 and K = 1000 ensembles of the symmetric `alpha = 1/N` prior.
struct Ensembles {
    half: EnsembleStats,
    full: EnsembleStats,
    elapsed: Duration,
}

fn build_ensembles(n: usize) -> Ensembles {
    let start = Instant::now();
    let prior = figure_prior(n, AlphaSpec::InverseN);
    let half = run_ensemble(&prior, &ensemble_config(n, HALF, 0, DmfpMode::Optimal)).unwrap();
    let rest = run_ensemble(&prior, &ensemble_config(n, HALF, HALF, DmfpMode::Optimal)).unwrap();
    let mut full = half.clone();
    full.merge(rest).unwrap();
    Ensembles {
        half,
        full,
        elapsed: start.elapsed(),
    }
}

fn ensembles(n: usize) -> &'static Ensembles {
    static N5: OnceLock<Ensembles> = OnceLock::new();
    static N50: OnceLock<Ensembles> = OnceLock::new();
    static N500: OnceLock<Ensembles> = OnceLock::new();
    let cell = match n {
        5 => &N5,
        50 => &N50,
        500 => &N500,
        _ => unreachable!(),
    };
    cell.get_or_init(|| build_ensembles(n))
}

fn theory(n: usize, backend: MaxMomentBackend) -> DmfpTrajectory {
    run_dmfp(
        &figure_prior(n, AlphaSpec::InverseN),
        &DmfpMode::Optimal,
        &backend,
        MAX_ITERS,
        1e-12,
    )
    .unwrap()
}

/// Average of the per-pair moments. Under a symmetric prior every pair has
/// the same law, so these are the ensemble's estimates of the common mean
/// and variance.
fn pooled(f: &MomentField) -> (f64, f64) {
    let n = f.mean.len() as f64;
    (
        f.mean.iter().sum::<f64>() / n,
        f.var.iter().sum::<f64>() / n,
    )
}

fn rel(theory: f64, emp: f64) -> f64 {
    (theory - emp).abs() / emp.abs()
}

/// Largest per-pair relative errors, reported for context.
fn worst_pair(emp: &MomentField, th: &MomentField) -> (f64, f64) {
    let m = emp
        .mean
        .iter()
        .zip(&th.mean)
        .filter(|(e, _)| e.abs() > 0.05)
        .map(|(e, t)| rel(*t, *e))
        .fold(0.0, f64::max);
    let v = emp
        .var
        .iter()
        .zip(&th.var)
        .map(|(e, t)| rel(*t, *e))
        .fold(0.0, f64::max);
    (m, v)
}

struct Comparison {
    worst_mean: f64,
    worst_var: f64,
    mean_ok: bool,
    var_ok: bool,
    /// Iterations whose ensemble mean cleared the 0.05 magnitude floor.
    mean_checked: usize,
    lines: Vec<String>,
}

/// Pooled theory-vs-ensemble comparison at the listed iterations (`None` is
/// the fixed point).
fn compare(
    stats: &EnsembleStats,
    theory_at: impl Fn(Option<usize>) -> MomentField,
    iterations: &[Option<usize>],
    mean_tol: f64,
    var_tol: f64,
) -> Comparison {
    let mut c = Comparison {
        worst_mean: 0.0,
        worst_var: 0.0,
        mean_ok: true,
        var_ok: true,
        mean_checked: 0,
        lines: Vec::new(),
    };
    for &it in iterations {
        let emp = match it {
            Some(n) => stats.snapshot_field(stats.snapshots.iter().position(|&s| s == n).unwrap()),
            None => stats.final_field(),
        };
        let th = theory_at(it);
        let ((em, ev), (tm, tv)) = (pooled(&emp), pooled(&th));
        let rm = if em.abs() > 0.05 { rel(tm, em) } else { 0.0 };
        c.mean_checked += usize::from(em.abs() > 0.05);
        let rv = rel(tv, ev);
        c.worst_mean = c.worst_mean.max(rm);
        c.worst_var = c.worst_var.max(rv);
        c.mean_ok &= rm <= mean_tol;
        c.var_ok &= rv <= var_tol;
        let (pm, pv) = worst_pair(&emp, &th);
        c.lines.push(format!(
            "    {:>5}  mean emp {em:.5} theory {tm:.5} rel {rm:.4} | var emp {ev:.6} theory {tv:.6} rel {rv:.4} | worst pair {pm:.3} / {pv:.3}",
            it.map_or("fixed".to_string(), |n| n.to_string()),
        ));
    }
    c
}

/// Within-replicate spread of Q across pairs versus the variance of each
/// replicate's average Q, on the first `k` replicates.
fn variance_split(prior: &PriorSpec, k: usize) -> (f64, f64) {
    let mut within = 0.0;
    let mut means = Vec::with_capacity(k);
    for r in 0..k {
        let mdp = sample_mdp(
            prior,
            dmfp_core::sampler::derive_replicate_seed(SEED, r as u64),
        )
        .unwrap();
        let q = solve_q(&mdp, EPS, MAX_ITERS).unwrap().q.values;
        let m = q.iter().sum::<f64>() / q.len() as f64;
        within += q.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (q.len() - 1) as f64;
        means.push(m);
    }
    let gm = means.iter().sum::<f64>() / k as f64;
    let between = means.iter().map(|x| (x - gm).powi(2)).sum::<f64>() / (k - 1) as f64;
    (within / k as f64, between)
}

// ---------------------------------------------------------------------------

/// Solves `(I - beta P_pi) V = r_pi` by Gaussian elimination.
fn policy_value(mdp: &SampledMdp, pi: &[usize]) -> Vec<f64> {
    let n = mdp.num_states;
    let mut m = vec![vec![0.0; n + 1]; n];
    for s in 0..n {
        let row = mdp.row(s, pi[s]);
        for j in 0..n {
            m[s][j] = if s == j { 1.0 } else { 0.0 } - mdp.discount * row[j];
        }
        m[s][n] = mdp.reward(s, pi[s]);
    }
    for c in 0..n {
        let p = (c..n)
            .max_by(|&i, &j| m[i][c].abs().total_cmp(&m[j][c].abs()))
            .unwrap();
        m.swap(c, p);
        for r in 0..n {
            if r != c {
                let f = m[r][c] / m[c][c];
                for k in c..=n {
                    m[r][k] -= f * m[c][k];
                }
            }
        }
    }
    (0..n).map(|s| m[s][n] / m[s][s]).collect()
}

/// `Q*(s, a) = max over deterministic policies of Q^pi(s, a)`.
fn enumeration_oracle(mdp: &SampledMdp) -> Vec<f64> {
    let (n, na) = (mdp.num_states, mdp.num_actions);
    let mut best = vec![f64::NEG_INFINITY; n * na];
    for code in 0..na.pow(n as u32) {
        let pi: Vec<usize> = (0..n).map(|s| code / na.pow(s as u32) % na).collect();
        let v = policy_value(mdp, &pi);
        for s in 0..n {
            for a in 0..na {
                let q = mdp.reward(s, a)
                    + mdp.discount
                        * mdp
                            .row(s, a)
                            .iter()
                            .zip(&v)
                            .map(|(p, x)| p * x)
                            .sum::<f64>();
                best[s * na + a] = best[s * na + a].max(q);
            }
        }
    }
    best
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = Rng::seed_from_u64(SEED ^ 1);
    let mut worst: f64 = 0.0;
    for trial in 0..100 {
        let n = 1 + rng.below(3);
        let na = 1 + rng.below(2);
        let beta = 0.95 * rng.uniform();
        let alpha: Vec<f64> = (0..n * na * n).map(|_| 0.2 + 3.0 * rng.uniform()).collect();
        let mean: Vec<f64> = (0..n * na).map(|_| rng.standard_normal()).collect();
        let prior = PriorSpec::new(
            n,
            na,
            beta,
            &AlphaSpec::Full(alpha),
            mean,
            vec![1.0; n * na],
        )
        .unwrap();
        let mdp = sample_mdp(&prior, trial).unwrap();
        let q = solve_q(&mdp, 1e-10, 100_000).unwrap().q;
        let oracle = enumeration_oracle(&mdp);
        worst = q
            .values
            .iter()
            .zip(&oracle)
            .map(|(a, b)| (a - b).abs())
            .fold(worst, f64::max);
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-8 && secs < 5.0,
        format!("100 MDPs, worst sup-norm error {worst:.2e} (tol 1e-8), {secs:.2} s (limit 5 s)"),
    )
}

fn criterion_2() -> Outcome {
    let prior = figure_prior(500, AlphaSpec::InverseN);
    let mdp = sample_mdp(&prior, SEED).unwrap();
    let start = Instant::now();
    let report = solve_q(&mdp, 1e-8, 10_000).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let worst_ratio = report
        .diffs
        .windows(2)
        .skip(5)
        .map(|w| w[1] / w[0])
        .fold(0.0, f64::max);
    let pass = report.converged && worst_ratio <= 0.91 && report.iterations <= 210 && secs < 10.0;
    outcome(
        pass,
        format!(
            "N=500 A=20: worst diff ratio after iteration 5 {worst_ratio:.6} (<= 0.91), {} iterations to eps 1e-8 (~200), solve {secs:.2} s (< 10 s)",
            report.iterations
        ),
    )
}

fn field_at(t: &DmfpTrajectory, it: Option<usize>) -> MomentField {
    it.map_or_else(|| t.last().clone(), |n| t.at(n).clone())
}

fn figure_iterations(stats: &EnsembleStats) -> Vec<Option<usize>> {
    stats
        .snapshots
        .iter()
        .map(|&n| Some(n))
        .chain([None])
        .collect()
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let stats = &ensembles(50).half;
    let quad = theory(50, MaxMomentBackend::quadrature());
    let gumbel = theory(50, MaxMomentBackend::gumbel());
    let q = compare(
        stats,
        |it| field_at(&quad, it),
        &figure_iterations(stats),
        0.05,
        0.15,
    );
    let g = compare(stats, |it| field_at(&gumbel, it), &[None], 0.10, 0.25);
    let secs = start.elapsed().as_secs_f64() + ensembles(50).elapsed.as_secs_f64() / 2.0;
    let (within, between) = variance_split(&figure_prior(50, AlphaSpec::InverseN), 200);
    let mut detail = format!(
        "N=50 K=500: quadrature worst pooled mean rel {:.4} (<= 0.05) {}, variance rel {:.4} (<= 0.15) {}; \
         gumbel fixed point mean rel {:.4} (<= 0.10) {}, variance rel {:.4} (<= 0.25) {}; {secs:.0} s (< 900 s)\n",
        q.worst_mean,
        ok(q.mean_ok),
        q.worst_var,
        ok(q.var_ok),
        g.worst_mean,
        ok(g.mean_ok),
        g.worst_var,
        ok(g.var_ok),
    );
    detail += &q.lines.join("\n");
    detail += &format!("\n    gumbel: {}", g.lines[0].trim_start());
    detail += &format!(
        "\n    variance split over 200 replicates: within-replicate spread {within:.6}, variance of replicate average {between:.6}"
    );
    outcome(
        q.mean_ok && q.var_ok && g.mean_ok && g.var_ok && secs < 900.0,
        detail,
    )
}

fn ok(b: bool) -> &'static str {
    if b {
        "ok"
    } else {
        "FAILS"
    }
}

fn criterion_4() -> Outcome {
    // value iteration from Q = 0 passes through the finite-horizon tables,
    // so the snapshots 1..=10 are the H = 10 finite-horizon ensemble
    let stats = &ensembles(50).half;
    let quad = theory(50, MaxMomentBackend::quadrature());
    let horizon: Vec<Option<usize>> = (1..=10).map(Some).collect();
    let c = compare(
        stats,
        |it| quad.at(it.unwrap()).clone(),
        &horizon,
        0.05,
        0.15,
    );
    outcome(
        c.mean_ok && c.var_ok,
        format!(
            "N=50 K=500 H=10: worst pooled mean rel {:.4} (<= 0.05) {}, variance rel {:.4} (<= 0.15) {}\n{}",
            c.worst_mean,
            ok(c.mean_ok),
            c.worst_var,
            ok(c.var_ok),
            c.lines.join("\n")
        ),
    )
}

fn criterion_5() -> Outcome {
    let prior = figure_prior(50, AlphaSpec::InverseN);
    let reference = sample_mdp(&prior, SEED ^ 5).unwrap();
    let pi: Policy = greedy_policy(&solve_q(&reference, EPS, MAX_ITERS).unwrap().q);
    let mode = DmfpMode::Policy(pi);
    let stats = run_ensemble(&prior, &ensemble_config(50, HALF, 0, mode.clone())).unwrap();
    let traj = run_dmfp(
        &prior,
        &mode,
        &MaxMomentBackend::quadrature(),
        MAX_ITERS,
        1e-12,
    )
    .unwrap();
    let c = compare(
        &stats,
        |it| field_at(&traj, it),
        &figure_iterations(&stats),
        0.05,
        0.15,
    );
    outcome(
        c.mean_ok && c.var_ok,
        format!(
            "N=50 K=500 greedy policy: worst pooled mean rel {:.4} (<= 0.05) {} on {} of {} iterations above the 0.05 floor, variance rel {:.4} (<= 0.15) {}\n{}",
            c.worst_mean,
            ok(c.mean_ok),
            c.mean_checked,
            c.lines.len(),
            c.worst_var,
            ok(c.var_ok),
            c.lines.join("\n")
        ),
    )
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

const SIZES: [usize; 3] = [5, 50, 500];

fn criterion_6() -> Outcome {
    let mut rows = Vec::new();
    let mut secs = 0.0;
    for n in SIZES {
        let e = ensembles(n);
        secs += e.elapsed.as_secs_f64();
        let ks: Vec<(f64, f64)> = e
            .full
            .retained
            .iter()
            .map(|s| ks_normality(s).unwrap())
            .collect();
        let passing = ks.iter().filter(|(_, p)| *p > 0.01).count() as f64 / ks.len() as f64;
        rows.push((n, passing, median(ks.iter().map(|k| k.0).collect())));
    }
    let frac_ok = rows.windows(2).all(|w| w[1].1 >= w[0].1);
    let stat_ok = rows.windows(2).all(|w| w[1].2 < w[0].2);
    let table: Vec<String> = rows
        .iter()
        .map(|(n, f, d)| format!("N={n}: KS pass fraction {f:.3}, median D {d:.4}"))
        .collect();
    outcome(
        frac_ok && stat_ok && secs < 1800.0,
        format!(
            "K=1000, 32 pairs: {}; fraction nondecreasing {}, median D strictly decreasing {}; ensembles {secs:.0} s (< 1800 s)",
            table.join("; "),
            ok(frac_ok),
            ok(stat_ok)
        ),
    )
}

fn criterion_7() -> Outcome {
    let mut medians = Vec::new();
    for n in SIZES {
        let stats = &ensembles(n).full;
        let pairs = random_pair_pairs(&stats.retain_pairs, 100, SEED);
        medians.push((n, cross_pair_correlation(stats, &pairs).unwrap().median_abs));
    }
    let decreasing = medians.windows(2).all(|w| w[1].1 < w[0].1);
    let small = medians[2].1 <= 0.1;
    let table: Vec<String> = medians
        .iter()
        .map(|(n, m)| format!("N={n}: {m:.4}"))
        .collect();
    outcome(
        decreasing && small,
        format!(
            "median |corr| over 100 pairs, K=1000: {}; decreasing {}, <= 0.1 at N=500 {}",
            table.join(", "),
            ok(decreasing),
            ok(small)
        ),
    )
}

fn criterion_8() -> Outcome {
    let betas = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99];
    let actions = [2usize, 3, 4, 5, 8, 16, 20, 32, 64, 128, 256, 512, 1024];
    let (mut eig_err, mut fd_err, mut gap_ok) = (0.0f64, 0.0f64, true);
    for &beta in &betas {
        for &na in &actions {
            let params = IidParams::new(beta, 0.0, REWARD_VAR, na);
            let consts = gumbel_constants(na).unwrap();
            let (mu, nu) = iid_fixed_point(&params, &consts).unwrap();
            let spec = jacobian_spectrum(&params, &consts, nu).unwrap();
            eig_err = eig_err.max((spec.eigenvalues[0] - beta).abs());
            gap_ok &= spec.eigenvalues[1] < spec.eigenvalues[0];
            for (col, (dm, dn)) in [(1e-6, 0.0), (0.0, 1e-6 * nu)].into_iter().enumerate() {
                let hi = iid_dmfp_step(mu + dm, nu + dn, &params, &consts);
                let lo = iid_dmfp_step(mu - dm, nu - dn, &params, &consts);
                let h = 2.0 * (dm + dn);
                fd_err = fd_err
                    .max(((hi.0 - lo.0) / h - spec.jacobian[0][col]).abs())
                    .max(((hi.1 - lo.1) / h - spec.jacobian[1][col]).abs());
            }
        }
    }
    outcome(
        eig_err <= 1e-12 && gap_ok && fd_err <= 1e-5,
        format!(
            "{} (beta, |A|) pairs: max |lambda_max - beta| {eig_err:.1e} (<= 1e-12), second eigenvalue smaller {}, \
             finite-difference Jacobian error {fd_err:.1e} (<= 1e-5)",
            betas.len() * actions.len(),
            ok(gap_ok)
        ),
    )
}

fn criterion_9() -> Outcome {
    let q = MaxMomentBackend::quadrature();
    let (m, v) = max_moments_general(&[0.0, 0.0], &[1.0, 1.0], &q).unwrap();
    let pi = std::f64::consts::PI;
    let two_err = (m - 1.0 / pi.sqrt())
        .abs()
        .max((v - (1.0 - 1.0 / pi)).abs());

    // standard deviations up to 0.5 keep the Monte-Carlo standard error of
    // the variance near 1e-4, an order below the tolerance
    let mut rng = Rng::seed_from_u64(SEED ^ 9);
    let samples = 10_000_000usize;
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let n = 2 + rng.below(49);
        let means: Vec<f64> = (0..n).map(|_| 2.0 * rng.uniform() - 1.0).collect();
        let sds: Vec<f64> = (0..n).map(|_| 0.1 + 0.4 * rng.uniform()).collect();
        let vars: Vec<f64> = sds.iter().map(|s| s * s).collect();
        let (tm, tv) = max_moments_general(&means, &vars, &q).unwrap();
        let (mut s1, mut s2) = (0.0, 0.0);
        let shift = tm;
        for _ in 0..samples {
            let mut best = f64::NEG_INFINITY;
            for (mu, sd) in means.iter().zip(&sds) {
                best = best.max(mu + sd * rng.standard_normal());
            }
            let d = best - shift;
            s1 += d;
            s2 += d * d;
        }
        let em = s1 / samples as f64;
        let ev = s2 / samples as f64 - em * em;
        worst = worst.max(em.abs()).max((ev - tv).abs());
    }
    outcome(
        two_err <= 1e-6 && worst <= 1e-3,
        format!(
            "two standard normals error {two_err:.1e} (<= 1e-6); 20 random instances vs 1e7 samples, worst moment error {worst:.1e} (<= 1e-3)"
        ),
    )
}

fn fixed_point_variance(stats: &EnsembleStats) -> f64 {
    pooled(&stats.final_field()).1
}

fn criterion_10() -> Outcome {
    let mut rows = Vec::new();
    for n in [50usize, 500] {
        let sparse = fixed_point_variance(&ensembles(n).half);
        let prior = figure_prior(n, AlphaSpec::Scalar(1.0));
        let mut cfg = ensemble_config(n, HALF, 0, DmfpMode::Optimal);
        cfg.snapshots = vec![1];
        cfg.retain_pairs.clear();
        let flat = fixed_point_variance(&run_ensemble(&prior, &cfg).unwrap());
        let theory = |alpha| {
            let traj = run_dmfp(
                &figure_prior(n, alpha),
                &DmfpMode::Optimal,
                &MaxMomentBackend::quadrature(),
                MAX_ITERS,
                EPS,
            )
            .unwrap();
            pooled(traj.last()).1
        };
        let theory_ratio = theory(AlphaSpec::Scalar(1.0)) / theory(AlphaSpec::InverseN);
        rows.push((n, flat, sparse, theory_ratio));
    }
    let ratio = |r: &(usize, f64, f64, f64)| r.1 / r.2;
    // share of the variance left after removing the reward noise floor
    let excess = |r: &(usize, f64, f64, f64)| (r.1 - REWARD_VAR) / (r.2 - REWARD_VAR);
    let decreases = ratio(&rows[1]) < ratio(&rows[0]);
    let table: Vec<String> = rows
        .iter()
        .map(|r| {
            format!(
                "N={}: var(alpha=1) {:.6} / var(alpha=1/N) {:.6} = {:.4} (theory {:.4}, above reward variance {:.4})",
                r.0,
                r.1,
                r.2,
                ratio(r),
                r.3,
                excess(r)
            )
        })
        .collect();
    outcome(
        decreases,
        format!("K=500: {}; ratio decreases {}", table.join("; "), ok(decreases)),
    )
}

fn criterion_11() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.json");
    std::fs::write(
        &config,
        r#"{"num_states": 20, "num_actions": 5, "discount": 0.9, "alpha": "1/N",
            "reward_mean": 0.0, "reward_std": 0.1, "replicates": 64, "seed": 11, "max_iters": 500}"#,
    )
    .unwrap();
    let run = |workers: Option<&str>, out: &Path| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_dmfp"));
        cmd.args(["validate", "--config"])
            .arg(&config)
            .arg("--out")
            .arg(out);
        cmd.env_remove("DMFP_WORKERS");
        if let Some(w) = workers {
            cmd.env("DMFP_WORKERS", w);
        }
        let status = cmd.output().unwrap().status;
        assert!(status.success(), "validate failed: {status}");
        ["trajectory.csv", "qq.csv"].map(|f| std::fs::read(out.join(f)).unwrap())
    };
    let settings = [None, Some("1"), Some("2"), Some("4"), None];
    let outputs: Vec<_> = settings
        .iter()
        .enumerate()
        .map(|(i, w)| run(*w, &dir.path().join(format!("out{i}"))))
        .collect();
    let identical = outputs.windows(2).all(|w| w[0] == w[1]);
    outcome(
        identical,
        format!(
            "{} validate runs (DMFP_WORKERS unset, 1, 2, 4, unset): CSV outputs byte-identical {}",
            settings.len(),
            ok(identical)
        ),
    )
}

const CRITERIA: [(usize, &str, fn() -> Outcome); 11] = [
    (1, "solver matches policy-enumeration oracle", criterion_1),
    (2, "contraction and convergence at N=500", criterion_2),
    (3, "trajectory agreement with the ensemble", criterion_3),
    (4, "finite-horizon agreement", criterion_4),
    (5, "policy-evaluation agreement", criterion_5),
    (6, "Gaussianity improves with N", criterion_6),
    (7, "asymptotic independence", criterion_7),
    (8, "fixed-point stability spectrum", criterion_8),
    (9, "max-moment oracle", criterion_9),
    (10, "variance scaling with concentration", criterion_10),
    (11, "determinism across worker counts", criterion_11),
];

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        for (id, _, _) in CRITERIA {
            println!("criterion_{id:02}: test");
        }
        return ExitCode::SUCCESS;
    }
    // numeric arguments pick criteria by number, other filters match `criterion_NN`
    let filters: Vec<&String> = args.iter().filter(|a| !a.starts_with('-')).collect();
    let selected = |id: usize| {
        filters.is_empty()
            || filters.iter().any(|f| match f.parse::<usize>() {
                Ok(n) => n == id,
                Err(_) => format!("criterion_{id:02}").contains(f.as_str()),
            })
    };
    let mut failed = Vec::new();
    for (id, name, run) in CRITERIA {
        if !selected(id) {
            continue;
        }
        let start = Instant::now();
        let result = run();
        println!(
            "{} criterion {id:>2} ({name}) [{:.1} s]: {}",
            if result.pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64(),
            result.detail
        );
        if !result.pass {
            failed.push(id);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failed criteria {failed:?}");
        ExitCode::FAILURE
    }
}
