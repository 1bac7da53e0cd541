//! The work behind each `dmfp` subcommand. Every run writes its artifacts
//! plus a `manifest.json` into the output directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::Serialize;

use crate::bellman::{greedy_policy, solve_q};
use crate::config::RunConfig;
use crate::dmfp::{
    gumbel_constants, iid_fixed_point, jacobian_spectrum, run_dmfp, DmfpMode, GumbelConstants,
    IidParams, MaxMomentBackend, Spectrum,
};
use crate::error::{DmfpError, Result};
use crate::harness::{
    compare_theory, cross_pair_correlation, default_retained_pairs, random_pair_pairs,
    run_ensemble, EnsembleConfig, TheorySeries, CORRELATION_MIN_REPLICATES,
};
use crate::report::{
    ensure_dir, fmt_f64, write_file, write_json, write_manifest, write_report, Manifest, Versions,
};
use crate::sampler::sample_mdp;
use crate::svg::{render_svg, PlotLabels, Series};
use crate::types::MomentField;

/// Pairs of retained entries whose cross-replicate correlation is reported.
pub const CORRELATION_PAIRS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subcommand {
    Sample,
    Solve,
    Dmfp,
    Validate,
    Stability,
}

impl Subcommand {
    pub fn name(self) -> &'static str {
        match self {
            Subcommand::Sample => "sample",
            Subcommand::Solve => "solve",
            Subcommand::Dmfp => "dmfp",
            Subcommand::Validate => "validate",
            Subcommand::Stability => "stability",
        }
    }
}

impl FromStr for Subcommand {
    type Err = DmfpError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "sample" => Subcommand::Sample,
            "solve" => Subcommand::Solve,
            "dmfp" => Subcommand::Dmfp,
            "validate" => Subcommand::Validate,
            "stability" => Subcommand::Stability,
            _ => {
                return Err(DmfpError::InvalidArgument(format!(
                    "unknown subcommand {s:?}"
                )))
            }
        })
    }
}

/// Runs `cmd` and writes its outputs and manifest into `out`. Returns the
/// written paths, manifest last.
pub fn run_subcommand(cmd: Subcommand, config: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let start = Instant::now();
    ensure_dir(out)?;
    let mut written = match cmd {
        Subcommand::Sample => sample(config, out)?,
        Subcommand::Solve => solve(config, out)?,
        Subcommand::Dmfp => dmfp(config, out)?,
        Subcommand::Validate => validate(config, out, start)?,
        Subcommand::Stability => stability(config, out)?,
    };
    let manifest = Manifest {
        subcommand: cmd.name().into(),
        config_digest: config.digest(),
        seed: config.seed,
        versions: Versions::default(),
        workers: crate::parallel::workers_from_env(),
        wall_time_secs: start.elapsed().as_secs_f64(),
        outputs: written
            .iter()
            .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
            .collect(),
    };
    written.push(write_manifest(&manifest, out)?);
    Ok(written)
}

fn sample(config: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let mdp = sample_mdp(&config.prior()?, config.seed)?;
    let path = out.join("mdp.json");
    write_json(&path, &mdp)?;
    Ok(vec![path])
}

#[derive(Serialize)]
struct SolveSummary {
    iterations: usize,
    residual: f64,
    converged: bool,
    greedy_policy: Vec<usize>,
}

fn solve(config: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let mdp = sample_mdp(&config.prior()?, config.seed)?;
    let report = solve_q(&mdp, config.eps, config.max_iters)?;
    let mut csv = String::from("s,a,q\n");
    for s in 0..mdp.num_states {
        for a in 0..mdp.num_actions {
            let _ = writeln!(csv, "{s},{a},{}", fmt_f64(report.q.get(s, a)));
        }
    }
    let q_path = out.join("q_star.csv");
    write_file(&q_path, csv)?;
    let summary_path = out.join("solve.json");
    write_json(
        &summary_path,
        &SolveSummary {
            iterations: report.iterations,
            residual: report.residual,
            converged: report.converged,
            greedy_policy: greedy_policy(&report.q).action,
        },
    )?;
    Ok(vec![q_path, summary_path])
}

fn field_average(f: &MomentField) -> (f64, f64) {
    let n = f.mean.len() as f64;
    (
        f.mean.iter().sum::<f64>() / n,
        f.var.iter().sum::<f64>() / n,
    )
}

fn dmfp(config: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let prior = config.prior()?;
    let backend = MaxMomentBackend::of_kind(config.backend);
    let traj = run_dmfp(
        &prior,
        &DmfpMode::Optimal,
        &backend,
        config.max_iters,
        config.eps,
    )?;
    let mut csv = String::from("iteration,s,a,mean,var\n");
    for (n, field) in traj.fields.iter().enumerate().skip(1) {
        for s in 0..field.num_states {
            for a in 0..field.num_actions {
                let _ = writeln!(
                    csv,
                    "{n},{s},{a},{},{}",
                    fmt_f64(field.mean_at(s, a)),
                    fmt_f64(field.var_at(s, a))
                );
            }
        }
    }
    let csv_path = out.join("dmfp.csv");
    write_file(&csv_path, csv)?;

    let averages: Vec<(f64, (f64, f64))> = traj
        .fields
        .iter()
        .enumerate()
        .map(|(n, f)| (n as f64, field_average(f)))
        .collect();
    let svg_path = out.join("dmfp.svg");
    render_svg(
        &[
            Series::new("mean", averages.iter().map(|&(n, (m, _))| (n, m)).collect()),
            Series::new(
                "variance",
                averages.iter().map(|&(n, (_, v))| (n, v)).collect(),
            )
            .dashed(),
        ],
        &PlotLabels {
            title: "DMFP moments (average over state-action pairs)".into(),
            x: "iteration".into(),
            y: "moment".into(),
        },
        &svg_path,
    )?;
    let summary_path = out.join("dmfp.json");
    write_json(
        &summary_path,
        &serde_json::json!({
            "iterations": traj.iterations(),
            "converged": traj.converged,
            "backend": config.backend,
            "final_change": traj.changes.last(),
        }),
    )?;
    Ok(vec![csv_path, svg_path, summary_path])
}

fn validate(config: &RunConfig, out: &Path, start: Instant) -> Result<Vec<PathBuf>> {
    let prior = config.prior()?;
    let retain = default_retained_pairs(
        prior.num_states,
        prior.num_actions,
        config.retained_pairs,
        config.seed,
    );
    let ensemble = EnsembleConfig {
        replicates: config.replicates,
        first_replicate: 0,
        master_seed: config.seed,
        snapshots: config.snapshots.clone(),
        retain_pairs: retain.clone(),
        eps: config.eps,
        max_iters: config.max_iters,
        mode: DmfpMode::Optimal,
    };
    let stats = run_ensemble(&prior, &ensemble)?;
    let backend = MaxMomentBackend::of_kind(config.backend);
    let traj = run_dmfp(
        &prior,
        &DmfpMode::Optimal,
        &backend,
        config.max_iters,
        config.eps,
    )?;
    let theory = TheorySeries::from_trajectory(&traj, &config.snapshots);
    let mut report = compare_theory(&stats, &theory)?;
    if stats.replicates >= CORRELATION_MIN_REPLICATES && retain.len() >= 2 {
        let pairs = random_pair_pairs(&retain, CORRELATION_PAIRS, config.seed);
        // constant retained series (degenerate priors) have no correlation
        report.correlation = cross_pair_correlation(&stats, &pairs).ok();
    }
    report.metadata.seed = config.seed;
    report.metadata.config_digest = config.digest();
    report.metadata.wall_time_secs = start.elapsed().as_secs_f64();
    let mut written = write_report(&report, out)?;

    let emp: Vec<(f64, (f64, f64))> = config
        .snapshots
        .iter()
        .enumerate()
        .map(|(i, &n)| (n as f64, field_average(&stats.snapshot_field(i))))
        .collect();
    let th: Vec<(f64, (f64, f64))> = config
        .snapshots
        .iter()
        .zip(&theory.fields)
        .map(|(&n, f)| (n as f64, field_average(f)))
        .collect();
    let pick = |v: &[(f64, (f64, f64))], var: bool| -> Vec<(f64, f64)> {
        v.iter()
            .map(|&(n, (m, s))| (n, if var { s } else { m }))
            .collect()
    };
    for (name, var) in [("mean", false), ("variance", true)] {
        let path = out.join(format!("validate_{name}.svg"));
        render_svg(
            &[
                Series::new("empirical", pick(&emp, var)),
                Series::new("theory", pick(&th, var)).dashed(),
            ],
            &PlotLabels {
                title: format!("Q-value {name}: ensemble vs DMFP"),
                x: "iteration".into(),
                y: name.into(),
            },
            &path,
        )?;
        written.push(path);
    }
    Ok(written)
}

#[derive(Serialize)]
struct StabilityReport {
    gumbel: GumbelConstants,
    params: IidParams,
    fixed_point_mean: f64,
    fixed_point_var: f64,
    spectrum: Spectrum,
    max_eigenvalue: f64,
    stable: bool,
}

fn stability(config: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let prior = config.prior()?;
    let params = IidParams::from_prior(&prior).ok_or_else(|| {
        DmfpError::InvalidArgument(
            "stability analysis needs identical priors for every state-action pair".into(),
        )
    })?;
    let consts = gumbel_constants(prior.num_actions)?;
    let (mu, nu) = iid_fixed_point(&params, &consts)?;
    let spectrum = jacobian_spectrum(&params, &consts, nu)?;
    let path = out.join("stability.json");
    write_json(
        &path,
        &StabilityReport {
            gumbel: consts,
            params,
            fixed_point_mean: mu,
            fixed_point_var: nu,
            max_eigenvalue: spectrum.eigenvalues[0],
            stable: spectrum.spectral_radius() < 1.0,
            spectrum,
        },
    )?;
    Ok(vec![path])
}
