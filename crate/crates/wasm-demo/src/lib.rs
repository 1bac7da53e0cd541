//! Browser bindings for the demo page in `www/`.
//!
//! Each exported function returns a JSON document; plots come back as SVG
//! markup rendered by `dmfp_core::svg`. The plain `*_json` functions hold
//! the logic and are what the native tests exercise.

use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use dmfp_core::dmfp::{
    gumbel_constants, iid_fixed_point, jacobian_spectrum, max_moments_identical, run_dmfp,
    DmfpMode, IidParams, MaxMomentBackend,
};
use dmfp_core::harness::{default_snapshots, run_ensemble, EnsembleConfig};
use dmfp_core::svg::{svg_string, PlotLabels, Series};
use dmfp_core::{AlphaSpec, MomentField, PriorSpec};

/// Largest state count the page accepts; keeps a click under a few seconds.
pub const MAX_STATES: usize = 200;
pub const MAX_REPLICATES: usize = 500;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn parse_alpha(alpha: &str) -> Result<AlphaSpec, String> {
    let alpha = alpha.trim();
    if alpha.eq_ignore_ascii_case("1/n") {
        return Ok(AlphaSpec::InverseN);
    }
    alpha
        .parse::<f64>()
        .map(AlphaSpec::Scalar)
        .map_err(|_| format!("alpha must be a number or \"1/N\", got {alpha:?}"))
}

fn pooled(f: &MomentField) -> (f64, f64) {
    let n = f.mean.len() as f64;
    (
        f.mean.iter().sum::<f64>() / n,
        f.var.iter().sum::<f64>() / n,
    )
}

fn plot(series: Vec<Series>, title: &str, y: &str) -> String {
    svg_string(
        &series,
        &PlotLabels {
            title: title.into(),
            x: "iteration".into(),
            y: y.into(),
        },
    )
}

/// Ensemble of sampled-and-solved MDPs against both DMFP backends, pooled
/// over state-action pairs.
#[allow(clippy::too_many_arguments)]
pub fn compare_json(
    num_states: usize,
    num_actions: usize,
    discount: f64,
    alpha: &str,
    reward_mean: f64,
    reward_std: f64,
    replicates: usize,
    seed: u64,
) -> Result<String, String> {
    if num_states > MAX_STATES || replicates > MAX_REPLICATES {
        return Err(format!(
            "demo limits: N <= {MAX_STATES}, K <= {MAX_REPLICATES}"
        ));
    }
    let prior = PriorSpec::iid(
        num_states,
        num_actions,
        discount,
        &parse_alpha(alpha)?,
        reward_mean,
        reward_std * reward_std,
    )
    .map_err(err)?;
    let max_iters = 1000;
    let snapshots = default_snapshots(max_iters);
    let stats = run_ensemble(
        &prior,
        &EnsembleConfig {
            replicates,
            first_replicate: 0,
            master_seed: seed,
            snapshots: snapshots.clone(),
            retain_pairs: Vec::new(),
            eps: 1e-8,
            max_iters,
            mode: DmfpMode::Optimal,
        },
    )
    .map_err(err)?;
    let last_useful = stats.iterations.mean.ceil() as usize + 1;
    let shown: Vec<(usize, usize)> = snapshots
        .iter()
        .copied()
        .enumerate()
        .filter(|&(_, n)| n <= last_useful.max(10))
        .collect();
    let empirical: Vec<(f64, f64, f64)> = shown
        .iter()
        .map(|&(i, n)| {
            let (m, v) = pooled(&stats.snapshot_field(i));
            (n as f64, m, v)
        })
        .collect();

    let mut mean_series = vec![Series::new(
        "ensemble",
        empirical.iter().map(|e| (e.0, e.1)).collect(),
    )];
    let mut var_series = vec![Series::new(
        "ensemble",
        empirical.iter().map(|e| (e.0, e.2)).collect(),
    )];
    let mut theory = serde_json::Map::new();
    for (name, backend) in [
        ("quadrature", MaxMomentBackend::quadrature()),
        ("gumbel", MaxMomentBackend::gumbel()),
    ] {
        let traj = run_dmfp(&prior, &DmfpMode::Optimal, &backend, max_iters, 1e-10).map_err(err)?;
        let pts: Vec<(f64, f64, f64)> = shown
            .iter()
            .map(|&(_, n)| {
                let (m, v) = pooled(traj.at(n));
                (n as f64, m, v)
            })
            .collect();
        mean_series.push(Series::new(name, pts.iter().map(|p| (p.0, p.1)).collect()).dashed());
        var_series.push(Series::new(name, pts.iter().map(|p| (p.0, p.2)).collect()).dashed());
        let (fm, fv) = pooled(traj.last());
        theory.insert(
            name.into(),
            json!({ "fixed_point_mean": fm, "fixed_point_var": fv, "series": pts }),
        );
    }
    let (em, ev) = pooled(&stats.final_field());
    Ok(json!({
        "empirical": { "fixed_point_mean": em, "fixed_point_var": ev, "series": empirical },
        "theory": Value::Object(theory),
        "replicates": stats.replicates,
        "non_converged": stats.non_converged.len(),
        "mean_svg": plot(mean_series, "Q-value mean", "mean"),
        "var_svg": plot(var_series, "Q-value variance", "variance"),
    })
    .to_string())
}

/// Mean and variance of the maximum of `count` i.i.d. standard normals for
/// `count = 1..=max_actions`, quadrature against the Gumbel approximation.
pub fn max_moments_json(max_actions: usize) -> Result<String, String> {
    if !(1..=4096).contains(&max_actions) {
        return Err("max_actions must lie in 1..=4096".into());
    }
    let mut counts: Vec<usize> = (1..=max_actions.min(16)).collect();
    let mut c = 16.0f64;
    while (c as usize) < max_actions {
        c *= 1.25;
        counts.push((c as usize).min(max_actions));
    }
    counts.dedup();
    let mut rows = Vec::new();
    for &k in &counts {
        let (qm, qv) =
            max_moments_identical(0.0, 1.0, k, &MaxMomentBackend::quadrature()).map_err(err)?;
        let (gm, gv) =
            max_moments_identical(0.0, 1.0, k, &MaxMomentBackend::gumbel()).map_err(err)?;
        rows.push((k as f64, qm, qv, gm, gv));
    }
    let pick = |f: fn(&(f64, f64, f64, f64, f64)) -> f64| {
        rows.iter().map(|r| (r.0, f(r))).collect::<Vec<_>>()
    };
    let svg = svg_string(
        &[
            Series::new("mean, quadrature", pick(|r| r.1)),
            Series::new("mean, Gumbel", pick(|r| r.3)).dashed(),
            Series::new("variance, quadrature", pick(|r| r.2)),
            Series::new("variance, Gumbel", pick(|r| r.4)).dashed(),
        ],
        &PlotLabels {
            title: "Maximum of |A| standard normals".into(),
            x: "|A|".into(),
            y: "moment".into(),
        },
    );
    Ok(json!({ "rows": rows, "svg": svg }).to_string())
}

/// Gumbel constants, closed-form fixed point and Jacobian spectrum of the
/// i.i.d. recursion.
pub fn stability_json(
    discount: f64,
    num_actions: usize,
    reward_mean: f64,
    reward_std: f64,
) -> Result<String, String> {
    let params = IidParams::new(discount, reward_mean, reward_std * reward_std, num_actions);
    let consts = gumbel_constants(num_actions).map_err(err)?;
    let (mu, nu) = iid_fixed_point(&params, &consts).map_err(err)?;
    let spectrum = jacobian_spectrum(&params, &consts, nu).map_err(err)?;
    Ok(json!({
        "b": consts.b,
        "a": consts.a,
        "fixed_point_mean": mu,
        "fixed_point_var": nu,
        "jacobian": spectrum.jacobian,
        "eigenvalues": spectrum.eigenvalues,
        "spectral_radius": spectrum.spectral_radius(),
    })
    .to_string())
}

fn js(r: Result<String, String>) -> Result<String, JsError> {
    r.map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn compare(
    num_states: usize,
    num_actions: usize,
    discount: f64,
    alpha: &str,
    reward_mean: f64,
    reward_std: f64,
    replicates: usize,
    seed: u64,
) -> Result<String, JsError> {
    js(compare_json(
        num_states,
        num_actions,
        discount,
        alpha,
        reward_mean,
        reward_std,
        replicates,
        seed,
    ))
}

#[wasm_bindgen]
pub fn max_moments(max_actions: usize) -> Result<String, JsError> {
    js(max_moments_json(max_actions))
}

#[wasm_bindgen]
pub fn stability(
    discount: f64,
    num_actions: usize,
    reward_mean: f64,
    reward_std: f64,
) -> Result<String, JsError> {
    js(stability_json(
        discount,
        num_actions,
        reward_mean,
        reward_std,
    ))
}
