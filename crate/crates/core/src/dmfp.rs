//! Dynamic mean field programming: propagation of the posterior mean and
//! variance of Q-value iterates.
//!
//! One step maps a [`MomentField`] `(mu, nu)` over all `(s, a)` to the
//! moments of the next iterate under the prior:
//!
//! ```text
//! (m(s'), v(s'))  = moments of max_a' Q(s', a')            (per next state)
//! mu'(s,a) = mu_r(s,a) + beta * sum_s' pbar(s'|sa) m(s')
//! nu'(s,a) = var_r(s,a) + beta^2 * ( sum_s' C(s',s'|sa) v(s')
//!                                    + Var_pbar[m] / (1 + alpha0(sa)) )
//! ```
//!
//! where `pbar` and `C` are the Dirichlet mean and covariance of the
//! transition row. The double sum over next-state pairs factorizes because
//! Q-values at distinct next states are treated as independent; with the
//! Dirichlet covariance structure it collapses to `O(S)` work per pair.
//!
//! Moments of the maximum come from a [`MaxMomentBackend`]: either the
//! closed-form Type-I extreme value (Gumbel) approximation, or quadrature of
//! the exact product-of-CDFs distribution of a maximum of independent
//! Gaussians.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{DmfpError, Result};
use crate::numerics::{bisect_root, integrate_many, std_normal_cdf, EULER_MASCHERONI};
use crate::parallel;
use crate::types::{validate_prior, MomentField, Policy, PriorSpec};

/// Extreme value constants for the maximum of `action_count` standard
/// normals: `b * sqrt(2 pi) * exp(b^2 / 2) = |A|` and `a = b / (b^2 + 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GumbelConstants {
    pub action_count: usize,
    pub b: f64,
    pub a: f64,
    pub gamma_em: f64,
}

impl GumbelConstants {
    /// `b + a * gamma`, the standardized mean shift of the maximum.
    #[inline]
    pub fn mean_shift(&self) -> f64 {
        self.b + self.a * self.gamma_em
    }

    /// Standardized variance of the maximum used by the closed-form
    /// recursion, `(pi^2 / 6) * a`.
    #[inline]
    pub fn variance_factor(&self) -> f64 {
        PI * PI / 6.0 * self.a
    }
}

pub fn gumbel_constants(action_count: usize) -> Result<GumbelConstants> {
    if action_count == 0 {
        return Err(DmfpError::InvalidArgument(
            "action count must be >= 1".into(),
        ));
    }
    let ln_target = (action_count as f64).ln() - 0.5 * (2.0 * PI).ln();
    // log form of the defining identity; well conditioned over the bracket
    let g = |b: f64| b.ln() + 0.5 * b * b - ln_target;
    let b = bisect_root(g, 1e-8, 10.0, 0.0)?;
    Ok(GumbelConstants {
        action_count,
        b,
        a: b / (b * b + 1.0),
        gamma_em: EULER_MASCHERONI,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Gumbel,
    Quadrature,
}

impl std::str::FromStr for BackendKind {
    type Err = DmfpError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gumbel" => Ok(BackendKind::Gumbel),
            "quadrature" => Ok(BackendKind::Quadrature),
            other => Err(DmfpError::InvalidArgument(format!(
                "unknown backend {other:?} (expected gumbel or quadrature)"
            ))),
        }
    }
}

/// How moments of a maximum of Gaussians are computed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaxMomentBackend {
    pub kind: BackendKind,
    /// Integration range half-width in standard deviations.
    pub tail_width: f64,
    /// Convergence tolerance of the moment integrals (standardized units).
    pub tolerance: f64,
}

impl Default for MaxMomentBackend {
    fn default() -> Self {
        Self::quadrature()
    }
}

impl MaxMomentBackend {
    pub const MIN_TAIL_WIDTH: f64 = 6.0;

    pub fn quadrature() -> Self {
        MaxMomentBackend {
            kind: BackendKind::Quadrature,
            tail_width: 8.0,
            tolerance: 1e-10,
        }
    }

    pub fn gumbel() -> Self {
        MaxMomentBackend {
            kind: BackendKind::Gumbel,
            ..Self::quadrature()
        }
    }

    pub fn of_kind(kind: BackendKind) -> Self {
        match kind {
            BackendKind::Gumbel => Self::gumbel(),
            BackendKind::Quadrature => Self::quadrature(),
        }
    }

    fn check(&self) -> Result<()> {
        if !(self.tail_width >= Self::MIN_TAIL_WIDTH) {
            return Err(DmfpError::InvalidArgument(format!(
                "tail width {} below {}",
                self.tail_width,
                Self::MIN_TAIL_WIDTH
            )));
        }
        if !(self.tolerance > 0.0) {
            return Err(DmfpError::InvalidArgument(
                "quadrature tolerance must be > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Moments `(m, v)` of the maximum of independent Gaussians `N(means[i], vars[i])`.
///
/// The quadrature backend integrates the CDF of the maximum,
/// `F(u) = prod_i Phi((u - mu_i) / sigma_i)`, over `mu_i -/+ w sigma_i`.
/// Zero-variance components are point masses and enter as step factors.
/// The Gumbel backend pools the components into a single identical
/// `(mean(mu), mean(nu))` and applies [`max_moments_identical`].
pub fn max_moments_general(
    means: &[f64],
    vars: &[f64],
    backend: &MaxMomentBackend,
) -> Result<(f64, f64)> {
    check_components(means, vars)?;
    backend.check()?;
    match backend.kind {
        BackendKind::Gumbel => {
            let consts = gumbel_constants(means.len())?;
            Ok(pooled_gumbel(means, vars, &consts))
        }
        BackendKind::Quadrature => quadrature_max_moments(means, vars, backend),
    }
}

fn check_components(means: &[f64], vars: &[f64]) -> Result<()> {
    if means.len() != vars.len() {
        return Err(DmfpError::ShapeMismatch(format!(
            "{} means vs {} variances",
            means.len(),
            vars.len()
        )));
    }
    if means.is_empty() {
        return Err(DmfpError::InvalidArgument(
            "maximum over zero components".into(),
        ));
    }
    if means.iter().any(|m| !m.is_finite()) || vars.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
        return Err(DmfpError::InvalidArgument(
            "means must be finite and variances finite and >= 0".into(),
        ));
    }
    Ok(())
}

#[inline]
fn gumbel_identical(mu: f64, nu: f64, consts: &GumbelConstants) -> (f64, f64) {
    (
        mu + nu.sqrt() * consts.mean_shift(),
        consts.variance_factor() * nu,
    )
}

fn pooled_gumbel(means: &[f64], vars: &[f64], consts: &GumbelConstants) -> (f64, f64) {
    let n = means.len() as f64;
    let mu = means.iter().sum::<f64>() / n;
    let nu = vars.iter().sum::<f64>() / n;
    gumbel_identical(mu, nu, consts)
}

/// Moments of the maximum of `action_count` i.i.d. `N(mu, nu)` variables.
///
/// Gumbel: `m = mu + sqrt(nu) (b + a gamma)`, `v = (pi^2 / 6) a nu`.
/// Quadrature: [`max_moments_general`] with identical components.
pub fn max_moments_identical(
    mu: f64,
    nu: f64,
    action_count: usize,
    backend: &MaxMomentBackend,
) -> Result<(f64, f64)> {
    if !(nu >= 0.0) || !mu.is_finite() {
        return Err(DmfpError::InvalidArgument(format!(
            "need finite mean and nu >= 0, got ({mu}, {nu})"
        )));
    }
    backend.check()?;
    match backend.kind {
        BackendKind::Gumbel => Ok(gumbel_identical(mu, nu, &gumbel_constants(action_count)?)),
        BackendKind::Quadrature => {
            if action_count == 0 {
                return Err(DmfpError::InvalidArgument(
                    "action count must be >= 1".into(),
                ));
            }
            quadrature_identical(mu, nu, action_count, backend)
        }
    }
}

fn quadrature_identical(
    mu: f64,
    nu: f64,
    count: usize,
    backend: &MaxMomentBackend,
) -> Result<(f64, f64)> {
    if count == 1 || nu == 0.0 {
        return Ok((mu, nu));
    }
    let (t_mean, t_var) = standardized_max_moments(
        |t| count as f64 * ln_std_normal_cdf(t),
        -backend.tail_width,
        backend.tail_width,
        backend.tolerance,
    )?;
    let sd = nu.sqrt();
    Ok((mu + sd * t_mean, nu * t_var))
}

/// `ln Phi(z)`, accurate in both tails.
#[inline]
fn ln_std_normal_cdf(z: f64) -> f64 {
    if z > 0.0 {
        (-std_normal_cdf(-z)).ln_1p()
    } else {
        std_normal_cdf(z).ln()
    }
}

fn quadrature_max_moments(
    means: &[f64],
    vars: &[f64],
    backend: &MaxMomentBackend,
) -> Result<(f64, f64)> {
    if means.len() == 1 {
        return Ok((means[0], vars[0]));
    }
    let w = backend.tail_width;
    let mut floor = f64::NEG_INFINITY; // largest deterministic component
    let mut random: Vec<(f64, f64)> = Vec::with_capacity(means.len());
    for (&m, &v) in means.iter().zip(vars) {
        if v == 0.0 {
            floor = floor.max(m);
        } else {
            random.push((m, v.sqrt()));
        }
    }
    if random.is_empty() {
        return Ok((floor, 0.0));
    }
    // the maximum exceeds every component's lower tail point up to the same
    // truncation error as the upper end
    let lo = random
        .iter()
        .map(|(m, s)| m - w * s)
        .fold(f64::NEG_INFINITY, f64::max);
    let hi = random
        .iter()
        .map(|(m, s)| m + w * s)
        .fold(f64::NEG_INFINITY, f64::max);
    if floor >= hi {
        return Ok((floor, 0.0));
    }
    let identical = random.iter().all(|c| *c == random[0]);
    if identical && floor < lo {
        let (m, s) = random[0];
        return quadrature_identical(m, s * s, random.len(), backend);
    }
    let lower = lo.max(floor);
    let scale = random.iter().map(|c| c.1).fold(0.0, f64::max);
    let top = random.iter().map(|c| c.0).fold(f64::NEG_INFINITY, f64::max);
    let center = top.clamp(lower, hi);
    // offsets are taken before adding scale * t so that narrow components
    // far from zero are not quantized by the spacing of `center`
    let ln_cdf = |t: f64| {
        random
            .iter()
            .map(|(m, s)| ln_std_normal_cdf(((center - m) + scale * t) / s))
            .sum::<f64>()
    };
    let (t_mean, t_var) = standardized_max_moments(
        ln_cdf,
        (lower - center) / scale,
        (hi - center) / scale,
        backend.tolerance,
    )?;
    Ok((center + scale * t_mean, scale * scale * t_var))
}

/// Mean and variance of a variable `T` with `ln P(T <= t) = ln_cdf(t)` on
/// `[t_lo, t_hi]` (`t_lo <= 0 <= t_hi`), zero mass below `t_lo` and none
/// above `t_hi`. `F` may jump at `t_lo` when a deterministic component sets
/// a floor. Uses
/// `E[T]   = int_0^hi (1 - F) - int_lo^0 F` and
/// `E[T^2] = int_0^hi 2t (1 - F) + int_lo^0 2|t| F`.
fn standardized_max_moments<G: Fn(f64) -> f64>(
    ln_cdf: G,
    t_lo: f64,
    t_hi: f64,
    tol: f64,
) -> Result<(f64, f64)> {
    let upper = integrate_many(
        |t| {
            let survival = -ln_cdf(t).exp_m1();
            [survival, 2.0 * t * survival]
        },
        0.0,
        t_hi,
        tol,
    )?;
    let lower = integrate_many(
        |t| {
            let f = ln_cdf(t).exp();
            [f, -2.0 * t * f]
        },
        t_lo,
        0.0,
        tol,
    )?;
    let mean = upper[0] - lower[0];
    let second = upper[1] + lower[1];
    Ok((mean, (second - mean * mean).max(0.0)))
}

/// Scalar recursion parameters for an i.i.d. prior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IidParams {
    pub discount: f64,
    pub reward_mean: f64,
    pub reward_var: f64,
    pub action_count: usize,
    /// `sum_s' Var[P(s'|sa)]`, the weight of the next-state max variance.
    /// Its large-`N` limit for `alpha = 1/N` is 1/2, which gives the
    /// closed-form `(pi^2 / 12) a` variance gain.
    pub transition_variance: f64,
}

impl IidParams {
    pub fn new(discount: f64, reward_mean: f64, reward_var: f64, action_count: usize) -> Self {
        IidParams {
            discount,
            reward_mean,
            reward_var,
            action_count,
            transition_variance: 0.5,
        }
    }

    /// Exact scalar parameters of a prior whose entries are all identical.
    /// Returns `None` if the prior is not i.i.d.
    pub fn from_prior(prior: &PriorSpec) -> Option<Self> {
        let alpha = prior.alpha[0];
        if prior.alpha.iter().any(|&a| a != alpha)
            || prior.reward_mean.iter().any(|&m| m != prior.reward_mean[0])
            || prior.reward_var.iter().any(|&v| v != prior.reward_var[0])
        {
            return None;
        }
        let n = prior.num_states as f64;
        Some(IidParams {
            discount: prior.discount,
            reward_mean: prior.reward_mean[0],
            reward_var: prior.reward_var[0],
            action_count: prior.num_actions,
            transition_variance: (n - 1.0) / (n * (n * alpha + 1.0)),
        })
    }

    fn check(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.discount) || !(self.reward_var >= 0.0) {
            return Err(DmfpError::InvalidArgument(format!(
                "need discount in [0, 1) and reward variance >= 0, got ({}, {})",
                self.discount, self.reward_var
            )));
        }
        Ok(())
    }

    fn variance_gain(&self, consts: &GumbelConstants) -> f64 {
        self.discount * self.discount * self.transition_variance * consts.variance_factor()
    }
}

/// Closed-form i.i.d. step:
/// `mu' = mu_r + beta (mu + sqrt(nu) (b + a gamma))`,
/// `nu' = var_r + beta^2 * kappa * (pi^2 / 6) a nu`,
/// with `kappa = 1/2` reducing to `var_r + beta^2 (pi^2 / 12) a nu`.
pub fn iid_dmfp_step(mu: f64, nu: f64, params: &IidParams, consts: &GumbelConstants) -> (f64, f64) {
    let beta = params.discount;
    (
        params.reward_mean + beta * (mu + nu.sqrt() * consts.mean_shift()),
        params.reward_var + params.variance_gain(consts) * nu,
    )
}

/// Scalar i.i.d. step with an arbitrary max-moment backend.
pub fn iid_dmfp_step_with(
    mu: f64,
    nu: f64,
    params: &IidParams,
    backend: &MaxMomentBackend,
) -> Result<(f64, f64)> {
    let (m, v) = max_moments_identical(mu, nu, params.action_count, backend)?;
    let beta = params.discount;
    Ok((
        params.reward_mean + beta * m,
        params.reward_var + beta * beta * params.transition_variance * v,
    ))
}

/// Fixed point of [`iid_dmfp_step`], solving the variance equation first.
pub fn iid_fixed_point(params: &IidParams, consts: &GumbelConstants) -> Result<(f64, f64)> {
    params.check()?;
    let gain = params.variance_gain(consts);
    if !(gain < 1.0) {
        return Err(DmfpError::Instability { gain });
    }
    let nu = params.reward_var / (1.0 - gain);
    let beta = params.discount;
    let mu = (params.reward_mean + beta * nu.sqrt() * consts.mean_shift()) / (1.0 - beta);
    Ok((mu, nu))
}

/// Jacobian of the i.i.d. map at a fixed point and its eigenvalues.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    /// Sorted descending.
    pub eigenvalues: [f64; 2],
    /// Rows `(d mu', d nu')`, columns `(d mu, d nu)`.
    pub jacobian: [[f64; 2]; 2],
}

impl Spectrum {
    pub fn spectral_radius(&self) -> f64 {
        self.eigenvalues[0].abs().max(self.eigenvalues[1].abs())
    }
}

/// The map is upper triangular in `(mu, nu)`, so the eigenvalues are the
/// diagonal: `beta` and the variance gain.
pub fn jacobian_spectrum(
    params: &IidParams,
    consts: &GumbelConstants,
    nu_star: f64,
) -> Result<Spectrum> {
    params.check()?;
    if !(nu_star > 0.0) {
        return Err(DmfpError::InvalidArgument(format!(
            "Jacobian needs nu* > 0, got {nu_star}"
        )));
    }
    let beta = params.discount;
    let gain = params.variance_gain(consts);
    let jacobian = [
        [beta, beta * consts.mean_shift() / (2.0 * nu_star.sqrt())],
        [0.0, gain],
    ];
    let mut eigenvalues = [beta, gain];
    if eigenvalues[1] > eigenvalues[0] {
        eigenvalues.swap(0, 1);
    }
    Ok(Spectrum {
        eigenvalues,
        jacobian,
    })
}

fn check_field(field: &MomentField, prior: &PriorSpec) -> Result<()> {
    validate_prior(prior).map_err(DmfpError::InvalidPrior)?;
    if field.num_states != prior.num_states || field.num_actions != prior.num_actions {
        return Err(DmfpError::ShapeMismatch(format!(
            "moment field {}x{} vs prior {}x{}",
            field.num_states, field.num_actions, prior.num_states, prior.num_actions
        )));
    }
    Ok(())
}

/// Per-next-state max moments for a whole field.
fn next_state_moments(
    field: &MomentField,
    backend: &MaxMomentBackend,
) -> Result<(Vec<f64>, Vec<f64>)> {
    backend.check()?;
    let na = field.num_actions;
    let consts = match backend.kind {
        BackendKind::Gumbel => Some(gumbel_constants(na)?),
        BackendKind::Quadrature => None,
    };
    let per_state = parallel::map_range(field.num_states, |s| {
        let means = &field.mean[s * na..(s + 1) * na];
        let vars = &field.var[s * na..(s + 1) * na];
        match &consts {
            Some(c) => Ok(pooled_gumbel(means, vars, c)),
            None => quadrature_max_moments(means, vars, backend),
        }
    });
    let mut m = Vec::with_capacity(field.num_states);
    let mut v = Vec::with_capacity(field.num_states);
    for r in per_state {
        let (a, b) = r?;
        m.push(a);
        v.push(b);
    }
    Ok((m, v))
}

/// Moment update of one pair given next-state max moments, `O(S)`.
#[inline]
fn pair_update(
    alpha_row: &[f64],
    m: &[f64],
    v: &[f64],
    beta: f64,
    r_mean: f64,
    r_var: f64,
) -> (f64, f64) {
    let a0: f64 = alpha_row.iter().sum();
    let inv_a0 = 1.0 / a0;
    let mut mean_m = 0.0;
    for (a, x) in alpha_row.iter().zip(m) {
        mean_m += a * x;
    }
    mean_m *= inv_a0;
    let mut spread = 0.0; // Var_pbar[m], centered for accuracy
    let mut diag = 0.0; // sum_s' pbar (1 - pbar) v
    for ((a, x), y) in alpha_row.iter().zip(m).zip(v) {
        let p = a * inv_a0;
        let d = x - mean_m;
        spread += p * d * d;
        diag += p * (1.0 - p) * y;
    }
    let inner = (diag + spread) / (1.0 + a0);
    let nu = r_var + beta * beta * inner;
    debug_assert!(nu >= -1e-12);
    (r_mean + beta * mean_m, nu.max(0.0))
}

fn field_update(prior: &PriorSpec, m: &[f64], v: &[f64]) -> MomentField {
    let (n, na) = (prior.num_states, prior.num_actions);
    let beta = prior.discount;
    let mut packed = vec![(0.0, 0.0); n * na];
    parallel::for_each_chunk(&mut packed, na, |s, row| {
        for (a, out) in row.iter_mut().enumerate() {
            let i = s * na + a;
            *out = pair_update(
                prior.alpha_row(s, a),
                m,
                v,
                beta,
                prior.reward_mean[i],
                prior.reward_var[i],
            );
        }
    });
    let (mean, var) = packed.into_iter().unzip();
    MomentField {
        num_states: n,
        num_actions: na,
        mean,
        var,
    }
}

/// One DMFP step for the optimal Q-value iteration.
pub fn general_dmfp_step(
    field: &MomentField,
    prior: &PriorSpec,
    backend: &MaxMomentBackend,
) -> Result<MomentField> {
    check_field(field, prior)?;
    let (m, v) = next_state_moments(field, backend)?;
    Ok(field_update(prior, &m, &v))
}

/// One DMFP step for evaluation of the fixed policy `pi`: the next-state
/// moments are those of `Q(s', pi(s'))`.
pub fn dmfp_policy_step(
    field: &MomentField,
    prior: &PriorSpec,
    pi: &Policy,
) -> Result<MomentField> {
    check_field(field, prior)?;
    if pi.num_states() != prior.num_states || pi.num_actions != prior.num_actions {
        return Err(DmfpError::ShapeMismatch(
            "policy does not match prior".into(),
        ));
    }
    let (m, v): (Vec<f64>, Vec<f64>) = pi
        .action
        .iter()
        .enumerate()
        .map(|(s, &a)| (field.mean_at(s, a), field.var_at(s, a)))
        .unzip();
    Ok(field_update(prior, &m, &v))
}

/// Which operator DMFP tracks.
#[derive(Debug, Clone, PartialEq)]
pub enum DmfpMode {
    Optimal,
    Policy(Policy),
}

/// DMFP iterates from `(0, 0)`. `fields[n]` holds the moments of `Q^n`, so
/// `fields[0]` is the zero field and the trajectory prefix of length `H + 1`
/// is the finite-horizon theory for horizon `H`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DmfpTrajectory {
    pub fields: Vec<MomentField>,
    pub converged: bool,
    /// Sup-norm change of `(mu, nu)` at every step.
    pub changes: Vec<f64>,
}

impl DmfpTrajectory {
    /// Number of steps taken.
    pub fn iterations(&self) -> usize {
        self.fields.len() - 1
    }

    pub fn last(&self) -> &MomentField {
        self.fields
            .last()
            .expect("trajectory holds the initial field")
    }

    /// Moments of `Q^n`; past the end the final (converged) field is used.
    pub fn at(&self, n: usize) -> &MomentField {
        self.fields.get(n).unwrap_or_else(|| self.last())
    }
}

/// Iterates the chosen DMFP step from `(0, 0)` until both tables change by
/// at most `tol` in sup-norm, or `max_iters` steps. With zero discount the
/// step ignores its input, so one step is already the fixed point.
pub fn run_dmfp(
    prior: &PriorSpec,
    mode: &DmfpMode,
    backend: &MaxMomentBackend,
    max_iters: usize,
    tol: f64,
) -> Result<DmfpTrajectory> {
    if !(tol >= 0.0) {
        return Err(DmfpError::InvalidArgument(format!(
            "tolerance must be >= 0, got {tol}"
        )));
    }
    let mut fields = vec![MomentField::zeros(prior.num_states, prior.num_actions)];
    let mut changes = Vec::new();
    let mut converged = false;
    for _ in 0..max_iters {
        let current = fields.last().expect("non-empty");
        let next = match mode {
            DmfpMode::Optimal => general_dmfp_step(current, prior, backend)?,
            DmfpMode::Policy(pi) => dmfp_policy_step(current, prior, pi)?,
        };
        let change = next.sup_change(current);
        changes.push(change);
        fields.push(next);
        if change <= tol || prior.discount == 0.0 {
            converged = true;
            break;
        }
    }
    Ok(DmfpTrajectory {
        fields,
        converged,
        changes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::Rng;
    use crate::types::{dirichlet_covariance, dirichlet_mean, AlphaSpec};
    use proptest::prelude::*;

    const B1: f64 = 0.372_238_898_035_618_6;

    #[test]
    fn gumbel_constants_single_action() {
        let c = gumbel_constants(1).unwrap();
        assert!((c.b - B1).abs() < 1e-12, "{}", c.b);
        assert!((c.a - 0.326_937_807_809_398_5).abs() < 1e-12);
    }

    #[test]
    fn gumbel_constants_satisfy_identities_and_grow() {
        let mut prev = 0.0;
        for n in [1usize, 2, 3, 5, 20, 100, 1024, 100_000] {
            let c = gumbel_constants(n).unwrap();
            let lhs = c.b * (2.0 * PI).sqrt() * (0.5 * c.b * c.b).exp();
            assert!((lhs / n as f64 - 1.0).abs() < 1e-12, "n={n}");
            assert_eq!(c.a, c.b / (c.b * c.b + 1.0));
            assert!(c.b > prev);
            prev = c.b;
        }
        assert!((gumbel_constants(20).unwrap().b - 1.743_932_861_387_843).abs() < 1e-12);
        assert!(gumbel_constants(0).is_err());
    }

    #[test]
    fn max_of_single_component_is_itself() {
        let q = MaxMomentBackend::quadrature();
        assert_eq!(max_moments_general(&[1.3], &[0.7], &q).unwrap(), (1.3, 0.7));
        assert_eq!(max_moments_identical(1.3, 0.7, 1, &q).unwrap(), (1.3, 0.7));
    }

    #[test]
    fn max_of_two_standard_normals() {
        let q = MaxMomentBackend::quadrature();
        let (m, v) = max_moments_general(&[0.0, 0.0], &[1.0, 1.0], &q).unwrap();
        assert!((m - 1.0 / PI.sqrt()).abs() < 1e-9, "{m}");
        assert!((v - (1.0 - 1.0 / PI)).abs() < 1e-9, "{v}");
        // same case through the non-identical path
        let (m, v) = max_moments_general(&[0.0, 1e-300], &[1.0, 1.0], &q).unwrap();
        assert!((m - 1.0 / PI.sqrt()).abs() < 1e-9);
        assert!((v - (1.0 - 1.0 / PI)).abs() < 1e-9);
    }

    #[test]
    fn deterministic_maximum() {
        let q = MaxMomentBackend::quadrature();
        assert_eq!(
            max_moments_general(&[1.0, 3.0, 2.0], &[0.0; 3], &q).unwrap(),
            (3.0, 0.0)
        );
        for backend in [MaxMomentBackend::gumbel(), q] {
            assert_eq!(
                max_moments_identical(2.5, 0.0, 7, &backend).unwrap(),
                (2.5, 0.0)
            );
        }
    }

    #[test]
    fn mixed_deterministic_and_random_components() {
        // max(0, Z): E = 1/sqrt(2 pi), E[M^2] = 1/2
        let q = MaxMomentBackend::quadrature();
        let (m, v) = max_moments_general(&[0.0, 0.0], &[0.0, 1.0], &q).unwrap();
        let e = 1.0 / (2.0 * PI).sqrt();
        assert!((m - e).abs() < 1e-9);
        assert!((v - (0.5 - e * e)).abs() < 1e-9);
        // a floor far above the random part dominates
        assert_eq!(
            max_moments_general(&[100.0, 0.0], &[0.0, 1.0], &q).unwrap(),
            (100.0, 0.0)
        );
    }

    #[test]
    fn gumbel_identical_formula() {
        let c = gumbel_constants(20).unwrap();
        let (m, v) = max_moments_identical(0.5, 4.0, 20, &MaxMomentBackend::gumbel()).unwrap();
        assert!((m - (0.5 + 2.0 * (c.b + c.a * EULER_MASCHERONI))).abs() < 1e-15);
        assert!((v - PI * PI / 6.0 * c.a * 4.0).abs() < 1e-15);
    }

    #[test]
    fn twenty_identical_normals_against_monte_carlo() {
        let (m, v) = max_moments_identical(0.0, 1.0, 20, &MaxMomentBackend::quadrature()).unwrap();
        let mut rng = Rng::seed_from_u64(31337);
        let k = 400_000;
        let acc: crate::numerics::MomentAccumulator = (0..k)
            .map(|_| {
                (0..20)
                    .map(|_| rng.standard_normal())
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        assert!(
            (m - acc.mean).abs() < 4.0 * acc.std_error(),
            "{m} vs {}",
            acc.mean
        );
        assert!((v - acc.sample_variance()).abs() < 5e-3);
    }

    #[test]
    fn backends_agree_for_many_actions() {
        let q = max_moments_identical(0.0, 1.0, 1024, &MaxMomentBackend::quadrature()).unwrap();
        let g = max_moments_identical(0.0, 1.0, 1024, &MaxMomentBackend::gumbel()).unwrap();
        assert!((q.0 - g.0).abs() / q.0 <= 0.02, "{q:?} vs {g:?}");
    }

    #[test]
    fn tail_width_is_guarded() {
        let mut b = MaxMomentBackend::quadrature();
        b.tail_width = 5.0;
        assert!(max_moments_general(&[0.0, 0.0], &[1.0, 1.0], &b).is_err());
        assert!(max_moments_general(&[0.0], &[1.0, 1.0], &MaxMomentBackend::quadrature()).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn shift_equivariance(
            means in prop::collection::vec(-3.0f64..3.0, 2..6),
            sds in prop::collection::vec(0.05f64..2.0, 6),
            shift in -50.0f64..50.0,
        ) {
            let vars: Vec<f64> = sds[..means.len()].iter().map(|s| s * s).collect();
            for backend in [MaxMomentBackend::quadrature(), MaxMomentBackend::gumbel()] {
                let (m0, v0) = max_moments_general(&means, &vars, &backend).unwrap();
                let shifted: Vec<f64> = means.iter().map(|m| m + shift).collect();
                let (m1, v1) = max_moments_general(&shifted, &vars, &backend).unwrap();
                prop_assert!((m1 - m0 - shift).abs() < 1e-8);
                prop_assert!((v1 - v0).abs() < 1e-8);
            }
        }

        #[test]
        fn inflating_variances_never_shrinks_max_variance(
            means in prop::collection::vec(-2.0f64..2.0, 2..6),
            sds in prop::collection::vec(0.05f64..2.0, 6),
            c in 1.01f64..4.0,
        ) {
            let vars: Vec<f64> = sds[..means.len()].iter().map(|s| s * s).collect();
            let inflated: Vec<f64> = vars.iter().map(|v| v * c).collect();
            for backend in [MaxMomentBackend::quadrature(), MaxMomentBackend::gumbel()] {
                let (_, v0) = max_moments_general(&means, &vars, &backend).unwrap();
                let (_, v1) = max_moments_general(&means, &inflated, &backend).unwrap();
                prop_assert!(v1 >= v0 * (1.0 - 1e-9));
            }
        }
    }

    fn params() -> IidParams {
        IidParams::new(0.9, 0.3, 0.04, 20)
    }

    #[test]
    fn iid_step_examples() {
        let c = gumbel_constants(20).unwrap();
        let mut p = params();
        p.discount = 0.0;
        assert_eq!(iid_dmfp_step(5.0, 2.0, &p, &c), (0.3, 0.04));

        let mut p = params();
        p.reward_mean = 0.0;
        let (mu, nu) = iid_dmfp_step(2.0, 0.0, &p, &c);
        assert_eq!((mu, nu), (0.9 * 2.0, 0.04));

        let (mu_s, nu_s) = iid_fixed_point(&params(), &c).unwrap();
        let (mu, nu) = iid_dmfp_step(mu_s, nu_s, &params(), &c);
        assert!((mu - mu_s).abs() < 1e-12 && (nu - nu_s).abs() < 1e-12);
    }

    #[test]
    fn closed_form_variance_gain() {
        let c = gumbel_constants(20).unwrap();
        let p = params();
        let (_, nu) = iid_dmfp_step(0.0, 1.0, &p, &c);
        let expected = p.reward_var + 0.81 * PI * PI / 12.0 * c.a;
        assert!((nu - expected).abs() < 1e-15);
    }

    #[test]
    fn fixed_point_examples() {
        let c = gumbel_constants(20).unwrap();
        let mut p = params();
        p.discount = 0.0;
        assert_eq!(iid_fixed_point(&p, &c).unwrap(), (0.3, 0.04));
        let mut p = params();
        p.reward_var = 0.0;
        let (mu, nu) = iid_fixed_point(&p, &c).unwrap();
        assert_eq!(nu, 0.0);
        assert!((mu - 0.3 / 0.1).abs() < 1e-12);
    }

    #[test]
    fn iterating_reaches_the_closed_form_fixed_point() {
        for (beta, n) in [(0.5, 2usize), (0.9, 20), (0.95, 300)] {
            let p = IidParams::new(beta, -0.2, 0.5, n);
            let c = gumbel_constants(n).unwrap();
            let (mut mu, mut nu) = (0.0, 0.0);
            for _ in 0..500 {
                (mu, nu) = iid_dmfp_step(mu, nu, &p, &c);
            }
            let (mu_s, nu_s) = iid_fixed_point(&p, &c).unwrap();
            assert!(
                (mu - mu_s).abs() < 1e-9 && (nu - nu_s).abs() < 1e-9,
                "beta {beta}"
            );
        }
    }

    #[test]
    fn separated_narrow_components_reduce_to_the_top_one() {
        let means = [0.0, 0.3, 0.7, 0.5];
        let vars = [1e-30, 4e-30, 1e-30, 2e-30];
        let (m, v) = max_moments_general(&means, &vars, &MaxMomentBackend::quadrature()).unwrap();
        assert!((m - 0.7).abs() < 1e-12, "{m}");
        assert!((v - 1e-30).abs() < 1e-34, "{v}");
    }

    #[test]
    fn unstable_gain_is_reported() {
        let c = gumbel_constants(20).unwrap();
        let mut p = params();
        p.transition_variance = 10.0;
        assert!(matches!(
            iid_fixed_point(&p, &c),
            Err(DmfpError::Instability { .. })
        ));
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let c = gumbel_constants(20).unwrap();
        let p = params();
        let (mu_s, nu_s) = iid_fixed_point(&p, &c).unwrap();
        let spec = jacobian_spectrum(&p, &c, nu_s).unwrap();
        assert_eq!(spec.eigenvalues[0], 0.9);
        let h = 1e-6;
        let f = |mu: f64, nu: f64| iid_dmfp_step(mu, nu, &p, &c);
        let d_mu = |i: usize| {
            let (a, b) = (f(mu_s + h, nu_s), f(mu_s - h, nu_s));
            ([a.0, a.1][i] - [b.0, b.1][i]) / (2.0 * h)
        };
        let d_nu = |i: usize| {
            let (a, b) = (f(mu_s, nu_s + h), f(mu_s, nu_s - h));
            ([a.0, a.1][i] - [b.0, b.1][i]) / (2.0 * h)
        };
        for i in 0..2 {
            assert!((spec.jacobian[i][0] - d_mu(i)).abs() < 1e-5);
            assert!((spec.jacobian[i][1] - d_nu(i)).abs() < 1e-5);
        }
        assert!(jacobian_spectrum(&p, &c, 0.0).is_err());
    }

    fn random_prior(n: usize, na: usize, beta: f64, seed: u64) -> PriorSpec {
        let mut rng = Rng::seed_from_u64(seed);
        let alpha: Vec<f64> = (0..n * na * n)
            .map(|_| 0.05 + 2.0 * rng.uniform())
            .collect();
        let rm: Vec<f64> = (0..n * na).map(|_| rng.standard_normal()).collect();
        let rv: Vec<f64> = (0..n * na).map(|_| 0.5 * rng.uniform()).collect();
        PriorSpec::new(n, na, beta, &AlphaSpec::Full(alpha), rm, rv).unwrap()
    }

    fn random_field(n: usize, na: usize, seed: u64) -> MomentField {
        let mut rng = Rng::seed_from_u64(seed);
        MomentField::new(
            n,
            na,
            (0..n * na).map(|_| 2.0 * rng.standard_normal()).collect(),
            (0..n * na).map(|_| rng.uniform()).collect(),
        )
        .unwrap()
    }

    /// Explicit double sum over next-state pairs with `E[M M'] = m m' + delta v`.
    fn double_sum_oracle(prior: &PriorSpec, m: &[f64], v: &[f64]) -> MomentField {
        let (n, na) = (prior.num_states, prior.num_actions);
        let mut field = MomentField::zeros(n, na);
        for s in 0..n {
            for a in 0..na {
                let pbar = dirichlet_mean(prior.alpha_row(s, a)).unwrap();
                let cov = dirichlet_covariance(prior.alpha_row(s, a)).unwrap();
                let i = s * na + a;
                let mean: f64 = pbar.iter().zip(m).map(|(p, x)| p * x).sum();
                let mut var = 0.0;
                for j in 0..n {
                    for k in 0..n {
                        let e_mm = m[j] * m[k] + if j == k { v[j] } else { 0.0 };
                        var += cov[j][k] * e_mm;
                    }
                }
                field.mean[i] = prior.reward_mean[i] + prior.discount * mean;
                field.var[i] = prior.reward_var[i] + prior.discount.powi(2) * var;
            }
        }
        field
    }

    #[test]
    fn collapsed_update_matches_double_sum() {
        for seed in 0..20 {
            let n = 1 + (seed as usize % 8);
            let prior = random_prior(n, 3, 0.8, seed);
            let field = random_field(n, 3, seed + 100);
            let backend = MaxMomentBackend::quadrature();
            let (m, v) = next_state_moments(&field, &backend).unwrap();
            let oracle = double_sum_oracle(&prior, &m, &v);
            let got = general_dmfp_step(&field, &prior, &backend).unwrap();
            for i in 0..n * 3 {
                assert!((got.mean[i] - oracle.mean[i]).abs() < 1e-12);
                assert!((got.var[i] - oracle.var[i]).abs() < 1e-12, "seed {seed}");
                assert!(got.var[i] >= 0.0);
            }
        }
    }

    #[test]
    fn zero_discount_step_returns_reward_moments() {
        let prior = random_prior(4, 2, 0.0, 3);
        let field = random_field(4, 2, 4);
        for backend in [MaxMomentBackend::quadrature(), MaxMomentBackend::gumbel()] {
            let out = general_dmfp_step(&field, &prior, &backend).unwrap();
            assert_eq!(out.mean, prior.reward_mean);
            assert_eq!(out.var, prior.reward_var);
        }
        let pi = Policy::new(2, vec![1, 0, 0, 1]).unwrap();
        let out = dmfp_policy_step(&field, &prior, &pi).unwrap();
        assert_eq!(out.mean, prior.reward_mean);
    }

    #[test]
    fn large_symmetric_prior_reduces_to_scalar_recursion() {
        let n = 10_000;
        let prior = PriorSpec::iid(n, 1, 0.9, &AlphaSpec::InverseN, 0.1, 0.02).unwrap();
        // |A| = 1 keeps the tensor at N^2 entries; the max over actions is the identity
        let field = MomentField::filled(n, 1, 0.7, 0.3);
        let backend = MaxMomentBackend::quadrature();
        let out = general_dmfp_step(&field, &prior, &backend).unwrap();
        let limit =
            iid_dmfp_step_with(0.7, 0.3, &IidParams::new(0.9, 0.1, 0.02, 1), &backend).unwrap();
        assert!((out.mean[17] - limit.0).abs() < 1e-3);
        assert!((out.var[17] - limit.1).abs() < 1e-3);
    }

    #[test]
    fn policy_step_with_one_action_matches_optimal_step() {
        let prior = random_prior(5, 1, 0.7, 9);
        let field = random_field(5, 1, 10);
        let pi = Policy::new(1, vec![0; 5]).unwrap();
        let a = dmfp_policy_step(&field, &prior, &pi).unwrap();
        let b = general_dmfp_step(&field, &prior, &MaxMomentBackend::quadrature()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn known_single_state_policy_fixed_point() {
        // alpha huge: P = 1 almost surely; mu* = mu_r / (1 - beta)
        let prior = PriorSpec::iid(1, 1, 0.5, &AlphaSpec::Scalar(1e12), 1.0, 0.0).unwrap();
        let pi = Policy::new(1, vec![0]).unwrap();
        let traj = run_dmfp(
            &prior,
            &DmfpMode::Policy(pi),
            &MaxMomentBackend::quadrature(),
            200,
            1e-14,
        )
        .unwrap();
        assert!(traj.converged);
        assert!((traj.last().mean[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn run_with_zero_discount_takes_one_step() {
        let prior = random_prior(3, 2, 0.0, 1);
        let traj = run_dmfp(
            &prior,
            &DmfpMode::Optimal,
            &MaxMomentBackend::gumbel(),
            100,
            1e-12,
        )
        .unwrap();
        assert_eq!(traj.iterations(), 1);
        assert!(traj.converged);
        assert_eq!(traj.fields[0], MomentField::zeros(3, 2));
    }

    #[test]
    fn iid_field_trajectory_matches_scalar_recursion() {
        let prior = PriorSpec::iid(30, 5, 0.9, &AlphaSpec::InverseN, 0.2, 0.05).unwrap();
        let params = IidParams::from_prior(&prior).unwrap();
        let consts = gumbel_constants(5).unwrap();
        let traj = run_dmfp(
            &prior,
            &DmfpMode::Optimal,
            &MaxMomentBackend::gumbel(),
            60,
            0.0,
        )
        .unwrap();
        let (mut mu, mut nu) = (0.0, 0.0);
        for field in &traj.fields[1..] {
            (mu, nu) = iid_dmfp_step(mu, nu, &params, &consts);
            for i in 0..field.mean.len() {
                assert!((field.mean[i] - mu).abs() < 1e-12);
                assert!((field.var[i] - nu).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn changes_decay_geometrically() {
        let prior = random_prior(6, 3, 0.8, 12);
        let traj = run_dmfp(
            &prior,
            &DmfpMode::Optimal,
            &MaxMomentBackend::quadrature(),
            400,
            1e-11,
        )
        .unwrap();
        assert!(traj.converged);
        for w in traj.changes[10..].windows(2) {
            if w[0] > 1e-9 {
                assert!(w[1] <= (0.8 + 0.05) * w[0], "{w:?}");
            }
        }
    }
}
