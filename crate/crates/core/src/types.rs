//! Domain types: the Bayesian belief state over MDPs, concrete MDP draws,
//! Q-tables, moment fields and policies, plus the exact Dirichlet moment
//! formulas.
//!
//! Every table is dense and row-major. Transition tensors are laid out as
//! `(s, a, s')` so that the Bellman backup of a fixed `(s, a)` pair reads one
//! contiguous row.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{DmfpError, Result};

/// How the Dirichlet concentration parameters are specified before being
/// expanded to the full `(S, A, S)` tensor.
#[derive(Debug, Clone, PartialEq)]
pub enum AlphaSpec {
    /// The same concentration for every entry.
    Scalar(f64),
    /// Symmetric `alpha = 1/N`.
    InverseN,
    /// One concentration per `(s, a)`, broadcast across next states.
    PerStateAction(Vec<f64>),
    /// The full tensor.
    Full(Vec<f64>),
}

impl AlphaSpec {
    pub fn expand(&self, num_states: usize, num_actions: usize) -> Result<Vec<f64>> {
        let n_sa = num_states * num_actions;
        match self {
            AlphaSpec::Scalar(v) => Ok(vec![*v; n_sa * num_states]),
            AlphaSpec::InverseN => Ok(vec![1.0 / num_states as f64; n_sa * num_states]),
            AlphaSpec::PerStateAction(per) => {
                if per.len() != n_sa {
                    return Err(DmfpError::ShapeMismatch(format!(
                        "per-(s,a) alpha has {} entries, expected {n_sa}",
                        per.len()
                    )));
                }
                Ok(per
                    .iter()
                    .flat_map(|&v| std::iter::repeat_n(v, num_states))
                    .collect())
            }
            AlphaSpec::Full(full) => {
                if full.len() != n_sa * num_states {
                    return Err(DmfpError::ShapeMismatch(format!(
                        "alpha tensor has {} entries, expected {}",
                        full.len(),
                        n_sa * num_states
                    )));
                }
                Ok(full.clone())
            }
        }
    }
}

/// Posterior belief over MDPs: independent Dirichlet transition rows and
/// independent Gaussian reward posteriors for every `(s, a)`.
///
/// Fields are public so that malformed specs can be built and reported on by
/// [`validate_prior`]; [`PriorSpec::new`] only returns valid ones.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorSpec {
    pub num_states: usize,
    pub num_actions: usize,
    pub discount: f64,
    /// `(S, A, S)` concentration tensor.
    pub alpha: Vec<f64>,
    /// `(S, A)` reward posterior means.
    pub reward_mean: Vec<f64>,
    /// `(S, A)` reward posterior variances.
    pub reward_var: Vec<f64>,
}

impl PriorSpec {
    pub fn new(
        num_states: usize,
        num_actions: usize,
        discount: f64,
        alpha: &AlphaSpec,
        reward_mean: Vec<f64>,
        reward_var: Vec<f64>,
    ) -> Result<Self> {
        let alpha = alpha.expand(num_states, num_actions)?;
        let spec = PriorSpec {
            num_states,
            num_actions,
            discount,
            alpha,
            reward_mean,
            reward_var,
        };
        validate_prior(&spec).map_err(DmfpError::InvalidPrior)?;
        Ok(spec)
    }

    /// Prior where every `(s, a)` shares the same reward posterior.
    pub fn iid(
        num_states: usize,
        num_actions: usize,
        discount: f64,
        alpha: &AlphaSpec,
        reward_mean: f64,
        reward_var: f64,
    ) -> Result<Self> {
        let n_sa = num_states * num_actions;
        Self::new(
            num_states,
            num_actions,
            discount,
            alpha,
            vec![reward_mean; n_sa],
            vec![reward_var; n_sa],
        )
    }

    #[inline]
    pub fn num_pairs(&self) -> usize {
        self.num_states * self.num_actions
    }

    /// Concentration row `alpha_{. | s a}`.
    #[inline]
    pub fn alpha_row(&self, s: usize, a: usize) -> &[f64] {
        let n = self.num_states;
        let start = (s * self.num_actions + a) * n;
        &self.alpha[start..start + n]
    }
}

/// One invariant violation of a [`PriorSpec`].
#[derive(Debug, Clone, PartialEq)]
pub enum PriorViolation {
    EmptyDimension {
        num_states: usize,
        num_actions: usize,
    },
    DiscountOutOfRange(f64),
    AlphaShape {
        expected: usize,
        found: usize,
    },
    RewardShape {
        field: &'static str,
        expected: usize,
        found: usize,
    },
    NonPositiveAlpha {
        s: usize,
        a: usize,
        next: usize,
        value: f64,
    },
    NonFiniteRewardMean {
        s: usize,
        a: usize,
        value: f64,
    },
    NegativeRewardVar {
        s: usize,
        a: usize,
        value: f64,
    },
}

impl fmt::Display for PriorViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PriorViolation::EmptyDimension {
                num_states,
                num_actions,
            } => write!(
                f,
                "state and action counts must be positive (got N={num_states}, A={num_actions})"
            ),
            PriorViolation::DiscountOutOfRange(b) => {
                write!(f, "discount out of range: {b} not in [0, 1)")
            }
            PriorViolation::AlphaShape { expected, found } => {
                write!(f, "alpha has {found} entries, expected {expected}")
            }
            PriorViolation::RewardShape {
                field,
                expected,
                found,
            } => write!(f, "{field} has {found} entries, expected {expected}"),
            PriorViolation::NonPositiveAlpha { s, a, next, value } => write!(
                f,
                "alpha at (s={s}, a={a}, s'={next}) must be > 0, got {value}"
            ),
            PriorViolation::NonFiniteRewardMean { s, a, value } => {
                write!(f, "reward mean at (s={s}, a={a}) is not finite: {value}")
            }
            PriorViolation::NegativeRewardVar { s, a, value } => write!(
                f,
                "reward variance at (s={s}, a={a}) must be >= 0, got {value}"
            ),
        }
    }
}

/// Checks every [`PriorSpec`] invariant and reports all violations with
/// their coordinates.
pub fn validate_prior(spec: &PriorSpec) -> std::result::Result<(), Vec<PriorViolation>> {
    let mut out = Vec::new();
    let (n, na) = (spec.num_states, spec.num_actions);
    if n == 0 || na == 0 {
        out.push(PriorViolation::EmptyDimension {
            num_states: n,
            num_actions: na,
        });
    }
    if !(spec.discount >= 0.0 && spec.discount < 1.0) {
        out.push(PriorViolation::DiscountOutOfRange(spec.discount));
    }
    let n_sa = n * na;
    if spec.alpha.len() != n_sa * n {
        out.push(PriorViolation::AlphaShape {
            expected: n_sa * n,
            found: spec.alpha.len(),
        });
    } else {
        for (i, &v) in spec.alpha.iter().enumerate() {
            // NaN fails this test too
            if !(v > 0.0 && v.is_finite()) {
                let next = i % n;
                let sa = i / n;
                out.push(PriorViolation::NonPositiveAlpha {
                    s: sa / na,
                    a: sa % na,
                    next,
                    value: v,
                });
            }
        }
    }
    if spec.reward_mean.len() != n_sa {
        out.push(PriorViolation::RewardShape {
            field: "reward_mean",
            expected: n_sa,
            found: spec.reward_mean.len(),
        });
    } else {
        for (i, &v) in spec.reward_mean.iter().enumerate() {
            if !v.is_finite() {
                out.push(PriorViolation::NonFiniteRewardMean {
                    s: i / na,
                    a: i % na,
                    value: v,
                });
            }
        }
    }
    if spec.reward_var.len() != n_sa {
        out.push(PriorViolation::RewardShape {
            field: "reward_var",
            expected: n_sa,
            found: spec.reward_var.len(),
        });
    } else {
        for (i, &v) in spec.reward_var.iter().enumerate() {
            if !(v >= 0.0 && v.is_finite()) {
                out.push(PriorViolation::NegativeRewardVar {
                    s: i / na,
                    a: i % na,
                    value: v,
                });
            }
        }
    }
    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}

/// One concrete MDP drawn from a [`PriorSpec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledMdp {
    pub num_states: usize,
    pub num_actions: usize,
    pub discount: f64,
    /// `(S, A, S)` row-stochastic transition tensor.
    pub transitions: Vec<f64>,
    /// `(S, A)` mean rewards.
    pub rewards: Vec<f64>,
}

/// Row sums of a transition tensor must be within this of 1.
pub const SIMPLEX_TOL: f64 = 1e-12;

impl SampledMdp {
    pub fn new(
        num_states: usize,
        num_actions: usize,
        discount: f64,
        transitions: Vec<f64>,
        rewards: Vec<f64>,
    ) -> Result<Self> {
        let n_sa = num_states * num_actions;
        if n_sa == 0 {
            return Err(DmfpError::InvalidArgument("empty MDP".into()));
        }
        if transitions.len() != n_sa * num_states || rewards.len() != n_sa {
            return Err(DmfpError::ShapeMismatch(format!(
                "transitions {} / rewards {} entries for N={num_states}, A={num_actions}",
                transitions.len(),
                rewards.len()
            )));
        }
        if !(0.0..1.0).contains(&discount) {
            return Err(DmfpError::InvalidArgument(format!(
                "discount {discount} not in [0, 1)"
            )));
        }
        for (sa, row) in transitions.chunks_exact(num_states).enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > SIMPLEX_TOL {
                return Err(DmfpError::InvalidArgument(format!(
                    "transition row (s={}, a={}) is not on the simplex (sum {sum})",
                    sa / num_actions,
                    sa % num_actions
                )));
            }
        }
        if rewards.iter().any(|r| !r.is_finite()) {
            return Err(DmfpError::InvalidArgument("non-finite reward".into()));
        }
        Ok(SampledMdp {
            num_states,
            num_actions,
            discount,
            transitions,
            rewards,
        })
    }

    #[inline]
    pub fn row(&self, s: usize, a: usize) -> &[f64] {
        let n = self.num_states;
        let start = (s * self.num_actions + a) * n;
        &self.transitions[start..start + n]
    }

    #[inline]
    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.rewards[s * self.num_actions + a]
    }
}

/// Dense `(S, A)` table of Q-values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QTable {
    pub num_states: usize,
    pub num_actions: usize,
    pub values: Vec<f64>,
}

impl QTable {
    pub fn zeros(num_states: usize, num_actions: usize) -> Self {
        Self::filled(num_states, num_actions, 0.0)
    }

    pub fn filled(num_states: usize, num_actions: usize, value: f64) -> Self {
        QTable {
            num_states,
            num_actions,
            values: vec![value; num_states * num_actions],
        }
    }

    pub fn from_values(num_states: usize, num_actions: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != num_states * num_actions {
            return Err(DmfpError::ShapeMismatch(format!(
                "{} values for a {num_states}x{num_actions} table",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(DmfpError::InvalidArgument("non-finite Q-value".into()));
        }
        Ok(QTable {
            num_states,
            num_actions,
            values,
        })
    }

    #[inline]
    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s * self.num_actions + a]
    }

    #[inline]
    pub fn row(&self, s: usize) -> &[f64] {
        &self.values[s * self.num_actions..(s + 1) * self.num_actions]
    }

    /// `max_a Q(s, a)` for every state.
    pub fn state_values(&self) -> Vec<f64> {
        self.values
            .chunks_exact(self.num_actions)
            .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect()
    }

    pub fn sup_distance(&self, other: &QTable) -> f64 {
        sup_distance(&self.values, &other.values)
    }
}

pub(crate) fn sup_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Per-`(s, a)` posterior mean and variance of Q-values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentField {
    pub num_states: usize,
    pub num_actions: usize,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl MomentField {
    pub fn zeros(num_states: usize, num_actions: usize) -> Self {
        Self::filled(num_states, num_actions, 0.0, 0.0)
    }

    pub fn filled(num_states: usize, num_actions: usize, mean: f64, var: f64) -> Self {
        let n = num_states * num_actions;
        MomentField {
            num_states,
            num_actions,
            mean: vec![mean; n],
            var: vec![var; n],
        }
    }

    pub fn new(
        num_states: usize,
        num_actions: usize,
        mean: Vec<f64>,
        var: Vec<f64>,
    ) -> Result<Self> {
        let n = num_states * num_actions;
        if mean.len() != n || var.len() != n {
            return Err(DmfpError::ShapeMismatch(format!(
                "moment field needs {n} entries, got mean {} / var {}",
                mean.len(),
                var.len()
            )));
        }
        if var.iter().any(|v| !(*v >= 0.0)) {
            return Err(DmfpError::InvalidArgument("negative variance".into()));
        }
        Ok(MomentField {
            num_states,
            num_actions,
            mean,
            var,
        })
    }

    #[inline]
    pub fn mean_at(&self, s: usize, a: usize) -> f64 {
        self.mean[s * self.num_actions + a]
    }

    #[inline]
    pub fn var_at(&self, s: usize, a: usize) -> f64 {
        self.var[s * self.num_actions + a]
    }

    /// Largest absolute change of either table.
    pub fn sup_change(&self, other: &MomentField) -> f64 {
        sup_distance(&self.mean, &other.mean).max(sup_distance(&self.var, &other.var))
    }
}

/// Deterministic stationary policy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Policy {
    pub num_actions: usize,
    pub action: Vec<usize>,
}

impl Policy {
    pub fn new(num_actions: usize, action: Vec<usize>) -> Result<Self> {
        if let Some((s, &a)) = action.iter().enumerate().find(|(_, &a)| a >= num_actions) {
            return Err(DmfpError::InvalidArgument(format!(
                "policy action {a} at state {s} out of range 0..{num_actions}"
            )));
        }
        Ok(Policy {
            num_actions,
            action,
        })
    }

    pub fn num_states(&self) -> usize {
        self.action.len()
    }
}

fn check_alpha_row(alpha_row: &[f64]) -> Result<f64> {
    if alpha_row.is_empty() {
        return Err(DmfpError::InvalidArgument("empty alpha row".into()));
    }
    if let Some((i, &v)) = alpha_row
        .iter()
        .enumerate()
        .find(|(_, &v)| !(v > 0.0 && v.is_finite()))
    {
        return Err(DmfpError::InvalidPrior(vec![
            PriorViolation::NonPositiveAlpha {
                s: 0,
                a: 0,
                next: i,
                value: v,
            },
        ]));
    }
    Ok(alpha_row.iter().sum())
}

/// `E[p_i] = alpha_i / sum(alpha)`.
pub fn dirichlet_mean(alpha_row: &[f64]) -> Result<Vec<f64>> {
    let total = check_alpha_row(alpha_row)?;
    Ok(alpha_row.iter().map(|a| a / total).collect())
}

/// Full Dirichlet covariance matrix as rows.
///
/// `C_ii = p_i (1 - p_i) / (1 + a0)`, `C_ij = -p_i p_j / (1 + a0)`.
pub fn dirichlet_covariance(alpha_row: &[f64]) -> Result<Vec<Vec<f64>>> {
    let total = check_alpha_row(alpha_row)?;
    let mean: Vec<f64> = alpha_row.iter().map(|a| a / total).collect();
    let scale = 1.0 / (1.0 + total);
    Ok(mean
        .iter()
        .enumerate()
        .map(|(i, &pi)| {
            mean.iter()
                .enumerate()
                .map(|(j, &pj)| {
                    if i == j {
                        pi * (1.0 - pi) * scale
                    } else {
                        -pi * pj * scale
                    }
                })
                .collect()
        })
        .collect())
}
