//! Seeded, bit-reproducible sampling of MDPs from a [`PriorSpec`].
//!
//! The generator is xoshiro256** seeded by splitmix64; both are written out
//! here so that results do not depend on any platform or crate default.
//!
//! ```text
//! splitmix64:  x += 0x9E3779B97F4A7C15
//!              z = x
//!              z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//!              z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//!              return z ^ (z >> 31)
//!
//! xoshiro256**: result = rotl(s1 * 5, 7) * 9
//!               t = s1 << 17
//!               s2 ^= s0; s3 ^= s1; s1 ^= s2; s0 ^= s3
//!               s2 ^= t;  s3 = rotl(s3, 45)
//! ```
//!
//! Replicate `k` of a run with master seed `m` uses
//! `mix64(m + 0x9E3779B97F4A7C15 * (k + 1))` (wrapping arithmetic), where
//! `mix64` is the splitmix64 output function above. Uniforms are the top 53
//! bits of a draw scaled by 2^-53.

use crate::error::{DmfpError, Result};
use crate::types::{validate_prior, PriorSpec, SampledMdp};

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// The splitmix64 finalizer: a bijection on `u64` with full avalanche.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for replicate `index` of a run. Injective in `index` for a fixed
/// master seed and in the master seed for a fixed index.
#[inline]
pub fn derive_replicate_seed(master: u64, index: u64) -> u64 {
    mix64(master.wrapping_add(GOLDEN_GAMMA.wrapping_mul(index.wrapping_add(1))))
}

#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }
}

/// xoshiro256** generator with normal and gamma variates on top.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rng {
    s: [u64; 4],
}

impl Rng {
    pub fn seed_from_u64(seed: u64) -> Self {
        let mut sm = SplitMix64::new(seed);
        let s = [sm.next_u64(), sm.next_u64(), sm.next_u64(), sm.next_u64()];
        Rng { s }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.s;
        let result = s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform on `[0, 1)`.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on `(0, 1]`, safe to take logs of.
    #[inline]
    pub fn uniform_open0(&mut self) -> f64 {
        1.0 - self.uniform()
    }

    /// Uniform index in `0..n` (Lemire's multiply-shift; bias below 2^-64 * n).
    #[inline]
    pub fn below(&mut self, n: usize) -> usize {
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Standard normal by Box-Muller (cosine branch only, no cached state).
    pub fn standard_normal(&mut self) -> f64 {
        let u1 = self.uniform_open0();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// `ln G` for `G ~ Gamma(shape, 1)`.
    ///
    /// Marsaglia-Tsang for `shape >= 1`; below 1 the boost
    /// `G(shape) = G(shape + 1) * U^(1/shape)` is applied in log space, which
    /// stays finite even when the product underflows (shape = 1/N for large N).
    pub fn ln_gamma_variate(&mut self, shape: f64) -> f64 {
        if shape < 1.0 {
            let boosted = self.marsaglia_tsang(shape + 1.0).ln();
            boosted + self.uniform_open0().ln() / shape
        } else {
            self.marsaglia_tsang(shape).ln()
        }
    }

    pub fn gamma(&mut self, shape: f64) -> f64 {
        self.ln_gamma_variate(shape).exp()
    }

    fn marsaglia_tsang(&mut self, shape: f64) -> f64 {
        let d = shape - 1.0 / 3.0;
        let c = 1.0 / (9.0 * d).sqrt();
        loop {
            let x = self.standard_normal();
            let v = 1.0 + c * x;
            if v <= 0.0 {
                continue;
            }
            let v = v * v * v;
            let u = self.uniform_open0();
            let x2 = x * x;
            if u < 1.0 - 0.0331 * x2 * x2 || u.ln() < 0.5 * x2 + d * (1.0 - v + v.ln()) {
                return d * v;
            }
        }
    }
}

/// Fills `out` with one `Dirichlet(alpha_row)` draw via normalized gamma
/// variates, normalized in log space.
pub fn sample_dirichlet_row_into(alpha_row: &[f64], rng: &mut Rng, out: &mut [f64]) {
    debug_assert_eq!(alpha_row.len(), out.len());
    if out.len() == 1 {
        out[0] = 1.0;
        return;
    }
    let mut max_ln = f64::NEG_INFINITY;
    for (o, &a) in out.iter_mut().zip(alpha_row) {
        *o = rng.ln_gamma_variate(a);
        max_ln = max_ln.max(*o);
    }
    let mut sum = 0.0;
    for o in out.iter_mut() {
        *o = (*o - max_ln).exp();
        sum += *o;
    }
    let inv = 1.0 / sum;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

pub fn sample_dirichlet_row(alpha_row: &[f64], rng: &mut Rng) -> Result<Vec<f64>> {
    if alpha_row.is_empty() || alpha_row.iter().any(|&a| !(a > 0.0 && a.is_finite())) {
        return Err(DmfpError::InvalidArgument(
            "Dirichlet parameters must be finite and > 0".into(),
        ));
    }
    let mut out = vec![0.0; alpha_row.len()];
    sample_dirichlet_row_into(alpha_row, rng, &mut out);
    Ok(out)
}

/// Draws one MDP: every transition row in `(s, a)` order, then every reward
/// in `(s, a)` order, all from one generator seeded with `seed`.
pub fn sample_mdp(prior: &PriorSpec, seed: u64) -> Result<SampledMdp> {
    validate_prior(prior).map_err(DmfpError::InvalidPrior)?;
    Ok(sample_mdp_unchecked(prior, seed))
}

/// [`sample_mdp`] for a prior already known to be valid.
pub(crate) fn sample_mdp_unchecked(prior: &PriorSpec, seed: u64) -> SampledMdp {
    let mut rng = Rng::seed_from_u64(seed);
    let n = prior.num_states;
    let n_sa = prior.num_pairs();
    let mut transitions = vec![0.0; n_sa * n];
    for (sa, row) in transitions.chunks_exact_mut(n).enumerate() {
        sample_dirichlet_row_into(&prior.alpha[sa * n..(sa + 1) * n], &mut rng, row);
    }
    let rewards = prior
        .reward_mean
        .iter()
        .zip(&prior.reward_var)
        .map(|(&mu, &var)| {
            let z = rng.standard_normal();
            if var == 0.0 {
                mu
            } else {
                mu + var.sqrt() * z
            }
        })
        .collect();
    SampledMdp {
        num_states: n,
        num_actions: prior.num_actions,
        discount: prior.discount,
        transitions,
        rewards,
    }
}
