//! Special functions, bisection, Simpson quadrature and streaming moments.

use serde::{Deserialize, Serialize};

use crate::error::{DmfpError, Result};

pub const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
pub const EULER_MASCHERONI: f64 = 0.577_215_664_901_532_9;

/// Doublings allowed before [`integrate`] gives up (about 8M panels).
pub const MAX_DOUBLINGS: u32 = 22;

// Rational Chebyshev coefficients for erf/erfc (W. J. Cody, 1969).
const ERF_A: [f64; 5] = [
    3.161_123_743_870_565_6e0,
    1.138_641_541_510_501_6e2,
    3.774_852_376_853_020_2e2,
    3.209_377_589_138_469_5e3,
    1.857_777_061_846_031_5e-1,
];
const ERF_B: [f64; 4] = [
    2.360_129_095_234_412_1e1,
    2.440_246_379_344_441_7e2,
    1.282_616_526_077_372_3e3,
    2.844_236_833_439_170_6e3,
];
const ERFC_C: [f64; 9] = [
    5.641_884_969_886_700_9e-1,
    8.883_149_794_388_376e0,
    6.611_919_063_714_163e1,
    2.986_351_381_974_001_3e2,
    8.819_522_212_417_691e2,
    1.712_047_612_634_070_6e3,
    2.051_078_377_826_071_5e3,
    1.230_339_354_797_997_2e3,
    2.153_115_354_744_038_5e-8,
];
const ERFC_D: [f64; 8] = [
    1.574_492_611_070_983_5e1,
    1.176_939_508_913_125e2,
    5.371_811_018_620_098_6e2,
    1.621_389_574_566_690_2e3,
    3.290_799_235_733_459_6e3,
    4.362_619_090_143_247e3,
    3.439_367_674_143_721_6e3,
    1.230_339_354_803_749_4e3,
];
const ERFC_P: [f64; 6] = [
    3.053_266_349_612_323_4e-1,
    3.603_448_999_498_044e-1,
    1.257_817_261_112_292_5e-1,
    1.608_378_514_874_227_7e-2,
    6.587_491_615_298_378e-4,
    1.631_538_713_730_209_8e-2,
];
const ERFC_Q: [f64; 5] = [
    2.568_520_192_289_822_4e0,
    1.872_952_849_923_460_5e0,
    5.279_051_029_514_284e-1,
    6.051_834_131_244_132e-2,
    2.335_204_976_268_691_8e-3,
];
const FRAC_1_SQRT_PI: f64 = 0.564_189_583_547_756_3;

/// `exp(-y^2)` evaluated as `exp(-r^2) exp(-(y-r)(y+r))` with `r` rounded to
/// 1/16 so the large part is exact.
#[inline]
fn exp_neg_sq(y: f64) -> f64 {
    let r = (y * 16.0).trunc() / 16.0;
    let del = (y - r) * (y + r);
    (-r * r).exp() * (-del).exp()
}

/// Complementary error function, relative error near machine precision.
pub fn erfc(x: f64) -> f64 {
    let y = x.abs();
    let val = if y <= 0.468_75 {
        let ysq = if y > 1.11e-16 { y * y } else { 0.0 };
        let mut num = ERF_A[4] * ysq;
        let mut den = ysq;
        for i in 0..3 {
            num = (num + ERF_A[i]) * ysq;
            den = (den + ERF_B[i]) * ysq;
        }
        return 1.0 - x * (num + ERF_A[3]) / (den + ERF_B[3]);
    } else if y <= 4.0 {
        let mut num = ERFC_C[8] * y;
        let mut den = y;
        for i in 0..7 {
            num = (num + ERFC_C[i]) * y;
            den = (den + ERFC_D[i]) * y;
        }
        exp_neg_sq(y) * (num + ERFC_C[7]) / (den + ERFC_D[7])
    } else if y >= 26.543 {
        0.0
    } else {
        let ysq = 1.0 / (y * y);
        let mut num = ERFC_P[5] * ysq;
        let mut den = ysq;
        for i in 0..4 {
            num = (num + ERFC_P[i]) * ysq;
            den = (den + ERFC_Q[i]) * ysq;
        }
        let r = ysq * (num + ERFC_P[4]) / (den + ERFC_Q[4]);
        exp_neg_sq(y) * (FRAC_1_SQRT_PI - r) / y
    };
    if x < 0.0 {
        2.0 - val
    } else {
        val
    }
}

#[inline]
pub fn std_normal_pdf(x: f64) -> f64 {
    FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Standard normal CDF.
#[inline]
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x * std::f64::consts::FRAC_1_SQRT_2)
}

/// Inverse standard normal CDF: Acklam's rational approximation followed by
/// one Halley correction against [`std_normal_cdf`].
pub fn std_normal_quantile(p: f64) -> f64 {
    if !(p > 0.0 && p < 1.0) {
        return if p == 0.0 {
            f64::NEG_INFINITY
        } else if p == 1.0 {
            f64::INFINITY
        } else {
            f64::NAN
        };
    }
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    const P_LOW: f64 = 0.024_25;
    let x = if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    // Halley step; the error is taken on the smaller tail to avoid cancellation
    let e = if x < 0.0 {
        std_normal_cdf(x) - p
    } else {
        (1.0 - p) - std_normal_cdf(-x)
    };
    let u = e / std_normal_pdf(x);
    x - u / (1.0 + 0.5 * x * u)
}

/// Bisection on a sign-changing bracket. Stops when `|f(x)| <= tol` or the
/// bracket is narrower than `tol`.
pub fn bisect_root<F: Fn(f64) -> f64>(f: F, lo: f64, hi: f64, tol: f64) -> Result<f64> {
    if !(lo < hi) {
        return Err(DmfpError::InvalidArgument(format!(
            "bisection needs lo < hi, got [{lo}, {hi}]"
        )));
    }
    let (mut lo, mut hi) = (lo, hi);
    let mut f_lo = f(lo);
    let f_hi = f(hi);
    if f_lo == 0.0 {
        return Ok(lo);
    }
    if f_hi == 0.0 {
        return Ok(hi);
    }
    if f_lo.signum() == f_hi.signum() || f_lo.is_nan() || f_hi.is_nan() {
        return Err(DmfpError::Bracketing { lo, hi, f_lo, f_hi });
    }
    loop {
        let mid = 0.5 * (lo + hi);
        let f_mid = f(mid);
        if f_mid.abs() <= tol || hi - lo <= tol || mid == lo || mid == hi {
            return Ok(mid);
        }
        if f_mid.signum() == f_lo.signum() {
            lo = mid;
            f_lo = f_mid;
        } else {
            hi = mid;
        }
    }
}

/// Composite Simpson rule with `panels` (even) subintervals.
pub fn simpson<F: Fn(f64) -> f64>(g: F, lo: f64, hi: f64, panels: usize) -> f64 {
    let n = panels.max(2) + panels % 2;
    let h = (hi - lo) / n as f64;
    let mut odd = 0.0;
    let mut even = 0.0;
    for i in 1..n {
        let x = lo + i as f64 * h;
        if i % 2 == 1 {
            odd += g(x);
        } else {
            even += g(x);
        }
    }
    h / 3.0 * (g(lo) + g(hi) + 4.0 * odd + 2.0 * even)
}

/// Composite Simpson with grid doubling until two successive estimates agree
/// within `tol`. Function values are reused across doublings.
pub fn integrate<F: Fn(f64) -> f64>(g: F, lo: f64, hi: f64, tol: f64) -> Result<f64> {
    let [v] = integrate_many(|x| [g(x)], lo, hi, tol)?;
    Ok(v)
}

/// Vector-valued version of [`integrate`]: all components share one grid
/// and the grid is refined until every component has converged.
pub fn integrate_many<const K: usize, F: Fn(f64) -> [f64; K]>(
    g: F,
    lo: f64,
    hi: f64,
    tol: f64,
) -> Result<[f64; K]> {
    if !(lo < hi) {
        if lo == hi {
            return Ok([0.0; K]);
        }
        return Err(DmfpError::InvalidArgument(format!(
            "integration needs lo < hi, got [{lo}, {hi}]"
        )));
    }
    const START_PANELS: usize = 8;
    let width = hi - lo;
    let mut n = START_PANELS;
    let mut h = width / n as f64;
    let ends = add(g(lo), g(hi));
    let mut even = [0.0; K]; // interior points already on the grid, excluding ends
    let mut odd = [0.0; K];
    for i in 1..n {
        let v = g(lo + i as f64 * h);
        if i % 2 == 1 {
            odd = add(odd, v);
        } else {
            even = add(even, v);
        }
    }
    let estimate = |ends: [f64; K], even: [f64; K], odd: [f64; K], h: f64| {
        let mut out = [0.0; K];
        for k in 0..K {
            out[k] = h / 3.0 * (ends[k] + 2.0 * even[k] + 4.0 * odd[k]);
        }
        out
    };
    let mut prev = estimate(ends, even, odd, h);
    let mut last_change = f64::INFINITY;
    for _ in 0..MAX_DOUBLINGS {
        // old odd points become even points; the new midpoints are the odd ones
        even = add(even, odd);
        n *= 2;
        h = width / n as f64;
        let mut new_odd = [0.0; K];
        for i in (1..n).step_by(2) {
            new_odd = add(new_odd, g(lo + i as f64 * h));
        }
        odd = new_odd;
        let cur = estimate(ends, even, odd, h);
        last_change = cur
            .iter()
            .zip(&prev)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if last_change <= tol {
            return Ok(cur);
        }
        prev = cur;
    }
    Err(DmfpError::QuadratureFailure {
        lo,
        hi,
        doublings: MAX_DOUBLINGS,
        last_change,
    })
}

#[inline]
fn add<const K: usize>(mut a: [f64; K], b: [f64; K]) -> [f64; K] {
    for k in 0..K {
        a[k] += b[k];
    }
    a
}

/// Streaming mean and sum of squared deviations (Welford / Chan et al.).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MomentAccumulator {
    pub count: u64,
    pub mean: f64,
    pub m2: f64,
}

impl MomentAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn merge(&mut self, other: &MomentAccumulator) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = *other;
            return;
        }
        let n_a = self.count as f64;
        let n_b = other.count as f64;
        let n = n_a + n_b;
        let delta = other.mean - self.mean;
        self.mean += delta * n_b / n;
        self.m2 += other.m2 + delta * delta * n_a * n_b / n;
        self.count += other.count;
    }

    /// Unbiased variance; zero with fewer than two samples.
    pub fn sample_variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            self.m2 / (self.count - 1) as f64
        }
    }

    /// Standard error of the mean.
    pub fn std_error(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            (self.sample_variance() / self.count as f64).sqrt()
        }
    }
}

impl Extend<f64> for MomentAccumulator {
    fn extend<I: IntoIterator<Item = f64>>(&mut self, iter: I) {
        for x in iter {
            self.push(x);
        }
    }
}

impl FromIterator<f64> for MomentAccumulator {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut acc = MomentAccumulator::new();
        acc.extend(iter);
        acc
    }
}
