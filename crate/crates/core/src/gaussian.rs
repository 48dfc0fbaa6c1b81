//! Standard Gaussian CDF/quantile, the quantile boundary table used by the binary-search
//! kernel, and the magnitude-matching constant ζ*.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// ζ* as estimated by [`estimate_zeta_star`] at 10^7 samples; the analytic optimum is 3/sqrt(π).
pub const ZETA_STAR: f64 = 1.694;

/// Fixed ζ for the per-forward γ recomputation variant.
pub const ZETA_VISION: f64 = 2.45;

/// Standard normal CDF Φ(v) = ½ erfc(−v/√2).
///
/// `erfc` comes from `libm` (musl port, < 1 ulp), so the absolute error is far below 1e-7
/// and the result is monotone on finite input.
#[inline]
pub fn phi(v: f64) -> f64 {
    0.5 * libm::erfc(-v * std::f64::consts::FRAC_1_SQRT_2)
}

/// Standard normal density.
#[inline]
pub fn pdf(v: f64) -> f64 {
    FRAC_1_SQRT_2PI * (-0.5 * v * v).exp()
}

// Acklam's rational approximation (relative error ~1.15e-9 before refinement).
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
const P_LOW: f64 = 0.02425;

fn acklam(p: f64) -> f64 {
    if p < P_LOW {
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
    }
}

/// Standard normal quantile Φ⁻¹(p) for `p` in (0, 1): Acklam's approximation plus one
/// Newton step against [`phi`].
pub fn phi_inv(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!("phi_inv requires 0 < p < 1, got {p}")));
    }
    if p == 0.5 {
        return Ok(0.0);
    }
    let x = acklam(p);
    Ok(x - (phi(x) - p) / pdf(x))
}

/// Quantile boundaries `Φ⁻¹(i / 2^b)` for `i = 0..2^b`, with `boundaries[0] = -inf`.
#[derive(Debug, Clone, PartialEq)]
pub struct InvCdfTable {
    bits: u32,
    boundaries: Vec<f64>,
}

impl InvCdfTable {
    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn boundaries(&self) -> &[f64] {
        &self.boundaries
    }

    /// Bin index `i` such that `boundaries[i] <= v < boundaries[i + 1]`, found with exactly
    /// `b` comparisons.
    #[inline]
    pub fn search(&self, v: f64) -> usize {
        let mut lo = 0usize;
        for step in (0..self.bits).rev() {
            let mid = lo + (1usize << step);
            if v >= self.boundaries[mid] {
                lo = mid;
            }
        }
        lo
    }
}

pub fn build_inv_cdf_table(bits: u32) -> Result<InvCdfTable> {
    if !(1..=4).contains(&bits) {
        return Err(Error::InvalidArgument(format!("bits must be in 1..=4, got {bits}")));
    }
    let n = 1usize << bits;
    let half = n / 2;
    let mut boundaries = vec![0.0; n];
    boundaries[0] = f64::NEG_INFINITY;
    // Computed on the upper half and mirrored so the table is exactly antisymmetric.
    for i in half + 1..n {
        let t = phi_inv(i as f64 / n as f64)?;
        boundaries[i] = t;
        boundaries[n - i] = -t;
    }
    Ok(InvCdfTable { bits, boundaries })
}

/// Result of the Monte-Carlo estimate of ζ* = argmin_ζ E[(v − ζ(2Φ(v) − 1))²].
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct ZetaEstimate {
    pub zeta_star: f64,
    pub mse_at_optimum: f64,
    pub num_samples: usize,
    pub seed: u64,
}

pub const MIN_ZETA_SAMPLES: usize = 1_000_000;

fn normal_stream(seed: u64) -> impl Iterator<Item = f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    std::iter::repeat_with(move || StandardNormal.sample(&mut rng))
}

/// Closed-form least-squares solution of the Monte-Carlo objective, streamed so that
/// 10^7 samples need no storage.
pub fn estimate_zeta_star(num_samples: usize, seed: u64) -> Result<ZetaEstimate> {
    if num_samples < MIN_ZETA_SAMPLES {
        return Err(Error::InvalidArgument(format!(
            "zeta estimation needs at least {MIN_ZETA_SAMPLES} samples, got {num_samples}"
        )));
    }
    let (mut svv, mut svg, mut sgg) = (0.0f64, 0.0f64, 0.0f64);
    for v in normal_stream(seed).take(num_samples) {
        let g = 2.0 * phi(v) - 1.0;
        svv += v * v;
        svg += v * g;
        sgg += g * g;
    }
    let zeta = svg / sgg;
    let mse = (svv - 2.0 * zeta * svg + zeta * zeta * sgg) / num_samples as f64;
    Ok(ZetaEstimate {
        zeta_star: zeta,
        mse_at_optimum: mse,
        num_samples,
        seed,
    })
}

/// Materialized Monte-Carlo sample of the ζ objective, for evaluating the MSE at arbitrary ζ
/// and for the literal gradient-descent solve.
pub struct ZetaObjective {
    v: Vec<f64>,
    g: Vec<f64>,
}

impl ZetaObjective {
    /// Draws the same sample sequence as [`estimate_zeta_star`] for a given seed.
    pub fn sample(num_samples: usize, seed: u64) -> Self {
        let v: Vec<f64> = normal_stream(seed).take(num_samples).collect();
        let g = v.iter().map(|&x| 2.0 * phi(x) - 1.0).collect();
        Self { v, g }
    }

    pub fn mse(&self, zeta: f64) -> f64 {
        let s: f64 = self
            .v
            .iter()
            .zip(&self.g)
            .map(|(&v, &g)| (v - zeta * g).powi(2))
            .sum();
        s / self.v.len() as f64
    }

    fn gradient(&self, zeta: f64) -> f64 {
        let s: f64 = self
            .v
            .iter()
            .zip(&self.g)
            .map(|(&v, &g)| -2.0 * g * (v - zeta * g))
            .sum();
        s / self.v.len() as f64
    }

    pub fn closed_form(&self) -> f64 {
        let svg: f64 = self.v.iter().zip(&self.g).map(|(v, g)| v * g).sum();
        let sgg: f64 = self.g.iter().map(|g| g * g).sum();
        svg / sgg
    }

    /// Full-batch gradient descent on the sampled MSE, starting from ζ = 1.
    pub fn gradient_descent(&self, lr: f64, max_steps: usize, tol: f64) -> f64 {
        let mut zeta = 1.0;
        for _ in 0..max_steps {
            let step = lr * self.gradient(zeta);
            zeta -= step;
            if step.abs() < tol {
                break;
            }
        }
        zeta
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phi_reference_points() {
        assert_eq!(phi(0.0), 0.5);
        assert!((phi(0.674_489_750_196_081_8) - 0.75).abs() <= 1e-7);
        assert!((phi(1.150_349_380_376_008_3) - 0.875).abs() <= 1e-7);
        // Φ(−1) from standard normal tables.
        assert!((phi(-1.0) - 0.158_655_253_931_457_07).abs() <= 1e-12);
    }

    #[test]
    fn phi_inv_reference_points() {
        assert_eq!(phi_inv(0.5).unwrap(), 0.0);
        assert!((phi_inv(0.75).unwrap() - 0.674_489_750_196_081_8).abs() <= 1e-9);
        assert!((phi_inv(3.0 / 8.0).unwrap() + 0.318_639_363_964_375_2).abs() <= 1e-9);
    }

    #[test]
    fn phi_inv_domain() {
        for p in [0.0, 1.0, -0.1, 1.5, f64::NAN] {
            assert!(matches!(phi_inv(p), Err(Error::Domain(_))), "p = {p}");
        }
    }

    #[test]
    fn tables() {
        let t1 = build_inv_cdf_table(1).unwrap();
        assert_eq!(t1.boundaries(), &[f64::NEG_INFINITY, 0.0]);
        let t2 = build_inv_cdf_table(2).unwrap();
        assert!((t2.boundaries()[3] - 0.674_489_750_196_081_8).abs() <= 1e-9);
        assert_eq!(t2.boundaries()[1], -t2.boundaries()[3]);
        assert!(build_inv_cdf_table(0).is_err());
        assert!(build_inv_cdf_table(5).is_err());
    }

    #[test]
    fn search_uses_left_closed_bins() {
        let t = build_inv_cdf_table(3).unwrap();
        let b = t.boundaries().to_vec();
        for (i, &edge) in b.iter().enumerate().skip(1) {
            assert_eq!(t.search(edge), i);
            assert_eq!(t.search(edge - 1e-12), i - 1);
        }
        assert_eq!(t.search(-1e300), 0);
        assert_eq!(t.search(1e300), 7);
    }

    #[test]
    fn zeta_needs_samples() {
        assert!(estimate_zeta_star(10, 0).is_err());
    }
}
