//! QuEST-style Hadamard + RMS uniform quantizer:
//! `f = HT(x)/(α σ) − ½`, `q = ⌊clip(f, −2^(b−1), 2^(b−1)−1)⌉`, `x̂ = HT(α σ (q + ½))`.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{pdf, phi};
use crate::hadamard::HadamardPlan;
use crate::kernelsim::{decode_codes, encode_codes, Encoding, QuantHeader, QuantizedTensor};
use crate::tensorio::Tensor;

use super::bbq::group_rms;
use super::config::{Bits, Granularity, Method, DEGENERATE_SIGMA};

/// Search grid for the clip scale.
pub const ALPHA_GRID_MIN: f64 = 0.01;
pub const ALPHA_GRID_MAX: f64 = 5.0;
pub const ALPHA_GRID_STEP: f64 = 0.001;

/// Exact `E[(v − x̂(v))²]` for `v ~ N(0, 1)` under the uniform quantizer with step `alpha`
/// and reconstruction levels `alpha (k + ½)`, `k = −2^(b−1) .. 2^(b−1) − 1`.
pub fn uniform_gaussian_mse(alpha: f64, bits: Bits) -> f64 {
    let half = bits.half() as i64;
    let mut total = 0.0;
    for k in -half..half {
        let c = alpha * (k as f64 + 0.5);
        let lo = if k == -half { f64::NEG_INFINITY } else { alpha * k as f64 };
        let hi = if k == half - 1 { f64::INFINITY } else { alpha * (k + 1) as f64 };
        total += segment_moment(lo, hi, c);
    }
    total
}

/// `∫_a^b (v − c)² φ(v) dv`.
fn segment_moment(a: f64, b: f64, c: f64) -> f64 {
    let vphi = |v: f64| if v.is_finite() { v * pdf(v) } else { 0.0 };
    let dens = |v: f64| if v.is_finite() { pdf(v) } else { 0.0 };
    (1.0 + c * c) * (phi(b) - phi(a)) - (vphi(b) - vphi(a)) + 2.0 * c * (dens(b) - dens(a))
}

/// Grid-search minimizer of [`uniform_gaussian_mse`], cached per bit width.
pub fn alpha_star(bits: Bits) -> f64 {
    static CACHE: [OnceLock<f64>; 4] = [const { OnceLock::new() }; 4];
    *CACHE[bits.get() as usize - 1].get_or_init(|| {
        let steps = ((ALPHA_GRID_MAX - ALPHA_GRID_MIN) / ALPHA_GRID_STEP).round() as usize;
        let mut best = (f64::INFINITY, ALPHA_GRID_MIN);
        for i in 0..=steps {
            // Integer grid index keeps the reported value free of accumulated rounding.
            let a = (ALPHA_GRID_MIN / ALPHA_GRID_STEP + i as f64).round() * ALPHA_GRID_STEP;
            let mse = uniform_gaussian_mse(a, bits);
            if mse < best.0 {
                best = (mse, a);
            }
        }
        best.1
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuestConfig {
    pub bits: Bits,
    pub alpha_star: f64,
    /// Largest `|f − q|` (in units of one step) whose gradient is kept; see [`quest_backward`].
    pub trust: f64,
    pub plan: HadamardPlan,
    pub granularity: Granularity,
}

impl QuestConfig {
    pub fn new(bits: Bits, plan: HadamardPlan, granularity: Granularity) -> Self {
        Self {
            bits,
            alpha_star: alpha_star(bits),
            trust: 0.5,
            plan,
            granularity,
        }
    }

    /// Trust factor `α* / (2^b − 1)` expressed relative to the clip half-range.
    pub fn trust_factor(&self) -> f64 {
        self.alpha_star / (self.bits.levels() as f64 - 1.0)
    }

    fn code(&self, f: f64) -> f64 {
        let h = self.bits.half();
        f.clamp(-h, h - 1.0).round_ties_even()
    }
}

#[derive(Debug, Clone)]
pub struct QuestTrace {
    pub rows: usize,
    pub cols: usize,
    pub f: Vec<f64>,
    pub codes: Vec<f64>,
    /// `α* σ` per group.
    pub scales: Vec<f64>,
}

/// Forward on a raw buffer: returns `x̂` and the trace.
pub fn quest_forward(x: &[f64], rows: usize, cols: usize, cfg: &QuestConfig) -> Result<(Vec<f64>, QuestTrace)> {
    if x.len() != rows * cols {
        return Err(Error::Shape(format!("{} values for {rows}x{cols}", x.len())));
    }
    cfg.plan.check_cols(cols)?;
    let group_len = cfg.granularity.group_len(rows, cols);
    let mut u = x.to_vec();
    cfg.plan.apply_in_place(&mut u);
    let sigma = group_rms(&u, rows, cols, cfg.granularity);
    let scales: Vec<f64> = sigma.iter().map(|s| cfg.alpha_star * s).collect();
    let mut f = u;
    let mut codes = vec![0.0; f.len()];
    let mut xhat = vec![0.0; f.len()];
    for (g, ((fg, cg), xg)) in f
        .chunks_mut(group_len)
        .zip(codes.chunks_mut(group_len))
        .zip(xhat.chunks_mut(group_len))
        .enumerate()
    {
        let degenerate = sigma[g] < DEGENERATE_SIGMA;
        for ((fi, ci), xi) in fg.iter_mut().zip(cg.iter_mut()).zip(xg.iter_mut()) {
            *fi = if degenerate { -0.5 } else { *fi / scales[g] - 0.5 };
            *ci = cfg.code(*fi);
            *xi = scales[g] * (*ci + 0.5);
        }
    }
    cfg.plan.apply_in_place(&mut xhat);
    Ok((
        xhat,
        QuestTrace {
            rows,
            cols,
            f,
            codes,
            scales,
        },
    ))
}

/// Straight-through backward with trust masking: coordinates (in the transformed domain)
/// whose rounding error `|f − q|` exceeds the trust threshold get zero gradient. Since
/// unclipped rounding error is at most half a step, the default threshold of ½ masks
/// exactly the clipped coordinates.
pub fn quest_backward(grad_out: &[f64], trace: &QuestTrace, cfg: &QuestConfig) -> Result<Vec<f64>> {
    if grad_out.len() != trace.f.len() {
        return Err(Error::StaleTrace(format!(
            "gradient has {} elements, trace was recorded for {}",
            grad_out.len(),
            trace.f.len()
        )));
    }
    let mut g = grad_out.to_vec();
    cfg.plan.apply_in_place(&mut g);
    for ((gi, f), q) in g.iter_mut().zip(&trace.f).zip(&trace.codes) {
        if (f - q).abs() > cfg.trust {
            *gi = 0.0;
        }
    }
    cfg.plan.apply_in_place(&mut g);
    Ok(g)
}

pub fn quest_quantize(x: &Tensor, cfg: &QuestConfig) -> Result<QuantizedTensor> {
    let (_, trace) = quest_forward(&x.to_f64(), x.rows(), x.cols(), cfg)?;
    encode_codes(
        &trace.codes,
        QuantHeader {
            shape: x.shape().to_vec(),
            method: Method::Quest,
            encoding: Encoding::Int4,
            bits: cfg.bits,
            zero_point: 0.0,
            granularity: cfg.granularity,
            scales: trace.scales.iter().map(|&s| s as f32).collect(),
        },
    )
}

/// `HT(α σ (q + ½))` per group; `plan` must match the one used to quantize.
pub fn quest_dequantize(qt: &QuantizedTensor, plan: &HadamardPlan) -> Result<Tensor> {
    let h = qt.header();
    if h.method != Method::Quest {
        return Err(Error::InvalidArgument(format!("{:?} tensor passed to QuEST dequantize", h.method)));
    }
    let cols = h.cols();
    plan.check_cols(cols)?;
    let mut data: Vec<f64> = decode_codes(qt)
        .iter()
        .enumerate()
        .map(|(i, &q)| f64::from(h.scales[h.group_of_row(i / cols)]) * (q + 0.5))
        .collect();
    plan.apply_in_place(&mut data);
    Tensor::from_f64(h.shape.clone(), &data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segment_moments_sum_to_second_moment() {
        // With c = 0 the pieces integrate v² φ, which totals 1.
        let total = segment_moment(f64::NEG_INFINITY, -1.0, 0.0)
            + segment_moment(-1.0, 0.5, 0.0)
            + segment_moment(0.5, f64::INFINITY, 0.0);
        assert!((total - 1.0).abs() < 1e-14);
    }

    #[test]
    fn one_bit_optimum_is_mean_absolute_value() {
        // Levels ±α/2 with the sign as threshold; the MSE optimum is α/2 = E|v| = sqrt(2/π).
        let a = alpha_star(Bits::new(1).unwrap());
        assert!((a / 2.0 - (2.0 / std::f64::consts::PI).sqrt()).abs() < 1e-3);
    }

    #[test]
    fn zero_tensor() {
        let cfg = QuestConfig::new(Bits::new(2).unwrap(), HadamardPlan::new(4).unwrap(), Granularity::PerTensor);
        let x = Tensor::zeros(vec![1, 4]).unwrap();
        let qt = quest_quantize(&x, &cfg).unwrap();
        assert!(decode_codes(&qt).iter().all(|&c| c == 0.0));
        assert!(quest_dequantize(&qt, &cfg.plan).unwrap().data().iter().all(|&v| v == 0.0));
    }
}
