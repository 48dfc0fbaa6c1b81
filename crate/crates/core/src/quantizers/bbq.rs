//! Bell Box quantization: Hadamard + RMS normalization, Gaussian CDF, uniform bins,
//! and the linear dequantization `x̂ = γ / 2^(b−1) · q`.

use crate::error::{Error, Result};
use crate::gaussian::{pdf, phi};
use crate::hadamard::HadamardPlan;
use crate::kernelsim::{decode_codes, encode_codes, QuantHeader, QuantizedTensor};
use crate::tensorio::Tensor;

use super::config::{EmaState, Granularity, Method, QuantConfig, Rounding, ScaleParam, DEGENERATE_SIGMA};

/// Where σ comes from: the exact RMS of the transformed input, or the running `E[1/σ]`.
#[derive(Debug, Clone, Copy)]
pub enum SigmaSource<'a> {
    Exact,
    Ema(&'a EmaState),
}

/// Where γ comes from: a (learnable) parameter, or `ζ σ` recomputed on every forward.
#[derive(Debug, Clone, Copy)]
pub enum GammaSource<'a> {
    Param(&'a ScaleParam),
    Dynamic { zeta: f64 },
}

/// Everything the backward pass needs from a forward call.
#[derive(Debug, Clone)]
pub struct QuantizeTrace {
    pub rows: usize,
    pub cols: usize,
    pub cfg: QuantConfig,
    pub rounding: Rounding,
    /// Post-Hadamard, post-RMS values.
    pub v: Vec<f64>,
    /// σ per group.
    pub sigma: Vec<f64>,
    /// Codes before packing (continuous under [`Rounding::Smooth`]).
    pub codes: Vec<f64>,
    /// γ per group as used by this forward.
    pub gamma: Vec<f64>,
    pub dynamic_zeta: Option<f64>,
    pub sigma_from_ema: bool,
}

impl QuantizeTrace {
    pub fn group_len(&self) -> usize {
        self.cfg.granularity.group_len(self.rows, self.cols)
    }

    /// Packs the codes of a floor-rounded trace as a `[rows, cols]` tensor.
    pub fn to_quantized(&self) -> Result<QuantizedTensor> {
        if self.rounding != Rounding::Floor {
            return Err(Error::InvalidArgument("smoothed codes cannot be packed".into()));
        }
        encode_codes(
            &self.codes,
            QuantHeader {
                shape: vec![self.rows, self.cols],
                method: self.cfg.method,
                encoding: self.cfg.encoding,
                bits: self.cfg.bits,
                zero_point: self.cfg.zero_point,
                granularity: self.cfg.granularity,
                scales: self.gamma.iter().map(|&g| g as f32).collect(),
            },
        )
    }
}

#[derive(Debug, Clone)]
pub struct BbqOutput {
    pub xhat: Vec<f64>,
    pub trace: QuantizeTrace,
}

/// Per-group RMS of the blocked Hadamard transform of a `rows x cols` buffer.
pub fn transformed_rms(x: &[f64], rows: usize, cols: usize, plan: &HadamardPlan, granularity: Granularity) -> Result<Vec<f64>> {
    plan.check_cols(cols)?;
    let mut u = x.to_vec();
    plan.apply_in_place(&mut u);
    Ok(group_rms(&u, rows, cols, granularity))
}

pub(crate) fn group_rms(u: &[f64], rows: usize, cols: usize, granularity: Granularity) -> Vec<f64> {
    let len = granularity.group_len(rows, cols);
    u.chunks(len)
        .map(|g| (g.iter().map(|x| x * x).sum::<f64>() / len as f64).sqrt())
        .collect()
}

/// Convenience wrapper of [`transformed_rms`] for tensors.
pub fn rms_sigma(x: &Tensor, plan: &HadamardPlan, granularity: Granularity) -> Result<Vec<f64>> {
    transformed_rms(&x.to_f64(), x.rows(), x.cols(), plan, granularity)
}

/// Bin index `clamp(⌊2^b Φ(v)⌋, 0, 2^b − 1)`.
#[inline]
pub fn phi_bin(v: f64, levels: usize) -> usize {
    let i = (levels as f64 * phi(v)).floor();
    (i.max(0.0) as usize).min(levels - 1)
}

/// Core BBQ forward on a row-major `rows x cols` buffer.
pub fn bbq_forward(
    x: &[f64],
    rows: usize,
    cols: usize,
    cfg: &QuantConfig,
    sigma_src: SigmaSource<'_>,
    gamma_src: GammaSource<'_>,
    rounding: Rounding,
) -> Result<BbqOutput> {
    if x.len() != rows * cols {
        return Err(Error::Shape(format!("{} values for {rows}x{cols}", x.len())));
    }
    cfg.plan.check_cols(cols)?;
    let groups = cfg.granularity.num_groups(rows);
    let group_len = cfg.granularity.group_len(rows, cols);

    let mut u = x.to_vec();
    cfg.plan.apply_in_place(&mut u);

    let sigma: Vec<f64> = match sigma_src {
        SigmaSource::Exact => group_rms(&u, rows, cols, cfg.granularity),
        SigmaSource::Ema(ema) => {
            if !ema.initialized || ema.e_inv_sigma <= 0.0 {
                return Err(Error::Uninitialized("EMA of 1/sigma has not been seeded".into()));
            }
            vec![1.0 / ema.e_inv_sigma; groups]
        }
    };

    let gamma: Vec<f64> = match gamma_src {
        GammaSource::Param(scale) => {
            if !scale.initialized {
                return Err(Error::Uninitialized("scale gamma has not been initialized".into()));
            }
            if scale.gamma.len() != groups {
                return Err(Error::Shape(format!(
                    "{} gamma values for {groups} scale groups",
                    scale.gamma.len()
                )));
            }
            scale.gamma.clone()
        }
        GammaSource::Dynamic { zeta } => sigma.iter().map(|s| zeta * s).collect(),
    };

    let levels = cfg.bits.levels();
    let offset = cfg.bits.half() + cfg.zero_point;
    let mut v = u;
    let mut codes = vec![0.0; v.len()];
    let mut xhat = vec![0.0; v.len()];
    for (g, ((vg, cg), xg)) in v
        .chunks_mut(group_len)
        .zip(codes.chunks_mut(group_len))
        .zip(xhat.chunks_mut(group_len))
        .enumerate()
    {
        let s = sigma[g];
        let step = cfg.step(gamma[g]);
        for ((vi, ci), xi) in vg.iter_mut().zip(cg.iter_mut()).zip(xg.iter_mut()) {
            *vi = if s < DEGENERATE_SIGMA { 0.0 } else { *vi / s };
            *ci = match rounding {
                Rounding::Floor => phi_bin(*vi, levels) as f64 - offset,
                Rounding::Smooth => levels as f64 * phi(*vi) - offset,
            };
            *xi = step * *ci;
        }
    }

    Ok(BbqOutput {
        xhat,
        trace: QuantizeTrace {
            rows,
            cols,
            cfg: *cfg,
            rounding,
            v,
            sigma,
            codes,
            gamma,
            dynamic_zeta: match gamma_src {
                GammaSource::Dynamic { zeta } => Some(zeta),
                GammaSource::Param(_) => None,
            },
            sigma_from_ema: matches!(sigma_src, SigmaSource::Ema(_)),
        },
    })
}

/// Gradients of one BBQ site.
#[derive(Debug, Clone)]
pub struct BbqGrads {
    pub grad_x: Vec<f64>,
    /// ∂L/∂γ per group, already divided by √d. Empty when γ is recomputed per forward.
    pub grad_gamma: Vec<f64>,
}

/// Straight-through backward: the floor is treated as identity, everything else is
/// differentiated exactly (Φ, RMS normalization with σ's dependence on the input, and the
/// self-adjoint Hadamard transform).
pub fn bbq_backward_slices(grad_out: &[f64], trace: &QuantizeTrace, scale: Option<&ScaleParam>) -> Result<BbqGrads> {
    let n = trace.rows * trace.cols;
    if grad_out.len() != n {
        return Err(Error::StaleTrace(format!(
            "gradient has {} elements, trace was recorded for {n}",
            grad_out.len()
        )));
    }
    if trace.dynamic_zeta.is_none() {
        match scale {
            Some(s) if s.gamma == trace.gamma => {}
            Some(_) => {
                return Err(Error::StaleTrace(
                    "gamma changed since the forward pass".into(),
                ))
            }
            None => {
                return Err(Error::InvalidArgument(
                    "a learnable-gamma trace needs its scale parameter".into(),
                ))
            }
        }
    }

    let cfg = &trace.cfg;
    let half = cfg.bits.half();
    let levels = cfg.bits.levels() as f64;
    let group_len = trace.group_len();
    let d = group_len as f64;

    let mut grad_u = vec![0.0; n];
    let mut grad_gamma = Vec::new();
    for (g, ((go, gu), (vg, cg))) in grad_out
        .chunks(group_len)
        .zip(grad_u.chunks_mut(group_len))
        .zip(trace.v.chunks(group_len).zip(trace.codes.chunks(group_len)))
        .enumerate()
    {
        let sigma = trace.sigma[g];
        let step = cfg.step(trace.gamma[g]);
        let code_dot: f64 = go.iter().zip(cg).map(|(a, c)| a * c).sum::<f64>() / half;
        if trace.dynamic_zeta.is_none() {
            grad_gamma.push(code_dot / d.sqrt());
        }
        if sigma < DEGENERATE_SIGMA {
            continue;
        }
        // a_i = ∂L/∂v_i
        for ((gui, &goi), &vi) in gu.iter_mut().zip(go).zip(vg) {
            *gui = goi * step * levels * pdf(vi);
        }
        if trace.sigma_from_ema {
            for gui in gu.iter_mut() {
                *gui /= sigma;
            }
            continue;
        }
        let mean_av = gu.iter().zip(vg).map(|(a, v)| a * v).sum::<f64>() / d;
        // γ = ζσ adds an explicit σ-dependence: ∂L/∂σ += ζ Σ g_i q_i / 2^(b−1).
        let sigma_extra = trace.dynamic_zeta.map_or(0.0, |z| z * code_dot);
        for (gui, &vi) in gu.iter_mut().zip(vg) {
            *gui = (*gui - vi * mean_av) / sigma + sigma_extra * vi / d;
        }
    }
    cfg.plan.apply_in_place(&mut grad_u);
    Ok(BbqGrads {
        grad_x: grad_u,
        grad_gamma,
    })
}

fn header_for(x: &Tensor, cfg: &QuantConfig, method: Method, gamma: &[f64]) -> QuantHeader {
    QuantHeader {
        shape: x.shape().to_vec(),
        method,
        encoding: cfg.encoding,
        bits: cfg.bits,
        zero_point: cfg.zero_point,
        granularity: cfg.granularity,
        scales: gamma.iter().map(|&g| g as f32).collect(),
    }
}

/// Quantizes with the exact per-group σ. Returns the packed tensor and the trace for backward.
pub fn bbq_quantize(x: &Tensor, cfg: &QuantConfig, scale: &ScaleParam) -> Result<(QuantizedTensor, QuantizeTrace)> {
    cfg.validate()?;
    let out = bbq_forward(
        &x.to_f64(),
        x.rows(),
        x.cols(),
        cfg,
        SigmaSource::Exact,
        GammaSource::Param(scale),
        Rounding::Floor,
    )?;
    let qt = encode_codes(&out.trace.codes, header_for(x, cfg, Method::Bbq, &out.trace.gamma))?;
    Ok((qt, out.trace))
}

/// `x̂ = γ / 2^(b−1) · q` per scale group. The Hadamard transform is not undone.
pub fn bbq_dequantize(qt: &QuantizedTensor) -> Result<Tensor> {
    let h = qt.header();
    if !matches!(h.method, Method::Bbq | Method::BbqFast) {
        return Err(Error::InvalidArgument(format!("{:?} tensor passed to BBQ dequantize", h.method)));
    }
    let cols = h.cols();
    let codes = decode_codes(qt);
    let data: Vec<f64> = codes
        .iter()
        .enumerate()
        .map(|(i, &q)| h.step_for_row(i / cols).map(|s| s * q))
        .collect::<Result<_>>()?;
    Tensor::from_f64(h.shape.clone(), &data)
}

pub fn bbq_backward(grad_out: &Tensor, trace: &QuantizeTrace, scale: &ScaleParam) -> Result<(Tensor, Vec<f64>)> {
    let g = bbq_backward_slices(&grad_out.to_f64(), trace, Some(scale))?;
    Ok((Tensor::from_f64(grad_out.shape().to_vec(), &g.grad_x)?, g.grad_gamma))
}

/// `E ← β E + (1 − β) / σ`, seeding `E = 1/σ` on first use.
pub fn bbq_fast_update(ema: EmaState, sigma: f64) -> Result<EmaState> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Domain(format!("EMA update needs sigma > 0, got {sigma}")));
    }
    let e_inv_sigma = if ema.initialized {
        ema.beta * ema.e_inv_sigma + (1.0 - ema.beta) / sigma
    } else {
        1.0 / sigma
    };
    Ok(EmaState {
        e_inv_sigma,
        beta: ema.beta,
        initialized: true,
    })
}

/// Inference-time BBQ: σ replaced by `1 / E[1/σ]`, no RMS reduction.
pub fn bbq_fast_quantize(x: &Tensor, cfg: &QuantConfig, ema: &EmaState, scale: &ScaleParam) -> Result<QuantizedTensor> {
    cfg.validate()?;
    let out = bbq_forward(
        &x.to_f64(),
        x.rows(),
        x.cols(),
        cfg,
        SigmaSource::Ema(ema),
        GammaSource::Param(scale),
        Rounding::Floor,
    )?;
    encode_codes(&out.trace.codes, header_for(x, cfg, Method::BbqFast, &out.trace.gamma))
}
