//! Quantizers sharing the template `x̂ = f⁻¹(r(f(x)))`: a transform `f`, a rounding map `r`
//! onto a finite code set, and a dequantization map `f⁻¹`.

mod bbq;
mod codebook;
mod config;
mod lsq;
mod quest;

pub use bbq::{
    bbq_backward, bbq_backward_slices, bbq_dequantize, bbq_fast_quantize, bbq_fast_update, bbq_forward,
    bbq_quantize, phi_bin, rms_sigma, transformed_rms, BbqGrads, BbqOutput, GammaSource, QuantizeTrace,
    SigmaSource,
};
pub use codebook::{build_nf_codebook, codebook_bins, codebook_dequantize, codebook_quantize, Codebook};
pub use config::{
    Bits, EmaState, Granularity, Method, QuantConfig, Rounding, ScaleParam, DEFAULT_EMA_BETA, DEGENERATE_SIGMA,
    GAMMA_FLOOR,
};
pub use lsq::{lsq_backward, lsq_dequantize, lsq_forward, lsq_init_step, lsq_quantize, LsqConfig};
pub use quest::{
    alpha_star, quest_backward, quest_dequantize, quest_forward, quest_quantize, uniform_gaussian_mse, QuestConfig,
    QuestTrace, ALPHA_GRID_MAX, ALPHA_GRID_MIN, ALPHA_GRID_STEP,
};

use crate::error::Result;
use crate::kernelsim::QuantizedTensor;
use crate::tensorio::Tensor;

/// Common quantize/dequantize interface over every method.
pub trait Quantizer {
    fn quantize(&self, x: &Tensor) -> Result<QuantizedTensor>;
    fn dequantize(&self, qt: &QuantizedTensor) -> Result<Tensor>;
}

/// BBQ with a fixed scale, exact σ.
#[derive(Debug, Clone)]
pub struct BbqQuantizer {
    pub cfg: QuantConfig,
    pub scale: ScaleParam,
}

impl Quantizer for BbqQuantizer {
    fn quantize(&self, x: &Tensor) -> Result<QuantizedTensor> {
        bbq_quantize(x, &self.cfg, &self.scale).map(|(qt, _)| qt)
    }

    fn dequantize(&self, qt: &QuantizedTensor) -> Result<Tensor> {
        bbq_dequantize(qt)
    }
}

/// BBQ with σ taken from the running `E[1/σ]`.
#[derive(Debug, Clone)]
pub struct BbqFastQuantizer {
    pub cfg: QuantConfig,
    pub ema: EmaState,
    pub scale: ScaleParam,
}

impl Quantizer for BbqFastQuantizer {
    fn quantize(&self, x: &Tensor) -> Result<QuantizedTensor> {
        bbq_fast_quantize(x, &self.cfg, &self.ema, &self.scale)
    }

    fn dequantize(&self, qt: &QuantizedTensor) -> Result<Tensor> {
        bbq_dequantize(qt)
    }
}

impl Quantizer for LsqConfig {
    fn quantize(&self, x: &Tensor) -> Result<QuantizedTensor> {
        lsq_quantize(x, self)
    }

    fn dequantize(&self, qt: &QuantizedTensor) -> Result<Tensor> {
        lsq_dequantize(qt)
    }
}

impl Quantizer for QuestConfig {
    fn quantize(&self, x: &Tensor) -> Result<QuantizedTensor> {
        quest_quantize(x, self)
    }

    fn dequantize(&self, qt: &QuantizedTensor) -> Result<Tensor> {
        quest_dequantize(qt, &self.plan)
    }
}

#[derive(Debug, Clone)]
pub struct CodebookQuantizer {
    pub codebook: Codebook,
    pub sigma: f64,
}

impl Quantizer for CodebookQuantizer {
    fn quantize(&self, x: &Tensor) -> Result<QuantizedTensor> {
        codebook_quantize(x, &self.codebook, self.sigma)
    }

    fn dequantize(&self, qt: &QuantizedTensor) -> Result<Tensor> {
        codebook_dequantize(qt, &self.codebook)
    }
}
