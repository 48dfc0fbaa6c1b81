//! Learned step size quantization: `q = ⌊clip(x/s, −2^(b−1), 2^(b−1)−1)⌉`, `x̂ = s q`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernelsim::{decode_codes, encode_codes, Encoding, QuantHeader, QuantizedTensor};
use crate::tensorio::Tensor;

use super::config::{Bits, Granularity, Method};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LsqConfig {
    pub bits: Bits,
    /// Step size `s`, one per tensor.
    pub step: f64,
}

impl LsqConfig {
    pub fn new(bits: Bits, step: f64) -> Result<Self> {
        let cfg = Self { bits, step };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.bits.get() < 2 {
            return Err(Error::Unsupported("LSQ does not support 1-bit quantization".into()));
        }
        if !(self.step > 0.0) || !self.step.is_finite() {
            return Err(Error::InvalidArgument(format!("LSQ step must be positive, got {}", self.step)));
        }
        Ok(())
    }

    pub fn qn(&self) -> f64 {
        self.bits.half()
    }

    pub fn qp(&self) -> f64 {
        self.bits.half() - 1.0
    }

    /// Code of one element.
    #[inline]
    pub fn code(&self, x: f64) -> f64 {
        (x / self.step).clamp(-self.qn(), self.qp()).round_ties_even()
    }
}

/// Standard LSQ initialization `s = 2 mean|x| / sqrt(Q_p)`.
pub fn lsq_init_step(x: &[f64], bits: Bits) -> Result<f64> {
    if x.is_empty() {
        return Err(Error::InvalidArgument("cannot initialize LSQ step from an empty tensor".into()));
    }
    let qp = (bits.half() - 1.0).max(1.0);
    let mean_abs = x.iter().map(|v| v.abs()).sum::<f64>() / x.len() as f64;
    Ok((2.0 * mean_abs / qp.sqrt()).max(super::config::GAMMA_FLOOR))
}

pub fn lsq_quantize(x: &Tensor, cfg: &LsqConfig) -> Result<QuantizedTensor> {
    cfg.validate()?;
    let codes: Vec<f64> = x.data().iter().map(|&v| cfg.code(f64::from(v))).collect();
    encode_codes(
        &codes,
        QuantHeader {
            shape: x.shape().to_vec(),
            method: Method::Lsq,
            encoding: Encoding::Int4,
            bits: cfg.bits,
            zero_point: 0.0,
            granularity: Granularity::PerTensor,
            scales: vec![cfg.step as f32],
        },
    )
}

pub fn lsq_dequantize(qt: &QuantizedTensor) -> Result<Tensor> {
    let h = qt.header();
    if h.method != Method::Lsq {
        return Err(Error::InvalidArgument(format!("{:?} tensor passed to LSQ dequantize", h.method)));
    }
    let s = f64::from(h.scales[0]);
    let data: Vec<f64> = decode_codes(qt).iter().map(|q| s * q).collect();
    Tensor::from_f64(h.shape.clone(), &data)
}

/// Forward of one LSQ site on raw buffers: returns `x̂`.
pub fn lsq_forward(x: &[f64], cfg: &LsqConfig) -> Vec<f64> {
    x.iter().map(|&v| cfg.step * cfg.code(v)).collect()
}

/// LSQ backward: straight-through inside the clip range, zero outside; the step gradient
/// is `−x/s + ⌊x/s⌉` inside and the clip bound outside, scaled by `1 / sqrt(d · Q_p)`.
pub fn lsq_backward(grad_out: &[f64], x: &[f64], cfg: &LsqConfig) -> Result<(Vec<f64>, f64)> {
    if grad_out.len() != x.len() {
        return Err(Error::StaleTrace(format!(
            "gradient has {} elements, input has {}",
            grad_out.len(),
            x.len()
        )));
    }
    let (qn, qp) = (cfg.qn(), cfg.qp());
    let mut grad_x = vec![0.0; x.len()];
    let mut grad_s = 0.0;
    for ((gx, &g), &xi) in grad_x.iter_mut().zip(grad_out).zip(x) {
        let v = xi / cfg.step;
        if v <= -qn {
            grad_s += g * -qn;
        } else if v >= qp {
            grad_s += g * qp;
        } else {
            *gx = g;
            grad_s += g * (v.round_ties_even() - v);
        }
    }
    let scale = 1.0 / ((x.len() as f64) * qp.max(1.0)).sqrt();
    Ok((grad_x, grad_s * scale))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(bits: u32, step: f64) -> LsqConfig {
        LsqConfig::new(Bits::new(bits).unwrap(), step).unwrap()
    }

    #[test]
    fn clip_and_ties() {
        let c = cfg(4, 1.0);
        assert_eq!(c.code(100.0), 7.0);
        assert_eq!(c.code(0.5), 0.0);
        assert_eq!(c.code(1.5), 2.0);
        assert_eq!(c.code(-2.5), -2.0);
        let c = cfg(4, 0.5);
        assert_eq!(c.code(-10.0), -8.0);
    }

    #[test]
    fn round_trip_examples() {
        let x = Tensor::new(vec![2], vec![100.0, -10.0]).unwrap();
        let qt = lsq_quantize(&x, &cfg(4, 1.0)).unwrap();
        assert_eq!(lsq_dequantize(&qt).unwrap().data(), &[7.0, -8.0]);
        let qt = lsq_quantize(&x, &cfg(4, 0.5)).unwrap();
        assert_eq!(lsq_dequantize(&qt).unwrap().data(), &[3.5, -4.0]);
    }

    #[test]
    fn one_bit_unsupported() {
        assert!(matches!(
            LsqConfig::new(Bits::new(1).unwrap(), 1.0),
            Err(Error::Unsupported(_))
        ));
        assert!(LsqConfig::new(Bits::new(2).unwrap(), 0.0).is_err());
    }

    #[test]
    fn backward_masks_clipped() {
        let c = cfg(2, 1.0);
        let (gx, _) = lsq_backward(&[1.0, 1.0, 1.0], &[0.3, 5.0, -5.0], &c).unwrap();
        assert_eq!(gx, vec![1.0, 0.0, 0.0]);
    }
}
