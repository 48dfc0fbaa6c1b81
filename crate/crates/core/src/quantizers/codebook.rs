//! Generic quantile quantizer over a sorted codebook: `i = ⌊2^b Φ(x/σ)⌋`, `x̂ = σ T[i]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::phi_inv;
use crate::kernelsim::{decode_codes, encode_codes, Encoding, QuantHeader, QuantizedTensor};
use crate::tensorio::Tensor;

use super::bbq::phi_bin;
use super::config::{Bits, Granularity, Method};

/// Strictly increasing list of `2^b` reconstruction values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    bits: Bits,
    values: Vec<f64>,
}

impl Codebook {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        if !n.is_power_of_two() || !(2..=16).contains(&n) {
            return Err(Error::InvalidArgument(format!(
                "codebook must have 2, 4, 8 or 16 entries, got {n}"
            )));
        }
        if values.iter().any(|v| !v.is_finite()) || values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument("codebook values must be finite and strictly increasing".into()));
        }
        Ok(Self {
            bits: Bits::new(n.trailing_zeros())?,
            values,
        })
    }

    /// The BBQ code set `{i − 2^(b−1) − z}` as a codebook.
    pub fn identity(bits: Bits, zero_point: f64) -> Self {
        Self {
            bits,
            values: bits.code_set(zero_point),
        }
    }

    pub fn bits(&self) -> Bits {
        self.bits
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Mid-bin Gaussian quantiles `Φ⁻¹((i + ½)/2^b)`, divided by their largest magnitude.
pub fn build_nf_codebook(bits: u32) -> Result<Codebook> {
    let bits = Bits::new(bits)?;
    let n = bits.levels();
    let mut values = vec![0.0; n];
    for i in n / 2..n {
        let q = phi_inv((i as f64 + 0.5) / n as f64)?;
        values[i] = q;
        values[n - 1 - i] = -q;
    }
    let max = values[n - 1];
    for v in &mut values {
        *v /= max;
    }
    values[0] = -1.0;
    values[n - 1] = 1.0;
    Codebook::new(values)
}

/// Bin indices `clamp(⌊2^b Φ(x/σ)⌋, 0, 2^b − 1)`.
pub fn codebook_bins(x: &[f64], sigma: f64, bits: Bits) -> Result<Vec<usize>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Domain(format!("codebook sigma must be positive, got {sigma}")));
    }
    Ok(x.iter().map(|&v| phi_bin(v / sigma, bits.levels())).collect())
}

/// Packs bin indices as raw 4-bit codes with the scale `σ` in the header.
pub fn codebook_quantize(x: &Tensor, cb: &Codebook, sigma: f64) -> Result<QuantizedTensor> {
    let bits = cb.bits;
    let bins = codebook_bins(&x.to_f64(), sigma, bits)?;
    let codes: Vec<f64> = bins.iter().map(|&i| i as f64 - bits.half()).collect();
    encode_codes(
        &codes,
        QuantHeader {
            shape: x.shape().to_vec(),
            method: Method::Codebook,
            encoding: Encoding::RawCodes,
            bits,
            zero_point: 0.0,
            granularity: Granularity::PerTensor,
            scales: vec![sigma as f32],
        },
    )
}

pub fn codebook_dequantize(qt: &QuantizedTensor, cb: &Codebook) -> Result<Tensor> {
    let h = qt.header();
    if h.method != Method::Codebook {
        return Err(Error::InvalidArgument(format!("{:?} tensor passed to codebook dequantize", h.method)));
    }
    if h.bits != cb.bits {
        return Err(Error::InvalidArgument(format!(
            "{}-bit codes with a {}-entry codebook",
            h.bits.get(),
            cb.len()
        )));
    }
    let sigma = f64::from(h.scales[0]);
    let data: Vec<f64> = decode_codes(qt)
        .iter()
        .map(|&c| sigma * cb.values[(c + h.bits.half()) as usize])
        .collect();
    Tensor::from_f64(h.shape.clone(), &data)
}
