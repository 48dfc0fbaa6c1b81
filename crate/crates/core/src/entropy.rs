//! Empirical Shannon entropy of quantized codes.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::kernelsim::{decode_codes, QuantizedTensor};

/// Counts per code value. Codes are multiples of ½, so they are keyed by `2 · code`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CodeHistogram {
    counts: BTreeMap<i64, u64>,
    total: u64,
}

impl CodeHistogram {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_codes(codes: &[f64]) -> Self {
        let mut h = Self::new();
        for &c in codes {
            h.add(c);
        }
        h
    }

    pub fn add(&mut self, code: f64) {
        *self.counts.entry((2.0 * code).round() as i64).or_insert(0) += 1;
        self.total += 1;
    }

    /// Associative, commutative merge.
    pub fn merge(&mut self, other: &CodeHistogram) {
        for (&k, &n) in &other.counts {
            *self.counts.entry(k).or_insert(0) += n;
        }
        self.total += other.total;
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    /// `(code, count)` pairs in increasing code order.
    pub fn counts(&self) -> impl Iterator<Item = (f64, u64)> + '_ {
        self.counts.iter().map(|(&k, &n)| (k as f64 / 2.0, n))
    }

    /// `−Σ p log₂ p` over observed codes.
    pub fn entropy_bits(&self) -> Result<f64> {
        if self.total == 0 {
            return Err(Error::InvalidArgument("entropy of an empty code set".into()));
        }
        let total = self.total as f64;
        let h: f64 = self
            .counts
            .values()
            .map(|&n| {
                let p = n as f64 / total;
                -p * p.log2()
            })
            .sum();
        Ok(h.max(0.0))
    }
}

pub fn entropy(codes: &[f64]) -> Result<f64> {
    CodeHistogram::from_codes(codes).entropy_bits()
}

pub fn tensor_entropy(qt: &QuantizedTensor) -> Result<f64> {
    entropy(&decode_codes(qt))
}

/// Pooled and per-layer weight entropy of a model.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelEntropy {
    /// Entropy of the histogram pooled over every quantized weight tensor.
    pub pooled: f64,
    pub per_layer: Vec<(String, f64)>,
    /// Unweighted mean of `per_layer`.
    pub mean_per_layer: f64,
}

pub fn model_weight_entropy(layers: &[(String, CodeHistogram)]) -> Result<ModelEntropy> {
    if layers.is_empty() {
        return Err(Error::InvalidArgument("model has no quantized layers".into()));
    }
    let mut pooled = CodeHistogram::new();
    let mut per_layer = Vec::with_capacity(layers.len());
    for (name, h) in layers {
        pooled.merge(h);
        per_layer.push((name.clone(), h.entropy_bits()?));
    }
    let mean_per_layer = per_layer.iter().map(|(_, h)| h).sum::<f64>() / per_layer.len() as f64;
    Ok(ModelEntropy {
        pooled: pooled.entropy_bits()?,
        per_layer,
        mean_per_layer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        assert_eq!(entropy(&[1.5; 10]).unwrap(), 0.0);
        assert_eq!(entropy(&[-1.5, -0.5, 0.5, 1.5]).unwrap(), 2.0);
        let mut codes = Vec::new();
        for (c, n) in [(-1.5, 4), (-0.5, 3), (0.5, 2), (1.5, 1)] {
            codes.extend(std::iter::repeat_n(c, n));
        }
        let expected = -(0.4f64 * 0.4f64.log2() + 0.3 * 0.3f64.log2() + 0.2 * 0.2f64.log2() + 0.1 * 0.1f64.log2());
        assert!((entropy(&codes).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 1.846_439_344_671).abs() < 1e-9);
        assert!(entropy(&[]).is_err());
    }

    #[test]
    fn pooling() {
        let a = ("a".to_string(), CodeHistogram::from_codes(&[1.0; 8]));
        let b = ("b".to_string(), CodeHistogram::from_codes(&[-2.0; 8]));
        let m = model_weight_entropy(&[a, b]).unwrap();
        assert_eq!(m.pooled, 1.0);
        assert_eq!(m.mean_per_layer, 0.0);
        assert!(model_weight_entropy(&[]).is_err());
    }
}
