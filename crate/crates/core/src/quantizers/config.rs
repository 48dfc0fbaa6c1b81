use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian;
use crate::hadamard::HadamardPlan;
use crate::kernelsim::Encoding;

/// Precision in bits, 1 through 4.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct Bits(u32);

impl Bits {
    pub fn new(bits: u32) -> Result<Self> {
        if (1..=4).contains(&bits) {
            Ok(Self(bits))
        } else {
            Err(Error::InvalidArgument(format!("bits must be in 1..=4, got {bits}")))
        }
    }

    pub fn get(self) -> u32 {
        self.0
    }

    /// 2^b.
    pub fn levels(self) -> usize {
        1 << self.0
    }

    /// 2^(b-1).
    pub fn half(self) -> f64 {
        (1u32 << (self.0 - 1)) as f64
    }

    /// BBQ zero point: 0 for b in {3, 4}, −0.5 for b in {1, 2}.
    pub fn bbq_zero_point(self) -> f64 {
        if self.0 >= 3 {
            0.0
        } else {
            -0.5
        }
    }

    /// Encoding used when none is requested: INT4 where BBQ codes fit it, MX FP4 otherwise.
    pub fn default_encoding(self) -> Encoding {
        if self.0 >= 3 {
            Encoding::Int4
        } else {
            Encoding::MxFp4
        }
    }

    /// The code set `{i − 2^(b−1) − z : i in 0..2^b}` in increasing order.
    pub fn code_set(self, zero_point: f64) -> Vec<f64> {
        (0..self.levels())
            .map(|i| i as f64 - self.half() - zero_point)
            .collect()
    }
}

impl TryFrom<u32> for Bits {
    type Error = Error;
    fn try_from(v: u32) -> Result<Self> {
        Bits::new(v)
    }
}

impl From<Bits> for u32 {
    fn from(b: Bits) -> u32 {
        b.0
    }
}

/// How scales and RMS statistics are shared: one per row (output channel) or one per tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Granularity {
    PerChannel,
    PerTensor,
}

impl Granularity {
    pub fn num_groups(self, rows: usize) -> usize {
        match self {
            Granularity::PerChannel => rows,
            Granularity::PerTensor => 1,
        }
    }

    pub fn group_len(self, rows: usize, cols: usize) -> usize {
        match self {
            Granularity::PerChannel => cols,
            Granularity::PerTensor => rows * cols,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Bbq,
    BbqFast,
    Lsq,
    Quest,
    Codebook,
}

/// Whether the floor in the code computation is applied or smoothed away.
///
/// `Smooth` yields the continuous surrogate `2^b Φ(v) − 2^(b−1) − z`, whose exact derivative is
/// what the straight-through backward computes. Used for finite-difference checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Rounding {
    #[default]
    Floor,
    Smooth,
}

/// Configuration of a BBQ-family quantization site.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantConfig {
    pub bits: Bits,
    pub zero_point: f64,
    pub plan: HadamardPlan,
    pub granularity: Granularity,
    pub method: Method,
    pub encoding: Encoding,
}

impl QuantConfig {
    pub fn bbq(bits: Bits, plan: HadamardPlan, granularity: Granularity) -> Self {
        Self {
            bits,
            zero_point: bits.bbq_zero_point(),
            plan,
            granularity,
            method: Method::Bbq,
            encoding: bits.default_encoding(),
        }
    }

    pub fn with_method(mut self, method: Method) -> Self {
        self.method = method;
        self
    }

    pub fn with_encoding(mut self, encoding: Encoding) -> Self {
        self.encoding = encoding;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if matches!(self.method, Method::Bbq | Method::BbqFast)
            && self.zero_point != self.bits.bbq_zero_point()
        {
            return Err(Error::InvalidArgument(format!(
                "zero point {} does not match {} for {}-bit BBQ",
                self.zero_point,
                self.bits.bbq_zero_point(),
                self.bits.get()
            )));
        }
        self.encoding
            .check_representable(self.bits, self.zero_point)
    }

    /// Dequantization step γ / 2^(b−1).
    pub fn step(&self, gamma: f64) -> f64 {
        gamma / self.bits.half()
    }
}

/// Learnable dequantization scale γ, one per group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleParam {
    pub gamma: Vec<f64>,
    /// RMS measured the first time the site was used.
    pub sigma0: Vec<f64>,
    /// Number of elements governed by each γ.
    pub d: usize,
    pub learnable: bool,
    pub initialized: bool,
}

pub const DEGENERATE_SIGMA: f64 = 1e-12;
pub const GAMMA_FLOOR: f64 = 1e-6;

impl ScaleParam {
    pub fn uninit(groups: usize, d: usize) -> Self {
        Self {
            gamma: vec![1.0; groups],
            sigma0: vec![0.0; groups],
            d,
            learnable: true,
            initialized: false,
        }
    }

    pub fn fixed(gamma: Vec<f64>, d: usize) -> Self {
        Self {
            sigma0: vec![0.0; gamma.len()],
            gamma,
            d,
            learnable: false,
            initialized: true,
        }
    }

    /// γ := ζ σ₀ per group. Degenerate σ₀ falls back to [`GAMMA_FLOOR`] with a warning.
    pub fn init_from_sigma(&mut self, sigma0: &[f64], zeta: f64) {
        self.sigma0 = sigma0.to_vec();
        self.gamma = sigma0
            .iter()
            .enumerate()
            .map(|(g, &s)| {
                if s < DEGENERATE_SIGMA {
                    log::warn!("degenerate sigma0 {s:e} in scale group {g}; gamma set to {GAMMA_FLOOR:e}");
                    GAMMA_FLOOR
                } else {
                    zeta * s
                }
            })
            .collect();
        self.initialized = true;
    }

    pub fn init_default(&mut self, sigma0: &[f64]) {
        self.init_from_sigma(sigma0, gaussian::ZETA_STAR)
    }
}

/// Exponential moving average of 1/σ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmaState {
    pub e_inv_sigma: f64,
    pub beta: f64,
    pub initialized: bool,
}

pub const DEFAULT_EMA_BETA: f64 = 0.99;

impl Default for EmaState {
    fn default() -> Self {
        Self {
            e_inv_sigma: 0.0,
            beta: DEFAULT_EMA_BETA,
            initialized: false,
        }
    }
}

impl EmaState {
    pub fn seeded(e_inv_sigma: f64) -> Self {
        Self {
            e_inv_sigma,
            beta: DEFAULT_EMA_BETA,
            initialized: true,
        }
    }
}
