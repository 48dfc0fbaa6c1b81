//! Bell Box Quantization (BBQ) and baselines.
//!
//! BBQ maps each input through a blocked Hadamard transform, RMS normalization and the
//! Gaussian CDF before uniform binning, so every one of the `2^b` output codes is used
//! equally often on Gaussian-like data. The codes themselves are plain INT4 / MX FP4 values,
//! so dequantized matrix products run on ordinary low-precision arithmetic.
//!
//! Modules:
//! - [`tensorio`]: binary tensor files and CSV reports
//! - [`hadamard`]: blocked fast Walsh–Hadamard transform
//! - [`gaussian`]: Φ, Φ⁻¹, quantile tables, the ζ* estimator
//! - [`quantizers`]: BBQ, BBQ-Fast, LSQ, QuEST and codebook quantizers
//! - [`kernelsim`]: binary-search kernel, 4-bit encodings, low-precision matmul
//! - [`entropy`]: code-histogram entropy
//! - [`training`]: a small quantization-aware training harness
//! - [`selftest`]: the invariant suite behind `bbq selftest`

// `!(x > 0.0)` style checks are deliberate: they reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod entropy;
pub mod error;
pub mod gaussian;
pub mod hadamard;
pub mod kernelsim;
pub mod quantizers;
pub mod selftest;
pub mod tensorio;
pub mod training;

pub use error::{Error, Result};
pub use tensorio::Tensor;
