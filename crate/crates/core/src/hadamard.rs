//! Block-wise orthonormal Walsh–Hadamard transform along the channel (last) dimension.

use num_traits::Float;

use crate::error::{Error, Result};
use crate::tensorio::Tensor;

pub const DEFAULT_BLOCK_SIZE: usize = 128;

/// Block size for the transform. The implied matrix is Sylvester-ordered and scaled by `1/sqrt(H)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct HadamardPlan {
    block_size: usize,
}

impl HadamardPlan {
    pub fn new(block_size: usize) -> Result<Self> {
        if block_size == 0 || !block_size.is_power_of_two() {
            return Err(Error::InvalidArgument(format!(
                "Hadamard block size must be a positive power of two, got {block_size}"
            )));
        }
        Ok(Self { block_size })
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn check_cols(&self, cols: usize) -> Result<()> {
        if !cols.is_multiple_of(self.block_size) {
            return Err(Error::Shape(format!(
                "channel dimension {cols} is not divisible by Hadamard block size {}",
                self.block_size
            )));
        }
        Ok(())
    }

    /// Transforms every contiguous block of `data` in place. `data.len()` must be a multiple of H.
    pub fn apply_in_place<T: Float>(&self, data: &mut [T]) {
        debug_assert_eq!(data.len() % self.block_size, 0);
        for block in data.chunks_exact_mut(self.block_size) {
            fwht_in_place(block);
        }
    }
}

impl Default for HadamardPlan {
    fn default() -> Self {
        Self {
            block_size: DEFAULT_BLOCK_SIZE,
        }
    }
}

/// Orthonormal fast Walsh–Hadamard transform of one power-of-two block, natural (Sylvester) order.
pub fn fwht_in_place<T: Float>(block: &mut [T]) {
    let n = block.len();
    debug_assert!(n.is_power_of_two());
    let mut h = 1;
    while h < n {
        for i in (0..n).step_by(2 * h) {
            for j in i..i + h {
                let a = block[j];
                let b = block[j + h];
                block[j] = a + b;
                block[j + h] = a - b;
            }
        }
        h *= 2;
    }
    let scale = T::from(n).unwrap().sqrt().recip();
    for v in block.iter_mut() {
        *v = *v * scale;
    }
}

pub fn fwht_blocked(x: &Tensor, plan: &HadamardPlan) -> Result<Tensor> {
    plan.check_cols(x.cols())?;
    let mut data = x.to_f64();
    plan.apply_in_place(&mut data);
    Tensor::from_f64(x.shape().to_vec(), &data)
}

/// Explicit `H x H` Sylvester Hadamard matrix with entries `(-1)^popcount(i & j) / sqrt(H)`.
pub fn hadamard_matrix(h: usize) -> Result<Tensor> {
    HadamardPlan::new(h)?;
    let a = 1.0 / (h as f64).sqrt();
    let data: Vec<f64> = (0..h * h)
        .map(|k| {
            let (i, j) = (k / h, k % h);
            if (i & j).count_ones() % 2 == 0 {
                a
            } else {
                -a
            }
        })
        .collect();
    Tensor::from_f64(vec![h, h], &data)
}
