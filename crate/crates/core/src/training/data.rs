//! Synthetic classification task: class-conditioned Gaussian mixtures.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::tensorio::Tensor;

/// Standard deviation of the class means around the origin, per coordinate.
pub const MEAN_SCALE: f64 = 0.5;
/// Within-class noise standard deviation.
pub const NOISE_STD: f64 = 1.0;

/// A row-major batch of inputs with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Vec<f64>,
    pub labels: Vec<usize>,
    pub dim: usize,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Infinite deterministic stream of samples `x = μ_y + ε`, `ε ~ N(0, NOISE_STD² I)`.
///
/// Labels come in shuffled blocks containing every class once, so any prefix of the stream
/// is within one block of perfectly balanced.
#[derive(Debug, Clone)]
pub struct SynthTask {
    dim: usize,
    classes: usize,
    means: Vec<f64>,
    rng: ChaCha8Rng,
    pending: Vec<usize>,
}

impl SynthTask {
    pub fn new(seed: u64, dim: usize, classes: usize) -> Result<Self> {
        if dim == 0 || classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "task needs dim >= 1 and at least 2 classes, got dim={dim}, classes={classes}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mean_dist = Normal::new(0.0, MEAN_SCALE).expect("finite positive std");
        let means = (0..dim * classes).map(|_| mean_dist.sample(&mut rng)).collect();
        Ok(Self {
            dim,
            classes,
            means,
            rng,
            pending: Vec::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    fn next_label(&mut self) -> usize {
        if self.pending.is_empty() {
            self.pending = (0..self.classes).collect();
            self.pending.shuffle(&mut self.rng);
        }
        self.pending.pop().expect("refilled above")
    }

    pub fn next_batch(&mut self, n: usize) -> Batch {
        let mut x = Vec::with_capacity(n * self.dim);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let y = self.next_label();
            labels.push(y);
            let mu = &self.means[y * self.dim..(y + 1) * self.dim];
            for &m in mu {
                let e: f64 = self.rng.sample(StandardNormal);
                x.push(m + NOISE_STD * e);
            }
        }
        Batch { x, labels, dim: self.dim }
    }
}

/// First `n` samples of the task stream for `seed`, as a `[n, dim]` tensor and labels.
pub fn synth_dataset(seed: u64, n: usize, dim: usize, classes: usize) -> Result<(Tensor, Vec<usize>)> {
    if n == 0 {
        return Err(Error::InvalidArgument("dataset needs at least one sample".into()));
    }
    let batch = SynthTask::new(seed, dim, classes)?.next_batch(n);
    Ok((Tensor::from_f64(vec![n, dim], &batch.x)?, batch.labels))
}
