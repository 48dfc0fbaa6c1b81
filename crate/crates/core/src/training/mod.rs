//! Small quantization-aware training harness on a synthetic classification task.

mod data;
mod model;
mod optim;

pub use data::{synth_dataset, Batch, SynthTask, MEAN_SCALE, NOISE_STD};
pub use model::{
    gelu, gelu_grad, matmul_nt, ForwardCache, Grads, ModelDims, Mode, QuantSite, QuantSpec, SiteKind, SiteMethod,
    SiteTrace, ToyModel, PARAM_DECAY, PARAM_NAMES, READOUT_INIT_STD,
};
pub use optim::{lr_at, Optimizer, OptimizerKind};

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::entropy::{model_weight_entropy, ModelEntropy};
use crate::error::{Error, Result};
use crate::gaussian::ZETA_VISION;
use crate::quantizers::{Bits, Rounding};
use crate::tensorio::{emit_csv, write_tensor, Tensor};

/// Consecutive iterations above `DIVERGENCE_FACTOR x` the initial loss that abort a run.
pub const DIVERGENCE_WINDOW: usize = 100;
pub const DIVERGENCE_FACTOR: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: SiteMethod,
    pub bits: Bits,
    pub lr: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Decoupled weight decay on the layer weights. Never applied to biases or quantizer scales.
    pub weight_decay: f64,
    /// Recompute BBQ γ as `ζ σ` on every forward instead of learning it.
    pub vision_mode: bool,
    pub zeta: f64,
    pub warmup_frac: f64,
    pub optimizer: OptimizerKind,
    pub dims: ModelDims,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: SiteMethod::Bbq,
            bits: Bits::new(4).expect("4 is a valid bit width"),
            lr: 1e-3,
            iterations: 2000,
            batch_size: 64,
            seed: 0,
            weight_decay: 0.0,
            vision_mode: false,
            zeta: ZETA_VISION,
            warmup_frac: 0.1,
            optimizer: OptimizerKind::default(),
            dims: ModelDims::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        if self.method == SiteMethod::Lsq && self.bits.get() < 2 {
            return Err(Error::Unsupported("LSQ does not support 1-bit quantization".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() || !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "lr and weight decay must be finite and non-negative, got lr={} wd={}",
                self.lr, self.weight_decay
            )));
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(Error::InvalidArgument(format!("warmup fraction {} not in [0, 1]", self.warmup_frac)));
        }
        if self.vision_mode && !(self.zeta > 0.0) {
            return Err(Error::InvalidArgument(format!("zeta must be positive, got {}", self.zeta)));
        }
        Ok(())
    }

    pub fn spec(&self, mode: Mode, rounding: Rounding) -> QuantSpec {
        let bbq = matches!(self.method, SiteMethod::Bbq | SiteMethod::BbqFast);
        QuantSpec {
            method: self.method,
            bits: self.bits,
            dynamic_zeta: (bbq && self.vision_mode).then_some(self.zeta),
            mode,
            rounding,
        }
    }

    fn task_seed(&self) -> u64 {
        self.seed
    }

    fn model_seed(&self) -> u64 {
        self.seed.wrapping_add(0x9E37_79B9_7F4A_7C15)
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub lr: f64,
    /// Entropy of the weight codes pooled over both quantized layers, before this step's update.
    pub pooled_entropy: Option<f64>,
    pub mean_layer_entropy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: TrainConfig,
    pub model: ToyModel,
    pub optimizer: Optimizer,
    pub iteration: usize,
    pub history: Vec<LogRow>,
    task: SynthTask,
    above_count: usize,
}

impl TrainState {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            model: ToyModel::new(config.dims, config.model_seed())?,
            optimizer: Optimizer::new(config.optimizer),
            iteration: 0,
            history: Vec::new(),
            task: SynthTask::new(config.task_seed(), config.dims.input, config.dims.classes)?,
            above_count: 0,
            config,
        })
    }

    pub fn train_spec(&self) -> QuantSpec {
        self.config.spec(Mode::Train, Rounding::Floor)
    }

    /// Draws the next batch, initializing scales on the very first one.
    pub fn next_batch(&mut self) -> Result<Batch> {
        let batch = self.task.next_batch(self.config.batch_size);
        if self.iteration == 0 {
            let spec = self.train_spec();
            self.model.gamma_init(&batch.x, batch.len(), &spec)?;
        }
        Ok(batch)
    }

    /// Backpropagates `cache`, updates every parameter and the activation `E[1/σ]` states,
    /// and appends a log row.
    pub fn backward_and_step(&mut self, cache: &ForwardCache) -> Result<&LogRow> {
        let grads = self.model.backward(cache)?;
        let lr = lr_at(self.config.lr, self.iteration, self.config.iterations, self.config.warmup_frac);
        self.optimizer.step(self.model.params_mut(), &grads, lr, self.config.weight_decay);
        if self.config.method == SiteMethod::BbqFast {
            self.model.act1.observe_sigma(&cache.t_a1)?;
            self.model.act2.observe_sigma(&cache.t_a2)?;
        }

        let entropy = match (cache.t_w1.histogram(), cache.t_w2.histogram()) {
            (Some(h1), Some(h2)) => Some(model_weight_entropy(&[("w1".into(), h1), ("w2".into(), h2)])?),
            _ => None,
        };
        self.history.push(LogRow {
            iteration: self.iteration,
            loss: cache.loss,
            accuracy: cache.correct as f64 / cache.batch as f64,
            lr,
            pooled_entropy: entropy.as_ref().map(|e| e.pooled),
            mean_layer_entropy: entropy.as_ref().map(|e| e.mean_per_layer),
        });
        self.iteration += 1;
        self.check_divergence()?;
        Ok(self.history.last().expect("just pushed"))
    }

    fn check_divergence(&mut self) -> Result<()> {
        let initial = self.history[0].loss;
        let last = self.history.last().expect("non-empty").loss;
        if last > DIVERGENCE_FACTOR * initial {
            self.above_count += 1;
        } else {
            self.above_count = 0;
        }
        if self.above_count >= DIVERGENCE_WINDOW {
            return Err(Error::Diverged {
                iteration: self.iteration - 1,
                loss: last,
                initial,
                window: DIVERGENCE_WINDOW,
            });
        }
        Ok(())
    }

    pub fn step(&mut self) -> Result<&LogRow> {
        let batch = self.next_batch()?;
        let cache = self.model.forward(&batch.x, &batch.labels, &self.train_spec())?;
        self.backward_and_step(&cache)
    }

    /// Pooled and per-layer entropy of the current weight codes.
    pub fn weight_entropy(&self) -> Result<ModelEntropy> {
        weight_entropy(&self.model, &self.train_spec())
    }

    /// Accuracy on `n` fresh samples in inference mode (activation σ from `E[1/σ]` under BBQ-Fast).
    pub fn evaluate(&self, n: usize) -> Result<f64> {
        let batch = self.task.clone().next_batch(n);
        let cache = self
            .model
            .forward(&batch.x, &batch.labels, &self.config.spec(Mode::Infer, Rounding::Floor))?;
        Ok(cache.correct as f64 / n as f64)
    }
}

pub fn weight_entropy(model: &ToyModel, spec: &QuantSpec) -> Result<ModelEntropy> {
    match model.weight_histograms(spec)? {
        Some(layers) => model_weight_entropy(&layers),
        None => Err(Error::InvalidArgument("model has no quantized layers".into())),
    }
}

/// Runs `cfg.iterations` steps, calling `on_row` after each.
pub fn train_with(cfg: TrainConfig, mut on_row: impl FnMut(&LogRow)) -> Result<TrainState> {
    let mut state = TrainState::new(cfg)?;
    for _ in 0..cfg.iterations {
        on_row(state.step()?);
    }
    Ok(state)
}

pub fn train(cfg: TrainConfig) -> Result<TrainState> {
    train_with(cfg, |_| {})
}

pub const LOG_HEADER: [&str; 6] = ["iteration", "loss", "accuracy", "lr", "pooled_entropy", "mean_layer_entropy"];

pub fn write_log_csv(history: &[LogRow], path: impl AsRef<Path>) -> Result<()> {
    let opt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
    let rows: Vec<Vec<String>> = history
        .iter()
        .map(|r| {
            vec![
                r.iteration.to_string(),
                r.loss.to_string(),
                r.accuracy.to_string(),
                r.lr.to_string(),
                opt(r.pooled_entropy),
                opt(r.mean_layer_entropy),
            ]
        })
        .collect();
    emit_csv(&LOG_HEADER, &rows, path)
}

/// Everything needed to rebuild a trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub iteration: usize,
    pub model: ToyModel,
    pub optimizer: Optimizer,
    pub history: Vec<LogRow>,
}

pub const CHECKPOINT_STATE: &str = "state.json";

impl Checkpoint {
    pub fn from_state(state: &TrainState) -> Self {
        Self {
            config: state.config,
            iteration: state.iteration,
            model: state.model.clone(),
            optimizer: state.optimizer.clone(),
            history: state.history.clone(),
        }
    }

    /// Writes `state.json` (exact, f64) plus one tensor file per weight matrix (f32 export).
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let d = self.model.dims;
        let m = &self.model;
        for (name, shape, data) in [
            ("w1", vec![d.hidden, d.input], &m.w1),
            ("w2", vec![d.output, d.hidden], &m.w2),
            ("wr", vec![d.classes, d.output], &m.wr),
            ("br", vec![d.classes], &m.br),
        ] {
            write_tensor(&Tensor::from_f64(shape, data)?, dir.join(format!("{name}.bbqt")))?;
        }
        let path = dir.join(CHECKPOINT_STATE);
        let json = serde_json::to_string(self)?;
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join(CHECKPOINT_STATE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        ckpt.config.validate()?;
        Ok(ckpt)
    }

    pub fn weight_entropy(&self) -> Result<ModelEntropy> {
        weight_entropy(&self.model, &self.config.spec(Mode::Train, Rounding::Floor))
    }
}
