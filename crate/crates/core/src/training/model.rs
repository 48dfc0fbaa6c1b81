//! Two quantized linear layers with GELU between them and a full-precision readout,
//! with a hand-written backward pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::entropy::CodeHistogram;
use crate::error::{Error, Result};
use crate::gaussian::{pdf, phi};
use crate::hadamard::HadamardPlan;
use crate::quantizers::{
    bbq_backward_slices, bbq_forward, lsq_backward, lsq_forward, lsq_init_step, quest_backward, quest_forward,
    transformed_rms, Bits, EmaState, GammaSource, Granularity, LsqConfig, Method, QuantConfig, QuantizeTrace,
    QuestConfig, QuestTrace, Rounding, ScaleParam, SigmaSource, DEGENERATE_SIGMA,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
    pub classes: usize,
    /// Hadamard block size of every quantized site.
    pub block: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            input: 128,
            hidden: 256,
            output: 128,
            classes: 10,
            block: 128,
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        let plan = HadamardPlan::new(self.block)?;
        plan.check_cols(self.input)?;
        plan.check_cols(self.hidden)?;
        if self.output == 0 || self.classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "need output >= 1 and classes >= 2, got output={}, classes={}",
                self.output, self.classes
            )));
        }
        Ok(())
    }
}

/// Quantizer applied at every site of the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SiteMethod {
    /// No quantization.
    Full,
    Bbq,
    /// BBQ during training; activations use the running `E[1/σ]` in inference mode.
    BbqFast,
    Lsq,
    Quest,
}

impl SiteMethod {
    fn has_scale_param(self, dynamic_gamma: bool) -> bool {
        match self {
            SiteMethod::Bbq | SiteMethod::BbqFast => !dynamic_gamma,
            SiteMethod::Lsq => true,
            SiteMethod::Full | SiteMethod::Quest => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Infer,
}

/// How every site quantizes during one forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantSpec {
    pub method: SiteMethod,
    pub bits: Bits,
    /// `Some(ζ)`: BBQ γ is recomputed as `ζ σ` on every forward instead of being learned.
    pub dynamic_zeta: Option<f64>,
    pub mode: Mode,
    pub rounding: Rounding,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SiteKind {
    Weight,
    Activation,
}

/// One quantization site: its scale parameter and, for activations, the `E[1/σ]` state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantSite {
    pub name: String,
    pub kind: SiteKind,
    /// BBQ γ per group, or the LSQ step in `gamma[0]`.
    pub scale: ScaleParam,
    pub ema: EmaState,
}

#[derive(Debug, Clone)]
pub enum SiteTrace {
    Full,
    Bbq(QuantizeTrace),
    Lsq { x: Vec<f64>, cfg: LsqConfig },
    Quest { trace: QuestTrace, cfg: QuestConfig },
}

impl SiteTrace {
    /// Integer-valued codes emitted by the site, if it quantizes.
    pub fn codes(&self) -> Option<Vec<f64>> {
        match self {
            SiteTrace::Full => None,
            SiteTrace::Bbq(t) => Some(t.codes.clone()),
            SiteTrace::Lsq { x, cfg } => Some(x.iter().map(|&v| cfg.code(v)).collect()),
            SiteTrace::Quest { trace, .. } => Some(trace.codes.clone()),
        }
    }

    pub fn histogram(&self) -> Option<CodeHistogram> {
        self.codes().map(|c| CodeHistogram::from_codes(&c))
    }
}

impl QuantSite {
    fn new(name: &str, kind: SiteKind, rows: usize, cols: usize) -> Self {
        let groups = match kind {
            SiteKind::Weight => rows,
            SiteKind::Activation => 1,
        };
        Self {
            name: name.to_string(),
            kind,
            scale: ScaleParam::uninit(groups, cols),
            ema: EmaState::default(),
        }
    }

    pub fn granularity(&self) -> Granularity {
        match self.kind {
            SiteKind::Weight => Granularity::PerChannel,
            SiteKind::Activation => Granularity::PerTensor,
        }
    }

    fn bbq_config(&self, spec: &QuantSpec, block: usize) -> Result<QuantConfig> {
        let method = if spec.method == SiteMethod::BbqFast {
            Method::BbqFast
        } else {
            Method::Bbq
        };
        Ok(QuantConfig::bbq(spec.bits, HadamardPlan::new(block)?, self.granularity()).with_method(method))
    }

    fn quest_config(&self, spec: &QuantSpec, block: usize) -> Result<QuestConfig> {
        Ok(QuestConfig::new(spec.bits, HadamardPlan::new(block)?, self.granularity()))
    }

    /// Initializes the site's scale from the first tensor it sees: `γ = ζ* σ₀` for BBQ,
    /// the standard LSQ step for LSQ. A no-op for methods without a scale parameter.
    pub fn init_scale(&mut self, x: &[f64], rows: usize, cols: usize, spec: &QuantSpec, block: usize) -> Result<()> {
        if !spec.method.has_scale_param(spec.dynamic_zeta.is_some()) || self.scale.initialized {
            return Ok(());
        }
        match spec.method {
            SiteMethod::Bbq | SiteMethod::BbqFast => {
                let sigma0 = transformed_rms(x, rows, cols, &HadamardPlan::new(block)?, self.granularity())?;
                self.scale.init_default(&sigma0);
            }
            SiteMethod::Lsq => {
                let s = lsq_init_step(x, spec.bits)?;
                self.scale = ScaleParam {
                    gamma: vec![s],
                    sigma0: vec![0.0],
                    d: x.len(),
                    learnable: true,
                    initialized: true,
                };
            }
            SiteMethod::Full | SiteMethod::Quest => {}
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64], rows: usize, cols: usize, spec: &QuantSpec, block: usize) -> Result<(Vec<f64>, SiteTrace)> {
        match spec.method {
            SiteMethod::Full => Ok((x.to_vec(), SiteTrace::Full)),
            SiteMethod::Bbq | SiteMethod::BbqFast => {
                let cfg = self.bbq_config(spec, block)?;
                let use_ema =
                    spec.method == SiteMethod::BbqFast && spec.mode == Mode::Infer && self.kind == SiteKind::Activation;
                let sigma = if use_ema {
                    SigmaSource::Ema(&self.ema)
                } else {
                    SigmaSource::Exact
                };
                let gamma = match spec.dynamic_zeta {
                    Some(zeta) => GammaSource::Dynamic { zeta },
                    None => GammaSource::Param(&self.scale),
                };
                let out = bbq_forward(x, rows, cols, &cfg, sigma, gamma, spec.rounding)?;
                Ok((out.xhat, SiteTrace::Bbq(out.trace)))
            }
            SiteMethod::Lsq => {
                if !self.scale.initialized {
                    return Err(Error::Uninitialized(format!("LSQ step of site {}", self.name)));
                }
                let cfg = LsqConfig::new(spec.bits, self.scale.gamma[0])?;
                Ok((lsq_forward(x, &cfg), SiteTrace::Lsq { x: x.to_vec(), cfg }))
            }
            SiteMethod::Quest => {
                let cfg = self.quest_config(spec, block)?;
                let (xhat, trace) = quest_forward(x, rows, cols, &cfg)?;
                Ok((xhat, SiteTrace::Quest { trace, cfg }))
            }
        }
    }

    /// Returns the gradient with respect to the site input and to its scale parameter
    /// (empty when the site has none).
    pub fn backward(&self, grad: &[f64], trace: &SiteTrace) -> Result<(Vec<f64>, Vec<f64>)> {
        match trace {
            SiteTrace::Full => Ok((grad.to_vec(), Vec::new())),
            SiteTrace::Bbq(t) => {
                let scale = t.dynamic_zeta.is_none().then_some(&self.scale);
                let g = bbq_backward_slices(grad, t, scale)?;
                Ok((g.grad_x, g.grad_gamma))
            }
            SiteTrace::Lsq { x, cfg } => {
                if cfg.step != self.scale.gamma[0] {
                    return Err(Error::StaleTrace("LSQ step changed since the forward pass".into()));
                }
                let (gx, gs) = lsq_backward(grad, x, cfg)?;
                Ok((gx, vec![gs]))
            }
            SiteTrace::Quest { trace, cfg } => Ok((quest_backward(grad, trace, cfg)?, Vec::new())),
        }
    }

    /// Feeds the σ measured in a training forward into the `E[1/σ]` average.
    pub fn observe_sigma(&mut self, trace: &SiteTrace) -> Result<()> {
        if let SiteTrace::Bbq(t) = trace {
            if !t.sigma_from_ema && self.kind == SiteKind::Activation {
                let s = t.sigma[0];
                if s >= DEGENERATE_SIGMA {
                    self.ema = crate::quantizers::bbq_fast_update(self.ema, s)?;
                }
            }
        }
        Ok(())
    }
}

#[inline]
pub fn gelu(x: f64) -> f64 {
    x * phi(x)
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    phi(x) + x * pdf(x)
}

/// `a [m, k] · b [n, k]ᵀ`.
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = row.iter().zip(&b[j * k..(j + 1) * k]).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a [m, n] · b [n, k]`.
fn matmul_nn(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let dst = &mut out[i * k..(i + 1) * k];
        for j in 0..n {
            let s = a[i * n + j];
            if s != 0.0 {
                for (d, &v) in dst.iter_mut().zip(&b[j * k..(j + 1) * k]) {
                    *d += s * v;
                }
            }
        }
    }
    out
}

/// `a [m, n]ᵀ · b [m, k]`.
fn matmul_tn(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * k];
    for i in 0..m {
        let src = &b[i * k..(i + 1) * k];
        for j in 0..n {
            let s = a[i * n + j];
            if s != 0.0 {
                for (d, &v) in out[j * k..(j + 1) * k].iter_mut().zip(src) {
                    *d += s * v;
                }
            }
        }
    }
    out
}

/// Initialization standard deviation of the readout weights, small so initial logits are near zero.
pub const READOUT_INIT_STD: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    pub dims: ModelDims,
    /// `[hidden, input]`.
    pub w1: Vec<f64>,
    /// `[output, hidden]`.
    pub w2: Vec<f64>,
    /// `[classes, output]`.
    pub wr: Vec<f64>,
    pub br: Vec<f64>,
    pub act1: QuantSite,
    pub wq1: QuantSite,
    pub act2: QuantSite,
    pub wq2: QuantSite,
}

/// Parameter names in the canonical order used by [`ToyModel::params_mut`] and [`Grads`].
pub const PARAM_NAMES: [&str; 8] = ["w1", "w2", "wr", "br", "act1.scale", "w1.scale", "act2.scale", "w2.scale"];

/// Whether a parameter slot is subject to weight decay.
pub const PARAM_DECAY: [bool; 8] = [true, true, true, false, false, false, false, false];

impl ToyModel {
    /// Quantized layers drawn from `N(0, 1/fan_in)`, readout from `N(0, READOUT_INIT_STD²)`.
    pub fn new(dims: ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize, std: f64| -> Vec<f64> {
            let d = Normal::new(0.0, std).expect("finite positive std");
            (0..n).map(|_| d.sample(&mut rng)).collect()
        };
        let w1 = draw(dims.hidden * dims.input, (dims.input as f64).sqrt().recip());
        let w2 = draw(dims.output * dims.hidden, (dims.hidden as f64).sqrt().recip());
        let wr = draw(dims.classes * dims.output, READOUT_INIT_STD);
        Ok(Self {
            dims,
            w1,
            w2,
            wr,
            br: vec![0.0; dims.classes],
            act1: QuantSite::new("act1", SiteKind::Activation, 1, dims.input),
            wq1: QuantSite::new("w1", SiteKind::Weight, dims.hidden, dims.input),
            act2: QuantSite::new("act2", SiteKind::Activation, 1, dims.hidden),
            wq2: QuantSite::new("w2", SiteKind::Weight, dims.output, dims.hidden),
        })
    }

    pub fn params_mut(&mut self) -> [&mut Vec<f64>; 8] {
        [
            &mut self.w1,
            &mut self.w2,
            &mut self.wr,
            &mut self.br,
            &mut self.act1.scale.gamma,
            &mut self.wq1.scale.gamma,
            &mut self.act2.scale.gamma,
            &mut self.wq2.scale.gamma,
        ]
    }

    /// Factor `√d` by which the gradient in `slot` was divided; 1 for non-scale slots.
    /// Multiplying a scale gradient by it recovers the plain derivative of the loss.
    pub fn grad_scaling(&self, slot: usize, batch: usize) -> f64 {
        let d = self.dims;
        let elems = match slot {
            4 => batch * d.input,
            5 => d.input,
            6 => batch * d.hidden,
            7 => d.hidden,
            _ => 1,
        };
        (elems as f64).sqrt()
    }

    /// Measures σ₀ of every site on the first batch and sets each scale from it.
    /// Sites already initialized keep their scale.
    pub fn gamma_init(&mut self, x: &[f64], batch: usize, spec: &QuantSpec) -> Result<()> {
        let d = self.dims;
        self.check_input(x, batch)?;
        self.act1.init_scale(x, batch, d.input, spec, d.block)?;
        self.wq1.init_scale(&self.w1, d.hidden, d.input, spec, d.block)?;
        let (a1, _) = self.act1.forward(x, batch, d.input, spec, d.block)?;
        let (w1, _) = self.wq1.forward(&self.w1, d.hidden, d.input, spec, d.block)?;
        let g1: Vec<f64> = matmul_nt(&a1, &w1, batch, d.input, d.hidden).into_iter().map(gelu).collect();
        self.act2.init_scale(&g1, batch, d.hidden, spec, d.block)?;
        self.wq2.init_scale(&self.w2, d.output, d.hidden, spec, d.block)?;
        Ok(())
    }

    fn check_input(&self, x: &[f64], batch: usize) -> Result<()> {
        if batch == 0 || x.len() != batch * self.dims.input {
            return Err(Error::Shape(format!(
                "{} input values for batch {batch} of width {}",
                x.len(),
                self.dims.input
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64], labels: &[usize], spec: &QuantSpec) -> Result<ForwardCache> {
        let d = self.dims;
        let batch = labels.len();
        self.check_input(x, batch)?;
        if let Some(&bad) = labels.iter().find(|&&l| l >= d.classes) {
            return Err(Error::InvalidArgument(format!("label {bad} with {} classes", d.classes)));
        }
        let (a1, t_a1) = self.act1.forward(x, batch, d.input, spec, d.block)?;
        let (w1, t_w1) = self.wq1.forward(&self.w1, d.hidden, d.input, spec, d.block)?;
        let h1 = matmul_nt(&a1, &w1, batch, d.input, d.hidden);
        let g1: Vec<f64> = h1.iter().map(|&v| gelu(v)).collect();
        let (a2, t_a2) = self.act2.forward(&g1, batch, d.hidden, spec, d.block)?;
        let (w2, t_w2) = self.wq2.forward(&self.w2, d.output, d.hidden, spec, d.block)?;
        let h2 = matmul_nt(&a2, &w2, batch, d.hidden, d.output);
        let mut logits = matmul_nt(&h2, &self.wr, batch, d.output, d.classes);
        for row in logits.chunks_mut(d.classes) {
            for (l, b) in row.iter_mut().zip(&self.br) {
                *l += b;
            }
        }

        let mut probs = vec![0.0; logits.len()];
        let mut loss = 0.0;
        let mut correct = 0;
        for ((row, p), &y) in logits.chunks(d.classes).zip(probs.chunks_mut(d.classes)).zip(labels) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (pi, &l) in p.iter_mut().zip(row) {
                *pi = (l - max).exp();
                z += *pi;
            }
            for pi in p.iter_mut() {
                *pi /= z;
            }
            loss += z.ln() + max - row[y];
            let argmax = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0;
            correct += usize::from(argmax == y);
        }
        loss /= batch as f64;
        if !loss.is_finite() {
            return Err(Error::Domain(format!("non-finite loss {loss}")));
        }

        Ok(ForwardCache {
            batch,
            labels: labels.to_vec(),
            a1,
            t_a1,
            w1,
            t_w1,
            h1,
            a2,
            t_a2,
            w2,
            t_w2,
            h2,
            logits,
            probs,
            loss,
            correct,
        })
    }

    pub fn backward(&self, cache: &ForwardCache) -> Result<Grads> {
        let d = self.dims;
        let b = cache.batch;
        let mut dlogits = cache.probs.clone();
        for (row, &y) in dlogits.chunks_mut(d.classes).zip(&cache.labels) {
            row[y] -= 1.0;
            for v in row.iter_mut() {
                *v /= b as f64;
            }
        }
        let wr = matmul_tn(&dlogits, &cache.h2, b, d.classes, d.output);
        let mut br = vec![0.0; d.classes];
        for row in dlogits.chunks(d.classes) {
            for (g, v) in br.iter_mut().zip(row) {
                *g += v;
            }
        }
        let dh2 = matmul_nn(&dlogits, &self.wr, b, d.classes, d.output);

        let da2 = matmul_nn(&dh2, &cache.w2, b, d.output, d.hidden);
        let dw2hat = matmul_tn(&dh2, &cache.a2, b, d.output, d.hidden);
        let (dg1, act2) = self.act2.backward(&da2, &cache.t_a2)?;
        let (w2, wq2) = self.wq2.backward(&dw2hat, &cache.t_w2)?;

        let dh1: Vec<f64> = dg1.iter().zip(&cache.h1).map(|(g, &h)| g * gelu_grad(h)).collect();
        let da1 = matmul_nn(&dh1, &cache.w1, b, d.hidden, d.input);
        let dw1hat = matmul_tn(&dh1, &cache.a1, b, d.hidden, d.input);
        let (_, act1) = self.act1.backward(&da1, &cache.t_a1)?;
        let (w1, wq1) = self.wq1.backward(&dw1hat, &cache.t_w1)?;

        Ok(Grads {
            slots: [w1, w2, wr, br, act1, wq1, act2, wq2],
        })
    }

    /// Code histograms of the two weight sites under `spec`, or `None` for full precision.
    pub fn weight_histograms(&self, spec: &QuantSpec) -> Result<Option<Vec<(String, CodeHistogram)>>> {
        let d = self.dims;
        let (_, t1) = self.wq1.forward(&self.w1, d.hidden, d.input, spec, d.block)?;
        let (_, t2) = self.wq2.forward(&self.w2, d.output, d.hidden, spec, d.block)?;
        Ok(match (t1.histogram(), t2.histogram()) {
            (Some(h1), Some(h2)) => Some(vec![("w1".to_string(), h1), ("w2".to_string(), h2)]),
            _ => None,
        })
    }
}

/// Intermediate values of one forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub batch: usize,
    pub labels: Vec<usize>,
    /// Dequantized input activations `[batch, input]`.
    pub a1: Vec<f64>,
    pub t_a1: SiteTrace,
    /// Dequantized first-layer weights.
    pub w1: Vec<f64>,
    pub t_w1: SiteTrace,
    pub h1: Vec<f64>,
    pub a2: Vec<f64>,
    pub t_a2: SiteTrace,
    pub w2: Vec<f64>,
    pub t_w2: SiteTrace,
    pub h2: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub loss: f64,
    pub correct: usize,
}

/// Gradients in [`PARAM_NAMES`] order. Scale slots are empty when the site has no scale parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub slots: [Vec<f64>; 8],
}
