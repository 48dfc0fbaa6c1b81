//! `bbq`: command-line front end for the BBQ quantization toolkit.
//!
//! Exit status: 0 on success, 1 on a domain error (one `error kind=... msg=...` line on
//! stderr), 2 on a usage error. Every run echoes its resolved configuration on stderr as a
//! `config {...}` JSON line.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use bbq_core::entropy::{tensor_entropy, ModelEntropy};
use bbq_core::gaussian::{build_inv_cdf_table, estimate_zeta_star, MIN_ZETA_SAMPLES};
use bbq_core::hadamard::HadamardPlan;
use bbq_core::kernelsim::{lowprec_matmul, op_counts, quantize_kernel_sim, Encoding, QuantizedTensor};
use bbq_core::quantizers::{
    alpha_star, bbq_dequantize, bbq_fast_quantize, bbq_quantize, build_nf_codebook, codebook_dequantize,
    codebook_quantize, lsq_dequantize, lsq_init_step, lsq_quantize, quest_dequantize, quest_quantize, rms_sigma,
    uniform_gaussian_mse, Bits, EmaState, Granularity, LsqConfig, Method, QuantConfig, QuestConfig, ScaleParam,
};
use bbq_core::selftest::run_selftest;
use bbq_core::tensorio::{read_tensor, write_csv, write_tensor, Tensor, TensorFile};
use bbq_core::training::{train_with, write_log_csv, Checkpoint, ModelDims, OptimizerKind, SiteMethod, TrainConfig};
use bbq_core::{Error, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

#[derive(Parser, Debug, Serialize)]
#[command(name = "bbq", version, about = "Bell Box Quantization toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
enum Command {
    /// Quantize a real tensor file into packed 4-bit codes (+ JSON sidecar).
    Quantize(QuantizeArgs),
    /// Dequantize a packed tensor back to real values.
    Dequantize(DequantizeArgs),
    /// Code entropy of a quantized tensor, a real tensor, or a training checkpoint, as CSV.
    Entropy(EntropyArgs),
    /// Monte-Carlo estimate of the magnitude-matching constant zeta*.
    Zeta(ZetaArgs),
    /// Clip scale alpha* of the uniform (QuEST) quantizer per bit width.
    AlphaStar(AlphaStarArgs),
    /// Low-precision matmul of quantized activations [M, K] and weights [N, K].
    Matmul(MatmulArgs),
    /// Operation counts and CPU timings of the simulated inference kernel.
    Bench(BenchArgs),
    /// Quantization-aware training of the toy model on the synthetic task.
    Train(TrainArgs),
    /// Run the invariant suite.
    Selftest(SelftestArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
enum MethodArg {
    Bbq,
    BbqFast,
    Lsq,
    Quest,
    Codebook,
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
enum GranularityArg {
    PerChannel,
    PerTensor,
}

impl From<GranularityArg> for Granularity {
    fn from(g: GranularityArg) -> Self {
        match g {
            GranularityArg::PerChannel => Granularity::PerChannel,
            GranularityArg::PerTensor => Granularity::PerTensor,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
enum EncodingArg {
    Int4,
    Mxfp4,
    Raw,
}

impl From<EncodingArg> for Encoding {
    fn from(e: EncodingArg) -> Self {
        match e {
            EncodingArg::Int4 => Encoding::Int4,
            EncodingArg::Mxfp4 => Encoding::MxFp4,
            EncodingArg::Raw => Encoding::RawCodes,
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct QuantizeArgs {
    /// Real-valued input tensor file.
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "bbq")]
    method: MethodArg,
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u32).range(1..=4))]
    bits: u32,
    /// Hadamard block size.
    #[arg(long, default_value_t = 128)]
    block: usize,
    #[arg(long, value_enum, default_value = "per-tensor")]
    granularity: GranularityArg,
    /// 4-bit encoding; defaults to INT4 for 3-4 bits and MX FP4 for 1-2 bits.
    #[arg(long, value_enum)]
    encoding: Option<EncodingArg>,
    /// Fixed BBQ gamma (all groups). Default: zeta* times the measured RMS.
    #[arg(long)]
    gamma: Option<f64>,
    /// LSQ step size. Default: 2 mean|x| / sqrt(2^(b-1) - 1).
    #[arg(long)]
    step: Option<f64>,
    /// BBQ-Fast running E[1/sigma]. Default: seeded with the input's exact 1/sigma.
    #[arg(long)]
    ema: Option<f64>,
    /// Codebook scale sigma. Default: RMS of the input.
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug, Serialize)]
struct DequantizeArgs {
    /// Packed tensor file (its `.json` sidecar must sit next to it).
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Hadamard block size used at quantization time (QuEST only).
    #[arg(long, default_value_t = 128)]
    block: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug, Serialize)]
struct EntropyArgs {
    /// Packed tensor, real tensor (quantized with BBQ first), or checkpoint directory.
    input: PathBuf,
    /// CSV output path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Bit width used when the input is a real tensor.
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u32).range(1..=4))]
    bits: u32,
    #[arg(long, default_value_t = 128)]
    block: usize,
    #[arg(long, value_enum, default_value = "per-tensor")]
    granularity: GranularityArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug, Serialize)]
struct ZetaArgs {
    #[arg(long, default_value_t = 10_000_000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct AlphaStarArgs {
    /// Bit width; all of 1..4 when omitted.
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..=4))]
    bits: Option<u32>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct MatmulArgs {
    /// Quantized activations, shape [M, K].
    activations: PathBuf,
    /// Quantized weights, shape [N, K].
    weights: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug, Serialize)]
struct BenchArgs {
    #[arg(long, default_value_t = 64)]
    m: usize,
    #[arg(long, default_value_t = 1024)]
    k: usize,
    #[arg(long, default_value_t = 1024)]
    n: usize,
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u32).range(1..=4))]
    bits: u32,
    #[arg(long, default_value_t = 128)]
    block: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
enum TrainMethodArg {
    Full,
    Bbq,
    BbqFast,
    Lsq,
    Quest,
}

impl From<TrainMethodArg> for SiteMethod {
    fn from(m: TrainMethodArg) -> Self {
        match m {
            TrainMethodArg::Full => SiteMethod::Full,
            TrainMethodArg::Bbq => SiteMethod::Bbq,
            TrainMethodArg::BbqFast => SiteMethod::BbqFast,
            TrainMethodArg::Lsq => SiteMethod::Lsq,
            TrainMethodArg::Quest => SiteMethod::Quest,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
enum OptimizerArg {
    Adam,
    Sgd,
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    #[arg(long, value_enum, default_value = "bbq")]
    method: TrainMethodArg,
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u32).range(1..=4))]
    bits: u32,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 2000)]
    iterations: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Decoupled weight decay on layer weights (never on gamma).
    #[arg(long, default_value_t = 0.0)]
    weight_decay: f64,
    /// Recompute gamma = zeta * sigma on every forward instead of learning it.
    #[arg(long)]
    vision: bool,
    #[arg(long, default_value_t = bbq_core::gaussian::ZETA_VISION)]
    zeta: f64,
    #[arg(long, default_value_t = 0.1)]
    warmup_frac: f64,
    #[arg(long, value_enum, default_value = "adam")]
    optimizer: OptimizerArg,
    /// Momentum for `--optimizer sgd`.
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    /// Checkpoint directory.
    #[arg(long)]
    out: PathBuf,
    /// Per-iteration log CSV; defaults to `<out>/log.csv`.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct SelftestArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn bits(b: u32) -> Result<Bits> {
    Bits::new(b)
}

fn emit_rows(header: &[&str], rows: &[Vec<String>], out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => bbq_core::tensorio::emit_csv(header, rows, p),
        None => write_csv(header, rows, std::io::stdout().lock()),
    }
}

fn quantize(a: &QuantizeArgs) -> Result<()> {
    let x = read_tensor(&a.input)?;
    let b = bits(a.bits)?;
    let plan = HadamardPlan::new(a.block)?;
    let gran: Granularity = a.granularity.into();
    let mut cfg = QuantConfig::bbq(b, plan, gran);
    if let Some(e) = a.encoding {
        cfg = cfg.with_encoding(e.into());
    }
    let groups = gran.num_groups(x.rows());
    let d = gran.group_len(x.rows(), x.cols());
    let bbq_scale = || -> Result<ScaleParam> {
        Ok(match a.gamma {
            Some(g) => ScaleParam::fixed(vec![g; groups], d),
            None => {
                let mut s = ScaleParam::uninit(groups, d);
                s.init_default(&rms_sigma(&x, &plan, gran)?);
                s
            }
        })
    };
    let qt = match a.method {
        MethodArg::Bbq => bbq_quantize(&x, &cfg, &bbq_scale()?)?.0,
        MethodArg::BbqFast => {
            if gran != Granularity::PerTensor {
                return Err(Error::Unsupported("BBQ-Fast keeps a single E[1/sigma]; use --granularity per-tensor".into()));
            }
            let e = match a.ema {
                Some(e) => e,
                None => 1.0 / rms_sigma(&x, &plan, gran)?[0],
            };
            let cfg = cfg.with_method(Method::BbqFast);
            bbq_fast_quantize(&x, &cfg, &EmaState::seeded(e), &bbq_scale()?)?
        }
        MethodArg::Lsq => {
            let step = match a.step {
                Some(s) => s,
                None => lsq_init_step(&x.to_f64(), b)?,
            };
            lsq_quantize(&x, &LsqConfig::new(b, step)?)?
        }
        MethodArg::Quest => quest_quantize(&x, &QuestConfig::new(b, plan, gran))?,
        MethodArg::Codebook => {
            let sigma = match a.sigma {
                Some(s) => s,
                None => {
                    let v = x.to_f64();
                    (v.iter().map(|t| t * t).sum::<f64>() / v.len() as f64).sqrt()
                }
            };
            codebook_quantize(&x, &build_nf_codebook(a.bits)?, sigma)?
        }
    };
    qt.write(&a.out)?;
    let h = qt.header();
    eprintln!(
        "quantized {:?} with {:?} at {} bits ({:?} encoding, {} scale(s)) -> {}",
        h.shape,
        h.method,
        h.bits.get(),
        h.encoding,
        h.scales.len(),
        a.out.display()
    );
    Ok(())
}

fn dequantize(a: &DequantizeArgs) -> Result<()> {
    let qt = QuantizedTensor::read(&a.input)?;
    let x = match qt.header().method {
        Method::Bbq | Method::BbqFast => bbq_dequantize(&qt)?,
        Method::Lsq => lsq_dequantize(&qt)?,
        Method::Quest => quest_dequantize(&qt, &HadamardPlan::new(a.block)?)?,
        Method::Codebook => codebook_dequantize(&qt, &build_nf_codebook(qt.bits().get())?)?,
    };
    write_tensor(&x, &a.out)
}

fn entropy_rows(e: &ModelEntropy) -> Vec<Vec<String>> {
    let mut rows: Vec<Vec<String>> = e
        .per_layer
        .iter()
        .map(|(n, h)| vec![n.clone(), "layer".into(), h.to_string()])
        .collect();
    rows.push(vec!["all".into(), "pooled".into(), e.pooled.to_string()]);
    rows.push(vec!["all".into(), "mean_per_layer".into(), e.mean_per_layer.to_string()]);
    rows
}

fn entropy_cmd(a: &EntropyArgs) -> Result<()> {
    let header = ["layer", "aggregation", "entropy_bits"];
    let rows = if a.input.is_dir() {
        entropy_rows(&Checkpoint::load(&a.input)?.weight_entropy()?)
    } else {
        let h = match TensorFile::read(&a.input)? {
            TensorFile::Packed { .. } => tensor_entropy(&QuantizedTensor::read(&a.input)?)?,
            TensorFile::Real(x) => {
                let plan = HadamardPlan::new(a.block)?;
                let gran: Granularity = a.granularity.into();
                let cfg = QuantConfig::bbq(bits(a.bits)?, plan, gran);
                let mut s = ScaleParam::uninit(gran.num_groups(x.rows()), gran.group_len(x.rows(), x.cols()));
                s.init_default(&rms_sigma(&x, &plan, gran)?);
                tensor_entropy(&bbq_quantize(&x, &cfg, &s)?.0)?
            }
        };
        vec![vec!["tensor".to_string(), "layer".to_string(), h.to_string()]]
    };
    emit_rows(&header, &rows, a.out.as_deref())
}

fn zeta(a: &ZetaArgs) -> Result<()> {
    if a.samples < MIN_ZETA_SAMPLES {
        return Err(Error::InvalidArgument(format!(
            "--samples must be at least {MIN_ZETA_SAMPLES}, got {}",
            a.samples
        )));
    }
    let e = estimate_zeta_star(a.samples, a.seed)?;
    emit_rows(
        &["zeta_star", "mse", "samples", "seed"],
        &[vec![
            e.zeta_star.to_string(),
            e.mse_at_optimum.to_string(),
            e.num_samples.to_string(),
            e.seed.to_string(),
        ]],
        a.out.as_deref(),
    )
}

fn alpha_star_cmd(a: &AlphaStarArgs) -> Result<()> {
    let widths: Vec<u32> = a.bits.map_or_else(|| (1..=4).collect(), |b| vec![b]);
    let rows = widths
        .into_iter()
        .map(|b| {
            let bb = bits(b)?;
            let alpha = alpha_star(bb);
            Ok(vec![
                b.to_string(),
                alpha.to_string(),
                uniform_gaussian_mse(alpha, bb).to_string(),
                (alpha / (bb.levels() as f64 - 1.0)).to_string(),
            ])
        })
        .collect::<Result<Vec<_>>>()?;
    emit_rows(&["bits", "alpha_star", "mse", "trust_factor"], &rows, a.out.as_deref())
}

fn matmul(a: &MatmulArgs) -> Result<()> {
    let x = QuantizedTensor::read(&a.activations)?;
    let w = QuantizedTensor::read(&a.weights)?;
    let y = lowprec_matmul(&x, &w)?;
    write_tensor(&y, &a.out)?;
    eprintln!("wrote {:?} -> {}", y.shape(), a.out.display());
    Ok(())
}

fn gaussian_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape, data)
}

fn bench(a: &BenchArgs) -> Result<()> {
    let b = bits(a.bits)?;
    let plan = HadamardPlan::new(a.block)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let x = gaussian_tensor(&mut rng, vec![a.m, a.k])?;
    let w = gaussian_tensor(&mut rng, vec![a.n, a.k])?;
    let table = build_inv_cdf_table(a.bits)?;

    let act_cfg = QuantConfig::bbq(b, plan, Granularity::PerTensor).with_method(Method::BbqFast);
    let sigma = rms_sigma(&x, &plan, Granularity::PerTensor)?;
    let mut act_scale = ScaleParam::uninit(1, a.m * a.k);
    act_scale.init_default(&sigma);
    let ema = EmaState::seeded(1.0 / sigma[0]);

    let w_cfg = QuantConfig::bbq(b, plan, Granularity::PerChannel);
    let mut w_scale = ScaleParam::uninit(a.n, a.k);
    w_scale.init_default(&rms_sigma(&w, &plan, Granularity::PerChannel)?);
    let (wq, _) = bbq_quantize(&w, &w_cfg, &w_scale)?;

    let t0 = Instant::now();
    let xq = quantize_kernel_sim(&x, &table, &ema, &act_cfg, &act_scale)?;
    let quantize_ms = t0.elapsed().as_secs_f64() * 1e3;
    let t1 = Instant::now();
    lowprec_matmul(&xq, &wq)?;
    let matmul_ms = t1.elapsed().as_secs_f64() * 1e3;

    let c = op_counts(a.m, a.k, a.n, a.block, b);
    emit_rows(
        &[
            "m", "k", "n", "bits", "block", "lowprec_macs", "hadamard_macs", "comparisons", "epilogue_mults",
            "dense_macs", "quantize_ms", "matmul_ms",
        ],
        &[vec![
            a.m.to_string(),
            a.k.to_string(),
            a.n.to_string(),
            a.bits.to_string(),
            a.block.to_string(),
            c.lowprec_macs.to_string(),
            c.hadamard_macs.to_string(),
            c.comparisons.to_string(),
            c.epilogue_mults.to_string(),
            c.dense_macs.to_string(),
            format!("{quantize_ms:.3}"),
            format!("{matmul_ms:.3}"),
        ]],
        a.out.as_deref(),
    )
}

fn train_cmd(a: &TrainArgs) -> Result<()> {
    let cfg = TrainConfig {
        method: a.method.into(),
        bits: bits(a.bits)?,
        lr: a.lr,
        iterations: a.iterations,
        batch_size: a.batch_size,
        seed: a.seed,
        weight_decay: a.weight_decay,
        vision_mode: a.vision,
        zeta: a.zeta,
        warmup_frac: a.warmup_frac,
        optimizer: match a.optimizer {
            OptimizerArg::Adam => OptimizerKind::default(),
            OptimizerArg::Sgd => OptimizerKind::Sgd { momentum: a.momentum },
        },
        dims: ModelDims {
            classes: a.classes,
            ..ModelDims::default()
        },
    };
    eprintln!("train config {}", serde_json::to_string(&cfg)?);
    let every = (a.iterations / 20).max(1);
    let state = train_with(cfg, |r| {
        if r.iteration % every == 0 {
            log::info!("iter {} loss {:.4} acc {:.3} entropy {:?}", r.iteration, r.loss, r.accuracy, r.pooled_entropy);
        }
    })?;
    let ckpt = Checkpoint::from_state(&state);
    ckpt.save(&a.out)?;
    let log_path = a.log.clone().unwrap_or_else(|| a.out.join("log.csv"));
    write_log_csv(&state.history, &log_path)?;
    let last = state.history.last();
    println!(
        "iterations={} final_loss={} final_accuracy={} final_pooled_entropy={} checkpoint={} log={}",
        state.iteration,
        last.map_or(f64::NAN, |r| r.loss),
        last.map_or(f64::NAN, |r| r.accuracy),
        last.and_then(|r| r.pooled_entropy).map_or_else(|| "none".to_string(), |h| h.to_string()),
        a.out.display(),
        log_path.display()
    );
    Ok(())
}

fn selftest(a: &SelftestArgs) -> Result<bool> {
    let results = run_selftest(a.seed);
    for r in &results {
        println!("{} {} {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("{} checks, {} failed", results.len(), failed);
    Ok(failed == 0)
}

fn run(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::Quantize(a) => quantize(a)?,
        Command::Dequantize(a) => dequantize(a)?,
        Command::Entropy(a) => entropy_cmd(a)?,
        Command::Zeta(a) => zeta(a)?,
        Command::AlphaStar(a) => alpha_star_cmd(a)?,
        Command::Matmul(a) => matmul(a)?,
        Command::Bench(a) => bench(a)?,
        Command::Train(a) => train_cmd(a)?,
        Command::Selftest(a) => return selftest(a),
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match serde_json::to_string(&cli.command) {
        Ok(json) => eprintln!("config {json}"),
        Err(e) => eprintln!("config unavailable: {e}"),
    }
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            let msg = serde_json::to_string(&e.to_string()).unwrap_or_else(|_| "\"\"".into());
            eprintln!("error kind={} msg={msg}", e.kind());
            ExitCode::from(1)
        }
    }
}
