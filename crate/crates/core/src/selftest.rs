//! Invariant suite run by `bbq selftest`. Each check is self-contained, seeded, and small
//! enough that the whole suite finishes in seconds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::entropy::{entropy, CodeHistogram};
use crate::error::Result;
use crate::gaussian::{build_inv_cdf_table, phi, phi_inv, ZETA_STAR};
use crate::hadamard::{hadamard_matrix, HadamardPlan};
use crate::kernelsim::{binsearch_bins, encode_codes, lowprec_matmul, Encoding, NibbleCodec, QuantHeader};
use crate::quantizers::{
    alpha_star, bbq_backward_slices, bbq_fast_update, bbq_forward, build_nf_codebook, codebook_bins, lsq_forward,
    phi_bin, quest_forward, Bits, EmaState, GammaSource, Granularity, LsqConfig, Method, QuantConfig, QuestConfig,
    Rounding, ScaleParam, SigmaSource,
};
use crate::tensorio::{Tensor, TensorFile};
use crate::training::{ModelDims, Mode, SiteMethod, TrainConfig, TrainState, PARAM_NAMES};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type Check = fn(&mut ChaCha8Rng) -> Result<(bool, String)>;

const CHECKS: &[(&str, Check)] = &[
    ("tensor_file_round_trip", tensor_file_round_trip),
    ("hadamard_involution_and_energy", hadamard_involution_and_energy),
    ("hadamard_fast_matches_matrix", hadamard_fast_matches_matrix),
    ("phi_inv_inverts_phi", phi_inv_inverts_phi),
    ("quantile_table_antisymmetric", quantile_table_antisymmetric),
    ("bbq_code_range", bbq_code_range),
    ("bbq_ito_frequencies", bbq_ito_frequencies),
    ("binsearch_matches_floor", binsearch_matches_floor),
    ("nibble_round_trip", nibble_round_trip),
    ("lowprec_matmul_matches_dense", lowprec_matmul_matches_dense),
    ("bbq_fast_exact_seed_identical", bbq_fast_exact_seed_identical),
    ("ema_code_agreement", ema_code_agreement),
    ("bbq_ste_gradient", bbq_ste_gradient),
    ("magnitude_preservation", magnitude_preservation),
    ("entropy_bounds_and_permutation", entropy_bounds_and_permutation),
    ("entropy_concavity", entropy_concavity),
    ("quest_half_step_bound", quest_half_step_bound),
    ("quest_entropy_below_bbq", quest_entropy_below_bbq),
    ("lsq_clip_and_ties", lsq_clip_and_ties),
    ("codebook_ito_and_identity", codebook_ito_and_identity),
    ("toy_model_gradient", toy_model_gradient),
    ("training_deterministic", training_deterministic),
    ("vision_gamma_recomputed", vision_gamma_recomputed),
];

pub fn check_names() -> Vec<&'static str> {
    CHECKS.iter().map(|(n, _)| *n).collect()
}

/// Runs every check with an independent generator derived from `seed`.
pub fn run_selftest(seed: u64) -> Vec<CheckResult> {
    CHECKS
        .iter()
        .enumerate()
        .map(|(i, (name, check))| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
            let (passed, detail) = match check(&mut rng) {
                Ok(r) => r,
                Err(e) => (false, format!("error: {e}")),
            };
            CheckResult { name, passed, detail }
        })
        .collect()
}

fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn bits(b: u32) -> Bits {
    Bits::new(b).expect("bit width in range")
}

fn tensor_file_round_trip(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let t = Tensor::from_f64(vec![3, 5], &normals(rng, 15))?;
    let back = TensorFile::from_bytes(&TensorFile::Real(t.clone()).to_bytes()?)?;
    Ok((back == TensorFile::Real(t), "15-element tensor".into()))
}

fn hadamard_involution_and_energy(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let plan = HadamardPlan::new(64)?;
    let x = normals(rng, 256);
    let mut y = x.clone();
    plan.apply_in_place(&mut y);
    let energy = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>();
    let energy_err = (energy(&y) - energy(&x)).abs() / energy(&x);
    plan.apply_in_place(&mut y);
    let inv_err = x.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok((
        inv_err < 1e-12 && energy_err < 1e-12,
        format!("involution err {inv_err:.1e}, energy rel err {energy_err:.1e}"),
    ))
}

fn hadamard_fast_matches_matrix(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let h = 32;
    let m = hadamard_matrix(h)?;
    let x = normals(rng, h);
    let mut fast = x.clone();
    HadamardPlan::new(h)?.apply_in_place(&mut fast);
    let err = (0..h)
        .map(|i| {
            let dense: f64 = (0..h).map(|j| f64::from(m.data()[i * h + j]) * x[j]).sum();
            (dense - fast[i]).abs()
        })
        .fold(0.0, f64::max);
    Ok((err < 1e-5, format!("max diff {err:.1e}")))
}

fn phi_inv_inverts_phi(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let p: f64 = rng.random_range(1e-6..1.0 - 1e-6);
        worst = worst.max((phi(phi_inv(p)?) - p).abs());
    }
    Ok((worst < 1e-12, format!("max |Φ(Φ⁻¹(p)) − p| = {worst:.1e}")))
}

fn quantile_table_antisymmetric(_: &mut ChaCha8Rng) -> Result<(bool, String)> {
    for b in 1..=4 {
        let t = build_inv_cdf_table(b)?;
        let n = t.boundaries().len();
        for i in 1..n {
            if t.boundaries()[i] != -t.boundaries()[n - i] {
                return Ok((false, format!("b={b} i={i}")));
            }
        }
    }
    Ok((true, "b = 1..4".into()))
}

fn bbq_forward_codes(x: &[f64], b: u32, block: usize, rows: usize) -> Result<Vec<f64>> {
    let cfg = QuantConfig::bbq(bits(b), HadamardPlan::new(block)?, Granularity::PerTensor);
    let scale = ScaleParam::fixed(vec![1.0], x.len());
    let out = bbq_forward(x, rows, x.len() / rows, &cfg, SigmaSource::Exact, GammaSource::Param(&scale), Rounding::Floor)?;
    Ok(out.trace.codes)
}

fn bbq_code_range(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let x: Vec<f64> = normals(rng, 4096).into_iter().map(|v| v * 3.0 + 0.5).collect();
    for b in 1..=4 {
        let set = bits(b).code_set(bits(b).bbq_zero_point());
        if !bbq_forward_codes(&x, b, 128, 32)?.iter().all(|c| set.contains(c)) {
            return Ok((false, format!("b={b} emitted a code outside its set")));
        }
    }
    Ok((true, "b = 1..4".into()))
}

fn bbq_ito_frequencies(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let x = normals(rng, 1 << 18);
    let mut detail = String::new();
    let mut ok = true;
    for b in 1..=4 {
        let codes = bbq_forward_codes(&x, b, 128, 1 << 11)?;
        let h = entropy(&codes)?;
        let hist = CodeHistogram::from_codes(&codes);
        let worst = hist
            .counts()
            .map(|(_, n)| (n as f64 / codes.len() as f64 - 1.0 / (1 << b) as f64).abs())
            .fold(0.0, f64::max);
        ok &= worst <= 0.005 && h >= b as f64 - 0.01;
        detail.push_str(&format!("b={b}: H={h:.4} max freq dev {worst:.4}; "));
    }
    Ok((ok, detail))
}

fn binsearch_matches_floor(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let v: Vec<f64> = (0..100_000).map(|_| rng.random_range(-4.0..4.0)).collect();
    let mut disagree = 0;
    for b in 1..=4 {
        let t = build_inv_cdf_table(b)?;
        for (i, &bin) in binsearch_bins(&v, &t).iter().enumerate() {
            if bin as usize != phi_bin(v[i], 1 << b) {
                disagree += 1;
            }
        }
    }
    Ok((disagree < 4, format!("{disagree} disagreements in 400000")))
}

fn nibble_round_trip(_: &mut ChaCha8Rng) -> Result<(bool, String)> {
    for codec in [NibbleCodec::INT4, NibbleCodec::MXFP4] {
        for n in 0..16u8 {
            let v = codec.decode(n);
            let back = codec.encode(f64::from(v));
            let same = back.map(|m| codec.decode(m) == v).unwrap_or(false);
            if !same {
                return Ok((false, format!("{:?} nibble {n:#06b}", codec.encoding)));
            }
        }
    }
    for b in 1..=4 {
        let z = bits(b).bbq_zero_point();
        bits(b).default_encoding().check_representable(bits(b), z)?;
    }
    Ok((true, "16 nibbles x 2 encodings".into()))
}

fn lowprec_matmul_matches_dense(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let (m, k, n) = (8, 32, 6);
    let header = |shape: Vec<usize>, scales: Vec<f32>| QuantHeader {
        shape,
        method: Method::Bbq,
        encoding: Encoding::Int4,
        bits: bits(4),
        zero_point: 0.0,
        granularity: Granularity::PerChannel,
        scales,
    };
    let codes = |rng: &mut ChaCha8Rng, len| -> Vec<f64> { (0..len).map(|_| rng.random_range(-8..=7) as f64).collect() };
    let ca = codes(rng, m * k);
    let cw = codes(rng, n * k);
    let sa: Vec<f32> = (0..m).map(|_| rng.random_range(0.1..2.0)).collect();
    let sw: Vec<f32> = (0..n).map(|_| rng.random_range(0.1..2.0)).collect();
    let a = encode_codes(&ca, header(vec![m, k], sa.clone()))?;
    let w = encode_codes(&cw, header(vec![n, k], sw.clone()))?;
    let out = lowprec_matmul(&a, &w)?;
    let mut worst = 0.0f64;
    for i in 0..m {
        for j in 0..n {
            let acc: f64 = (0..k).map(|t| ca[i * k + t] * cw[j * k + t]).sum();
            let dense = acc * f64::from(sa[i]) / 8.0 * f64::from(sw[j]) / 8.0;
            worst = worst.max((f64::from(out.data()[i * n + j]) - dense).abs() / dense.abs().max(1e-30));
        }
    }
    Ok((worst <= f64::from(f32::EPSILON), format!("max rel err {worst:.1e}")))
}

fn bbq_fast_exact_seed_identical(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let x = normals(rng, 512);
    let cfg = QuantConfig::bbq(bits(3), HadamardPlan::new(128)?, Granularity::PerTensor);
    let scale = ScaleParam::fixed(vec![1.0], 512);
    let exact = bbq_forward(&x, 1, 512, &cfg, SigmaSource::Exact, GammaSource::Param(&scale), Rounding::Floor)?;
    let ema = EmaState::seeded(1.0 / exact.trace.sigma[0]);
    let fast = bbq_forward(&x, 1, 512, &cfg, SigmaSource::Ema(&ema), GammaSource::Param(&scale), Rounding::Floor)?;
    Ok((fast.trace.codes == exact.trace.codes, "512 elements, b=3".into()))
}

fn ema_code_agreement(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let n = 16384;
    let cfg = QuantConfig::bbq(bits(2), HadamardPlan::new(128)?, Granularity::PerTensor);
    let scale = ScaleParam::fixed(vec![1.0], n);
    let mut ema = EmaState::default();
    let mut last = Vec::new();
    for _ in 0..1000 {
        last = normals(rng, n).into_iter().map(|v| 2.0 * v).collect();
        let out = bbq_forward(&last, 1, n, &cfg, SigmaSource::Exact, GammaSource::Param(&scale), Rounding::Floor)?;
        ema = bbq_fast_update(ema, out.trace.sigma[0])?;
    }
    let exact = bbq_forward(&last, 1, n, &cfg, SigmaSource::Exact, GammaSource::Param(&scale), Rounding::Floor)?;
    let fast = bbq_forward(&last, 1, n, &cfg, SigmaSource::Ema(&ema), GammaSource::Param(&scale), Rounding::Floor)?;
    let agree = exact.trace.codes.iter().zip(&fast.trace.codes).filter(|(a, b)| a == b).count() as f64 / n as f64;
    Ok((agree >= 0.99, format!("agreement {agree:.4}")))
}

fn bbq_ste_gradient(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let n = 128;
    let x = normals(rng, n);
    let g = normals(rng, n);
    let cfg = QuantConfig::bbq(bits(3), HadamardPlan::new(128)?, Granularity::PerTensor);
    let scale = ScaleParam::fixed(vec![1.3], n);
    let loss = |x: &[f64]| -> Result<f64> {
        let out = bbq_forward(x, 1, n, &cfg, SigmaSource::Exact, GammaSource::Param(&scale), Rounding::Smooth)?;
        Ok(out.xhat.iter().zip(&g).map(|(a, b)| a * b).sum())
    };
    let out = bbq_forward(&x, 1, n, &cfg, SigmaSource::Exact, GammaSource::Param(&scale), Rounding::Smooth)?;
    let analytic = bbq_backward_slices(&g, &out.trace, Some(&scale))?.grad_x;
    let eps = 1e-5;
    let mut worst = 0.0f64;
    let mut xp = x.clone();
    for i in 0..n {
        xp[i] = x[i] + eps;
        let up = loss(&xp)?;
        xp[i] = x[i] - eps;
        let down = loss(&xp)?;
        xp[i] = x[i];
        let fd = (up - down) / (2.0 * eps);
        worst = worst.max((fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-6));
    }
    Ok((worst <= 1e-4, format!("max rel err {worst:.1e}")))
}

fn magnitude_preservation(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let x: Vec<f64> = normals(rng, 1 << 14).into_iter().map(|v| 0.7 * v).collect();
    let mut detail = String::new();
    let mut ok = true;
    for b in 1..=4 {
        let cfg = QuantConfig::bbq(bits(b), HadamardPlan::new(128)?, Granularity::PerTensor);
        let sigma0 = crate::quantizers::transformed_rms(&x, 128, 128, &cfg.plan, cfg.granularity)?;
        let mut scale = ScaleParam::uninit(1, x.len());
        scale.init_default(&sigma0);
        let out = bbq_forward(&x, 128, 128, &cfg, SigmaSource::Exact, GammaSource::Param(&scale), Rounding::Floor)?;
        let mean_abs = |v: &[f64]| v.iter().map(|a| a.abs()).sum::<f64>() / v.len() as f64;
        let ratio = mean_abs(&out.xhat) / mean_abs(&x);
        ok &= (ratio - 1.0).abs() <= 0.1;
        detail.push_str(&format!("b={b}: {ratio:.3}; "));
    }
    Ok((ok, detail))
}

fn entropy_bounds_and_permutation(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    use rand::seq::SliceRandom;
    let mut codes: Vec<f64> = (0..1000).map(|_| rng.random_range(-4..=3) as f64).collect();
    let h = entropy(&codes)?;
    codes.shuffle(rng);
    let h2 = entropy(&codes)?;
    Ok(((0.0..=3.0).contains(&h) && h == h2, format!("H = {h:.4}")))
}

fn entropy_concavity(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let a: Vec<f64> = (0..500).map(|_| rng.random_range(-2..=1) as f64).collect();
    let b: Vec<f64> = (0..300).map(|_| rng.random_range(0..=1) as f64).collect();
    let mut mixed = CodeHistogram::from_codes(&a);
    mixed.merge(&CodeHistogram::from_codes(&b));
    let (ha, hb, hm) = (entropy(&a)?, entropy(&b)?, mixed.entropy_bits()?);
    Ok((hm >= ha.min(hb), format!("H(a)={ha:.3} H(b)={hb:.3} H(mix)={hm:.3}")))
}

fn quest_half_step_bound(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let x = normals(rng, 1024);
    let cfg = QuestConfig::new(bits(3), HadamardPlan::new(128)?, Granularity::PerTensor);
    let (xhat, trace) = quest_forward(&x, 8, 128, &cfg)?;
    // Compare in the transformed domain, where the bound holds per coordinate.
    let (mut u, mut uhat) = (x.clone(), xhat);
    cfg.plan.apply_in_place(&mut u);
    cfg.plan.apply_in_place(&mut uhat);
    let step = trace.scales[0];
    let h = cfg.bits.half();
    let worst = u
        .iter()
        .zip(&uhat)
        .zip(&trace.f)
        .filter(|(_, &f)| f > -h - 0.5 && f < h - 0.5)
        .map(|((a, b), _)| (a - b).abs() / step)
        .fold(0.0, f64::max);
    Ok((worst <= 0.5 + 1e-9, format!("max err {worst:.4} steps")))
}

fn quest_entropy_below_bbq(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let x = normals(rng, 1 << 16);
    let bbq = entropy(&bbq_forward_codes(&x, 2, 128, 512)?)?;
    let cfg = QuestConfig::new(bits(2), HadamardPlan::new(128)?, Granularity::PerTensor);
    let quest = entropy(&quest_forward(&x, 512, 128, &cfg)?.1.codes)?;
    Ok((quest < bbq && quest < 2.0, format!("BBQ {bbq:.4} vs QuEST {quest:.4} (alpha* {})", alpha_star(bits(2)))))
}

fn lsq_clip_and_ties(_: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let a = lsq_forward(&[100.0, 0.5], &LsqConfig::new(bits(4), 1.0)?);
    let b = lsq_forward(&[-10.0], &LsqConfig::new(bits(4), 0.5)?);
    let one_bit_rejected = LsqConfig::new(bits(1), 1.0).is_err();
    Ok((a == [7.0, 0.0] && b == [-4.0] && one_bit_rejected, format!("{a:?} {b:?}")))
}

fn codebook_ito_and_identity(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let x = normals(rng, 1 << 16);
    let cb = build_nf_codebook(3)?;
    let bins = codebook_bins(&x, 1.0, cb.bits())?;
    let h = entropy(&bins.iter().map(|&i| i as f64).collect::<Vec<_>>())?;
    // Identity codebook on un-transformed data reproduces the BBQ codes with H = 1.
    let sigma = (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt();
    let id_bins = codebook_bins(&x, sigma, bits(3))?;
    let set = bits(3).code_set(0.0);
    let via_codebook: Vec<f64> = id_bins.iter().map(|&i| set[i]).collect();
    let identical = via_codebook == bbq_forward_codes(&x, 3, 1, 1)?;
    Ok((h >= 2.99 && identical, format!("NF3 entropy {h:.4}, identity match {identical}")))
}

fn small_dims() -> ModelDims {
    ModelDims {
        input: 8,
        hidden: 16,
        output: 8,
        classes: 3,
        block: 8,
    }
}

fn toy_model_gradient(_: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let cfg = TrainConfig {
        method: SiteMethod::Bbq,
        bits: bits(2),
        batch_size: 1,
        dims: small_dims(),
        ..TrainConfig::default()
    };
    let mut state = TrainState::new(cfg)?;
    let batch = state.next_batch()?;
    let spec = cfg.spec(Mode::Train, Rounding::Smooth);
    let grads = state.model.backward(&state.model.forward(&batch.x, &batch.labels, &spec)?)?;
    // Loss-level round-off (~1e-16 / ε) swamps tiny gradients for small ε; 1e-4 keeps
    // both truncation and round-off error below 1e-4 relative.
    let eps = 1e-4;
    let mut worst = (0.0f64, "");
    for (slot, name) in PARAM_NAMES.iter().enumerate() {
        for i in 0..grads.slots[slot].len() {
            let probe = |delta: f64| -> Result<f64> {
                let mut m = state.model.clone();
                m.params_mut()[slot][i] += delta;
                Ok(m.forward(&batch.x, &batch.labels, &spec)?.loss)
            };
            let fd = (probe(eps)? - probe(-eps)?) / (2.0 * eps);
            let a = grads.slots[slot][i] * state.model.grad_scaling(slot, 1);
            let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-7);
            if rel > worst.0 {
                worst = (rel, name);
            }
        }
    }
    Ok((worst.0 <= 1e-3, format!("max rel err {:.1e} ({})", worst.0, worst.1)))
}

fn training_deterministic(_: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let cfg = TrainConfig {
        bits: bits(2),
        iterations: 20,
        batch_size: 8,
        dims: ModelDims {
            classes: 4,
            ..small_dims()
        },
        ..TrainConfig::default()
    };
    let a = crate::training::train(cfg)?.history;
    let b = crate::training::train(cfg)?.history;
    let ceiling = a.iter().all(|r| r.pooled_entropy.is_some_and(|h| h <= 2.0));
    Ok((a == b && ceiling, "two 20-iteration runs".into()))
}

fn vision_gamma_recomputed(_: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let cfg = TrainConfig {
        bits: bits(3),
        iterations: 5,
        batch_size: 4,
        vision_mode: true,
        dims: small_dims(),
        ..TrainConfig::default()
    };
    let mut state = TrainState::new(cfg)?;
    let mut worst = 0.0f64;
    for _ in 0..cfg.iterations {
        let batch = state.next_batch()?;
        let cache = state.model.forward(&batch.x, &batch.labels, &state.train_spec())?;
        if let crate::training::SiteTrace::Bbq(t) = &cache.t_w1 {
            for (g, s) in t.gamma.iter().zip(&t.sigma) {
                worst = worst.max((g - cfg.zeta * s).abs());
            }
        } else {
            return Ok((false, "weight site is not BBQ".into()));
        }
        state.backward_and_step(&cache)?;
    }
    Ok((worst < 1e-12, format!("max |γ − ζσ| = {worst:.1e}; ζ* = {ZETA_STAR}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        for r in run_selftest(0) {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }

    #[test]
    fn names_are_unique() {
        let mut n = check_names();
        n.sort();
        n.dedup();
        assert_eq!(n.len(), CHECKS.len());
    }

    #[test]
    fn decode_is_used_consistently() {
        let h = QuantHeader {
            shape: vec![2],
            method: Method::Bbq,
            encoding: Encoding::MxFp4,
            bits: bits(2),
            zero_point: -0.5,
            granularity: Granularity::PerTensor,
            scales: vec![1.0],
        };
        let qt = encode_codes(&[-1.5, 0.5], h).unwrap();
        assert_eq!(crate::kernelsim::decode_codes(&qt), vec![-1.5, 0.5]);
    }
}
