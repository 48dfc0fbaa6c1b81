use bbq_core::entropy::entropy;
use bbq_core::gaussian::phi;
use bbq_core::hadamard::{fwht_blocked, HadamardPlan};
use bbq_core::kernelsim::{decode_codes, encode_codes, QuantHeader};
use bbq_core::quantizers::{
    alpha_star, bbq_backward, bbq_backward_slices, bbq_dequantize, bbq_fast_quantize, bbq_fast_update, bbq_forward,
    bbq_quantize, build_nf_codebook, codebook_dequantize, codebook_quantize, lsq_dequantize, lsq_quantize,
    quest_dequantize, quest_quantize, rms_sigma, Bits, Codebook, EmaState, GammaSource, Granularity, LsqConfig,
    Method, QuantConfig, QuestConfig, Rounding, ScaleParam, SigmaSource,
};
use bbq_core::{Error, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn bits(b: u32) -> Bits {
    Bits::new(b).unwrap()
}

fn normals(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

fn tensor(rows: usize, cols: usize, data: &[f64]) -> Tensor {
    Tensor::from_f64(vec![rows, cols], data).unwrap()
}

/// BBQ with identity transform (block 1) so `v = x / RMS(x)` exactly.
fn codes_without_transform(x: &[f64], b: u32) -> Vec<f64> {
    let cfg = QuantConfig::bbq(bits(b), HadamardPlan::new(1).unwrap(), Granularity::PerTensor);
    let scale = ScaleParam::fixed(vec![1.0], x.len());
    bbq_forward(x, 1, x.len(), &cfg, SigmaSource::Exact, GammaSource::Param(&scale), Rounding::Floor)
        .unwrap()
        .trace
        .codes
}

fn code_frequencies(codes: &[f64], levels: usize, zero_point: f64) -> Vec<f64> {
    let half = (levels / 2) as f64;
    let mut counts = vec![0usize; levels];
    for &c in codes {
        counts[(c + half + zero_point) as usize] += 1;
    }
    counts.iter().map(|&c| c as f64 / codes.len() as f64).collect()
}

#[test]
fn bbq_code_examples() {
    // RMS of [0, √2] is 1, so v = [0, √2].
    assert_eq!(codes_without_transform(&[0.0, 2f64.sqrt()], 3)[0], 0.0);
    assert_eq!(codes_without_transform(&[0.0, 2f64.sqrt()], 2)[0], 0.5);
    // RMS of [−1, 1] is 1; Φ(−1) ≈ 0.1587 so ⌊2Φ(−1)⌋ = 0.
    assert!(phi(-1.0) < 0.5);
    assert_eq!(codes_without_transform(&[-1.0, 1.0], 1), vec![-0.5, 0.5]);
}

#[test]
fn bbq_is_ito_on_gaussian_input() {
    let n = 1 << 20;
    let x = tensor(n / 128, 128, &normals(1, n));
    for b in 1..=4 {
        let cfg = QuantConfig::bbq(bits(b), HadamardPlan::new(128).unwrap(), Granularity::PerTensor);
        let (_, trace) = bbq_quantize(&x, &cfg, &ScaleParam::fixed(vec![1.0], n)).unwrap();
        for f in code_frequencies(&trace.codes, 1 << b, cfg.zero_point) {
            assert!((f - 1.0 / f64::from(1u32 << b)).abs() < 0.005, "b={b}: {f}");
        }
        assert!(entropy(&trace.codes).unwrap() >= f64::from(b) - 0.01);
    }
}

#[test]
fn bbq_dequantize_examples() {
    let deq = |b: u32, gamma: f32, code: f64| {
        let bb = bits(b);
        let h = QuantHeader {
            shape: vec![1],
            method: Method::Bbq,
            encoding: bb.default_encoding(),
            bits: bb,
            zero_point: bb.bbq_zero_point(),
            granularity: Granularity::PerTensor,
            scales: vec![gamma],
        };
        bbq_dequantize(&encode_codes(&[code], h).unwrap()).unwrap().data()[0]
    };
    assert_eq!(deq(2, 1.0, 1.5), 0.75);
    assert_eq!(deq(4, 2.0, -8.0), -2.0);
    for b in [3, 4] {
        assert_eq!(deq(b, 3.7, 0.0), 0.0);
    }
}

#[test]
fn bbq_round_trip_values_lie_on_the_scaled_grid() {
    let x = tensor(4, 256, &normals(2, 1024));
    let cfg = QuantConfig::bbq(bits(3), HadamardPlan::new(128).unwrap(), Granularity::PerChannel);
    let gamma = vec![0.5, 1.0, 1.5, 2.0];
    let (qt, trace) = bbq_quantize(&x, &cfg, &ScaleParam::fixed(gamma.clone(), 256)).unwrap();
    assert_eq!(decode_codes(&qt), trace.codes);
    let y = bbq_dequantize(&qt).unwrap();
    for (i, &v) in y.data().iter().enumerate() {
        let code = f64::from(v) / (gamma[i / 256] / 4.0);
        assert!((code - trace.codes[i]).abs() < 1e-5);
    }
}

#[test]
fn bbq_zero_gradient_gives_zero_gradients() {
    let x = tensor(1, 128, &normals(3, 128));
    let cfg = QuantConfig::bbq(bits(4), HadamardPlan::new(128).unwrap(), Granularity::PerTensor);
    let scale = ScaleParam::fixed(vec![1.0], 128);
    let (_, trace) = bbq_quantize(&x, &cfg, &scale).unwrap();
    let (gx, gg) = bbq_backward(&Tensor::zeros(vec![1, 128]).unwrap(), &trace, &scale).unwrap();
    assert!(gx.data().iter().all(|&g| g == 0.0));
    assert!(gg.iter().all(|&g| g == 0.0));
}

#[test]
fn bbq_backward_detects_stale_traces() {
    let x = tensor(1, 128, &normals(4, 128));
    let cfg = QuantConfig::bbq(bits(4), HadamardPlan::new(128).unwrap(), Granularity::PerTensor);
    let scale = ScaleParam::fixed(vec![1.0], 128);
    let (_, trace) = bbq_quantize(&x, &cfg, &scale).unwrap();
    let changed = ScaleParam::fixed(vec![2.0], 128);
    assert!(matches!(
        bbq_backward(&Tensor::zeros(vec![1, 128]).unwrap(), &trace, &changed),
        Err(Error::StaleTrace(_))
    ));
    assert!(matches!(
        bbq_backward(&Tensor::zeros(vec![1, 64]).unwrap(), &trace, &scale),
        Err(Error::StaleTrace(_))
    ));
}

/// Central finite differences of `Σ g · x̂` under the smoothed forward.
fn smoothed_bbq_fd_check(b: u32, rows: usize, cols: usize, gran: Granularity, seed: u64) -> f64 {
    let x = normals(seed, rows * cols);
    let g = normals(seed + 1, rows * cols);
    let cfg = QuantConfig::bbq(bits(b), HadamardPlan::new(cols.min(128)).unwrap(), gran);
    let groups = gran.num_groups(rows);
    let scale = ScaleParam::fixed((0..groups).map(|i| 0.8 + 0.1 * i as f64).collect(), gran.group_len(rows, cols));
    let loss = |x: &[f64]| -> f64 {
        let out = bbq_forward(x, rows, cols, &cfg, SigmaSource::Exact, GammaSource::Param(&scale), Rounding::Smooth)
            .unwrap();
        out.xhat.iter().zip(&g).map(|(a, b)| a * b).sum()
    };
    let out = bbq_forward(&x, rows, cols, &cfg, SigmaSource::Exact, GammaSource::Param(&scale), Rounding::Smooth).unwrap();
    let analytic = bbq_backward_slices(&g, &out.trace, Some(&scale)).unwrap().grad_x;
    let eps = 1e-5;
    let mut worst = 0.0f64;
    let mut xp = x.clone();
    for i in 0..x.len() {
        xp[i] = x[i] + eps;
        let up = loss(&xp);
        xp[i] = x[i] - eps;
        let down = loss(&xp);
        xp[i] = x[i];
        let fd = (up - down) / (2.0 * eps);
        worst = worst.max((fd - analytic[i]).abs() / fd.abs().max(1e-3));
    }
    worst
}

#[test]
fn bbq_backward_matches_finite_differences() {
    for b in 1..=4 {
        let err = smoothed_bbq_fd_check(b, 1, 128, Granularity::PerTensor, u64::from(b));
        assert!(err < 1e-4, "b={b}: {err}");
    }
    let err = smoothed_bbq_fd_check(3, 3, 64, Granularity::PerChannel, 9);
    assert!(err < 1e-4, "per-channel: {err}");
}

#[test]
fn ema_update_examples() {
    let e = bbq_fast_update(EmaState::default(), 2.0).unwrap();
    assert!(e.initialized);
    assert_eq!(e.e_inv_sigma, 0.5);
    assert_eq!(bbq_fast_update(EmaState::seeded(1.0), 1.0).unwrap().e_inv_sigma, 1.0);
    assert!((bbq_fast_update(EmaState::seeded(1.0), 2.0).unwrap().e_inv_sigma - 0.995).abs() < 1e-15);
    assert!(matches!(bbq_fast_update(EmaState::seeded(1.0), 0.0), Err(Error::Domain(_))));
    assert!(bbq_fast_update(EmaState::seeded(1.0), -1.0).is_err());
}

#[test]
fn bbq_fast_with_exact_seed_matches_bbq() {
    let x = tensor(8, 128, &normals(5, 1024));
    let plan = HadamardPlan::new(128).unwrap();
    let cfg = QuantConfig::bbq(bits(3), plan, Granularity::PerTensor);
    let scale = ScaleParam::fixed(vec![1.0], 1024);
    let sigma = rms_sigma(&x, &plan, Granularity::PerTensor).unwrap()[0];
    let (exact, _) = bbq_quantize(&x, &cfg, &scale).unwrap();
    let fast = bbq_fast_quantize(&x, &cfg.with_method(Method::BbqFast), &EmaState::seeded(1.0 / sigma), &scale).unwrap();
    assert_eq!(decode_codes(&exact), decode_codes(&fast));
    assert!(matches!(
        bbq_fast_quantize(&x, &cfg, &EmaState::default(), &scale),
        Err(Error::Uninitialized(_))
    ));
}

#[test]
fn bbq_fast_tracks_a_stationary_stream() {
    let plan = HadamardPlan::new(128).unwrap();
    let cfg = QuantConfig::bbq(bits(2), plan, Granularity::PerTensor);
    let n = 16 * 1024;
    let scale = ScaleParam::fixed(vec![1.0], n);
    let mut ema = EmaState::default();
    let mut last = None;
    for i in 0..1000 {
        let x = tensor(n / 128, 128, &normals(1000 + i, n).iter().map(|v| 3.0 * v).collect::<Vec<_>>());
        ema = bbq_fast_update(ema, rms_sigma(&x, &plan, Granularity::PerTensor).unwrap()[0]).unwrap();
        last = Some(x);
    }
    let x = last.unwrap();
    let exact = decode_codes(&bbq_quantize(&x, &cfg, &scale).unwrap().0);
    let fast = decode_codes(&bbq_fast_quantize(&x, &cfg.with_method(Method::BbqFast), &ema, &scale).unwrap());
    let agree = exact.iter().zip(&fast).filter(|(a, b)| a == b).count() as f64 / n as f64;
    assert!(agree >= 0.99, "agreement {agree}");
    assert!((ema.e_inv_sigma - 1.0 / 3.0).abs() < 0.01);
}

#[test]
fn gamma_initialization() {
    let mut s = ScaleParam::uninit(2, 128);
    s.init_default(&[0.5, 0.0]);
    assert!((s.gamma[0] - 1.694 * 0.5).abs() < 1e-12);
    assert_eq!(s.gamma[1], 1e-6);
    assert!(s.initialized);
}

#[test]
fn lsq_examples() {
    let one = |b: u32, s: f64, x: f32| {
        let cfg = LsqConfig::new(bits(b), s).unwrap();
        let qt = lsq_quantize(&Tensor::new(vec![1], vec![x]).unwrap(), &cfg).unwrap();
        (decode_codes(&qt)[0], lsq_dequantize(&qt).unwrap().data()[0])
    };
    assert_eq!(one(4, 1.0, 100.0), (7.0, 7.0));
    assert_eq!(one(4, 0.5, -10.0), (-8.0, -4.0));
    assert_eq!(one(4, 1.0, 0.5).0, 0.0);
    assert_eq!(one(4, 1.0, 1.5).0, 2.0);
    assert_eq!(one(4, 1.0, -2.5).0, -2.0);
    assert!(matches!(LsqConfig::new(bits(1), 1.0), Err(Error::Unsupported(_))));
    assert!(LsqConfig::new(bits(2), 0.0).is_err());
}

#[test]
fn quest_alpha_star_is_the_gaussian_mse_optimum() {
    let expected = [1.596, 0.996, 0.586, 0.335];
    for (b, want) in (1..=4).zip(expected) {
        assert!((alpha_star(bits(b)) - want).abs() < 1e-9, "b={b}");
    }
}

#[test]
fn quest_half_step_bound() {
    let plan = HadamardPlan::new(128).unwrap();
    for b in 2..=4 {
        let cfg = QuestConfig::new(bits(b), plan, Granularity::PerTensor);
        let x = tensor(16, 128, &normals(6 + u64::from(b), 2048));
        let qt = quest_quantize(&x, &cfg).unwrap();
        let step = f64::from(qt.scales()[0]);
        let u = fwht_blocked(&x, &plan).unwrap();
        let uhat = fwht_blocked(&quest_dequantize(&qt, &plan).unwrap(), &plan).unwrap();
        let half = f64::from(1u32 << (b - 1));
        let mut checked = 0;
        for (a, r) in u.data().iter().zip(uhat.data()) {
            let f = f64::from(*a) / step - 0.5;
            if f > -half - 0.5 && f < half - 0.5 {
                assert!((f64::from(*a) - f64::from(*r)).abs() <= step / 2.0 + 1e-5);
                checked += 1;
            }
        }
        assert!(checked > 1900);
    }
}

#[test]
fn quest_entropy_sits_below_bbq() {
    let n = 1 << 18;
    let x = tensor(n / 128, 128, &normals(7, n));
    let plan = HadamardPlan::new(128).unwrap();
    let quest = decode_codes(&quest_quantize(&x, &QuestConfig::new(bits(2), plan, Granularity::PerTensor)).unwrap());
    let cfg = QuantConfig::bbq(bits(2), plan, Granularity::PerTensor);
    let (_, trace) = bbq_quantize(&x, &cfg, &ScaleParam::fixed(vec![1.0], n)).unwrap();
    let hq = entropy(&quest).unwrap();
    let hb = entropy(&trace.codes).unwrap();
    assert!(hq < 2.0 && hq < hb, "quest {hq} vs bbq {hb}");
}

#[test]
fn quest_zero_input() {
    let plan = HadamardPlan::new(4).unwrap();
    let cfg = QuestConfig::new(bits(2), plan, Granularity::PerTensor);
    let x = Tensor::zeros(vec![1, 8]).unwrap();
    let qt = quest_quantize(&x, &cfg).unwrap();
    assert!(decode_codes(&qt).iter().all(|&c| c == 0.0));
    assert!(quest_dequantize(&qt, &plan).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn identity_codebook_reproduces_bbq_codes() {
    for b in 1..=4 {
        let x = normals(8, 4096);
        let rms = (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt();
        let z = bits(b).bbq_zero_point();
        let cb = Codebook::identity(bits(b), z);
        let qt = codebook_quantize(&tensor(1, 4096, &x), &cb, rms).unwrap();
        let values: Vec<f64> = codebook_dequantize(&qt, &cb)
            .unwrap()
            .data()
            .iter()
            .map(|&v| (f64::from(v) / rms * 2.0).round() / 2.0)
            .collect();
        assert_eq!(values, codes_without_transform(&x, b), "b={b}");
    }
}

#[test]
fn codebook_is_ito_on_gaussian_input() {
    let n = 1 << 20;
    let x = tensor(1, n, &normals(9, n));
    for b in 1..=4 {
        let cb = build_nf_codebook(b).unwrap();
        let y = codebook_dequantize(&codebook_quantize(&x, &cb, 1.0).unwrap(), &cb).unwrap();
        let mut counts = vec![0usize; cb.len()];
        for &v in y.data() {
            let i = cb.values().iter().position(|&t| (t as f32) == v).unwrap();
            counts[i] += 1;
        }
        for c in counts {
            assert!((c as f64 / n as f64 - 1.0 / cb.len() as f64).abs() < 0.005);
        }
    }
}

#[test]
fn one_bit_median_split() {
    let cb = Codebook::new(vec![-1.0, 1.0]).unwrap();
    let x = Tensor::new(vec![4], vec![-2.0, -0.001, 0.0, 3.0]).unwrap();
    let y = codebook_dequantize(&codebook_quantize(&x, &cb, 1.0).unwrap(), &cb).unwrap();
    assert_eq!(y.data(), &[-1.0, -1.0, 1.0, 1.0]);
}

#[test]
fn codebook_validation() {
    assert!(Codebook::new(vec![1.0, 0.0]).is_err());
    assert!(Codebook::new(vec![0.0, 1.0, 2.0]).is_err());
    assert!(Codebook::new(vec![0.0, 0.0]).is_err());
}

#[test]
fn nf_codebooks() {
    assert_eq!(build_nf_codebook(1).unwrap().values(), &[-1.0, 1.0]);
    for b in 1..=4 {
        let v = build_nf_codebook(b).unwrap().values().to_vec();
        let n = v.len();
        assert_eq!(n, 1 << b);
        for i in 0..n {
            assert_eq!(v[i], -v[n - 1 - i]);
        }
        assert_eq!(v[0], -1.0);
        assert_eq!(v[n - 1], 1.0);
    }
    assert!(build_nf_codebook(0).is_err());
    assert!(build_nf_codebook(5).is_err());
}

proptest! {
    #[test]
    fn bbq_codes_stay_in_the_code_set(seed in any::<u64>(), b in 1u32..=4, scale in 1e-3f64..1e3, rows in 1usize..4) {
        let x: Vec<f64> = normals(seed, rows * 128).iter().map(|v| v * scale).collect();
        let cfg = QuantConfig::bbq(bits(b), HadamardPlan::new(32).unwrap(), Granularity::PerChannel);
        let (qt, trace) = bbq_quantize(&tensor(rows, 128, &x), &cfg, &ScaleParam::fixed(vec![1.0; rows], 128)).unwrap();
        let set = bits(b).code_set(cfg.zero_point);
        for c in &trace.codes {
            prop_assert!(set.contains(c));
        }
        prop_assert_eq!(decode_codes(&qt), trace.codes.clone());
        let h = entropy(&trace.codes).unwrap();
        prop_assert!((0.0..=f64::from(b) + 1e-12).contains(&h));
    }

    #[test]
    fn lsq_and_quest_codes_stay_in_range(seed in any::<u64>(), b in 2u32..=4, scale in 1e-2f64..1e2) {
        let x: Vec<f64> = normals(seed, 256).iter().map(|v| v * scale).collect();
        let t = tensor(2, 128, &x);
        let half = f64::from(1u32 << (b - 1));
        let lsq = decode_codes(&lsq_quantize(&t, &LsqConfig::new(bits(b), scale / 2.0).unwrap()).unwrap());
        let quest = decode_codes(&quest_quantize(&t, &QuestConfig::new(bits(b), HadamardPlan::new(128).unwrap(), Granularity::PerTensor)).unwrap());
        for c in lsq.iter().chain(&quest) {
            prop_assert!(*c >= -half && *c <= half - 1.0 && c.fract() == 0.0);
        }
    }
}
