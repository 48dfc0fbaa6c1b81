use bbq_core::entropy::{entropy, model_weight_entropy, tensor_entropy, CodeHistogram};
use bbq_core::hadamard::HadamardPlan;
use bbq_core::quantizers::{bbq_quantize, Bits, Granularity, QuantConfig, ScaleParam};
use bbq_core::Tensor;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn degenerate_and_uniform() {
    assert_eq!(entropy(&[1.5; 100]).unwrap(), 0.0);
    for b in 1..=4u32 {
        let set = Bits::new(b).unwrap().code_set(0.0);
        let codes: Vec<f64> = set.iter().cycle().take(set.len() * 10).cloned().collect();
        assert!((entropy(&codes).unwrap() - f64::from(b)).abs() < 1e-12);
    }
}

#[test]
fn skewed_two_bit_distribution() {
    let mut codes = Vec::new();
    for (c, n) in [(-1.5, 40), (-0.5, 30), (0.5, 20), (1.5, 10)] {
        codes.extend(std::iter::repeat_n(c, n));
    }
    let oracle: f64 = [0.4f64, 0.3, 0.2, 0.1].iter().map(|p| -p * p.log2()).sum();
    assert!((entropy(&codes).unwrap() - oracle).abs() < 1e-12);
    assert!((oracle - 1.8464).abs() < 1e-4);
}

#[test]
fn empty_input_is_an_error() {
    assert!(entropy(&[]).is_err());
    assert!(model_weight_entropy(&[]).is_err());
}

#[test]
fn pooling_two_disjoint_layers() {
    let a = CodeHistogram::from_codes(&[1.0; 50]);
    let b = CodeHistogram::from_codes(&[-1.0; 50]);
    let e = model_weight_entropy(&[("a".into(), a), ("b".into(), b)]).unwrap();
    assert!((e.pooled - 1.0).abs() < 1e-12);
    assert_eq!(e.mean_per_layer, 0.0);
    assert_eq!(e.per_layer.len(), 2);
}

#[test]
fn all_zero_weights_have_zero_entropy() {
    let cfg = QuantConfig::bbq(Bits::new(2).unwrap(), HadamardPlan::new(64).unwrap(), Granularity::PerChannel);
    let (qt, _) = bbq_quantize(&Tensor::zeros(vec![4, 64]).unwrap(), &cfg, &ScaleParam::fixed(vec![1.0; 4], 64)).unwrap();
    assert_eq!(tensor_entropy(&qt).unwrap(), 0.0);
}

fn codes(seed: u64, n: usize, b: u32) -> Vec<f64> {
    use rand::Rng;
    let set = Bits::new(b).unwrap().code_set(Bits::new(b).unwrap().bbq_zero_point());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let skew = rng.random_range(0.0..3.0);
    (0..n)
        .map(|_| {
            let u: f64 = rng.random::<f64>().powf(1.0 + skew);
            set[((u * set.len() as f64) as usize).min(set.len() - 1)]
        })
        .collect()
}

proptest! {
    #[test]
    fn entropy_bounded_by_bits(seed in any::<u64>(), b in 1u32..=4, n in 1usize..2000) {
        let h = entropy(&codes(seed, n, b)).unwrap();
        prop_assert!(h >= 0.0 && h <= f64::from(b) + 1e-12);
    }

    #[test]
    fn permutation_invariance(seed in any::<u64>(), b in 1u32..=4, n in 1usize..2000) {
        let c = codes(seed, n, b);
        let mut shuffled = c.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 1));
        prop_assert_eq!(entropy(&c).unwrap(), entropy(&shuffled).unwrap());
    }

    #[test]
    fn mixing_never_drops_below_the_parts(s1 in any::<u64>(), s2 in any::<u64>(), b in 1u32..=4, n1 in 1usize..1000, n2 in 1usize..1000) {
        let h1 = CodeHistogram::from_codes(&codes(s1, n1, b));
        let h2 = CodeHistogram::from_codes(&codes(s2, n2, b));
        let mut mixed = h1.clone();
        mixed.merge(&h2);
        prop_assert_eq!(mixed.total(), (n1 + n2) as u64);
        let (e1, e2) = (h1.entropy_bits().unwrap(), h2.entropy_bits().unwrap());
        prop_assert!(mixed.entropy_bits().unwrap() >= e1.min(e2) - 1e-12);
    }
}
