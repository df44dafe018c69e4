mod common;

use common::*;
use dist_core::distinguish::{ClassifierConfig, ToyClassifier};
use dist_core::feature_net::LayerSpec;
use dist_core::saliency::{binary_mask, class_gradient, rescale, smoothgrad, SmoothGradConfig, Target};
use dist_core::Tensor;

fn small_model(seed: u64) -> ToyClassifier {
    let mut cfg = ClassifierConfig::small((8, 8), 3, seed);
    cfg.layers = vec![LayerSpec::conv(4, 3, 1, 1), LayerSpec::Relu, LayerSpec::Pool];
    cfg.hidden = Some(6);
    ToyClassifier::new(cfg).unwrap()
}

fn logit(m: &ToyClassifier, x: &Tensor, c: usize) -> f64 {
    m.logits(x).unwrap()[c]
}

fn prob(m: &ToyClassifier, x: &Tensor, c: usize) -> f64 {
    let z = m.logits(x).unwrap();
    let mx = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = z.iter().map(|v| (v - mx).exp()).sum();
    (z[c] - mx).exp() / s
}

fn fd_map(m: &ToyClassifier, x: &Tensor, c: usize, f: fn(&ToyClassifier, &Tensor, usize) -> f64) -> Vec<f64> {
    let g = fd_grad(x, 1e-6, |t| f(m, t, c));
    (0..64).map(|i| (0..3).map(|ch| g[ch * 64 + i].abs()).fold(0.0, f64::max)).collect()
}

#[test]
fn class_gradient_matches_finite_differences() {
    for seed in 0..5 {
        let m = small_model(seed);
        let x = uniform(&[3, 8, 8], 0.0, 1.0, &mut rng(100 + seed));
        for c in 0..3 {
            let a = class_gradient(&m, &x, c, Target::Logit).unwrap();
            let n = fd_map(&m, &x, c, logit);
            let worst = a.iter().zip(&n).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
            assert!(worst < 1e-4, "seed {seed} class {c}: {worst}");
            let a = class_gradient(&m, &x, c, Target::Probability).unwrap();
            let n = fd_map(&m, &x, c, prob);
            let worst = a.iter().zip(&n).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
            assert!(worst < 1e-4, "probability, seed {seed} class {c}: {worst}");
        }
    }
}

#[test]
fn noiseless_smoothgrad_is_rescaled_gradient_for_any_n() {
    let m = small_model(1);
    let x = uniform(&[3, 8, 8], 0.0, 1.0, &mut rng(3));
    let (expect, _) = rescale(&class_gradient(&m, &x, 2, Target::Logit).unwrap());
    for n in [1, 4, 7] {
        let cfg = SmoothGradConfig { samples: n, noise_std: 0.0, ..Default::default() };
        assert_eq!(smoothgrad(&m, "x", &x, 2, &cfg).unwrap().values, expect);
    }
}

#[test]
fn smoothgrad_is_seeded() {
    let m = small_model(2);
    let x = uniform(&[3, 8, 8], 0.0, 1.0, &mut rng(5));
    let cfg = SmoothGradConfig { samples: 8, ..Default::default() };
    assert_eq!(smoothgrad(&m, "x", &x, 0, &cfg).unwrap(), smoothgrad(&m, "x", &x, 0, &cfg).unwrap());
}

#[test]
fn more_samples_reduce_map_variance() {
    let m = small_model(3);
    let x = uniform(&[3, 8, 8], 0.0, 1.0, &mut rng(6));
    let spread = |n: usize| {
        let maps: Vec<Vec<f64>> = (0..12)
            .map(|s| {
                let cfg = SmoothGradConfig { samples: n, noise_std: 0.3, seed: 1000 + s, ..Default::default() };
                smoothgrad(&m, "x", &x, 1, &cfg).unwrap().values
            })
            .collect();
        (0..64)
            .map(|i| {
                let mean = maps.iter().map(|m| m[i]).sum::<f64>() / 12.0;
                maps.iter().map(|m| (m[i] - mean).powi(2)).sum::<f64>() / 12.0
            })
            .sum::<f64>()
    };
    assert!(spread(32) < spread(1));
}

#[test]
fn masks_are_monotone_in_threshold() {
    let m = small_model(4);
    for seed in 0..10 {
        let x = uniform(&[3, 8, 8], 0.0, 1.0, &mut rng(seed));
        let map = smoothgrad(&m, "x", &x, 0, &SmoothGradConfig { samples: 4, seed, ..Default::default() }).unwrap();
        let masks: Vec<Vec<bool>> = [0.0, 0.15, 0.5, 1.0].iter().map(|&t| binary_mask(&map, t).unwrap()).collect();
        for w in masks.windows(2) {
            assert!(w[1].iter().zip(&w[0]).all(|(hi, lo)| !hi || *lo));
        }
        assert!(masks[0].iter().all(|&b| b));
        let frac = masks[1].iter().filter(|&&b| b).count();
        assert!(frac > 0 && frac < 64);
    }
}
