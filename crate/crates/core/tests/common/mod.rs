//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use dist_core::{Graph, Tensor, Var};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;

pub type TestRng = rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> TestRng {
    TestRng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut TestRng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Direct six-nested-loop cross-correlation with zero padding.
pub fn naive_conv(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; co * ho * wo];
    for o in 0..co {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0;
                for c in 0..ci {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            let xv = x.data()[(c * h + iy as usize) * wd + ix as usize];
                            let wv = w.data()[((o * ci + c) * k + ky) * k + kx];
                            acc += xv * wv;
                        }
                    }
                }
                out[(o * ho + oy) * wo + ox] = acc;
            }
        }
    }
    Tensor::new(&[co, ho, wo], out).unwrap()
}

pub fn naive_relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 }).unwrap()
}

pub fn naive_avg_pool(x: &Tensor) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let at = |ch: usize, y: usize, xx: usize| x.data()[(ch * h + y) * w + xx];
    let mut out = Vec::new();
    for ch in 0..c {
        for y in 0..h / 2 {
            for xx in 0..w / 2 {
                out.push(
                    (at(ch, 2 * y, 2 * xx)
                        + at(ch, 2 * y, 2 * xx + 1)
                        + at(ch, 2 * y + 1, 2 * xx)
                        + at(ch, 2 * y + 1, 2 * xx + 1))
                        / 4.0,
                );
            }
        }
    }
    Tensor::new(&[c, h / 2, w / 2], out).unwrap()
}

/// Triple-loop Gram matrix normalized by H·W.
pub fn naive_gram(a: &Tensor) -> Tensor {
    let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let mut g = vec![0.0; c * c];
    for i in 0..c {
        for j in 0..c {
            let mut s = 0.0;
            for p in 0..h * w {
                s += a.data()[i * h * w + p] * a.data()[j * h * w + p];
            }
            g[i * c + j] = s / (h * w) as f64;
        }
    }
    Tensor::new(&[c, c], g).unwrap()
}

#[allow(clippy::needless_range_loop)]
pub fn naive_linear(x: &[f64], w: &Tensor, b: &[f64]) -> Vec<f64> {
    let d = x.len();
    (0..b.len())
        .map(|m| {
            let mut s = b[m];
            for i in 0..d {
                s += w.data()[m * d + i] * x[i];
            }
            s
        })
        .collect()
}

/// Central finite-difference gradient of a scalar function.
pub fn fd_grad(x: &Tensor, eps: f64, mut f: impl FnMut(&Tensor) -> f64) -> Vec<f64> {
    let mut probe = x.clone();
    (0..x.numel())
        .map(|i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + eps;
            let up = f(&probe);
            probe.data_mut()[i] = orig - eps;
            let down = f(&probe);
            probe.data_mut()[i] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// Elementwise relative error with a 1e-3 floor on the denominator,
/// maximized over the tensor.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-3))
        .fold(0.0, f64::max)
}

/// Analytic gradient of `build(g, x)` w.r.t. `x`, for a graph that returns a scalar.
pub fn analytic_grad(x: &Tensor, build: &dyn Fn(&mut Graph, Var) -> Var) -> Vec<f64> {
    let mut g = Graph::new();
    let v = g.param(x.clone());
    let l = build(&mut g, v);
    g.backward(l).unwrap();
    g.grad(v).unwrap().to_vec()
}

pub fn scalar_of(x: &Tensor, build: &dyn Fn(&mut Graph, Var) -> Var) -> f64 {
    let mut g = Graph::new();
    let v = g.input(x.clone());
    let l = build(&mut g, v);
    g.value(l).item().unwrap()
}

/// Checks d/dx of `build` against central differences (ε = 1e-6).
pub fn gradcheck(x: &Tensor, build: &dyn Fn(&mut Graph, Var) -> Var) -> f64 {
    let a = analytic_grad(x, build);
    let n = fd_grad(x, 1e-6, |p| scalar_of(p, build));
    max_rel_err(&a, &n)
}

/// Oddity scores by building the full pairwise distance matrix; returns the
/// scores and the first index of the maximum.
pub fn brute_force_oddity(e: [&[f64]; 3]) -> ([f64; 3], usize) {
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let mut d = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            if i != j {
                let dot: f64 = e[i].iter().zip(e[j]).map(|(a, b)| a * b).sum();
                d[i][j] = (1.0 - dot / (norm(e[i]) * norm(e[j]))).clamp(0.0, 2.0);
            }
        }
    }
    let mut s = [0.0; 3];
    for i in 0..3 {
        let others: Vec<f64> = (0..3).filter(|&j| j != i).map(|j| d[i][j]).collect();
        s[i] = (others[0] + others[1]) / 2.0;
    }
    let mut best = 0;
    for i in 0..3 {
        if s[i] > s[best] {
            best = i;
        }
    }
    (s, best)
}

/// Smallest count interval `[lo, hi]` holding at least `mass` of Binomial(n, p),
/// with at most `(1 − mass)/2` cut from each tail.
pub fn binomial_central_interval(n: usize, p: f64, mass: f64) -> (usize, usize) {
    let mut pmf = vec![0.0; n + 1];
    pmf[0] = (1.0 - p).powi(n as i32);
    for k in 1..=n {
        pmf[k] = pmf[k - 1] * (n - k + 1) as f64 / k as f64 * p / (1.0 - p);
    }
    let tail = (1.0 - mass) / 2.0;
    let (mut lo, mut acc) = (0, 0.0);
    while acc + pmf[lo] <= tail {
        acc += pmf[lo];
        lo += 1;
    }
    let (mut hi, mut acc) = (n, 0.0);
    while acc + pmf[hi] <= tail {
        acc += pmf[hi];
        hi -= 1;
    }
    (lo, hi)
}

/// FNV-1a, for seeding per-id test embeddings.
pub fn fnv(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

/// An embedding drawn from N(0, 1)^dim, fixed per image id.
pub fn random_embedding(id: &str, dim: usize, seed: u64) -> dist_core::dist::Embedding {
    use rand_distr::{Distribution, StandardNormal};
    let mut r = rng(fnv(id) ^ seed);
    let v = (0..dim).map(|_| StandardNormal.sample(&mut r)).collect();
    dist_core::dist::Embedding::new(id, v).unwrap()
}

/// Manifest records pointing at files that need not exist.
pub fn stub_manifest(n: usize, catches: usize) -> dist_core::dataset::DatasetManifest {
    use dist_core::dataset::{CatchRecord, DatasetManifest, TripletRecord};
    let mut m = DatasetManifest::new(dist_core::FeatureNetConfig::vgg_lite(), dist_core::SynthesisConfig::default());
    m.records = (0..n)
        .map(|i| TripletRecord {
            id: format!("t{i:05}"),
            original_path: format!("images/t{i:05}_original.png"),
            variant_paths: [format!("images/t{i:05}_v0.png"), format!("images/t{i:05}_v1.png")],
            seeds: [2 * i as u64, 2 * i as u64 + 1],
            synthesis_config_hash: String::new(),
            height: 8,
            width: 8,
            class_label: None,
        })
        .collect();
    m.catch = (0..catches)
        .map(|i| CatchRecord {
            id: format!("c{i:05}"),
            original_path: format!("catch/c{i:05}_original.png"),
            mirrored_path: format!("catch/c{i:05}_mirrored.png"),
            disrupted_path: format!("catch/c{i:05}_disrupted.png"),
            seed: i as u64,
        })
        .collect();
    m
}
