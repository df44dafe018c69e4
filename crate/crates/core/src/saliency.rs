//! SmoothGrad sensitivity maps for [`ToyClassifier`]s.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::distinguish::ToyClassifier;
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

pub const DEFAULT_SAMPLES: usize = 32;
pub const DEFAULT_NOISE_STD: f64 = 0.1;
pub const DEFAULT_MASK_THRESHOLD: f64 = 0.15;

/// What is differentiated with respect to the image.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    #[default]
    Logit,
    Probability,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityMap {
    pub values: Vec<f64>,
    pub height: usize,
    pub width: usize,
    pub image_id: String,
    pub class: usize,
    pub n_samples: usize,
    pub noise_std: f64,
    pub seed: u64,
    pub target: Target,
    /// Set when the raw map had no spread and was rescaled to zeros.
    pub constant: bool,
}

/// `|∂F_c/∂I|` reduced over channels by max, as an `H·W` row-major plane.
pub fn class_gradient(model: &ToyClassifier, image: &Tensor, class: usize, target: Target) -> Result<Vec<f64>> {
    if class >= model.head_width() {
        return Err(Error::Index {
            what: "class",
            index: class,
            len: model.head_width(),
        });
    }
    let (c, h, w) = image.chw("class_gradient")?;
    let mut g = Graph::new();
    let p = model.bind(&mut g, false);
    let x = g.param(image.clone());
    let f = model.forward(&mut g, &p, x)?;
    let out = match target {
        Target::Logit => f.logits,
        Target::Probability => g.softmax(f.logits)?,
    };
    let fc = g.select(out, class)?;
    g.backward(fc)?;
    let grad = g.grad(x).expect("image requires grad");
    let plane = h * w;
    Ok((0..plane)
        .map(|i| (0..c).map(|ch| grad[ch * plane + i].abs()).fold(0.0, f64::max))
        .collect())
}

/// Sums equal-length vectors by recursive halving, so the result does not
/// depend on how the samples were produced.
fn pairwise_sum(maps: &[Vec<f64>]) -> Vec<f64> {
    match maps {
        [] => Vec::new(),
        [one] => one.clone(),
        _ => {
            let (a, b) = maps.split_at(maps.len() / 2);
            let (a, b) = (pairwise_sum(a), pairwise_sum(b));
            a.iter().zip(&b).map(|(x, y)| x + y).collect()
        }
    }
}

/// `(v − min)/(max − min)`; a constant map becomes zeros and reports `true`.
pub fn rescale(values: &[f64]) -> (Vec<f64>, bool) {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if values.is_empty() || hi <= lo {
        return (vec![0.0; values.len()], true);
    }
    (values.iter().map(|v| (v - lo) / (hi - lo)).collect(), false)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothGradConfig {
    pub samples: usize,
    pub noise_std: f64,
    pub seed: u64,
    #[serde(default)]
    pub target: Target,
}

impl Default for SmoothGradConfig {
    fn default() -> Self {
        Self {
            samples: DEFAULT_SAMPLES,
            noise_std: DEFAULT_NOISE_STD,
            seed: 0,
            target: Target::Logit,
        }
    }
}

/// Mean of `class_gradient` over noisy copies of the image, rescaled to `[0, 1]`.
pub fn smoothgrad(
    model: &ToyClassifier,
    image_id: &str,
    image: &Tensor,
    class: usize,
    cfg: &SmoothGradConfig,
) -> Result<SensitivityMap> {
    if cfg.samples == 0 {
        return Err(Error::Config("smoothgrad needs at least one sample".into()));
    }
    if !(cfg.noise_std >= 0.0 && cfg.noise_std.is_finite()) {
        return Err(Error::Config(format!("noise std {} is invalid", cfg.noise_std)));
    }
    let (_, h, w) = image.chw("smoothgrad")?;
    let normal = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let mean = if cfg.noise_std == 0.0 {
        // Every sample is the clean image.
        class_gradient(model, image, class, cfg.target)?
    } else {
        let mut rng = seed::rng(cfg.seed);
        let mut maps = Vec::with_capacity(cfg.samples);
        for _ in 0..cfg.samples {
            let mut t = image.detached();
            t.data_mut().iter_mut().for_each(|v| *v += normal.sample(&mut rng));
            maps.push(class_gradient(model, &t, class, cfg.target)?);
        }
        let n = maps.len() as f64;
        pairwise_sum(&maps).into_iter().map(|v| v / n).collect()
    };
    let (values, constant) = rescale(&mean);
    Ok(SensitivityMap {
        values,
        height: h,
        width: w,
        image_id: image_id.to_string(),
        class,
        n_samples: cfg.samples,
        noise_std: cfg.noise_std,
        seed: cfg.seed,
        target: cfg.target,
        constant,
    })
}

/// Pixels whose rescaled sensitivity is at least `threshold`.
pub fn binary_mask(map: &SensitivityMap, threshold: f64) -> Result<Vec<bool>> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Contract(format!("mask threshold {threshold} is outside [0, 1]")));
    }
    Ok(map.values.iter().map(|&v| v >= threshold).collect())
}
