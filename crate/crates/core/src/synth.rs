//! Gram-matching texture synthesis.
//!
//! Starting from Gaussian noise, the image is optimized with Adam so that
//! the Gram matrices of its tap activations match those of a target image.
//! Local statistics survive; the global arrangement does not.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::feature_net::FeatureNet;
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::seed;
use crate::tensor::Tensor;

/// Step-count presets.
pub const APPROXIMATE_STEPS: usize = 10;
pub const COMPLETE_STEPS: usize = 100;

/// Adam step size of the 10-step preset. The default 0.05 oscillates when
/// only ten updates are available.
pub const APPROXIMATE_LR: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisConfig {
    pub steps: usize,
    pub adam: AdamConfig,
    pub init_mean: f64,
    pub init_std: f64,
    /// One weight per tap; `None` weights every tap by 1.
    #[serde(default)]
    pub layer_weights: Option<Vec<f64>>,
    pub seed: u64,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            steps: COMPLETE_STEPS,
            adam: AdamConfig::default(),
            init_mean: 0.5,
            init_std: 0.1,
            layer_weights: None,
            seed: 0,
        }
    }
}

impl SynthesisConfig {
    pub fn complete(seed: u64) -> Self {
        Self { seed, ..Self::default() }
    }

    pub fn approximate(seed: u64) -> Self {
        Self {
            steps: APPROXIMATE_STEPS,
            adam: AdamConfig { lr: APPROXIMATE_LR, ..AdamConfig::default() },
            seed,
            ..Self::default()
        }
    }

    /// The preset for a given step count: 10 selects the approximate preset,
    /// anything else the complete one with `steps` overridden.
    pub fn preset(steps: usize, seed: u64) -> Self {
        if steps == APPROXIMATE_STEPS {
            Self::approximate(seed)
        } else {
            Self { steps, ..Self::complete(seed) }
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    /// Layer weights resolved against a net with `taps` tap layers.
    pub fn resolved_weights(&self, taps: usize) -> Result<Vec<f64>> {
        match &self.layer_weights {
            None => Ok(vec![1.0; taps]),
            Some(w) if w.len() != taps => Err(Error::Config(format!(
                "{} layer weights for {taps} taps",
                w.len()
            ))),
            Some(w) if w.iter().any(|&v| !(v >= 0.0 && v.is_finite())) => {
                Err(Error::Config("layer weights must be finite and non-negative".into()))
            }
            Some(w) => Ok(w.clone()),
        }
    }

    pub fn validate(&self, taps: usize) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("synthesis needs at least one step".into()));
        }
        if !(self.init_std >= 0.0 && self.init_std.is_finite() && self.init_mean.is_finite()) {
            return Err(Error::Config("init_std must be finite and >= 0".into()));
        }
        if !(self.adam.lr >= 0.0 && self.adam.lr.is_finite()) {
            return Err(Error::Config("learning rate must be finite and >= 0".into()));
        }
        self.resolved_weights(taps).map(|_| ())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisResult {
    /// The optimized image clamped to `[0, 1]`.
    pub image: Tensor,
    /// Loss at each iterate before its update; `loss_trace[0]` is the loss of the initialization.
    pub loss_trace: Vec<f64>,
    /// Loss of the emitted (clamped) image.
    pub final_loss: f64,
    pub seed: u64,
    pub config: SynthesisConfig,
}

impl SynthesisResult {
    pub fn initial_loss(&self) -> f64 {
        self.loss_trace[0]
    }
}

/// `Σ_l w_l ‖target_l − Gram(A_l)‖²_F`.
pub fn gram_loss(g: &mut Graph, target_grams: &[Tensor], acts: &[Var], weights: &[f64]) -> Result<Var> {
    if target_grams.len() != acts.len() || weights.len() != acts.len() {
        return Err(Error::dim(
            "gram_loss",
            format!(
                "{} targets, {} activations, {} weights",
                target_grams.len(),
                acts.len(),
                weights.len()
            ),
        ));
    }
    let mut total: Option<Var> = None;
    for ((t, &a), &w) in target_grams.iter().zip(acts).zip(weights) {
        let gm = g.gram(a)?;
        let d = g.squared_error(gm, t)?;
        let term = g.scale(d, w)?;
        total = Some(match total {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    total.ok_or_else(|| Error::dim("gram_loss", "no layers"))
}

/// Gram matrices of every tap of `net` for `image`.
pub fn target_grams(net: &FeatureNet, image: &Tensor) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let x = g.input(image.clone());
    let taps = net.forward_taps(&mut g, x)?;
    taps.into_iter()
        .map(|a| {
            let gm = g.gram(a)?;
            Ok(g.value(gm).detached())
        })
        .collect()
}

/// Gram loss of `image` against precomputed targets, without gradients.
pub fn evaluate_loss(net: &FeatureNet, targets: &[Tensor], weights: &[f64], image: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.input(image.clone());
    let taps = net.forward_taps(&mut g, x)?;
    let l = gram_loss(&mut g, targets, &taps, weights)?;
    g.value(l).item()
}

fn check_target(target: &Tensor, net: &FeatureNet) -> Result<()> {
    let (c, h, w) = target.chw("synthesize")?;
    if c != 3 {
        return Err(Error::dim("synthesize", format!("target has {c} channels")));
    }
    if target.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Contract("synthesis target must lie in [0, 1]".into()));
    }
    net.config().layer_shapes(h, w)?;
    Ok(())
}

pub fn synthesize(target: &Tensor, net: &FeatureNet, cfg: &SynthesisConfig) -> Result<SynthesisResult> {
    synthesize_with_progress(target, net, cfg, |_, _| {})
}

/// Like [`synthesize`], reporting `(step, loss)` after each loss evaluation.
pub fn synthesize_with_progress(
    target: &Tensor,
    net: &FeatureNet,
    cfg: &SynthesisConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<SynthesisResult> {
    check_target(target, net)?;
    cfg.validate(net.tap_count())?;
    let weights = cfg.resolved_weights(net.tap_count())?;
    let targets = target_grams(net, target)?;

    let mut rng = seed::rng(cfg.seed);
    let mut image = Tensor::randn(target.shape(), cfg.init_mean, cfg.init_std, &mut rng);
    let mut state = AdamState::new(&[&image]);
    let mut trace = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let diverged = |trace: &Vec<f64>| Error::Synthesis { step, trace: trace.clone() };
        let mut g = Graph::new();
        let x = g.param(image.detached());
        let loss = net
            .forward_taps(&mut g, x)
            .and_then(|taps| gram_loss(&mut g, &targets, &taps, &weights));
        let loss = match loss {
            Ok(l) => l,
            Err(Error::NonFinite { .. }) => return Err(diverged(&trace)),
            Err(e) => return Err(e),
        };
        let value = g.value(loss).item()?;
        trace.push(value);
        progress(step, value);
        if g.backward(loss).is_err() {
            return Err(diverged(&trace));
        }
        let grad = g.grad(x).expect("image is a parameter").to_vec();
        image.set_grad(grad)?;
        if adam_step(&mut [&mut image], &mut state, &cfg.adam).is_err() {
            return Err(diverged(&trace));
        }
    }

    let image = image.clamp(0.0, 1.0);
    let final_loss = evaluate_loss(net, &targets, &weights, &image)?;
    Ok(SynthesisResult {
        image,
        loss_trace: trace,
        final_loss,
        seed: cfg.seed,
        config: cfg.clone(),
    })
}

/// Pearson correlation of the two images' pixel vectors.
pub fn structure_divergence(original: &Tensor, variant: &Tensor) -> Result<f64> {
    if original.shape() != variant.shape() {
        return Err(Error::dim(
            "structure_divergence",
            format!("{:?} vs {:?}", original.shape(), variant.shape()),
        ));
    }
    let n = original.numel() as f64;
    let ma = original.data().iter().sum::<f64>() / n;
    let mb = variant.data().iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (a, b) in original.data().iter().zip(variant.data()) {
        let (da, db) = (a - ma, b - mb);
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Metric("correlation with a zero-variance image".into()));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    fn small_cfg(steps: usize, seed: u64) -> SynthesisConfig {
        SynthesisConfig { steps, seed, ..Default::default() }
    }

    #[test]
    fn gram_loss_of_single_entry() {
        let mut g = Graph::new();
        let a = g.input(Tensor::new(&[1, 1, 1], vec![1.0]).unwrap());
        let target = Tensor::new(&[1, 1], vec![4.0]).unwrap();
        let l = gram_loss(&mut g, &[target], &[a], &[1.0]).unwrap();
        assert_eq!(g.value(l).item().unwrap(), 9.0);
    }

    #[test]
    fn gram_loss_is_zero_at_target() {
        let net = FeatureNet::vgg_lite();
        let img = fixtures::periodic_texture(16, 16, 3);
        let targets = target_grams(&net, &img).unwrap();
        assert_eq!(evaluate_loss(&net, &targets, &[1.0; 3], &img).unwrap(), 0.0);
    }

    #[test]
    fn gram_loss_rejects_misaligned_lists() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(&[1, 2, 2]));
        let err = gram_loss(&mut g, &[], &[a], &[1.0]).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn zero_lr_returns_clamped_initialization() {
        let net = FeatureNet::vgg_lite();
        let target = fixtures::periodic_texture(16, 16, 1);
        let mut cfg = small_cfg(3, 9);
        cfg.adam.lr = 0.0;
        cfg.init_std = 0.6;
        let res = synthesize(&target, &net, &cfg).unwrap();
        let init = Tensor::randn(&[3, 16, 16], 0.5, 0.6, &mut seed::rng(9)).clamp(0.0, 1.0);
        assert_eq!(res.image, init);
        assert_eq!(res.loss_trace.len(), 3);
    }

    #[test]
    fn synthesis_is_deterministic_and_clamped() {
        let net = FeatureNet::vgg_lite();
        let target = fixtures::periodic_texture(16, 16, 2);
        let a = synthesize(&target, &net, &small_cfg(5, 4)).unwrap();
        let b = synthesize(&target, &net, &small_cfg(5, 4)).unwrap();
        assert_eq!(a, b);
        assert!(a.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let c = synthesize(&target, &net, &small_cfg(5, 5)).unwrap();
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn divergent_optimization_reports_step() {
        let net = FeatureNet::vgg_lite();
        let target = fixtures::periodic_texture(8, 8, 2);
        let mut cfg = small_cfg(4, 1);
        cfg.adam.lr = 1e300;
        match synthesize(&target, &net, &cfg) {
            Err(Error::Synthesis { step, trace }) => assert_eq!(trace.len(), step),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn correlation_edge_cases() {
        let a = fixtures::periodic_texture(8, 8, 0);
        assert!((structure_divergence(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let mean = a.data().iter().sum::<f64>() / a.numel() as f64;
        let neg = a.map(|v| mean - v).unwrap();
        assert!((structure_divergence(&a, &neg).unwrap() + 1.0).abs() < 1e-12);
        let flat = Tensor::filled(&[3, 8, 8], 0.5);
        assert!(matches!(structure_divergence(&a, &flat), Err(Error::Metric(_))));
    }

    #[test]
    fn config_validation() {
        let net = FeatureNet::vgg_lite();
        let target = fixtures::periodic_texture(8, 8, 0);
        let mut cfg = small_cfg(0, 0);
        assert!(synthesize(&target, &net, &cfg).is_err());
        cfg.steps = 1;
        cfg.layer_weights = Some(vec![1.0]);
        assert!(matches!(synthesize(&target, &net, &cfg), Err(Error::Config(_))));
        let bright = Tensor::filled(&[3, 8, 8], 1.5);
        assert!(synthesize(&bright, &net, &small_cfg(1, 0)).is_err());
    }
}
