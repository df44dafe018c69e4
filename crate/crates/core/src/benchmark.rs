//! Desk-scale comparison of a 2n-class model with its n-class baseline.
//!
//! Both arms see the same originals, architecture, optimizer and seed; the
//! 2n-class arm additionally sees one disrupted counterpart per original.
//! Each trained model embeds held-out triplets (original plus two fully
//! synthesized variants) and is scored with the oddity metric.

use serde::{Deserialize, Serialize};

use crate::dist::{evaluate_embedded, EmbeddedTriplet, Embedding};
use crate::distinguish::{
    disrupt_items, expand_labels, train, ClassifierConfig, LabeledDataset, LabeledItem, ToyClassifier, TrainConfig,
};
use crate::error::{Error, Result};
use crate::feature_net::{FeatureNet, FeatureNetConfig, InputNorm, LayerSpec};
use crate::fixtures::{shape_texture_image, SHAPE_TEXTURE_CLASSES};
use crate::seed;
use crate::synth::{synthesize, SynthesisConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Square image side.
    pub size: usize,
    /// Net whose Gram statistics define the disrupted images.
    pub synthesis_net: FeatureNetConfig,
    /// Disrupted training images (the 10-step preset).
    pub train_synthesis: SynthesisConfig,
    /// Test variants (the 100-step preset).
    pub test_synthesis: SynthesisConfig,
    /// Classifier template; `outputs` and `seed` are set per arm.
    pub classifier: ClassifierConfig,
    pub train: TrainConfig,
    /// One training run per arm per seed.
    pub seeds: Vec<u64>,
    pub data_seed: u64,
    pub jobs: usize,
}

impl BenchmarkConfig {
    /// 4 classes × 200 training images at 64×64, 20 test triplets per class,
    /// three seeds.
    pub fn standard() -> Self {
        let size = 64;
        Self {
            classes: SHAPE_TEXTURE_CLASSES,
            train_per_class: 200,
            test_per_class: 20,
            size,
            synthesis_net: wide_synthesis_net(),
            train_synthesis: SynthesisConfig::approximate(0),
            test_synthesis: SynthesisConfig::complete(0),
            classifier: ClassifierConfig::small((size, size), SHAPE_TEXTURE_CLASSES, 0),
            train: TrainConfig {
                epochs: 8,
                lr: 0.002,
                ..TrainConfig::default()
            },
            seeds: vec![0, 1, 2],
            data_seed: 0,
            jobs: 1,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.classes > SHAPE_TEXTURE_CLASSES {
            return Err(Error::Config(format!(
                "benchmark supports 1..={SHAPE_TEXTURE_CLASSES} classes, got {}",
                self.classes
            )));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 || self.seeds.is_empty() {
            return Err(Error::Config("benchmark needs training images, test triplets and seeds".into()));
        }
        Ok(())
    }
}

/// 64-128-128 channels on standardized input. Narrower random nets leave
/// visible noise and color shifts in the synthesized images, which any
/// classifier separates from the originals regardless of structure.
pub fn wide_synthesis_net() -> FeatureNetConfig {
    let mut c = FeatureNetConfig::vgg_lite();
    c.input_norm = Some(InputNorm { mean: [0.5; 3], std: [0.25; 3] });
    c.layers = vec![
        LayerSpec::conv(64, 3, 1, 1),
        LayerSpec::Relu,
        LayerSpec::Pool,
        LayerSpec::conv(128, 3, 1, 1),
        LayerSpec::Relu,
        LayerSpec::Pool,
        LayerSpec::conv(128, 3, 1, 1),
        LayerSpec::Relu,
    ];
    c
}

/// Generated images shared by every seed.
#[derive(Debug, Clone)]
pub struct BenchmarkData {
    pub base: LabeledDataset,
    pub expanded: LabeledDataset,
    /// Held-out originals with their two variants.
    pub test: Vec<(usize, Tensor, [Tensor; 2])>,
}

pub fn build_data(cfg: &BenchmarkConfig) -> Result<BenchmarkData> {
    cfg.validate()?;
    let net = FeatureNet::build(cfg.synthesis_net.clone())?;
    let s = cfg.size;
    let image = |split: u64, class: usize, i: usize| {
        shape_texture_image(class, s, s, seed::derive(cfg.data_seed, &[split, class as u64, i as u64]))
    };

    let items = (0..cfg.classes)
        .flat_map(|c| (0..cfg.train_per_class).map(move |i| (c, i)))
        .map(|(c, i)| LabeledItem {
            id: format!("train/{c}/{i}"),
            image: image(0, c, i),
            label: c,
            source_class: c,
        })
        .collect();
    let base = LabeledDataset::new(cfg.classes, items)?;
    log::info!("synthesizing {} disrupted training images", base.len());
    let disrupted = disrupt_items(
        &base,
        &net,
        &cfg.train_synthesis,
        seed::derive(cfg.data_seed, &[2]),
        cfg.jobs,
    )?;
    let expanded = expand_labels(&base, disrupted)?;

    let mut test = Vec::with_capacity(cfg.classes * cfg.test_per_class);
    log::info!("synthesizing {} test variants", 2 * cfg.classes * cfg.test_per_class);
    for c in 0..cfg.classes {
        for i in 0..cfg.test_per_class {
            let original = image(1, c, i);
            let k = test.len() as u64;
            let variant = |v: u64| {
                let sc = cfg.test_synthesis.with_seed(seed::derive(cfg.data_seed, &[3, k, v]));
                synthesize(&original, &net, &sc).map(|r| r.image)
            };
            let variants = [variant(0)?, variant(1)?];
            test.push((c, original, variants));
        }
    }
    Ok(BenchmarkData { base, expanded, test })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmOutcome {
    /// Oddity-metric accuracy on the held-out triplets.
    pub dist_accuracy: f64,
    /// n-way accuracy on held-out originals (paired logits summed for the 2n-class arm).
    pub class_accuracy: f64,
    pub train_accuracy: f64,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub baseline: ArmOutcome,
    pub distinguish: ArmOutcome,
    /// `distinguish.dist_accuracy − baseline.dist_accuracy`.
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub seeds: Vec<SeedOutcome>,
    pub mean_gap: f64,
    pub test_triplets: usize,
    pub train_items: usize,
    pub expanded_items: usize,
}

fn run_arm(
    cfg: &BenchmarkConfig,
    data: &BenchmarkData,
    seed: u64,
    expanded: bool,
) -> Result<ArmOutcome> {
    let set = if expanded { &data.expanded } else { &data.base };
    let mut mc = cfg.classifier.clone();
    mc.outputs = set.label_count();
    mc.seed = seed;
    let mut model = ToyClassifier::new(mc)?;
    let tc = TrainConfig { seed, ..cfg.train.clone() };
    let report = train(&mut model, set, &tc)?;

    let mut triplets = Vec::with_capacity(data.test.len());
    let mut right = 0;
    for (k, (class, original, variants)) in data.test.iter().enumerate() {
        if model.predict(original, expanded)? == *class {
            right += 1;
        }
        let emb = |name: &str, t: &Tensor| -> Result<Embedding> { Embedding::new(format!("{k}/{name}"), model.embed(t)?) };
        triplets.push(EmbeddedTriplet {
            id: format!("test/{k}"),
            original: emb("original", original)?,
            variants: [emb("v0", &variants[0])?, emb("v1", &variants[1])?],
        });
    }
    let eval = evaluate_embedded(&triplets, seed::derive(cfg.data_seed, &[4]))?;
    Ok(ArmOutcome {
        dist_accuracy: eval.accuracy,
        class_accuracy: right as f64 / data.test.len() as f64,
        train_accuracy: report.train_accuracy,
        final_loss: report.final_loss,
    })
}

/// Trains both arms for every seed on prebuilt data.
pub fn run_on(cfg: &BenchmarkConfig, data: &BenchmarkData) -> Result<BenchmarkReport> {
    cfg.validate()?;
    let mut seeds = Vec::with_capacity(cfg.seeds.len());
    for &s in &cfg.seeds {
        let baseline = run_arm(cfg, data, s, false)?;
        let distinguish = run_arm(cfg, data, s, true)?;
        let gap = distinguish.dist_accuracy - baseline.dist_accuracy;
        log::info!(
            "seed {s}: baseline {:.3}, distinguish {:.3}",
            baseline.dist_accuracy,
            distinguish.dist_accuracy
        );
        seeds.push(SeedOutcome { seed: s, baseline, distinguish, gap });
    }
    let mean_gap = seeds.iter().map(|s| s.gap).sum::<f64>() / seeds.len() as f64;
    Ok(BenchmarkReport {
        seeds,
        mean_gap,
        test_triplets: data.test.len(),
        train_items: data.base.len(),
        expanded_items: data.expanded.len(),
    })
}

pub fn run_benchmark(cfg: &BenchmarkConfig) -> Result<BenchmarkReport> {
    run_on(cfg, &build_data(cfg)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_benchmark_runs_end_to_end() {
        let mut cfg = BenchmarkConfig::standard();
        cfg.classes = 2;
        cfg.train_per_class = 3;
        cfg.test_per_class = 2;
        cfg.size = 16;
        cfg.synthesis_net = FeatureNetConfig::vgg_lite();
        cfg.test_synthesis.steps = 3;
        cfg.train_synthesis.steps = 2;
        cfg.classifier = ClassifierConfig::small((16, 16), 2, 0);
        cfg.train.epochs = 2;
        cfg.seeds = vec![0, 1];
        let r = run_benchmark(&cfg).unwrap();
        assert_eq!(r.seeds.len(), 2);
        assert_eq!((r.train_items, r.expanded_items, r.test_triplets), (6, 12, 4));
        for s in &r.seeds {
            assert_eq!(s.gap, s.distinguish.dist_accuracy - s.baseline.dist_accuracy);
        }
        assert_eq!(r, run_benchmark(&cfg).unwrap());
    }

    #[test]
    fn rejects_unknown_class_count() {
        let mut cfg = BenchmarkConfig::standard();
        cfg.classes = SHAPE_TEXTURE_CLASSES + 1;
        assert!(matches!(build_data(&cfg), Err(Error::Config(_))));
    }
}
