//! 2n-class training with structure-disrupted counterparts.
//!
//! A base dataset of `n` classes is expanded with disrupted images of each
//! class as `n` extra classes (class `i` gets counterpart `i + n`). A small
//! convolutional classifier is trained on all `2n` labels with softmax
//! cross-entropy. For n-way classification the two logits of a class pair
//! are summed back together ([`remap_logits`]); for the oddity metric the
//! penultimate features are used directly.

use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, PoolKind, Var};
use crate::dataset;
use crate::dist::{Embedding, EmbeddingProvider};
use crate::error::{Error, Result};
use crate::feature_net::FeatureNet;
use crate::synth::{synthesize, SynthesisConfig};
use crate::feature_net::{conv_shapes, layer_shapes, run_layers, LayerSpec, IMAGE_CHANNELS};
use crate::optim::SgdMomentum;
use crate::seed;
use crate::tensor::Tensor;
use crate::weights;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledItem {
    pub id: String,
    pub image: Tensor,
    pub label: usize,
    /// Base class the image derives from; equals `label` for originals.
    pub source_class: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    /// Number of base classes.
    pub n: usize,
    /// Whether labels `n..2n` (disrupted counterparts) are in use.
    pub expanded: bool,
    pub items: Vec<LabeledItem>,
}

impl LabeledDataset {
    pub fn new(n: usize, items: Vec<LabeledItem>) -> Result<Self> {
        let d = Self { n, expanded: false, items };
        d.validate()?;
        Ok(d)
    }

    /// Number of distinct labels the classifier head must cover.
    pub fn label_count(&self) -> usize {
        if self.expanded {
            2 * self.n
        } else {
            self.n
        }
    }

    pub fn validate(&self) -> Result<()> {
        for it in &self.items {
            if it.label >= self.label_count() || it.source_class >= self.n {
                return Err(Error::Config(format!(
                    "item {} has label {} / source class {} outside {} classes",
                    it.id,
                    it.label,
                    it.source_class,
                    self.label_count()
                )));
            }
            if it.label % self.n != it.source_class {
                return Err(Error::Config(format!(
                    "item {}: label {} does not derive from class {}",
                    it.id, it.label, it.source_class
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Adds `disrupted[i]` as class `i + n`. Every class needs at least one disrupted image.
pub fn expand_labels(base: &LabeledDataset, disrupted: Vec<Vec<(String, Tensor)>>) -> Result<LabeledDataset> {
    if base.expanded {
        return Err(Error::Config("dataset is already expanded".into()));
    }
    if disrupted.len() != base.n {
        return Err(Error::Config(format!(
            "disrupted images given for {} classes, dataset has {}",
            disrupted.len(),
            base.n
        )));
    }
    if let Some(c) = disrupted.iter().position(Vec::is_empty) {
        return Err(Error::Config(format!("class {c} has no disrupted images")));
    }
    let mut items = base.items.clone();
    for (class, imgs) in disrupted.into_iter().enumerate() {
        items.extend(imgs.into_iter().map(|(id, image)| LabeledItem {
            id,
            image,
            label: class + base.n,
            source_class: class,
        }));
    }
    let out = LabeledDataset { n: base.n, expanded: true, items };
    out.validate()?;
    Ok(out)
}

/// Reads originals from `dir/<class>/*`, one class per subdirectory in sorted
/// order. Returns the class names alongside the dataset.
pub fn load_class_folders(dir: &Path, resize: Option<(u32, u32)>) -> Result<(Vec<String>, LabeledDataset)> {
    let mut classes: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    classes.sort();
    if classes.is_empty() {
        return Err(Error::Config(format!("{} has no class subdirectories", dir.display())));
    }
    let mut names = Vec::with_capacity(classes.len());
    let mut items = Vec::new();
    for (label, class_dir) in classes.iter().enumerate() {
        let name = class_dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let files = dataset::list_sources(class_dir)?;
        if files.is_empty() {
            return Err(Error::Config(format!("class {name} has no images")));
        }
        for f in files {
            let stem = f.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            items.push(LabeledItem {
                id: format!("{name}/{stem}"),
                image: dataset::load_source(&f, resize)?,
                label,
                source_class: label,
            });
        }
        names.push(name);
    }
    Ok((names, LabeledDataset::new(classes.len(), items)?))
}

/// One disrupted counterpart per item of `base`, grouped by class as
/// [`expand_labels`] expects. Item `k` is synthesized with seed
/// `derive(base_seed, [k])`, so the result does not depend on `jobs`.
pub fn disrupt_items(
    base: &LabeledDataset,
    net: &FeatureNet,
    synthesis: &SynthesisConfig,
    base_seed: u64,
    jobs: usize,
) -> Result<Vec<Vec<(String, Tensor)>>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let images: Vec<Tensor> = pool.install(|| {
        base.items
            .par_iter()
            .enumerate()
            .map(|(k, it)| {
                let cfg = synthesis.with_seed(seed::derive(base_seed, &[k as u64]));
                synthesize(&it.image, net, &cfg).map(|r| r.image)
            })
            .collect::<Result<_>>()
    })?;
    let mut out = vec![Vec::new(); base.n];
    for (it, img) in base.items.iter().zip(images) {
        out[it.source_class].push((format!("{}~disrupted", it.id), img));
    }
    Ok(out)
}

/// `z'_i = z_i + z_{i+n}`.
pub fn remap_logits(z: &[f64]) -> Result<Vec<f64>> {
    if !z.len().is_multiple_of(2) {
        return Err(Error::Contract(format!("cannot pair {} logits", z.len())));
    }
    let n = z.len() / 2;
    Ok((0..n).map(|i| z[i] + z[i + n]).collect())
}

/// How the last conv map becomes a vector.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    #[default]
    Flatten,
    /// Per-channel spatial mean.
    GlobalMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub layers: Vec<LayerSpec>,
    #[serde(default)]
    pub pool: PoolKind,
    /// Input extents `(height, width)`.
    pub input: (usize, usize),
    #[serde(default)]
    pub readout: Readout,
    /// Width of the feature layer between the conv stack and the head.
    pub hidden: Option<usize>,
    /// Head width: `n` for a baseline, `2n` for the expanded scheme.
    pub outputs: usize,
    pub seed: u64,
}

impl ClassifierConfig {
    /// conv(8)-relu-pool-conv(16)-relu-pool, a 32-unit feature layer, and `outputs` logits.
    pub fn small(input: (usize, usize), outputs: usize, seed: u64) -> Self {
        Self {
            layers: vec![
                LayerSpec::conv(8, 3, 1, 1),
                LayerSpec::Relu,
                LayerSpec::Pool,
                LayerSpec::conv(16, 3, 1, 1),
                LayerSpec::Relu,
                LayerSpec::Pool,
            ],
            pool: PoolKind::Avg,
            readout: Readout::Flatten,
            input,
            hidden: Some(32),
            outputs,
            seed,
        }
    }

    fn flat_dim(&self) -> Result<usize> {
        let shapes = layer_shapes(&self.layers, (IMAGE_CHANNELS, self.input.0, self.input.1))?;
        let (c, h, w) = shapes.last().copied().unwrap_or((IMAGE_CHANNELS, self.input.0, self.input.1));
        Ok(match self.readout {
            Readout::Flatten => c * h * w,
            Readout::GlobalMean => c,
        })
    }

    /// Shapes of every trainable tensor, in storage order.
    pub fn param_shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.outputs == 0 {
            return Err(Error::Config("classifier needs at least one output".into()));
        }
        let mut shapes: Vec<Vec<usize>> = conv_shapes(&self.layers, IMAGE_CHANNELS).iter().map(|s| s.to_vec()).collect();
        let mut d = self.flat_dim()?;
        if let Some(h) = self.hidden {
            shapes.push(vec![h, d]);
            shapes.push(vec![h]);
            d = h;
        }
        shapes.push(vec![self.outputs, d]);
        shapes.push(vec![self.outputs]);
        Ok(shapes)
    }
}

/// Conv stack, optional feature layer, linear head.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyClassifier {
    config: ClassifierConfig,
    params: Vec<Tensor>,
}

/// Nodes of one forward pass.
pub struct ForwardVars {
    pub features: Var,
    pub logits: Var,
}

impl ToyClassifier {
    /// He-normal weights from the config seed, zero biases.
    pub fn new(config: ClassifierConfig) -> Result<Self> {
        let shapes = config.param_shapes()?;
        let mut rng = seed::rng(config.seed);
        let params = shapes
            .iter()
            .map(|s| {
                if s.len() == 1 {
                    Tensor::zeros(s)
                } else {
                    let fan_in: usize = s[1..].iter().product();
                    Tensor::randn(s, 0.0, (2.0 / fan_in as f64).sqrt(), &mut rng)
                }
            })
            .collect();
        Ok(Self { config, params })
    }

    pub fn from_params(config: ClassifierConfig, params: Vec<Tensor>) -> Result<Self> {
        let shapes = config.param_shapes()?;
        if shapes.len() != params.len() {
            return Err(Error::Config(format!("{} tensors for {} parameters", params.len(), shapes.len())));
        }
        let params = params
            .into_iter()
            .zip(&shapes)
            .enumerate()
            .map(|(i, (p, s))| {
                let padded: Vec<usize> = s.iter().copied().chain(std::iter::repeat(1)).take(4).collect();
                if p.shape() != s.as_slice() && p.shape() != padded.as_slice() {
                    return Err(Error::Config(format!("parameter {i}: shape {:?}, expected {s:?}", p.shape())));
                }
                p.reshape(s)
            })
            .collect::<Result<_>>()?;
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn head_width(&self) -> usize {
        self.config.outputs
    }

    /// Adds parameters to `g`, trainable or constant.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| if trainable { g.param(p.clone()) } else { g.input(p.clone()) })
            .collect()
    }

    pub fn forward(&self, g: &mut Graph, params: &[Var], image: Var) -> Result<ForwardVars> {
        let (c, h, w) = g.value(image).chw("classifier")?;
        if c != IMAGE_CHANNELS || (h, w) != self.config.input {
            return Err(Error::dim(
                "classifier",
                format!("expected [3, {}, {}], got [{c}, {h}, {w}]", self.config.input.0, self.config.input.1),
            ));
        }
        let n_conv = self.config.layers.iter().filter(|l| matches!(l, LayerSpec::Conv(_))).count();
        let outs = run_layers(g, &self.config.layers, &params[..n_conv], self.config.pool, image)?;
        let top = outs.last().copied().unwrap_or(image);
        let mut x = match self.config.readout {
            Readout::Flatten => g.flatten(top)?,
            Readout::GlobalMean => g.spatial_mean(top)?,
        };
        let mut rest = &params[n_conv..];
        if self.config.hidden.is_some() {
            x = g.linear(x, rest[0], rest[1])?;
            rest = &rest[2..];
        }
        let features = x;
        let hidden_act = if self.config.hidden.is_some() { g.relu(x)? } else { x };
        let logits = g.linear(hidden_act, rest[0], rest[1])?;
        Ok(ForwardVars { features, logits })
    }

    fn run(&self, image: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let x = g.input(image.clone());
        let f = self.forward(&mut g, &p, x)?;
        Ok((g.value(f.features).data().to_vec(), g.value(f.logits).data().to_vec()))
    }

    /// Penultimate features (pre-activation), the embedding used by the oddity metric.
    pub fn embed(&self, image: &Tensor) -> Result<Vec<f64>> {
        self.run(image).map(|r| r.0)
    }

    pub fn logits(&self, image: &Tensor) -> Result<Vec<f64>> {
        self.run(image).map(|r| r.1)
    }

    /// Predicted base class; with `remap`, paired logits are summed first.
    pub fn predict(&self, image: &Tensor, remap: bool) -> Result<usize> {
        let z = self.logits(image)?;
        let z = if remap { remap_logits(&z)? } else { z };
        Ok(argmax(&z))
    }

    /// Writes `path` (FNW1 records in parameter order) and the config as `path` with a `.json` extension.
    pub fn save(&self, path: &Path) -> Result<()> {
        let refs: Vec<&Tensor> = self.params.iter().collect();
        weights::write(path, &refs)?;
        let cfg_path = path.with_extension("json");
        std::fs::write(&cfg_path, serde_json::to_string_pretty(&self.config)?).map_err(|e| Error::io(&cfg_path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg_path = path.with_extension("json");
        let text = std::fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
        let config: ClassifierConfig = serde_json::from_str(&text)?;
        let params = weights::read(path)?;
        Self::from_params(config, params).map_err(|e| Error::WeightLoad {
            path: path.to_path_buf(),
            offset: 0,
            reason: e.to_string(),
        })
    }
}

fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = i;
        }
    }
    best
}

/// Embeds PNGs with a classifier's penultimate features.
pub struct ClassifierProvider<'a> {
    pub model: &'a ToyClassifier,
}

impl EmbeddingProvider for ClassifierProvider<'_> {
    fn embedding(&self, id: &str, path: &Path) -> Result<Embedding> {
        let img = crate::image_io::load_png(path)?;
        Embedding::new(id, self.model.embed(&img)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 0.05,
            momentum: 0.9,
            batch_size: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training loss of each epoch.
    pub loss_curve: Vec<f64>,
    pub final_loss: f64,
    /// Accuracy over the training labels after the last epoch.
    pub train_accuracy: f64,
}

/// Minibatch SGD with momentum on softmax cross-entropy.
///
/// Batches are drawn from a seeded shuffle, so a fixed seed reproduces
/// the run bit for bit.
pub fn train(model: &mut ToyClassifier, data: &LabeledDataset, cfg: &TrainConfig) -> Result<TrainReport> {
    data.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if let Some(it) = data.items.iter().find(|it| it.label >= model.head_width()) {
        return Err(Error::Config(format!(
            "label {} of {} exceeds head width {}",
            it.label,
            it.id,
            model.head_width()
        )));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }

    let refs: Vec<&Tensor> = model.params.iter().collect();
    let mut opt = SgdMomentum::new(&refs, cfg.lr, cfg.momentum);
    let mut rng = seed::rng(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut g = Graph::new();
            let pv = model.bind(&mut g, true);
            let mut total: Option<Var> = None;
            for &i in batch {
                let it = &data.items[i];
                let x = g.input(it.image.clone());
                let step = model
                    .forward(&mut g, &pv, x)
                    .and_then(|f| g.softmax_cross_entropy(f.logits, it.label));
                let l = match step {
                    Ok(l) => l,
                    Err(Error::NonFinite { .. }) => return Err(Error::Training { epoch, curve }),
                    Err(e) => return Err(e),
                };
                total = Some(match total {
                    None => l,
                    Some(acc) => g.add(acc, l)?,
                });
            }
            let total = total.expect("chunks are non-empty");
            let sum = g.value(total).item()?;
            if !sum.is_finite() {
                return Err(Error::Training { epoch, curve });
            }
            epoch_loss += sum;
            let mean = g.scale(total, 1.0 / batch.len() as f64)?;
            if g.backward(mean).is_err() {
                return Err(Error::Training { epoch, curve });
            }
            for (p, v) in model.params.iter_mut().zip(&pv) {
                p.set_grad(g.grad(*v).expect("parameters require grad").to_vec())?;
            }
            let mut muts: Vec<&mut Tensor> = model.params.iter_mut().collect();
            if opt.step(&mut muts).is_err() {
                return Err(Error::Training { epoch, curve });
            }
        }
        curve.push(epoch_loss / data.len() as f64);
    }

    let correct = data
        .items
        .iter()
        .map(|it| model.logits(&it.image).map(|z| argmax(&z) == it.label))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|&c| c)
        .count();
    Ok(TrainReport {
        final_loss: curve.last().copied().unwrap_or(f64::NAN),
        loss_curve: curve,
        train_accuracy: correct as f64 / data.len() as f64,
    })
}
