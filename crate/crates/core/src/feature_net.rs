//! Fixed convolutional feature extractors with designated tap layers.
//!
//! A [`FeatureNet`] is a stack of conv / relu / pool layers. The outputs of
//! the layers listed in `taps` are the activations whose Gram statistics
//! drive texture synthesis. The weights are drawn once from a seeded
//! Gaussian (or loaded from an `FNW1` file) and never trained.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, PoolKind, Var};
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;
use crate::weights;

/// Number of channels in every input image.
pub const IMAGE_CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSpec {
    Conv(ConvSpec),
    Relu,
    Pool,
}

impl LayerSpec {
    pub fn conv(out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        LayerSpec::Conv(ConvSpec { out_channels, kernel, stride, padding })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    Gaussian { std: f64, seed: u64 },
    File { path: PathBuf },
}

/// Per-channel `(x - mean) / std` applied to the image before the first layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputNorm {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureNetConfig {
    pub layers: Vec<LayerSpec>,
    pub taps: Vec<usize>,
    pub init: Init,
    #[serde(default)]
    pub pool: PoolKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_norm: Option<InputNorm>,
}

impl FeatureNetConfig {
    /// Three conv/relu stages with 2×2 pooling between them, tapped after
    /// every relu. Gaussian weights, std 0.1, seed 17.
    pub fn vgg_lite() -> Self {
        Self {
            layers: vec![
                LayerSpec::conv(16, 3, 1, 1),
                LayerSpec::Relu,
                LayerSpec::Pool,
                LayerSpec::conv(32, 3, 1, 1),
                LayerSpec::Relu,
                LayerSpec::Pool,
                LayerSpec::conv(64, 3, 1, 1),
                LayerSpec::Relu,
            ],
            taps: vec![1, 4, 7],
            init: Init::Gaussian { std: 0.1, seed: 17 },
            pool: PoolKind::Avg,
            input_norm: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.taps.is_empty() {
            return Err(Error::Config("feature net needs at least one tap".into()));
        }
        if self.taps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("taps {:?} must be strictly increasing", self.taps)));
        }
        if let Some(&last) = self.taps.last() {
            if last >= self.layers.len() {
                return Err(Error::Config(format!(
                    "tap {last} out of range for {} layers",
                    self.layers.len()
                )));
            }
        }
        for (i, l) in self.layers.iter().enumerate() {
            if let LayerSpec::Conv(c) = l {
                if c.out_channels == 0 || c.kernel == 0 || c.stride == 0 {
                    return Err(Error::Config(format!("layer {i}: degenerate conv {c:?}")));
                }
            }
        }
        if let Some(n) = &self.input_norm {
            if n.std.iter().any(|&s| s <= 0.0 || !s.is_finite()) {
                return Err(Error::Config("input_norm std must be positive".into()));
            }
        }
        if let Init::Gaussian { std, .. } = self.init {
            if !(std >= 0.0 && std.is_finite()) {
                return Err(Error::Config(format!("init std {std} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    /// `[C_out, C_in, k, k]` for every conv layer, in order.
    pub fn conv_shapes(&self) -> Vec<[usize; 4]> {
        conv_shapes(&self.layers, IMAGE_CHANNELS)
    }

    /// Output extents `(C, H, W)` of every layer for an `h × w` image.
    pub fn layer_shapes(&self, h: usize, w: usize) -> Result<Vec<(usize, usize, usize)>> {
        layer_shapes(&self.layers, (IMAGE_CHANNELS, h, w))
    }

    pub fn tap_shapes(&self, h: usize, w: usize) -> Result<Vec<(usize, usize, usize)>> {
        let all = self.layer_shapes(h, w)?;
        Ok(self.taps.iter().map(|&t| all[t]).collect())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

pub(crate) fn conv_shapes(layers: &[LayerSpec], in_channels: usize) -> Vec<[usize; 4]> {
    let mut c = in_channels;
    let mut out = Vec::new();
    for l in layers {
        if let LayerSpec::Conv(s) = l {
            out.push([s.out_channels, c, s.kernel, s.kernel]);
            c = s.out_channels;
        }
    }
    out
}

pub(crate) fn layer_shapes(
    layers: &[LayerSpec],
    input: (usize, usize, usize),
) -> Result<Vec<(usize, usize, usize)>> {
    let (mut c, mut h, mut w) = input;
    let mut out = Vec::with_capacity(layers.len());
    for (i, l) in layers.iter().enumerate() {
        match l {
            LayerSpec::Conv(s) => {
                if s.kernel > h + 2 * s.padding || s.kernel > w + 2 * s.padding {
                    return Err(Error::dim(
                        "forward_taps",
                        format!("layer {i}: kernel {} exceeds padded {h}x{w}", s.kernel),
                    ));
                }
                h = (h + 2 * s.padding - s.kernel) / s.stride + 1;
                w = (w + 2 * s.padding - s.kernel) / s.stride + 1;
                c = s.out_channels;
            }
            LayerSpec::Relu => {}
            LayerSpec::Pool => {
                if h % 2 != 0 || w % 2 != 0 || h == 0 {
                    return Err(Error::dim(
                        "forward_taps",
                        format!("layer {i}: cannot pool odd extents {h}x{w}"),
                    ));
                }
                h /= 2;
                w /= 2;
            }
        }
        out.push((c, h, w));
    }
    Ok(out)
}

/// Runs `layers` on `x`, returning the output of every layer.
pub(crate) fn run_layers(
    g: &mut Graph,
    layers: &[LayerSpec],
    conv_weights: &[Var],
    pool: PoolKind,
    x: Var,
) -> Result<Vec<Var>> {
    let mut cur = x;
    let mut weights = conv_weights.iter();
    let mut outs = Vec::with_capacity(layers.len());
    for l in layers {
        cur = match l {
            LayerSpec::Conv(s) => {
                let w = *weights
                    .next()
                    .ok_or_else(|| Error::Contract("fewer weights than conv layers".into()))?;
                g.conv2d(cur, w, s.stride, s.padding)?
            }
            LayerSpec::Relu => g.relu(cur)?,
            LayerSpec::Pool => g.pool2(cur, pool)?,
        };
        outs.push(cur);
    }
    Ok(outs)
}

/// A realized feature extractor. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureNet {
    config: FeatureNetConfig,
    weights: Vec<Tensor>,
}

impl FeatureNet {
    pub fn build(config: FeatureNetConfig) -> Result<Self> {
        config.validate()?;
        let shapes = config.conv_shapes();
        let weights = match &config.init {
            Init::Gaussian { std, seed } => {
                let mut rng = seed::rng(*seed);
                shapes
                    .iter()
                    .map(|s| Tensor::randn(s, 0.0, *std, &mut rng))
                    .collect()
            }
            Init::File { path } => {
                let records = weights::read(path)?;
                check_records(path, &records, &shapes)?;
                records
            }
        };
        Ok(Self { config, weights })
    }

    pub fn vgg_lite() -> Self {
        Self::build(FeatureNetConfig::vgg_lite()).expect("built-in config is valid")
    }

    pub fn config(&self) -> &FeatureNetConfig {
        &self.config
    }

    pub fn conv_weights(&self) -> &[Tensor] {
        &self.weights
    }

    pub fn tap_count(&self) -> usize {
        self.config.taps.len()
    }

    pub fn save_weights(&self, path: &Path) -> Result<()> {
        let refs: Vec<&Tensor> = self.weights.iter().collect();
        weights::write(path, &refs)
    }

    /// Adds the network to `g` and returns one activation per tap, in tap order.
    pub fn forward_taps(&self, g: &mut Graph, image: Var) -> Result<Vec<Var>> {
        let (c, h, w) = g.value(image).chw("forward_taps")?;
        if c != IMAGE_CHANNELS {
            return Err(Error::dim("forward_taps", format!("expected 3 channels, got {c}")));
        }
        self.config.layer_shapes(h, w)?;
        let x = match &self.config.input_norm {
            None => image,
            Some(n) => {
                let scale: Vec<f64> = n.std.iter().map(|s| 1.0 / s).collect();
                let shift: Vec<f64> = n.mean.iter().zip(&n.std).map(|(m, s)| -m / s).collect();
                g.channel_affine(image, &scale, &shift)?
            }
        };
        let wvars: Vec<Var> = self.weights.iter().map(|t| g.input(t.clone())).collect();
        let outs = run_layers(g, &self.config.layers, &wvars, self.config.pool, x)?;
        Ok(self.config.taps.iter().map(|&t| outs[t]).collect())
    }

    /// Tap activations as plain tensors.
    pub fn tap_values(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let x = g.input(image.clone());
        let taps = self.forward_taps(&mut g, x)?;
        Ok(taps.into_iter().map(|t| g.value(t).detached()).collect())
    }

    /// The last tap, averaged over space: one `C`-vector per image.
    pub fn embed(&self, image: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let x = g.input(image.clone());
        let taps = self.forward_taps(&mut g, x)?;
        let last = *taps.last().expect("validated: at least one tap");
        let pooled = g.spatial_mean(last)?;
        Ok(g.value(pooled).data().to_vec())
    }
}

fn check_records(path: &Path, records: &[Tensor], shapes: &[[usize; 4]]) -> Result<()> {
    let bad = |reason: String| Error::WeightLoad {
        path: path.to_path_buf(),
        offset: 0,
        reason,
    };
    if records.len() != shapes.len() {
        return Err(bad(format!(
            "{} records for {} conv layers",
            records.len(),
            shapes.len()
        )));
    }
    for (i, (r, s)) in records.iter().zip(shapes).enumerate() {
        if r.shape() != s {
            return Err(bad(format!("record {i} has shape {:?}, config needs {s:?}", r.shape())));
        }
    }
    Ok(())
}
