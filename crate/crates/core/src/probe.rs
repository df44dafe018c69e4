//! Spatial-location decoding probe.
//!
//! Every patch embedding of every image is regressed onto the patch's grid
//! coordinates with a two-layer MLP. Low held-out error means the layer
//! still knows where its patches are.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::dist::FileProvider;
use crate::error::{Error, Result};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::seed;
use crate::tensor::Tensor;

pub const COORDS_FILE: &str = "coords.json";

/// `image_id → [[x, y], …]`, one entry per patch in embedding order.
pub type CoordsFile = BTreeMap<String, Vec<[u32; 2]>>;

#[derive(Debug, Clone, PartialEq)]
pub struct PatchEmbeddingSet {
    /// `embeddings[i][j]` is patch `j` of image `i`.
    pub embeddings: Vec<Vec<Vec<f64>>>,
    /// Grid coordinates `(x, y)` matching `embeddings`.
    pub coords: Vec<Vec<(u32, u32)>>,
    pub max_x: u32,
    pub max_y: u32,
}

impl PatchEmbeddingSet {
    /// Takes `max_x`/`max_y` from the largest coordinates present.
    pub fn new(embeddings: Vec<Vec<Vec<f64>>>, coords: Vec<Vec<(u32, u32)>>) -> Result<Self> {
        let max_x = coords.iter().flatten().map(|c| c.0).max().unwrap_or(0);
        let max_y = coords.iter().flatten().map(|c| c.1).max().unwrap_or(0);
        let set = Self { embeddings, coords, max_x, max_y };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_x == 0 || self.max_y == 0 {
            return Err(Error::Config("patch grid needs at least two positions per axis".into()));
        }
        if self.embeddings.len() != self.coords.len() {
            return Err(Error::Config(format!(
                "{} embedded images but {} coordinate lists",
                self.embeddings.len(),
                self.coords.len()
            )));
        }
        let dim = self.dim();
        for (i, (e, c)) in self.embeddings.iter().zip(&self.coords).enumerate() {
            if e.len() != c.len() {
                return Err(Error::Config(format!("image {i}: {} patches but {} coordinates", e.len(), c.len())));
            }
            if e.iter().any(|v| v.len() != dim) {
                return Err(Error::Config(format!("image {i}: patch embeddings must all be {dim}-d")));
            }
            if e.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::Config(format!("image {i}: non-finite embedding")));
            }
            if c.iter().any(|&(x, y)| x > self.max_x || y > self.max_y) {
                return Err(Error::Config(format!("image {i}: coordinate outside the grid")));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.embeddings.iter().flatten().next().map_or(0, Vec::len)
    }

    pub fn rows(&self) -> usize {
        self.coords.iter().map(Vec::len).sum()
    }

    /// Reads patch embeddings from an external-embedding directory and the
    /// coordinate sidecar. Each image's vector holds its patches back to back.
    pub fn load(dir: &Path, coords_path: &Path) -> Result<Self> {
        let text = fs::read_to_string(coords_path).map_err(|e| Error::io(coords_path, e))?;
        let coords: CoordsFile = serde_json::from_str(&text)?;
        let provider = FileProvider::open(dir)?;
        let mut embeddings = Vec::with_capacity(coords.len());
        let mut grid = Vec::with_capacity(coords.len());
        for (id, cs) in &coords {
            let (values, dim) = provider.raw(id)?;
            if dim == 0 || values.len() != dim * cs.len() {
                return Err(Error::Config(format!(
                    "image {id}: {} values do not hold {} patches of dimension {dim}",
                    values.len(),
                    cs.len()
                )));
            }
            embeddings.push(values.chunks(dim).map(<[f64]>::to_vec).collect());
            grid.push(cs.iter().map(|c| (c[0], c[1])).collect());
        }
        Self::new(embeddings, grid)
    }
}

/// Image-major, patch-minor rows: `(inputs [N·L, D], targets [N·L, 2])`.
/// Targets are raw grid coordinates.
pub fn build_regression_data(set: &PatchEmbeddingSet) -> (Vec<Vec<f64>>, Vec<[f64; 2]>) {
    let inputs = set.embeddings.iter().flatten().cloned().collect();
    let targets = set.coords.iter().flatten().map(|&(x, y)| [x as f64, y as f64]).collect();
    (inputs, targets)
}

/// `0.5·(|x̂−x|/max_x + |ŷ−y|/max_y)`.
pub fn normalized_error(pred: (f64, f64), truth: (f64, f64), max_x: f64, max_y: f64) -> f64 {
    0.5 * ((pred.0 - truth.0).abs() / max_x + (pred.1 - truth.1).abs() / max_y)
}

/// Shuffles `0..n` with `seed` and deals it into `k` folds whose sizes differ by at most one.
pub fn fold_partition(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 || n < k {
        return Err(Error::Config(format!("cannot split {n} rows into {k} folds")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed::rng(seed));
    let (q, r) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = q + usize::from(f < r);
        folds.push(idx[start..start + len].to_vec());
        start += len;
    }
    Ok(folds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub folds: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            lr: 1e-3,
            epochs: 200,
            batch_size: 32,
            folds: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub layer: Option<String>,
    pub fold_errors: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub rows: usize,
    pub seed: u64,
    pub config: ProbeConfig,
}

/// `D → hidden → 2` with relu, predicting normalized coordinates.
struct Mlp {
    params: Vec<Tensor>,
}

impl Mlp {
    fn new(d: usize, hidden: usize, rng: &mut seed::Rng) -> Self {
        Self {
            params: vec![
                Tensor::randn(&[hidden, d], 0.0, (2.0 / d as f64).sqrt(), rng),
                Tensor::zeros(&[hidden]),
                Tensor::randn(&[2, hidden], 0.0, (1.0 / hidden as f64).sqrt(), rng),
                Tensor::zeros(&[2]),
            ],
        }
    }

    fn forward(g: &mut Graph, p: &[crate::autodiff::Var], x: crate::autodiff::Var) -> Result<crate::autodiff::Var> {
        let h = g.linear(x, p[0], p[1])?;
        let h = g.relu(h)?;
        g.linear(h, p[2], p[3])
    }

    fn predict(&self, rows: &[&[f64]]) -> Result<Vec<[f64; 2]>> {
        let d = rows.first().map_or(0, |r| r.len());
        let mut g = Graph::new();
        let p: Vec<_> = self.params.iter().map(|t| g.input(t.clone())).collect();
        let x = g.input(Tensor::new(&[rows.len(), d], rows.concat())?);
        let y = Self::forward(&mut g, &p, x)?;
        Ok(g.value(y).data().chunks(2).map(|c| [c[0], c[1]]).collect())
    }
}

fn train_fold(inputs: &[&[f64]], targets: &[[f64; 2]], cfg: &ProbeConfig, rng: &mut seed::Rng) -> Result<Mlp> {
    let d = inputs[0].len();
    let mut mlp = Mlp::new(d, cfg.hidden, rng);
    let adam = AdamConfig { lr: cfg.lr, ..AdamConfig::default() };
    let mut state = AdamState::new(&mlp.params.iter().collect::<Vec<_>>());
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut g = Graph::new();
            let p: Vec<_> = mlp.params.iter().map(|t| g.param(t.clone())).collect();
            let xs: Vec<f64> = batch.iter().flat_map(|&i| inputs[i].iter().copied()).collect();
            let ts: Vec<f64> = batch.iter().flat_map(|&i| targets[i]).collect();
            let x = g.input(Tensor::new(&[batch.len(), d], xs)?);
            let y = Mlp::forward(&mut g, &p, x)?;
            let se = g.squared_error(y, &Tensor::new(&[batch.len(), 2], ts)?)?;
            let loss = g.scale(se, 1.0 / batch.len() as f64)?;
            g.backward(loss)?;
            for (t, v) in mlp.params.iter_mut().zip(&p) {
                t.set_grad(g.grad(*v).expect("probe weights require grad").to_vec())?;
            }
            adam_step(&mut mlp.params.iter_mut().collect::<Vec<_>>(), &mut state, &adam)?;
        }
    }
    Ok(mlp)
}

/// k-fold cross-validated decoding error; predictions are clamped to the grid.
pub fn cross_validate(set: &PatchEmbeddingSet, cfg: &ProbeConfig, seed: u64) -> Result<ProbeReport> {
    set.validate()?;
    if cfg.batch_size == 0 || cfg.hidden == 0 {
        return Err(Error::Config("probe batch size and hidden width must be positive".into()));
    }
    let (inputs, coords) = build_regression_data(set);
    let (mx, my) = (set.max_x as f64, set.max_y as f64);
    let targets: Vec<[f64; 2]> = coords.iter().map(|c| [c[0] / mx, c[1] / my]).collect();
    let folds = fold_partition(inputs.len(), cfg.folds, seed)?;
    let mut rng = seed::rng(seed::derive(seed, &[1]));
    let mut fold_errors = Vec::with_capacity(folds.len());
    for (f, held) in folds.iter().enumerate() {
        let train_idx: Vec<usize> = folds
            .iter()
            .enumerate()
            .filter(|(g, _)| *g != f)
            .flat_map(|(_, idx)| idx.iter().copied())
            .collect();
        let tr_in: Vec<&[f64]> = train_idx.iter().map(|&i| inputs[i].as_slice()).collect();
        let tr_t: Vec<[f64; 2]> = train_idx.iter().map(|&i| targets[i]).collect();
        let mlp = train_fold(&tr_in, &tr_t, cfg, &mut rng)?;
        let te_in: Vec<&[f64]> = held.iter().map(|&i| inputs[i].as_slice()).collect();
        let pred = mlp.predict(&te_in)?;
        let err = held
            .iter()
            .zip(&pred)
            .map(|(&i, p)| {
                let px = p[0].clamp(0.0, 1.0) * mx;
                let py = p[1].clamp(0.0, 1.0) * my;
                normalized_error((px, py), (coords[i][0], coords[i][1]), mx, my)
            })
            .sum::<f64>()
            / held.len() as f64;
        fold_errors.push(err);
    }
    let mean = fold_errors.iter().sum::<f64>() / fold_errors.len() as f64;
    let var = fold_errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / fold_errors.len() as f64;
    Ok(ProbeReport {
        layer: None,
        fold_errors,
        mean,
        std: var.sqrt(),
        rows: inputs.len(),
        seed,
        config: cfg.clone(),
    })
}
