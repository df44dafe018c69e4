//! The odd-one-out metric over triplets.
//!
//! Each image of a triplet is embedded, the average cosine distance from
//! every image to the other two is its oddity score, and the image with the
//! largest score is chosen. A triplet is scored correct when the chosen
//! image is the original.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{image_id, DatasetManifest};
use crate::error::{Error, Result};
use crate::feature_net::FeatureNet;
use crate::image_io;
use crate::seed;

/// A feature vector of one image. Always finite with non-zero norm.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    id: String,
    values: Vec<f64>,
}

impl Embedding {
    pub fn new(id: impl Into<String>, values: Vec<f64>) -> Result<Self> {
        let id = id.into();
        if values.is_empty() {
            return Err(Error::Metric(format!("embedding {id} is empty")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Metric(format!("embedding {id} has non-finite entries")));
        }
        if values.iter().all(|&v| v == 0.0) {
            return Err(Error::Metric(format!("embedding {id} has zero norm")));
        }
        Ok(Self { id, values })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// `1 − cos(u, v)`, in `[0, 2]`.
pub fn cosine_distance(u: &Embedding, v: &Embedding) -> Result<f64> {
    if u.dim() != v.dim() {
        return Err(Error::Metric(format!(
            "dimension mismatch: {} is {}-d, {} is {}-d",
            u.id,
            u.dim(),
            v.id,
            v.dim()
        )));
    }
    let dot: f64 = u.values.iter().zip(&v.values).map(|(a, b)| a * b).sum();
    let nu = u.values.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.values.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Metric("zero-norm embedding".into()));
    }
    Ok((1.0 - dot / (nu * nv)).clamp(0.0, 2.0))
}

/// Mean cosine distance from each embedding to the other two.
pub fn oddity_scores(e: [&Embedding; 3]) -> Result<[f64; 3]> {
    let d01 = cosine_distance(e[0], e[1])?;
    let d02 = cosine_distance(e[0], e[2])?;
    let d12 = cosine_distance(e[1], e[2])?;
    Ok([(d01 + d02) / 2.0, (d01 + d12) / 2.0, (d02 + d12) / 2.0])
}

/// Index of the largest score, lowest index on ties, with a tie flag.
///
/// This is the argmax of `softmax(D)`; softmax is strictly increasing, so
/// it is skipped.
pub fn select_odd(d: [f64; 3]) -> (usize, bool) {
    let mut best = 0;
    for i in 1..3 {
        if d[i] > d[best] {
            best = i;
        }
    }
    let tie = (0..3).any(|i| i != best && d[i] == d[best]);
    (best, tie)
}

/// Supplies the embedding of a dataset image.
pub trait EmbeddingProvider {
    /// `id` is the image id (file stem); `path` is the image file, which
    /// providers that do not read pixels may ignore.
    fn embedding(&self, id: &str, path: &Path) -> Result<Embedding>;
}

impl<F> EmbeddingProvider for F
where
    F: Fn(&str, &Path) -> Result<Embedding>,
{
    fn embedding(&self, id: &str, path: &Path) -> Result<Embedding> {
        self(id, path)
    }
}

/// Embeds images with a built-in net: last tap, spatially averaged.
pub struct FeatureNetProvider<'a> {
    pub net: &'a FeatureNet,
}

impl EmbeddingProvider for FeatureNetProvider<'_> {
    fn embedding(&self, id: &str, path: &Path) -> Result<Embedding> {
        let img = image_io::load_png(path)?;
        Embedding::new(id, self.net.embed(&img)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingIndexEntry {
    pub path: String,
    pub dim: usize,
}

/// `embeddings.json` in an external embedding directory.
pub type EmbeddingIndex = BTreeMap<String, EmbeddingIndexEntry>;

pub const EMBEDDING_INDEX_FILE: &str = "embeddings.json";

/// Reads embeddings exported by an external model.
///
/// The directory holds `embeddings.json` mapping image ids to
/// `{path, dim}`, and per-image files of little-endian `f64` values.
#[derive(Debug, Clone)]
pub struct FileProvider {
    root: PathBuf,
    index: EmbeddingIndex,
}

impl FileProvider {
    pub fn open(dir: &Path) -> Result<Self> {
        let p = dir.join(EMBEDDING_INDEX_FILE);
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        Ok(Self { root: dir.to_path_buf(), index: serde_json::from_str(&text)? })
    }

    pub fn index(&self) -> &EmbeddingIndex {
        &self.index
    }

    /// All values stored for `id` (possibly several vectors of `dim` each).
    pub fn raw(&self, id: &str) -> Result<(Vec<f64>, usize)> {
        let entry = self
            .index
            .get(id)
            .ok_or_else(|| Error::Evaluation(format!("no embedding for image {id}")))?;
        let p = self.root.join(&entry.path);
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        if bytes.len() % 8 != 0 || entry.dim == 0 || (bytes.len() / 8) % entry.dim != 0 {
            return Err(Error::Evaluation(format!(
                "{}: {} bytes is not a whole number of {}-d f64 vectors",
                p.display(),
                bytes.len(),
                entry.dim
            )));
        }
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Ok((values, entry.dim))
    }
}

impl EmbeddingProvider for FileProvider {
    fn embedding(&self, id: &str, _path: &Path) -> Result<Embedding> {
        let (values, dim) = self.raw(id)?;
        if values.len() != dim {
            return Err(Error::Evaluation(format!("{id}: expected one {dim}-d vector, got {} values", values.len())));
        }
        Embedding::new(id, values)
    }
}

/// Writes `values` as `<id>.emb` into `dir` and records it in `index`.
pub fn write_embedding(dir: &Path, index: &mut EmbeddingIndex, id: &str, values: &[f64], dim: usize) -> Result<()> {
    let name = format!("{id}.emb");
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    let p = dir.join(&name);
    fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
    index.insert(id.to_string(), EmbeddingIndexEntry { path: name, dim });
    Ok(())
}

pub fn write_index(dir: &Path, index: &EmbeddingIndex) -> Result<()> {
    let p = dir.join(EMBEDDING_INDEX_FILE);
    fs::write(&p, serde_json::to_string_pretty(index)?).map_err(|e| Error::io(&p, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripletVerdict {
    pub triplet_id: String,
    /// Image ids in presentation order.
    pub presented: [String; 3],
    pub scores: [f64; 3],
    pub chosen: usize,
    pub original_position: usize,
    pub correct: bool,
    pub tie: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    pub ties: usize,
    pub shuffle_seed: u64,
    pub verdicts: Vec<TripletVerdict>,
}

/// One triplet's embeddings with the original first.
pub struct EmbeddedTriplet {
    pub id: String,
    pub original: Embedding,
    pub variants: [Embedding; 2],
}

/// Scores already-embedded triplets. The original's presentation slot is
/// drawn per triplet from `shuffle_seed`, so input order cannot leak the answer.
pub fn evaluate_embedded(triplets: &[EmbeddedTriplet], shuffle_seed: u64) -> Result<EvalReport> {
    if triplets.is_empty() {
        return Err(Error::Evaluation("no triplets to evaluate".into()));
    }
    let mut rng = seed::rng(shuffle_seed);
    let mut verdicts = Vec::with_capacity(triplets.len());
    for t in triplets {
        let mut order = [0usize, 1, 2];
        order.shuffle(&mut rng);
        let pick = |k: usize| if k == 0 { &t.original } else { &t.variants[k - 1] };
        let presented = order.map(pick);
        let scores = oddity_scores(presented)?;
        let (chosen, tie) = select_odd(scores);
        let original_position = order.iter().position(|&k| k == 0).expect("permutation of 0..3");
        verdicts.push(TripletVerdict {
            triplet_id: t.id.clone(),
            presented: presented.map(|e| e.id.clone()),
            scores,
            chosen,
            original_position,
            correct: chosen == original_position,
            tie,
        });
    }
    let correct = verdicts.iter().filter(|v| v.correct).count();
    let ties = verdicts.iter().filter(|v| v.tie).count();
    Ok(EvalReport {
        accuracy: correct as f64 / verdicts.len() as f64,
        correct,
        total: verdicts.len(),
        ties,
        shuffle_seed,
        verdicts,
    })
}

/// Embeds every image of `manifest` (paths relative to `root`) and scores it.
pub fn evaluate(
    manifest: &DatasetManifest,
    root: &Path,
    provider: &dyn EmbeddingProvider,
    shuffle_seed: u64,
) -> Result<EvalReport> {
    let embed = |p: &str| -> Result<Embedding> {
        let id = image_id(p);
        provider.embedding(&id, &root.join(p)).map_err(|e| match e {
            e @ Error::Evaluation(_) => e,
            other => Error::Evaluation(format!("image {id}: {other}")),
        })
    };
    let triplets = manifest
        .records
        .iter()
        .map(|r| {
            Ok(EmbeddedTriplet {
                id: r.id.clone(),
                original: embed(&r.original_path)?,
                variants: [embed(&r.variant_paths[0])?, embed(&r.variant_paths[1])?],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate_embedded(&triplets, shuffle_seed)
}
