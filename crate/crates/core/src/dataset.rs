//! Triplet datasets: originals plus two structure-disrupted variants each.
//!
//! A dataset directory holds `manifest.json` at its root and PNG files
//! under `images/` (triplets) and `catch/` (psychophysics catch assets).
//! All manifest paths are relative to the root and use `/`.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_net::{FeatureNet, FeatureNetConfig};
use crate::hashing::sha256_hex;
use crate::image_io;
use crate::seed;
use crate::synth::{self, structure_divergence, SynthesisConfig};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripletRecord {
    pub id: String,
    pub original_path: String,
    pub variant_paths: [String; 2],
    pub seeds: [u64; 2],
    pub synthesis_config_hash: String,
    pub height: usize,
    pub width: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_label: Option<String>,
}

/// One catch trial's images: an original, its mirror image, and a
/// disrupted variant. The disrupted image is the correct answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatchRecord {
    pub id: String,
    pub original_path: String,
    pub mirrored_path: String,
    pub disrupted_path: String,
    pub seed: u64,
}

impl CatchRecord {
    /// Paths in canonical order; [`CatchAssets::CORRECT_INDEX`] names the answer.
    pub fn paths(&self) -> [&str; 3] {
        [&self.original_path, &self.mirrored_path, &self.disrupted_path]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub feature_net: FeatureNetConfig,
    pub synthesis: SynthesisConfig,
    pub records: Vec<TripletRecord>,
    #[serde(default)]
    pub catch: Vec<CatchRecord>,
}

impl DatasetManifest {
    pub fn new(feature_net: FeatureNetConfig, synthesis: SynthesisConfig) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            feature_net,
            synthesis,
            records: Vec::new(),
            catch: Vec::new(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    /// SHA-256 of the serialized manifest.
    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(self.to_json()?.as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Config(format!(
                "unsupported manifest format_version {}",
                self.format_version
            )));
        }
        let mut ids = HashSet::new();
        for id in self.records.iter().map(|r| &r.id).chain(self.catch.iter().map(|c| &c.id)) {
            if !ids.insert(id.as_str()) {
                return Err(Error::Config(format!("duplicate record id {id}")));
            }
        }
        for r in &self.records {
            if r.seeds[0] == r.seeds[1] {
                return Err(Error::Config(format!("triplet {} reuses seed {}", r.id, r.seeds[0])));
            }
        }
        Ok(())
    }

    /// Every synthesis seed in the dataset, which must all be distinct.
    pub fn check_seed_uniqueness(&self) -> Result<()> {
        let mut seen = HashSet::new();
        let all = self
            .records
            .iter()
            .flat_map(|r| r.seeds)
            .chain(self.catch.iter().map(|c| c.seed));
        for s in all {
            if !seen.insert(s) {
                return Err(Error::Config(format!("seed {s} used more than once")));
            }
        }
        Ok(())
    }

    /// Confirms every referenced file exists and decodes to the recorded extents.
    pub fn verify_files(&self, root: &Path) -> Result<()> {
        for r in &self.records {
            for p in std::iter::once(&r.original_path).chain(&r.variant_paths) {
                let img = image_io::load_png(&root.join(p))?;
                if img.shape() != [3, r.height, r.width] {
                    return Err(Error::Config(format!(
                        "{p}: decoded {:?}, manifest says {}x{}",
                        img.shape(),
                        r.height,
                        r.width
                    )));
                }
            }
        }
        for c in &self.catch {
            for p in c.paths() {
                image_io::load_png(&root.join(p))?;
            }
        }
        Ok(())
    }
}

/// Image id of a dataset path: its file stem.
pub fn image_id(path: &str) -> String {
    Path::new(path)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Hash identifying the synthesis recipe of a dataset (seed excluded).
pub fn synthesis_hash(net: &FeatureNetConfig, cfg: &SynthesisConfig) -> Result<String> {
    let recipe = serde_json::json!({ "feature_net": net, "synthesis": cfg.with_seed(0) });
    Ok(sha256_hex(serde_json::to_string(&recipe)?.as_bytes()))
}

/// Quality measurements of a generated triplet, taken on the 8-bit images.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TripletQa {
    /// Gram loss of each written variant relative to the loss of its initialization.
    pub loss_ratio: [f64; 2],
    /// Pixel correlation between the written original and each variant.
    pub divergence: [f64; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedTriplet {
    pub record: TripletRecord,
    pub qa: TripletQa,
}

/// Synthesizes two variants of `source` and writes the triplet under `root/images/`.
pub fn generate_triplet(
    id: &str,
    source: &Tensor,
    net: &FeatureNet,
    cfg: &SynthesisConfig,
    seeds: [u64; 2],
    root: &Path,
    class_label: Option<String>,
) -> Result<GeneratedTriplet> {
    if seeds[0] == seeds[1] {
        return Err(Error::Config(format!("triplet {id}: variant seeds must differ, both are {}", seeds[0])));
    }
    let wrap = |e: Error| Error::Triplet { id: id.to_string(), source: Box::new(e) };
    let (_, h, w) = source.chw("generate_triplet").map_err(wrap)?;
    let original = image_io::quantize(source);
    let weights = cfg.resolved_weights(net.tap_count()).map_err(wrap)?;
    let targets = synth::target_grams(net, &original).map_err(wrap)?;

    let images = root.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let original_path = format!("images/{id}_original.png");
    image_io::save_png(&root.join(&original_path), &original)?;

    let mut variant_paths: [String; 2] = Default::default();
    let mut qa = TripletQa { loss_ratio: [0.0; 2], divergence: [0.0; 2] };
    for (v, &s) in seeds.iter().enumerate() {
        let res = synth::synthesize(&original, net, &cfg.with_seed(s)).map_err(wrap)?;
        let written = image_io::quantize(&res.image);
        let path = format!("images/{id}_v{v}.png");
        image_io::save_png(&root.join(&path), &written)?;
        let loss = synth::evaluate_loss(net, &targets, &weights, &written).map_err(wrap)?;
        qa.loss_ratio[v] = loss / res.initial_loss();
        qa.divergence[v] = structure_divergence(&original, &written).map_err(wrap)?;
        variant_paths[v] = path;
    }

    Ok(GeneratedTriplet {
        record: TripletRecord {
            id: id.to_string(),
            original_path,
            variant_paths,
            seeds,
            synthesis_config_hash: synthesis_hash(net.config(), cfg)?,
            height: h,
            width: w,
            class_label,
        },
        qa,
    })
}

/// Catch-trial images in canonical order: original, mirrored, disrupted.
#[derive(Debug, Clone, PartialEq)]
pub struct CatchAssets {
    pub original: Tensor,
    pub mirrored: Tensor,
    pub disrupted: Tensor,
}

impl CatchAssets {
    /// Position of the disrupted image, which is the correct answer.
    pub const CORRECT_INDEX: usize = 2;

    pub fn triple(&self) -> [&Tensor; 3] {
        [&self.original, &self.mirrored, &self.disrupted]
    }
}

pub fn make_catch_assets(original: &Tensor, net: &FeatureNet, cfg: &SynthesisConfig) -> Result<CatchAssets> {
    let original = image_io::quantize(original);
    let mirrored = image_io::mirror(&original)?;
    let disrupted = image_io::quantize(&synth::synthesize(&original, net, cfg)?.image);
    Ok(CatchAssets { original, mirrored, disrupted })
}

#[derive(Debug, Clone)]
pub struct GenerateOptions {
    pub net: FeatureNetConfig,
    pub synthesis: SynthesisConfig,
    pub base_seed: u64,
    /// Abort on undecodable sources instead of skipping them.
    pub strict: bool,
    pub jobs: usize,
    /// Sources (taken from the end of the sorted list) reserved for catch trials.
    pub catch_count: usize,
    /// Resize sources to `(height, width)`; `None` keeps native extents.
    pub resize: Option<(u32, u32)>,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            net: FeatureNetConfig::vgg_lite(),
            synthesis: SynthesisConfig::complete(0),
            base_seed: 0,
            strict: false,
            jobs: 1,
            catch_count: 0,
            resize: Some((64, 64)),
        }
    }
}

/// Seeds of triplet `index`, derived from the base seed so that re-runs reproduce.
pub fn triplet_seeds(base: u64, index: usize) -> [u64; 2] {
    [seed::derive(base, &[index as u64, 0]), seed::derive(base, &[index as u64, 1])]
}

/// Seed of catch asset `index`; kept apart from triplet seeds by a distinct path tag.
pub fn catch_seed(base: u64, index: usize) -> u64 {
    seed::derive(base, &[u64::MAX, index as u64])
}

pub(crate) fn list_sources(src: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(src)
        .map_err(|e| Error::io(src, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    Ok(files)
}

pub(crate) fn load_source(path: &Path, resize: Option<(u32, u32)>) -> Result<Tensor> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
    let rgb = img.to_rgb8();
    let rgb = match resize {
        Some((h, w)) if (rgb.height(), rgb.width()) != (h, w) => {
            image::imageops::resize(&rgb, w, h, image::imageops::FilterType::Triangle)
        }
        _ => rgb,
    };
    Ok(image_io::from_rgb(&rgb))
}

/// Builds a dataset from every image in `src` and writes it under `out`.
pub fn generate_dataset(src: &Path, out: &Path, opts: &GenerateOptions) -> Result<DatasetManifest> {
    let net = FeatureNet::build(opts.net.clone())?;
    opts.synthesis.validate(net.tap_count())?;

    let mut sources = Vec::new();
    for path in list_sources(src)? {
        match load_source(&path, opts.resize) {
            Ok(t) => sources.push((path, t)),
            Err(e) if !opts.strict => log::warn!("skipping {}: {e}", path.display()),
            Err(e) => return Err(e),
        }
    }
    if sources.is_empty() {
        return Err(Error::Config(format!("no decodable images in {}", src.display())));
    }
    if opts.catch_count >= sources.len() {
        return Err(Error::Config(format!(
            "{} catch sources requested but only {} images available",
            opts.catch_count,
            sources.len()
        )));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let split = sources.len() - opts.catch_count;
    let (triplet_src, catch_src) = sources.split_at(split);

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs.max(1))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;

    let records: Vec<TripletRecord> = pool.install(|| {
        triplet_src
            .par_iter()
            .enumerate()
            .map(|(i, (path, img))| {
                let id = format!("t{i:05}");
                let label = path.file_stem().map(|s| s.to_string_lossy().into_owned());
                let seeds = triplet_seeds(opts.base_seed, i);
                generate_triplet(&id, img, &net, &opts.synthesis, seeds, out, label).map(|g| g.record)
            })
            .collect::<Result<_>>()
    })?;

    let catch_dir = out.join("catch");
    if !catch_src.is_empty() {
        fs::create_dir_all(&catch_dir).map_err(|e| Error::io(&catch_dir, e))?;
    }
    let catch: Vec<CatchRecord> = pool.install(|| {
        catch_src
            .par_iter()
            .enumerate()
            .map(|(i, (_, img))| {
                let id = format!("c{i:05}");
                let s = catch_seed(opts.base_seed, i);
                let assets = make_catch_assets(img, &net, &opts.synthesis.with_seed(s))
                    .map_err(|e| Error::Triplet { id: id.clone(), source: Box::new(e) })?;
                let rec = CatchRecord {
                    original_path: format!("catch/{id}_original.png"),
                    mirrored_path: format!("catch/{id}_mirrored.png"),
                    disrupted_path: format!("catch/{id}_disrupted.png"),
                    id,
                    seed: s,
                };
                for (p, t) in rec.paths().into_iter().zip(assets.triple()) {
                    image_io::save_png(&out.join(p), t)?;
                }
                Ok(rec)
            })
            .collect::<Result<_>>()
    })?;

    let mut manifest = DatasetManifest::new(opts.net.clone(), opts.synthesis.clone());
    manifest.records = records;
    manifest.catch = catch;
    manifest.validate()?;
    manifest.check_seed_uniqueness()?;
    manifest.save(&out.join(MANIFEST_FILE))?;
    Ok(manifest)
}
