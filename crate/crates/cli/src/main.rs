//! `dist`: generate disrupted-structure datasets, score and train models,
//! run probes, and serve the human experiment.
//!
//! Results go to stdout as one JSON document; logs and progress events go
//! to stderr. Exit status is 0 on success, 1 on a domain error and 2 on a
//! usage error.

mod provenance;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dist_core::dataset::{generate_dataset, DatasetManifest, GenerateOptions, MANIFEST_FILE};
use dist_core::dist::{evaluate, EmbeddingProvider, FeatureNetProvider, FileProvider};
use dist_core::distinguish::{
    disrupt_items, expand_labels, load_class_folders, train, ClassifierConfig, ClassifierProvider, ToyClassifier,
    TrainConfig,
};
use dist_core::probe::{cross_validate, PatchEmbeddingSet, ProbeConfig};
use dist_core::saliency::{binary_mask, smoothgrad, SmoothGradConfig, Target, DEFAULT_MASK_THRESHOLD};
use dist_core::synth::synthesize_with_progress;
use dist_core::{image_io, FeatureNet, FeatureNetConfig, Result, SynthesisConfig};
use provenance::{output_dir, RunProvenance};
use serde::Serialize;
use serde_json::json;

#[derive(Parser, Debug)]
#[command(name = "dist", version, about = "Disrupted-structure testbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize one structure-disrupted variant of an image.
    Synthesize(SynthesizeArgs),
    /// Build a triplet dataset from a folder of images.
    GenDataset(GenDatasetArgs),
    /// Score embeddings on a dataset's triplets.
    EvalDist(EvalDistArgs),
    /// Train a baseline or 2n-class classifier on class folders.
    TrainDistinguish(TrainArgs),
    /// Cross-validated position probe on patch embeddings.
    Probe(ProbeArgs),
    /// SmoothGrad sensitivity map of a trained classifier.
    Saliency(SaliencyArgs),
    /// Run the psychophysics session server.
    Serve(ServeArgs),
}

#[derive(Args, Debug, Serialize)]
struct SynthesizeArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value_t = 100)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Feature net config (JSON); the built-in net when absent.
    #[arg(long)]
    net: Option<PathBuf>,
    /// Adam learning rate; the preset for `--steps` when absent.
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args, Debug, Serialize)]
struct GenDatasetArgs {
    #[arg(long)]
    src: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100, value_parser = parse_steps)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    base_seed: u64,
    /// Fail on undecodable sources instead of skipping them.
    #[arg(long)]
    strict: bool,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Sources (last in sorted order) turned into catch assets.
    #[arg(long, default_value_t = 0)]
    catch: usize,
    /// Square working resolution; 0 keeps native size.
    #[arg(long, default_value_t = 64)]
    size: u32,
    #[arg(long)]
    net: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
#[command(group = clap::ArgGroup::new("provider").required(true).args(["embeddings", "model", "net"]))]
struct EvalDistArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Directory of precomputed embeddings with an embeddings.json index.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Trained classifier; its penultimate features are the embedding.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Feature net config (JSON); its last tap, spatially averaged.
    #[arg(long)]
    net: Option<PathBuf>,
    /// Seed of the presentation shuffle.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Full per-triplet report.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum Mode {
    Baseline,
    Distinguish,
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    /// One subdirectory of images per class.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    mode: Mode,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    /// Synthesis steps for the disrupted classes.
    #[arg(long, default_value_t = 10, value_parser = parse_steps)]
    disrupt_steps: usize,
    #[arg(long, default_value_t = 64)]
    size: u32,
    /// Feature net used to synthesize disrupted images.
    #[arg(long)]
    net: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args, Debug, Serialize)]
struct ProbeArgs {
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long)]
    coords: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 5)]
    folds: usize,
}

#[derive(Args, Debug, Serialize)]
struct SaliencyArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    class: usize,
    #[arg(long, default_value_t = DEFAULT_MASK_THRESHOLD)]
    mask_threshold: f64,
    #[arg(long)]
    out: PathBuf,
    /// Mask path; `<out>_mask.png` when absent.
    #[arg(long)]
    mask_out: Option<PathBuf>,
    #[arg(long, default_value_t = dist_core::saliency::DEFAULT_SAMPLES)]
    samples: usize,
    #[arg(long, default_value_t = dist_core::saliency::DEFAULT_NOISE_STD)]
    noise_std: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Differentiate the softmax probability instead of the logit.
    #[arg(long)]
    probability: bool,
}

#[derive(Args, Debug, Serialize)]
struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long)]
    dataset: PathBuf,
    /// Session logs; `<dataset>/sessions` when absent.
    #[arg(long)]
    log_dir: Option<PathBuf>,
    /// Seed for session ids.
    #[arg(long, default_value_t = 0)]
    id_seed: u64,
}

fn parse_steps(s: &str) -> std::result::Result<usize, String> {
    match s.parse::<usize>() {
        Ok(n @ (10 | 100)) => Ok(n),
        _ => Err(format!("steps must be 10 or 100, got {s}")),
    }
}

fn load_net(path: Option<&Path>) -> Result<FeatureNet> {
    let config = match path {
        Some(p) => FeatureNetConfig::load_json(p)?,
        None => FeatureNetConfig::vgg_lite(),
    };
    FeatureNet::build(config)
}

fn ensure_parent(path: &Path) -> Result<PathBuf> {
    let dir = output_dir(path);
    std::fs::create_dir_all(&dir).map_err(|e| dist_core::Error::io(&dir, e))?;
    Ok(dir)
}

fn emit(value: &serde_json::Value) {
    println!("{value}");
}

fn synthesize_cmd(a: &SynthesizeArgs) -> Result<()> {
    let net = load_net(a.net.as_deref())?;
    let target = image_io::load_png(&a.input)?;
    let mut cfg = SynthesisConfig::preset(a.steps, a.seed);
    if let Some(lr) = a.lr {
        cfg.adam.lr = lr;
    }
    let result = synthesize_with_progress(&target, &net, &cfg, |step, loss| {
        eprintln!("{}", json!({ "event": "step", "step": step, "loss": loss }));
    })?;
    let dir = ensure_parent(&a.out)?;
    image_io::save_png(&a.out, &result.image)?;
    let mut prov = RunProvenance::new("synthesize", a)?.seed("synthesis", a.seed);
    prov.config = json!({ "args": prov.config, "synthesis": cfg, "feature_net": net.config() });
    let hash = prov.artifact(&dir, &a.out)?;
    prov.write(&dir)?;
    emit(&json!({
        "out": a.out,
        "sha256": hash,
        "initial_loss": result.loss_trace.first(),
        "final_loss": result.final_loss,
        "steps": a.steps,
    }));
    Ok(())
}

fn gen_dataset_cmd(a: &GenDatasetArgs) -> Result<()> {
    let net = match &a.net {
        Some(p) => FeatureNetConfig::load_json(p)?,
        None => FeatureNetConfig::vgg_lite(),
    };
    let opts = GenerateOptions {
        net,
        synthesis: SynthesisConfig::preset(a.steps, a.base_seed),
        base_seed: a.base_seed,
        strict: a.strict,
        jobs: a.jobs,
        catch_count: a.catch,
        resize: (a.size > 0).then_some((a.size, a.size)),
    };
    let manifest = generate_dataset(&a.src, &a.out, &opts)?;
    let mut prov = RunProvenance::new("gen-dataset", a)?.seed("base_seed", a.base_seed);
    let hash = prov.artifact(&a.out, &a.out.join(MANIFEST_FILE))?;
    prov.write(&a.out)?;
    emit(&json!({
        "manifest": a.out.join(MANIFEST_FILE),
        "manifest_sha256": hash,
        "triplets": manifest.records.len(),
        "catch": manifest.catch.len(),
    }));
    Ok(())
}

fn eval_dist_cmd(a: &EvalDistArgs) -> Result<()> {
    let manifest = DatasetManifest::load(&a.manifest)?;
    let root = output_dir(&a.manifest);
    let model;
    let net;
    let files;
    let provider: &dyn EmbeddingProvider = if let Some(dir) = &a.embeddings {
        files = FileProvider::open(dir)?;
        &files
    } else if let Some(p) = &a.model {
        model = ToyClassifier::load(p)?;
        &ClassifierProvider { model: &model }
    } else {
        net = load_net(a.net.as_deref())?;
        &FeatureNetProvider { net: &net }
    };
    let report = evaluate(&manifest, &root, provider, a.seed)?;
    if let Some(out) = &a.out {
        let dir = ensure_parent(out)?;
        std::fs::write(out, serde_json::to_string_pretty(&report)?).map_err(|e| dist_core::Error::io(out, e))?;
        let mut prov = RunProvenance::new("eval-dist", a)?.seed("shuffle", a.seed);
        prov.artifact(&dir, out)?;
        prov.write(&dir)?;
    }
    emit(&json!({
        "accuracy": report.accuracy,
        "correct": report.correct,
        "total": report.total,
        "ties": report.ties,
        "shuffle_seed": report.shuffle_seed,
    }));
    Ok(())
}

fn train_cmd(a: &TrainArgs) -> Result<()> {
    let resize = (a.size > 0).then_some((a.size, a.size));
    let (classes, base) = load_class_folders(&a.data, resize)?;
    let (_, h, w) = base.items[0].image.chw("train-distinguish")?;
    let data = match a.mode {
        Mode::Baseline => base,
        Mode::Distinguish => {
            let net = load_net(a.net.as_deref())?;
            let synthesis = SynthesisConfig::preset(a.disrupt_steps, a.seed);
            log::info!("synthesizing {} disrupted images", base.len());
            let disrupted = disrupt_items(&base, &net, &synthesis, a.seed, a.jobs)?;
            expand_labels(&base, disrupted)?
        }
    };
    let mut model = ToyClassifier::new(ClassifierConfig::small((h, w), data.label_count(), a.seed))?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        lr: a.lr,
        batch_size: a.batch_size,
        seed: a.seed,
        ..TrainConfig::default()
    };
    let report = train(&mut model, &data, &cfg)?;
    for (epoch, loss) in report.loss_curve.iter().enumerate() {
        eprintln!("{}", json!({ "event": "epoch", "epoch": epoch, "loss": loss }));
    }
    let dir = ensure_parent(&a.out)?;
    model.save(&a.out)?;
    let mut prov = RunProvenance::new("train-distinguish", a)?.seed("train", a.seed);
    prov.config = json!({ "args": prov.config, "train": cfg, "classifier": model.config(), "classes": classes });
    let hash = prov.artifact(&dir, &a.out)?;
    prov.artifact(&dir, &a.out.with_extension("json"))?;
    prov.write(&dir)?;
    emit(&json!({
        "model": a.out,
        "sha256": hash,
        "classes": classes,
        "outputs": model.head_width(),
        "items": data.len(),
        "loss_curve": report.loss_curve,
        "final_loss": report.final_loss,
        "train_accuracy": report.train_accuracy,
    }));
    Ok(())
}

fn probe_cmd(a: &ProbeArgs) -> Result<()> {
    let set = PatchEmbeddingSet::load(&a.embeddings, &a.coords)?;
    let cfg = ProbeConfig {
        epochs: a.epochs,
        folds: a.folds,
        ..ProbeConfig::default()
    };
    let report = cross_validate(&set, &cfg, a.seed)?;
    let dir = ensure_parent(&a.out)?;
    std::fs::write(&a.out, serde_json::to_string_pretty(&report)?).map_err(|e| dist_core::Error::io(&a.out, e))?;
    let mut prov = RunProvenance::new("probe", a)?.seed("probe", a.seed);
    prov.artifact(&dir, &a.out)?;
    prov.write(&dir)?;
    emit(&serde_json::to_value(&report)?);
    Ok(())
}

fn saliency_cmd(a: &SaliencyArgs) -> Result<()> {
    let model = ToyClassifier::load(&a.model)?;
    let image = image_io::load_png(&a.image)?;
    let cfg = SmoothGradConfig {
        samples: a.samples,
        noise_std: a.noise_std,
        seed: a.seed,
        target: if a.probability { Target::Probability } else { Target::Logit },
    };
    let id = a.image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let map = smoothgrad(&model, &id, &image, a.class, &cfg)?;
    let mask = binary_mask(&map, a.mask_threshold)?;
    let mask_out = a.mask_out.clone().unwrap_or_else(|| {
        let stem = a.out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        a.out.with_file_name(format!("{stem}_mask.png"))
    });
    let dir = ensure_parent(&a.out)?;
    image_io::save_gray_png(&a.out, &map.values, map.height, map.width)?;
    ensure_parent(&mask_out)?;
    image_io::save_mask_png(&mask_out, &mask, map.height, map.width)?;
    let mut prov = RunProvenance::new("saliency", a)?.seed("smoothgrad", a.seed);
    prov.artifact(&dir, &a.out)?;
    prov.artifact(&dir, &mask_out)?;
    prov.write(&dir)?;
    emit(&json!({
        "map": a.out,
        "mask": mask_out,
        "class": a.class,
        "constant": map.constant,
        "mask_fraction": mask.iter().filter(|&&b| b).count() as f64 / mask.len() as f64,
    }));
    Ok(())
}

fn serve_cmd(a: &ServeArgs) -> Result<()> {
    let config = dist_server::ServerConfig {
        dataset: a.dataset.clone(),
        log_dir: a.log_dir.clone().unwrap_or_else(|| a.dataset.join("sessions")),
        id_seed: a.id_seed,
    };
    let addr = format!("{}:{}", a.host, a.port);
    let rt = tokio::runtime::Runtime::new().map_err(|e| dist_core::Error::io(Path::new(&addr), e))?;
    rt.block_on(dist_server::run(&addr, config))
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synthesize(a) => synthesize_cmd(a),
        Command::GenDataset(a) => gen_dataset_cmd(a),
        Command::EvalDist(a) => eval_dist_cmd(a),
        Command::TrainDistinguish(a) => train_cmd(a),
        Command::Probe(a) => probe_cmd(a),
        Command::Saliency(a) => saliency_cmd(a),
        Command::Serve(a) => serve_cmd(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({ "event": "error", "message": e.to_string() }));
            ExitCode::from(1)
        }
    }
}
