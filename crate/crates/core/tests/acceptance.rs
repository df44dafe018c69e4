//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any failure.
//!
//! Runs as a plain binary (`harness = false`) so every line is printed.

mod common;

use std::path::Path;
use std::time::{Duration, Instant};

use common::*;
use dist_core::benchmark::{run_benchmark, BenchmarkConfig};
use dist_core::dataset::{generate_dataset, DatasetManifest, GenerateOptions, MANIFEST_FILE};
use dist_core::dist::{evaluate, oddity_scores, select_odd, Embedding};
use dist_core::distinguish::{train, ClassifierConfig, LabeledDataset, LabeledItem, ToyClassifier, TrainConfig};
use dist_core::feature_net::LayerSpec;
use dist_core::probe::{cross_validate, fold_partition, PatchEmbeddingSet, ProbeConfig};
use dist_core::psycho::{build_schedule, trial_count, Session, TrialKind, BREAK_EVERY, CATCH_EVERY};
use dist_core::saliency::{binary_mask, class_gradient, smoothgrad, SmoothGradConfig, Target};
use dist_core::synth::{gram_loss, structure_divergence};
use dist_core::{fixtures, image_io, sha256_hex, synthesize, FeatureNet, Graph, SynthesisConfig, Tensor, Var};
use rand::Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

// ---------------------------------------------------------------- autodiff

const FIXTURES: usize = 20;

fn nonzero(shape: &[usize], r: &mut TestRng) -> Tensor {
    // Keep relu inputs away from the kink so ±ε never straddles it.
    let n = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let m = r.random_range(0.05..1.0);
            if r.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, v).unwrap()
}

fn autodiff() -> Outcome {
    let start = Instant::now();
    let mut r = rng(2024);
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let mut run = |name: &'static str, f: &mut dyn FnMut(&mut TestRng) -> f64| {
        let m = (0..FIXTURES).map(|_| f(&mut r)).fold(0.0, f64::max);
        worst.push((name, m));
    };

    run("conv2d", &mut |r| {
        let (ci, co) = (r.random_range(1..4), r.random_range(1..4));
        let (stride, pad) = (r.random_range(1..3), r.random_range(0..2));
        let x = uniform(&[ci, 5, 5], -1.0, 1.0, r);
        let w = uniform(&[co, ci, 3, 3], -1.0, 1.0, r);
        let proj_shape = {
            let o = (5 + 2 * pad - 3) / stride + 1;
            [co, o, o]
        };
        let proj = uniform(&proj_shape, -1.0, 1.0, r);
        let (w2, p2) = (w.clone(), proj.clone());
        let fx = move |g: &mut Graph, v: Var| {
            let wv = g.input(w2.clone());
            let y = g.conv2d(v, wv, stride, pad).unwrap();
            g.weighted_sum(y, &p2).unwrap()
        };
        let (x2, p3) = (x.clone(), proj);
        let fw = move |g: &mut Graph, v: Var| {
            let xv = g.input(x2.clone());
            let y = g.conv2d(xv, v, stride, pad).unwrap();
            g.weighted_sum(y, &p3).unwrap()
        };
        gradcheck(&x, &fx).max(gradcheck(&w, &fw))
    });
    run("relu", &mut |r| {
        let x = nonzero(&[2, 4, 4], r);
        let proj = uniform(&[2, 4, 4], -1.0, 1.0, r);
        gradcheck(&x, &move |g: &mut Graph, v: Var| {
            let y = g.relu(v).unwrap();
            g.weighted_sum(y, &proj).unwrap()
        })
    });
    run("avg_pool2", &mut |r| {
        let x = uniform(&[2, 6, 6], -1.0, 1.0, r);
        let proj = uniform(&[2, 3, 3], -1.0, 1.0, r);
        gradcheck(&x, &move |g: &mut Graph, v: Var| {
            let y = g.avg_pool2(v).unwrap();
            g.weighted_sum(y, &proj).unwrap()
        })
    });
    run("linear", &mut |r| {
        let (di, dout) = (r.random_range(1..7), r.random_range(1..5));
        let x = uniform(&[di], -1.0, 1.0, r);
        let w = uniform(&[dout, di], -1.0, 1.0, r);
        let b = uniform(&[dout], -1.0, 1.0, r);
        let proj = uniform(&[dout], -1.0, 1.0, r);
        let (w1, b1, p1) = (w.clone(), b.clone(), proj.clone());
        let fx = move |g: &mut Graph, v: Var| {
            let (wv, bv) = (g.input(w1.clone()), g.input(b1.clone()));
            let y = g.linear(v, wv, bv).unwrap();
            g.weighted_sum(y, &p1).unwrap()
        };
        let (x2, b2, p2) = (x.clone(), b.clone(), proj.clone());
        let fw = move |g: &mut Graph, v: Var| {
            let (xv, bv) = (g.input(x2.clone()), g.input(b2.clone()));
            let y = g.linear(xv, v, bv).unwrap();
            g.weighted_sum(y, &p2).unwrap()
        };
        let (x3, w3) = (x.clone(), w.clone());
        let fb = move |g: &mut Graph, v: Var| {
            let (xv, wv) = (g.input(x3.clone()), g.input(w3.clone()));
            let y = g.linear(xv, wv, v).unwrap();
            g.weighted_sum(y, &proj).unwrap()
        };
        gradcheck(&x, &fx).max(gradcheck(&w, &fw)).max(gradcheck(&b, &fb))
    });
    run("gram", &mut |r| {
        let c = r.random_range(1..5);
        let x = uniform(&[c, 4, 3], -1.0, 1.0, r);
        let proj = uniform(&[c, c], -1.0, 1.0, r);
        gradcheck(&x, &move |g: &mut Graph, v: Var| {
            let y = g.gram(v).unwrap();
            g.weighted_sum(y, &proj).unwrap()
        })
    });
    run("gram_loss", &mut |r| {
        let x = uniform(&[3, 4, 4], -1.0, 1.0, r);
        let w = uniform(&[2, 3, 3, 3], -1.0, 1.0, r);
        let t0 = uniform(&[3, 3], -0.5, 0.5, r);
        let t1 = uniform(&[2, 2], -0.5, 0.5, r);
        let weights = [r.random_range(0.1..2.0), r.random_range(0.1..2.0)];
        gradcheck(&x, &move |g: &mut Graph, v: Var| {
            let wv = g.input(w.clone());
            let y = g.conv2d(v, wv, 1, 1).unwrap();
            gram_loss(g, &[t0.clone(), t1.clone()], &[v, y], &weights).unwrap()
        })
    });
    run("softmax_cross_entropy", &mut |r| {
        let k = r.random_range(2..7);
        let z = uniform(&[k], -3.0, 3.0, r);
        let label = r.random_range(0..k);
        gradcheck(&z, &move |g: &mut Graph, v: Var| g.softmax_cross_entropy(v, label).unwrap())
    });

    let elapsed = start.elapsed();
    let detail = worst.iter().map(|(n, m)| format!("{n} {m:.1e}")).collect::<Vec<_>>().join(", ");
    check(
        worst.iter().all(|(_, m)| *m < 1e-5) && elapsed < Duration::from_secs(60),
        format!("{FIXTURES} fixtures each, max rel err: {detail}; {elapsed:.1?}"),
    )
}

// ---------------------------------------------------------------- synthesis

fn synthesis() -> Outcome {
    let start = Instant::now();
    let net = FeatureNet::vgg_lite();
    let target = fixtures::periodic_texture(64, 64, 0);
    let full = synthesize(&target, &net, &SynthesisConfig::complete(1)).map_err(e)?;
    let approx = synthesize(&target, &net, &SynthesisConfig::approximate(1)).map_err(e)?;
    let ratio = |r: &dist_core::SynthesisResult| r.final_loss / r.loss_trace[0];
    let div = structure_divergence(&target, &full.image).map_err(e)?;
    let elapsed = start.elapsed();
    check(
        ratio(&full) <= 0.1 && div.abs() < 0.5 && ratio(&approx) <= 0.5 && elapsed < Duration::from_secs(300),
        format!(
            "100-step ratio {:.4}, |divergence| {:.3}, 10-step ratio {:.3}; {elapsed:.1?}",
            ratio(&full),
            div.abs(),
            ratio(&approx)
        ),
    )
}

// ---------------------------------------------------------------- metric

fn metric() -> Outcome {
    let mut r = rng(99);
    let mut mismatches = 0;
    let mut softmax_mismatches = 0;
    let mut worst_inv: f64 = 0.0;
    for _ in 0..10_000 {
        let dim = r.random_range(1..9);
        let v: Vec<Vec<f64>> = (0..3).map(|_| (0..dim).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
        let emb: Vec<Embedding> = v.iter().map(|x| Embedding::new("x", x.clone()).unwrap()).collect();
        let s = oddity_scores([&emb[0], &emb[1], &emb[2]]).map_err(e)?;
        let (pick, _) = select_odd(s);
        let (bs, bpick) = brute_force_oddity([&v[0], &v[1], &v[2]]);
        if s != bs || pick != bpick {
            mismatches += 1;
        }
        let mx = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let soft: Vec<f64> = s.iter().map(|x| (x - mx).exp()).collect();
        let total: f64 = soft.iter().sum();
        let p: Vec<f64> = soft.iter().map(|x| x / total).collect();
        let sp = (0..3).fold(0, |b, i| if p[i] > p[b] { i } else { b });
        if sp != pick {
            softmax_mismatches += 1;
        }

        let k = r.random_range(0.01..100.0);
        let scaled: Vec<Embedding> = v.iter().map(|x| Embedding::new("x", x.iter().map(|a| a * k).collect()).unwrap()).collect();
        let ss = oddity_scores([&scaled[0], &scaled[1], &scaled[2]]).map_err(e)?;
        let perm = oddity_scores([&emb[2], &emb[0], &emb[1]]).map_err(e)?;
        for i in 0..3 {
            worst_inv = worst_inv.max((ss[i] - s[i]).abs());
        }
        worst_inv = worst_inv.max((perm[0] - s[2]).abs()).max((perm[1] - s[0]).abs()).max((perm[2] - s[1]).abs());
    }
    check(
        mismatches == 0 && softmax_mismatches == 0 && worst_inv <= 1e-12,
        format!(
            "10^4 triples: {mismatches} oracle mismatches, {softmax_mismatches} softmax mismatches, invariance err {worst_inv:.1e}"
        ),
    )
}

// ---------------------------------------------------------------- calibration

fn calibration() -> Outcome {
    let dir = tempfile::tempdir().map_err(e)?;
    let src = dir.path().join("src");
    std::fs::create_dir_all(&src).map_err(e)?;
    for i in 0..300 {
        let img = if i % 2 == 0 { fixtures::periodic_texture(16, 16, i) } else { fixtures::noise_image(16, 16, i) };
        image_io::save_png(&src.join(format!("s{i:03}.png")), &img).map_err(e)?;
    }
    let out = dir.path().join("ds");
    let opts = GenerateOptions { resize: Some((16, 16)), ..GenerateOptions::default() };
    let manifest = generate_dataset(&src, &out, &opts).map_err(e)?;

    let random = |id: &str, _: &Path| Ok(random_embedding(id, 16, 7));
    let report = evaluate(&manifest, &out, &random, 3).map_err(e)?;
    let (lo, hi) = binomial_central_interval(report.total, 1.0 / 3.0, 0.99);

    // Constructed set: both variants are the same image, so raw pixels single out the original.
    let mut constructed = manifest.clone();
    for rec in &mut constructed.records {
        rec.variant_paths[1] = rec.variant_paths[0].clone();
    }
    let pixels = |id: &str, path: &Path| Embedding::new(id, image_io::load_png(path)?.data().to_vec());
    let oracle = evaluate(&constructed, &out, &pixels, 3).map_err(e)?;
    check(
        report.total == 300 && (lo..=hi).contains(&report.correct) && oracle.accuracy == 1.0,
        format!(
            "random provider {}/300 correct (99% interval [{lo}, {hi}]); pixel oracle {:.3} on {}",
            report.correct, oracle.accuracy, oracle.total
        ),
    )
}

// ---------------------------------------------------------------- distinguish

fn distinguish() -> Outcome {
    let start = Instant::now();
    let cfg = BenchmarkConfig::standard();
    let report = run_benchmark(&cfg).map_err(e)?;
    let elapsed = start.elapsed();
    let per_seed = report
        .seeds
        .iter()
        .map(|s| format!("seed {}: {:.3} vs {:.3}", s.seed, s.distinguish.dist_accuracy, s.baseline.dist_accuracy))
        .collect::<Vec<_>>()
        .join("; ");
    check(
        report.seeds.len() == 3 && report.mean_gap >= 0.10 && elapsed < Duration::from_secs(1800),
        format!(
            "mean gap {:+.1} pp over {} seeds ({per_seed}); {} train images/class, {} test triplets; {elapsed:.0?}",
            100.0 * report.mean_gap,
            report.seeds.len(),
            cfg.train_per_class,
            report.test_triplets
        ),
    )
}

// ---------------------------------------------------------------- probe

fn probe_set(reveal: bool, seed: u64) -> PatchEmbeddingSet {
    let mut r = rng(seed);
    let (mut emb, mut coords) = (Vec::new(), Vec::new());
    for _ in 0..20 {
        let (mut e, mut c) = (Vec::new(), Vec::new());
        for y in 0..4u32 {
            for x in 0..4u32 {
                let mut v: Vec<f64> = (0..6).map(|_| r.random_range(0.0..1.0)).collect();
                if reveal {
                    v[4] = x as f64 / 3.0;
                    v[5] = y as f64 / 3.0;
                }
                e.push(v);
                c.push((x, y));
            }
        }
        emb.push(e);
        coords.push(c);
    }
    PatchEmbeddingSet::new(emb, coords).unwrap()
}

fn probe() -> Outcome {
    let cfg = ProbeConfig::default();
    let coords = cross_validate(&probe_set(true, 1), &cfg, 5).map_err(e)?;
    let noise = cross_validate(&probe_set(false, 2), &cfg, 5).map_err(e)?;
    let mut partition_ok = true;
    for n in [5, 20, 320, 1001] {
        let folds = fold_partition(n, 5, n as u64).map_err(e)?;
        let mut seen = vec![0; n];
        folds.iter().flatten().for_each(|&i| seen[i] += 1);
        partition_ok &= folds.len() == 5 && seen.iter().all(|&c| c == 1);
    }
    check(
        coords.mean < 0.05 && (noise.mean - 1.0 / 3.0).abs() <= 0.05 && partition_ok,
        format!(
            "coordinate embeddings {:.4}, noise embeddings {:.4} (target 1/3 ± 0.05), partitions {}",
            coords.mean,
            noise.mean,
            if partition_ok { "disjoint and exhaustive" } else { "BROKEN" }
        ),
    )
}

// ---------------------------------------------------------------- saliency

fn saliency() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut monotone = true;
    for seed in 0..5 {
        let mut cfg = ClassifierConfig::small((8, 8), 3, seed);
        cfg.layers = vec![LayerSpec::conv(4, 3, 1, 1), LayerSpec::Relu, LayerSpec::Pool];
        cfg.hidden = Some(6);
        let model = ToyClassifier::new(cfg).map_err(e)?;
        let x = uniform(&[3, 8, 8], 0.0, 1.0, &mut rng(50 + seed));
        for class in 0..3 {
            let a = class_gradient(&model, &x, class, Target::Logit).map_err(e)?;
            let n = fd_grad(&x, 1e-6, |t| model.logits(t).unwrap()[class]);
            for i in 0..64 {
                let fd = (0..3).map(|c| n[c * 64 + i].abs()).fold(0.0, f64::max);
                worst = worst.max((a[i] - fd).abs());
            }
        }
        let map = smoothgrad(&model, "x", &x, 0, &SmoothGradConfig { samples: 8, seed, ..Default::default() })
            .map_err(e)?;
        let masks: Vec<Vec<bool>> =
            [0.0, 0.15, 0.5, 1.0].iter().map(|&t| binary_mask(&map, t)).collect::<Result<_, _>>().map_err(e)?;
        monotone &= masks.windows(2).all(|w| w[1].iter().zip(&w[0]).all(|(hi, lo)| !hi || *lo));
    }
    check(
        worst < 1e-4 && monotone,
        format!("8x8 gradient vs finite differences max abs err {worst:.1e}; masks monotone: {monotone}"),
    )
}

// ---------------------------------------------------------------- protocol

fn protocol() -> Outcome {
    let mut problems = Vec::new();
    for n in [10, 100, 1000] {
        let m = stub_manifest(n + 10, n / 10 + 2);
        let s = build_schedule(&m, n, n as u64).map_err(e)?;
        let mut standard = 0;
        let mut ok = s.len() == trial_count(n);
        for t in &s.trials {
            match t.kind {
                TrialKind::Standard => standard += 1,
                TrialKind::Catch => ok &= standard % CATCH_EVERY == 0 && s.trials[t.index - 1].kind == TrialKind::Standard,
            }
        }
        let catches = s.trials.iter().filter(|t| t.kind == TrialKind::Catch).count();
        ok &= catches == n / CATCH_EVERY;
        for &b in &s.break_after {
            ok &= s.trials[..=b].iter().filter(|t| t.kind == TrialKind::Standard).count() % BREAK_EVERY == 0
                && s.trials[b].kind == TrialKind::Standard;
        }
        ok &= s.break_after.len() == n / BREAK_EVERY;
        let std_imgs: std::collections::HashSet<_> =
            s.trials.iter().filter(|t| t.kind == TrialKind::Standard).flat_map(|t| t.images.clone()).collect();
        ok &= s.trials.iter().filter(|t| t.kind == TrialKind::Catch).flat_map(|t| &t.images).all(|i| !std_imgs.contains(i));
        if !ok {
            problems.push(format!("n={n}"));
        }
    }

    let s = build_schedule(&stub_manifest(3000, 300), 3000, 17).map_err(e)?;
    let mut counts = [0f64; 3];
    s.trials.iter().filter(|t| t.kind == TrialKind::Standard).for_each(|t| counts[t.correct_index] += 1.0);
    let chi2: f64 = counts.iter().map(|c| (c - 1000.0).powi(2) / 1000.0).sum();
    // P(chi2_2 > x) = exp(-x/2)
    let p = (-chi2 / 2.0).exp();

    let mut session = Session::new("acc", build_schedule(&stub_manifest(10, 1), 10, 0).map_err(e)?);
    let validity: Vec<bool> = [1999.0, 2000.0, 2001.0]
        .iter()
        .enumerate()
        .map(|(k, &ms)| session.submit_response(k, Some(1), ms, None).map(|r| r.valid))
        .collect::<Result<_, _>>()
        .map_err(e)?;
    check(
        problems.is_empty() && p > 0.01 && validity == [true, true, false],
        format!(
            "schedules n=10/100/1000 {}; answer positions {counts:?} chi2 {chi2:.2} p {p:.3}; 1999/2000/2001 ms valid {validity:?}",
            if problems.is_empty() { "ok".to_string() } else { format!("broken at {}", problems.join(",")) }
        ),
    )
}

// ---------------------------------------------------------------- determinism

fn dir_hash(root: &Path) -> String {
    let mut files: Vec<_> = walk(root);
    files.sort();
    let mut acc = String::new();
    for f in files {
        acc.push_str(&f.strip_prefix(root).unwrap().to_string_lossy());
        acc.push_str(&dist_core::sha256_file(&f).unwrap());
    }
    sha256_hex(acc.as_bytes())
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    std::fs::read_dir(dir)
        .unwrap()
        .flat_map(|e| {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(&p)
            } else {
                vec![p]
            }
        })
        .collect()
}

fn determinism() -> Outcome {
    let net = FeatureNet::vgg_lite();
    let target = fixtures::periodic_texture(32, 32, 4);
    let synth_hash = || -> Result<String, String> {
        let r = synthesize(&target, &net, &SynthesisConfig::preset(10, 3)).map_err(e)?;
        Ok(sha256_hex(image_io::to_rgb(&r.image).map_err(e)?.as_raw()))
    };

    let dir = tempfile::tempdir().map_err(e)?;
    let src = dir.path().join("src");
    std::fs::create_dir_all(&src).map_err(e)?;
    for i in 0..4 {
        image_io::save_png(&src.join(format!("{i}.png")), &fixtures::periodic_texture(16, 16, i)).map_err(e)?;
    }
    let gen_hash = |name: &str, jobs: usize| -> Result<String, String> {
        let out = dir.path().join(name);
        let opts = GenerateOptions {
            resize: Some((16, 16)),
            synthesis: SynthesisConfig::approximate(0),
            base_seed: 11,
            catch_count: 1,
            jobs,
            ..GenerateOptions::default()
        };
        generate_dataset(&src, &out, &opts).map_err(e)?;
        DatasetManifest::load(&out.join(MANIFEST_FILE)).map_err(e)?;
        Ok(dir_hash(&out))
    };

    let items: Vec<LabeledItem> = (0..8)
        .map(|i| LabeledItem {
            id: format!("{i}"),
            image: fixtures::shape_texture_image(i % 2, 16, 16, i as u64),
            label: i % 2,
            source_class: i % 2,
        })
        .collect();
    let data = LabeledDataset::new(2, items).map_err(e)?;
    let train_hash = || -> Result<String, String> {
        let mut m = ToyClassifier::new(ClassifierConfig::small((16, 16), 2, 5)).map_err(e)?;
        train(&mut m, &data, &TrainConfig { epochs: 3, batch_size: 4, seed: 5, ..Default::default() }).map_err(e)?;
        let bytes: Vec<u8> = m.params().iter().flat_map(|p| p.data().iter().flat_map(|v| v.to_le_bytes())).collect();
        Ok(sha256_hex(&bytes))
    };

    let m = stub_manifest(200, 20);
    let sched_hash = || build_schedule(&m, 150, 8).and_then(|s| s.hash()).map_err(e);

    let pairs = [
        ("synthesize", synth_hash()?, synth_hash()?),
        ("gen-dataset", gen_hash("a", 1)?, gen_hash("b", 2)?),
        ("train-distinguish", train_hash()?, train_hash()?),
        ("build_schedule", sched_hash()?, sched_hash()?),
    ];
    let detail = pairs
        .iter()
        .map(|(n, a, b)| format!("{n} {}", if a == b { &a[..12] } else { "DIFFERS" }))
        .collect::<Vec<_>>()
        .join(", ");
    check(pairs.iter().all(|(_, a, b)| a == b), detail)
}

fn main() {
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [Criterion; 9] = [
        ("autodiff", autodiff),
        ("synthesis", synthesis),
        ("metric", metric),
        ("calibration", calibration),
        ("distinguish", distinguish),
        ("probe", probe),
        ("saliency", saliency),
        ("protocol", protocol),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        if !only.is_empty() && !only.iter().any(|o| name.contains(o.as_str())) {
            continue;
        }
        match f() {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
