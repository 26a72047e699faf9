//! Acceptance suite: one line per criterion, non-zero exit if any fails.
//!
//! Runs as a plain binary (`harness = false`) so every verdict is printed
//! in `cargo test` output.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use mftnet::data::{synth_generate, PlantChannels, SplitSpec, SynthSpec};
use mftnet::interpret::{
    channel_scores, deletion_test, gradient_x_input, AttributionMap, DeletionMode, LinearSurrogate,
};
use mftnet::layers::{self, Mode};
use mftnet::model::{build_model, ModelConfig, Variant};
use mftnet::training::{
    argmax, evaluate, train, train_subject, train_with, EpochRecord, Monitor, Silent, TrainConfig,
};
use mftnet::{verify, Graph, Model, Tensor, TrialSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = std::result::Result<String, String>;

enum Verdict {
    Pass,
    Fail,
    Note,
}

struct Line {
    verdict: Verdict,
    name: &'static str,
    detail: String,
    elapsed: Duration,
}

fn run(name: &'static str, limit: Option<Duration>, f: impl FnOnce() -> Check) -> Line {
    let t0 = Instant::now();
    let outcome = f();
    let elapsed = t0.elapsed();
    let (verdict, mut detail) = match outcome {
        Ok(d) => (Verdict::Pass, d),
        Err(d) => (Verdict::Fail, d),
    };
    if let Some(limit) = limit {
        if elapsed > limit {
            detail.push_str(&format!(
                "; exceeded {:.0}s budget (informational, debug-profile timings vary)",
                limit.as_secs_f64()
            ));
        }
    }
    let line = Line {
        verdict,
        name,
        detail,
        elapsed,
    };
    print_line(&line);
    line
}

fn print_line(l: &Line) {
    let tag = match l.verdict {
        Verdict::Pass => "PASS",
        Verdict::Fail => "FAIL",
        Verdict::Note => "NOTE",
    };
    println!(
        "[{tag}] {:<26} {} ({:.1}s)",
        l.name,
        l.detail,
        l.elapsed.as_secs_f64()
    );
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn synth(channels: usize, samples: usize, n_per_class: usize, snr: f64, seed: u64) -> TrialSet {
    synth_generate(&SynthSpec {
        n_per_class,
        channels,
        samples,
        seed,
        snr,
        ..SynthSpec::default()
    })
    .expect("valid synth spec")
    .0
}

fn model_for(channels: usize, samples: usize, variant: Variant) -> ModelConfig {
    ModelConfig {
        channels,
        samples,
        variant,
        ..ModelConfig::default()
    }
}

// ---------------------------------------------------------------------------

fn parameter_counts() -> Check {
    let count = |v: Variant| {
        build_model::<f32>(&ModelConfig::default().with_variant(v), 42)
            .map(|m| m.count_parameters().trainable)
            .map_err(e2s)
    };
    let full = count(Variant::Full)?;
    let base = count(Variant::EegnetBaseline)?;
    ensure(full == 16_096 && base == 3_274, || {
        format!("full {full} (want 16096), eegnet-baseline {base} (want 3274)")
    })?;
    Ok(format!("full {full}, eegnet-baseline {base}"))
}

fn gradient_verification() -> Check {
    let results = verify::full_suite::<f64>(42, verify::EPSILON).map_err(e2s)?;
    let layer_worst = results
        .iter()
        .filter(|r| !r.name.starts_with("model["))
        .map(|r| r.max_rel_error)
        .fold(0.0, f64::max);
    let model_worst = results
        .iter()
        .filter(|r| r.name.starts_with("model[") && !r.name.contains("key-bias"))
        .map(|r| r.max_rel_error)
        .fold(0.0, f64::max);
    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.passed())
        .map(|r| format!("{} {:.2e} > {:.0e}", r.name, r.max_rel_error, r.tolerance))
        .collect();
    ensure(failed.is_empty(), || failed.join("; "))?;
    Ok(format!(
        "{} checks at 64-bit; worst layer {layer_worst:.2e} (<= 1e-6), worst model {model_worst:.2e} (<= 1e-4)",
        results.len()
    ))
}

fn softmax_normalization() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut worst = 0.0f64;
    for i in 0..1000 {
        let n = rng.random_range(2..=12);
        let scale = [1.0, 10.0, 80.0][i % 3];
        let z: Vec<f64> = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
        let shift = rng.random_range(-100.0..100.0);
        let probs = |v: &[f64]| {
            let mut g = Graph::<f64>::no_grad();
            let x = g.constant(Tensor::from_vec(v.to_vec()));
            let p = layers::softmax(&mut g, x).expect("softmax");
            g.value(p).data().to_vec()
        };
        let p = probs(&z);
        let shifted: Vec<f64> = z.iter().map(|v| v + shift).collect();
        let q = probs(&shifted);
        let sum: f64 = p.iter().sum();
        worst = worst.max((sum - 1.0).abs());
        ensure(p.iter().all(|&v| v >= 0.0), || {
            format!("input {i}: negative probability")
        })?;
        ensure((sum - 1.0).abs() <= 1e-6, || {
            format!("input {i}: row sums to {sum}")
        })?;
        ensure(argmax(&p) == argmax(&q) && argmax(&p) == argmax(&z), || {
            format!("input {i}: argmax moved under a shift of {shift}")
        })?;
    }
    Ok(format!(
        "1000 inputs, max |sum - 1| = {worst:.1e}, argmax shift-invariant"
    ))
}

fn shape_pipeline() -> Check {
    let cfg = ModelConfig::default();
    let model = build_model::<f32>(&cfg, 42).map_err(e2s)?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::<f32>::new(
        vec![1, 32, 1000, 1],
        (0..32_000).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .map_err(e2s)?;
    let mut g = Graph::no_grad();
    let xv = g.constant(x);
    let out = model
        .forward(&mut g, xv, Mode::Infer, &mut rng)
        .map_err(e2s)?;
    let shape = |v: Option<mftnet::Var>| v.map(|v| g.shape(v).to_vec());
    let ms = shape(out.trace.multiscale);
    let tr = shape(out.trace.transformer);
    let fused = g.shape(out.trace.fused).to_vec();
    let feats = g.shape(out.trace.features).to_vec();
    ensure(ms == Some(vec![1, 32, 1000, 48]), || {
        format!("multi-scale {ms:?}")
    })?;
    ensure(tr == Some(vec![1, 32, 1000, 1]), || {
        format!("transformer {tr:?}")
    })?;
    ensure(fused == [1, 32, 1000, 49], || format!("fused {fused:?}"))?;
    ensure(feats == [1, 496] && cfg.flat_features() == 496, || {
        format!("features {feats:?}")
    })?;
    Ok("multi-scale 32x1000x48, transformer 32x1000x1, fused 32x1000x49, flat 496".into())
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .expect("sized")
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Naive references on `[B, C, T, F]` data, zero padding `(k-1)/2` before.
fn naive_temporal(x: &Tensor<f64>, w: &Tensor<f64>) -> Vec<f64> {
    let [b, c, t, fi] = x.shape().try_into().expect("4-d");
    let [k, _, fo] = w.shape().try_into().expect("3-d");
    let pl = (k - 1) / 2;
    let (xd, wd) = (x.data(), w.data());
    let mut out = vec![0.0; b * c * t * fo];
    for bi in 0..b {
        for ci in 0..c {
            for ti in 0..t {
                for o in 0..fo {
                    let mut acc = 0.0;
                    for j in 0..k {
                        let s = ti as isize + j as isize - pl as isize;
                        if s < 0 || s >= t as isize {
                            continue;
                        }
                        for f in 0..fi {
                            acc += xd[((bi * c + ci) * t + s as usize) * fi + f]
                                * wd[(j * fi + f) * fo + o];
                        }
                    }
                    out[((bi * c + ci) * t + ti) * fo + o] = acc;
                }
            }
        }
    }
    out
}

fn naive_spatial(x: &Tensor<f64>, w: &Tensor<f64>) -> Vec<f64> {
    let [b, c, t, fi] = x.shape().try_into().expect("4-d");
    let d = w.shape()[2];
    let (xd, wd) = (x.data(), w.data());
    let mut out = vec![0.0; b * t * fi * d];
    for bi in 0..b {
        for ti in 0..t {
            for f in 0..fi {
                for m in 0..d {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        acc += xd[((bi * c + ci) * t + ti) * fi + f] * wd[(ci * fi + f) * d + m];
                    }
                    out[(bi * t + ti) * fi * d + f * d + m] = acc;
                }
            }
        }
    }
    out
}

fn naive_separable(x: &Tensor<f64>, dw: &Tensor<f64>, pw: &Tensor<f64>) -> Vec<f64> {
    let [b, h, t, fi] = x.shape().try_into().expect("4-d");
    let k = dw.shape()[0];
    let fo = pw.shape()[1];
    let pl = (k - 1) / 2;
    let (xd, dd, pd) = (x.data(), dw.data(), pw.data());
    let mut out = vec![0.0; b * h * t * fo];
    for r in 0..b * h {
        for ti in 0..t {
            for o in 0..fo {
                let mut acc = 0.0;
                for f in 0..fi {
                    let mut depth = 0.0;
                    for j in 0..k {
                        let s = ti as isize + j as isize - pl as isize;
                        if s >= 0 && s < t as isize {
                            depth += xd[(r * t + s as usize) * fi + f] * dd[j * fi + f];
                        }
                    }
                    acc += depth * pd[f * fo + o];
                }
                out[(r * t + ti) * fo + o] = acc;
            }
        }
    }
    out
}

fn convolution_oracles() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let (mut wt, mut ws, mut wp) = (0.0f64, 0.0f64, 0.0f64);
    for i in 0..50 {
        let b = rng.random_range(1..=3);
        let c = rng.random_range(1..=5);
        let t = rng.random_range(4..=24);
        let fi = rng.random_range(1..=4);
        let fo = rng.random_range(1..=4);
        let k = 2 * rng.random_range(0..=(t - 1) / 2) + 1;
        let x = rand_tensor(&mut rng, &[b, c, t, fi]);
        let w = rand_tensor(&mut rng, &[k, fi, fo]);
        let mut g = Graph::no_grad();
        let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
        let y = layers::conv_temporal(&mut g, xv, wv).map_err(e2s)?;
        wt = wt.max(max_abs_diff(g.value(y).data(), &naive_temporal(&x, &w)));

        let d = rng.random_range(1..=3);
        let ws_k = rand_tensor(&mut rng, &[c, fi, d]);
        let kv = g.constant(ws_k.clone());
        let y = layers::depthwise_conv_spatial(&mut g, xv, kv).map_err(e2s)?;
        ws = ws.max(max_abs_diff(g.value(y).data(), &naive_spatial(&x, &ws_k)));

        let ks = rng.random_range(1..=t);
        let dw = rand_tensor(&mut rng, &[ks, fi]);
        let pw = rand_tensor(&mut rng, &[fi, fo]);
        let (dv, pv) = (g.constant(dw.clone()), g.constant(pw.clone()));
        let y = layers::separable_conv_temporal(&mut g, xv, dv, pv).map_err(e2s)?;
        wp = wp.max(max_abs_diff(
            g.value(y).data(),
            &naive_separable(&x, &dw, &pw),
        ));
        ensure(wt <= 1e-6 && ws <= 1e-6 && wp <= 1e-6, || {
            format!("instance {i}: temporal {wt:.1e}, spatial {ws:.1e}, separable {wp:.1e}")
        })?;
    }
    Ok(format!(
        "50 instances each; max |diff| temporal {wt:.1e}, depthwise-spatial {ws:.1e}, separable {wp:.1e}"
    ))
}

struct StopAt(f64);

impl Monitor for StopAt {
    fn should_stop(&mut self, r: &EpochRecord) -> bool {
        r.train_acc >= self.0
    }
}

struct ConstantValLoss;

impl Monitor for ConstantValLoss {
    fn monitored_loss(&mut self, _epoch: usize, _loss: f64) -> f64 {
        1.0
    }
}

fn training_loop() -> Check {
    // High-SNR set, 64 trials.
    let data = synth(8, 256, 32, 4.0, 42);
    let mut model = build_model::<f32>(&model_for(8, 256, Variant::Full), 42).map_err(e2s)?;
    let cfg = TrainConfig {
        epochs: 100,
        ..TrainConfig::default()
    };
    let h = train_with(&mut model, &data, None, &cfg, &mut StopAt(0.95)).map_err(e2s)?;
    let last = h.epochs.last().ok_or("no epochs")?;
    ensure(last.train_acc >= 0.95, || {
        format!("train accuracy {:.3} after 100 epochs", last.train_acc)
    })?;
    let reached = last.epoch;

    // Constant monitored loss: halve after 5 flat epochs, floor at 1e-4.
    let tiny = verify::small_model_config(Variant::EegnetBaseline);
    let small = synth(4, 32, 8, 4.0, 1);
    let mut m = build_model::<f32>(&tiny, 1).map_err(e2s)?;
    let cfg = TrainConfig {
        epochs: 40,
        batch_size: 8,
        ..TrainConfig::default()
    };
    let h = train_with(&mut m, &small, Some(&small), &cfg, &mut ConstantValLoss).map_err(e2s)?;
    let lrs: Vec<f64> = h.epochs.iter().map(|e| e.lr).collect();
    ensure(lrs[..6].iter().all(|&l| l == 1e-3), || {
        format!("epochs 1-6 lr {:?}", &lrs[..6])
    })?;
    ensure(lrs[6] == 5e-4, || format!("epoch 7 lr {}", lrs[6]))?;
    let min = lrs.iter().copied().fold(f64::INFINITY, f64::min);
    ensure(min >= 1e-4 && *lrs.last().unwrap() == 1e-4, || {
        format!("lr floor: min {min}, last {}", lrs.last().unwrap())
    })?;

    // Restored checkpoint reproduces the best validation accuracy.
    let tr = synth(4, 128, 24, 1.0, 7);
    let va = synth(4, 128, 12, 0.5, 8);
    let mut m = build_model::<f32>(&model_for(4, 128, Variant::Full), 3).map_err(e2s)?;
    let cfg = TrainConfig {
        epochs: 12,
        ..TrainConfig::default()
    };
    let h = train(&mut m, &tr, Some(&va), &cfg).map_err(e2s)?;
    let best = h.best_val_acc.ok_or("no checkpoint")?;
    let again = evaluate(&m, &va, 16).map_err(e2s)?.accuracy;
    ensure(h.restored && again == best, || {
        format!("restored accuracy {again} vs best {best}")
    })?;
    let final_acc = h.epochs.last().and_then(|e| e.val_acc).unwrap_or(f64::NAN);
    Ok(format!(
        "95% train accuracy at epoch {reached}; lr 1e-3 x6 then 5e-4 at epoch 7, floor 1e-4; \
         restore reproduces best val acc {best:.4} (epoch {}, final epoch {final_acc:.4})",
        h.best_epoch.unwrap_or(0)
    ))
}

fn ablation_structure() -> Check {
    let data = synth(32, 1000, 4, 2.0, 42);
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 4,
        ..TrainConfig::default()
    };
    let mut counts = Vec::new();
    for v in Variant::ALL {
        let mut m = build_model::<f32>(&ModelConfig::default().with_variant(v), 42).map_err(e2s)?;
        let h = train(&mut m, &data, None, &cfg).map_err(e2s)?;
        ensure(
            h.epochs.len() == 1 && h.epochs[0].train_loss.is_finite(),
            || format!("{v}: epoch did not complete"),
        )?;
        counts.push((v, m.count_parameters().trainable));
    }
    let p = |v: Variant| counts.iter().find(|(w, _)| *w == v).map(|c| c.1).unwrap();
    let (b, nt, nm, f) = (
        p(Variant::EegnetBaseline),
        p(Variant::NoTransformer),
        p(Variant::NoMultiscale),
        p(Variant::Full),
    );
    ensure(b < nt && b < nm && nt < f && nm < f, || {
        format!("ordering violated: {counts:?}")
    })?;
    Ok(format!(
        "all four trained one epoch at 32x1000; params baseline {b} < no-transformer {nt}, no-multiscale {nm} < full {f}"
    ))
}

fn linear_surrogate() -> std::result::Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (c, t) = (rng.random_range(1..=6), rng.random_range(1..=20));
        let w = rand_tensor(&mut rng, &[c * t, 2]);
        let bias = rand_tensor(&mut rng, &[2]);
        let x = rand_tensor(&mut rng, &[c, t]);
        let target = rng.random_range(0..2);
        let s = LinearSurrogate::new(w.clone(), bias, c, t).map_err(e2s)?;
        let map = gradient_x_input(&s, &x, target).map_err(e2s)?;
        for (i, v) in map.values.iter().enumerate() {
            worst = worst.max((v - w.data()[i * 2 + target] * x.data()[i]).abs());
        }
    }
    Ok(worst)
}

struct Planted {
    model: Model<f32>,
    data: TrialSet,
    plant: PlantChannels,
}

fn planted(seed: u64) -> std::result::Result<Planted, String> {
    let (c, t) = (16, 128);
    let (data, plant) = synth_generate(&SynthSpec {
        n_per_class: 24,
        channels: c,
        samples: t,
        seed,
        snr: 2.0,
        ..SynthSpec::default()
    })
    .map_err(e2s)?;
    let mut model = build_model::<f32>(&model_for(c, t, Variant::Full), seed).map_err(e2s)?;
    // The full interpretability fine-tune budget; stopping once the training
    // set separates leaves noise-channel weights near their initial scale.
    let cfg = TrainConfig {
        epochs: 50,
        seed,
        ..TrainConfig::default()
    };
    train_with(&mut model, &data, None, &cfg, &mut Silent).map_err(e2s)?;
    Ok(Planted { model, data, plant })
}

fn correct_maps(p: &Planted) -> std::result::Result<Vec<AttributionMap>, String> {
    let idx: Vec<usize> = (0..p.data.len()).collect();
    let targets: Vec<usize> = p.data.labels().iter().map(|&l| l as usize).collect();
    let maps =
        mftnet::interpret::attribute_trials(&p.model, &p.data, &idx, &targets, 32).map_err(e2s)?;
    Ok(maps
        .into_iter()
        .filter(|m| m.predicted == m.target)
        .collect())
}

fn interpretability() -> Check {
    let linear = linear_surrogate()?;
    ensure(linear <= 1e-6, || {
        format!("linear surrogate off by {linear:.1e}")
    })?;

    let fractions: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
    let mut hits = 0;
    let mut ranks = Vec::new();
    let mut margins = Vec::new();
    for seed in 0..10u64 {
        let p = planted(seed)?;
        let scores = channel_scores(&correct_maps(&p)?).map_err(e2s)?;
        let quartile = p.data.channels() / 4;
        let worst = p
            .plant
            .all()
            .iter()
            .map(|&c| scores.rank_of(c))
            .max()
            .unwrap();
        ranks.push(worst);
        if worst < quartile {
            hits += 1;
        }
        // Pooled over both classes: with one plant per class the model may
        // decide one class by absence of the other plant, so a class-specific
        // curve can stay flat while the attribution is still correct.
        let curve = |mode| {
            deletion_test(&p.model, &p.data, &scores, &fractions, mode, None, 32)
                .map(|c| c.auc())
                .map_err(e2s)
        };
        let most = curve(DeletionMode::MostImportant)?;
        let least = curve(DeletionMode::LeastImportant)?;
        margins.push(least - most);
    }
    ensure(hits >= 9, || {
        format!("plants in top quartile for {hits}/10 seeds (worst plant rank per seed {ranks:?})")
    })?;
    let margin = margins.iter().copied().fold(f64::INFINITY, f64::min);
    ensure(margin >= 0.05, || {
        format!("deletion AUC margin {margin:.3} < 0.05 (per seed {margins:.3?})")
    })?;
    Ok(format!(
        "linear surrogate max err {linear:.1e}; plants in top quartile for {hits}/10 seeds; \
         deletion AUC least - most >= {margin:.3} on every one of 10 seeds"
    ))
}

fn cli(args: &[&str]) -> std::result::Result<(), String> {
    let code = mftnet::cli::main_with(std::iter::once("mftnet").chain(args.iter().copied()));
    ensure(code == 0, || {
        format!("`mftnet {}` exited {code}", args.join(" "))
    })
}

fn protocol_determinism() -> Check {
    let dir = tempfile::tempdir().map_err(e2s)?;
    let root = dir.path();
    let cfg = root.join("run.json");
    std::fs::write(
        &cfg,
        r#"{"train": {"epochs": 3},
            "split": {"test_sessions": [2, 3]},
            "synth": {"subjects": 2, "sessions": 3, "n_per_class": 12, "channels": 8, "samples": 128, "snr": 2.0}}"#,
    )
    .map_err(e2s)?;
    let s = |p: &Path| p.to_str().expect("utf-8 path").to_string();
    let data = root.join("data");
    let (a, b) = (root.join("a"), root.join("b"));
    cli(&[
        "synth",
        "-q",
        "--config",
        &s(&cfg),
        "--seed",
        "42",
        "--out",
        &s(&data),
    ])?;
    for out in [&a, &b] {
        cli(&[
            "protocol",
            "-q",
            "--config",
            &s(&cfg),
            "--seed",
            "42",
            "--data",
            &s(&data),
            "--out",
            &s(out),
        ])?;
    }
    let read = |p: PathBuf| std::fs::read(p).map_err(e2s);
    let (ca, cb) = (read(a.join("results.csv"))?, read(b.join("results.csv"))?);
    ensure(ca == cb, || "results.csv differs between runs".into())?;
    let manifest = read(a.join("manifest.json"))?;
    ensure(String::from_utf8_lossy(&manifest).contains("crc32"), || {
        "manifest lacks input checksums".into()
    })?;
    Ok(format!(
        "two `protocol --seed 42` runs: results.csv byte-identical ({} bytes, {} rows)",
        ca.len(),
        ca.iter().filter(|&&c| c == b'\n').count() - 1
    ))
}

/// Converted recordings, if present: `MFTNET_DATA` or `data/shu` under the
/// workspace root.
fn real_data_dir() -> Option<PathBuf> {
    let candidates = [
        std::env::var_os("MFTNET_DATA").map(PathBuf::from),
        Some(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/shu")),
    ];
    candidates.into_iter().flatten().find(|p| {
        std::fs::read_dir(p).is_ok_and(|mut d| {
            d.any(|e| e.is_ok_and(|e| e.path().extension().is_some_and(|x| x == "etf")))
        })
    })
}

fn real_data_smoke(dir: &Path) -> Check {
    let corpus = mftnet::data::load_corpus(dir).map_err(e2s)?;
    let (&subject, sessions) = corpus.iter().next().ok_or("empty corpus")?;
    let first = sessions.values().next().ok_or("no sessions")?;
    let mc = model_for(first.channels(), first.samples(), Variant::Full);
    let (_, run, _) = train_subject::<f32>(
        subject,
        sessions,
        &mc,
        &TrainConfig::default(),
        &SplitSpec::default(),
        42,
        &mut Silent,
    )
    .map_err(e2s)?;
    let above = run.sessions.iter().filter(|r| r.accuracy > 0.5).count();
    let accs: Vec<String> = run
        .sessions
        .iter()
        .map(|r| format!("S{} {:.1}%", r.session, 100.0 * r.accuracy))
        .collect();
    ensure(above >= 2, || {
        format!(
            "subject {subject}: only {above} sessions above chance ({})",
            accs.join(", ")
        )
    })?;
    Ok(format!("subject {subject}: {}", accs.join(", ")))
}

fn main() {
    // `cargo test -- <filter>` passes arguments; only a bare run or an
    // explicit "acceptance" filter executes the suite.
    let args: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    if !args.is_empty() && !args.iter().any(|a| "acceptance".contains(a.as_str())) {
        return;
    }
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    println!("acceptance criteria");
    let secs = Duration::from_secs;
    // `MFTNET_ACCEPTANCE=name,name` restricts the run to those criteria.
    let only: Option<Vec<String>> = std::env::var("MFTNET_ACCEPTANCE")
        .ok()
        .map(|v| v.split(',').map(|s| s.trim().to_string()).collect());
    let wanted = |name: &str| only.as_ref().is_none_or(|o| o.iter().any(|n| n == name));
    let criteria: [(&'static str, Option<Duration>, fn() -> Check); 9] = [
        ("parameter-count", Some(secs(1)), parameter_counts),
        (
            "gradient-verification",
            Some(secs(120)),
            gradient_verification,
        ),
        ("softmax-normalization", None, softmax_normalization),
        ("shape-pipeline", None, shape_pipeline),
        ("convolution-oracles", None, convolution_oracles),
        ("training-loop", Some(secs(300)), training_loop),
        ("ablation-structure", None, ablation_structure),
        ("interpretability", None, interpretability),
        ("protocol-determinism", None, protocol_determinism),
    ];
    let mut lines: Vec<Line> = criteria
        .into_iter()
        .filter(|(name, _, _)| wanted(name))
        .map(|(name, limit, f)| run(name, limit, f))
        .collect();
    if !wanted("real-data-smoke") {
        return finish(lines);
    }
    match real_data_dir() {
        Some(dir) => lines.push(run("real-data-smoke", None, || real_data_smoke(&dir))),
        None => {
            let l = Line {
                verdict: Verdict::Note,
                name: "headline-accuracy",
                detail:
                    "not reproducible at desk scale: the 25-subject cross-session figure needs the \
                         converted recordings (`mftnet protocol --data <dir> --precision 32`); \
                         smoke criterion skipped, no .etf files under $MFTNET_DATA or data/shu"
                        .into(),
                elapsed: Duration::ZERO,
            };
            print_line(&l);
            lines.push(l);
        }
    }
    finish(lines);
}

fn finish(lines: Vec<Line>) {
    let failed = lines
        .iter()
        .filter(|l| matches!(l.verdict, Verdict::Fail))
        .count();
    let passed = lines
        .iter()
        .filter(|l| matches!(l.verdict, Verdict::Pass))
        .count();
    println!("acceptance: {passed} passed, {failed} failed");
    if failed > 0 {
        std::process::exit(1);
    }
}
