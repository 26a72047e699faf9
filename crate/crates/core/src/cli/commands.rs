use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{InputChecksum, Manifest, RunConfig};
use super::{worker_threads, Command};
use crate::data::{self, Corpus, Montage, Sidecar, SynthSpec, TrialSet};
use crate::error::{Error, Result};
use crate::interpret::{self, export, ClassMap, DeletionCurve, DeletionMode};
use crate::model::{self, Model, Variant};
use crate::tensor::{Scalar, Tensor};
use crate::training::protocol::mean_std;
use crate::training::{self, EpochRecord, Monitor};
use crate::verify;

macro_rules! say {
    ($run:expr, $($arg:tt)*) => {
        if !$run.quiet {
            println!($($arg)*);
        }
    };
}

/// Output directory bookkeeping for one run.
struct Run {
    quiet: bool,
    cfg: RunConfig,
    command: &'static str,
    argv: Vec<String>,
    threads: usize,
    inputs: Vec<InputChecksum>,
    outputs: Vec<String>,
}

impl Run {
    fn new(cfg: RunConfig, command: &'static str, argv: Vec<String>, quiet: bool) -> Result<Self> {
        fs::create_dir_all(&cfg.out)?;
        if !quiet {
            println!(
                "{command}: resolved config\n{}",
                serde_json::to_string_pretty(&cfg)?
            );
        }
        Ok(Self {
            quiet,
            cfg,
            command,
            argv,
            threads: worker_threads()?,
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.cfg.out.join(name)
    }

    fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
        fs::write(self.path(name), bytes)?;
        self.outputs.push(name.to_string());
        Ok(())
    }

    fn write_json<T: serde::Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let text = serde_json::to_string_pretty(value)?;
        self.write(name, text)
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(InputChecksum::of(path)?);
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        let cfg = self.cfg.clone();
        self.write_json("config.json", &cfg)?;
        self.outputs.push("manifest.json".into());
        let path = self.path("manifest.json");
        let manifest = Manifest {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: self.command.into(),
            argv: self.argv,
            seed: cfg.seed,
            threads: self.threads,
            config: cfg,
            inputs: self.inputs,
            outputs: self.outputs,
        };
        fs::write(path, serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    /// Loads `--data`, restricted to `--subject` when given. The model's
    /// electrode and sample counts follow the data.
    fn corpus(&mut self) -> Result<Corpus> {
        let dir = self.cfg.data_dir()?.to_path_buf();
        let mut files: Vec<PathBuf> = fs::read_dir(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "etf"))
            .collect();
        files.sort();
        for f in &files {
            self.input(f)?;
        }
        let mut corpus = data::load_corpus(&dir)?;
        if let Some(s) = self.cfg.subject {
            corpus.retain(|&k, _| k == s);
            if corpus.is_empty() {
                return Err(Error::Data(format!(
                    "subject {s} not found in {}",
                    dir.display()
                )));
            }
        }
        let first = corpus
            .values()
            .flat_map(|m| m.values())
            .next()
            .ok_or_else(|| Error::Data(format!("no trial files in {}", dir.display())))?;
        let (c, t) = (first.channels(), first.samples());
        if (c, t) != (self.cfg.model.channels, self.cfg.model.samples) {
            if !self.quiet {
                eprintln!(
                    "note: data is {c}x{t}; model resized from {}x{}",
                    self.cfg.model.channels, self.cfg.model.samples
                );
            }
            self.cfg.model.channels = c;
            self.cfg.model.samples = t;
            self.cfg.model.validate()?;
        }
        Ok(corpus)
    }

    fn montage(&mut self, channels: usize) -> Result<Montage> {
        let m = match self.cfg.montage.clone() {
            Some(p) => {
                self.input(&p)?;
                Montage::load(&p)?
            }
            None => Montage::numbered(channels),
        };
        m.check_channels(channels)?;
        Ok(m)
    }

    fn checkpoint_or_new<F: Scalar>(&mut self) -> Result<Model<F>> {
        match self.cfg.checkpoint.clone() {
            Some(p) => {
                self.input(&p)?;
                let m = model::load_checkpoint::<F>(&p)?;
                self.cfg.model = m.config().clone();
                Ok(m)
            }
            None => model::build_model(&self.cfg.model, self.cfg.seed),
        }
    }
}

/// Epoch lines on stderr.
struct Progress {
    total: usize,
    quiet: bool,
}

impl Monitor for Progress {
    fn on_epoch(&mut self, r: &EpochRecord) {
        if self.quiet {
            return;
        }
        let val = match (r.val_loss, r.val_acc) {
            (Some(l), Some(a)) => format!("  val loss {l:.4} acc {:.1}%", 100.0 * a),
            _ => String::new(),
        };
        eprintln!(
            "epoch {:>3}/{}  loss {:.4} acc {:.1}%{val}  lr {:.2e}",
            r.epoch,
            self.total,
            r.train_loss,
            100.0 * r.train_acc,
            r.lr
        );
    }
}

pub fn dispatch<F: Scalar>(
    command: &Command,
    cfg: RunConfig,
    argv: Vec<String>,
    quiet: bool,
) -> Result<()> {
    let mut run = Run::new(cfg, command.name(), argv, quiet)?;
    match command {
        Command::Train => train::<F>(&mut run)?,
        Command::Protocol => protocol::<F>(&mut run)?,
        Command::Ablate => ablate::<F>(&mut run)?,
        Command::Interpret { .. } => interpret_cmd::<F>(&mut run)?,
        Command::DeletionTest { .. } => deletion::<F>(&mut run)?,
        Command::Params => params::<F>(&mut run)?,
        Command::Gradcheck => gradcheck::<F>(&mut run)?,
        Command::Synth { .. } => synth(&mut run)?,
        Command::Latency { .. } => latency::<F>(&mut run)?,
    }
    run.finish()
}

fn pick_subject(corpus: &Corpus) -> Result<u32> {
    let mut keys = corpus.keys();
    match (keys.next(), keys.next()) {
        (Some(&s), None) => Ok(s),
        _ => Err(Error::Config(format!(
            "data holds {} subjects; choose one with --subject",
            corpus.len()
        ))),
    }
}

fn train<F: Scalar>(run: &mut Run) -> Result<()> {
    let corpus = run.corpus()?;
    let subject = pick_subject(&corpus)?;
    let mut split = run.cfg.split.clone();
    if let Some(s) = run.cfg.session {
        split.train_session = s;
        split.test_sessions.retain(|&t| t != s);
    }
    let cfg = &run.cfg;
    let mut monitor = Progress {
        total: cfg.train.epochs,
        quiet: run.quiet,
    };
    let (model, result, warnings) = training::train_subject::<F>(
        subject,
        &corpus[&subject],
        &cfg.model,
        &cfg.train,
        &split,
        cfg.seed,
        &mut monitor,
    )?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    let h = &result.history;
    say!(
        run,
        "subject {subject}: best epoch {} (val acc {:.1}%), restored {}",
        h.best_epoch.map_or("-".into(), |e| e.to_string()),
        100.0 * h.best_val_acc.unwrap_or(f64::NAN),
        h.restored
    );
    let mut csv = String::from("subject,session,accuracy,n_trials\n");
    for r in &result.sessions {
        say!(
            run,
            "  session {}: {:.1}% of {} trials",
            r.session,
            100.0 * r.accuracy,
            r.n_trials
        );
        writeln!(
            csv,
            "{},{},{:.6},{}",
            r.subject, r.session, r.accuracy, r.n_trials
        )
        .expect("string write");
    }
    model::save_checkpoint(&model, run.path("model.mftw"))?;
    run.outputs.push("model.mftw".into());
    run.write("results.csv", csv)?;
    run.write_json("history.json", &result)
}

fn protocol<F: Scalar>(run: &mut Run) -> Result<()> {
    let corpus = run.corpus()?;
    let cfg = run.cfg.clone();
    let t0 = Instant::now();
    let result = training::run_protocol::<F>(
        &corpus,
        &cfg.model,
        &cfg.train,
        &cfg.split,
        cfg.seed,
        run.threads,
    )?;
    for w in &result.warnings {
        eprintln!("warning: {w}");
    }
    let summary = result.summary(cfg.seed, &cfg.model, &cfg.train, &cfg.split);
    let sessions: Vec<u32> = summary.per_session.keys().copied().collect();
    let mut table = format!("{:<8}", "subject");
    for s in &sessions {
        write!(table, "{:>8}", format!("S{s}")).expect("string write");
    }
    table.push_str("    mean\n");
    for sub in &result.subjects {
        write!(table, "{:<8}", sub.subject).expect("string write");
        for s in &sessions {
            let cell = sub
                .sessions
                .iter()
                .find(|r| r.session == *s)
                .map_or("-".to_string(), |r| format!("{:.1}", 100.0 * r.accuracy));
            write!(table, "{cell:>8}").expect("string write");
        }
        let m = summary
            .per_subject
            .iter()
            .find(|m| m.subject == sub.subject);
        let cell = m.map_or("-".to_string(), |m| {
            format!("{:.1}", 100.0 * m.mean_accuracy)
        });
        writeln!(table, "{cell:>8}").expect("string write");
    }
    writeln!(
        table,
        "{} ({}) over {} subjects, accuracy % mean ± population std, {:.1}s",
        cfg.model.variant,
        summary.formatted,
        summary.n_subjects,
        t0.elapsed().as_secs_f64()
    )
    .expect("string write");
    say!(run, "{}", table.trim_end());
    run.write("results.csv", result.to_csv())?;
    run.write("table.txt", table)?;
    run.write_json("summary.json", &summary)?;
    run.write_json("histories.json", &result.subjects)
}

fn ablate<F: Scalar>(run: &mut Run) -> Result<()> {
    let corpus = match run.cfg.data {
        Some(_) => Some(run.corpus()?),
        None => None,
    };
    let cfg = run.cfg.clone();
    let mut csv =
        String::from("variant,multiscale,transformer,trainable_params,mean_accuracy,std\n");
    let mut table = format!(
        "{:<16} {:^11} {:^11} {:>8}  {}\n",
        "variant", "multi-scale", "transformer", "params", "accuracy"
    );
    let mut summaries = BTreeMap::new();
    for variant in Variant::ALL {
        let m = model::build_model::<F>(&cfg.model.clone().with_variant(variant), cfg.seed)?;
        let params = m.count_parameters().trainable;
        let (acc_cell, mean, std) = match &corpus {
            Some(c) => {
                let mc = cfg.model.clone().with_variant(variant);
                let r = training::run_protocol::<F>(
                    c,
                    &mc,
                    &cfg.train,
                    &cfg.split,
                    cfg.seed,
                    run.threads,
                )?;
                let s = r.summary(cfg.seed, &mc, &cfg.train, &cfg.split);
                let out = (s.formatted.clone(), s.grand_mean, s.std);
                summaries.insert(variant.as_str(), s);
                out
            }
            None => ("-".to_string(), f64::NAN, f64::NAN),
        };
        let tick = |b: bool| if b { "✓" } else { "" };
        writeln!(
            table,
            "{:<16} {:^11} {:^11} {:>8}  {acc_cell}",
            variant.as_str(),
            tick(variant.has_multiscale()),
            tick(variant.has_transformer()),
            params
        )
        .expect("string write");
        writeln!(
            csv,
            "{},{},{},{params},{mean:.6},{std:.6}",
            variant.as_str(),
            variant.has_multiscale(),
            variant.has_transformer()
        )
        .expect("string write");
    }
    say!(run, "{}", table.trim_end());
    run.write("ablation.csv", csv)?;
    run.write("ablation.txt", table)?;
    if !summaries.is_empty() {
        run.write_json("ablation.json", &summaries)?;
    }
    Ok(())
}

/// The subject's trials for attribution: `--session`, else the training session.
fn interpretation_trials(run: &mut Run) -> Result<TrialSet> {
    let corpus = run.corpus()?;
    let subject = pick_subject(&corpus)?;
    let session = run.cfg.session.unwrap_or(run.cfg.split.train_session);
    corpus[&subject]
        .get(&session)
        .cloned()
        .ok_or_else(|| Error::Data(format!("subject {subject} has no session {session}")))
}

fn finetuned<F: Scalar>(run: &mut Run, trials: &TrialSet) -> Result<Model<F>> {
    let mut model = run.checkpoint_or_new::<F>()?;
    if run.cfg.checkpoint.is_none() {
        eprintln!("note: no --checkpoint, fine-tuning from a fresh initialization");
    }
    let epochs = run.cfg.interpret.finetune_epochs;
    if epochs > 0 {
        let cfg = training::TrainConfig {
            epochs,
            restore_best: false,
            ..run.cfg.train.clone()
        };
        training::train_with(
            &mut model,
            trials,
            None,
            &cfg,
            &mut Progress {
                total: epochs,
                quiet: run.quiet,
            },
        )?;
    }
    Ok(model)
}

fn class_maps<F: Scalar>(run: &Run, model: &Model<F>, trials: &TrialSet) -> Result<Vec<ClassMap>> {
    (0..model.config().classes)
        .map(|k| interpret::class_average_map(model, trials, k, run.cfg.interpret.batch_size))
        .collect()
}

fn interpret_cmd<F: Scalar>(run: &mut Run) -> Result<()> {
    let trials = interpretation_trials(run)?;
    let model = finetuned::<F>(run, &trials)?;
    let montage = run.montage(trials.channels())?;
    let maps = class_maps(run, &model, &trials)?;
    for m in &maps {
        let top: Vec<&str> = m
            .scores
            .ranking
            .iter()
            .take(8)
            .map(|&c| montage.names()[c].as_str())
            .collect();
        say!(
            run,
            "class {} ({} correct trials): top channels {}",
            m.class,
            m.n_trials,
            top.join(" ")
        );
        run.write(
            &format!("scores_class{}.csv", m.class),
            export::scores_csv(&m.scores, &montage)?,
        )?;
        run.write(
            &format!("map_class{}.csv", m.class),
            export::map_csv(m, &montage)?,
        )?;
    }
    let all: Vec<_> = maps
        .iter()
        .map(|m| (m.class, m.n_trials, &m.scores))
        .collect();
    run.write_json("attribution.json", &all)?;
    model::save_checkpoint(&model, run.path("finetuned.mftw"))?;
    run.outputs.push("finetuned.mftw".into());
    Ok(())
}

fn deletion<F: Scalar>(run: &mut Run) -> Result<()> {
    let trials = interpretation_trials(run)?;
    let model = if run.cfg.checkpoint.is_some() {
        run.checkpoint_or_new::<F>()?
    } else {
        finetuned::<F>(run, &trials)?
    };
    let maps = class_maps(run, &model, &trials)?;
    let fractions = run.cfg.interpret.fractions.clone();
    let mut curves: Vec<DeletionCurve> = Vec::new();
    say!(
        run,
        "{:<6} {:<16} {:>7} {:>8}",
        "class",
        "mode",
        "trials",
        "auc"
    );
    for m in &maps {
        for mode in [DeletionMode::MostImportant, DeletionMode::LeastImportant] {
            let c = interpret::deletion_test(
                &model,
                &trials,
                &m.scores,
                &fractions,
                mode,
                Some(m.class),
                run.cfg.interpret.batch_size,
            )?;
            say!(
                run,
                "{:<6} {:<16} {:>7} {:>8.4}",
                m.class,
                mode.as_str(),
                c.n_trials,
                c.auc()
            );
            curves.push(c);
        }
    }
    run.write("deletion.csv", export::deletion_csv(&curves))?;
    let aucs: Vec<f64> = curves.iter().map(DeletionCurve::auc).collect();
    run.write_json(
        "deletion.json",
        &serde_json::json!({ "curves": curves, "auc": aucs }),
    )
}

fn params<F: Scalar>(run: &mut Run) -> Result<()> {
    let m = model::build_model::<F>(&run.cfg.model, run.cfg.seed)?;
    let count = m.count_parameters();
    let mut out = format!("{:<44} {:<16} {:>7}\n", "parameter", "shape", "count");
    for e in &count.breakdown {
        let mark = if e.trainable { "" } else { " (frozen)" };
        writeln!(
            out,
            "{:<44} {:<16} {:>7}{mark}",
            e.name,
            format!("{:?}", e.shape),
            e.count
        )
        .expect("string write");
    }
    writeln!(
        out,
        "variant {}: {} trainable, {} non-trainable",
        m.variant(),
        count.trainable,
        count.non_trainable
    )
    .expect("string write");
    say!(run, "{}", out.trim_end());
    run.write("params.txt", out)?;
    run.write_json("params.json", &count)
}

fn gradcheck<F: Scalar>(run: &mut Run) -> Result<()> {
    let exact = F::DTYPE == crate::tensor::DType::F64;
    let epsilon = if exact { verify::EPSILON } else { 1e-2 };
    let results = verify::full_suite::<F>(run.cfg.seed, epsilon)?;
    let mut out = format!(
        "{:<40} {:>12} {:>10}  result\n",
        "check", "max rel err", "tolerance"
    );
    for r in &results {
        let verdict = match (exact, r.passed()) {
            (false, _) => "info",
            (true, true) => "pass",
            (true, false) => "FAIL",
        };
        writeln!(
            out,
            "{:<40} {:>12.3e} {:>10.0e}  {verdict}",
            r.name, r.max_rel_error, r.tolerance
        )
        .expect("string write");
    }
    let failed = results.iter().filter(|r| !r.passed()).count();
    if exact {
        writeln!(out, "{} checks, {failed} failed", results.len()).expect("string write");
    } else {
        out.push_str(
            "32-bit differences are informational; run with --precision 64 for pass/fail\n",
        );
    }
    say!(run, "{}", out.trim_end());
    run.write("gradcheck.txt", out)?;
    run.write_json("gradcheck.json", &results)?;
    if exact && failed > 0 {
        return Err(Error::GradCheck(format!(
            "{failed} checks exceeded tolerance"
        )));
    }
    Ok(())
}

fn synth(run: &mut Run) -> Result<()> {
    let s = run.cfg.synth.clone();
    if s.subjects == 0 || s.sessions == 0 || s.sessions > 5 {
        return Err(Error::Config(
            "synth needs 1+ subjects and 1..=5 sessions".into(),
        ));
    }
    for subject in 1..=s.subjects {
        for session in 1..=s.sessions {
            let spec = SynthSpec {
                n_per_class: s.n_per_class,
                channels: s.channels,
                samples: s.samples,
                seed: run
                    .cfg
                    .seed
                    .wrapping_add(((subject as u64) << 8) | session as u64),
                snr: s.snr,
                sample_rate: s.sample_rate,
                subject,
                session,
            };
            let (set, plant) = data::synth_generate(&spec)?;
            let name = format!("sub{subject:02}_ses{session}.etf");
            set.save(run.path(&name))?;
            let mut extra = serde_json::Map::new();
            extra.insert("synth".into(), serde_json::to_value(&spec)?);
            Sidecar {
                source: Some("synthetic".into()),
                tool_version: Some(format!(
                    "{} {}",
                    env!("CARGO_PKG_NAME"),
                    env!("CARGO_PKG_VERSION")
                )),
                plant_channels: Some(plant),
                extra,
            }
            .save_for(run.path(&name))?;
            run.outputs.push(name.clone());
            run.outputs
                .push(data::sidecar_path(&name).display().to_string());
        }
    }
    say!(
        run,
        "wrote {} subjects x {} sessions of {}x{} trials to {}",
        s.subjects,
        s.sessions,
        s.channels,
        s.samples,
        run.cfg.out.display()
    );
    Ok(())
}

fn latency<F: Scalar>(run: &mut Run) -> Result<()> {
    let model = run.checkpoint_or_new::<F>()?;
    let (c, t) = (model.config().channels, model.config().samples);
    let mut rng = ChaCha8Rng::seed_from_u64(run.cfg.seed);
    let x = Tensor::<F>::new(
        vec![1, c, t, 1],
        (0..c * t)
            .map(|_| F::lit(rng.random_range(-1.0..1.0)))
            .collect(),
    )?;
    for _ in 0..run.cfg.latency.warmup {
        model.logits(&x)?;
    }
    let mut ms: Vec<f64> = (0..run.cfg.latency.trials)
        .map(|_| {
            let t0 = Instant::now();
            model.logits(&x).map(|_| t0.elapsed().as_secs_f64() * 1e3)
        })
        .collect::<Result<_>>()?;
    ms.sort_by(f64::total_cmp);
    let (mean, std) = mean_std(&ms);
    let median = ms[ms.len() / 2];
    let p95 = ms[(ms.len() * 95 / 100).min(ms.len() - 1)];
    say!(
        run,
        "{} trials, batch 1, {}x{}: mean {mean:.3} ms, median {median:.3} ms, p95 {p95:.3} ms (std {std:.3})",
        ms.len(),
        c,
        t
    );
    run.write_json(
        "latency.json",
        &serde_json::json!({
            "trials": ms.len(), "warmup": run.cfg.latency.warmup, "batch": 1,
            "mean_ms": mean, "median_ms": median, "p95_ms": p95, "std_ms": std,
            "precision_bits": 8 * F::DTYPE.size(),
        }),
    )
}
