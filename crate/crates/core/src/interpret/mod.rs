//! Gradient×Input attribution and the electrode-deletion check.
//!
//! Attributions differentiate the pre-softmax logit of the target class with
//! every stochastic layer disabled. Channel scores are time-averaged absolute
//! attributions; deletion zeroes whole electrodes in score order and records
//! the true-class probability of trials that were correctly classified before
//! any deletion.

pub mod export;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::TrialSet;
use crate::error::{Error, Result};
use crate::layers::{softmax, Mode};
use crate::model::Model;
use crate::tensor::{Scalar, Tensor};
use crate::training::{argmax, train, TrainConfig, TrainHistory};

/// Anything mapping `[B, C, T, 1]` input to `[B, N]` logits differentiably.
pub trait LogitModel<F: Scalar> {
    fn extents(&self) -> (usize, usize);

    fn classes(&self) -> usize;

    fn logits(&self, g: &mut Graph<F>, x: Var) -> Result<Var>;
}

impl<F: Scalar> LogitModel<F> for Model<F> {
    fn extents(&self) -> (usize, usize) {
        (self.config().channels, self.config().samples)
    }

    fn classes(&self) -> usize {
        self.config().classes
    }

    fn logits(&self, g: &mut Graph<F>, x: Var) -> Result<Var> {
        // Inference mode never draws from the generator.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Ok(self.forward(g, x, Mode::Infer, &mut rng)?.logits)
    }
}

/// `logit[n] = Σ_{c,t} w[n,c,t] x[c,t] + b[n]`; its attributions are `w ⊙ x`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSurrogate<F> {
    /// `[C·T, N]`.
    pub weights: Tensor<F>,
    pub bias: Tensor<F>,
    pub channels: usize,
    pub samples: usize,
}

impl<F: Scalar> LinearSurrogate<F> {
    pub fn new(
        weights: Tensor<F>,
        bias: Tensor<F>,
        channels: usize,
        samples: usize,
    ) -> Result<Self> {
        match *weights.shape() {
            [ct, n] if ct == channels * samples && bias.shape() == [n] => Ok(Self {
                weights,
                bias,
                channels,
                samples,
            }),
            ref s => Err(Error::Interpret(format!(
                "linear surrogate needs [{}, N] weights and [N] bias, got {s:?} and {:?}",
                channels * samples,
                bias.shape()
            ))),
        }
    }
}

impl<F: Scalar> LogitModel<F> for LinearSurrogate<F> {
    fn extents(&self) -> (usize, usize) {
        (self.channels, self.samples)
    }

    fn classes(&self) -> usize {
        self.bias.len()
    }

    fn logits(&self, g: &mut Graph<F>, x: Var) -> Result<Var> {
        let b = g.shape(x)[0];
        let flat = g.reshape(x, &[b, self.channels * self.samples])?;
        let w = g.constant(self.weights.clone());
        let bias = g.constant(self.bias.clone());
        crate::layers::dense(g, flat, w, bias)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionMap {
    pub channels: usize,
    pub samples: usize,
    /// `[C, T]` row-major.
    pub values: Vec<f64>,
    pub trial: usize,
    pub target: usize,
    pub predicted: usize,
    /// Softmax probability of the predicted class.
    pub confidence: f64,
}

impl AttributionMap {
    pub fn channel(&self, c: usize) -> &[f64] {
        &self.values[c * self.samples..(c + 1) * self.samples]
    }
}

/// Gradient×Input for a batch `[B, C, T, 1]` in one reverse sweep: trials
/// do not interact in inference mode, so the gradient of the summed target
/// logits separates per trial. `trial_ids` label the returned maps.
pub fn gradient_x_input_batch<F: Scalar, M: LogitModel<F> + ?Sized>(
    model: &M,
    batch: &Tensor<F>,
    targets: &[usize],
    trial_ids: &[usize],
) -> Result<Vec<AttributionMap>> {
    let (c, t) = model.extents();
    let b = match *batch.shape() {
        [b, bc, bt, 1] if bc == c && bt == t => b,
        ref s => {
            return Err(Error::Interpret(format!(
                "expected [B, {c}, {t}, 1] input, got {s:?}"
            )))
        }
    };
    if targets.len() != b || trial_ids.len() != b {
        return Err(Error::Interpret(format!(
            "{} targets for {b} trials",
            targets.len()
        )));
    }
    let n = model.classes();
    if let Some(&bad) = targets.iter().find(|&&k| k >= n) {
        return Err(Error::Interpret(format!(
            "target class {bad} outside 0..{n}"
        )));
    }
    let mut g = Graph::new();
    let x = g.input(batch.clone());
    let logits = model.logits(&mut g, x)?;
    let mut mask = vec![F::zero(); b * n];
    for (i, &k) in targets.iter().enumerate() {
        mask[i * n + k] = F::one();
    }
    let mask = g.constant(Tensor::new(vec![b, n], mask)?);
    let picked = g.mul(logits, mask)?;
    let root = g.sum(picked)?;
    let probs = {
        let mut pg = Graph::no_grad();
        let l = pg.constant(g.value(logits).clone());
        let p = softmax(&mut pg, l)?;
        pg.value(p).to_f64_vec()
    };
    let grads = g.backward(root)?;
    let gx = grads
        .input(x)
        .ok_or_else(|| Error::Interpret("model output does not depend on its input".into()))?;
    if !gx.is_finite() {
        return Err(Error::Interpret("non-finite input gradient".into()));
    }
    let per = c * t;
    Ok((0..b)
        .map(|i| {
            let xs = &batch.data()[i * per..(i + 1) * per];
            let gs = &gx.data()[i * per..(i + 1) * per];
            let row = &probs[i * n..(i + 1) * n];
            let predicted = argmax(row);
            AttributionMap {
                channels: c,
                samples: t,
                values: xs.iter().zip(gs).map(|(&a, &d)| (a * d).as_f64()).collect(),
                trial: trial_ids[i],
                target: targets[i],
                predicted,
                confidence: row[predicted],
            }
        })
        .collect())
}

/// Gradient×Input for one trial (`[C, T]` or `[C, T, 1]`).
pub fn gradient_x_input<F: Scalar, M: LogitModel<F> + ?Sized>(
    model: &M,
    trial: &Tensor<F>,
    target: usize,
) -> Result<AttributionMap> {
    let (c, t) = model.extents();
    if trial.len() != c * t || !(trial.shape() == [c, t] || trial.shape() == [c, t, 1]) {
        return Err(Error::Interpret(format!(
            "expected a [{c}, {t}] trial, got {:?}",
            trial.shape()
        )));
    }
    let batch = trial.reshape(&[1, c, t, 1])?;
    Ok(gradient_x_input_batch(model, &batch, &[target], &[0])?.remove(0))
}

/// Attributions for selected trials of a set, `batch_size` at a time.
pub fn attribute_trials<F: Scalar, M: LogitModel<F> + ?Sized>(
    model: &M,
    set: &TrialSet,
    indices: &[usize],
    targets: &[usize],
    batch_size: usize,
) -> Result<Vec<AttributionMap>> {
    let mut out = Vec::with_capacity(indices.len());
    let bs = batch_size.max(1);
    for (idx, tg) in indices.chunks(bs).zip(targets.chunks(bs)) {
        out.extend(gradient_x_input_batch(
            model,
            &set.batch::<F>(idx),
            tg,
            idx,
        )?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelScores {
    /// Mean over maps and time of `|attribution|`.
    pub scores: Vec<f64>,
    /// Channel indices by descending score; ties go to the lower index.
    pub ranking: Vec<usize>,
}

impl ChannelScores {
    pub fn from_scores(scores: Vec<f64>) -> Self {
        let mut ranking: Vec<usize> = (0..scores.len()).collect();
        ranking.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        Self { scores, ranking }
    }

    /// Position of channel `c` in the ranking (0 = most important).
    pub fn rank_of(&self, c: usize) -> usize {
        self.ranking
            .iter()
            .position(|&r| r == c)
            .expect("channel in ranking")
    }
}

/// Sums after sorting, so the result does not depend on input order.
fn ordered_sum(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v.iter().sum()
}

pub fn channel_scores(maps: &[AttributionMap]) -> Result<ChannelScores> {
    let first = maps
        .first()
        .ok_or_else(|| Error::Interpret("no attribution maps to score".into()))?;
    let (c, t) = (first.channels, first.samples);
    if maps.iter().any(|m| m.channels != c || m.samples != t) {
        return Err(Error::Interpret("attribution maps differ in extent".into()));
    }
    let denom = (maps.len() * t) as f64;
    let scores = (0..c)
        .map(|ch| {
            let per_map: Vec<f64> = maps
                .iter()
                .map(|m| ordered_sum(m.channel(ch).iter().map(|v| v.abs()).collect()))
                .collect();
            ordered_sum(per_map) / denom
        })
        .collect();
    Ok(ChannelScores::from_scores(scores))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMap {
    pub class: usize,
    pub channels: usize,
    pub samples: usize,
    /// Mean attribution `[C, T]` over the correctly classified trials.
    pub values: Vec<f64>,
    pub n_trials: usize,
    pub scores: ChannelScores,
}

/// Mean Gradient×Input map over trials of `class` that the model classifies
/// correctly, with the target set to that class.
pub fn class_average_map<F: Scalar, M: LogitModel<F> + ?Sized>(
    model: &M,
    set: &TrialSet,
    class: usize,
    batch_size: usize,
) -> Result<ClassMap> {
    let members: Vec<usize> = (0..set.len())
        .filter(|&i| set.labels()[i] as usize == class)
        .collect();
    let maps = attribute_trials(
        model,
        set,
        &members,
        &vec![class; members.len()],
        batch_size,
    )?;
    let correct: Vec<AttributionMap> = maps.into_iter().filter(|m| m.predicted == class).collect();
    if correct.is_empty() {
        return Err(Error::Interpret(format!(
            "none of the {} class-{class} trials is classified correctly",
            members.len()
        )));
    }
    let (c, t) = (set.channels(), set.samples());
    let mut values = vec![0.0; c * t];
    for m in &correct {
        for (acc, v) in values.iter_mut().zip(&m.values) {
            *acc += v;
        }
    }
    let k = correct.len() as f64;
    values.iter_mut().for_each(|v| *v /= k);
    Ok(ClassMap {
        class,
        channels: c,
        samples: t,
        values,
        n_trials: correct.len(),
        scores: channel_scores(&correct)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DeletionMode {
    MostImportant,
    LeastImportant,
}

impl DeletionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            DeletionMode::MostImportant => "most-important",
            DeletionMode::LeastImportant => "least-important",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeletionCurve {
    pub fractions: Vec<f64>,
    /// Electrodes zeroed at each fraction.
    pub deleted: Vec<usize>,
    pub mean_confidence: Vec<f64>,
    /// Population standard deviation across trials.
    pub std: Vec<f64>,
    /// Trials whose prediction no longer matches the true class.
    pub flipped: Vec<usize>,
    pub mode: DeletionMode,
    pub class: Option<usize>,
    pub n_trials: usize,
}

impl DeletionCurve {
    /// Trapezoidal area under mean confidence over fraction.
    pub fn auc(&self) -> f64 {
        self.fractions
            .windows(2)
            .zip(self.mean_confidence.windows(2))
            .map(|(f, c)| (f[1] - f[0]) * (c[0] + c[1]) / 2.0)
            .sum()
    }
}

/// `⌈f·C⌉`, guarded against products like `0.3 * 10 = 3.0000000000000004`.
pub fn deletion_count(fraction: f64, channels: usize) -> usize {
    let x = fraction * channels as f64;
    let r = x.round();
    let k = if (x - r).abs() < 1e-9 { r } else { x.ceil() };
    (k as usize).min(channels)
}

fn true_class_confidence<F: Scalar>(
    model: &Model<F>,
    set: &TrialSet,
    idx: &[usize],
    batch_size: usize,
) -> Result<Vec<(f64, bool)>> {
    let n = model.config().classes;
    let mut out = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(batch_size.max(1)) {
        let p = model.predict(&set.batch::<F>(chunk))?.to_f64_vec();
        for (row, &i) in p.chunks(n).zip(chunk) {
            let y = set.labels()[i] as usize;
            out.push((row[y], argmax(row) == y));
        }
    }
    Ok(out)
}

fn zero_channels(set: &TrialSet, channels: &[usize]) -> Result<TrialSet> {
    let (c, t) = (set.channels(), set.samples());
    let mut data = set.data().to_vec();
    for trial in data.chunks_mut(c * t) {
        for &ch in channels {
            trial[ch * t..(ch + 1) * t].fill(0.0);
        }
    }
    TrialSet::new(
        data,
        set.labels().to_vec(),
        c,
        t,
        set.sample_rate(),
        set.subject(),
        set.session(),
    )
}

/// Confidence under progressive electrode deletion. Only trials of `class`
/// (all trials when `None`) that are correctly classified with nothing
/// deleted take part. `fractions` must ascend from 0 and stay within [0, 1].
pub fn deletion_test<F: Scalar>(
    model: &Model<F>,
    set: &TrialSet,
    scores: &ChannelScores,
    fractions: &[f64],
    mode: DeletionMode,
    class: Option<usize>,
    batch_size: usize,
) -> Result<DeletionCurve> {
    let c = set.channels();
    if scores.ranking.len() != c {
        return Err(Error::Interpret(format!(
            "{} scored channels for {c}-electrode trials",
            scores.ranking.len()
        )));
    }
    if fractions.first() != Some(&0.0) {
        return Err(Error::Interpret(
            "deletion fractions must start at 0".into(),
        ));
    }
    if let Some(f) = fractions.iter().find(|f| !(0.0..=1.0).contains(*f)) {
        return Err(Error::Interpret(format!(
            "deletion fraction {f} outside [0, 1]"
        )));
    }
    if fractions.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Interpret("deletion fractions must ascend".into()));
    }
    let candidates: Vec<usize> = (0..set.len())
        .filter(|&i| class.is_none_or(|k| set.labels()[i] as usize == k))
        .collect();
    let baseline = true_class_confidence(model, set, &candidates, batch_size)?;
    let kept: Vec<usize> = candidates
        .iter()
        .zip(&baseline)
        .filter(|(_, (_, ok))| *ok)
        .map(|(&i, _)| i)
        .collect();
    if kept.is_empty() {
        return Err(Error::Interpret(format!(
            "none of the {} selected trials is classified correctly",
            candidates.len()
        )));
    }
    let subset = set.subset(&kept);
    let all: Vec<usize> = (0..subset.len()).collect();
    let mut curve = DeletionCurve {
        fractions: fractions.to_vec(),
        deleted: Vec::new(),
        mean_confidence: Vec::new(),
        std: Vec::new(),
        flipped: Vec::new(),
        mode,
        class,
        n_trials: kept.len(),
    };
    for &f in fractions {
        let k = deletion_count(f, c);
        let chosen: Vec<usize> = match mode {
            DeletionMode::MostImportant => scores.ranking[..k].to_vec(),
            DeletionMode::LeastImportant => scores.ranking[c - k..].to_vec(),
        };
        let masked = zero_channels(&subset, &chosen)?;
        let conf = true_class_confidence(model, &masked, &all, batch_size)?;
        let values: Vec<f64> = conf.iter().map(|(p, _)| *p).collect();
        let (mean, std) = crate::training::protocol::mean_std(&values);
        curve.deleted.push(k);
        curve.mean_confidence.push(mean);
        curve.std.push(std);
        curve
            .flipped
            .push(conf.iter().filter(|(_, ok)| !ok).count());
    }
    Ok(curve)
}

/// Continues training on `trials` for `epochs` epochs and keeps the final
/// weights (no validation, no checkpoint restore).
pub fn finetune_for_interpretation<F: Scalar>(
    model: &mut Model<F>,
    trials: &TrialSet,
    epochs: usize,
    base: &TrainConfig,
) -> Result<TrainHistory> {
    let cfg = TrainConfig {
        epochs,
        restore_best: false,
        ..base.clone()
    };
    train(model, trials, None, &cfg)
}
