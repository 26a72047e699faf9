//! Subject-dependent cross-session evaluation: train on session 1 (with a
//! stratified validation hold-out), test on every later session present.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::Serialize;

use crate::data::{split_train_val, Corpus, SplitSpec, TrialSet};
use crate::error::{Error, Result};
use crate::model::{build_model, Model, ModelConfig};
use crate::tensor::Scalar;
use crate::training::{evaluate, train_with, Monitor, Silent, TrainConfig, TrainHistory};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SessionResult {
    pub subject: u32,
    pub session: u32,
    pub accuracy: f64,
    pub n_trials: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubjectRun {
    pub subject: u32,
    pub sessions: Vec<SessionResult>,
    pub history: TrainHistory,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProtocolResult {
    pub subjects: Vec<SubjectRun>,
    /// Human-readable notes about skipped subjects or sessions.
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubjectMean {
    pub subject: u32,
    pub mean_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProtocolSummary {
    pub n_subjects: usize,
    pub grand_mean: f64,
    /// Population standard deviation of the per-subject means.
    pub std: f64,
    /// `grand_mean ± std` in percent, one decimal.
    pub formatted: String,
    pub per_subject: Vec<SubjectMean>,
    /// Mean over subjects for each test session.
    pub per_session: BTreeMap<u32, f64>,
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub split: SplitSpec,
    pub warnings: Vec<String>,
}

impl ProtocolResult {
    pub fn rows(&self) -> impl Iterator<Item = &SessionResult> {
        self.subjects.iter().flat_map(|s| &s.sessions)
    }

    /// `subject,session,accuracy,n_trials`, accuracy with 6 decimals.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("subject,session,accuracy,n_trials\n");
        for r in self.rows() {
            writeln!(
                out,
                "{},{},{:.6},{}",
                r.subject, r.session, r.accuracy, r.n_trials
            )
            .expect("string write");
        }
        out
    }

    pub fn summary(
        &self,
        seed: u64,
        model: &ModelConfig,
        train: &TrainConfig,
        split: &SplitSpec,
    ) -> ProtocolSummary {
        let per_subject: Vec<SubjectMean> = self
            .subjects
            .iter()
            .filter(|s| !s.sessions.is_empty())
            .map(|s| SubjectMean {
                subject: s.subject,
                mean_accuracy: s.sessions.iter().map(|r| r.accuracy).sum::<f64>()
                    / s.sessions.len() as f64,
            })
            .collect();
        let means: Vec<f64> = per_subject.iter().map(|s| s.mean_accuracy).collect();
        let (grand_mean, std) = mean_std(&means);
        let mut by_session: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
        for r in self.rows() {
            by_session.entry(r.session).or_default().push(r.accuracy);
        }
        ProtocolSummary {
            n_subjects: per_subject.len(),
            grand_mean,
            std,
            formatted: format_mean_std(grand_mean, std),
            per_subject,
            per_session: by_session
                .into_iter()
                .map(|(k, v)| (k, mean_std(&v).0))
                .collect(),
            seed,
            model: model.clone(),
            train: train.clone(),
            split: split.clone(),
            warnings: self.warnings.clone(),
        }
    }
}

/// Mean and population standard deviation; `(NaN, NaN)` for no values.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Fractions rendered as percentages, e.g. `58.9 ± 10.5`.
pub fn format_mean_std(mean: f64, std: f64) -> String {
    format!("{:.1} ± {:.1}", 100.0 * mean, 100.0 * std)
}

/// Trains one subject on its training session and scores every test session
/// present. Returns the trained model, the run and any warnings.
pub fn train_subject<F: Scalar>(
    subject: u32,
    sessions: &BTreeMap<u32, TrialSet>,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    split: &SplitSpec,
    seed: u64,
    monitor: &mut dyn Monitor,
) -> Result<(Model<F>, SubjectRun, Vec<String>)> {
    let mut warnings = Vec::new();
    let source = sessions.get(&split.train_session).ok_or_else(|| {
        Error::Data(format!(
            "subject {subject} has no session {}",
            split.train_session
        ))
    })?;
    let (tr, va) = split_train_val(source, split)?;
    let mut model = build_model::<F>(model_cfg, seed)?;
    let history = train_with(&mut model, &tr, Some(&va), train_cfg, monitor)?;
    let mut results = Vec::new();
    for &s in &split.test_sessions {
        let Some(set) = sessions.get(&s) else {
            warnings.push(format!("subject {subject}: session {s} missing, skipped"));
            continue;
        };
        if set.is_empty() {
            return Err(Error::Data(format!(
                "subject {subject} session {s} has no trials"
            )));
        }
        let e = evaluate(&model, set, train_cfg.batch_size)?;
        results.push(SessionResult {
            subject,
            session: s,
            accuracy: e.accuracy,
            n_trials: set.len(),
        });
    }
    Ok((
        model,
        SubjectRun {
            subject,
            sessions: results,
            history,
        },
        warnings,
    ))
}

/// Runs every subject of the corpus, up to `threads` at a time. Subjects
/// are independent, so the output does not depend on `threads`.
pub fn run_protocol<F: Scalar>(
    corpus: &Corpus,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    split: &SplitSpec,
    seed: u64,
    threads: usize,
) -> Result<ProtocolResult> {
    split.validate()?;
    train_cfg.validate()?;
    model_cfg.validate()?;
    let mut warnings = Vec::new();
    let mut jobs = Vec::new();
    for (&subject, sessions) in corpus {
        if sessions.contains_key(&split.train_session) {
            jobs.push(subject);
        } else {
            warnings.push(format!(
                "subject {subject}: training session {} missing, subject skipped",
                split.train_session
            ));
        }
    }
    if jobs.is_empty() {
        return Err(Error::Data("no subject has a training session".into()));
    }
    let slots: Vec<Mutex<Option<Result<(SubjectRun, Vec<String>)>>>> =
        jobs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = threads.clamp(1, jobs.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&subject) = jobs.get(i) else { break };
                let r = train_subject::<F>(
                    subject,
                    &corpus[&subject],
                    model_cfg,
                    train_cfg,
                    split,
                    seed,
                    &mut Silent,
                )
                .map(|(_, run, w)| (run, w));
                *slots[i].lock().expect("unpoisoned") = Some(r);
            });
        }
    });
    let mut subjects = Vec::with_capacity(jobs.len());
    for slot in slots {
        let (run, w) = slot
            .into_inner()
            .expect("unpoisoned")
            .expect("every job ran")?;
        subjects.push(run);
        warnings.extend(w);
    }
    Ok(ProtocolResult { subjects, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn population_std() {
        let (m, s) = mean_std(&[0.5, 0.7]);
        assert!((m - 0.6).abs() < 1e-12);
        assert!((s - 0.1).abs() < 1e-12);
        assert_eq!(format_mean_std(0.589, 0.105), "58.9 ± 10.5");
    }
}
