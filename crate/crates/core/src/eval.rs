//! Scoring and experiment reports.

use std::time::Instant;

use log::warn;

use crate::data::{normalize, Dataset};
use crate::error::{invalid, Result};
use crate::gradients::ModelKind;
use crate::model::{Gaussian, TrainedModel};
use crate::optimizer::{FitShape, OptConfig};
use crate::LN_2PI;

/// Mean negative log predictive density (nats per test point).
pub fn nlpd(predictions: &[Gaussian], targets: &[f64]) -> Result<f64> {
    check_lengths(predictions, targets)?;
    let mut total = 0.0;
    for (i, (p, y)) in predictions.iter().zip(targets).enumerate() {
        if !(p.var > 0.0) {
            return invalid(format!("prediction {} has nonpositive variance {}", i + 1, p.var));
        }
        let r = y - p.mean;
        total += 0.5 * (LN_2PI + p.var.ln()) + r * r / (2.0 * p.var);
    }
    Ok(total / targets.len() as f64)
}

pub fn mse(predictions: &[Gaussian], targets: &[f64]) -> Result<f64> {
    check_lengths(predictions, targets)?;
    Ok(predictions.iter().zip(targets).map(|(p, y)| (y - p.mean).powi(2)).sum::<f64>() / targets.len() as f64)
}

fn check_lengths(predictions: &[Gaussian], targets: &[f64]) -> Result<()> {
    if predictions.len() != targets.len() {
        return invalid(format!("{} predictions for {} targets", predictions.len(), targets.len()));
    }
    if targets.is_empty() {
        return invalid("no test points");
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreReport {
    pub nlpd: f64,
    pub mse: f64,
    pub n_test: usize,
    pub train_seconds: f64,
    pub test_seconds: f64,
}

/// Median of at least one sample.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

/// Runs `f` `runs` times (at least 3) and returns the last result with the
/// median wall time in seconds.
pub fn timed<T>(runs: usize, mut f: impl FnMut() -> Result<T>) -> Result<(T, f64)> {
    let mut times = Vec::new();
    let mut out = None;
    for _ in 0..runs.max(3) {
        let t = Instant::now();
        out = Some(f()?);
        times.push(t.elapsed().as_secs_f64());
    }
    Ok((out.expect("ran at least once"), median(&times)))
}

/// Preprocessing applied before training.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Preprocess {
    pub normalize: bool,
}

/// Trains on `train` (raw units) and scores on `test`. The reported training
/// time covers a single fit; use [`timed`] around this for medians.
pub fn train_and_score(train: &Dataset, test: &Dataset, shape: FitShape, cfg: &OptConfig, pre: Preprocess) -> Result<(TrainedModel, ScoreReport)> {
    let t0 = Instant::now();
    let ds = if pre.normalize { normalize(train)? } else { train.clone() };
    let (model, _) = TrainedModel::fit(&ds, shape, cfg)?;
    let train_seconds = t0.elapsed().as_secs_f64();
    let t1 = Instant::now();
    let (nlpd, mse) = model.score(&test.x, &test.y)?;
    let test_seconds = t1.elapsed().as_secs_f64();
    Ok((model, ScoreReport { nlpd, mse, n_test: test.len(), train_seconds, test_seconds }))
}

/// Mean and standard error (sample std / sqrt(n)) of a set of trials.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanSe {
    pub mean: f64,
    pub se: f64,
}

impl MeanSe {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let se = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() / n.sqrt()
        } else {
            f64::NAN
        };
        Self { mean, se }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RowOutcome {
    Scored { nlpd: MeanSe, mse: MeanSe, train_seconds: f64, test_seconds: f64, n_test: usize, trials: Vec<ScoreReport> },
    Failed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentRow {
    pub kind: ModelKind,
    pub outcome: RowOutcome,
}

/// Trains every variant on the train split of each trial and scores it on
/// the test split. `trials` yields `(train, test, seed)` in raw units; the
/// same trials are used for every variant. Times are medians over trials.
pub fn run_experiment(trials: &[(Dataset, Dataset, u64)], variants: &[FitShape], cfg: &OptConfig, pre: Preprocess) -> Vec<ExperimentRow> {
    variants
        .iter()
        .map(|shape| {
            let mut reports = Vec::new();
            let mut failure = None;
            for (train, test, seed) in trials {
                let cfg = OptConfig { seed: *seed, ..cfg.clone() };
                match train_and_score(train, test, *shape, &cfg, pre) {
                    Ok((_, r)) => reports.push(r),
                    Err(e) => {
                        warn!("{} failed on trial seed {seed}: {e}", shape.kind);
                        failure = Some(format!("seed {seed}: {e}"));
                        break;
                    }
                }
            }
            let outcome = match failure {
                Some(msg) => RowOutcome::Failed(msg),
                None if reports.is_empty() => RowOutcome::Failed("no trials".into()),
                None => {
                    let col = |f: fn(&ScoreReport) -> f64| reports.iter().map(f).collect::<Vec<_>>();
                    RowOutcome::Scored {
                        nlpd: MeanSe::of(&col(|r| r.nlpd)),
                        mse: MeanSe::of(&col(|r| r.mse)),
                        train_seconds: median(&col(|r| r.train_seconds)),
                        test_seconds: median(&col(|r| r.test_seconds)),
                        n_test: reports[0].n_test,
                        trials: reports,
                    }
                }
            };
            ExperimentRow { kind: shape.kind, outcome }
        })
        .collect()
}

/// Tab-separated report with a header line. Scores are in raw target units.
pub fn format_report(rows: &[ExperimentRow]) -> String {
    let mut out = String::from("variant\tnlpd\tnlpd_se\tmse\tmse_se\tn_test\ttrain_seconds\ttest_seconds\tstatus\n");
    for row in rows {
        match &row.outcome {
            RowOutcome::Scored { nlpd, mse, train_seconds, test_seconds, n_test, .. } => out.push_str(&format!(
                "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}\t{:.4}\t{:.4}\tok\n",
                row.kind, nlpd.mean, nlpd.se, mse.mean, mse.se, n_test, train_seconds, test_seconds
            )),
            RowOutcome::Failed(msg) => out.push_str(&format!("{}\tnan\tnan\tnan\tnan\t0\tnan\tnan\tfailed: {}\n", row.kind, msg.replace(['\t', '\n'], " "))),
        }
    }
    out
}
