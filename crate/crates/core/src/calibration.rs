//! Linear calibrators `softmax(W [p; v] + b)` trained by full-batch gradient
//! descent on a handful of labeled extra examples.
//!
//! QA uses two classes (incorrect, correct) over the scalar answer
//! confidence; NLI uses the three labels over the label distribution.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Dataset, NliLabel, TaskKind};
use crate::parsing::{Confidence, Prediction};
use crate::reliability::ReliabilityAssessment;

#[derive(Debug, Error, PartialEq)]
pub enum CalibrationError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("need at least two records with two distinct targets, got {records} records and {classes} target(s)")]
    Degenerate { records: usize, classes: usize },
    #[error("missing predictions or assessments for: {}", .0.join(", "))]
    Missing(Vec<String>),
    #[error("non-finite parameters after training")]
    NonFinite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub example_id: String,
    pub p: Vec<f64>,
    pub v: f64,
    pub target: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibratorParams {
    pub use_v: bool,
    pub w: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub task: TaskKind,
}

pub fn class_count(task: TaskKind) -> usize {
    if task.is_qa() {
        2
    } else {
        3
    }
}

pub fn probability_width(task: TaskKind) -> usize {
    if task.is_qa() {
        1
    } else {
        3
    }
}

impl CalibratorParams {
    /// 1.0 where a probability column matches its class, zero elsewhere.
    /// For QA the single confidence column feeds the "correct" class.
    pub fn identity(task: TaskKind, use_v: bool) -> Self {
        let classes = class_count(task);
        let width = probability_width(task) + usize::from(use_v);
        let mut w = vec![vec![0.0; width]; classes];
        if task.is_qa() {
            w[1][0] = 1.0;
        } else {
            for (c, row) in w.iter_mut().enumerate() {
                row[c] = 1.0;
            }
        }
        Self {
            use_v,
            w,
            b: vec![0.0; classes],
            task,
        }
    }

    pub fn classes(&self) -> usize {
        self.b.len()
    }

    fn features(&self, p: &[f64], v: Option<f64>) -> Result<Vec<f64>, CalibrationError> {
        let width = probability_width(self.task);
        if p.len() != width {
            return Err(CalibrationError::Shape(format!(
                "{} calibrator expects {width} probabilities, got {}",
                self.task,
                p.len()
            )));
        }
        let mut x = p.to_vec();
        match (self.use_v, v) {
            (true, Some(v)) => x.push(v),
            (false, None) => {}
            (true, None) => return Err(CalibrationError::Shape("factor v required".into())),
            (false, Some(_)) => {
                return Err(CalibrationError::Shape("probability-only calibrator takes no v".into()))
            }
        }
        if self.w.len() != self.b.len() || self.w.iter().any(|r| r.len() != x.len()) {
            return Err(CalibrationError::Shape("weight matrix does not match features".into()));
        }
        Ok(x)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("params serialize")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in z.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in z.iter_mut() {
        *x /= sum;
    }
}

fn forward(w: &[Vec<f64>], b: &[f64], x: &[f64]) -> Vec<f64> {
    let mut z: Vec<f64> = w
        .iter()
        .zip(b)
        .map(|(row, bias)| row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + bias)
        .collect();
    softmax_in_place(&mut z);
    z
}

/// Calibrated distribution. For QA the calibrated confidence is entry 1.
pub fn calibrate(params: &CalibratorParams, p: &[f64], v: Option<f64>) -> Result<Vec<f64>, CalibrationError> {
    let x = params.features(p, v)?;
    Ok(forward(&params.w, &params.b, &x))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub learning_rate: f64,
    pub max_iterations: usize,
    /// Weight of `0.5 * ||W||^2` (biases unpenalized).
    pub l2: f64,
    /// Stop when the gradient's max-abs entry falls below this.
    pub tolerance: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            max_iterations: 2000,
            l2: 1e-4,
            tolerance: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: CalibratorParams,
    /// Regularized objective before each step, plus the final value.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn design(records: &[CalibrationRecord], use_v: bool) -> Vec<Vec<f64>> {
    records
        .iter()
        .map(|r| {
            let mut x = r.p.clone();
            if use_v {
                x.push(r.v);
            }
            x
        })
        .collect()
}

/// Mean negative log-likelihood of record targets under `params`.
pub fn mean_nll(params: &CalibratorParams, records: &[CalibrationRecord]) -> Result<f64, CalibrationError> {
    let mut total = 0.0;
    for r in records {
        let v = params.use_v.then_some(r.v);
        let probs = calibrate(params, &r.p, v)?;
        total -= probs[r.target].max(f64::MIN_POSITIVE).ln();
    }
    Ok(total / records.len() as f64)
}

fn objective(w: &[Vec<f64>], b: &[f64], xs: &[Vec<f64>], targets: &[usize], l2: f64) -> f64 {
    let n = xs.len() as f64;
    let nll: f64 = xs
        .iter()
        .zip(targets)
        .map(|(x, &t)| -forward(w, b, x)[t].max(f64::MIN_POSITIVE).ln())
        .sum::<f64>()
        / n;
    let reg: f64 = w.iter().flatten().map(|a| a * a).sum::<f64>() * 0.5 * l2;
    nll + reg
}

/// Trains with full-batch gradient descent from the identity initialization.
/// `_seed` is accepted for interface stability; training has no stochastic steps.
pub fn train_calibrator(
    records: &[CalibrationRecord],
    task: TaskKind,
    use_v: bool,
    _seed: u64,
) -> Result<CalibratorParams, CalibrationError> {
    train_with_options(records, task, use_v, TrainOptions::default()).map(|o| o.params)
}

pub fn train_with_options(
    records: &[CalibrationRecord],
    task: TaskKind,
    use_v: bool,
    options: TrainOptions,
) -> Result<TrainOutcome, CalibrationError> {
    let classes = class_count(task);
    let mut distinct: Vec<usize> = records.iter().map(|r| r.target).collect();
    distinct.sort_unstable();
    distinct.dedup();
    if records.len() < 2 || distinct.len() < 2 {
        return Err(CalibrationError::Degenerate {
            records: records.len(),
            classes: distinct.len(),
        });
    }
    let width = probability_width(task);
    for r in records {
        if r.p.len() != width {
            return Err(CalibrationError::Shape(format!(
                "record {} has {} probabilities, expected {width}",
                r.example_id,
                r.p.len()
            )));
        }
        if r.target >= classes {
            return Err(CalibrationError::Shape(format!(
                "record {} target {} outside {classes} classes",
                r.example_id, r.target
            )));
        }
    }

    let init = CalibratorParams::identity(task, use_v);
    let (mut w, mut b) = (init.w, init.b);
    let xs = design(records, use_v);
    let targets: Vec<usize> = records.iter().map(|r| r.target).collect();
    let n = xs.len() as f64;
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..options.max_iterations {
        trace.push(objective(&w, &b, &xs, &targets, options.l2));
        let mut gw = vec![vec![0.0; w[0].len()]; classes];
        let mut gb = vec![0.0; classes];
        for (x, &t) in xs.iter().zip(&targets) {
            let probs = forward(&w, &b, x);
            for c in 0..classes {
                let d = (probs[c] - if c == t { 1.0 } else { 0.0 }) / n;
                gb[c] += d;
                for (g, xi) in gw[c].iter_mut().zip(x) {
                    *g += d * xi;
                }
            }
        }
        for (grow, wrow) in gw.iter_mut().zip(&w) {
            for (g, wi) in grow.iter_mut().zip(wrow) {
                *g += options.l2 * wi;
            }
        }
        let grad_max = gw
            .iter()
            .flatten()
            .chain(gb.iter())
            .fold(0.0f64, |m, g| m.max(g.abs()));
        if grad_max < options.tolerance {
            converged = true;
            break;
        }
        for (wrow, grow) in w.iter_mut().zip(&gw) {
            for (wi, g) in wrow.iter_mut().zip(grow) {
                *wi -= options.learning_rate * g;
            }
        }
        for (bi, g) in b.iter_mut().zip(&gb) {
            *bi -= options.learning_rate * g;
        }
        iterations += 1;
    }
    trace.push(objective(&w, &b, &xs, &targets, options.l2));
    if w.iter().flatten().chain(b.iter()).any(|x| !x.is_finite()) {
        return Err(CalibrationError::NonFinite);
    }
    Ok(TrainOutcome {
        params: CalibratorParams { use_v, w, b, task },
        objective_trace: trace,
        iterations,
        converged,
    })
}

/// A prediction with its reliability assessment and correctness verdict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluatedPrediction {
    pub prediction: Prediction,
    pub assessment: ReliabilityAssessment,
    pub correct: bool,
}

/// Probability features for one prediction. QA: `[confidence]`, `0.5` when
/// logprobs were unavailable, `0` on parse failure. NLI: the label
/// distribution, one-hot at the emitted label when unavailable, uniform on
/// parse failure.
pub fn probability_features(task: TaskKind, prediction: &Prediction) -> Vec<f64> {
    if task.is_qa() {
        let p = match (prediction.parse_ok, prediction.confidence) {
            (false, _) => 0.0,
            (true, Some(c)) => c.top(),
            (true, None) => 0.5,
        };
        vec![p]
    } else {
        match (prediction.nli_label(), prediction.confidence) {
            (Some(_), Some(Confidence::Distribution(d))) if prediction.parse_ok => d.to_vec(),
            (Some(label), _) if prediction.parse_ok => {
                let mut d = vec![0.0; 3];
                d[label.index()] = 1.0;
                d
            }
            _ => vec![1.0 / 3.0; 3],
        }
    }
}

fn factor(item: &EvaluatedPrediction) -> f64 {
    if item.prediction.parse_ok {
        item.assessment.factuality_score.unwrap_or(0.0)
    } else {
        0.0
    }
}

/// One record per extra example, in dataset order.
pub fn build_records(
    extra: &Dataset,
    items: &HashMap<String, EvaluatedPrediction>,
) -> Result<Vec<CalibrationRecord>, CalibrationError> {
    let missing: Vec<String> = extra
        .examples
        .iter()
        .filter(|e| !items.contains_key(&e.id))
        .map(|e| e.id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(CalibrationError::Missing(missing));
    }
    extra
        .examples
        .iter()
        .map(|e| {
            let item = &items[&e.id];
            let target = if extra.task.is_qa() {
                usize::from(item.correct)
            } else {
                e.nli_label()
                    .ok_or_else(|| CalibrationError::Shape(format!("{} lacks an NLI label", e.id)))?
                    .index()
            };
            Ok(CalibrationRecord {
                example_id: e.id.clone(),
                p: probability_features(extra.task, &item.prediction),
                v: factor(item),
                target,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibratedPrediction {
    pub example_id: String,
    /// QA: unchanged answer. NLI: argmax of the calibrated distribution.
    pub answer: String,
    /// QA: calibrated probability of being correct. NLI: max calibrated probability.
    pub confidence: f64,
    pub distribution: Vec<f64>,
    pub changed: bool,
}

pub fn apply_to_testset(
    params: &CalibratorParams,
    items: &[EvaluatedPrediction],
) -> Result<Vec<CalibratedPrediction>, CalibrationError> {
    items
        .iter()
        .map(|item| {
            let p = probability_features(params.task, &item.prediction);
            let v = params.use_v.then(|| factor(item));
            let dist = calibrate(params, &p, v)?;
            let (answer, confidence) = if params.task.is_qa() {
                (item.prediction.answer.clone(), dist[1])
            } else {
                let (best, &conf) = dist
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                    .expect("three classes");
                (NliLabel::ALL[best].as_str().to_string(), conf)
            };
            Ok(CalibratedPrediction {
                example_id: item.prediction.example_id.clone(),
                changed: answer != item.prediction.answer,
                answer,
                confidence,
                distribution: dist,
            })
        })
        .collect()
}
