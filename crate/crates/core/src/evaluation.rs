//! Metrics: correctness, congruence of correctness with explanation
//! reliability, coverage-accuracy curves and mean/std over shot groups.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Example, TaskKind};
use crate::parsing::Prediction;
use crate::reliability::ReliabilityAssessment;
use crate::selection::rank_by_confidence;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("no items to evaluate")]
    Empty,
    #[error("missing confidence for: {}", .0.join(", "))]
    MissingConfidence(Vec<String>),
    #[error("verdict and assessment ids differ (only in verdicts: {only_verdicts:?}; only in assessments: {only_assessments:?})")]
    IdMismatch {
        only_verdicts: Vec<String>,
        only_assessments: Vec<String>,
    },
    #[error("no groups to aggregate")]
    NoGroups,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub example_id: String,
    pub correct: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
}

/// Lowercase, drop punctuation, collapse whitespace.
pub fn normalize_answer(s: &str) -> String {
    let cleaned: String = s
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .flat_map(char::to_lowercase)
        .collect();
    cleaned.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn strip_articles(s: &str) -> String {
    s.split(' ')
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn judge_correct(prediction: &Prediction, gold: &Example) -> bool {
    if !prediction.parse_ok {
        return false;
    }
    let got = normalize_answer(&prediction.answer);
    match gold.task {
        TaskKind::ContextQa => {
            let got = strip_articles(&got);
            std::iter::once(&gold.answer)
                .chain(gold.aliases.iter())
                .any(|g| strip_articles(&normalize_answer(g)) == got)
        }
        _ => got == normalize_answer(&gold.answer),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Congruence {
    pub n: usize,
    pub acc: f64,
    pub fac_rate: Option<f64>,
    pub con_rate: Option<f64>,
    pub acc_eq_fac: Option<f64>,
    pub acc_eq_con: Option<f64>,
}

/// Factuality (consistency) metrics are `None` unless every item carries a
/// boolean verdict for them.
pub fn congruence(
    verdicts: &[Verdict],
    assessments: &HashMap<String, ReliabilityAssessment>,
) -> Result<Congruence, EvalError> {
    if verdicts.is_empty() {
        return Err(EvalError::Empty);
    }
    let vids: BTreeSet<&str> = verdicts.iter().map(|v| v.example_id.as_str()).collect();
    let aids: BTreeSet<&str> = assessments.keys().map(String::as_str).collect();
    if vids != aids {
        return Err(EvalError::IdMismatch {
            only_verdicts: vids.difference(&aids).map(|s| s.to_string()).collect(),
            only_assessments: aids.difference(&vids).map(|s| s.to_string()).collect(),
        });
    }
    let n = verdicts.len() as f64;
    let acc = verdicts.iter().filter(|v| v.correct).count() as f64 / n;
    let rates = |flag: fn(&ReliabilityAssessment) -> Option<bool>| -> (Option<f64>, Option<f64>) {
        let mut hits = 0usize;
        let mut agree = 0usize;
        for v in verdicts {
            match flag(&assessments[&v.example_id]) {
                Some(f) => {
                    hits += usize::from(f);
                    agree += usize::from(f == v.correct);
                }
                None => return (None, None),
            }
        }
        (Some(hits as f64 / n), Some(agree as f64 / n))
    };
    let (fac_rate, acc_eq_fac) = rates(|a| a.factual);
    let (con_rate, acc_eq_con) = rates(|a| a.consistent);
    Ok(Congruence {
        n: verdicts.len(),
        acc,
        fac_rate,
        con_rate,
        acc_eq_fac,
        acc_eq_con,
    })
}

pub fn accuracy(verdicts: &[Verdict]) -> Result<f64, EvalError> {
    if verdicts.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(verdicts.iter().filter(|v| v.correct).count() as f64 / verdicts.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageAccuracyCurve {
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

impl CoverageAccuracyCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("coverage,accuracy\n");
        for (c, a) in &self.points {
            let _ = writeln!(out, "{c},{a}");
        }
        out
    }
}

pub fn coverage_accuracy(verdicts: &[Verdict]) -> Result<CoverageAccuracyCurve, EvalError> {
    if verdicts.is_empty() {
        return Err(EvalError::Empty);
    }
    let missing: Vec<String> = verdicts
        .iter()
        .filter(|v| v.confidence.is_none())
        .map(|v| v.example_id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(EvalError::MissingConfidence(missing));
    }
    let correct: HashMap<&str, bool> = verdicts.iter().map(|v| (v.example_id.as_str(), v.correct)).collect();
    let items: Vec<(String, f64)> = verdicts
        .iter()
        .map(|v| (v.example_id.clone(), v.confidence.unwrap_or_default()))
        .collect();
    let ranked = rank_by_confidence(&items);
    let n = ranked.len();
    let mut hits = 0usize;
    let mut points = Vec::with_capacity(n);
    let mut total = 0.0;
    for (k, (id, _)) in ranked.iter().enumerate() {
        hits += usize::from(correct[id]);
        let acc = hits as f64 / (k + 1) as f64;
        total += acc;
        points.push(((k + 1) as f64 / n as f64, acc));
    }
    Ok(CoverageAccuracyCurve {
        points,
        auc: total / n as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub group_id: usize,
    pub metrics: BTreeMap<String, f64>,
}

impl GroupMetrics {
    pub fn new(group_id: usize) -> Self {
        Self {
            group_id,
            metrics: BTreeMap::new(),
        }
    }

    pub fn set(&mut self, name: &str, value: f64) -> &mut Self {
        self.metrics.insert(name.to_string(), value);
        self
    }

    pub fn set_opt(&mut self, name: &str, value: Option<f64>) -> &mut Self {
        if let Some(v) = value {
            self.set(name, v);
        }
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    /// Population standard deviation; multiply by sqrt(n / (n - 1)) for the sample form.
    pub std: f64,
    pub groups: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub title: String,
    pub per_group: Vec<GroupMetrics>,
    pub summary: BTreeMap<String, MetricSummary>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Groups are ordered by id; each metric is summarized over the groups that report it.
pub fn aggregate(title: &str, groups: &[GroupMetrics]) -> Result<RunReport, EvalError> {
    if groups.is_empty() {
        return Err(EvalError::NoGroups);
    }
    let mut per_group = groups.to_vec();
    per_group.sort_by_key(|g| g.group_id);
    let mut collected: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for g in &per_group {
        for (k, v) in &g.metrics {
            collected.entry(k.clone()).or_default().push(*v);
        }
    }
    let summary = collected
        .into_iter()
        .map(|(k, vals)| {
            let (mean, std) = mean_std(&vals);
            (
                k,
                MetricSummary {
                    mean,
                    std,
                    groups: vals.len(),
                },
            )
        })
        .collect();
    Ok(RunReport {
        title: title.to_string(),
        per_group,
        summary,
        notes: Vec::new(),
    })
}

impl RunReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Aligned table: one row per group, then mean and std rows.
    pub fn to_table(&self) -> String {
        let names: Vec<&String> = self.summary.keys().collect();
        let mut rows: Vec<Vec<String>> = Vec::new();
        let mut header = vec!["group".to_string()];
        header.extend(names.iter().map(|n| n.to_string()));
        rows.push(header);
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
        for g in &self.per_group {
            let mut row = vec![g.group_id.to_string()];
            row.extend(names.iter().map(|n| fmt(g.metrics.get(*n).copied())));
            rows.push(row);
        }
        for (label, pick) in [("mean", 0usize), ("std", 1)] {
            let mut row = vec![label.to_string()];
            row.extend(names.iter().map(|n| {
                let s = &self.summary[*n];
                fmt(Some(if pick == 0 { s.mean } else { s.std }))
            }));
            rows.push(row);
        }
        let widths: Vec<usize> = (0..rows[0].len())
            .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = format!("{}\n", self.title);
        for row in &rows {
            let line: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (cell, w))| if i == 0 { format!("{cell:<w$}") } else { format!("{cell:>w$}") })
                .collect();
            out.push_str(line.join("  ").trim_end());
            out.push('\n');
        }
        for note in &self.notes {
            let _ = writeln!(out, "note: {note}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pred(answer: &str) -> Prediction {
        Prediction {
            example_id: "e".into(),
            answer: answer.into(),
            explanation: None,
            explanation_sentences: vec![],
            confidence: None,
            parse_ok: true,
            raw_text: String::new(),
        }
    }

    fn gold(task: TaskKind, answer: &str, aliases: &[&str]) -> Example {
        Example {
            id: "e".into(),
            task,
            context: vec![vec!["c.".into()]],
            question: "q".into(),
            answer: answer.into(),
            explanation: None,
            aliases: aliases.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn judge_normalizes() {
        assert!(judge_correct(&pred("mary."), &gold(TaskKind::SynthQa, "Mary", &[])));
        assert!(!judge_correct(&pred("Marie"), &gold(TaskKind::SynthQa, "Mary", &[])));
        assert!(judge_correct(&pred("the Beatles"), &gold(TaskKind::ContextQa, "Beatles", &[])));
        assert!(!judge_correct(&pred("US"), &gold(TaskKind::ContextQa, "United States", &[])));
        assert!(judge_correct(&pred("US"), &gold(TaskKind::ContextQa, "United States", &["U.S."])));
        assert!(!judge_correct(&Prediction::failed("e", "junk"), &gold(TaskKind::SynthQa, "junk", &[])));
        // Articles are not stripped for synthetic names.
        assert!(!judge_correct(&pred("the Mary"), &gold(TaskKind::SynthQa, "Mary", &[])));
    }

    fn v(id: &str, correct: bool, conf: Option<f64>) -> Verdict {
        Verdict {
            example_id: id.into(),
            correct,
            confidence: conf,
        }
    }

    #[test]
    fn congruence_hand_count() {
        let pairs = [(true, true), (false, false), (true, false), (false, false)];
        let mut verdicts = Vec::new();
        let mut assess = HashMap::new();
        for (i, (c, f)) in pairs.iter().enumerate() {
            let id = format!("x{i}");
            verdicts.push(v(&id, *c, None));
            assess.insert(
                id,
                ReliabilityAssessment {
                    factual: Some(*f),
                    consistent: Some(true),
                    factuality_score: None,
                },
            );
        }
        let c = congruence(&verdicts, &assess).unwrap();
        assert_eq!(c.acc, 0.5);
        assert_eq!(c.fac_rate, Some(0.25));
        assert_eq!(c.acc_eq_fac, Some(0.75));
        assert_eq!(c.acc_eq_con, Some(0.5));

        assess.remove("x0");
        assert!(matches!(congruence(&verdicts, &assess), Err(EvalError::IdMismatch { .. })));
    }

    #[test]
    fn two_item_curves() {
        let c = coverage_accuracy(&[v("a", true, Some(0.9)), v("b", false, Some(0.1))]).unwrap();
        assert_eq!(c.points, vec![(0.5, 1.0), (1.0, 0.5)]);
        assert_eq!(c.auc, 0.75);
        let c = coverage_accuracy(&[v("a", true, Some(0.1)), v("b", false, Some(0.9))]).unwrap();
        assert_eq!(c.auc, 0.25);
        assert_eq!(c.to_csv(), "coverage,accuracy\n0.5,0\n1,0.5\n");
    }

    #[test]
    fn missing_confidence_lists_ids() {
        let err = coverage_accuracy(&[v("a", true, None), v("b", true, Some(0.2)), v("c", false, None)]).unwrap_err();
        assert_eq!(err, EvalError::MissingConfidence(vec!["a".into(), "c".into()]));
    }

    #[test]
    fn aggregate_population_std() {
        let groups: Vec<GroupMetrics> = [60.0, 62.0, 64.0]
            .iter()
            .enumerate()
            .map(|(i, a)| {
                let mut g = GroupMetrics::new(i);
                g.set("accuracy", *a);
                g
            })
            .collect();
        let r = aggregate("t", &groups).unwrap();
        let s = r.summary["accuracy"];
        assert!((s.mean - 62.0).abs() < 1e-12);
        assert!((s.std - (8.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!((s.std - 1.633).abs() < 1e-3);
        let one = aggregate("t", &groups[..1]).unwrap();
        assert_eq!(one.summary["accuracy"].std, 0.0);
        assert!(aggregate("t", &[]).is_err());
    }

    #[test]
    fn table_is_aligned() {
        let mut g0 = GroupMetrics::new(1);
        g0.set("accuracy", 0.5).set("auc", 0.75);
        let mut g1 = GroupMetrics::new(0);
        g1.set("accuracy", 1.0);
        let r = aggregate("demo", &[g0, g1]).unwrap();
        let t = r.to_table();
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines[0], "demo");
        assert!(lines[1].starts_with("group"));
        assert!(lines[2].starts_with('0') && lines[2].ends_with('-'));
        assert!(lines[4].starts_with("mean"));
    }
}
