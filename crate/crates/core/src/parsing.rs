//! Turns raw completion text into structured predictions.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::CompletionCandidate;
use crate::corpus::{NliLabel, TaskKind};
use crate::prompting::{clause_form, Paradigm, ParadigmKind, STEP_TRIGGER};
use crate::synthgen::indefinite_article;

/// Answer confidence: a scalar for QA, a distribution over
/// [`NliLabel::ALL`] for NLI.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Confidence {
    Scalar(f64),
    Distribution([f64; 3]),
}

impl Confidence {
    /// Probability assigned to the predicted answer.
    pub fn top(&self) -> f64 {
        match *self {
            Confidence::Scalar(p) => p,
            Confidence::Distribution(d) => d.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub example_id: String,
    /// Empty when `parse_ok` is false; canonical label for NLI.
    pub answer: String,
    pub explanation: Option<String>,
    pub explanation_sentences: Vec<String>,
    pub confidence: Option<Confidence>,
    pub parse_ok: bool,
    pub raw_text: String,
}

impl Prediction {
    pub fn failed(example_id: &str, raw_text: &str) -> Self {
        Self {
            example_id: example_id.to_string(),
            answer: String::new(),
            explanation: None,
            explanation_sentences: vec![],
            confidence: None,
            parse_ok: false,
            raw_text: raw_text.to_string(),
        }
    }

    pub fn nli_label(&self) -> Option<NliLabel> {
        NliLabel::from_canonical(&self.answer)
    }
}

static SYNTH_EP: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^(?i:because)\s+(.+),\s*(?i:the answer is)\s+(.+)$").unwrap());
static NLI_EP: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"^(?i:because)\s+(.+),\s*(?i:this|the)\s+(?i:answer is)\s+(.+)$").unwrap()
});
static COMMA_BECAUSE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^(.+?),\s*(?i:because)\s+(.+)$").unwrap());
static QA_EP: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^(.+?)\s*The answer is\s+(.+)$").unwrap());
static QA_PE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^(.+?)\.\s+The reasons are as follows\.\s+(.+)$").unwrap());
static QA_RESTATEMENT: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\s*The answer is [^.]*\.?\s*$").unwrap());
static ORDINAL_MARKER: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?:^|\s)(?:First|Second|Third|Fourth|Fifth|Finally|Then),\s+").unwrap()
});
static SENTENCE_END: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"[.!?]+(?:\s+|$)").unwrap());

fn strip_answer(s: &str) -> &str {
    s.trim()
        .trim_end_matches(|c: char| matches!(c, '.' | ',' | ';' | ':' | '!' | '?') || c.is_whitespace())
        .trim()
}

/// Splits a ContextQA explanation at ordinal markers, dropping the markers.
fn split_ordinal(explanation: &str) -> Vec<String> {
    let starts: Vec<(usize, usize)> = ORDINAL_MARKER
        .find_iter(explanation)
        .map(|m| (m.start(), m.end()))
        .collect();
    if starts.is_empty() {
        return split_terminal(explanation);
    }
    let mut out = Vec::new();
    let head = explanation[..starts[0].0].trim();
    if !head.is_empty() {
        out.push(head.to_string());
    }
    for (i, &(_, body_start)) in starts.iter().enumerate() {
        let end = starts.get(i + 1).map_or(explanation.len(), |n| n.0);
        let s = explanation[body_start..end].trim();
        if !s.is_empty() {
            out.push(s.to_string());
        }
    }
    out
}

fn split_terminal(explanation: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut last = 0;
    for m in SENTENCE_END.find_iter(explanation) {
        let s = explanation[last..m.end()].trim();
        if !s.is_empty() {
            out.push(s.to_string());
        }
        last = m.end();
    }
    let rest = explanation[last..].trim();
    if !rest.is_empty() {
        out.push(rest.to_string());
    }
    out
}

fn split_explanation(task: TaskKind, explanation: &str) -> Vec<String> {
    match task {
        TaskKind::SynthQa => explanation
            .split(" and ")
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect(),
        TaskKind::ContextQa => split_ordinal(explanation),
        TaskKind::Nli => split_terminal(explanation),
    }
}

/// Parses one completion. Never fails: unmatched text yields `parse_ok = false`.
pub fn parse_completion(
    task: TaskKind,
    paradigm: Paradigm,
    example_id: &str,
    text: &str,
) -> Prediction {
    let failed = || Prediction::failed(example_id, text);
    let Some(line) = text.lines().map(str::trim).find(|l| !l.is_empty()) else {
        return failed();
    };
    let body = line.strip_prefix(STEP_TRIGGER).unwrap_or(line).trim();

    let (answer, explanation): (&str, Option<String>) = match (paradigm.kind, task) {
        (ParadigmKind::FewShot, _) => (body, None),
        (ParadigmKind::ExplainThenPredict, TaskKind::SynthQa) => match SYNTH_EP.captures(body) {
            Some(c) => (c.get(2).unwrap().as_str(), Some(c[1].trim().to_string())),
            None => return failed(),
        },
        (ParadigmKind::ExplainThenPredict, TaskKind::Nli) => match NLI_EP.captures(body) {
            Some(c) => (c.get(2).unwrap().as_str(), Some(c[1].trim().to_string())),
            None => return failed(),
        },
        (ParadigmKind::ExplainThenPredict, TaskKind::ContextQa) => match QA_EP.captures(body) {
            // Greedy explanation so the last "The answer is" wins.
            Some(_) => {
                let idx = body.rfind("The answer is").unwrap();
                let expl = body[..idx].trim();
                let ans = body[idx + "The answer is".len()..].trim();
                (ans, Some(expl.to_string()))
            }
            None => return failed(),
        },
        (ParadigmKind::PredictThenExplain, TaskKind::SynthQa | TaskKind::Nli) => {
            match COMMA_BECAUSE.captures(body) {
                Some(c) => (
                    c.get(1).unwrap().as_str(),
                    Some(clause_form(&c[2]).to_string()),
                ),
                None => return failed(),
            }
        }
        (ParadigmKind::PredictThenExplain, TaskKind::ContextQa) => match QA_PE.captures(body) {
            Some(c) => {
                let expl = QA_RESTATEMENT.replace(c[2].trim(), "").trim().to_string();
                (c.get(1).unwrap().as_str(), Some(expl))
            }
            None => return failed(),
        },
    };

    let answer = strip_answer(answer);
    let answer = if task == TaskKind::Nli {
        match NliLabel::parse_loose(answer) {
            Some(l) => l.as_str().to_string(),
            None => return failed(),
        }
    } else {
        answer.to_string()
    };
    if answer.is_empty() {
        return failed();
    }
    if let Some(e) = &explanation {
        if e.is_empty() {
            return failed();
        }
    }
    let explanation_sentences = explanation
        .as_deref()
        .map(|e| split_explanation(task, e))
        .unwrap_or_default();
    Prediction {
        example_id: example_id.to_string(),
        answer,
        explanation,
        explanation_sentences,
        confidence: None,
        parse_ok: true,
        raw_text: text.to_string(),
    }
}

/// Variables of a synthetic-task (question, explanation, answer) triple:
/// question `Who V1 a P1?`, explanation `N1 is a P2 and N2 V2 N3`, answer `N4`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthParse {
    pub n1: String,
    pub n2: String,
    pub n3: String,
    pub n4: String,
    pub v1: String,
    pub v2: String,
    pub p1: String,
    pub p2: String,
}

impl SynthParse {
    /// `N1 is a P2.`
    pub fn fact_clause(&self) -> String {
        format!("{} is {} {}.", self.n1, indefinite_article(&self.p2), self.p2)
    }

    /// `N2 V2 N3.`
    pub fn relation_clause(&self) -> String {
        format!("{} {} {}.", self.n2, self.v2, self.n3)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ExtractError {
    #[error("prediction did not parse")]
    NotParsed,
    #[error("question does not match `Who <verb> a <profession>?`: {0:?}")]
    Question(String),
    #[error("explanation does not match the two-clause template: {0:?}")]
    Explanation(String),
}

static SYNTH_QUESTION: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^Who\s+(.+?)\s+(?:an?\s+)?(\S+?)\s*\?$").unwrap());
static FACT_CLAUSE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^(\S+)\s+is\s+(?:(?:an?|the)\s+)?(\S+)$").unwrap());
static RELATION_CLAUSE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^(\S+)\s+(.+?)\s+(\S+)$").unwrap());

pub(crate) fn split_question(question: &str, verbs: &[String]) -> Option<(String, String)> {
    let q = question.trim();
    let c = SYNTH_QUESTION.captures(q)?;
    let mut verb = c[1].to_string();
    let prof = c[2].to_string();
    // The lazy verb group stops before an article; prefer the longest pool verb.
    let words = q.strip_prefix("Who")?.trim_start();
    if let Some(v) = verbs
        .iter()
        .filter(|v| words.starts_with(v.as_str()) && words[v.len()..].starts_with(' '))
        .max_by_key(|v| v.len())
    {
        verb = v.clone();
    }
    Some((verb, prof))
}

fn split_relation(clause: &str, verbs: &[String]) -> Option<(String, String, String)> {
    let (first, rest) = clause.split_once(char::is_whitespace)?;
    let rest = rest.trim_start();
    if let Some(v) = verbs
        .iter()
        .filter(|v| {
            rest.starts_with(v.as_str())
                && rest[v.len()..].starts_with(' ')
                && !rest[v.len()..].trim().contains(' ')
        })
        .max_by_key(|v| v.len())
    {
        let object = rest[v.len()..].trim();
        return Some((first.to_string(), v.clone(), object.to_string()));
    }
    let c = RELATION_CLAUSE.captures(clause)?;
    Some((c[1].to_string(), c[2].to_string(), c[3].to_string()))
}

/// Extracts the eight synthetic-task variables. Accepts both clause orders.
/// `verbs` is the known verb pool used to resolve multiword verbs.
pub fn extract_synth_variables(
    question: &str,
    prediction: &Prediction,
    verbs: &[String],
) -> Result<SynthParse, ExtractError> {
    if !prediction.parse_ok {
        return Err(ExtractError::NotParsed);
    }
    let (v1, p1) =
        split_question(question, verbs).ok_or_else(|| ExtractError::Question(question.into()))?;
    let expl = prediction.explanation.as_deref().unwrap_or("").trim();
    let bad = || ExtractError::Explanation(expl.to_string());
    let (left, right) = expl.split_once(" and ").ok_or_else(bad)?;
    let (left, right) = (left.trim(), clause_form(right));
    // Standard order puts the profession fact first.
    let (fact, relation) = if FACT_CLAUSE.is_match(left) && !FACT_CLAUSE.is_match(right) {
        (left, right)
    } else if FACT_CLAUSE.is_match(right) {
        (right, left)
    } else {
        return Err(bad());
    };
    let fc = FACT_CLAUSE.captures(fact).ok_or_else(bad)?;
    let (n2, v2, n3) = split_relation(relation, verbs).ok_or_else(bad)?;
    Ok(SynthParse {
        n1: fc[1].to_string(),
        p2: fc[2].to_string(),
        n2,
        v2,
        n3,
        n4: prediction.answer.clone(),
        v1,
        p1,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceMode {
    /// exp of the summed answer-token logprobs.
    #[default]
    Joint,
    /// exp of the mean answer-token logprob.
    PerTokenMean,
}

fn token_offsets(candidate: &CompletionCandidate) -> Option<Vec<(usize, usize)>> {
    let tokens = candidate.token_logprobs.as_ref()?;
    let mut offsets = Vec::with_capacity(tokens.len());
    let mut pos = 0;
    for t in tokens {
        if !candidate.text[pos..].starts_with(&t.token) {
            return None;
        }
        offsets.push((pos, pos + t.token.len()));
        pos += t.token.len();
    }
    Some(offsets)
}

/// Byte range of the answer in the candidate text: after the final
/// "answer is" when present, otherwise its first occurrence.
pub(crate) fn answer_span(text: &str, answer: &str) -> Option<(usize, usize)> {
    let lower = text.to_ascii_lowercase();
    let needle = answer.to_ascii_lowercase();
    let from = lower.rfind("answer is ").map_or(0, |i| i + "answer is ".len());
    let start = lower[from..].find(&needle).map(|i| i + from)?;
    Some((start, start + needle.len()))
}

/// Reads an answer confidence from token logprobs. Returns `None` when the
/// prediction failed or logprobs are unavailable or misaligned.
pub fn extract_confidence(
    candidate: &CompletionCandidate,
    prediction: &Prediction,
    task: TaskKind,
    mode: ConfidenceMode,
) -> Option<Confidence> {
    if !prediction.parse_ok {
        return None;
    }
    let tokens = candidate.token_logprobs.as_ref()?;
    let offsets = token_offsets(candidate)?;
    let (start, end) = answer_span(&candidate.text, &prediction.answer)?;
    let covering: Vec<usize> = offsets
        .iter()
        .enumerate()
        .filter(|(_, &(s, e))| s < end && e > start)
        .map(|(i, _)| i)
        .collect();
    if covering.is_empty() {
        return None;
    }
    match task {
        TaskKind::SynthQa | TaskKind::ContextQa => {
            let sum: f64 = covering.iter().map(|&i| tokens[i].logprob).sum();
            let lp = match mode {
                ConfidenceMode::Joint => sum,
                ConfidenceMode::PerTokenMean => sum / covering.len() as f64,
            };
            Some(Confidence::Scalar(lp.exp().clamp(0.0, 1.0)))
        }
        TaskKind::Nli => {
            let emitted = prediction.nli_label()?;
            let first = &tokens[covering[0]];
            let mut lps = [None; 3];
            lps[emitted.index()] = Some(first.logprob);
            for label in NliLabel::ALL.into_iter().filter(|&l| l != emitted) {
                let word = label.as_str().to_ascii_lowercase();
                lps[label.index()] = first
                    .top
                    .iter()
                    .find(|(tok, _)| {
                        let t = tok.trim().to_ascii_lowercase();
                        !t.is_empty() && word.starts_with(&t)
                    })
                    .map(|&(_, lp)| lp);
            }
            let dist = if lps.iter().all(Option::is_some) {
                let probs = lps.map(|lp| lp.unwrap().exp());
                let z: f64 = probs.iter().sum();
                probs.map(|p| p / z)
            } else {
                let mass = first.logprob.exp().min(1.0);
                let mut d = [(1.0 - mass) / 2.0; 3];
                d[emitted.index()] = mass;
                d
            };
            Some(Confidence::Distribution(dist))
        }
    }
}
