//! Explanation reliability: exact rule checks for the synthetic task and
//! lexical-overlap factuality scores for free-text explanations.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::corpus::{Example, TaskKind};
use crate::parsing::{extract_synth_variables, Prediction, SynthParse};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ReliabilityAssessment {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub factual: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub consistent: Option<bool>,
    /// Factuality factor in [0, 1] used by the calibrator.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub factuality_score: Option<f64>,
}

/// Lowercased alphanumeric runs.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenizedText {
    pub tokens: Vec<String>,
}

impl TokenizedText {
    pub fn new(text: &str) -> Self {
        Self {
            tokens: text
                .split(|c: char| !c.is_alphanumeric())
                .filter(|t| !t.is_empty())
                .map(str::to_lowercase)
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    fn token_set(&self) -> HashSet<&str> {
        self.tokens.iter().map(String::as_str).collect()
    }
}

/// A lexical score with a flag for degenerate (empty) input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LexicalScore {
    pub value: f64,
    pub empty_input: bool,
}

impl LexicalScore {
    fn empty() -> Self {
        Self {
            value: 0.0,
            empty_input: true,
        }
    }
}

fn overlap_fraction(sentence: &TokenizedText, paragraph: &HashSet<&str>) -> f64 {
    let hits = sentence
        .tokens
        .iter()
        .filter(|t| paragraph.contains(t.as_str()))
        .count();
    hits as f64 / sentence.len() as f64
}

/// Best fraction of the sentence's token positions found in any one paragraph.
pub fn factuality_score_sentence(sentence: &TokenizedText, paragraphs: &[TokenizedText]) -> LexicalScore {
    if sentence.is_empty() {
        log::warn!("factuality score requested for an empty sentence");
        return LexicalScore::empty();
    }
    let value = paragraphs
        .iter()
        .map(|p| overlap_fraction(sentence, &p.token_set()))
        .fold(0.0, f64::max);
    LexicalScore {
        value,
        empty_input: false,
    }
}

/// Minimum sentence score: every sentence must be grounded.
pub fn factuality_score_explanation(
    sentences: &[TokenizedText],
    paragraphs: &[TokenizedText],
) -> LexicalScore {
    if sentences.is_empty() {
        return LexicalScore::empty();
    }
    let mut empty_input = false;
    let value = sentences
        .iter()
        .map(|s| {
            let score = factuality_score_sentence(s, paragraphs);
            empty_input |= score.empty_input;
            score.value
        })
        .fold(1.0, f64::min);
    LexicalScore { value, empty_input }
}

/// Overlap of an NLI explanation with its premise.
pub fn nli_premise_overlap(explanation: &TokenizedText, premise: &TokenizedText) -> LexicalScore {
    factuality_score_sentence(explanation, std::slice::from_ref(premise))
}

fn normalize_sentence(s: &str) -> String {
    s.trim()
        .trim_end_matches(|c: char| matches!(c, '.' | '!' | '?') || c.is_whitespace())
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

fn normalize_slot(s: &str) -> String {
    let lower = s.trim().to_lowercase();
    let stripped = ["a ", "an ", "the "]
        .iter()
        .find_map(|a| lower.strip_prefix(a))
        .unwrap_or(&lower);
    stripped.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Answer entails the explanation's chain and the chain matches the question.
pub fn check_synth_consistency(parse: &SynthParse) -> bool {
    let eq = |a: &str, b: &str| normalize_slot(a) == normalize_slot(b);
    eq(&parse.n2, &parse.n4) && eq(&parse.n1, &parse.n3) && eq(&parse.p2, &parse.p1) && eq(&parse.v2, &parse.v1)
}

/// Both explanation clauses appear verbatim among the context sentences.
pub fn check_synth_factuality(context: &[Vec<String>], parse: &SynthParse) -> bool {
    let sentences: HashSet<String> = context.iter().flatten().map(|s| normalize_sentence(s)).collect();
    sentences.contains(&normalize_sentence(&parse.fact_clause()))
        && sentences.contains(&normalize_sentence(&parse.relation_clause()))
}

/// Assesses one prediction against its example.
///
/// Synthetic examples get exact factuality/consistency verdicts and a 0/1
/// factor. ContextQA gets the min-over-sentences, max-over-paragraphs lexical
/// score; NLI gets premise overlap. Unparsed predictions are neither factual
/// nor consistent and score 0.
pub fn assess(example: &Example, prediction: &Prediction, verbs: &[String]) -> ReliabilityAssessment {
    match example.task {
        TaskKind::SynthQa => {
            let (factual, consistent) = match extract_synth_variables(&example.question, prediction, verbs) {
                Ok(parse) => (
                    check_synth_factuality(&example.context, &parse),
                    check_synth_consistency(&parse),
                ),
                Err(_) => (false, false),
            };
            ReliabilityAssessment {
                factual: Some(factual),
                consistent: Some(consistent),
                factuality_score: Some(if factual { 1.0 } else { 0.0 }),
            }
        }
        TaskKind::ContextQa => {
            let score = if prediction.parse_ok {
                let paragraphs: Vec<TokenizedText> = (0..example.context.len())
                    .map(|i| TokenizedText::new(&example.paragraph_text(i)))
                    .collect();
                let sentences: Vec<TokenizedText> = prediction
                    .explanation_sentences
                    .iter()
                    .map(|s| TokenizedText::new(s))
                    .collect();
                factuality_score_explanation(&sentences, &paragraphs).value
            } else {
                0.0
            };
            ReliabilityAssessment {
                factuality_score: Some(score),
                ..Default::default()
            }
        }
        TaskKind::Nli => {
            let score = match (&prediction.explanation, prediction.parse_ok) {
                (Some(e), true) => nli_premise_overlap(
                    &TokenizedText::new(e),
                    &TokenizedText::new(&example.paragraph_text(0)),
                )
                .value,
                _ => 0.0,
            };
            ReliabilityAssessment {
                factuality_score: Some(score),
                ..Default::default()
            }
        }
    }
}
