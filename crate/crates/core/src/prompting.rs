//! Prompt rendering for the three prompting paradigms and shot-group sampling.
//!
//! A prompt is a sequence of blocks separated by one blank line. Each shot
//! block ends with a filled answer line; the final test block ends with the
//! stub `"A: "`.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Dataset, Example, ShotGroup, TaskKind};
use crate::reliability::TokenizedText;

pub const STEP_TRIGGER: &str = "Let's think step by step.";
pub const NLI_QUESTION_SUFFIX: &str = "True, False, or Neither?";
pub const ANSWER_STUB: &str = "A: ";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("pool holds {pool} examples but {shots} shots were requested")]
    PoolTooSmall { pool: usize, shots: usize },
    #[error("examples without gold explanation: {}", .0.join(", "))]
    MissingExplanations(Vec<String>),
    #[error("duplicate shot ids in group: {}", .0.join(", "))]
    DuplicateShots(Vec<String>),
    #[error("the step-by-step trigger only applies to explain-then-predict")]
    TriggerWithoutExplainFirst,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParadigmKind {
    FewShot,
    ExplainThenPredict,
    PredictThenExplain,
}

impl FromStr for ParadigmKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "few_shot" | "fewshot" => Ok(Self::FewShot),
            "explain_then_predict" | "e-p" | "ep" => Ok(Self::ExplainThenPredict),
            "predict_then_explain" | "p-e" | "pe" => Ok(Self::PredictThenExplain),
            other => Err(format!("unknown paradigm {other:?}")),
        }
    }
}

impl fmt::Display for ParadigmKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::FewShot => "few_shot",
            Self::ExplainThenPredict => "explain_then_predict",
            Self::PredictThenExplain => "predict_then_explain",
        })
    }
}

impl ParadigmKind {
    pub fn uses_explanations(self) -> bool {
        self != Self::FewShot
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Paradigm {
    pub kind: ParadigmKind,
    pub step_trigger: bool,
}

impl Paradigm {
    pub const FEW_SHOT: Paradigm = Paradigm::plain(ParadigmKind::FewShot);
    pub const EXPLAIN_THEN_PREDICT: Paradigm = Paradigm::plain(ParadigmKind::ExplainThenPredict);
    pub const PREDICT_THEN_EXPLAIN: Paradigm = Paradigm::plain(ParadigmKind::PredictThenExplain);
    pub const ALL: [Paradigm; 3] = [
        Self::FEW_SHOT,
        Self::EXPLAIN_THEN_PREDICT,
        Self::PREDICT_THEN_EXPLAIN,
    ];

    pub const fn plain(kind: ParadigmKind) -> Self {
        Self {
            kind,
            step_trigger: false,
        }
    }

    pub fn new(kind: ParadigmKind, step_trigger: bool) -> Result<Self, PromptError> {
        if step_trigger && kind != ParadigmKind::ExplainThenPredict {
            return Err(PromptError::TriggerWithoutExplainFirst);
        }
        Ok(Self { kind, step_trigger })
    }

    pub fn uses_explanations(self) -> bool {
        self.kind.uses_explanations()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub text: String,
    pub test_example_id: String,
    pub paradigm: Paradigm,
    pub shot_group_id: usize,
}

/// Explanation text with trailing whitespace and sentence-final period removed,
/// for templates that append their own punctuation.
pub fn clause_form(explanation: &str) -> &str {
    explanation.trim().trim_end_matches('.').trim_end()
}

/// Renders an answer line body (everything after `"A: "`).
pub fn render_answer(
    task: TaskKind,
    paradigm: Paradigm,
    answer: &str,
    explanation: Option<&str>,
) -> String {
    let expl = explanation.unwrap_or("").trim();
    let trigger = if paradigm.step_trigger {
        format!("{STEP_TRIGGER} ")
    } else {
        String::new()
    };
    match (paradigm.kind, task) {
        (ParadigmKind::FewShot, _) => answer.to_string(),
        (ParadigmKind::ExplainThenPredict, TaskKind::SynthQa) => {
            format!("{trigger}Because {}, the answer is {answer}.", clause_form(expl))
        }
        (ParadigmKind::ExplainThenPredict, TaskKind::Nli) => {
            format!("{trigger}Because {}, this answer is {answer}.", clause_form(expl))
        }
        (ParadigmKind::ExplainThenPredict, TaskKind::ContextQa) => {
            format!("{trigger}{expl} The answer is {answer}.")
        }
        (ParadigmKind::PredictThenExplain, TaskKind::SynthQa | TaskKind::Nli) => {
            format!("{answer}, because {}.", clause_form(expl))
        }
        (ParadigmKind::PredictThenExplain, TaskKind::ContextQa) => {
            format!("{answer}. The reasons are as follows. {expl}")
        }
    }
}

fn render_inputs(example: &Example) -> Vec<String> {
    match example.task {
        TaskKind::SynthQa => vec![
            example.sentences().collect::<Vec<_>>().join(" "),
            format!("Q: {}", example.question),
        ],
        TaskKind::ContextQa => {
            let mut lines: Vec<String> = (0..example.context.len())
                .map(|i| example.paragraph_text(i))
                .collect();
            lines.push(format!("Q: {}", example.question));
            lines
        }
        TaskKind::Nli => vec![
            example.paragraph_text(0),
            format!("Q: {} {NLI_QUESTION_SUFFIX}", example.question.trim()),
        ],
    }
}

/// One shot block with its gold answer line.
pub fn render_shot(example: &Example, paradigm: Paradigm) -> String {
    let mut lines = render_inputs(example);
    lines.push(format!(
        "{ANSWER_STUB}{}",
        render_answer(
            example.task,
            paradigm,
            &example.answer,
            example.explanation.as_deref()
        )
    ));
    lines.join("\n")
}

fn missing_explanations<'a>(examples: impl Iterator<Item = &'a Example>) -> Vec<String> {
    examples
        .filter(|e| e.explanation.as_deref().is_none_or(|x| x.trim().is_empty()))
        .map(|e| e.id.clone())
        .collect()
}

pub fn render_prompt(
    group: &ShotGroup,
    test: &Example,
    paradigm: Paradigm,
) -> Result<Prompt, PromptError> {
    if paradigm.uses_explanations() {
        let missing = missing_explanations(group.shots.iter());
        if !missing.is_empty() {
            return Err(PromptError::MissingExplanations(missing));
        }
    }
    let mut seen = HashSet::new();
    let dups: Vec<String> = group
        .shots
        .iter()
        .filter(|s| !seen.insert(s.id.as_str()))
        .map(|s| s.id.clone())
        .collect();
    if !dups.is_empty() {
        return Err(PromptError::DuplicateShots(dups));
    }
    let mut blocks: Vec<String> = group
        .shots
        .iter()
        .map(|s| render_shot(s, paradigm))
        .collect();
    let mut test_lines = render_inputs(test);
    test_lines.push(ANSWER_STUB.to_string());
    blocks.push(test_lines.join("\n"));
    Ok(Prompt {
        text: blocks.join("\n\n"),
        test_example_id: test.id.clone(),
        paradigm,
        shot_group_id: group.group_id,
    })
}

/// Draws `groups` independent groups of `shots` distinct examples each.
pub fn sample_shot_groups(
    pool: &Dataset,
    shots: usize,
    groups: usize,
    seed: u64,
    require_explanations: bool,
) -> Result<Vec<ShotGroup>, PromptError> {
    if pool.len() < shots {
        return Err(PromptError::PoolTooSmall {
            pool: pool.len(),
            shots,
        });
    }
    if require_explanations {
        let missing = missing_explanations(pool.examples.iter());
        if !missing.is_empty() {
            return Err(PromptError::MissingExplanations(missing));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..groups)
        .map(|group_id| ShotGroup {
            group_id,
            shots: rand::seq::index::sample(&mut rng, pool.len(), shots)
                .into_iter()
                .map(|i| pool.examples[i].clone())
                .collect(),
        })
        .collect())
}

/// Similarity between a candidate shot and a test example.
pub trait ShotSimilarity {
    fn similarity(&self, shot: &Example, test: &Example) -> f64;
}

/// Jaccard overlap of question and context token sets.
#[derive(Debug, Clone, Copy, Default)]
pub struct TokenOverlap;

impl ShotSimilarity for TokenOverlap {
    fn similarity(&self, shot: &Example, test: &Example) -> f64 {
        let bag = |e: &Example| -> HashSet<String> {
            let mut text = e.question.clone();
            for s in e.sentences() {
                text.push(' ');
                text.push_str(s);
            }
            TokenizedText::new(&text).tokens.into_iter().collect()
        };
        let (a, b) = (bag(shot), bag(test));
        let union = a.union(&b).count();
        if union == 0 {
            0.0
        } else {
            a.intersection(&b).count() as f64 / union as f64
        }
    }
}

/// The `k` pool examples most similar to `test`, ties broken by pool order.
pub fn nearest_shots(
    pool: &Dataset,
    test: &Example,
    k: usize,
    similarity: &dyn ShotSimilarity,
) -> ShotGroup {
    let mut scored: Vec<(usize, f64)> = pool
        .examples
        .iter()
        .enumerate()
        .filter(|(_, e)| e.id != test.id)
        .map(|(i, e)| (i, similarity.similarity(e, test)))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ShotGroup {
        group_id: 0,
        shots: scored
            .into_iter()
            .take(k)
            .map(|(i, _)| pool.examples[i].clone())
            .collect(),
    }
}
