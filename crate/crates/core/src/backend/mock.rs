use std::collections::HashMap;
use std::sync::LazyLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{
    sha256_hex, BackendError, Completion, CompletionBackend, CompletionCandidate,
    CompletionRequest, TokenLogprob,
};
use crate::corpus::{Example, TaskKind};
use crate::parsing::{answer_span, split_question};
use crate::prompting::{render_answer, Paradigm, ParadigmKind, ANSWER_STUB};
use crate::synthgen::{render_explanation, ExplanationStyle, SynthPools};

/// Behaviour of the scripted synthetic-task model.
///
/// Rank-1 correctness, factuality and consistency are drawn per prompt. A
/// wrong answer with a factual explanation is necessarily inconsistent (a
/// consistent, grounded explanation would prove the answer), so
/// `consistent_rate` only applies where both outcomes are realizable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockScenario {
    pub seed: u64,
    pub correct_rate: f64,
    pub factual_given_correct: f64,
    pub factual_given_incorrect: f64,
    pub consistent_rate: f64,
    /// Highest rank at which a scripted rescue candidate may appear.
    pub candidate_count: usize,
    /// Probability that a wrong, nonfactual rank-1 answer is followed by the
    /// gold answer with a factual explanation at some rank in 2..=candidate_count.
    pub rescue_rate: f64,
}

impl Default for MockScenario {
    fn default() -> Self {
        Self::faithful(0)
    }
}

impl MockScenario {
    pub fn faithful(seed: u64) -> Self {
        Self {
            seed,
            correct_rate: 1.0,
            factual_given_correct: 1.0,
            factual_given_incorrect: 0.0,
            consistent_rate: 1.0,
            candidate_count: 5,
            rescue_rate: 0.0,
        }
    }

    pub fn new(seed: u64, correct_rate: f64, factual_given_correct: f64, factual_given_incorrect: f64) -> Self {
        Self {
            seed,
            correct_rate,
            factual_given_correct,
            factual_given_incorrect,
            ..Self::faithful(seed)
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        for (name, p) in [
            ("correct_rate", self.correct_rate),
            ("factual_given_correct", self.factual_given_correct),
            ("factual_given_incorrect", self.factual_given_incorrect),
            ("consistent_rate", self.consistent_rate),
            ("rescue_rate", self.rescue_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("{name} = {p} is outside [0, 1]"));
            }
        }
        if !(1..=super::MAX_CANDIDATES).contains(&self.candidate_count) {
            return Err(format!("candidate_count {} outside 1..=5", self.candidate_count));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Chain {
    subject: String,
    verb: String,
    object: String,
    profession: String,
}

/// The four chains of a synthetic context, keyed relative to the question.
struct Layout {
    target: Chain,
    same_verb: Chain,
    same_profession: Chain,
    diagonal: Chain,
}

static FACT: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^(\S+) is (?:an? )?(\S+?)\.?$").unwrap());

fn layout(example: &Example, verbs: &[String]) -> Result<Layout, BackendError> {
    let bad = |m: &str| BackendError::InvalidRequest(format!("{}: {m}", example.id));
    let mut professions = HashMap::new();
    let mut relations = Vec::new();
    for s in example.sentences() {
        if let Some(c) = FACT.captures(s.trim()) {
            professions.insert(c[1].to_string(), c[2].to_string());
        } else {
            let s = s.trim().trim_end_matches('.');
            let (subject, rest) = s.split_once(' ').ok_or_else(|| bad("bad sentence"))?;
            let (verb, object) = rest.rsplit_once(' ').ok_or_else(|| bad("bad sentence"))?;
            relations.push((subject.to_string(), verb.to_string(), object.to_string()));
        }
    }
    let (v, p) = split_question(&example.question, verbs).ok_or_else(|| bad("bad question"))?;
    let chains: Vec<Chain> = relations
        .into_iter()
        .filter_map(|(subject, verb, object)| {
            let profession = professions.get(&object)?.clone();
            Some(Chain {
                subject,
                verb,
                object,
                profession,
            })
        })
        .collect();
    let find = |same_verb: bool, same_prof: bool| {
        chains
            .iter()
            .find(|c| (c.verb == v) == same_verb && (c.profession == p) == same_prof)
            .cloned()
            .ok_or_else(|| bad("context does not hold the 2x2 chain layout"))
    };
    Ok(Layout {
        target: find(true, true)?,
        same_verb: find(true, false)?,
        same_profession: find(false, true)?,
        diagonal: find(false, false)?,
    })
}

fn explanation(object: &str, profession: &str, subject: &str, verb: &str, style: ExplanationStyle) -> String {
    render_explanation(object, profession, subject, verb, style)
}

static TOKEN: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\s*(?:[\p{L}\p{N}']+|[^\s\p{L}\p{N}'])").unwrap());

/// Word-level pseudo tokens; the answer span's first token carries `ln(confidence)`.
fn pseudo_logprobs(text: &str, answer: &str, confidence: f64) -> Vec<TokenLogprob> {
    let span = answer_span(text, answer);
    let mut first_answer_token = true;
    TOKEN
        .find_iter(text)
        .map(|m| {
            let in_answer = span.is_some_and(|(s, e)| m.start() < e && m.end() > s);
            let logprob = if in_answer {
                if std::mem::take(&mut first_answer_token) {
                    confidence.ln()
                } else {
                    0.0
                }
            } else {
                -0.05
            };
            TokenLogprob {
                token: m.as_str().to_string(),
                logprob,
                top: vec![],
            }
        })
        .collect()
}

fn candidate(paradigm: Paradigm, answer: &str, expl: &str, confidence: f64) -> CompletionCandidate {
    let text = render_answer(TaskKind::SynthQa, Paradigm::plain(paradigm.kind), answer, Some(expl));
    let token_logprobs = Some(pseudo_logprobs(&text, answer, confidence));
    CompletionCandidate {
        text,
        token_logprobs,
    }
}

/// Scripted completion for a synthetic-task example. Every draw is a
/// function of `(scenario.seed, draw_key)` only.
pub fn mock_behavior(
    scenario: &MockScenario,
    test: &Example,
    paradigm: Paradigm,
    style: ExplanationStyle,
    draw_key: &str,
    count: usize,
) -> Result<Completion, BackendError> {
    if test.task != TaskKind::SynthQa {
        return Err(BackendError::Unsupported(format!(
            "mock model answers synthetic examples only ({} is {})",
            test.id, test.task
        )));
    }
    let verbs = SynthPools::builtin().verbs;
    let l = layout(test, &verbs)?;
    let digest = sha256_hex(format!("{}\u{0}{draw_key}", scenario.seed).as_bytes());
    let mut rng = ChaCha8Rng::seed_from_u64(u64::from_str_radix(&digest[..16], 16).unwrap());

    let correct = rng.random::<f64>() < scenario.correct_rate;
    let factual_p = if correct {
        scenario.factual_given_correct
    } else {
        scenario.factual_given_incorrect
    };
    let factual = rng.random::<f64>() < factual_p;
    let consistent = rng.random::<f64>() < scenario.consistent_rate;
    let u_conf: f64 = rng.random();
    let rescued = rng.random::<f64>() < scenario.rescue_rate;
    let max_rank = scenario.candidate_count.max(2);
    let rescue_rank = rng.random_range(2..=max_rank);

    let (t, s, r, q) = (&l.target, &l.same_verb, &l.same_profession, &l.diagonal);
    let (answer, expl) = match (correct, factual, consistent) {
        (true, true, true) => (&t.subject, explanation(&t.object, &t.profession, &t.subject, &t.verb, style)),
        (true, true, false) => (&t.subject, explanation(&s.object, &s.profession, &s.subject, &s.verb, style)),
        (true, false, true) => (&t.subject, explanation(&s.object, &t.profession, &t.subject, &t.verb, style)),
        (true, false, false) => (&t.subject, explanation(&t.object, &s.profession, &t.subject, &t.verb, style)),
        (false, true, _) => (&s.subject, explanation(&s.object, &s.profession, &s.subject, &s.verb, style)),
        (false, false, true) => (&s.subject, explanation(&s.object, &t.profession, &s.subject, &t.verb, style)),
        (false, false, false) => (&r.subject, explanation(&s.object, &t.profession, &s.subject, &t.verb, style)),
    };
    let top_conf = if correct { 0.30 + 0.65 * u_conf } else { 0.15 + 0.65 * u_conf };

    let mut candidates = vec![candidate(paradigm, answer, &expl, top_conf)];
    // Fillers name a wrong person with an ungrounded explanation.
    let wrong = [s, r, q];
    let mut filler = 0;
    for rank in 2..=count {
        let conf = top_conf * 0.5f64.powi(rank as i32 - 1);
        if !correct && !factual && rescued && rank == rescue_rank {
            let gold = explanation(&t.object, &t.profession, &t.subject, &t.verb, style);
            candidates.push(candidate(paradigm, &t.subject, &gold, conf));
        } else {
            let w = wrong[filler % wrong.len()];
            filler += 1;
            let e = explanation(&w.object, &t.profession, &w.subject, &t.verb, style);
            candidates.push(candidate(paradigm, &w.subject, &e, conf));
        }
    }
    Ok(Completion {
        candidates,
        model_id: "mock".into(),
        cached: false,
    })
}

/// Recovers the synthetic test example from the final prompt block.
fn test_example_from_prompt(prompt: &str) -> Result<Example, BackendError> {
    let block = prompt.rsplit("\n\n").next().unwrap_or(prompt);
    let lines: Vec<&str> = block.lines().collect();
    let malformed = || BackendError::InvalidRequest("prompt does not end with a synthetic test block".into());
    if lines.len() < 3 || lines[lines.len() - 1].trim_end() != ANSWER_STUB.trim_end() {
        return Err(malformed());
    }
    let question = lines[lines.len() - 2].strip_prefix("Q: ").ok_or_else(malformed)?;
    let sentences: Vec<String> = lines[0]
        .split_inclusive('.')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect();
    Ok(Example {
        id: String::new(),
        task: TaskKind::SynthQa,
        context: vec![sentences],
        question: question.to_string(),
        answer: String::new(),
        explanation: None,
        aliases: vec![],
    })
}

/// Style of the shots' explanations: alternative when the first shot's
/// explanation opens with the relation clause.
fn detect_style(prompt: &str) -> ExplanationStyle {
    let Some(first_block) = prompt.split("\n\n").next() else {
        return ExplanationStyle::Standard;
    };
    let Some(answer_line) = first_block.lines().last() else {
        return ExplanationStyle::Standard;
    };
    let expl = answer_line
        .split_once("Because ")
        .or_else(|| answer_line.split_once(", because "))
        .map(|(_, e)| e);
    match expl.and_then(|e| e.split_once(" and ")) {
        Some((first, _)) if !FACT.is_match(first.trim()) => ExplanationStyle::Alternative,
        _ => ExplanationStyle::Standard,
    }
}

/// Mock backend answering synthetic-task prompts in a fixed paradigm.
#[derive(Debug, Clone)]
pub struct MockBackend {
    scenario: MockScenario,
    paradigm: Paradigm,
}

impl MockBackend {
    pub fn new(scenario: MockScenario, paradigm: Paradigm) -> Self {
        Self { scenario, paradigm }
    }

    pub fn scenario(&self) -> &MockScenario {
        &self.scenario
    }
}

impl CompletionBackend for MockBackend {
    fn backend_id(&self) -> String {
        format!(
            "mock:{}:{}",
            self.paradigm.kind,
            serde_json::to_string(&self.scenario).expect("scenario serializes")
        )
    }

    fn complete(&self, request: &CompletionRequest) -> Result<Completion, BackendError> {
        request.validate()?;
        if self.paradigm.kind != ParadigmKind::FewShot && !request.prompt_text.contains("\n\n") {
            log::debug!("mock prompt without shots; assuming standard explanation style");
        }
        let test = test_example_from_prompt(&request.prompt_text)?;
        let style = detect_style(&request.prompt_text);
        mock_behavior(
            &self.scenario,
            &test,
            self.paradigm,
            style,
            &request.prompt_text,
            request.candidate_count,
        )
    }
}
