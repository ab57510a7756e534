//! Synthetic two-hop "Who [verb] a [profession]?" task.
//!
//! Every context holds four chains `A [verb] B. B is a [profession].` built
//! from two verbs crossed with two professions, so exactly one chain answers
//! the question and no single sentence gives the answer away.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Dataset, Example, TaskKind};

const NAMES: &str = include_str!("../data/names.txt");
const VERBS: &str = include_str!("../data/verbs.txt");
const PROFESSIONS: &str = include_str!("../data/professions.txt");

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("pool file {path}: {source}")]
    PoolIo {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("pool too small: {0}")]
    PoolTooSmall(String),
    #[error("cannot apply {kind:?}: {reason}")]
    ImpossibleCorruption { kind: Corruption, reason: String },
}

/// `"an"` before a vowel-initial word, `"a"` otherwise.
pub fn indefinite_article(word: &str) -> &'static str {
    match word.chars().next().map(|c| c.to_ascii_lowercase()) {
        Some('a' | 'e' | 'i' | 'o' | 'u') => "an",
        _ => "a",
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthPools {
    pub names: Vec<String>,
    pub verbs: Vec<String>,
    pub professions: Vec<String>,
}

fn pool_lines(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect()
}

impl SynthPools {
    /// The shipped pools: 50 names, 30 verb phrases, 30 professions.
    pub fn builtin() -> Self {
        Self {
            names: pool_lines(NAMES),
            verbs: pool_lines(VERBS),
            professions: pool_lines(PROFESSIONS),
        }
    }

    /// Loads `names.txt`, `verbs.txt` and `professions.txt` from a directory.
    pub fn from_dir(dir: &Path) -> Result<Self, SynthError> {
        let read = |file: &str| {
            let path = dir.join(file);
            std::fs::read_to_string(&path)
                .map(|t| pool_lines(&t))
                .map_err(|source| SynthError::PoolIo {
                    path: path.display().to_string(),
                    source,
                })
        };
        let pools = Self {
            names: read("names.txt")?,
            verbs: read("verbs.txt")?,
            professions: read("professions.txt")?,
        };
        pools.check()?;
        Ok(pools)
    }

    fn check(&self) -> Result<(), SynthError> {
        if self.names.len() < 8 {
            return Err(SynthError::PoolTooSmall("need at least 8 names".into()));
        }
        if self.verbs.len() < 2 || self.professions.len() < 2 {
            return Err(SynthError::PoolTooSmall(
                "need at least 2 verbs and 2 professions".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExplanationStyle {
    /// `B is a [profession] and A [verb] B`
    #[default]
    Standard,
    /// `A [verb] B and B is a [profession]`
    Alternative,
}

impl FromStr for ExplanationStyle {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "standard" => Ok(Self::Standard),
            "alternative" => Ok(Self::Alternative),
            other => Err(format!("unknown explanation style {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChainTemplate {
    pub subject: String,
    pub object: String,
    pub verb: String,
    pub profession: String,
}

impl ChainTemplate {
    pub fn relation_sentence(&self) -> String {
        format!("{} {} {}.", self.subject, self.verb, self.object)
    }

    pub fn profession_sentence(&self) -> String {
        format!(
            "{} is {} {}.",
            self.object,
            indefinite_article(&self.profession),
            self.profession
        )
    }
}

/// Two-clause explanation for a chain, without terminal punctuation.
pub fn render_explanation(
    object: &str,
    profession: &str,
    subject: &str,
    verb: &str,
    style: ExplanationStyle,
) -> String {
    let fact = format!("{object} is {} {profession}", indefinite_article(profession));
    let relation = format!("{subject} {verb} {object}");
    match style {
        ExplanationStyle::Standard => format!("{fact} and {relation}"),
        ExplanationStyle::Alternative => format!("{relation} and {fact}"),
    }
}

pub fn render_question(verb: &str, profession: &str) -> String {
    format!("Who {verb} {} {profession}?", indefinite_article(profession))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthInstance {
    pub id: String,
    /// Chains in (verb0,prof0), (verb0,prof1), (verb1,prof0), (verb1,prof1) order.
    pub chains: [ChainTemplate; 4],
    pub target_index: usize,
    /// Rendered context sentences after shuffling.
    pub sentences: Vec<String>,
    pub style: ExplanationStyle,
}

impl SynthInstance {
    pub fn target(&self) -> &ChainTemplate {
        &self.chains[self.target_index]
    }

    pub fn question(&self) -> String {
        let t = self.target();
        render_question(&t.verb, &t.profession)
    }

    pub fn answer(&self) -> &str {
        &self.target().subject
    }

    pub fn gold_explanation(&self) -> String {
        let t = self.target();
        render_explanation(&t.object, &t.profession, &t.subject, &t.verb, self.style)
    }

    pub fn to_example(&self) -> Example {
        Example {
            id: self.id.clone(),
            task: TaskKind::SynthQa,
            context: vec![self.sentences.clone()],
            question: self.question(),
            answer: self.answer().to_string(),
            explanation: Some(self.gold_explanation()),
            aliases: vec![],
        }
    }

    /// Chain sharing the target's verb but not its profession.
    fn sibling_same_verb(&self) -> &ChainTemplate {
        &self.chains[self.target_index ^ 1]
    }

    /// Chain sharing the target's profession but not its verb.
    fn sibling_same_profession(&self) -> &ChainTemplate {
        &self.chains[self.target_index ^ 2]
    }

    fn names(&self) -> impl Iterator<Item = &str> {
        self.chains
            .iter()
            .flat_map(|c| [c.subject.as_str(), c.object.as_str()])
    }
}

fn sample_instance(
    rng: &mut ChaCha8Rng,
    pools: &SynthPools,
    id: String,
    style: ExplanationStyle,
) -> SynthInstance {
    let names: Vec<&String> = pools.names.choose_multiple(rng, 8).collect();
    let verbs: Vec<&String> = pools.verbs.choose_multiple(rng, 2).collect();
    let profs: Vec<&String> = pools.professions.choose_multiple(rng, 2).collect();
    let chain = |i: usize| ChainTemplate {
        subject: names[2 * i].clone(),
        object: names[2 * i + 1].clone(),
        verb: verbs[i / 2].clone(),
        profession: profs[i % 2].clone(),
    };
    let chains = [chain(0), chain(1), chain(2), chain(3)];
    let target_index = rng.random_range(0..4);
    let mut sentences: Vec<String> = chains
        .iter()
        .flat_map(|c| [c.relation_sentence(), c.profession_sentence()])
        .collect();
    sentences.shuffle(rng);
    SynthInstance {
        id,
        chains,
        target_index,
        sentences,
        style,
    }
}

pub fn generate_instances(
    pools: &SynthPools,
    seed: u64,
    n: usize,
    style: ExplanationStyle,
) -> Result<Vec<SynthInstance>, SynthError> {
    pools.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|i| sample_instance(&mut rng, pools, format!("synth-{seed}-{i:06}"), style))
        .collect())
}

/// Generates `n` examples from the built-in pools. Deterministic in `(seed, n, style)`.
pub fn generate(seed: u64, n: usize, style: ExplanationStyle) -> Dataset {
    let instances = generate_instances(&SynthPools::builtin(), seed, n, style)
        .expect("built-in pools are large enough");
    Dataset::new(
        format!("synth-{seed}"),
        TaskKind::SynthQa,
        instances.iter().map(SynthInstance::to_example).collect(),
    )
}

/// Systematic edits of a gold (answer, explanation) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Corruption {
    /// Answer replaced by another in-context name.
    SwapAnswerName,
    /// Explanation's profession replaced by the instance's other profession.
    SwapExplanationProfession,
    /// Explanation's verb replaced by the instance's other verb.
    SwapExplanationVerb,
    /// Subject of the relation clause replaced by another in-context name.
    SwapExplanationSubject,
    /// Object of the relation clause replaced by another in-context name.
    SwapExplanationObject,
    /// Same-verb sibling chain presented as if it had the asked profession,
    /// answered with that chain's subject.
    HallucinateSentence,
}

impl Corruption {
    pub const ALL: [Corruption; 6] = [
        Corruption::SwapAnswerName,
        Corruption::SwapExplanationProfession,
        Corruption::SwapExplanationVerb,
        Corruption::SwapExplanationSubject,
        Corruption::SwapExplanationObject,
        Corruption::HallucinateSentence,
    ];

    /// Checker verdict every corrupted instance of this kind must receive.
    ///
    /// A profession, verb, subject or object that differs from the context
    /// makes the edited clause absent from the context and also breaks the
    /// matching consistency rule, so those kinds flip both flags.
    pub fn expected(self) -> ExpectedVerdict {
        let (factual, consistent) = match self {
            Corruption::SwapAnswerName => (true, false),
            Corruption::SwapExplanationProfession
            | Corruption::SwapExplanationVerb
            | Corruption::SwapExplanationSubject
            | Corruption::SwapExplanationObject => (false, false),
            Corruption::HallucinateSentence => (false, true),
        };
        ExpectedVerdict {
            factual,
            consistent,
        }
    }
}

impl fmt::Display for Corruption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExpectedVerdict {
    pub factual: bool,
    pub consistent: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorruptedExample {
    pub example: Example,
    pub kind: Corruption,
    pub expected: ExpectedVerdict,
}

pub fn corrupt(
    instance: &SynthInstance,
    kind: Corruption,
    seed: u64,
) -> Result<CorruptedExample, SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = instance.target();
    let impossible = |reason: &str| SynthError::ImpossibleCorruption {
        kind,
        reason: reason.to_string(),
    };
    let other_name = |rng: &mut ChaCha8Rng, exclude: &[&str]| -> Result<String, SynthError> {
        let options: Vec<&str> = instance.names().filter(|n| !exclude.contains(n)).collect();
        options
            .choose(rng)
            .map(|s| s.to_string())
            .ok_or_else(|| impossible("no alternative name in context"))
    };
    let style = instance.style;
    let mut answer = t.subject.clone();
    let explanation = match kind {
        Corruption::SwapAnswerName => {
            answer = other_name(&mut rng, &[&t.subject])?;
            instance.gold_explanation()
        }
        Corruption::SwapExplanationProfession => {
            let other = &instance.sibling_same_verb().profession;
            if *other == t.profession {
                return Err(impossible("instance has a single profession"));
            }
            render_explanation(&t.object, other, &t.subject, &t.verb, style)
        }
        Corruption::SwapExplanationVerb => {
            let other = &instance.sibling_same_profession().verb;
            if *other == t.verb {
                return Err(impossible("instance has a single verb"));
            }
            render_explanation(&t.object, &t.profession, &t.subject, other, style)
        }
        Corruption::SwapExplanationSubject => {
            let x = other_name(&mut rng, &[&t.subject, &t.object])?;
            render_explanation(&t.object, &t.profession, &x, &t.verb, style)
        }
        Corruption::SwapExplanationObject => {
            let x = other_name(&mut rng, &[&t.subject, &t.object])?;
            let fact_object = &t.object;
            // Only the relation clause's object changes; the fact clause keeps B.
            let fact = format!(
                "{fact_object} is {} {}",
                indefinite_article(&t.profession),
                t.profession
            );
            let relation = format!("{} {} {x}", t.subject, t.verb);
            match style {
                ExplanationStyle::Standard => format!("{fact} and {relation}"),
                ExplanationStyle::Alternative => format!("{relation} and {fact}"),
            }
        }
        Corruption::HallucinateSentence => {
            let s = instance.sibling_same_verb();
            if s.profession == t.profession {
                return Err(impossible("instance has a single profession"));
            }
            answer = s.subject.clone();
            render_explanation(&s.object, &t.profession, &s.subject, &t.verb, style)
        }
    };
    let mut example = instance.to_example();
    example.answer = answer;
    example.explanation = Some(explanation);
    Ok(CorruptedExample {
        example,
        kind,
        expected: kind.expected(),
    })
}
