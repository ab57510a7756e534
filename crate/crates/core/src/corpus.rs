//! Core domain types and the JSONL dataset format.
//!
//! One record per line:
//!
//! ```text
//! {"id":"q1","task":"nli","context":[["A person in black ..."]],"question":"The person is a girl.","answer":"Neither","explanation":"not every person is a girl"}
//! ```
//!
//! `context` is a list of paragraphs, each a list of pre-split sentences.
//! ContextQA records may carry an optional `aliases` array of accepted
//! alternative answers.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: io error: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed record: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: duplicate id {id:?} on lines {first} and {second}")]
    DuplicateId {
        path: PathBuf,
        id: String,
        first: usize,
        second: usize,
    },
    #[error("{path}:{line}: {message}")]
    Invalid {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskKind {
    #[serde(rename = "synth")]
    SynthQa,
    #[serde(rename = "context_qa")]
    ContextQa,
    #[serde(rename = "nli")]
    Nli,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::SynthQa => "synth",
            TaskKind::ContextQa => "context_qa",
            TaskKind::Nli => "nli",
        }
    }

    pub fn is_qa(self) -> bool {
        !matches!(self, TaskKind::Nli)
    }

    /// Default number of in-context shots per group.
    pub fn default_shots(self) -> usize {
        match self {
            TaskKind::SynthQa => 16,
            TaskKind::ContextQa => 6,
            TaskKind::Nli => 32,
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "synth" => Ok(TaskKind::SynthQa),
            "context_qa" => Ok(TaskKind::ContextQa),
            "nli" => Ok(TaskKind::Nli),
            other => Err(format!("unknown task {other:?} (expected synth, context_qa or nli)")),
        }
    }
}

/// Three-way NLI label in its prompt surface form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NliLabel {
    True,
    False,
    Neither,
}

impl NliLabel {
    /// Canonical class order used for probability vectors and calibrator classes.
    pub const ALL: [NliLabel; 3] = [NliLabel::True, NliLabel::False, NliLabel::Neither];

    pub fn as_str(self) -> &'static str {
        match self {
            NliLabel::True => "True",
            NliLabel::False => "False",
            NliLabel::Neither => "Neither",
        }
    }

    pub fn index(self) -> usize {
        match self {
            NliLabel::True => 0,
            NliLabel::False => 1,
            NliLabel::Neither => 2,
        }
    }

    /// Exact canonical spelling only.
    pub fn from_canonical(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|l| l.as_str() == s)
    }

    /// Case-insensitive, ignoring surrounding whitespace and punctuation.
    pub fn parse_loose(s: &str) -> Option<Self> {
        let t = s.trim().trim_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace());
        Self::ALL
            .into_iter()
            .find(|l| l.as_str().eq_ignore_ascii_case(t))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub task: TaskKind,
    pub context: Vec<Vec<String>>,
    pub question: String,
    pub answer: String,
    pub explanation: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub aliases: Vec<String>,
}

impl Example {
    pub fn sentences(&self) -> impl Iterator<Item = &str> {
        self.context.iter().flatten().map(String::as_str)
    }

    /// Sentences of one paragraph joined by single spaces.
    pub fn paragraph_text(&self, index: usize) -> String {
        self.context[index].join(" ")
    }

    pub fn nli_label(&self) -> Option<NliLabel> {
        NliLabel::from_canonical(&self.answer)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.id.trim().is_empty() {
            return Err("empty id".into());
        }
        if self.context.is_empty() || self.context.iter().any(Vec::is_empty) {
            return Err(format!("{}: context must hold at least one non-empty paragraph", self.id));
        }
        if self.sentences().any(|s| s.trim().is_empty()) {
            return Err(format!("{}: empty context sentence", self.id));
        }
        if self.task == TaskKind::Nli {
            if self.context.len() != 1 {
                return Err(format!("{}: NLI context must be a single premise paragraph", self.id));
            }
            if self.nli_label().is_none() {
                return Err(format!(
                    "{}: NLI label {:?} is not one of True, False, Neither",
                    self.id, self.answer
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub name: String,
    pub task: TaskKind,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, task: TaskKind, examples: Vec<Example>) -> Self {
        Self {
            name: name.into(),
            task,
            examples,
        }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Example> {
        self.examples.iter().find(|e| e.id == id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShotGroup {
    pub group_id: usize,
    pub shots: Vec<Example>,
}

/// Reads a JSONL dataset, preserving file order. Blank lines are skipped.
pub fn load_dataset(path: &Path, task: TaskKind) -> Result<Dataset, DatasetError> {
    let io_err = |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io_err)?);
    let mut examples = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let example: Example = serde_json::from_str(&line).map_err(|e| DatasetError::Malformed {
            path: path.to_path_buf(),
            line: lineno,
            message: e.to_string(),
        })?;
        let invalid = |message: String| DatasetError::Invalid {
            path: path.to_path_buf(),
            line: lineno,
            message,
        };
        if example.task != task {
            return Err(invalid(format!(
                "{}: record task {} does not match requested task {}",
                example.id, example.task, task
            )));
        }
        example.validate().map_err(invalid)?;
        if let Some(&first) = seen.get(&example.id) {
            return Err(DatasetError::DuplicateId {
                path: path.to_path_buf(),
                id: example.id,
                first,
                second: lineno,
            });
        }
        seen.insert(example.id.clone(), lineno);
        examples.push(example);
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(Dataset::new(name, task, examples))
}

pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<(), DatasetError> {
    let io_err = |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
    for example in &dataset.examples {
        let line = serde_json::to_string(example).expect("examples always serialize");
        writeln!(out, "{line}").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}
