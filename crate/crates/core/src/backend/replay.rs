use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    sha256_hex, BackendError, Completion, CompletionBackend, CompletionCandidate,
    CompletionRequest,
};
use crate::prompting::NLI_QUESTION_SUFFIX;

/// One recorded completion, matched by the test block's question line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayRecord {
    pub question: String,
    pub candidates: Vec<CompletionCandidate>,
    #[serde(default = "default_model")]
    pub model_id: String,
}

fn default_model() -> String {
    "replay".into()
}

fn question_key(q: &str) -> String {
    let q = q.trim();
    q.strip_suffix(NLI_QUESTION_SUFFIX).unwrap_or(q).trim().to_string()
}

/// Replays recorded completions for tasks the scripted mock does not model.
#[derive(Debug, Clone)]
pub struct ReplayBackend {
    records: HashMap<String, ReplayRecord>,
    fingerprint: String,
}

impl ReplayBackend {
    pub fn new(records: Vec<ReplayRecord>) -> Self {
        let fingerprint = sha256_hex(
            serde_json::to_string(&records)
                .expect("records serialize")
                .as_bytes(),
        );
        Self {
            records: records
                .into_iter()
                .map(|r| (question_key(&r.question), r))
                .collect(),
            fingerprint,
        }
    }

    /// Reads a JSONL fixture of [`ReplayRecord`]s.
    pub fn from_jsonl(path: &Path) -> Result<Self, BackendError> {
        let err = |message: String| BackendError::Cache {
            path: path.display().to_string(),
            message,
        };
        let file = File::open(path).map_err(|e| err(e.to_string()))?;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| err(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(
                serde_json::from_str(&line).map_err(|e| err(format!("line {}: {e}", i + 1)))?,
            );
        }
        Ok(Self::new(records))
    }
}

impl CompletionBackend for ReplayBackend {
    fn backend_id(&self) -> String {
        format!("replay:{}", &self.fingerprint[..16])
    }

    fn complete(&self, request: &CompletionRequest) -> Result<Completion, BackendError> {
        let block = request.prompt_text.rsplit("\n\n").next().unwrap_or("");
        let q = block
            .lines()
            .rev()
            .find_map(|l| l.strip_prefix("Q: "))
            .ok_or_else(|| BackendError::InvalidRequest("prompt has no question line".into()))?;
        let record = self.records.get(&question_key(q)).ok_or_else(|| {
            BackendError::Unsupported(format!("no recorded completion for question {q:?}"))
        })?;
        let mut candidates = record.candidates.clone();
        candidates.truncate(request.candidate_count);
        Ok(Completion {
            candidates,
            model_id: record.model_id.clone(),
            cached: false,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_on_question_and_strips_nli_suffix() {
        let backend = ReplayBackend::new(vec![ReplayRecord {
            question: "The person is a girl.".into(),
            candidates: vec![CompletionCandidate {
                text: "Neither, because not every person is a girl.".into(),
                token_logprobs: None,
            }],
            model_id: "m".into(),
        }]);
        let prompt = "shot\n\nA person bowls.\nQ: The person is a girl. True, False, or Neither?\nA: ";
        let c = backend.complete(&CompletionRequest::greedy(prompt, 8)).unwrap();
        assert!(c.candidates[0].text.starts_with("Neither"));
        let missing = "x\nQ: Other?\nA: ";
        assert!(backend.complete(&CompletionRequest::greedy(missing, 8)).is_err());
    }
}
