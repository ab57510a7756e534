//! Answer selection: reject nonfactual candidates down the top-k list, and
//! confidence-threshold abstention.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::parsing::Prediction;
use crate::reliability::ReliabilityAssessment;

#[derive(Debug, Error, PartialEq)]
pub enum SelectionError {
    #[error("no candidates to select from")]
    Empty,
    #[error("candidate ranks must run 1..={expected}, found rank {found} at position {position}")]
    Ranks { expected: usize, found: usize, position: usize },
    #[error("coverage must lie in (0, 1], got {0}")]
    Coverage(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateAnswer {
    pub rank: usize,
    pub prediction: Prediction,
    pub assessment: ReliabilityAssessment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub chosen: Prediction,
    pub chosen_rank: usize,
    pub fallback_used: bool,
    pub abstained: bool,
}

/// Lowest-rank candidate whose explanation is factual; rank 1 flagged as a
/// fallback when none is.
pub fn reject_until_factual(candidates: &[CandidateAnswer]) -> Result<SelectionResult, SelectionError> {
    if candidates.is_empty() {
        return Err(SelectionError::Empty);
    }
    for (i, c) in candidates.iter().enumerate() {
        if c.rank != i + 1 {
            return Err(SelectionError::Ranks {
                expected: candidates.len(),
                found: c.rank,
                position: i,
            });
        }
    }
    let hit = candidates
        .iter()
        .find(|c| c.prediction.parse_ok && c.assessment.factual == Some(true));
    Ok(match hit {
        Some(c) => SelectionResult {
            chosen: c.prediction.clone(),
            chosen_rank: c.rank,
            fallback_used: false,
            abstained: false,
        },
        None => SelectionResult {
            chosen: candidates[0].prediction.clone(),
            chosen_rank: 1,
            fallback_used: true,
            abstained: false,
        },
    })
}

/// Ids of the `ceil(coverage * N)` most confident items. Ties go to the
/// smaller id. The returned ids are in ranking order.
pub fn select_by_threshold(items: &[(String, f64)], coverage: f64) -> Result<Vec<String>, SelectionError> {
    if !(coverage > 0.0 && coverage <= 1.0) {
        return Err(SelectionError::Coverage(coverage));
    }
    let ranked = rank_by_confidence(items);
    let k = ((coverage * items.len() as f64).ceil() as usize).min(items.len());
    Ok(ranked.into_iter().take(k).map(|(id, _)| id.to_string()).collect())
}

/// Confidence descending, ascending id on ties.
pub fn rank_by_confidence(items: &[(String, f64)]) -> Vec<(&str, f64)> {
    let mut ranked: Vec<(&str, f64)> = items.iter().map(|(id, c)| (id.as_str(), *c)).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cand(rank: usize, answer: &str, factual: bool) -> CandidateAnswer {
        CandidateAnswer {
            rank,
            prediction: Prediction {
                example_id: "x".into(),
                answer: answer.into(),
                explanation: Some("e".into()),
                explanation_sentences: vec!["e".into()],
                confidence: None,
                parse_ok: true,
                raw_text: String::new(),
            },
            assessment: ReliabilityAssessment {
                factual: Some(factual),
                consistent: Some(true),
                factuality_score: Some(if factual { 1.0 } else { 0.0 }),
            },
        }
    }

    #[test]
    fn first_factual_wins() {
        let r = reject_until_factual(&[cand(1, "A", true), cand(2, "B", true)]).unwrap();
        assert_eq!((r.chosen_rank, r.fallback_used), (1, false));
        let r = reject_until_factual(&[cand(1, "A", false), cand(2, "B", true), cand(3, "C", true)]).unwrap();
        assert_eq!((r.chosen_rank, r.chosen.answer.as_str()), (2, "B"));
    }

    #[test]
    fn all_nonfactual_falls_back() {
        let cands: Vec<_> = (1..=5).map(|r| cand(r, "A", false)).collect();
        let r = reject_until_factual(&cands).unwrap();
        assert_eq!((r.chosen_rank, r.fallback_used, r.abstained), (1, true, false));
    }

    #[test]
    fn bad_inputs() {
        assert_eq!(reject_until_factual(&[]), Err(SelectionError::Empty));
        assert!(matches!(
            reject_until_factual(&[cand(2, "A", true)]),
            Err(SelectionError::Ranks { .. })
        ));
    }

    fn items(v: &[(&str, f64)]) -> Vec<(String, f64)> {
        v.iter().map(|(a, b)| (a.to_string(), *b)).collect()
    }

    #[test]
    fn threshold_basic() {
        let it = items(&[("a", 0.1), ("b", 0.9), ("c", 0.5), ("d", 0.7)]);
        assert_eq!(select_by_threshold(&it, 1.0).unwrap().len(), 4);
        assert_eq!(select_by_threshold(&it, 0.5).unwrap(), vec!["b", "d"]);
        assert_eq!(select_by_threshold(&it, 0.3).unwrap(), vec!["b", "d"]);
        assert!(select_by_threshold(&it, 0.0).is_err());
        assert!(select_by_threshold(&it, 1.5).is_err());
    }

    #[test]
    fn threshold_ties_by_id() {
        let it = items(&[("z", 0.5), ("m", 0.5), ("a", 0.9), ("b", 0.5)]);
        assert_eq!(select_by_threshold(&it, 0.5).unwrap(), vec!["a", "b"]);
        let mut rev = it.clone();
        rev.reverse();
        assert_eq!(select_by_threshold(&rev, 0.5).unwrap(), vec!["a", "b"]);
    }
}
