use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use explcal::backend::{
    mock_behavior, CachedBackend, CompletionBackend, CompletionCandidate, CompletionRequest, MockBackend, MockScenario,
    ReplayRecord, ResponseCache,
};
use explcal::cli::{cmd_calibrate, cmd_reject, cmd_run, ExampleOutcome, ExperimentConfig};
use explcal::corpus::{load_dataset, save_dataset, Dataset, Example, TaskKind};
use explcal::evaluation::{congruence, judge_correct, Verdict};
use explcal::parsing::parse_completion;
use explcal::prompting::{render_answer, render_prompt, sample_shot_groups, Paradigm};
use explcal::reliability::assess;
use explcal::synthgen::{generate, ExplanationStyle, SynthPools};

const SYNTH_CONFIG: &str = r#"
task = "synth"
paradigm = "explain_then_predict"
seed = 11
groups = 2
output_dir = "runs"
cache_dir = "cache"
[data]
train = "train.jsonl"
test = "test.jsonl"
"#;

fn synth_dir(n_test: usize) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&generate(1, 64, ExplanationStyle::Standard), &dir.path().join("train.jsonl")).unwrap();
    save_dataset(&generate(2, n_test, ExplanationStyle::Standard), &dir.path().join("test.jsonl")).unwrap();
    dir
}

fn config(dir: &Path, text: &str, overrides: &[&str]) -> ExperimentConfig {
    let overrides: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    ExperimentConfig::from_toml_str(text, dir, &overrides).unwrap()
}

fn outcomes(run_dir: &Path) -> Vec<ExampleOutcome> {
    fs::read_to_string(run_dir.join("predictions.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut out = vec![];
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

#[test]
fn faithful_mock_emits_the_gold_completion() {
    let ds = generate(3, 50, ExplanationStyle::Standard);
    for style in [ExplanationStyle::Standard, ExplanationStyle::Alternative] {
        let ds = if style == ExplanationStyle::Standard { ds.clone() } else { generate(3, 50, style) };
        for ex in &ds.examples {
            let c = mock_behavior(&MockScenario::faithful(9), ex, Paradigm::EXPLAIN_THEN_PREDICT, style, &ex.id, 1).unwrap();
            let gold = ex.explanation.as_deref().unwrap();
            assert_eq!(c.candidates[0].text, format!("Because {gold}, the answer is {}.", ex.answer));
        }
    }
}

#[test]
fn zero_correct_rate_is_always_wrong() {
    let ds = generate(4, 400, ExplanationStyle::Standard);
    let scenario = MockScenario::new(1, 0.0, 1.0, 0.5);
    for ex in &ds.examples {
        let c = mock_behavior(&scenario, ex, Paradigm::PREDICT_THEN_EXPLAIN, ExplanationStyle::Standard, &ex.id, 1).unwrap();
        let pred = parse_completion(ex.task, Paradigm::PREDICT_THEN_EXPLAIN, &ex.id, &c.candidates[0].text);
        assert!(pred.parse_ok);
        assert!(!judge_correct(&pred, ex), "{}", ex.id);
    }
}

#[test]
fn scripted_congruence_at_scale() {
    let ds = generate(5, 10_000, ExplanationStyle::Standard);
    let verbs = SynthPools::builtin().verbs;
    let scenario = MockScenario::new(77, 0.55, 0.9, 0.2);
    let mut verdicts = vec![];
    let mut assessments = HashMap::new();
    for ex in &ds.examples {
        let c = mock_behavior(&scenario, ex, Paradigm::EXPLAIN_THEN_PREDICT, ExplanationStyle::Standard, &ex.id, 1).unwrap();
        let pred = parse_completion(ex.task, Paradigm::EXPLAIN_THEN_PREDICT, &ex.id, &c.candidates[0].text);
        let a = assess(ex, &pred, &verbs);
        if a.factual == Some(true) && a.consistent == Some(true) {
            assert!(judge_correct(&pred, ex), "factual and consistent but wrong: {}", ex.id);
        }
        verdicts.push(Verdict { example_id: ex.id.clone(), correct: judge_correct(&pred, ex), confidence: None });
        assessments.insert(ex.id.clone(), a);
    }
    let c = congruence(&verdicts, &assessments).unwrap();
    assert!((c.acc - 0.55).abs() < 0.02, "acc {}", c.acc);
    assert!((c.acc_eq_fac.unwrap() - 0.855).abs() < 0.02, "acc=fac {:?}", c.acc_eq_fac);
    assert!((c.fac_rate.unwrap() - (0.55 * 0.9 + 0.45 * 0.2)).abs() < 0.02);
}

#[test]
fn repeated_request_hits_the_cache() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate(6, 8, ExplanationStyle::Standard);
    let groups = sample_shot_groups(&ds, 4, 1, 0, true).unwrap();
    let prompt = render_prompt(&groups[0], &ds.examples[7], Paradigm::EXPLAIN_THEN_PREDICT).unwrap();
    let backend = CachedBackend::new(
        MockBackend::new(MockScenario::new(3, 0.5, 0.5, 0.5), Paradigm::EXPLAIN_THEN_PREDICT),
        Some(ResponseCache::new(dir.path())),
    );
    let req = CompletionRequest::greedy(prompt.text, 96);
    let (k1, first) = backend.complete_keyed(&req).unwrap();
    let (k2, second) = backend.complete_keyed(&req).unwrap();
    assert_eq!(k1, k2);
    assert!(!first.cached);
    assert!(second.cached);
    assert_eq!(first.candidates, second.candidates);
    assert!(ResponseCache::new(dir.path()).path_for(&k1).is_file());
    assert_eq!(backend.complete(&req).unwrap().candidates, first.candidates);
}

#[test]
fn records_point_at_cache_entries_and_resume_after_loss() {
    let dir = synth_dir(40);
    let cfg = config(dir.path(), SYNTH_CONFIG, &["backend.mock.correct_rate=0.6"]);
    let (first_dir, first) = cmd_run(cfg.clone()).unwrap();
    let recs = outcomes(&first_dir);
    assert_eq!(recs.len(), 80);
    let cache = ResponseCache::new(dir.path().join("cache"));
    for r in &recs {
        assert_eq!(r.request_hash.len(), 64);
        assert!(cache.path_for(&r.request_hash).is_file(), "{}", r.example_id);
    }
    // Drop every other cache entry, as an interrupted cold run would leave it.
    for (i, p) in files(&dir.path().join("cache")).into_iter().enumerate() {
        if i.is_multiple_of(2) {
            fs::remove_file(p).unwrap();
        }
    }
    let (second_dir, second) = cmd_run(cfg).unwrap();
    assert_ne!(first_dir, second_dir);
    assert_eq!(first, second);
    assert_eq!(
        fs::read(first_dir.join("predictions.jsonl")).unwrap(),
        fs::read(second_dir.join("predictions.jsonl")).unwrap()
    );
}

#[test]
fn faithful_mock_is_perfect_and_rejection_is_a_no_op() {
    let dir = synth_dir(30);
    let (_, run) = cmd_run(config(dir.path(), SYNTH_CONFIG, &[])).unwrap();
    assert_eq!(run.summary["accuracy"].mean, 1.0);
    assert_eq!(run.summary["parse_rate"].mean, 1.0);
    assert_eq!(run.summary["acc_eq_fac"].mean, 1.0);
    let (rej_dir, rej) = cmd_reject(config(dir.path(), SYNTH_CONFIG, &[])).unwrap();
    assert_eq!(rej.summary["rejection_gain"].mean, 0.0);
    assert_eq!(rej.summary["fallback_rate"].mean, 0.0);
    assert!(outcomes(&rej_dir).iter().all(|o| o.prediction == o.candidates[0].prediction));
}

#[test]
fn rejection_gain_counts_rescued_items() {
    let dir = synth_dir(300);
    let cfg = config(
        dir.path(),
        SYNTH_CONFIG,
        &[
            "backend.mock.correct_rate=0.55",
            "backend.mock.factual_given_correct=1.0",
            "backend.mock.factual_given_incorrect=0.0",
            "backend.mock.rescue_rate=0.4",
        ],
    );
    let (run_dir, rej) = cmd_reject(cfg).unwrap();
    let mut per_group: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for o in outcomes(&run_dir) {
        assert_eq!(o.candidates.len(), 5);
        let rescue = !o.candidates[0].correct
            && o.candidates[1..].iter().any(|c| c.correct && c.assessment.factual == Some(true));
        let e = per_group.entry(o.group_id).or_default();
        e.0 += usize::from(rescue);
        e.1 += 1;
        if rescue {
            let first = o.candidates.iter().find(|c| c.assessment.factual == Some(true)).unwrap();
            assert!(first.correct, "{}: a factual filler precedes the rescue", o.example_id);
        }
    }
    let expected: f64 = per_group.values().map(|&(r, n)| r as f64 / n as f64).sum::<f64>() / per_group.len() as f64;
    let gain = rej.summary["rejection_gain"].mean;
    assert!((gain - expected).abs() < 1e-12, "gain {gain} vs rescued fraction {expected}");
    assert!((gain - 0.45 * 0.4).abs() < 0.05, "gain {gain}");
}

fn unique_questions(path: &Path, task: TaskKind) -> Vec<Example> {
    let mut seen = HashSet::new();
    load_dataset(path, task)
        .unwrap()
        .examples
        .into_iter()
        .filter(|e| seen.insert(e.question.clone()))
        .collect()
}

fn replay_line(ex: &Example, answer: &str, paradigm: Paradigm) -> String {
    let rec = ReplayRecord {
        question: ex.question.clone(),
        candidates: vec![CompletionCandidate {
            text: render_answer(ex.task, paradigm, answer, ex.explanation.as_deref()),
            token_logprobs: None,
        }],
        model_id: "fixture".into(),
    };
    serde_json::to_string(&rec).unwrap()
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn write(dir: &Path, name: &str, task: TaskKind, examples: &[Example]) {
    save_dataset(&Dataset::new(name, task, examples.to_vec()), &dir.join(name)).unwrap();
}

#[test]
fn replayed_context_qa_gold_scores_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let all = unique_questions(&fixture("context_qa.jsonl"), TaskKind::ContextQa);
    assert!(all.len() >= 40);
    let (train, test) = all.split_at(12);
    write(dir.path(), "train.jsonl", TaskKind::ContextQa, train);
    write(dir.path(), "test.jsonl", TaskKind::ContextQa, test);
    let lines: Vec<String> = test.iter().map(|e| replay_line(e, &e.answer, Paradigm::EXPLAIN_THEN_PREDICT)).collect();
    fs::write(dir.path().join("replay.jsonl"), lines.join("\n") + "\n").unwrap();
    let text = r#"
task = "context_qa"
paradigm = "explain_then_predict"
shots = 4
groups = 2
output_dir = "runs"
[data]
train = "train.jsonl"
test = "test.jsonl"
[backend]
kind = "replay"
replay = "replay.jsonl"
"#;
    let (run_dir, report) = cmd_run(config(dir.path(), text, &[])).unwrap();
    assert_eq!(report.summary["accuracy"].mean, 1.0);
    assert_eq!(report.summary["parse_rate"].mean, 1.0);
    let v = report.summary["mean_v"].mean;
    assert!(v > 0.8, "mean_v {v}");
    assert_eq!(outcomes(&run_dir).len(), 2 * test.len());
}

#[test]
fn replayed_nli_calibrates_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let all = unique_questions(&fixture("nli.jsonl"), TaskKind::Nli);
    let (train, rest) = all.split_at(12);
    let (extra, test) = rest.split_at(90);
    write(dir.path(), "train.jsonl", TaskKind::Nli, train);
    write(dir.path(), "test.jsonl", TaskKind::Nli, test);
    write(dir.path(), "extra.jsonl", TaskKind::Nli, extra);
    let flip = |e: &Example, i: usize| {
        if i.is_multiple_of(4) {
            if e.answer == "True" { "False" } else { "True" }.to_string()
        } else {
            e.answer.clone()
        }
    };
    let lines: Vec<String> = extra
        .iter()
        .chain(test)
        .enumerate()
        .map(|(i, e)| replay_line(e, &flip(e, i), Paradigm::PREDICT_THEN_EXPLAIN))
        .collect();
    fs::write(dir.path().join("replay.jsonl"), lines.join("\n") + "\n").unwrap();
    let text = r#"
task = "nli"
paradigm = "predict_then_explain"
shots = 4
groups = 2
output_dir = "runs"
[data]
train = "train.jsonl"
test = "test.jsonl"
extra = "extra.jsonl"
[backend]
kind = "replay"
replay = "replay.jsonl"
"#;
    let (run_dir, report) = cmd_calibrate(config(dir.path(), text, &[])).unwrap();
    let wrong = (extra.len()..extra.len() + test.len()).filter(|i| i.is_multiple_of(4)).count();
    let raw = 1.0 - wrong as f64 / test.len() as f64;
    assert!((report.summary["accuracy_raw"].mean - raw).abs() < 1e-12);
    for name in ["accuracy_prob_only", "accuracy_explanation"] {
        let m = report.summary[name].mean;
        assert!((0.0..=1.0).contains(&m), "{name} {m}");
    }
    for g in 0..2 {
        for kind in ["prob_only", "explanation"] {
            assert!(run_dir.join(format!("params/group-{g}-{kind}.json")).is_file());
        }
    }
}

fn binary(dir: &Path, args: &[&str]) -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_explcal"));
    cmd.current_dir(dir).args(args).env_remove("EXPLCAL_CACHE_DIR");
    cmd
}

const HTTP_CONFIG: &str = r#"
task = "synth"
paradigm = "explain_then_predict"
shots = 2
groups = 1
error_budget = 0
output_dir = "runs"
[data]
train = "train.jsonl"
test = "test.jsonl"
[backend]
kind = "http"
[backend.http]
base_url = "http://127.0.0.1:9"
max_attempts = 1
initial_backoff_ms = 1
timeout_secs = 2
"#;

#[test]
fn unreachable_backend_exhausts_the_budget() {
    let dir = synth_dir(3);
    fs::write(dir.path().join("exp.toml"), HTTP_CONFIG).unwrap();
    let out = binary(dir.path(), &["run", "-c", "exp.toml"]).env("EXPLCAL_API_KEY", "k").output().unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn configuration_errors_exit_one() {
    let dir = synth_dir(3);
    fs::write(dir.path().join("exp.toml"), HTTP_CONFIG).unwrap();
    let out = binary(dir.path(), &["run", "-c", "exp.toml"]).env_remove("EXPLCAL_API_KEY").output().unwrap();
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));

    let out = binary(dir.path(), &["run", "-c", "exp.toml", "--set", "task=\"nli\"", "--set", "backend.kind=\"mock\""])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));

    let out = binary(dir.path(), &["run", "-c", "exp.toml", "--set", "bogus=1"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn report_reprints_a_run() {
    let dir = synth_dir(10);
    fs::write(dir.path().join("exp.toml"), SYNTH_CONFIG).unwrap();
    let out = binary(dir.path(), &["run", "-c", "exp.toml"]).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    let run_dir = stdout.lines().last().unwrap().trim().to_string();
    let out = binary(dir.path(), &["report", &run_dir, "--format", "json"]).output().unwrap();
    assert!(out.status.success());
    let saved = fs::read_to_string(dir.path().join(&run_dir).join("report.json")).unwrap();
    assert_eq!(String::from_utf8(out.stdout).unwrap().trim(), saved.trim());
}
