//! Experiment runner behind the `explcal` binary.

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{
    request_key, sha256_hex, BackendError, CachedBackend, CompletionBackend, CompletionRequest, HttpBackend,
    HttpConfig, MockBackend, MockScenario, ReplayBackend, ResponseCache,
};
use crate::calibration::{
    apply_to_testset, build_records, probability_features, train_calibrator, CalibrationError,
    EvaluatedPrediction,
};
use crate::corpus::{load_dataset, save_dataset, Dataset, DatasetError, Example, ShotGroup, TaskKind};
use crate::evaluation::{aggregate, congruence, coverage_accuracy, judge_correct, GroupMetrics, RunReport, Verdict};
use crate::parsing::{extract_confidence, parse_completion, ConfidenceMode, Prediction};
use crate::prompting::{render_prompt, sample_shot_groups, Paradigm, ParadigmKind, PromptError};
use crate::reliability::{assess, ReliabilityAssessment};
use crate::selection::{reject_until_factual, select_by_threshold, CandidateAnswer};
use crate::synthgen::{generate_instances, ExplanationStyle, SynthPools};

pub const CACHE_DIR_ENV: &str = "EXPLCAL_CACHE_DIR";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("dataset: {0}")]
    Dataset(#[from] DatasetError),
    #[error("prompt: {0}")]
    Prompt(#[from] PromptError),
    #[error("calibration: {0}")]
    Calibration(#[from] CalibrationError),
    #[error("backend: {0}")]
    Backend(#[from] BackendError),
    #[error("{failures} backend failures exceeded the error budget of {budget}; last: {last}")]
    BudgetExceeded { failures: usize, budget: usize, last: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Backend(BackendError::MissingCredentials(_)) => 1,
            Self::BudgetExceeded { .. } | Self::Backend(_) => 2,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Mock,
    Http,
    Replay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSelection {
    pub kind: BackendKind,
    pub mock: MockScenario,
    pub http: HttpConfig,
    /// JSONL fixture for the replay backend.
    pub replay: Option<PathBuf>,
}

impl Default for BackendSelection {
    fn default() -> Self {
        Self {
            kind: BackendKind::Mock,
            mock: MockScenario::default(),
            http: HttpConfig::default(),
            replay: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationMode {
    None,
    ProbOnly,
    #[default]
    Explanation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    #[default]
    None,
    RejectFactual,
    Threshold,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationSection {
    pub mode: CalibrationMode,
}

impl Default for CalibrationSection {
    fn default() -> Self {
        Self {
            mode: CalibrationMode::Explanation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionSection {
    pub mode: SelectionMode,
    /// Fraction answered under threshold selection.
    pub coverage: f64,
    /// Candidates requested under rejection.
    pub candidates: usize,
}

impl Default for SelectionSection {
    fn default() -> Self {
        Self {
            mode: SelectionMode::None,
            coverage: 0.5,
            candidates: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    /// Pool the prompt shots are drawn from.
    pub train: PathBuf,
    pub test: PathBuf,
    /// Labeled extras for calibrator training.
    #[serde(default)]
    pub extra: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskKind,
    pub paradigm: ParadigmKind,
    #[serde(default)]
    pub step_trigger: bool,
    pub data: DataPaths,
    /// Defaults per task when absent.
    #[serde(default)]
    pub shots: Option<usize>,
    #[serde(default = "default_groups")]
    pub groups: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: usize,
    #[serde(default)]
    pub confidence_mode: ConfidenceMode,
    #[serde(default)]
    pub backend: BackendSelection,
    #[serde(default)]
    pub calibration: CalibrationSection,
    #[serde(default)]
    pub selection: SelectionSection,
    #[serde(default = "default_budget")]
    pub error_budget: usize,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
}

fn default_groups() -> usize {
    5
}
fn default_max_tokens() -> usize {
    96
}
fn default_budget() -> usize {
    5
}
fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

/// Parses a `--set` value as TOML, falling back to a bare string.
fn override_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Validation(format!("override {assignment:?} is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Validation(format!("bad override key {key:?}")));
    }
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Validation(format!("override {key:?}: {part} is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), override_value(raw.trim()));
    Ok(())
}

impl ExperimentConfig {
    /// Loads a TOML config, applies overrides, and resolves relative paths
    /// against the config file's directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let base = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        Self::from_toml_str(&text, &base, overrides)
    }

    pub fn from_toml_str(text: &str, base: &Path, overrides: &[String]) -> Result<Self, CliError> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| CliError::Validation(format!("config: {e}")))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut config: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Validation(format!("config: {e}")))?;
        if let Ok(dir) = std::env::var(CACHE_DIR_ENV) {
            if !dir.is_empty() {
                config.cache_dir = Some(PathBuf::from(dir));
            }
        }
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut config.data.train);
        resolve(&mut config.data.test);
        if let Some(p) = config.data.extra.as_mut() {
            resolve(p);
        }
        if let Some(p) = config.backend.replay.as_mut() {
            resolve(p);
        }
        resolve(&mut config.output_dir);
        if let Some(p) = config.cache_dir.as_mut() {
            resolve(p);
        }
        config.validate()?;
        Ok(config)
    }

    pub fn paradigm(&self) -> Result<Paradigm, CliError> {
        Ok(Paradigm::new(self.paradigm, self.step_trigger)?)
    }

    pub fn shots(&self) -> usize {
        self.shots.unwrap_or_else(|| self.task.default_shots())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Validation(m));
        self.paradigm()?;
        if self.groups == 0 {
            return bad("groups must be at least 1".into());
        }
        if self.backend.kind == BackendKind::Mock {
            if self.task != TaskKind::SynthQa {
                return bad(format!("the mock backend answers synth tasks only, not {}", self.task));
            }
            self.backend.mock.validate().map_err(CliError::Validation)?;
        }
        if self.backend.kind == BackendKind::Replay && self.backend.replay.is_none() {
            return bad("backend.replay must name a fixture file".into());
        }
        if !(self.selection.coverage > 0.0 && self.selection.coverage <= 1.0) {
            return bad(format!("selection.coverage {} outside (0, 1]", self.selection.coverage));
        }
        if !(1..=crate::backend::MAX_CANDIDATES).contains(&self.selection.candidates) {
            return bad(format!("selection.candidates {} outside 1..=5", self.selection.candidates));
        }
        if self.selection.mode == SelectionMode::RejectFactual && self.task != TaskKind::SynthQa {
            return bad("factual rejection needs boolean synth assessments".into());
        }
        if self.selection.mode == SelectionMode::RejectFactual && !self.paradigm.uses_explanations() {
            return bad("factual rejection needs a paradigm that generates explanations".into());
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.cache_dir.clone().unwrap_or_else(|| self.output_dir.join("cache"))
    }
}

/// Everything a split evaluation needs, built once per command.
pub struct Runner {
    pub config: ExperimentConfig,
    pub paradigm: Paradigm,
    backend: CachedBackend<Box<dyn CompletionBackend>>,
    verbs: Vec<String>,
    threads: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateOutcome {
    pub rank: usize,
    pub prediction: Prediction,
    pub assessment: ReliabilityAssessment,
    pub correct: bool,
}

/// Per-example output record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleOutcome {
    pub group_id: usize,
    pub example_id: String,
    pub request_hash: String,
    pub prompt_hash: String,
    pub raw_completion: String,
    pub prediction: Prediction,
    pub assessment: ReliabilityAssessment,
    pub correct: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub candidates: Vec<CandidateOutcome>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ExampleOutcome {
    pub fn evaluated(&self) -> EvaluatedPrediction {
        EvaluatedPrediction {
            prediction: self.prediction.clone(),
            assessment: self.assessment,
            correct: self.correct,
        }
    }
}

fn build_backend(config: &ExperimentConfig, paradigm: Paradigm) -> Result<Box<dyn CompletionBackend>, CliError> {
    Ok(match config.backend.kind {
        BackendKind::Mock => Box::new(MockBackend::new(config.backend.mock.clone(), paradigm)),
        BackendKind::Http => Box::new(HttpBackend::from_env(config.backend.http.clone())?),
        BackendKind::Replay => {
            let path = config.backend.replay.as_ref().expect("validated");
            Box::new(ReplayBackend::from_jsonl(path)?)
        }
    })
}

impl Runner {
    pub fn new(config: ExperimentConfig) -> Result<Self, CliError> {
        let paradigm = config.paradigm()?;
        let inner = build_backend(&config, paradigm)?;
        let backend = CachedBackend::new(inner, Some(ResponseCache::new(config.cache_dir())));
        let threads = match config.backend.kind {
            BackendKind::Http => config.backend.http.max_in_flight.max(1),
            _ => std::thread::available_parallelism().map_or(1, |n| n.get()),
        };
        Ok(Self {
            config,
            paradigm,
            backend,
            verbs: SynthPools::builtin().verbs,
            threads,
        })
    }

    pub fn load(&self, path: &Path) -> Result<Dataset, CliError> {
        let mut ds = load_dataset(path, self.config.task)?;
        ds.examples.sort_by(|a, b| a.id.cmp(&b.id));
        Ok(ds)
    }

    pub fn shot_groups(&self) -> Result<Vec<ShotGroup>, CliError> {
        let pool = self.load(&self.config.data.train)?;
        Ok(sample_shot_groups(
            &pool,
            self.config.shots(),
            self.config.groups,
            self.config.seed,
            self.paradigm.uses_explanations(),
        )?)
    }

    fn candidate_outcome(&self, example: &Example, rank: usize, text: &str, cand: &crate::backend::CompletionCandidate) -> CandidateOutcome {
        let mut prediction = parse_completion(self.config.task, self.paradigm, &example.id, text);
        prediction.confidence = extract_confidence(cand, &prediction, self.config.task, self.config.confidence_mode);
        let assessment = assess(example, &prediction, &self.verbs);
        let correct = judge_correct(&prediction, example);
        CandidateOutcome {
            rank,
            prediction,
            assessment,
            correct,
        }
    }

    fn evaluate_one(
        &self,
        group: &ShotGroup,
        example: &Example,
        candidates: usize,
        failures: &AtomicUsize,
    ) -> Result<ExampleOutcome, CliError> {
        let prompt = render_prompt(group, example, self.paradigm)?;
        let request = CompletionRequest::greedy(prompt.text.clone(), self.config.max_tokens).with_candidates(candidates);
        let request_hash = request_key(&self.backend.backend_id(), &request);
        let prompt_hash = sha256_hex(prompt.text.as_bytes());
        let failed = |error: String| {
            let prediction = Prediction::failed(&example.id, "");
            let assessment = assess(example, &prediction, &self.verbs);
            ExampleOutcome {
                group_id: group.group_id,
                example_id: example.id.clone(),
                request_hash: request_hash.clone(),
                prompt_hash: prompt_hash.clone(),
                raw_completion: String::new(),
                prediction,
                assessment,
                correct: false,
                candidates: vec![],
                error: Some(error),
            }
        };
        if failures.load(Ordering::SeqCst) > self.config.error_budget {
            return Ok(failed("skipped: error budget exhausted".into()));
        }
        let completion = match self.backend.complete(&request) {
            Ok(c) => c,
            Err(e) => {
                let n = failures.fetch_add(1, Ordering::SeqCst) + 1;
                warn!("{} (group {}): backend failure {n}: {e}", example.id, group.group_id);
                return Ok(failed(e.to_string()));
            }
        };
        let outcomes: Vec<CandidateOutcome> = completion
            .candidates
            .iter()
            .enumerate()
            .map(|(i, c)| self.candidate_outcome(example, i + 1, &c.text, c))
            .collect();
        let top = outcomes[0].clone();
        Ok(ExampleOutcome {
            group_id: group.group_id,
            example_id: example.id.clone(),
            request_hash,
            prompt_hash,
            raw_completion: completion.candidates[0].text.clone(),
            prediction: top.prediction,
            assessment: top.assessment,
            correct: top.correct,
            candidates: if candidates > 1 { outcomes } else { vec![] },
            error: None,
        })
    }

    /// Completes every example under every shot group. Outputs are ordered by
    /// group, then example id, whatever the scheduling.
    pub fn evaluate(
        &self,
        dataset: &Dataset,
        groups: &[ShotGroup],
        candidates: usize,
    ) -> Result<Vec<ExampleOutcome>, CliError> {
        let failures = AtomicUsize::new(0);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.threads)
            .build()
            .map_err(|e| CliError::Validation(format!("thread pool: {e}")))?;
        let jobs: Vec<(&ShotGroup, &Example)> = groups
            .iter()
            .flat_map(|g| dataset.examples.iter().map(move |e| (g, e)))
            .collect();
        info!("{}: {} completions over {} group(s)", dataset.name, jobs.len(), groups.len());
        let mut out: Vec<ExampleOutcome> = pool.install(|| {
            jobs.par_iter()
                .map(|(g, e)| self.evaluate_one(g, e, candidates, &failures))
                .collect::<Result<Vec<_>, _>>()
        })?;
        let n = failures.load(Ordering::SeqCst);
        if n > self.config.error_budget {
            let last = out
                .iter()
                .rev()
                .find_map(|o| o.error.clone().filter(|e| !e.starts_with("skipped")))
                .unwrap_or_default();
            return Err(CliError::BudgetExceeded {
                failures: n,
                budget: self.config.error_budget,
                last,
            });
        }
        out.sort_by(|a, b| (a.group_id, &a.example_id).cmp(&(b.group_id, &b.example_id)));
        Ok(out)
    }
}

fn by_group(outcomes: &[ExampleOutcome]) -> Vec<(usize, Vec<&ExampleOutcome>)> {
    let mut groups: Vec<(usize, Vec<&ExampleOutcome>)> = Vec::new();
    for o in outcomes {
        match groups.last_mut() {
            Some((g, items)) if *g == o.group_id => items.push(o),
            _ => groups.push((o.group_id, vec![o])),
        }
    }
    groups
}

fn raw_confidence(task: TaskKind, o: &ExampleOutcome) -> f64 {
    let p = probability_features(task, &o.prediction);
    if task.is_qa() {
        p[0]
    } else {
        p.iter().copied().fold(0.0, f64::max)
    }
}

fn verdicts(task: TaskKind, items: &[&ExampleOutcome]) -> Vec<Verdict> {
    items
        .iter()
        .map(|o| Verdict {
            example_id: o.example_id.clone(),
            correct: o.correct,
            confidence: Some(raw_confidence(task, o)),
        })
        .collect()
}

fn imputed_count(items: &[ExampleOutcome]) -> usize {
    items
        .iter()
        .filter(|o| o.prediction.parse_ok && o.prediction.confidence.is_none())
        .count()
}

const STD_NOTE: &str = "std is the population standard deviation over shot groups";

/// Files written into one run directory.
#[derive(Debug, Default)]
pub struct RunOutputs {
    files: Vec<(String, String)>,
}

impl RunOutputs {
    pub fn add(&mut self, name: impl Into<String>, contents: impl Into<String>) {
        self.files.push((name.into(), contents.into()));
    }

    /// Creates `{output_dir}/{command}-{hash}-{unix secs}` and writes every
    /// file with create-new semantics.
    pub fn write(self, config: &ExperimentConfig, command: &str) -> Result<PathBuf, CliError> {
        let secs = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        let stem = format!("{command}-{}-{secs}", &config.hash()[..12]);
        fs::create_dir_all(&config.output_dir).map_err(io_err(&config.output_dir))?;
        let mut dir = config.output_dir.join(&stem);
        let mut n = 1;
        loop {
            match fs::create_dir(&dir) {
                Ok(()) => break,
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    n += 1;
                    dir = config.output_dir.join(format!("{stem}-{n}"));
                }
                Err(e) => return Err(io_err(&dir)(e)),
            }
        }
        for (name, contents) in self.files {
            let path = dir.join(&name);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).map_err(io_err(parent))?;
            }
            let mut f = OpenOptions::new()
                .write(true)
                .create_new(true)
                .open(&path)
                .map_err(io_err(&path))?;
            f.write_all(contents.as_bytes()).map_err(io_err(&path))?;
        }
        Ok(dir)
    }
}

fn jsonl<T: Serialize>(items: impl IntoIterator<Item = T>) -> String {
    let mut s = String::new();
    for item in items {
        s.push_str(&serde_json::to_string(&item).expect("record serializes"));
        s.push('\n');
    }
    s
}

fn config_json(config: &ExperimentConfig) -> String {
    let mut s = serde_json::to_string_pretty(config).expect("config serializes");
    s.push('\n');
    s
}

fn add_report(out: &mut RunOutputs, report: &RunReport) {
    out.add("report.json", report.to_json());
    out.add("report.txt", report.to_table());
}

/// Metrics for a plain run, plus threshold or rejection metrics when configured.
pub fn run_report(
    command: &str,
    config: &ExperimentConfig,
    outcomes: &[ExampleOutcome],
) -> Result<(RunReport, RunOutputs), CliError> {
    let mut files = RunOutputs::default();
    let mut groups = Vec::new();
    for (gid, items) in by_group(outcomes) {
        let mut m = GroupMetrics::new(gid);
        let v = verdicts(config.task, &items);
        let n = items.len() as f64;
        m.set("accuracy", items.iter().filter(|o| o.correct).count() as f64 / n);
        m.set("parse_rate", items.iter().filter(|o| o.prediction.parse_ok).count() as f64 / n);
        if config.paradigm.uses_explanations() {
            m.set(
                "mean_v",
                items.iter().map(|o| o.assessment.factuality_score.unwrap_or(0.0)).sum::<f64>() / n,
            );
        }
        if config.task.is_qa() {
            let curve = coverage_accuracy(&v).map_err(|e| CliError::Validation(e.to_string()))?;
            m.set("auc", curve.auc);
            files.add(format!("curves/group-{gid}.csv"), curve.to_csv());
        }
        if config.task == TaskKind::SynthQa && config.paradigm.uses_explanations() {
            let assessments: HashMap<String, ReliabilityAssessment> =
                items.iter().map(|o| (o.example_id.clone(), o.assessment)).collect();
            let c = congruence(&v, &assessments).map_err(|e| CliError::Validation(e.to_string()))?;
            m.set_opt("fac_rate", c.fac_rate)
                .set_opt("con_rate", c.con_rate)
                .set_opt("acc_eq_fac", c.acc_eq_fac)
                .set_opt("acc_eq_con", c.acc_eq_con);
        }
        match config.selection.mode {
            SelectionMode::Threshold => {
                let conf: Vec<(String, f64)> = v.iter().map(|x| (x.example_id.clone(), x.confidence.unwrap_or(0.0))).collect();
                let kept = select_by_threshold(&conf, config.selection.coverage)
                    .map_err(|e| CliError::Validation(e.to_string()))?;
                let correct: HashMap<&str, bool> = v.iter().map(|x| (x.example_id.as_str(), x.correct)).collect();
                let hits = kept.iter().filter(|id| correct[id.as_str()]).count();
                m.set("selective_accuracy", hits as f64 / kept.len() as f64);
            }
            SelectionMode::RejectFactual => {
                let mut post = 0usize;
                let mut fallback = 0usize;
                for o in &items {
                    let (correct, used_fallback) = rejected_choice(o)?;
                    post += usize::from(correct);
                    fallback += usize::from(used_fallback);
                }
                let pre = items.iter().filter(|o| o.correct).count();
                m.set("accuracy_after_rejection", post as f64 / n);
                m.set("rejection_gain", (post as f64 - pre as f64) / n);
                m.set("fallback_rate", fallback as f64 / n);
            }
            SelectionMode::None => {}
        }
        groups.push(m);
    }
    let mut report = aggregate(&format!("{command} {} {} {}", config.task, config.paradigm, config.backend_label()), &groups)
        .map_err(|e| CliError::Validation(e.to_string()))?;
    report.notes.push(STD_NOTE.into());
    let imputed = imputed_count(outcomes);
    if imputed > 0 && config.task.is_qa() {
        report
            .notes
            .push(format!("{imputed} prediction(s) lacked logprobs; confidence imputed as 0.5"));
    }
    Ok((report, files))
}

/// Correctness of the rejection loop's choice, and whether it fell back.
fn rejected_choice(o: &ExampleOutcome) -> Result<(bool, bool), CliError> {
    if o.candidates.is_empty() {
        return Ok((o.correct, o.assessment.factual != Some(true)));
    }
    let cands: Vec<CandidateAnswer> = o
        .candidates
        .iter()
        .map(|c| CandidateAnswer {
            rank: c.rank,
            prediction: c.prediction.clone(),
            assessment: c.assessment,
        })
        .collect();
    let sel = reject_until_factual(&cands).map_err(|e| CliError::Validation(e.to_string()))?;
    Ok((o.candidates[sel.chosen_rank - 1].correct, sel.fallback_used))
}

impl ExperimentConfig {
    fn backend_label(&self) -> &'static str {
        match self.backend.kind {
            BackendKind::Mock => "mock",
            BackendKind::Http => "http",
            BackendKind::Replay => "replay",
        }
    }
}

fn candidates_for(config: &ExperimentConfig) -> usize {
    if config.selection.mode == SelectionMode::RejectFactual {
        config.selection.candidates
    } else {
        1
    }
}

pub fn cmd_run(config: ExperimentConfig) -> Result<(PathBuf, RunReport), CliError> {
    let runner = Runner::new(config)?;
    let groups = runner.shot_groups()?;
    let test = runner.load(&runner.config.data.test)?;
    let outcomes = runner.evaluate(&test, &groups, candidates_for(&runner.config))?;
    let (report, mut files) = run_report("run", &runner.config, &outcomes)?;
    files.add("config.json", config_json(&runner.config));
    files.add("predictions.jsonl", jsonl(&outcomes));
    add_report(&mut files, &report);
    Ok((files.write(&runner.config, "run")?, report))
}

pub fn cmd_reject(mut config: ExperimentConfig) -> Result<(PathBuf, RunReport), CliError> {
    config.selection.mode = SelectionMode::RejectFactual;
    config.validate()?;
    let runner = Runner::new(config)?;
    let groups = runner.shot_groups()?;
    let test = runner.load(&runner.config.data.test)?;
    let outcomes = runner.evaluate(&test, &groups, runner.config.selection.candidates)?;
    let (report, mut files) = run_report("reject", &runner.config, &outcomes)?;
    files.add("config.json", config_json(&runner.config));
    files.add("predictions.jsonl", jsonl(&outcomes));
    add_report(&mut files, &report);
    Ok((files.write(&runner.config, "reject")?, report))
}

#[derive(Debug, Clone, Serialize)]
struct CalibratedRecord<'a> {
    group_id: usize,
    example_id: &'a str,
    calibrator: &'a str,
    answer: &'a str,
    confidence: f64,
    correct: bool,
}

/// Trains both calibrators per shot group on the extras and scores the test set.
pub fn cmd_calibrate(config: ExperimentConfig) -> Result<(PathBuf, RunReport), CliError> {
    let extra_path = config
        .data
        .extra
        .clone()
        .ok_or_else(|| CliError::Validation("calibrate needs data.extra".into()))?;
    let runner = Runner::new(config)?;
    let config = &runner.config;
    let groups = runner.shot_groups()?;
    let extra = runner.load(&extra_path)?;
    let test = runner.load(&config.data.test)?;
    let extra_out = runner.evaluate(&extra, &groups, 1)?;
    let test_out = runner.evaluate(&test, &groups, 1)?;
    let gold: HashMap<&str, &Example> = test.examples.iter().map(|e| (e.id.as_str(), e)).collect();

    let mut files = RunOutputs::default();
    files.add("config.json", config_json(config));
    files.add("extra_predictions.jsonl", jsonl(&extra_out));
    files.add("predictions.jsonl", jsonl(&test_out));
    let mut calibrated_lines = Vec::new();
    let extra_groups = by_group(&extra_out);
    let mut metrics = Vec::new();
    for ((gid, extra_items), (tgid, test_items)) in extra_groups.into_iter().zip(by_group(&test_out)) {
        debug_assert_eq!(gid, tgid);
        let map: HashMap<String, EvaluatedPrediction> =
            extra_items.iter().map(|o| (o.example_id.clone(), o.evaluated())).collect();
        let records = build_records(&extra, &map)?;
        let evaluated: Vec<EvaluatedPrediction> = test_items.iter().map(|o| o.evaluated()).collect();
        let mut m = GroupMetrics::new(gid);
        let raw = verdicts(config.task, &test_items);
        let metric = |name: &str| if config.task.is_qa() { format!("auc_{name}") } else { format!("accuracy_{name}") };
        let score = |v: &[Verdict]| -> Result<f64, CliError> {
            if config.task.is_qa() {
                Ok(coverage_accuracy(v).map_err(|e| CliError::Validation(e.to_string()))?.auc)
            } else {
                Ok(v.iter().filter(|x| x.correct).count() as f64 / v.len() as f64)
            }
        };
        m.set(&metric("raw"), score(&raw)?);
        for (name, use_v) in [("prob_only", false), ("explanation", true)] {
            let params = train_calibrator(&records, config.task, use_v, config.seed)?;
            files.add(format!("params/group-{gid}-{name}.json"), params.to_json() + "\n");
            let calibrated = apply_to_testset(&params, &evaluated)?;
            let v: Vec<Verdict> = calibrated
                .iter()
                .zip(&test_items)
                .map(|(c, o)| {
                    let correct = if config.task.is_qa() {
                        o.correct
                    } else {
                        let mut p = o.prediction.clone();
                        p.answer = c.answer.clone();
                        judge_correct(&p, gold[o.example_id.as_str()])
                    };
                    Verdict {
                        example_id: c.example_id.clone(),
                        correct,
                        confidence: Some(c.confidence),
                    }
                })
                .collect();
            m.set(&metric(name), score(&v)?);
            if config.task.is_qa() {
                let curve = coverage_accuracy(&v).map_err(|e| CliError::Validation(e.to_string()))?;
                files.add(format!("curves/group-{gid}-{name}.csv"), curve.to_csv());
            }
            let selected = match config.calibration.mode {
                CalibrationMode::ProbOnly => !use_v,
                CalibrationMode::Explanation => use_v,
                CalibrationMode::None => false,
            };
            if selected {
                for (c, verdict) in calibrated.iter().zip(&v) {
                    calibrated_lines.push(
                        serde_json::to_string(&CalibratedRecord {
                            group_id: gid,
                            example_id: &c.example_id,
                            calibrator: name,
                            answer: &c.answer,
                            confidence: c.confidence,
                            correct: verdict.correct,
                        })
                        .expect("record serializes"),
                    );
                }
            }
        }
        metrics.push(m);
    }
    if !calibrated_lines.is_empty() {
        files.add("calibrated.jsonl", calibrated_lines.join("\n") + "\n");
    }
    let mut report = aggregate(
        &format!(
            "calibrate {} {} {}L+{}E",
            config.task,
            config.paradigm,
            extra.len(),
            config.shots()
        ),
        &metrics,
    )
    .map_err(|e| CliError::Validation(e.to_string()))?;
    report.notes.push(STD_NOTE.into());
    let imputed = imputed_count(&extra_out) + imputed_count(&test_out);
    if imputed > 0 && config.task.is_qa() {
        report
            .notes
            .push(format!("{imputed} prediction(s) lacked logprobs; confidence imputed as 0.5"));
    }
    add_report(&mut files, &report);
    Ok((files.write(config, "calibrate")?, report))
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Only `synth` can be generated.
    #[arg(long, default_value = "synth")]
    pub task: TaskKind,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "standard")]
    pub style: ExplanationStyle,
    /// Directory holding names.txt, verbs.txt and professions.txt.
    #[arg(long)]
    pub pools: Option<PathBuf>,
}

pub fn cmd_generate(args: &GenerateArgs) -> Result<PathBuf, CliError> {
    if args.task != TaskKind::SynthQa {
        return Err(CliError::Validation(format!("cannot generate {} data", args.task)));
    }
    let pools = match &args.pools {
        Some(dir) => SynthPools::from_dir(dir).map_err(|e| CliError::Validation(e.to_string()))?,
        None => SynthPools::builtin(),
    };
    let instances = generate_instances(&pools, args.seed, args.n, args.style)
        .map_err(|e| CliError::Validation(e.to_string()))?;
    let name = args
        .out
        .file_stem()
        .map_or_else(|| "synth".to_string(), |s| s.to_string_lossy().into_owned());
    let ds = Dataset::new(name, TaskKind::SynthQa, instances.iter().map(|i| i.to_example()).collect());
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    save_dataset(&ds, &args.out)?;
    Ok(args.out.clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ReportFormat {
    Table,
    Json,
}

pub fn cmd_report(run_dir: &Path, format: ReportFormat) -> Result<String, CliError> {
    let path = run_dir.join("report.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let report: RunReport =
        serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    Ok(match format {
        ReportFormat::Table => report.to_table(),
        ReportFormat::Json => report.to_json(),
    })
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML experiment config.
    #[arg(long, short)]
    pub config: PathBuf,
    /// Override a config key, e.g. `--set backend.mock.correct_rate=0.55`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset as JSONL.
    Generate(GenerateArgs),
    /// Prompt, parse, assess and score the test set under every shot group.
    Run(ConfigArgs),
    /// Train calibrators on the extras and report calibrated test metrics.
    Calibrate(ConfigArgs),
    /// Re-select answers from the top candidates by explanation factuality.
    Reject(ConfigArgs),
    /// Print the report of a finished run directory.
    Report {
        run_dir: PathBuf,
        #[arg(long, value_enum, default_value = "table")]
        format: ReportFormat,
    },
}

#[derive(Debug, Parser)]
#[command(name = "explcal", version, about = "Explanation-based calibration of few-shot prompted models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

fn print_run((dir, report): (PathBuf, RunReport)) {
    print!("{}", report.to_table());
    println!("{}", dir.display());
}

/// Runs a parsed command; returns the process exit code. Experiment commands
/// print the report table, then the run directory on the last line.
pub fn execute(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Generate(args) => cmd_generate(&args).map(|p| println!("{}", p.display())),
        Command::Run(a) => ExperimentConfig::load(&a.config, &a.overrides)
            .and_then(cmd_run)
            .map(print_run),
        Command::Calibrate(a) => ExperimentConfig::load(&a.config, &a.overrides)
            .and_then(cmd_calibrate)
            .map(print_run),
        Command::Reject(a) => ExperimentConfig::load(&a.config, &a.overrides)
            .and_then(cmd_reject)
            .map(print_run),
        Command::Report { run_dir, format } => cmd_report(&run_dir, format).map(|s| print!("{s}")),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
