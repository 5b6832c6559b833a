//! Benchmark scoring: mean relative accuracy for numerical answers, accuracy
//! for multiple-choice answers, exact match (strict and containment-relaxed)
//! for free text, and the per-subtask and two-subset aggregations built on
//! top of them.
//!
//! Scores are fractions in `[0, 1]`; rounding happens only when printing.

use std::collections::BTreeMap;
use std::fmt;
use std::io::BufRead;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Confidence thresholds 0.50, 0.55, …, 0.95.
pub const DEFAULT_MRA_THRESHOLDS: [f64; 10] =
    [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];

/// A relative error within this distance of `1 − θ` counts as a tie and
/// fails threshold `θ`.
const TIE_EPSILON: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScoreError {
    #[error("record `{id}`: ground truth is zero, relative accuracy is undefined")]
    ZeroTruth { id: String },
    #[error("record `{id}`: {what} is not a finite number")]
    NotNumeric { id: String, what: &'static str },
    #[error("cannot average over an empty set: {0}")]
    EmptySet(String),
    #[error("unknown subtask `{label}` for protocol {protocol}")]
    UnknownSubtask { label: String, protocol: String },
    #[error("thresholds must be non-empty and each strictly between 0 and 1")]
    BadThresholds,
    #[error("record `{id}` has answer type {found}, expected {expected}")]
    AnswerType {
        id: String,
        found: AnswerType,
        expected: AnswerType,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("reading {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerType {
    Numerical,
    MultipleChoice,
    FreeText,
}

impl fmt::Display for AnswerType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AnswerType::Numerical => "numerical",
            AnswerType::MultipleChoice => "multiple_choice",
            AnswerType::FreeText => "free_text",
        })
    }
}

/// A prediction or ground truth: JSON number or string.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Answer {
    Number(f64),
    Text(String),
}

impl Answer {
    pub fn as_number(&self) -> Option<f64> {
        let x = match self {
            Answer::Number(x) => *x,
            Answer::Text(s) => s.trim().parse().ok()?,
        };
        x.is_finite().then_some(x)
    }

    pub fn as_text(&self) -> String {
        match self {
            Answer::Number(x) => x.to_string(),
            Answer::Text(s) => s.clone(),
        }
    }
}

/// One line of a record file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalRecord {
    pub id: String,
    pub subtask: String,
    pub answer_type: AnswerType,
    pub prediction: Answer,
    pub ground_truth: Answer,
}

/// Fraction of `thresholds` θ for which `|pred − truth| / |truth| < 1 − θ`.
pub fn mean_relative_accuracy(pred: f64, truth: f64, thresholds: &[f64]) -> Result<f64, ScoreError> {
    if thresholds.is_empty() || thresholds.iter().any(|&t| !(t > 0.0 && t < 1.0)) {
        return Err(ScoreError::BadThresholds);
    }
    if !pred.is_finite() || !truth.is_finite() {
        return Err(ScoreError::NotNumeric {
            id: String::new(),
            what: "value",
        });
    }
    if truth == 0.0 {
        return Err(ScoreError::ZeroTruth { id: String::new() });
    }
    let rel = (pred - truth).abs() / truth.abs();
    let passed = thresholds
        .iter()
        .filter(|&&t| (1.0 - t) - rel > TIE_EPSILON)
        .count();
    Ok(passed as f64 / thresholds.len() as f64)
}

/// Extracts the option letter from `"B"`, `"b"`, `"B) …"` or `"B. …"`.
pub fn parse_choice(answer: &str) -> Option<char> {
    let s = answer.trim();
    let mut chars = s.chars();
    let first = chars.next()?.to_ascii_uppercase();
    if !first.is_ascii_uppercase() {
        return None;
    }
    match chars.next() {
        None | Some(')') | Some('.') => Some(first),
        _ => None,
    }
}

fn choice_correct(record: &EvalRecord) -> bool {
    let pred = parse_choice(&record.prediction.as_text());
    let truth = parse_choice(&record.ground_truth.as_text());
    match (pred, truth) {
        (Some(p), Some(t)) => p == t,
        (None, _) => {
            log::warn!(
                "record `{}`: unparseable choice {:?}, scored as wrong",
                record.id,
                record.prediction.as_text()
            );
            false
        }
        (_, None) => {
            log::warn!(
                "record `{}`: unparseable ground-truth choice {:?}, scored as wrong",
                record.id,
                record.ground_truth.as_text()
            );
            false
        }
    }
}

fn expect_type(record: &EvalRecord, expected: AnswerType) -> Result<(), ScoreError> {
    if record.answer_type != expected {
        return Err(ScoreError::AnswerType {
            id: record.id.clone(),
            found: record.answer_type,
            expected,
        });
    }
    Ok(())
}

/// Fraction of multiple-choice records whose predicted letter matches.
pub fn choice_accuracy(records: &[EvalRecord]) -> Result<f64, ScoreError> {
    if records.is_empty() {
        return Err(ScoreError::EmptySet("multiple-choice records".into()));
    }
    let mut correct = 0usize;
    for r in records {
        expect_type(r, AnswerType::MultipleChoice)?;
        correct += usize::from(choice_correct(r));
    }
    Ok(correct as f64 / records.len() as f64)
}

/// Lowercase, drop punctuation, collapse whitespace runs to single spaces.
pub fn normalize_text(s: &str) -> String {
    let cleaned: String = s
        .chars()
        .filter(|c| !c.is_ascii_punctuation() && !is_unicode_punctuation(*c))
        .flat_map(char::to_lowercase)
        .collect();
    cleaned.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn is_unicode_punctuation(c: char) -> bool {
    matches!(
        c,
        '‘' | '’' | '“' | '”' | '\u{2013}' | '\u{2014}' | '…' | '«' | '»' | '¿' | '¡' | '·'
    )
}

fn contains_words(haystack: &[&str], needle: &[&str]) -> bool {
    !needle.is_empty()
        && needle.len() <= haystack.len()
        && haystack.windows(needle.len()).any(|w| w == needle)
}

/// Strict match on normalized strings; with `refined`, either side may also
/// appear as a contiguous word sequence inside the other.
pub fn text_matches(prediction: &str, truth: &str, refined: bool) -> bool {
    let p = normalize_text(prediction);
    let t = normalize_text(truth);
    if p == t {
        return true;
    }
    if !refined {
        return false;
    }
    let pw: Vec<&str> = p.split(' ').filter(|w| !w.is_empty()).collect();
    let tw: Vec<&str> = t.split(' ').filter(|w| !w.is_empty()).collect();
    contains_words(&pw, &tw) || contains_words(&tw, &pw)
}

/// EM@1 (`refined = false`) or EM@R1 (`refined = true`) over free-text records.
pub fn exact_match(records: &[EvalRecord], refined: bool) -> Result<f64, ScoreError> {
    if records.is_empty() {
        return Err(ScoreError::EmptySet("free-text records".into()));
    }
    let mut hits = 0usize;
    for r in records {
        expect_type(r, AnswerType::FreeText)?;
        hits += usize::from(text_matches(
            &r.prediction.as_text(),
            &r.ground_truth.as_text(),
            refined,
        ));
    }
    Ok(hits as f64 / records.len() as f64)
}

/// Two-subset benchmark summary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpbenchScores {
    pub si: f64,
    pub mv: f64,
    pub overall: f64,
}

/// Each subset's score is the mean of its numerical and multiple-choice
/// scores; the overall score is the mean of the two subsets. Inputs must all
/// use the same scale.
pub fn spbench_aggregate(si_nq: f64, si_mcq: f64, mv_nq: f64, mv_mcq: f64) -> SpbenchScores {
    let si = (si_nq + si_mcq) / 2.0;
    let mv = (mv_nq + mv_mcq) / 2.0;
    SpbenchScores {
        si,
        mv,
        overall: (si + mv) / 2.0,
    }
}

/// How free-text answers are matched.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FreeTextRule {
    #[default]
    Exact,
    Refined,
}

/// Scoring options for a single record.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoringRules {
    pub thresholds: Vec<f64>,
    pub free_text: FreeTextRule,
}

impl Default for ScoringRules {
    fn default() -> Self {
        Self {
            thresholds: DEFAULT_MRA_THRESHOLDS.to_vec(),
            free_text: FreeTextRule::Exact,
        }
    }
}

/// Score of one record under the metric for its answer type.
pub fn score_record(record: &EvalRecord, rules: &ScoringRules) -> Result<f64, ScoreError> {
    match record.answer_type {
        AnswerType::Numerical => {
            let truth = record
                .ground_truth
                .as_number()
                .ok_or_else(|| ScoreError::NotNumeric {
                    id: record.id.clone(),
                    what: "ground truth",
                })?;
            if truth == 0.0 {
                return Err(ScoreError::ZeroTruth {
                    id: record.id.clone(),
                });
            }
            let Some(pred) = record.prediction.as_number() else {
                log::warn!(
                    "record `{}`: non-numeric prediction {:?}, scored as 0",
                    record.id,
                    record.prediction.as_text()
                );
                return Ok(0.0);
            };
            mean_relative_accuracy(pred, truth, &rules.thresholds)
        }
        AnswerType::MultipleChoice => Ok(f64::from(u8::from(choice_correct(record)))),
        AnswerType::FreeText => Ok(f64::from(u8::from(text_matches(
            &record.prediction.as_text(),
            &record.ground_truth.as_text(),
            rules.free_text == FreeTextRule::Refined,
        )))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubtaskReport {
    pub subtask: String,
    pub score: f64,
    pub count: usize,
}

/// A record left out of scoring, with the reason.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Exclusion {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub subtasks: Vec<SubtaskReport>,
    /// Unweighted mean of the subtask scores.
    pub average: f64,
    pub excluded: Vec<Exclusion>,
}

/// Subtask vocabulary of a benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct Protocol {
    pub name: String,
    pub subtasks: Vec<String>,
    /// Every listed subtask must have at least one scored record.
    pub require_all: bool,
    pub rules: ScoringRules,
}

pub const VSI_SUBTASKS: [&str; 8] = [
    "obj_count",
    "abs_dist",
    "obj_size",
    "room_size",
    "rel_dist",
    "rel_dir",
    "route_plan",
    "appr_order",
];

pub const SQA3D_SUBTASKS: [&str; 6] = ["what", "is", "how", "can", "which", "others"];

impl Protocol {
    /// Eight spatial subtasks, averaged uniformly.
    pub fn vsi() -> Self {
        Self {
            name: "vsi".into(),
            subtasks: VSI_SUBTASKS.iter().map(|s| s.to_string()).collect(),
            require_all: true,
            rules: ScoringRules::default(),
        }
    }

    /// Situated QA, grouped by question type.
    pub fn sqa3d(rule: FreeTextRule) -> Self {
        Self {
            name: "sqa3d".into(),
            subtasks: SQA3D_SUBTASKS.iter().map(|s| s.to_string()).collect(),
            require_all: false,
            rules: ScoringRules {
                free_text: rule,
                ..ScoringRules::default()
            },
        }
    }
}

/// Per-subtask scores (mean of per-record scores) and their unweighted mean.
///
/// Numerical records with zero ground truth are excluded and listed in
/// [`Report::excluded`]. Unknown subtask labels, and required subtasks left
/// without any scored record, are errors.
pub fn report(records: &[EvalRecord], protocol: &Protocol) -> Result<Report, ScoreError> {
    let mut groups: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut excluded = Vec::new();
    for r in records {
        if !protocol.subtasks.iter().any(|s| s == &r.subtask) {
            return Err(ScoreError::UnknownSubtask {
                label: r.subtask.clone(),
                protocol: protocol.name.clone(),
            });
        }
        let entry = groups.entry(r.subtask.as_str()).or_default();
        match score_record(r, &protocol.rules) {
            Ok(s) => entry.push(s),
            Err(ScoreError::ZeroTruth { id }) => excluded.push(Exclusion {
                id,
                reason: "zero ground truth".into(),
            }),
            Err(e) => return Err(e),
        }
    }
    let mut subtasks = Vec::new();
    for label in &protocol.subtasks {
        match groups.get(label.as_str()) {
            Some(scores) if !scores.is_empty() => subtasks.push(SubtaskReport {
                subtask: label.clone(),
                score: scores.iter().sum::<f64>() / scores.len() as f64,
                count: scores.len(),
            }),
            Some(_) => {
                return Err(ScoreError::EmptySet(format!(
                    "subtask `{label}` has no scorable records"
                )))
            }
            None if protocol.require_all => {
                return Err(ScoreError::EmptySet(format!(
                    "subtask `{label}` has no records"
                )))
            }
            None => {}
        }
    }
    if subtasks.is_empty() {
        return Err(ScoreError::EmptySet("no subtask has records".into()));
    }
    let average = subtasks.iter().map(|s| s.score).sum::<f64>() / subtasks.len() as f64;
    Ok(Report {
        subtasks,
        average,
        excluded,
    })
}

/// Subset and question-kind scores for the two-subset benchmark.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpbenchReport {
    pub si_nq: f64,
    pub si_mcq: f64,
    pub mv_nq: f64,
    pub mv_mcq: f64,
    pub scores: SpbenchScores,
    pub excluded: Vec<Exclusion>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Subset {
    Si,
    Mv,
}

impl FromStr for Subset {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        let head = s.split(['/', ':', '.']).next().unwrap_or("");
        match head {
            "si" => Ok(Subset::Si),
            "mv" => Ok(Subset::Mv),
            _ => Err(()),
        }
    }
}

/// Records are labelled `si` or `mv` (optionally `si/<detail>`); numerical
/// records feed the NQ score, multiple-choice records the MCQ score.
pub fn spbench_report(records: &[EvalRecord], rules: &ScoringRules) -> Result<SpbenchReport, ScoreError> {
    let mut buckets: [[Vec<f64>; 2]; 2] = Default::default();
    let mut excluded = Vec::new();
    for r in records {
        let subset: Subset = r.subtask.parse().map_err(|_| ScoreError::UnknownSubtask {
            label: r.subtask.clone(),
            protocol: "spbench".into(),
        })?;
        let kind = match r.answer_type {
            AnswerType::Numerical => 0,
            AnswerType::MultipleChoice => 1,
            found => {
                return Err(ScoreError::AnswerType {
                    id: r.id.clone(),
                    found,
                    expected: AnswerType::Numerical,
                })
            }
        };
        match score_record(r, rules) {
            Ok(s) => buckets[subset as usize][kind].push(s),
            Err(ScoreError::ZeroTruth { id }) => excluded.push(Exclusion {
                id,
                reason: "zero ground truth".into(),
            }),
            Err(e) => return Err(e),
        }
    }
    let names = [["si_nq", "si_mcq"], ["mv_nq", "mv_mcq"]];
    let mut means = [[0.0; 2]; 2];
    for s in 0..2 {
        for k in 0..2 {
            let b = &buckets[s][k];
            if b.is_empty() {
                return Err(ScoreError::EmptySet(format!("{} has no records", names[s][k])));
            }
            means[s][k] = b.iter().sum::<f64>() / b.len() as f64;
        }
    }
    Ok(SpbenchReport {
        si_nq: means[0][0],
        si_mcq: means[0][1],
        mv_nq: means[1][0],
        mv_mcq: means[1][1],
        scores: spbench_aggregate(means[0][0], means[0][1], means[1][0], means[1][1]),
        excluded,
    })
}

/// Parses line-delimited JSON records. Blank lines are skipped; line numbers
/// in errors are 1-based.
pub fn parse_records(reader: impl BufRead) -> Result<Vec<EvalRecord>, ScoreError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| ScoreError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: EvalRecord = serde_json::from_str(&line).map_err(|e| ScoreError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<EvalRecord>, ScoreError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| ScoreError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_records(std::io::BufReader::new(file))
}
