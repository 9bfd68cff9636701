//! Pairwise human-evaluation aggregation: judgment filtering, net
//! preference per attribute, Fleiss' kappa, per-gap breakdowns and the
//! event-selection count.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::ImportIssue;
use crate::progress::ProgressLabel;
use crate::temporal::GapBucket;
use crate::text::{content_tokens, tokens};

pub const MIN_WORK_SECONDS: f64 = 200.0;
pub const MIN_JUSTIFICATION_CONTENT_TOKENS: usize = 2;
pub const REPEAT_THRESHOLD: usize = 3;
pub const COPY_OVERLAP: f64 = 0.9;
pub const MENTION_FRACTION: f64 = 0.5;
/// Questions that ask annotators to justify their choice.
pub const JUSTIFIED_QUESTIONS: [u8; 4] = [3, 6, 9, 11];
/// Questions where choosing a system counts against it.
pub const REVERSE_KEYED_QUESTIONS: [u8; 1] = [5];

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("no judgments for attribute {0}")]
    NoJudgmentsForAttribute(Attribute),
    #[error("question id {0} is outside 1..=11")]
    InvalidQuestion(u8),
    #[error("judgment on task `{task}` compares {left} and {right}, expected {model} and {baseline}")]
    MismatchedModels {
        task: String,
        left: String,
        right: String,
        model: String,
        baseline: String,
    },
    #[error("chance agreement is 1, kappa undefined")]
    DegenerateAgreement,
    #[error("invalid rating matrix: {0}")]
    InvalidMatrix(String),
    #[error("judgment file {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribute {
    Naturalness,
    Informativeness,
    Relevance,
    TimeAwareness,
}

impl Attribute {
    pub const ALL: [Attribute; 4] = [
        Attribute::Naturalness,
        Attribute::Informativeness,
        Attribute::Relevance,
        Attribute::TimeAwareness,
    ];

    pub fn from_question(question_id: u8) -> Result<Attribute, EvalError> {
        match question_id {
            1..=3 => Ok(Attribute::Naturalness),
            4..=6 => Ok(Attribute::Informativeness),
            7..=9 => Ok(Attribute::Relevance),
            10 | 11 => Ok(Attribute::TimeAwareness),
            other => Err(EvalError::InvalidQuestion(other)),
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            Attribute::Naturalness => "Naturalness",
            Attribute::Informativeness => "Informativeness",
            Attribute::Relevance => "Relevance",
            Attribute::TimeAwareness => "Time-Awareness",
        }
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.title())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Choice {
    Left,
    Right,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Judgment {
    pub task_id: String,
    pub annotator_id: String,
    pub question_id: u8,
    pub choice: Choice,
    #[serde(default)]
    pub justification: String,
    pub work_seconds: f64,
    pub left_model: String,
    pub right_model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gap_bucket: Option<GapBucket>,
}

impl Judgment {
    pub fn chosen_model(&self) -> &str {
        match self.choice {
            Choice::Left => &self.left_model,
            Choice::Right => &self.right_model,
        }
    }

    pub fn other_model(&self) -> &str {
        match self.choice {
            Choice::Left => &self.right_model,
            Choice::Right => &self.left_model,
        }
    }

    /// The model this answer favours, after reverse keying.
    pub fn preferred_model(&self) -> &str {
        if REVERSE_KEYED_QUESTIONS.contains(&self.question_id) {
            self.other_model()
        } else {
            self.chosen_model()
        }
    }
}

pub fn load_judgments(path: impl AsRef<Path>) -> Result<(Vec<Judgment>, Vec<ImportIssue>), EvalError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| EvalError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let mut judgments = Vec::new();
    let mut issues = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Judgment>(line) {
            Ok(j) => judgments.push(j),
            Err(e) => issues.push(ImportIssue {
                line: i + 1,
                message: e.to_string(),
            }),
        }
    }
    Ok((judgments, issues))
}

// ---------------------------------------------------------------------------
// Filtering

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    ShortWorkTime,
    InvalidQuestion,
    SingleWordJustification,
    RepeatedJustification,
    CopiedJustification,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedJudgment {
    pub judgment: Judgment,
    pub reason: DropReason,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterOutcome {
    pub kept: Vec<Judgment>,
    pub dropped: Vec<DroppedJudgment>,
}

impl FilterOutcome {
    pub fn reason_counts(&self) -> BTreeMap<DropReason, usize> {
        let mut counts = BTreeMap::new();
        for d in &self.dropped {
            *counts.entry(d.reason).or_default() += 1;
        }
        counts
    }
}

fn trigrams(words: &[String]) -> Vec<[&str; 3]> {
    words.windows(3).map(|w| [w[0].as_str(), w[1].as_str(), w[2].as_str()]).collect()
}

/// Share of the justification's word trigrams that also occur in the
/// transcript; unigrams for justifications shorter than three words.
pub fn copy_overlap(justification: &str, transcript: &str) -> f64 {
    let j = tokens(justification);
    let t = tokens(transcript);
    if j.is_empty() {
        return 0.0;
    }
    if j.len() < 3 {
        let vocab: BTreeSet<&String> = t.iter().collect();
        return j.iter().filter(|w| vocab.contains(w)).count() as f64 / j.len() as f64;
    }
    let source: BTreeSet<[&str; 3]> = trigrams(&t).into_iter().collect();
    let grams = trigrams(&j);
    grams.iter().filter(|g| source.contains(*g)).count() as f64 / grams.len() as f64
}

/// [`filter_judgments_with`] without transcripts, so the copy rule never
/// fires.
pub fn filter_judgments(raw: &[Judgment]) -> FilterOutcome {
    filter_judgments_with(raw, &BTreeMap::new())
}

/// Drops judgments with short work time, and justified answers whose
/// justification is a single word, repeated verbatim at least three times by
/// the same annotator, or copied from the task transcript (keyed by
/// `task_id`).
pub fn filter_judgments_with(raw: &[Judgment], transcripts: &BTreeMap<String, String>) -> FilterOutcome {
    let mut repeats: BTreeMap<(&str, &str), usize> = BTreeMap::new();
    for j in raw.iter().filter(|j| JUSTIFIED_QUESTIONS.contains(&j.question_id)) {
        *repeats.entry((&j.annotator_id, &j.justification)).or_default() += 1;
    }
    let mut outcome = FilterOutcome::default();
    for j in raw {
        let reason = if Attribute::from_question(j.question_id).is_err() {
            Some(DropReason::InvalidQuestion)
        } else if j.work_seconds.is_nan() || j.work_seconds < MIN_WORK_SECONDS {
            Some(DropReason::ShortWorkTime)
        } else if JUSTIFIED_QUESTIONS.contains(&j.question_id) {
            if content_tokens(&j.justification).len() < MIN_JUSTIFICATION_CONTENT_TOKENS {
                Some(DropReason::SingleWordJustification)
            } else if repeats[&(j.annotator_id.as_str(), j.justification.as_str())] >= REPEAT_THRESHOLD {
                Some(DropReason::RepeatedJustification)
            } else if transcripts
                .get(&j.task_id)
                .is_some_and(|t| copy_overlap(&j.justification, t) >= COPY_OVERLAP)
            {
                Some(DropReason::CopiedJustification)
            } else {
                None
            }
        } else {
            None
        };
        match reason {
            Some(reason) => outcome.dropped.push(DroppedJudgment {
                judgment: j.clone(),
                reason,
            }),
            None => outcome.kept.push(j.clone()),
        }
    }
    outcome
}

// ---------------------------------------------------------------------------
// Aggregation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub judgments: usize,
    pub model_wins: usize,
    pub baseline_wins: usize,
    /// `100 * (model_wins - baseline_wins) / judgments`; `None` when empty.
    pub score: Option<f64>,
}

impl ScoreRow {
    /// An answer is a win only when the favoured side is a different model
    /// from the other side, so comparing a model with itself nets to zero.
    fn tally<'a>(judgments: impl Iterator<Item = &'a Judgment>, model: &str, baseline: &str) -> ScoreRow {
        let (mut n, mut wins, mut losses) = (0, 0, 0);
        for j in judgments {
            n += 1;
            if j.left_model == j.right_model {
                continue;
            }
            let preferred = j.preferred_model();
            if preferred == model {
                wins += 1;
            } else if preferred == baseline {
                losses += 1;
            }
        }
        ScoreRow {
            judgments: n,
            model_wins: wins,
            baseline_wins: losses,
            score: (n > 0).then(|| 100.0 * (wins as f64 - losses as f64) / n as f64),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub model: String,
    pub baseline: String,
    pub attributes: BTreeMap<Attribute, ScoreRow>,
    pub total: ScoreRow,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
    pub retained: usize,
    pub filtered: usize,
    /// Scores pool all answers of an attribute (question-level pooling).
    pub pooling: String,
    pub reverse_keyed_questions: Vec<u8>,
}

impl ComparisonReport {
    pub fn score(&self, attribute: Attribute) -> Option<f64> {
        self.attributes.get(&attribute).and_then(|r| r.score)
    }
}

fn check_models(judgments: &[Judgment], model: &str, baseline: &str) -> Result<(), EvalError> {
    for j in judgments {
        Attribute::from_question(j.question_id)?;
        let pair_ok = (j.left_model == model && j.right_model == baseline)
            || (j.left_model == baseline && j.right_model == model);
        if !pair_ok {
            return Err(EvalError::MismatchedModels {
                task: j.task_id.clone(),
                left: j.left_model.clone(),
                right: j.right_model.clone(),
                model: model.to_string(),
                baseline: baseline.to_string(),
            });
        }
    }
    Ok(())
}

fn tally_report(judgments: &[Judgment], model: &str, baseline: &str) -> ComparisonReport {
    let attributes = Attribute::ALL
        .into_iter()
        .map(|a| {
            let rows = judgments
                .iter()
                .filter(move |j| Attribute::from_question(j.question_id).ok() == Some(a));
            (a, ScoreRow::tally(rows, model, baseline))
        })
        .collect();
    ComparisonReport {
        model: model.to_string(),
        baseline: baseline.to_string(),
        attributes,
        total: ScoreRow::tally(judgments.iter(), model, baseline),
        kappa: None,
        retained: judgments.len(),
        filtered: 0,
        pooling: "question".to_string(),
        reverse_keyed_questions: REVERSE_KEYED_QUESTIONS.to_vec(),
    }
}

/// Net preference of `model` over `baseline` per attribute and in total.
pub fn aggregate_attribute_scores(judgments: &[Judgment], model: &str, baseline: &str) -> Result<ComparisonReport, EvalError> {
    check_models(judgments, model, baseline)?;
    let report = tally_report(judgments, model, baseline);
    if let Some((a, _)) = report.attributes.iter().find(|(_, r)| r.judgments == 0) {
        return Err(EvalError::NoJudgmentsForAttribute(*a));
    }
    Ok(report)
}

/// Filters, aggregates and attaches agreement in one step.
pub fn compare_models(
    raw: &[Judgment],
    transcripts: &BTreeMap<String, String>,
    model: &str,
    baseline: &str,
) -> Result<ComparisonReport, EvalError> {
    let outcome = filter_judgments_with(raw, transcripts);
    let mut report = aggregate_attribute_scores(&outcome.kept, model, baseline)?;
    report.filtered = outcome.dropped.len();
    report.kappa = kappa_from_judgments(&outcome.kept).ok();
    Ok(report)
}

// ---------------------------------------------------------------------------
// Agreement

/// Fleiss' kappa for `matrix[item][category]` counts with `raters` ratings
/// per item.
pub fn fleiss_kappa(matrix: &[Vec<u64>], raters: u64) -> Result<f64, EvalError> {
    if raters < 2 {
        return Err(EvalError::InvalidMatrix("at least two raters per item are needed".into()));
    }
    if matrix.is_empty() {
        return Err(EvalError::InvalidMatrix("no items".into()));
    }
    let categories = matrix[0].len();
    for (i, row) in matrix.iter().enumerate() {
        if row.len() != categories {
            return Err(EvalError::InvalidMatrix(format!("row {i} has {} categories", row.len())));
        }
        if row.iter().sum::<u64>() != raters {
            return Err(EvalError::InvalidMatrix(format!("row {i} does not sum to {raters}")));
        }
    }
    let items = matrix.len() as f64;
    let n = raters as f64;
    let p_bar = matrix
        .iter()
        .map(|row| {
            let agree: u64 = row.iter().map(|&c| c * c.saturating_sub(1)).sum();
            agree as f64 / (n * (n - 1.0))
        })
        .sum::<f64>()
        / items;
    let p_e: f64 = (0..categories)
        .map(|j| {
            let p = matrix.iter().map(|row| row[j]).sum::<u64>() as f64 / (items * n);
            p * p
        })
        .sum();
    if (1.0 - p_e).abs() < 1e-12 {
        return Err(EvalError::DegenerateAgreement);
    }
    Ok((p_bar - p_e) / (1.0 - p_e))
}

/// Kappa over (task, question) items, with the preferred model as the
/// category. Only items rated by the most common number of annotators are
/// used, since the statistic needs a constant rater count.
pub fn kappa_from_judgments(judgments: &[Judgment]) -> Result<f64, EvalError> {
    let mut items: BTreeMap<(&str, u8), Vec<&str>> = BTreeMap::new();
    for j in judgments {
        items.entry((&j.task_id, j.question_id)).or_default().push(j.preferred_model());
    }
    let mut sizes: BTreeMap<usize, usize> = BTreeMap::new();
    for votes in items.values() {
        *sizes.entry(votes.len()).or_default() += 1;
    }
    let raters = sizes
        .iter()
        .filter(|(k, _)| **k >= 2)
        .max_by_key(|(k, count)| (**count, **k))
        .map(|(k, _)| *k)
        .ok_or_else(|| EvalError::InvalidMatrix("no item has two or more ratings".into()))?;
    let categories: Vec<&str> = {
        let set: BTreeSet<&str> = items.values().flatten().copied().collect();
        set.into_iter().collect()
    };
    let matrix: Vec<Vec<u64>> = items
        .values()
        .filter(|v| v.len() == raters)
        .map(|votes| {
            categories
                .iter()
                .map(|c| votes.iter().filter(|v| *v == c).count() as u64)
                .collect()
        })
        .collect();
    fleiss_kappa(&matrix, raters as u64)
}

// ---------------------------------------------------------------------------
// Gap buckets

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketRow {
    pub bucket: GapBucket,
    /// Distinct tasks (evaluated sessions) in the bucket.
    pub sessions: usize,
    pub report: ComparisonReport,
}

/// Scores per gap bucket, ordered from minutes to year. Judgments without a
/// bucket are ignored; empty buckets are omitted.
pub fn gap_bucket_report(judgments: &[Judgment], model: &str, baseline: &str) -> Result<Vec<BucketRow>, EvalError> {
    check_models(judgments, model, baseline)?;
    let mut rows = Vec::new();
    for bucket in GapBucket::ALL {
        let subset: Vec<Judgment> = judgments.iter().filter(|j| j.gap_bucket == Some(bucket)).cloned().collect();
        if subset.is_empty() {
            continue;
        }
        let sessions = subset.iter().map(|j| j.task_id.as_str()).collect::<BTreeSet<_>>().len();
        rows.push(BucketRow {
            bucket,
            sessions,
            report: tally_report(&subset, model, baseline),
        });
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Event selection

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionPair {
    /// Labels of the events active at the follow-up session.
    pub labels: Vec<(String, ProgressLabel)>,
    pub follow_up: Vec<String>,
}

/// At least half of the description's distinct content words occur in the
/// utterance.
pub fn mentions(utterance: &str, event_description: &str) -> bool {
    let wanted: BTreeSet<String> = content_tokens(event_description).into_iter().collect();
    if wanted.is_empty() {
        return false;
    }
    let present: BTreeSet<String> = content_tokens(utterance).into_iter().collect();
    let hits = wanted.iter().filter(|w| present.contains(*w)).count();
    hits as f64 >= MENTION_FRACTION * wanted.len() as f64
}

pub fn selects_correct_events(pair: &SessionPair) -> bool {
    pair.labels
        .iter()
        .filter(|(_, label)| *label == ProgressLabel::NoSignificantProgress)
        .all(|(event, _)| !pair.follow_up.iter().any(|u| mentions(u, event)))
}

/// Pairs whose follow-up session never mentions a stalled event. This is a
/// mechanical proxy for a manual review.
pub fn count_correct_event_selection(pairs: &[SessionPair]) -> usize {
    pairs.iter().filter(|p| selects_correct_events(p)).count()
}

// ---------------------------------------------------------------------------
// Reports

fn fmt_score(score: Option<f64>) -> String {
    score.map_or_else(|| "-".to_string(), |s| format!("{s:.2}"))
}

/// Aligned table with one row per compared model.
pub fn render_comparison_table(reports: &[ComparisonReport]) -> String {
    let mut header = vec!["Model".to_string()];
    header.extend(Attribute::ALL.iter().map(|a| a.title().to_string()));
    header.push("Total".to_string());
    let mut rows = vec![header];
    for r in reports {
        let mut row = vec![r.model.clone()];
        row.extend(Attribute::ALL.iter().map(|a| fmt_score(r.score(*a))));
        row.push(fmt_score(r.total.score));
        rows.push(row);
    }
    let baseline = reports.first().map(|r| r.baseline.as_str()).unwrap_or("baseline");
    let mut out = align(&rows);
    out.push_str(&format!(
        "scores are net preference against {baseline}; negative means worse; Q5 is reverse-keyed\n"
    ));
    for r in reports {
        if let Some(k) = r.kappa {
            out.push_str(&format!("{}: kappa {:.3}, retained {}, filtered {}\n", r.model, k, r.retained, r.filtered));
        }
    }
    out
}

pub fn render_bucket_table(rows: &[BucketRow]) -> String {
    let mut table = vec![{
        let mut h = vec!["Session gap".to_string(), "#sessions".to_string()];
        h.extend(Attribute::ALL.iter().map(|a| a.title().to_string()));
        h
    }];
    for row in rows {
        let mut r = vec![row.bucket.as_str().to_string(), row.sessions.to_string()];
        r.extend(Attribute::ALL.iter().map(|a| fmt_score(row.report.score(*a))));
        table.push(r);
    }
    align(&table)
}

fn align(rows: &[Vec<String>]) -> String {
    let columns = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..columns)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(|s| s.chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in rows {
        let cells: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, cell)| if c == 0 { format!("{cell:<w$}", w = widths[c]) } else { format!("{cell:>w$}", w = widths[c]) })
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
    out
}
