//! The time-aware model input: dialogue history followed by `Events`,
//! `Progress`, `Schedule` and `Gap` sections.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::progress::{
    parse_progress_line, parse_schedule_line, render_progress_line, render_schedule_line, ProgressLabel, ScheduleSplit,
};
use crate::temporal::{parse_duration, Duration};

pub const DEFAULT_CHAR_BUDGET: usize = 4096;

pub const EVENTS_HEADER: &str = "Events";
pub const PROGRESS_HEADER: &str = "Progress";
pub const SCHEDULE_HEADER: &str = "Schedule";
pub const GAP_HEADER: &str = "Gap";
const HEADERS: [&str; 4] = [EVENTS_HEADER, PROGRESS_HEADER, SCHEDULE_HEADER, GAP_HEADER];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ContextError {
    #[error("mode `{mode}` {problem}")]
    ModeSectionMismatch { mode: ContextMode, problem: String },
    #[error("cannot parse context block: {0}")]
    Unparseable(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextMode {
    #[default]
    None,
    GapOnly,
    Progress,
    Schedule,
    Both,
}

impl ContextMode {
    pub const ALL: [ContextMode; 5] = [
        ContextMode::None,
        ContextMode::GapOnly,
        ContextMode::Progress,
        ContextMode::Schedule,
        ContextMode::Both,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ContextMode::None => "none",
            ContextMode::GapOnly => "gap_only",
            ContextMode::Progress => "progress",
            ContextMode::Schedule => "schedule",
            ContextMode::Both => "both",
        }
    }

    pub fn wants_gap(self) -> bool {
        self != ContextMode::None
    }

    pub fn wants_progress(self) -> bool {
        matches!(self, ContextMode::Progress | ContextMode::Both)
    }

    pub fn wants_schedule(self) -> bool {
        matches!(self, ContextMode::Schedule | ContextMode::Both)
    }

    /// The richest mode not exceeding `self` that the available sections
    /// can satisfy.
    pub fn restrict(self, has_progress: bool, has_schedule: bool, has_gap: bool) -> ContextMode {
        if !has_gap || self == ContextMode::None {
            return ContextMode::None;
        }
        match (self.wants_progress() && has_progress, self.wants_schedule() && has_schedule) {
            (true, true) => ContextMode::Both,
            (true, false) => ContextMode::Progress,
            (false, true) => ContextMode::Schedule,
            (false, false) => ContextMode::GapOnly,
        }
    }

    fn from_sections(progress: bool, schedule: bool, gap: bool) -> Option<ContextMode> {
        match (progress, schedule, gap) {
            (false, false, false) => Some(ContextMode::None),
            (false, false, true) => Some(ContextMode::GapOnly),
            (true, false, true) => Some(ContextMode::Progress),
            (false, true, true) => Some(ContextMode::Schedule),
            (true, true, true) => Some(ContextMode::Both),
            _ => None,
        }
    }
}

impl fmt::Display for ContextMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ContextMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ContextMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown mode `{s}`; expected none, gap_only, progress, schedule or both"))
    }
}

/// Events a speaker is engaged in, rendered as `B: first, second.`
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpeakerEvents {
    pub speaker: String,
    pub events: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpeakerProgress {
    pub speaker: String,
    pub items: Vec<(String, ProgressLabel)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpeakerSchedule {
    pub speaker: String,
    pub items: Vec<(String, ScheduleSplit)>,
}

/// Everything that goes into one context block.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextInput {
    /// Retrieved session documents, oldest first.
    #[serde(default)]
    pub retrieved: Vec<String>,
    pub history: Vec<String>,
    #[serde(default)]
    pub events: Vec<SpeakerEvents>,
    #[serde(default)]
    pub progress: Vec<SpeakerProgress>,
    #[serde(default)]
    pub schedule: Vec<SpeakerSchedule>,
    #[serde(default)]
    pub gap: Option<Duration>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextBlock {
    /// Retrieved documents and dialogue history, one line each, after
    /// truncation.
    pub history: Vec<String>,
    pub events_lines: Vec<String>,
    pub progress_lines: Option<Vec<String>>,
    pub schedule_lines: Option<Vec<String>>,
    pub gap_line: Option<String>,
    pub mode: ContextMode,
}

fn events_line(events: &SpeakerEvents) -> String {
    format!("{}: {}.", events.speaker, events.events.join(", "))
}

fn check_section(mode: ContextMode, name: &str, wanted: bool, supplied: bool) -> Result<(), ContextError> {
    match (wanted, supplied) {
        (true, false) => Err(ContextError::ModeSectionMismatch {
            mode,
            problem: format!("requires a {name} section"),
        }),
        (false, true) => Err(ContextError::ModeSectionMismatch {
            mode,
            problem: format!("does not take a {name} section"),
        }),
        _ => Ok(()),
    }
}

fn mismatch(mode: ContextMode, problem: impl Into<String>) -> ContextError {
    ContextError::ModeSectionMismatch {
        mode,
        problem: problem.into(),
    }
}

/// Builds the block for `mode`, dropping the oldest history lines until the
/// rendered text fits in `char_budget` characters. Section lines are never
/// dropped.
pub fn build_context(input: &ContextInput, mode: ContextMode, char_budget: usize) -> Result<ContextBlock, ContextError> {
    check_section(mode, "progress", mode.wants_progress(), !input.progress.is_empty())?;
    check_section(mode, "schedule", mode.wants_schedule(), !input.schedule.is_empty())?;
    check_section(mode, "gap", mode.wants_gap(), input.gap.is_some())?;

    let progress_lines = if mode.wants_progress() {
        Some(
            input
                .progress
                .iter()
                .map(|p| render_progress_line(&p.speaker, &p.items).map_err(|e| mismatch(mode, e.to_string())))
                .collect::<Result<Vec<_>, _>>()?,
        )
    } else {
        None
    };
    let schedule_lines = if mode.wants_schedule() {
        Some(
            input
                .schedule
                .iter()
                .map(|s| render_schedule_line(&s.speaker, &s.items).map_err(|e| mismatch(mode, e.to_string())))
                .collect::<Result<Vec<_>, _>>()?,
        )
    } else {
        None
    };
    let events_lines = input
        .events
        .iter()
        .filter(|e| !e.events.is_empty())
        .map(events_line)
        .collect();

    let history: Vec<String> = input
        .retrieved
        .iter()
        .flat_map(|doc| doc.lines())
        .chain(input.history.iter().flat_map(|h| h.lines()))
        .map(str::to_string)
        .collect();
    let mut block = ContextBlock {
        history,
        events_lines,
        progress_lines,
        schedule_lines,
        gap_line: input.gap.filter(|_| mode.wants_gap()).map(|g| g.to_string()),
        mode,
    };
    block.truncate_to(char_budget);
    Ok(block)
}

fn line_chars(line: &str) -> usize {
    line.chars().count() + 1
}

impl ContextBlock {
    fn section_lines(&self) -> Vec<&str> {
        let mut out = Vec::new();
        if !self.events_lines.is_empty() {
            out.push(EVENTS_HEADER);
            out.extend(self.events_lines.iter().map(String::as_str));
        }
        if let Some(lines) = &self.progress_lines {
            out.push(PROGRESS_HEADER);
            out.extend(lines.iter().map(String::as_str));
        }
        if let Some(lines) = &self.schedule_lines {
            out.push(SCHEDULE_HEADER);
            out.extend(lines.iter().map(String::as_str));
        }
        if let Some(gap) = &self.gap_line {
            out.push(GAP_HEADER);
            out.push(gap);
        }
        out
    }

    /// Lines joined by `\n`, without a trailing newline.
    pub fn render(&self) -> String {
        self.history
            .iter()
            .map(String::as_str)
            .chain(self.section_lines())
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn char_len(&self) -> usize {
        self.render().chars().count()
    }

    fn truncate_to(&mut self, budget: usize) {
        let sections: usize = self.section_lines().iter().map(|l| line_chars(l)).sum();
        let mut total: usize = sections + self.history.iter().map(|l| line_chars(l)).sum::<usize>();
        let mut drop = 0;
        // `total` counts one separator too many; the rendered text has none
        // after its last line.
        while total.saturating_sub(1) > budget && drop < self.history.len() {
            total -= line_chars(&self.history[drop]);
            drop += 1;
        }
        if drop > 0 {
            tracing::debug!(dropped = drop, "context history truncated");
            self.history.drain(..drop);
        }
    }

    /// Inverse of [`ContextBlock::render`]. History lines must not equal a
    /// section header.
    pub fn parse(text: &str) -> Result<ContextBlock, ContextError> {
        let lines: Vec<&str> = if text.is_empty() { Vec::new() } else { text.split('\n').collect() };
        let first_header = lines.iter().position(|l| HEADERS.contains(l)).unwrap_or(lines.len());
        let history = lines[..first_header].iter().map(|l| l.to_string()).collect();

        let mut sections: Vec<(&str, Vec<&str>)> = Vec::new();
        for line in &lines[first_header..] {
            if HEADERS.contains(line) {
                if sections.iter().any(|(h, _)| h == line) {
                    return Err(ContextError::Unparseable(format!("repeated `{line}` section")));
                }
                sections.push((line, Vec::new()));
            } else {
                sections.last_mut().expect("started at a header").1.push(line);
            }
        }
        let order: Vec<&str> = sections.iter().map(|(h, _)| *h).collect();
        let mut expected = HEADERS.iter().filter(|h| order.contains(h));
        if !order.iter().all(|h| expected.next() == Some(h)) {
            return Err(ContextError::Unparseable("sections out of order".into()));
        }
        let take = |name: &str| sections.iter().find(|(h, _)| *h == name).map(|(_, body)| body.clone());

        let events_lines = match take(EVENTS_HEADER) {
            Some(body) if body.is_empty() => return Err(ContextError::Unparseable("empty Events section".into())),
            Some(body) => body.into_iter().map(str::to_string).collect(),
            None => Vec::new(),
        };
        let progress_lines = match take(PROGRESS_HEADER) {
            Some(body) => {
                for line in &body {
                    parse_progress_line(line).map_err(|e| ContextError::Unparseable(e.to_string()))?;
                }
                Some(body.into_iter().map(str::to_string).collect())
            }
            None => None,
        };
        let schedule_lines = match take(SCHEDULE_HEADER) {
            Some(body) => {
                for line in &body {
                    parse_schedule_line(line).map_err(|e| ContextError::Unparseable(e.to_string()))?;
                }
                Some(body.into_iter().map(str::to_string).collect())
            }
            None => None,
        };
        let gap_line = match take(GAP_HEADER) {
            Some(body) => match body.as_slice() {
                [gap] => {
                    parse_duration(gap).map_err(|e| ContextError::Unparseable(e.to_string()))?;
                    Some(gap.to_string())
                }
                _ => return Err(ContextError::Unparseable("Gap section must hold one line".into())),
            },
            None => None,
        };
        let mode = ContextMode::from_sections(progress_lines.is_some(), schedule_lines.is_some(), gap_line.is_some())
            .ok_or_else(|| ContextError::Unparseable("progress or schedule without a gap".into()))?;
        Ok(ContextBlock {
            history,
            events_lines,
            progress_lines,
            schedule_lines,
            gap_line,
            mode,
        })
    }

    /// Progress items per speaker, parsed back from the rendered lines.
    pub fn progress(&self) -> Vec<SpeakerProgress> {
        self.progress_lines
            .iter()
            .flatten()
            .filter_map(|l| parse_progress_line(l).ok())
            .map(|(speaker, items)| SpeakerProgress { speaker, items })
            .collect()
    }
}
