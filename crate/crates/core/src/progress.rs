//! Event progress as seen across a session gap: five-valued labels and
//! finished/to-do schedule splits, plus their single-line renderings.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{Schedule, Step};
use crate::temporal::{parse_duration, Duration};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProgressError {
    #[error("event duration must be at least one minute")]
    ZeroDuration,
    #[error("nothing to render")]
    EmptyItems,
    #[error("cannot parse progress text: {0}")]
    Unparseable(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProgressLabel {
    NoSignificantProgress,
    QuarterFinished,
    HalfFinished,
    ThreeQuartersFinished,
    Finished,
}

impl ProgressLabel {
    pub const ALL: [ProgressLabel; 5] = [
        ProgressLabel::NoSignificantProgress,
        ProgressLabel::QuarterFinished,
        ProgressLabel::HalfFinished,
        ProgressLabel::ThreeQuartersFinished,
        ProgressLabel::Finished,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ProgressLabel::NoSignificantProgress => "no significant progress",
            ProgressLabel::QuarterFinished => "1/4 finished",
            ProgressLabel::HalfFinished => "half finished",
            ProgressLabel::ThreeQuartersFinished => "3/4 finished",
            ProgressLabel::Finished => "finished",
        }
    }
}

impl fmt::Display for ProgressLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProgressLabel {
    type Err = ProgressError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ProgressLabel::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| ProgressError::Unparseable(s.to_string()))
    }
}

/// Quantizes `elapsed / duration` to the nearest quarter.
///
/// Only `elapsed >= duration` yields `Finished`. Below that the fraction
/// goes to the nearest of 0, 1/4, 1/2, 3/4, and exact midpoints go to the
/// lower quarter. Comparisons are done in integers on `8 * elapsed`.
pub fn compute_progress_label(duration: Duration, elapsed: Duration) -> Result<ProgressLabel, ProgressError> {
    let total = duration.minutes() as u128;
    if total == 0 {
        return Err(ProgressError::ZeroDuration);
    }
    let done = elapsed.minutes() as u128;
    if done >= total {
        return Ok(ProgressLabel::Finished);
    }
    let eighths = 8 * done;
    Ok(if eighths <= total {
        ProgressLabel::NoSignificantProgress
    } else if eighths <= 3 * total {
        ProgressLabel::QuarterFinished
    } else if eighths <= 5 * total {
        ProgressLabel::HalfFinished
    } else {
        ProgressLabel::ThreeQuartersFinished
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleSplit {
    pub finished: Vec<Step>,
    pub todo: Vec<Step>,
}

/// Step k is finished iff the cumulative duration through step k fits in
/// `elapsed`. A partly elapsed step stays in `todo`.
pub fn split_schedule(schedule: &Schedule, elapsed: Duration) -> ScheduleSplit {
    let mut cumulative = 0u64;
    let boundary = schedule
        .steps
        .iter()
        .position(|step| {
            cumulative += step.duration.minutes();
            cumulative > elapsed.minutes()
        })
        .unwrap_or(schedule.steps.len());
    ScheduleSplit {
        finished: schedule.steps[..boundary].to_vec(),
        todo: schedule.steps[boundary..].to_vec(),
    }
}

/// `B: writing doctorate thesis [no significant progress], book reading event [finished].`
pub fn render_progress_line(speaker: &str, items: &[(String, ProgressLabel)]) -> Result<String, ProgressError> {
    if items.is_empty() {
        return Err(ProgressError::EmptyItems);
    }
    let body = items
        .iter()
        .map(|(desc, label)| format!("{desc} [{label}]"))
        .collect::<Vec<_>>()
        .join(", ");
    Ok(format!("{speaker}: {body}."))
}

fn split_speaker(line: &str) -> Result<(&str, &str), ProgressError> {
    let (speaker, rest) = line
        .split_once(": ")
        .ok_or_else(|| ProgressError::Unparseable(line.to_string()))?;
    let body = rest
        .strip_suffix('.')
        .ok_or_else(|| ProgressError::Unparseable(line.to_string()))?;
    Ok((speaker, body))
}

/// Splits `desc [..], desc [..]` into `(desc, bracket-content)` pairs.
fn bracketed_items(body: &str) -> Result<Vec<(String, String)>, ProgressError> {
    let err = || ProgressError::Unparseable(body.to_string());
    let mut items = Vec::new();
    let mut rest = body;
    loop {
        let open = rest.find(" [").ok_or_else(err)?;
        let close = rest[open..].find(']').ok_or_else(err)? + open;
        items.push((rest[..open].to_string(), rest[open + 2..close].to_string()));
        rest = &rest[close + 1..];
        if rest.is_empty() {
            return Ok(items);
        }
        rest = rest.strip_prefix(", ").ok_or_else(err)?;
    }
}

/// Inverse of [`render_progress_line`].
pub fn parse_progress_line(line: &str) -> Result<(String, Vec<(String, ProgressLabel)>), ProgressError> {
    let (speaker, body) = split_speaker(line)?;
    let items = bracketed_items(body)?
        .into_iter()
        .map(|(desc, label)| Ok((desc, label.parse()?)))
        .collect::<Result<Vec<_>, ProgressError>>()?;
    Ok((speaker.to_string(), items))
}

fn render_steps(steps: &[Step]) -> String {
    if steps.is_empty() {
        "none".to_string()
    } else {
        steps.iter().map(Step::to_string).collect::<Vec<_>>().join("; ")
    }
}

/// `B: getting a driver license [finished: one week for learning rules | to-do: 2 weeks for practicing; ...].`
pub fn render_schedule_line(speaker: &str, items: &[(String, ScheduleSplit)]) -> Result<String, ProgressError> {
    if items.is_empty() {
        return Err(ProgressError::EmptyItems);
    }
    let body = items
        .iter()
        .map(|(desc, split)| {
            format!(
                "{desc} [finished: {} | to-do: {}]",
                render_steps(&split.finished),
                render_steps(&split.todo)
            )
        })
        .collect::<Vec<_>>()
        .join(", ");
    Ok(format!("{speaker}: {body}."))
}

/// Parses `<duration> for <description>`.
pub fn parse_step(text: &str) -> Result<Step, ProgressError> {
    let (duration, description) = text
        .split_once(" for ")
        .ok_or_else(|| ProgressError::Unparseable(text.to_string()))?;
    let duration = parse_duration(duration).map_err(|_| ProgressError::Unparseable(text.to_string()))?;
    Ok(Step::new(description, duration))
}

fn parse_steps(text: &str) -> Result<Vec<Step>, ProgressError> {
    if text == "none" {
        return Ok(Vec::new());
    }
    text.split("; ").map(parse_step).collect()
}

/// Inverse of [`render_schedule_line`].
pub fn parse_schedule_line(line: &str) -> Result<(String, Vec<(String, ScheduleSplit)>), ProgressError> {
    let (speaker, body) = split_speaker(line)?;
    let items = bracketed_items(body)?
        .into_iter()
        .map(|(desc, inner)| {
            let err = || ProgressError::Unparseable(inner.clone());
            let (finished, todo) = inner.split_once(" | ").ok_or_else(err)?;
            let finished = finished.strip_prefix("finished: ").ok_or_else(err)?;
            let todo = todo.strip_prefix("to-do: ").ok_or_else(err)?;
            Ok((
                desc,
                ScheduleSplit {
                    finished: parse_steps(finished)?,
                    todo: parse_steps(todo)?,
                },
            ))
        })
        .collect::<Result<Vec<_>, ProgressError>>()?;
    Ok((speaker.to_string(), items))
}
