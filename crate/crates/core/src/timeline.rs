//! Per-speaker timelines and the clock that moves across session gaps.
//!
//! Life events are laid out on a fixed number of lanes (the concurrency
//! cap). Within a lane each event starts exactly when its predecessor
//! completes. World events are point-in-time entries placed in real-world
//! order and shared by both speakers of a pairing.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{EventPool, Schedule, Step};
use crate::progress::{compute_progress_label, split_schedule, ProgressLabel};
use crate::temporal::Duration;

pub const NO_SIGNIFICANT_PROGRESS: &str = "No significant progress.";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TimelineError {
    #[error("horizon {horizon} is shorter than every candidate event (shortest is {shortest})")]
    HorizonTooShort { horizon: Duration, shortest: Duration },
    #[error("time {t} lies beyond the timeline horizon {horizon}")]
    BeyondHorizon { t: Duration, horizon: Duration },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntryKind {
    Life,
    World,
}

/// One placed event. Life entries carry their resolved schedule so that a
/// timeline can be advanced and dumped without the pool it came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimelineEntry {
    pub event_id: String,
    pub kind: EntryKind,
    pub description: String,
    pub schedule_choice: usize,
    pub start_offset: Duration,
    /// Effective duration; zero for world events.
    pub duration: Duration,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub steps: Vec<Step>,
}

impl TimelineEntry {
    pub fn end(&self) -> Duration {
        self.start_offset + self.duration
    }

    pub fn is_active_at(&self, t: Duration) -> bool {
        self.start_offset <= t && t < self.end()
    }

    /// Card text shown when the event is introduced to its speaker.
    pub fn intro_text(&self) -> String {
        match self.kind {
            EntryKind::Life => format!(
                "You just started {}, which would take about {}.",
                self.description, self.duration
            ),
            EntryKind::World => self.description.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Timeline {
    pub speaker_id: String,
    pub entries: Vec<TimelineEntry>,
    pub horizon: Duration,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClockState {
    pub elapsed: Duration,
    pub session_index: u32,
}

impl Default for ClockState {
    fn default() -> Self {
        ClockState {
            elapsed: Duration::ZERO,
            session_index: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimelineConfig {
    /// Maximum number of simultaneously running life events.
    pub concurrency_cap: usize,
    pub world_events: usize,
    pub max_life_events: Option<usize>,
}

impl Default for TimelineConfig {
    fn default() -> Self {
        TimelineConfig {
            concurrency_cap: 2,
            world_events: 8,
            max_life_events: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActiveEvent {
    pub event_id: String,
    pub elapsed_within_event: Duration,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProgressNote {
    pub event_id: String,
    pub description: String,
    pub label: ProgressLabel,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionNote {
    pub event_id: String,
    pub description: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventCard {
    pub event_id: String,
    pub kind: EntryKind,
    pub description: String,
    pub text: String,
}

impl From<&TimelineEntry> for EventCard {
    fn from(entry: &TimelineEntry) -> Self {
        EventCard {
            event_id: entry.event_id.clone(),
            kind: entry.kind,
            description: entry.description.clone(),
            text: entry.intro_text(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FuturePlan {
    pub event_id: String,
    pub text: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateBundle {
    pub finished_progress: Vec<ProgressNote>,
    pub completed: Vec<CompletionNote>,
    pub new_events: Vec<EventCard>,
    pub future_plans: Vec<FuturePlan>,
}

impl UpdateBundle {
    /// Every line a speaker would read on their update card.
    pub fn card_lines(&self) -> Vec<String> {
        let mut lines = Vec::new();
        for note in &self.finished_progress {
            lines.push(format!("{}: {}", note.description, note.message));
        }
        for note in &self.completed {
            lines.push(note.message.clone());
        }
        for card in &self.new_events {
            lines.push(card.text.clone());
        }
        for plan in &self.future_plans {
            lines.push(plan.text.clone());
        }
        lines
    }
}

struct Candidate {
    event_id: String,
    description: String,
    schedule_choice: usize,
    duration: Duration,
    steps: Vec<Step>,
}

fn place_life_events<R: Rng + ?Sized>(
    pool: &EventPool,
    horizon: Duration,
    config: &TimelineConfig,
    rng: &mut R,
) -> Result<Vec<TimelineEntry>, TimelineError> {
    let events = pool.life_events();
    let order = rand::seq::index::sample(rng, events.len(), events.len());
    let mut candidates = Vec::new();
    let mut shortest: Option<Duration> = None;
    for i in order {
        let event = &events[i];
        let schedule_choice = if event.schedules.len() > 1 {
            rng.random_range(0..event.schedules.len())
        } else {
            0
        };
        let duration = event
            .effective_duration(schedule_choice)
            .expect("validated pools have a schedule at the chosen index");
        shortest = Some(shortest.map_or(duration, |s| s.min(duration)));
        if duration <= horizon {
            candidates.push(Candidate {
                event_id: event.id.clone(),
                description: event.description.clone(),
                schedule_choice,
                duration,
                steps: event
                    .schedules
                    .get(schedule_choice)
                    .map(|s| s.steps.clone())
                    .unwrap_or_default(),
            });
        }
    }
    if horizon.is_zero() || candidates.is_empty() {
        return Err(TimelineError::HorizonTooShort {
            horizon,
            shortest: shortest.unwrap_or(Duration::ZERO),
        });
    }

    let lanes = config.concurrency_cap.max(1);
    let first = candidates[0].duration.minutes().min(horizon.minutes()).max(1);
    let mut cursors = vec![0u64; lanes];
    for cursor in cursors.iter_mut().skip(1) {
        *cursor = rng.random_range(0..first);
    }
    let limit = config.max_life_events.unwrap_or(usize::MAX);
    let mut placed = Vec::new();
    for candidate in candidates.into_iter().take(limit) {
        let (lane, cursor) = cursors
            .iter()
            .copied()
            .enumerate()
            .min_by_key(|&(i, c)| (c, i))
            .expect("at least one lane");
        if cursor >= horizon.minutes() {
            break;
        }
        cursors[lane] = cursor + candidate.duration.minutes();
        placed.push(TimelineEntry {
            event_id: candidate.event_id,
            kind: EntryKind::Life,
            description: candidate.description,
            schedule_choice: candidate.schedule_choice,
            start_offset: Duration::from_minutes(cursor),
            duration: candidate.duration,
            steps: candidate.steps,
        });
    }
    Ok(placed)
}

/// World events in real-world order at sorted random offsets.
pub fn place_world_events<R: Rng + ?Sized>(
    pool: &EventPool,
    horizon: Duration,
    count: usize,
    rng: &mut R,
) -> Vec<TimelineEntry> {
    let world = pool.world_events();
    let count = count.min(world.len());
    if count == 0 || horizon.is_zero() {
        return Vec::new();
    }
    let mut picked: Vec<usize> = rand::seq::index::sample(rng, world.len(), count).into_vec();
    picked.sort_unstable();
    let mut offsets: Vec<u64> = (0..count).map(|_| rng.random_range(0..horizon.minutes())).collect();
    offsets.sort_unstable();
    picked
        .into_iter()
        .zip(offsets)
        .map(|(i, offset)| TimelineEntry {
            event_id: world[i].id.clone(),
            kind: EntryKind::World,
            description: world[i].headline.clone(),
            schedule_choice: 0,
            start_offset: Duration::from_minutes(offset),
            duration: Duration::ZERO,
            steps: Vec::new(),
        })
        .collect()
}

fn assemble(speaker_id: &str, horizon: Duration, life: Vec<TimelineEntry>, world: &[TimelineEntry]) -> Timeline {
    let mut entries = life;
    entries.extend(world.iter().cloned());
    // stable: world entries sharing an offset keep real-world order
    entries.sort_by_key(|e| (e.start_offset, e.kind));
    Timeline {
        speaker_id: speaker_id.to_string(),
        entries,
        horizon,
    }
}

pub fn generate_timeline_with<R: Rng + ?Sized>(
    pool: &EventPool,
    speaker_id: &str,
    horizon: Duration,
    config: &TimelineConfig,
    rng: &mut R,
) -> Result<Timeline, TimelineError> {
    let life = place_life_events(pool, horizon, config, rng)?;
    let world = place_world_events(pool, horizon, config.world_events, rng);
    Ok(assemble(speaker_id, horizon, life, &world))
}

pub fn generate_timeline<R: Rng + ?Sized>(
    pool: &EventPool,
    speaker_id: &str,
    horizon: Duration,
    rng: &mut R,
) -> Result<Timeline, TimelineError> {
    generate_timeline_with(pool, speaker_id, horizon, &TimelineConfig::default(), rng)
}

/// Timelines for a pair of speakers sharing one world-event track.
pub fn generate_pair_timelines<R: Rng + ?Sized>(
    pool: &EventPool,
    speakers: [&str; 2],
    horizon: Duration,
    config: &TimelineConfig,
    rng: &mut R,
) -> Result<[Timeline; 2], TimelineError> {
    let world = place_world_events(pool, horizon, config.world_events, rng);
    let first = place_life_events(pool, horizon, config, rng)?;
    let second = place_life_events(pool, horizon, config, rng)?;
    Ok([
        assemble(speakers[0], horizon, first, &world),
        assemble(speakers[1], horizon, second, &world),
    ])
}

impl Timeline {
    pub fn life_entries(&self) -> impl Iterator<Item = &TimelineEntry> {
        self.entries.iter().filter(|e| e.kind == EntryKind::Life)
    }

    pub fn world_entries(&self) -> impl Iterator<Item = &TimelineEntry> {
        self.entries.iter().filter(|e| e.kind == EntryKind::World)
    }

    pub fn entry(&self, event_id: &str) -> Option<&TimelineEntry> {
        self.entries.iter().find(|e| e.event_id == event_id)
    }

    fn active_entries(&self, t: Duration) -> impl Iterator<Item = &TimelineEntry> {
        self.life_entries().filter(move |e| e.is_active_at(t))
    }

    /// Life entries running at `t`, i.e. `start <= t < start + duration`.
    pub fn events_active_at(&self, t: Duration) -> Result<Vec<ActiveEvent>, TimelineError> {
        if t > self.horizon {
            return Err(TimelineError::BeyondHorizon {
                t,
                horizon: self.horizon,
            });
        }
        Ok(self
            .active_entries(t)
            .map(|e| ActiveEvent {
                event_id: e.event_id.clone(),
                elapsed_within_event: t.saturating_sub(e.start_offset),
            })
            .collect())
    }

    /// Cards for the first session: life events running at the origin and
    /// any world event placed exactly there.
    pub fn initial_cards(&self) -> Vec<EventCard> {
        self.entries
            .iter()
            .filter(|e| match e.kind {
                EntryKind::Life => e.is_active_at(Duration::ZERO),
                EntryKind::World => e.start_offset.is_zero(),
            })
            .map(EventCard::from)
            .collect()
    }

    /// Moves the clock forward by `gap` and reports what each running event
    /// did in the meantime.
    pub fn advance(&self, clock: ClockState, gap: Duration) -> (ClockState, UpdateBundle) {
        let before = clock.elapsed;
        let now = before + gap;
        let mut bundle = UpdateBundle::default();
        let mut any_completed = false;

        for entry in self.active_entries(before) {
            let into_before = before.saturating_sub(entry.start_offset);
            let into_now = now.saturating_sub(entry.start_offset);
            if into_now >= entry.duration {
                any_completed = true;
                bundle.completed.push(CompletionNote {
                    event_id: entry.event_id.clone(),
                    description: entry.description.clone(),
                    message: format!("You have finished {}.", entry.description),
                });
                continue;
            }
            let label = compute_progress_label(entry.duration, into_now)
                .expect("timeline entries have positive durations");
            bundle.finished_progress.push(ProgressNote {
                event_id: entry.event_id.clone(),
                description: entry.description.clone(),
                label,
                message: progress_message(entry, into_before, into_now, label),
            });
            if !entry.steps.is_empty() {
                let schedule = Schedule::new(entry.steps.clone());
                if let Some(next) = split_schedule(&schedule, into_now).todo.first() {
                    bundle.future_plans.push(FuturePlan {
                        event_id: entry.event_id.clone(),
                        text: format!("Next for {}: {}.", entry.description, next),
                    });
                }
            }
        }

        for entry in &self.entries {
            let started_in_gap = before < entry.start_offset && entry.start_offset <= now;
            let visible = match entry.kind {
                EntryKind::Life => entry.is_active_at(now),
                EntryKind::World => true,
            };
            if started_in_gap && visible {
                bundle.new_events.push(EventCard::from(entry));
            }
        }

        if any_completed {
            if let Some(upcoming) = self
                .life_entries()
                .filter(|e| e.start_offset > now)
                .min_by_key(|e| e.start_offset)
            {
                bundle.future_plans.push(FuturePlan {
                    event_id: upcoming.event_id.clone(),
                    text: format!("Coming up: {}.", upcoming.description),
                });
            }
        }

        let next = ClockState {
            elapsed: now,
            session_index: clock.session_index + 1,
        };
        (next, bundle)
    }
}

/// Scheduled events report the steps completed during the gap; an event
/// whose next step boundary was not reached made no significant progress.
fn progress_message(entry: &TimelineEntry, into_before: Duration, into_now: Duration, label: ProgressLabel) -> String {
    if entry.steps.is_empty() {
        return match label {
            ProgressLabel::NoSignificantProgress => NO_SIGNIFICANT_PROGRESS.to_string(),
            other => format!("It is {other}."),
        };
    }
    let schedule = Schedule::new(entry.steps.clone());
    let done_before = split_schedule(&schedule, into_before).finished.len();
    let after = split_schedule(&schedule, into_now);
    let newly = &after.finished[done_before..];
    if newly.is_empty() {
        NO_SIGNIFICANT_PROGRESS.to_string()
    } else {
        let steps = newly.iter().map(Step::to_string).collect::<Vec<_>>().join("; ");
        format!("Finished: {steps}.")
    }
}
