//! Pools of life events (with step schedules) and world events.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::temporal::{classify_gap_bucket, Duration, GapBucket, MINUTES_PER_HOUR, MINUTES_PER_MONTH};

pub const MAX_SCHEDULE_STEPS: usize = 7;

const REFERENCE_POOL: &str = include_str!("../data/reference_pool.json");

/// Named rule broken by a pool document.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rule {
    DuplicateId,
    EmptyDescription,
    EmptySchedule,
    MaxSevenSteps,
    StepDuration,
    ScheduleRequired,
    NoScheduleForShortEvent,
    SingleSchedule,
    TwoSchedules,
    DuplicateWorldIndex,
    ZeroDuration,
}

impl Rule {
    pub fn as_str(self) -> &'static str {
        match self {
            Rule::DuplicateId => "duplicate-id",
            Rule::EmptyDescription => "empty-description",
            Rule::EmptySchedule => "empty-schedule",
            Rule::MaxSevenSteps => "max-7-steps",
            Rule::StepDuration => "step-duration",
            Rule::ScheduleRequired => "schedule-required",
            Rule::NoScheduleForShortEvent => "no-schedule-for-short-event",
            Rule::SingleSchedule => "single-schedule",
            Rule::TwoSchedules => "two-schedules",
            Rule::DuplicateWorldIndex => "duplicate-world-index",
            Rule::ZeroDuration => "zero-duration",
        }
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("pool file not found: {0}")]
    MissingFile(String),
    #[error("malformed pool document: {0}")]
    MalformedDocument(String),
    #[error("event `{id}` violates {rule}")]
    InvariantViolation { id: String, rule: Rule },
    #[error("event `{id}` has no schedule #{index}")]
    NoSuchSchedule { id: String, index: usize },
    #[error("requested {requested} events from a pool of {available}")]
    PoolExhausted { requested: usize, available: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub description: String,
    pub duration: Duration,
}

impl Step {
    pub fn new(description: impl Into<String>, duration: Duration) -> Self {
        Step {
            description: description.into(),
            duration,
        }
    }
}

impl fmt::Display for Step {
    /// `one week for learning rules`
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} for {}", self.duration, self.description)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Schedule {
    pub steps: Vec<Step>,
}

impl Schedule {
    pub fn new(steps: Vec<Step>) -> Self {
        Schedule { steps }
    }

    pub fn total(&self) -> Duration {
        self.steps.iter().map(|s| s.duration).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LifeEvent {
    pub id: String,
    pub description: String,
    #[serde(rename = "duration")]
    pub nominal_duration: Duration,
    #[serde(default)]
    pub schedules: Vec<Schedule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

impl LifeEvent {
    /// Sum of the chosen schedule's steps, or the nominal duration for events
    /// without a schedule. Progress is always measured against this value.
    pub fn effective_duration(&self, schedule_index: usize) -> Result<Duration, CatalogError> {
        if self.schedules.is_empty() && schedule_index == 0 {
            return Ok(self.nominal_duration);
        }
        self.schedules
            .get(schedule_index)
            .map(Schedule::total)
            .ok_or_else(|| CatalogError::NoSuchSchedule {
                id: self.id.clone(),
                index: schedule_index,
            })
    }

    pub fn bucket(&self) -> GapBucket {
        classify_gap_bucket(self.nominal_duration).unwrap_or(GapBucket::Minutes)
    }
}

/// Free-function form of [`LifeEvent::effective_duration`].
pub fn effective_duration(event: &LifeEvent, schedule_index: usize) -> Result<Duration, CatalogError> {
    event.effective_duration(schedule_index)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldEvent {
    pub id: String,
    pub headline: String,
    #[serde(rename = "index")]
    pub real_world_index: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

#[derive(Debug, Deserialize, Serialize)]
struct PoolDocument {
    life_events: Vec<LifeEvent>,
    #[serde(default)]
    world_events: Vec<WorldEvent>,
}

/// A validated, immutable event pool.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventPool {
    life_events: Vec<LifeEvent>,
    world_events: Vec<WorldEvent>,
    bucket_index: BTreeMap<GapBucket, Vec<String>>,
}

impl EventPool {
    pub fn new(life_events: Vec<LifeEvent>, mut world_events: Vec<WorldEvent>) -> Result<Self, CatalogError> {
        validate(&life_events, &world_events)?;
        world_events.sort_by_key(|w| w.real_world_index);
        let mut bucket_index: BTreeMap<GapBucket, Vec<String>> = BTreeMap::new();
        for event in &life_events {
            bucket_index.entry(event.bucket()).or_default().push(event.id.clone());
        }
        Ok(EventPool {
            life_events,
            world_events,
            bucket_index,
        })
    }

    pub fn from_json(text: &str) -> Result<Self, CatalogError> {
        if text.trim().is_empty() {
            return Err(CatalogError::MalformedDocument("empty document".into()));
        }
        let doc: PoolDocument =
            serde_json::from_str(text).map_err(|e| CatalogError::MalformedDocument(e.to_string()))?;
        EventPool::new(doc.life_events, doc.world_events)
    }

    /// The pool bundled with this crate.
    pub fn reference() -> Self {
        EventPool::from_json(REFERENCE_POOL).expect("bundled reference pool is valid")
    }

    pub fn to_json(&self) -> String {
        let doc = PoolDocument {
            life_events: self.life_events.clone(),
            world_events: self.world_events.clone(),
        };
        serde_json::to_string_pretty(&doc).expect("pool serializes")
    }

    pub fn life_events(&self) -> &[LifeEvent] {
        &self.life_events
    }

    /// World events in real-world order.
    pub fn world_events(&self) -> &[WorldEvent] {
        &self.world_events
    }

    pub fn bucket_index(&self) -> &BTreeMap<GapBucket, Vec<String>> {
        &self.bucket_index
    }

    pub fn bucket_counts(&self) -> BTreeMap<GapBucket, usize> {
        self.bucket_index.iter().map(|(b, ids)| (*b, ids.len())).collect()
    }

    pub fn life_event(&self, id: &str) -> Option<&LifeEvent> {
        self.life_events.iter().find(|e| e.id == id)
    }

    pub fn is_empty(&self) -> bool {
        self.life_events.is_empty()
    }
}

fn violation(id: &str, rule: Rule) -> CatalogError {
    CatalogError::InvariantViolation {
        id: id.to_string(),
        rule,
    }
}

fn validate(life_events: &[LifeEvent], world_events: &[WorldEvent]) -> Result<(), CatalogError> {
    let mut ids = HashSet::new();
    for event in life_events {
        let id = event.id.as_str();
        if !ids.insert(id) {
            return Err(violation(id, Rule::DuplicateId));
        }
        if event.description.trim().is_empty() {
            return Err(violation(id, Rule::EmptyDescription));
        }
        if event.nominal_duration.is_zero() {
            return Err(violation(id, Rule::ZeroDuration));
        }
        for schedule in &event.schedules {
            if schedule.steps.is_empty() {
                return Err(violation(id, Rule::EmptySchedule));
            }
            if schedule.steps.len() > MAX_SCHEDULE_STEPS {
                return Err(violation(id, Rule::MaxSevenSteps));
            }
            for step in &schedule.steps {
                if step.description.trim().is_empty() {
                    return Err(violation(id, Rule::EmptyDescription));
                }
                if step.duration.minutes() < 1 {
                    return Err(violation(id, Rule::StepDuration));
                }
            }
        }
        let nominal = event.nominal_duration.minutes();
        let count = event.schedules.len();
        if nominal <= MINUTES_PER_HOUR {
            if count != 0 {
                return Err(violation(id, Rule::NoScheduleForShortEvent));
            }
        } else if count == 0 {
            return Err(violation(id, Rule::ScheduleRequired));
        } else if nominal > MINUTES_PER_MONTH {
            if count != 2 {
                return Err(violation(id, Rule::TwoSchedules));
            }
        } else if count != 1 {
            return Err(violation(id, Rule::SingleSchedule));
        }
    }
    let mut indices = HashSet::new();
    for world in world_events {
        if !ids.insert(world.id.as_str()) {
            return Err(violation(&world.id, Rule::DuplicateId));
        }
        if world.headline.trim().is_empty() {
            return Err(violation(&world.id, Rule::EmptyDescription));
        }
        if !indices.insert(world.real_world_index) {
            return Err(violation(&world.id, Rule::DuplicateWorldIndex));
        }
    }
    Ok(())
}

pub fn load_event_pool(path: impl AsRef<Path>) -> Result<EventPool, CatalogError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|_| CatalogError::MissingFile(path.display().to_string()))?;
    EventPool::from_json(&text)
}

/// Distinct life events drawn uniformly without replacement.
pub fn sample_life_events<'a, R: Rng + ?Sized>(
    pool: &'a EventPool,
    count: usize,
    rng: &mut R,
) -> Result<Vec<&'a LifeEvent>, CatalogError> {
    let available = pool.life_events.len();
    if count > available {
        return Err(CatalogError::PoolExhausted {
            requested: count,
            available,
        });
    }
    Ok(rand::seq::index::sample(rng, available, count)
        .into_iter()
        .map(|i| &pool.life_events[i])
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::temporal::parse_duration;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn d(s: &str) -> Duration {
        parse_duration(s).unwrap()
    }

    fn short_event(id: &str, dur: &str) -> LifeEvent {
        LifeEvent {
            id: id.into(),
            description: format!("doing {id}"),
            nominal_duration: d(dur),
            schedules: vec![],
            source: None,
        }
    }

    #[test]
    fn reference_pool_shape() {
        let pool = EventPool::reference();
        assert_eq!(pool.life_events().len(), 50);
        let counts = pool.bucket_counts();
        for bucket in [GapBucket::Hours, GapBucket::Days, GapBucket::Weeks, GapBucket::Months, GapBucket::Year] {
            assert_eq!(counts[&bucket], 10, "{bucket}");
        }
        assert!(!counts.contains_key(&GapBucket::Minutes));
        let w = pool.world_events();
        assert!(w.windows(2).all(|p| p[0].real_world_index < p[1].real_world_index));
    }

    #[test]
    fn effective_durations() {
        let pool = EventPool::reference();
        let license = pool.life_event("getting-a-driver-license").unwrap();
        assert_eq!(effective_duration(license, 0).unwrap().minutes(), 70_560);
        let thesis = pool.life_event("writing-a-doctoral-thesis").unwrap();
        assert_eq!(thesis.effective_duration(0).unwrap().minutes(), 432_000);
        assert_eq!(thesis.nominal_duration.minutes(), 525_600);
        assert!(matches!(
            thesis.effective_duration(2),
            Err(CatalogError::NoSuchSchedule { index: 2, .. })
        ));
        let nap = short_event("nap", "30 minutes");
        assert_eq!(nap.effective_duration(0).unwrap().minutes(), 30);
        assert!(nap.effective_duration(1).is_err());
    }

    #[test]
    fn rejects_eight_steps() {
        let steps = (0..8).map(|i| Step::new(format!("step {i}"), d("one day"))).collect();
        let event = LifeEvent {
            id: "long".into(),
            description: "something long".into(),
            nominal_duration: d("8 days"),
            schedules: vec![Schedule::new(steps)],
            source: None,
        };
        match EventPool::new(vec![event], vec![]) {
            Err(CatalogError::InvariantViolation { id, rule }) => {
                assert_eq!(id, "long");
                assert_eq!(rule.as_str(), "max-7-steps");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn schedule_count_rules() {
        let one = Schedule::new(vec![Step::new("all of it", d("2 months"))]);
        let mut months = LifeEvent {
            id: "m".into(),
            description: "a long thing".into(),
            nominal_duration: d("2 months"),
            schedules: vec![one.clone()],
            source: None,
        };
        let err = EventPool::new(vec![months.clone()], vec![]).unwrap_err();
        assert!(matches!(err, CatalogError::InvariantViolation { rule: Rule::TwoSchedules, .. }));
        months.schedules.push(one.clone());
        assert!(EventPool::new(vec![months], vec![]).is_ok());

        let days = short_event("days", "3 days");
        let err = EventPool::new(vec![days], vec![]).unwrap_err();
        assert!(matches!(err, CatalogError::InvariantViolation { rule: Rule::ScheduleRequired, .. }));

        let mut hour = short_event("hour", "one hour");
        assert!(EventPool::new(vec![hour.clone()], vec![]).is_ok());
        hour.schedules.push(one);
        let err = EventPool::new(vec![hour], vec![]).unwrap_err();
        assert!(matches!(
            err,
            CatalogError::InvariantViolation { rule: Rule::NoScheduleForShortEvent, .. }
        ));
    }

    #[test]
    fn world_index_must_be_unique() {
        let w = |id: &str, i| WorldEvent {
            id: id.into(),
            headline: "news".into(),
            real_world_index: i,
            source: None,
        };
        let err = EventPool::new(vec![], vec![w("a", 1), w("b", 1)]).unwrap_err();
        assert!(matches!(
            err,
            CatalogError::InvariantViolation { rule: Rule::DuplicateWorldIndex, .. }
        ));
    }

    #[test]
    fn malformed_documents() {
        assert!(matches!(EventPool::from_json(""), Err(CatalogError::MalformedDocument(_))));
        assert!(matches!(EventPool::from_json("{"), Err(CatalogError::MalformedDocument(_))));
        let bad_duration = r#"{"life_events":[{"id":"x","description":"x","duration":"3 eons","schedules":[]}]}"#;
        assert!(matches!(
            EventPool::from_json(bad_duration),
            Err(CatalogError::MalformedDocument(_))
        ));
        assert!(matches!(
            load_event_pool("/nonexistent/pool.json"),
            Err(CatalogError::MissingFile(_))
        ));
    }

    #[test]
    fn json_round_trip() {
        let pool = EventPool::reference();
        assert_eq!(EventPool::from_json(&pool.to_json()).unwrap(), pool);
    }

    #[test]
    fn sampling() {
        let pool = EventPool::reference();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(sample_life_events(&pool, 0, &mut rng).unwrap().is_empty());

        let all = sample_life_events(&pool, 50, &mut rng).unwrap();
        let mut ids: Vec<_> = all.iter().map(|e| e.id.as_str()).collect();
        ids.sort();
        let mut expected: Vec<_> = pool.life_events().iter().map(|e| e.id.as_str()).collect();
        expected.sort();
        assert_eq!(ids, expected);

        let a = sample_life_events(&pool, 7, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_life_events(&pool, 7, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        let distinct: HashSet<_> = a.iter().map(|e| &e.id).collect();
        assert_eq!(distinct.len(), 7);

        assert!(matches!(
            sample_life_events(&pool, 51, &mut rng),
            Err(CatalogError::PoolExhausted { requested: 51, available: 50 })
        ));
    }
}
