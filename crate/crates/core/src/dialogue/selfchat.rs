//! Multi-session self-chat between two backends under a shared stream of
//! session gaps and timeline events.
//!
//! Planning and running are separate: [`plan_self_chat`] draws every random
//! quantity up front, so configurations that differ only in
//! [`ContextMode`] share identical gaps and events.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::context::{
    build_context, ContextError, ContextInput, ContextMode, SpeakerEvents, SpeakerProgress, SpeakerSchedule,
    DEFAULT_CHAR_BUDGET,
};
use super::memory::{SessionMemory, DEFAULT_TOP_K};
use crate::catalog::{EventPool, Schedule};
use crate::dataset::{Conversation, SessionRecord, Speaker, Split, Utterance, MAX_SESSIONS, MIN_SESSIONS};
use crate::llm::{bindings, ChatBackend, CompletionRequest, LlmError};
use crate::progress::{compute_progress_label, render_progress_line, render_schedule_line, split_schedule, ProgressLabel};
use crate::temporal::{sample_session_gap, Duration, MINUTES_PER_YEAR};
use crate::timeline::{
    generate_pair_timelines, ClockState, EntryKind, EventCard, Timeline, TimelineConfig, TimelineError, UpdateBundle,
};

pub const DEFAULT_MIN_UTTERANCES: usize = 20;

/// Closing exchange appended once a session reaches its minimum length.
pub const FAREWELL: [&str; 2] = [
    "I need to head off now, it was great catching up with you!",
    "Same here, talk to you soon and take care!",
];

pub fn default_opening_script() -> Vec<Utterance> {
    vec![
        Utterance::new(Speaker::A, "Hi! How are you doing?"),
        Utterance::new(Speaker::B, "I am doing well, thanks for asking. How about you?"),
        Utterance::new(Speaker::A, "Pretty good! I have a few things going on lately."),
    ]
}

#[derive(Debug, Error)]
pub enum SelfChatFailure {
    #[error("invalid self-chat configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Timeline(#[from] TimelineError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Context(#[from] ContextError),
    #[error("backend returned an empty utterance")]
    EmptyReply,
    #[error("generated session has {got} utterances, at least {needed} required")]
    TooFewUtterances { got: usize, needed: usize },
}

/// A failed run keeps every session completed before the failure and the
/// utterances of the one in progress.
#[derive(Debug, Error)]
#[error("self-chat aborted in session {session}: {source}")]
pub struct SelfChatError {
    pub session: u32,
    pub partial: Vec<SessionRecord>,
    #[source]
    pub source: SelfChatFailure,
}

impl SelfChatError {
    fn setup(source: SelfChatFailure) -> Self {
        SelfChatError {
            session: 0,
            partial: Vec::new(),
            source,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfChatSettings {
    pub conversation_id: String,
    pub split: Split,
    pub num_sessions: usize,
    pub min_utterances: usize,
    pub mode: ContextMode,
    pub opening_script: Vec<Utterance>,
    pub char_budget: usize,
    pub top_k: usize,
    pub timeline: TimelineConfig,
}

impl Default for SelfChatSettings {
    fn default() -> Self {
        SelfChatSettings {
            conversation_id: "selfchat".to_string(),
            split: Split::Test,
            num_sessions: 3,
            min_utterances: DEFAULT_MIN_UTTERANCES,
            mode: ContextMode::Both,
            opening_script: default_opening_script(),
            char_budget: DEFAULT_CHAR_BUDGET,
            top_k: DEFAULT_TOP_K,
            timeline: TimelineConfig::default(),
        }
    }
}

/// What each speaker learns when the clock moves across one gap.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GapEvents {
    pub clock: ClockState,
    pub updates: [UpdateBundle; 2],
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelfChatConfig {
    pub conversation_id: String,
    pub split: Split,
    pub num_sessions: usize,
    pub min_utterances_per_session: usize,
    pub opening_script: Vec<Utterance>,
    pub mode: ContextMode,
    pub char_budget: usize,
    pub top_k: usize,
    pub timelines: [Timeline; 2],
    pub initial_cards: [Vec<EventCard>; 2],
    /// One entry per gap, i.e. `num_sessions - 1`.
    pub shared_gaps: Vec<Duration>,
    pub shared_events: Vec<GapEvents>,
}

impl SelfChatConfig {
    pub fn validate(&self) -> Result<(), SelfChatFailure> {
        let n = self.num_sessions;
        if !(MIN_SESSIONS..=MAX_SESSIONS).contains(&n) {
            return Err(SelfChatFailure::Config(format!(
                "num_sessions must be {MIN_SESSIONS} to {MAX_SESSIONS}, got {n}"
            )));
        }
        if self.min_utterances_per_session == 0 {
            return Err(SelfChatFailure::Config("min_utterances must be at least 1".into()));
        }
        if self.shared_gaps.len() != n - 1 || self.shared_events.len() != n - 1 {
            return Err(SelfChatFailure::Config(format!("expected {} gaps and event updates", n - 1)));
        }
        if self.shared_gaps.iter().any(|g| g.is_zero()) {
            return Err(SelfChatFailure::Config("session gaps must be positive".into()));
        }
        if self.top_k == 0 {
            return Err(SelfChatFailure::Config("top_k must be at least 1".into()));
        }
        Ok(())
    }

    /// Same gaps and events under a different time representation.
    pub fn with_mode(&self, mode: ContextMode) -> SelfChatConfig {
        SelfChatConfig {
            mode,
            ..self.clone()
        }
    }

    pub fn clock_at(&self, session: usize) -> ClockState {
        if session == 1 {
            ClockState::default()
        } else {
            self.shared_events[session - 2].clock
        }
    }

    /// Card lines shown to `speaker` at the start of `session`.
    pub fn cards_at(&self, session: usize, speaker: Speaker) -> Vec<String> {
        if session == 1 {
            self.initial_cards[speaker.index()].iter().map(|c| c.text.clone()).collect()
        } else {
            self.shared_events[session - 2].updates[speaker.index()].card_lines()
        }
    }
}

/// Draws gaps and timelines for one conversation. Randomness consumed here
/// does not depend on `settings.mode`.
pub fn plan_self_chat<R: Rng + ?Sized>(
    pool: &EventPool,
    settings: &SelfChatSettings,
    rng: &mut R,
) -> Result<SelfChatConfig, SelfChatFailure> {
    plan_self_chat_with_gaps(pool, settings, None, rng)
}

/// Like [`plan_self_chat`], with the session gaps fixed by the caller when
/// `gaps` is given.
pub fn plan_self_chat_with_gaps<R: Rng + ?Sized>(
    pool: &EventPool,
    settings: &SelfChatSettings,
    gaps: Option<Vec<Duration>>,
    rng: &mut R,
) -> Result<SelfChatConfig, SelfChatFailure> {
    let n = settings.num_sessions;
    if !(MIN_SESSIONS..=MAX_SESSIONS).contains(&n) {
        return Err(SelfChatFailure::Config(format!(
            "num_sessions must be {MIN_SESSIONS} to {MAX_SESSIONS}, got {n}"
        )));
    }
    let gaps: Vec<Duration> = match gaps {
        Some(gaps) if gaps.len() != n - 1 => {
            return Err(SelfChatFailure::Config(format!("expected {} gaps, got {}", n - 1, gaps.len())))
        }
        Some(gaps) => gaps,
        None => (1..n).map(|_| sample_session_gap(rng)).collect(),
    };
    let total: Duration = gaps.iter().copied().sum();
    let horizon = total.max(Duration::from_minutes(MINUTES_PER_YEAR));
    let timelines = generate_pair_timelines(pool, ["A", "B"], horizon, &settings.timeline, rng)?;

    let mut clock = ClockState::default();
    let mut shared_events = Vec::with_capacity(gaps.len());
    for &gap in &gaps {
        let (next, a) = timelines[0].advance(clock, gap);
        let (_, b) = timelines[1].advance(clock, gap);
        clock = next;
        shared_events.push(GapEvents {
            clock,
            updates: [a, b],
        });
    }
    let config = SelfChatConfig {
        conversation_id: settings.conversation_id.clone(),
        split: settings.split,
        num_sessions: n,
        min_utterances_per_session: settings.min_utterances,
        opening_script: settings.opening_script.clone(),
        mode: settings.mode,
        char_budget: settings.char_budget,
        top_k: settings.top_k,
        initial_cards: [timelines[0].initial_cards(), timelines[1].initial_cards()],
        timelines,
        shared_gaps: gaps,
        shared_events,
    };
    config.validate()?;
    Ok(config)
}

/// Time-aware sections for one speaker at one session.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct SpeakerView {
    events: Vec<String>,
    progress: Vec<(String, ProgressLabel)>,
    schedule: Vec<(String, crate::progress::ScheduleSplit)>,
}

fn speaker_view(config: &SelfChatConfig, session: usize, speaker: Speaker) -> SpeakerView {
    let timeline = &config.timelines[speaker.index()];
    let clock = config.clock_at(session);
    let now = clock.elapsed;
    let (completed, world_ids): (BTreeSet<&str>, BTreeSet<&str>) = if session == 1 {
        (
            BTreeSet::new(),
            config.initial_cards[speaker.index()]
                .iter()
                .filter(|c| c.kind == EntryKind::World)
                .map(|c| c.event_id.as_str())
                .collect(),
        )
    } else {
        let bundle = &config.shared_events[session - 2].updates[speaker.index()];
        (
            bundle.completed.iter().map(|c| c.event_id.as_str()).collect(),
            bundle
                .new_events
                .iter()
                .filter(|c| c.kind == EntryKind::World)
                .map(|c| c.event_id.as_str())
                .collect(),
        )
    };
    let mut view = SpeakerView::default();
    for entry in &timeline.entries {
        match entry.kind {
            EntryKind::World => {
                if world_ids.contains(entry.event_id.as_str()) {
                    view.events.push(entry.description.clone());
                }
            }
            EntryKind::Life => {
                let within = if entry.is_active_at(now) {
                    now.saturating_sub(entry.start_offset)
                } else if completed.contains(entry.event_id.as_str()) {
                    entry.duration
                } else {
                    continue;
                };
                view.events.push(entry.description.clone());
                if session > 1 {
                    let label = compute_progress_label(entry.duration, within).expect("positive durations");
                    view.progress.push((entry.description.clone(), label));
                    if !entry.steps.is_empty() {
                        let split = split_schedule(&Schedule::new(entry.steps.clone()), within);
                        view.schedule.push((entry.description.clone(), split));
                    }
                }
            }
        }
    }
    view
}

fn clean_reply(reply: &str, speaker: Speaker) -> Option<String> {
    let line = reply.lines().map(str::trim).find(|l| !l.is_empty())?;
    let mut text = line;
    for prefix in [format!("Speaker {speaker}:"), format!("{speaker}:")] {
        if let Some(rest) = text.strip_prefix(prefix.as_str()) {
            text = rest.trim_start();
        }
    }
    let text = text.trim();
    (!text.is_empty()).then(|| text.to_string())
}

struct Run<'a> {
    config: &'a SelfChatConfig,
    backends: [&'a dyn ChatBackend; 2],
    memories: [SessionMemory; 2],
}

impl Run<'_> {
    fn context_for(&self, session: usize, speaker: Speaker, utterances: &[Utterance]) -> Result<String, SelfChatFailure> {
        let view = speaker_view(self.config, session, speaker);
        let history: Vec<String> = utterances.iter().map(Utterance::line).collect();
        let memory = &self.memories[speaker.index()];
        let retrieved = if memory.is_empty() {
            Vec::new()
        } else {
            let query = if history.is_empty() { view.events.join(" ") } else { history.join("\n") };
            let mut docs: Vec<_> = memory.retrieve_top_k(&query, self.config.top_k).map_err(|e| SelfChatFailure::Config(e.to_string()))?;
            docs.sort_by_key(|r| (r.document.session_index, r.document.id));
            docs.into_iter().map(|r| r.document.text.clone()).collect()
        };
        let gap = (session > 1).then(|| self.config.shared_gaps[session - 2]);
        let mode = self
            .config
            .mode
            .restrict(!view.progress.is_empty(), !view.schedule.is_empty(), gap.is_some());
        let name = speaker.as_str().to_string();
        let input = ContextInput {
            retrieved,
            history,
            events: vec![SpeakerEvents {
                speaker: name.clone(),
                events: view.events,
            }],
            progress: if mode.wants_progress() {
                vec![SpeakerProgress {
                    speaker: name.clone(),
                    items: view.progress,
                }]
            } else {
                Vec::new()
            },
            schedule: if mode.wants_schedule() {
                vec![SpeakerSchedule {
                    speaker: name,
                    items: view.schedule,
                }]
            } else {
                Vec::new()
            },
            gap: gap.filter(|_| mode.wants_gap()),
        };
        Ok(build_context(&input, mode, self.config.char_budget)?.render())
    }

    fn turn(&self, session: usize, speaker: Speaker, utterances: &[Utterance]) -> Result<String, SelfChatFailure> {
        let context = self.context_for(session, speaker, utterances)?;
        let request = CompletionRequest::from_template(
            "self_chat_turn",
            &bindings([("context", context), ("speaker", speaker.as_str().to_string())]),
        )?;
        let reply = self.backends[speaker.index()].complete(&request)?;
        clean_reply(&reply, speaker).ok_or(SelfChatFailure::EmptyReply)
    }

    fn session(&self, session: usize, utterances: &mut Vec<Utterance>) -> Result<(), SelfChatFailure> {
        let min = self.config.min_utterances_per_session;
        let mut next = utterances.last().map_or(Speaker::A, |u| u.speaker.other());
        while utterances.len() < min {
            let text = self.turn(session, next, utterances)?;
            utterances.push(Utterance::new(next, text));
            next = next.other();
        }
        utterances.push(Utterance::new(next, FAREWELL[0]));
        utterances.push(Utterance::new(next.other(), FAREWELL[1]));
        Ok(())
    }
}

fn session_record(config: &SelfChatConfig, session: usize, utterances: Vec<Utterance>) -> SessionRecord {
    SessionRecord {
        index: session as u32,
        gap_before: (session > 1).then(|| config.shared_gaps[session - 2]),
        events_shown: Speaker::BOTH
            .into_iter()
            .map(|s| (s, config.cards_at(session, s)))
            .collect::<BTreeMap<_, _>>(),
        utterances,
    }
}

/// Runs every session turn by turn; `backend_a` speaks for A and
/// `backend_b` for B. Each speaker's context holds only its own events.
pub fn run_self_chat(
    config: &SelfChatConfig,
    backend_a: &dyn ChatBackend,
    backend_b: &dyn ChatBackend,
) -> Result<Conversation, SelfChatError> {
    config.validate().map_err(SelfChatError::setup)?;
    let mut run = Run {
        config,
        backends: [backend_a, backend_b],
        memories: [SessionMemory::new(), SessionMemory::new()],
    };
    let mut sessions = Vec::with_capacity(config.num_sessions);
    for session in 1..=config.num_sessions {
        let mut utterances = if session == 1 { config.opening_script.clone() } else { Vec::new() };
        if let Err(source) = run.session(session, &mut utterances) {
            if !utterances.is_empty() {
                sessions.push(session_record(config, session, utterances));
            }
            return Err(SelfChatError {
                session: session as u32,
                partial: sessions,
                source,
            });
        }
        let record = session_record(config, session, utterances);
        let transcript = record.transcript();
        for memory in &mut run.memories {
            memory
                .store_session_document(&transcript, session as u32)
                .expect("sessions are never empty");
        }
        sessions.push(record);
    }
    Ok(Conversation {
        id: config.conversation_id.clone(),
        split: config.split,
        sessions,
    })
}

fn whole_session_template(session: usize, mode: ContextMode) -> &'static str {
    if session == 1 {
        return "chatgpt_first_session";
    }
    match mode {
        ContextMode::None => "chatgpt_subsequent_session",
        ContextMode::GapOnly => "chatgpt_subsequent_session_gap",
        ContextMode::Progress => "chatgpt_subsequent_session_progress",
        ContextMode::Schedule => "chatgpt_subsequent_session_schedule",
        ContextMode::Both => "chatgpt_subsequent_session_both",
    }
}

/// Parses `A: ...` / `B: ...` lines; anything else is ignored.
pub fn parse_session_reply(reply: &str) -> Vec<Utterance> {
    reply
        .lines()
        .filter_map(|line| {
            let line = line.trim();
            let line = line.strip_prefix("Speaker ").unwrap_or(line);
            let (speaker, text) = line.split_once(':')?;
            let speaker = match speaker.trim() {
                "A" => Speaker::A,
                "B" => Speaker::B,
                _ => return None,
            };
            let text = text.trim();
            (!text.is_empty()).then(|| Utterance::new(speaker, text))
        })
        .collect()
}

/// Generates each session in a single request to one backend that sees
/// both speakers' events.
pub fn run_whole_session_chat(config: &SelfChatConfig, backend: &dyn ChatBackend) -> Result<Conversation, SelfChatError> {
    config.validate().map_err(SelfChatError::setup)?;
    let mut sessions: Vec<SessionRecord> = Vec::with_capacity(config.num_sessions);
    for session in 1..=config.num_sessions {
        let fail = |sessions: Vec<SessionRecord>, source: SelfChatFailure| SelfChatError {
            session: session as u32,
            partial: sessions,
            source,
        };
        let views = Speaker::BOTH.map(|s| speaker_view(config, session, s));
        let gap = (session > 1).then(|| config.shared_gaps[session - 2]);
        let mode = config.mode.restrict(
            views.iter().any(|v| !v.progress.is_empty()),
            views.iter().any(|v| !v.schedule.is_empty()),
            gap.is_some(),
        );
        let mut slots = BTreeMap::new();
        slots.insert("min_utterances".to_string(), config.min_utterances_per_session.to_string());
        for (speaker, view) in Speaker::BOTH.iter().zip(&views) {
            let events = if view.events.is_empty() { "nothing in particular".to_string() } else { view.events.join(", ") };
            slots.insert(format!("events_{}", speaker.as_str().to_lowercase()), events);
        }
        if session > 1 {
            let history = sessions.iter().map(SessionRecord::transcript).collect::<Vec<_>>().join("\n");
            slots.insert("history".into(), history);
            slots.insert("gap".into(), gap.map(|g| g.to_string()).unwrap_or_default());
            let progress = Speaker::BOTH
                .iter()
                .zip(&views)
                .filter_map(|(s, v)| render_progress_line(s.as_str(), &v.progress).ok())
                .collect::<Vec<_>>()
                .join("\n");
            let schedule = Speaker::BOTH
                .iter()
                .zip(&views)
                .filter_map(|(s, v)| render_schedule_line(s.as_str(), &v.schedule).ok())
                .collect::<Vec<_>>()
                .join("\n");
            slots.insert("progress".into(), progress);
            slots.insert("schedule".into(), schedule);
        }
        let request = CompletionRequest::from_template(whole_session_template(session, mode), &slots)
            .map_err(|e| fail(sessions.clone(), e.into()))?;
        let reply = backend.complete(&request).map_err(|e| fail(sessions.clone(), e.into()))?;
        let utterances = parse_session_reply(&reply);
        if utterances.len() < config.min_utterances_per_session {
            let got = utterances.len();
            if got > 0 {
                sessions.push(session_record(config, session, utterances));
            }
            return Err(fail(
                sessions,
                SelfChatFailure::TooFewUtterances {
                    got,
                    needed: config.min_utterances_per_session,
                },
            ));
        }
        sessions.push(session_record(config, session, utterances));
    }
    Ok(Conversation {
        id: config.conversation_id.clone(),
        split: config.split,
        sessions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::export_conversation;
    use crate::llm::MockBackend;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn plan(seed: u64, mode: ContextMode, sessions: usize) -> SelfChatConfig {
        let settings = SelfChatSettings {
            num_sessions: sessions,
            mode,
            ..SelfChatSettings::default()
        };
        plan_self_chat(&EventPool::reference(), &settings, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn plan_has_one_gap_per_boundary() {
        let config = plan(7, ContextMode::Both, 3);
        assert_eq!(config.shared_gaps.len(), 2);
        assert_eq!(config.shared_events.len(), 2);
        assert_eq!(config.shared_events[1].clock.session_index, 3);
        assert_eq!(
            config.shared_events[1].clock.elapsed,
            config.shared_gaps[0] + config.shared_gaps[1]
        );
    }

    #[test]
    fn modes_share_gaps_and_events() {
        let base = plan(7, ContextMode::None, 4);
        for mode in ContextMode::ALL {
            let other = plan(7, mode, 4);
            assert_eq!(other.shared_gaps, base.shared_gaps);
            assert_eq!(other.shared_events, base.shared_events);
            assert_eq!(other.timelines, base.timelines);
            assert_eq!(base.with_mode(mode), other);
        }
    }

    #[test]
    fn mock_run_is_deterministic_and_long_enough() {
        let mock = MockBackend::bundled();
        let config = plan(7, ContextMode::Both, 3);
        let first = run_self_chat(&config, &mock, &mock).unwrap();
        let second = run_self_chat(&config, &mock, &mock).unwrap();
        assert_eq!(export_conversation(&first).unwrap(), export_conversation(&second).unwrap());
        assert_eq!(first.sessions.len(), 3);
        for s in &first.sessions {
            assert!(s.utterances.len() >= DEFAULT_MIN_UTTERANCES);
            assert_eq!(s.utterances[s.utterances.len() - 2].text, FAREWELL[0]);
        }
        assert_eq!(first.sessions[0].utterances[..3], config.opening_script[..]);
        assert!(first.sessions[0].gap_before.is_none());
        assert_eq!(first.sessions[1].gap_before, Some(config.shared_gaps[0]));
    }

    #[test]
    fn contexts_follow_mode() {
        let mock = MockBackend::bundled();
        let config = plan(3, ContextMode::Both, 3);
        let run = Run {
            config: &config,
            backends: [&mock, &mock],
            memories: [SessionMemory::new(), SessionMemory::new()],
        };
        let first = run.context_for(1, Speaker::A, &[]).unwrap();
        assert!(!first.contains("\nGap\n") && !first.starts_with("Gap"));
        let second = run.context_for(2, Speaker::A, &[]).unwrap();
        assert!(second.ends_with(&format!("Gap\n{}", config.shared_gaps[0])));
        assert!(second.contains("Progress\nA: "));
        assert!(!second.contains("\nB: "), "context must stay private: {second}");
        let none = config.with_mode(ContextMode::None);
        let run = Run { config: &none, ..run };
        assert!(!run.context_for(2, Speaker::A, &[]).unwrap().contains("Gap"));
    }

    #[test]
    fn backend_failure_keeps_partial_transcript() {
        let mut mock = MockBackend::default();
        mock.insert_pool("self_chat_turn", vec!["B: sure".into()]);
        let config = plan(5, ContextMode::Progress, 3);
        run_self_chat(&config, &mock, &mock).unwrap();
        let empty = MockBackend::default();
        let err = run_self_chat(&config, &mock, &empty).unwrap_err();
        assert_eq!(err.session, 1);
        assert_eq!(err.partial.len(), 1);
        assert_eq!(err.partial[0].utterances.len(), 3);
        assert!(matches!(err.source, SelfChatFailure::Llm(LlmError::MissingFixture(_))));
    }

    #[test]
    fn empty_replies_are_rejected() {
        let mut mock = MockBackend::default();
        mock.insert_pool("self_chat_turn", vec!["A:   ".into()]);
        let err = run_self_chat(&plan(5, ContextMode::None, 3), &mock, &mock).unwrap_err();
        assert!(matches!(err.source, SelfChatFailure::EmptyReply));
    }

    #[test]
    fn invalid_configs() {
        let mut config = plan(1, ContextMode::Both, 3);
        config.shared_gaps.pop();
        assert!(matches!(config.validate(), Err(SelfChatFailure::Config(_))));
        let settings = SelfChatSettings {
            num_sessions: 6,
            ..SelfChatSettings::default()
        };
        assert!(plan_self_chat(&EventPool::reference(), &settings, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    }

    #[test]
    fn whole_session_generation() {
        let session: String = (0..22).map(|i| format!("{}: line {i}\n", if i % 2 == 0 { "A" } else { "B" })).collect();
        let mut mock = MockBackend::default();
        for template in [
            "chatgpt_first_session",
            "chatgpt_subsequent_session",
            "chatgpt_subsequent_session_gap",
            "chatgpt_subsequent_session_progress",
            "chatgpt_subsequent_session_schedule",
            "chatgpt_subsequent_session_both",
        ] {
            mock.insert_pool(template, vec![session.clone()]);
        }
        let config = plan(9, ContextMode::Both, 4);
        let conv = run_whole_session_chat(&config, &mock).unwrap();
        assert_eq!(conv.sessions.len(), 4);
        assert!(conv.sessions.iter().all(|s| s.utterances.len() == 22));
        conv.validate().unwrap();

        let mut short = MockBackend::default();
        short.insert_pool("chatgpt_first_session", vec!["A: hi\nB: hello".into()]);
        let err = run_whole_session_chat(&config, &short).unwrap_err();
        assert!(matches!(err.source, SelfChatFailure::TooFewUtterances { got: 2, .. }));
    }

    #[test]
    fn session_reply_parser() {
        let got = parse_session_reply("Sure! Here it is:\nA: Hi there\nSpeaker B: Hello\nC: nope\nB:\n");
        assert_eq!(got, vec![Utterance::new(Speaker::A, "Hi there"), Utterance::new(Speaker::B, "Hello")]);
    }
}
