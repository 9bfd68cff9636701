//! Room state machine. Every mutation is an event: commands validate
//! against the current state and produce a [`RoomEvent`]; [`Room::apply`]
//! is the only code that changes state, so replaying the log rebuilds the
//! room exactly.

use std::collections::{BTreeMap, BTreeSet};

use chronochat_core::catalog::EventPool;
use chronochat_core::dataset::{Conversation, SessionRecord, Speaker, Split, Utterance, MAX_SESSIONS, MIN_SESSIONS};
use chronochat_core::dialogue::selfchat::{plan_self_chat_with_gaps, SelfChatConfig, SelfChatSettings};
use chronochat_core::temporal::Duration;
use chronochat_core::timeline::{ClockState, EntryKind, EventCard, UpdateBundle};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

pub const DEFAULT_MIN_UTTERANCES: usize = 20;
pub const REFERENCE_POOL: &str = "reference";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RoomError {
    #[error("bad room configuration: {0}")]
    BadConfig(String),
    #[error("room already has two participants")]
    RoomFull,
    #[error("no such room `{0}`")]
    NoSuchRoom(String),
    #[error("not allowed while the room is {0:?}")]
    WrongPhase(Phase),
    #[error("token is not valid for this room")]
    InvalidToken,
    #[error("utterance text is empty")]
    EmptyText,
    #[error("session has {have} utterances, {need} required")]
    TooFewUtterances { have: usize, need: usize },
    #[error("next session already acknowledged")]
    AlreadyAcknowledged,
    #[error("storage failure: {0}")]
    Storage(String),
    #[error("corrupt event log: {0}")]
    CorruptLog(String),
}

impl RoomError {
    pub fn kind(&self) -> &'static str {
        match self {
            RoomError::BadConfig(_) => "BadConfig",
            RoomError::RoomFull => "RoomFull",
            RoomError::NoSuchRoom(_) => "NoSuchRoom",
            RoomError::WrongPhase(_) => "WrongPhase",
            RoomError::InvalidToken => "InvalidToken",
            RoomError::EmptyText => "EmptyText",
            RoomError::TooFewUtterances { .. } => "TooFewUtterances",
            RoomError::AlreadyAcknowledged => "AlreadyAcknowledged",
            RoomError::Storage(_) => "Storage",
            RoomError::CorruptLog(_) => "CorruptLog",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    WaitingForPartner,
    InSession,
    BetweenSessions,
    Completed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Joined,
    Utterance,
    SessionEnded,
    UpdatesShown,
    Completed,
}

/// One log record. Each `private` entry is visible only to its speaker;
/// `secret` is never sent to clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoomEvent {
    pub seq: u64,
    pub kind: EventKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speaker: Option<Speaker>,
    pub payload: Value,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub private: BTreeMap<Speaker, Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub secret: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventView {
    pub seq: u64,
    pub kind: EventKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speaker: Option<Speaker>,
    pub payload: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub private: Option<Value>,
    /// Set when the event carried data for someone else.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub redacted: bool,
}

impl RoomEvent {
    pub fn view_for(&self, viewer: Option<Speaker>) -> EventView {
        let private = viewer.and_then(|v| self.private.get(&v).cloned());
        EventView {
            seq: self.seq,
            kind: self.kind,
            speaker: self.speaker,
            redacted: self.private.len() > usize::from(private.is_some()),
            payload: self.payload.clone(),
            private,
        }
    }
}

fn default_pool() -> String {
    REFERENCE_POOL.to_string()
}

fn default_sessions() -> usize {
    MIN_SESSIONS
}

fn default_min_utterances() -> usize {
    DEFAULT_MIN_UTTERANCES
}

fn default_split() -> Split {
    Split::Train
}

/// Body of `POST /rooms`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoomSettings {
    /// `reference` or a pool file readable by the server.
    #[serde(default = "default_pool")]
    pub pool: String,
    #[serde(default = "default_sessions")]
    pub num_sessions: usize,
    #[serde(default = "default_min_utterances")]
    pub min_utterances: usize,
    pub seed: u64,
    /// Fixed gaps instead of sampled ones, one per session boundary.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gaps: Option<Vec<Duration>>,
    #[serde(default = "default_split")]
    pub split: Split,
}

impl RoomSettings {
    pub fn validate(&self) -> Result<(), RoomError> {
        if !(MIN_SESSIONS..=MAX_SESSIONS).contains(&self.num_sessions) {
            return Err(RoomError::BadConfig(format!(
                "num_sessions must be {MIN_SESSIONS} to {MAX_SESSIONS}, got {}",
                self.num_sessions
            )));
        }
        if self.min_utterances == 0 {
            return Err(RoomError::BadConfig("min_utterances must be at least 1".into()));
        }
        if let Some(gaps) = &self.gaps {
            if gaps.len() != self.num_sessions - 1 {
                return Err(RoomError::BadConfig(format!("expected {} gaps", self.num_sessions - 1)));
            }
            if gaps.iter().any(|g| g.is_zero()) {
                return Err(RoomError::BadConfig("gaps must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Participant {
    pub speaker: Speaker,
    pub display_name: String,
    pub token: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Room {
    pub room_id: String,
    pub settings: RoomSettings,
    pub plan: SelfChatConfig,
    pub phase: Phase,
    pub participants: Vec<Participant>,
    /// 1-based index of the current (or just ended) session.
    pub session_index: u32,
    pub current: Vec<Utterance>,
    pub sessions: Vec<SessionRecord>,
    pub clock: ClockState,
    pub acknowledged: BTreeSet<Speaker>,
    pub seq: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipantInfo {
    pub speaker: Speaker,
    pub display_name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingUpdates {
    pub gap: Duration,
    pub updates: UpdateBundle,
    pub card_lines: Vec<String>,
    pub acknowledged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivateView {
    pub speaker: Speaker,
    pub display_name: String,
    /// Life events running now plus world events shown this session.
    pub current_events: Vec<EventCard>,
    /// Cards shown when the current session started.
    pub session_cards: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pending_updates: Option<PendingUpdates>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoomView {
    pub room_id: String,
    pub phase: Phase,
    pub session_index: u32,
    pub num_sessions: usize,
    pub min_utterances: usize,
    pub utterances_in_session: usize,
    pub remaining_utterances: usize,
    pub end_session_available: bool,
    /// Why ending is not yet possible, e.g. "3 more messages needed".
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub end_session_hint: Option<String>,
    pub participants: Vec<ParticipantInfo>,
    pub transcript: Vec<Utterance>,
    /// Simulated time since the first session started.
    pub elapsed: Duration,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_gap: Option<Duration>,
    pub seq: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conversation_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub me: Option<PrivateView>,
}

fn corrupt(event: &RoomEvent, what: &str) -> RoomError {
    RoomError::CorruptLog(format!("event {}: {what}", event.seq))
}

impl Room {
    /// New room in `WaitingForPartner`, with timelines and gaps drawn from
    /// `settings.seed`.
    pub fn create(room_id: impl Into<String>, settings: RoomSettings, pool: &EventPool) -> Result<Room, RoomError> {
        settings.validate()?;
        let room_id = room_id.into();
        let chat = SelfChatSettings {
            conversation_id: room_id.clone(),
            split: settings.split,
            num_sessions: settings.num_sessions,
            min_utterances: settings.min_utterances,
            ..SelfChatSettings::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
        let plan = plan_self_chat_with_gaps(pool, &chat, settings.gaps.clone(), &mut rng)
            .map_err(|e| RoomError::BadConfig(e.to_string()))?;
        Ok(Room {
            room_id,
            settings,
            plan,
            phase: Phase::WaitingForPartner,
            participants: Vec::new(),
            session_index: 1,
            current: Vec::new(),
            sessions: Vec::new(),
            clock: ClockState::default(),
            acknowledged: BTreeSet::new(),
            seq: 0,
        })
    }

    pub fn speaker_for(&self, token: &str) -> Result<Speaker, RoomError> {
        self.participants
            .iter()
            .find(|p| p.token == token)
            .map(|p| p.speaker)
            .ok_or(RoomError::InvalidToken)
    }

    fn require_phase(&self, phase: Phase) -> Result<(), RoomError> {
        if self.phase == phase {
            Ok(())
        } else {
            Err(RoomError::WrongPhase(self.phase))
        }
    }

    fn event(&self, kind: EventKind, speaker: Option<Speaker>, payload: Value) -> RoomEvent {
        RoomEvent {
            seq: self.seq + 1,
            kind,
            speaker,
            payload,
            private: BTreeMap::new(),
            secret: None,
        }
    }

    pub fn end_session_available(&self) -> bool {
        self.phase == Phase::InSession && self.current.len() >= self.settings.min_utterances
    }

    pub fn end_session_hint(&self) -> Option<String> {
        if self.phase != Phase::InSession || self.end_session_available() {
            return None;
        }
        Some(match self.settings.min_utterances - self.current.len() {
            1 => "1 more message needed".to_string(),
            n => format!("{n} more messages needed"),
        })
    }

    pub fn is_final_session(&self) -> bool {
        self.session_index as usize >= self.settings.num_sessions
    }

    pub fn initial_cards(&self, speaker: Speaker) -> Vec<EventCard> {
        self.plan.initial_cards[speaker.index()].clone()
    }

    pub fn join(&self, display_name: &str, token: &str) -> Result<RoomEvent, RoomError> {
        if self.participants.len() >= 2 {
            return Err(RoomError::RoomFull);
        }
        let speaker = Speaker::BOTH[self.participants.len()];
        let name = display_name.trim();
        let name = if name.is_empty() { speaker.as_str() } else { name };
        let mut event = self.event(
            EventKind::Joined,
            Some(speaker),
            json!({ "speaker": speaker, "display_name": name }),
        );
        event.private.insert(speaker, json!({ "initial_cards": self.initial_cards(speaker) }));
        event.secret = Some(token.to_string());
        Ok(event)
    }

    pub fn utterance(&self, token: &str, text: &str) -> Result<RoomEvent, RoomError> {
        let speaker = self.speaker_for(token)?;
        self.require_phase(Phase::InSession)?;
        let text = text.trim();
        if text.is_empty() {
            return Err(RoomError::EmptyText);
        }
        Ok(self.event(
            EventKind::Utterance,
            Some(speaker),
            json!({
                "speaker": speaker,
                "text": text,
                "session_index": self.session_index,
                "count": self.current.len() + 1,
            }),
        ))
    }

    pub fn end_session(&self, token: &str) -> Result<RoomEvent, RoomError> {
        let speaker = self.speaker_for(token)?;
        self.require_phase(Phase::InSession)?;
        let need = self.settings.min_utterances;
        if self.current.len() < need {
            return Err(RoomError::TooFewUtterances {
                have: self.current.len(),
                need,
            });
        }
        let last = self.is_final_session();
        let gap = (!last).then(|| self.plan.shared_gaps[self.session_index as usize - 1]);
        let mut event = self.event(
            EventKind::SessionEnded,
            Some(speaker),
            json!({
                "session_index": self.session_index,
                "ended_by": speaker,
                "utterances": self.current.len(),
                "gap": gap,
                "final": last,
            }),
        );
        if !last {
            for s in Speaker::BOTH {
                event.private.insert(s, serde_json::to_value(self.updates_after(s)).expect("serializable"));
            }
        }
        Ok(event)
    }

    /// What `speaker` learns when the current session ends.
    pub fn updates_after(&self, speaker: Speaker) -> PendingUpdates {
        let i = self.session_index as usize - 1;
        let updates = self.plan.shared_events[i].updates[speaker.index()].clone();
        PendingUpdates {
            gap: self.plan.shared_gaps[i],
            card_lines: updates.card_lines(),
            updates,
            acknowledged: false,
        }
    }

    pub fn start_session(&self, token: &str) -> Result<RoomEvent, RoomError> {
        let speaker = self.speaker_for(token)?;
        self.require_phase(Phase::BetweenSessions)?;
        if self.acknowledged.contains(&speaker) {
            return Err(RoomError::AlreadyAcknowledged);
        }
        let both = self.acknowledged.len() + 1 == 2;
        Ok(self.event(
            EventKind::UpdatesShown,
            Some(speaker),
            json!({
                "speaker": speaker,
                "next_session": self.session_index + 1,
                "session_started": both,
            }),
        ))
    }

    pub fn completed_event(&self) -> RoomEvent {
        self.event(
            EventKind::Completed,
            None,
            json!({ "conversation_id": self.room_id, "sessions": self.sessions.len() }),
        )
    }

    /// Applies one event. Events must arrive in sequence.
    pub fn apply(&mut self, event: &RoomEvent) -> Result<(), RoomError> {
        if event.seq != self.seq + 1 {
            return Err(corrupt(event, &format!("expected seq {}", self.seq + 1)));
        }
        let speaker = event.speaker;
        match event.kind {
            EventKind::Joined => {
                let speaker = speaker.ok_or_else(|| corrupt(event, "join without speaker"))?;
                let token = event.secret.clone().ok_or_else(|| corrupt(event, "join without token"))?;
                let display_name = event.payload["display_name"].as_str().unwrap_or_default().to_string();
                self.participants.push(Participant {
                    speaker,
                    display_name,
                    token,
                });
                if self.participants.len() == 2 {
                    self.phase = Phase::InSession;
                }
            }
            EventKind::Utterance => {
                let speaker = speaker.ok_or_else(|| corrupt(event, "utterance without speaker"))?;
                let text = event.payload["text"].as_str().ok_or_else(|| corrupt(event, "utterance without text"))?;
                self.current.push(Utterance::new(speaker, text));
            }
            EventKind::SessionEnded => {
                let index = self.session_index as usize;
                self.sessions.push(SessionRecord {
                    index: self.session_index,
                    gap_before: (index > 1).then(|| self.plan.shared_gaps[index - 2]),
                    events_shown: Speaker::BOTH.into_iter().map(|s| (s, self.plan.cards_at(index, s))).collect(),
                    utterances: std::mem::take(&mut self.current),
                });
                if index >= self.settings.num_sessions {
                    self.phase = Phase::Completed;
                } else {
                    self.phase = Phase::BetweenSessions;
                    self.clock = self.plan.clock_at(index + 1);
                    self.acknowledged.clear();
                }
            }
            EventKind::UpdatesShown => {
                let speaker = speaker.ok_or_else(|| corrupt(event, "acknowledgement without speaker"))?;
                self.acknowledged.insert(speaker);
                if self.acknowledged.len() == 2 {
                    self.acknowledged.clear();
                    self.session_index += 1;
                    self.phase = Phase::InSession;
                }
            }
            EventKind::Completed => {}
        }
        self.seq = event.seq;
        Ok(())
    }

    /// The finished conversation in dataset form.
    pub fn conversation(&self) -> Conversation {
        Conversation {
            id: self.room_id.clone(),
            split: self.settings.split,
            sessions: self.sessions.clone(),
        }
    }

    fn pending_updates(&self, speaker: Speaker) -> Option<PendingUpdates> {
        if self.phase != Phase::BetweenSessions {
            return None;
        }
        Some(PendingUpdates {
            acknowledged: self.acknowledged.contains(&speaker),
            ..self.updates_after(speaker)
        })
    }

    fn current_events(&self, speaker: Speaker) -> Vec<EventCard> {
        let timeline = &self.plan.timelines[speaker.index()];
        let shown: Vec<EventCard> = if self.session_index == 1 {
            self.plan.initial_cards[speaker.index()].clone()
        } else {
            self.plan.shared_events[self.session_index as usize - 2].updates[speaker.index()]
                .new_events
                .clone()
        };
        let mut cards: Vec<EventCard> = timeline
            .life_entries()
            .filter(|e| e.is_active_at(self.clock.elapsed))
            .map(EventCard::from)
            .collect();
        cards.extend(shown.into_iter().filter(|c| c.kind == EntryKind::World));
        cards
    }

    /// State as seen by `viewer`; `None` gives the public view.
    pub fn view(&self, viewer: Option<Speaker>) -> RoomView {
        let me = viewer.and_then(|s| self.participants.iter().find(|p| p.speaker == s)).map(|p| PrivateView {
            speaker: p.speaker,
            display_name: p.display_name.clone(),
            current_events: self.current_events(p.speaker),
            session_cards: self.plan.cards_at(self.session_index as usize, p.speaker),
            pending_updates: self.pending_updates(p.speaker),
        });
        let last_gap = match self.phase {
            Phase::BetweenSessions => Some(self.plan.shared_gaps[self.session_index as usize - 1]),
            _ if self.session_index > 1 => Some(self.plan.shared_gaps[self.session_index as usize - 2]),
            _ => None,
        };
        RoomView {
            room_id: self.room_id.clone(),
            phase: self.phase,
            session_index: self.session_index,
            num_sessions: self.settings.num_sessions,
            min_utterances: self.settings.min_utterances,
            utterances_in_session: self.current.len(),
            remaining_utterances: self.settings.min_utterances.saturating_sub(self.current.len()),
            end_session_available: self.end_session_available(),
            end_session_hint: self.end_session_hint(),
            participants: self
                .participants
                .iter()
                .map(|p| ParticipantInfo {
                    speaker: p.speaker,
                    display_name: p.display_name.clone(),
                })
                .collect(),
            transcript: self.current.clone(),
            elapsed: self.clock.elapsed,
            last_gap,
            seq: self.seq,
            conversation_id: (self.phase == Phase::Completed).then(|| self.room_id.clone()),
            me,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn settings(seed: u64) -> RoomSettings {
        RoomSettings {
            pool: default_pool(),
            num_sessions: 3,
            min_utterances: 2,
            seed,
            gaps: None,
            split: Split::Train,
        }
    }

    fn room(seed: u64) -> Room {
        Room::create("r", settings(seed), &EventPool::reference()).unwrap()
    }

    fn step(room: &mut Room, command: impl FnOnce(&Room) -> Result<RoomEvent, RoomError>) -> RoomEvent {
        let event = command(room).unwrap();
        room.apply(&event).unwrap();
        event
    }

    #[test]
    fn lifecycle() {
        let mut r = room(1);
        step(&mut r, |r| r.join("ann", "ta"));
        assert_eq!(r.phase, Phase::WaitingForPartner);
        assert_eq!(r.utterance("ta", "hi"), Err(RoomError::WrongPhase(Phase::WaitingForPartner)));
        step(&mut r, |r| r.join("bo", "tb"));
        assert_eq!(r.phase, Phase::InSession);
        assert_eq!(r.join("cy", "tc"), Err(RoomError::RoomFull));
        assert_eq!(r.utterance("nope", "hi"), Err(RoomError::InvalidToken));
        assert_eq!(r.utterance("ta", "  "), Err(RoomError::EmptyText));
        step(&mut r, |r| r.utterance("ta", "hi"));
        assert_eq!(r.end_session("tb"), Err(RoomError::TooFewUtterances { have: 1, need: 2 }));
        step(&mut r, |r| r.utterance("ta", "again"));
        assert!(r.end_session_available());
        step(&mut r, |r| r.end_session("tb"));
        assert_eq!(r.phase, Phase::BetweenSessions);
        assert_eq!(r.utterance("ta", "hi"), Err(RoomError::WrongPhase(Phase::BetweenSessions)));
        assert_eq!(r.clock.elapsed, r.plan.shared_gaps[0]);
        step(&mut r, |r| r.start_session("ta"));
        assert_eq!(r.start_session("ta"), Err(RoomError::AlreadyAcknowledged));
        assert_eq!(r.phase, Phase::BetweenSessions);
        step(&mut r, |r| r.start_session("tb"));
        assert_eq!((r.phase, r.session_index), (Phase::InSession, 2));
        for s in 2..=3 {
            step(&mut r, |r| r.utterance("ta", "x"));
            step(&mut r, |r| r.utterance("tb", "y"));
            step(&mut r, |r| r.end_session("ta"));
            if s < 3 {
                step(&mut r, |r| r.start_session("ta"));
                step(&mut r, |r| r.start_session("tb"));
            }
        }
        assert_eq!(r.phase, Phase::Completed);
        let conv = r.conversation();
        conv.validate().unwrap();
        assert_eq!(conv.sessions[1].gap_before, Some(r.plan.shared_gaps[0]));
    }

    #[test]
    fn bad_configs() {
        let pool = EventPool::reference();
        let mut s = settings(1);
        s.num_sessions = 6;
        assert!(matches!(Room::create("r", s, &pool), Err(RoomError::BadConfig(_))));
        let mut s = settings(1);
        s.gaps = Some(vec!["one week".parse().unwrap()]);
        assert!(matches!(Room::create("r", s, &pool), Err(RoomError::BadConfig(_))));
        let mut s = settings(1);
        s.min_utterances = 0;
        assert!(matches!(Room::create("r", s, &pool), Err(RoomError::BadConfig(_))));
    }

    #[test]
    fn same_seed_same_initial_events() {
        let (a, b) = (room(9), room(9));
        assert_eq!(a.initial_cards(Speaker::A), b.initial_cards(Speaker::A));
        assert_eq!(a.plan, b.plan);
    }

    #[test]
    fn private_payloads_are_redacted() {
        let mut r = room(2);
        let joined = step(&mut r, |r| r.join("ann", "ta"));
        let own = joined.view_for(Some(Speaker::A));
        assert!(own.private.is_some() && !own.redacted);
        let other = joined.view_for(Some(Speaker::B));
        assert!(other.private.is_none() && other.redacted);
        assert!(!serde_json::to_string(&own).unwrap().contains("ta\""));
        let view = r.view(Some(Speaker::B));
        assert!(view.me.is_none());
    }

    #[test]
    fn replay_rebuilds_state() {
        let mut live = room(3);
        let mut log = Vec::new();
        log.push(step(&mut live, |r| r.join("a", "ta")));
        log.push(step(&mut live, |r| r.join("b", "tb")));
        for i in 0..3 {
            log.push(step(&mut live, |r| r.utterance(if i % 2 == 0 { "ta" } else { "tb" }, "hello")));
        }
        log.push(step(&mut live, |r| r.end_session("ta")));
        log.push(step(&mut live, |r| r.start_session("tb")));
        let mut replayed = room(3);
        for e in &log {
            replayed.apply(e).unwrap();
        }
        assert_eq!(replayed, live);
        let mut gap = room(3);
        assert!(matches!(gap.apply(&log[1]), Err(RoomError::CorruptLog(_))));
    }
}
