//! Canonical conversation records (`.chrono.jsonl`), corpus statistics and
//! a best-effort importer for externally published multi-session corpora.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::ops::Add;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::temporal::{parse_duration, Duration, TimeUnit};

pub const FILE_EXTENSION: &str = ".chrono.jsonl";
pub const MIN_SESSIONS: usize = 3;
pub const MAX_SESSIONS: usize = 5;
pub const SPLIT_RATIOS: [(Split, f64); 3] = [(Split::Train, 0.7), (Split::Valid, 0.1), (Split::Test, 0.2)];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("conversation `{id}`: {reason}")]
    InvariantViolation { id: String, reason: String },
    #[error("file not found: {0}")]
    MissingFile(PathBuf),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("i/o error on {path}: {message}")]
    Io { path: PathBuf, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Speaker {
    A,
    B,
}

impl Speaker {
    pub const BOTH: [Speaker; 2] = [Speaker::A, Speaker::B];

    pub fn as_str(self) -> &'static str {
        match self {
            Speaker::A => "A",
            Speaker::B => "B",
        }
    }

    pub fn other(self) -> Speaker {
        match self {
            Speaker::A => Speaker::B,
            Speaker::B => Speaker::A,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Speaker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: Speaker,
    pub text: String,
}

impl Utterance {
    pub fn new(speaker: Speaker, text: impl Into<String>) -> Self {
        Utterance {
            speaker,
            text: text.into(),
        }
    }

    pub fn line(&self) -> String {
        format!("{}: {}", self.speaker, self.text)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub index: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gap_before: Option<Duration>,
    #[serde(default)]
    pub events_shown: BTreeMap<Speaker, Vec<String>>,
    pub utterances: Vec<Utterance>,
}

impl SessionRecord {
    pub fn transcript(&self) -> String {
        self.utterances.iter().map(Utterance::line).collect::<Vec<_>>().join("\n")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conversation {
    pub id: String,
    pub split: Split,
    pub sessions: Vec<SessionRecord>,
}

impl Conversation {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let fail = |reason: String| {
            Err(DatasetError::InvariantViolation {
                id: self.id.clone(),
                reason,
            })
        };
        if self.id.trim().is_empty() {
            return fail("empty id".into());
        }
        let n = self.sessions.len();
        if !(MIN_SESSIONS..=MAX_SESSIONS).contains(&n) {
            return fail(format!("{n} sessions, expected {MIN_SESSIONS} to {MAX_SESSIONS}"));
        }
        for (i, session) in self.sessions.iter().enumerate() {
            let expected = i as u32 + 1;
            if session.index != expected {
                return fail(format!("session {} found at position {expected}", session.index));
            }
            match (expected, session.gap_before) {
                (1, Some(_)) => return fail("session 1 has a gap".into()),
                (1, None) => {}
                (_, None) => return fail(format!("session {expected} has no gap")),
                (_, Some(gap)) if gap.is_zero() => return fail(format!("session {expected} has a zero gap")),
                _ => {}
            }
            if session.utterances.is_empty() {
                return fail(format!("session {expected} has no utterances"));
            }
            if session.utterances.iter().any(|u| u.text.trim().is_empty()) {
                return fail(format!("session {expected} has an empty utterance"));
            }
        }
        Ok(())
    }

    pub fn utterance_count(&self) -> usize {
        self.sessions.iter().map(|s| s.utterances.len()).sum()
    }
}

/// One conversation as a single JSON line (no trailing newline).
pub fn export_conversation(conv: &Conversation) -> Result<String, DatasetError> {
    conv.validate()?;
    Ok(serde_json::to_string(conv).expect("conversation serializes"))
}

pub fn export_corpus(path: impl AsRef<Path>, corpus: &[Conversation]) -> Result<(), DatasetError> {
    let path = path.as_ref();
    let mut out = String::new();
    for conv in corpus {
        out.push_str(&export_conversation(conv)?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| io_error(path, e))
}

/// Appends one conversation and syncs it to disk.
pub fn append_conversation(path: impl AsRef<Path>, conv: &Conversation) -> Result<(), DatasetError> {
    let path = path.as_ref();
    let line = export_conversation(conv)?;
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| io_error(path, e))?;
    writeln!(file, "{line}").and_then(|_| file.sync_data()).map_err(|e| io_error(path, e))
}

fn io_error(path: &Path, e: std::io::Error) -> DatasetError {
    DatasetError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImportIssue {
    /// 1-based line number.
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImportReport {
    pub issues: Vec<ImportIssue>,
}

impl ImportReport {
    pub fn is_clean(&self) -> bool {
        self.issues.is_empty()
    }
}

pub fn parse_conversation_line(line: &str) -> Result<Conversation, String> {
    let conv: Conversation = serde_json::from_str(line).map_err(|e| e.to_string())?;
    conv.validate().map_err(|e| e.to_string())?;
    Ok(conv)
}

/// Parses every non-blank line; malformed ones go to the report.
pub fn import_conversations_str(text: &str) -> (Vec<Conversation>, ImportReport) {
    let mut convs = Vec::new();
    let mut report = ImportReport::default();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match parse_conversation_line(line) {
            Ok(conv) => convs.push(conv),
            Err(message) => report.issues.push(ImportIssue { line: i + 1, message }),
        }
    }
    (convs, report)
}

pub fn import_conversations(path: impl AsRef<Path>) -> Result<(Vec<Conversation>, ImportReport), DatasetError> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(DatasetError::MissingFile(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    Ok(import_conversations_str(&text))
}

// ---------------------------------------------------------------------------
// Statistics

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatsRow {
    pub dialogues: usize,
    pub utterances: usize,
}

impl Add for StatsRow {
    type Output = StatsRow;
    fn add(self, other: StatsRow) -> StatsRow {
        StatsRow {
            dialogues: self.dialogues + other.dialogues,
            utterances: self.utterances + other.utterances,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    /// Keyed by number of sessions per conversation.
    pub by_session_count: BTreeMap<usize, StatsRow>,
    pub total: StatsRow,
    pub split_counts: BTreeMap<Split, usize>,
}

impl Add for CorpusStats {
    type Output = CorpusStats;
    fn add(mut self, other: CorpusStats) -> CorpusStats {
        for (k, row) in other.by_session_count {
            let entry = self.by_session_count.entry(k).or_default();
            *entry = *entry + row;
        }
        for (k, n) in other.split_counts {
            *self.split_counts.entry(k).or_default() += n;
        }
        self.total = self.total + other.total;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitCheck {
    pub split: Split,
    pub count: usize,
    pub expected: f64,
    pub within_tolerance: bool,
}

impl CorpusStats {
    pub fn split_ratio(&self, split: Split) -> f64 {
        if self.total.dialogues == 0 {
            return 0.0;
        }
        self.split_counts.get(&split).copied().unwrap_or(0) as f64 / self.total.dialogues as f64
    }

    /// Compares split sizes against 0.7/0.1/0.2 with a tolerance of one
    /// conversation per split.
    pub fn split_checks(&self) -> Vec<SplitCheck> {
        SPLIT_RATIOS
            .iter()
            .map(|&(split, ratio)| {
                let count = self.split_counts.get(&split).copied().unwrap_or(0);
                let expected = ratio * self.total.dialogues as f64;
                SplitCheck {
                    split,
                    count,
                    expected,
                    within_tolerance: (count as f64 - expected).abs() <= 1.0 + 1e-9,
                }
            })
            .collect()
    }

    pub fn splits_ok(&self) -> bool {
        self.split_checks().iter().all(|c| c.within_tolerance)
    }

    pub fn render_table(&self) -> String {
        let mut out = String::from("sessions  dialogues  utterances\n");
        for (k, row) in &self.by_session_count {
            out.push_str(&format!("{k:>8}  {:>9}  {:>10}\n", row.dialogues, row.utterances));
        }
        out.push_str(&format!("{:>8}  {:>9}  {:>10}\n", "total", self.total.dialogues, self.total.utterances));
        for check in self.split_checks() {
            out.push_str(&format!(
                "split {:<5} {:>6} (expected {:.1}){}\n",
                check.split.as_str(),
                check.count,
                check.expected,
                if check.within_tolerance { "" } else { " off-ratio" }
            ));
        }
        out
    }
}

pub fn compute_stats(corpus: &[Conversation]) -> Result<CorpusStats, DatasetError> {
    if corpus.is_empty() {
        return Err(DatasetError::EmptyCorpus);
    }
    let mut stats = CorpusStats::default();
    for conv in corpus {
        let row = StatsRow {
            dialogues: 1,
            utterances: conv.utterance_count(),
        };
        let entry = stats.by_session_count.entry(conv.sessions.len()).or_default();
        *entry = *entry + row;
        stats.total = stats.total + row;
        *stats.split_counts.entry(conv.split).or_default() += 1;
    }
    Ok(stats)
}

// ---------------------------------------------------------------------------
// External corpus adapter

/// Result of adapting an external directory; unmapped field names are
/// counted, never silently dropped.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterReport {
    pub files_read: usize,
    pub records_seen: usize,
    pub unmapped_fields: BTreeMap<String, usize>,
    pub rejected: Vec<String>,
}

const SESSION_LIST_KEYS: &[&str] = &["sessions", "previous_dialogs", "dialogs", "episodes"];
const TURN_LIST_KEYS: &[&str] = &["dialog", "dialogue", "utterances", "turns"];
const TEXT_KEYS: &[&str] = &["text", "utterance", "content"];
const SPEAKER_KEYS: &[&str] = &["id", "speaker", "speaker_id", "agent"];
const GAP_KEYS: &[&str] = &["gap", "time_gap", "gap_before", "time_back"];
const ID_KEYS: &[&str] = &["id", "conversation_id", "dialog_id", "initial_data_id"];

struct Adapter<'a> {
    report: &'a mut AdapterReport,
}

impl Adapter<'_> {
    fn note_unmapped(&mut self, prefix: &str, obj: &serde_json::Map<String, Value>, used: &[&str]) {
        for key in obj.keys() {
            if !used.contains(&key.as_str()) {
                *self.report.unmapped_fields.entry(format!("{prefix}{key}")).or_default() += 1;
            }
        }
    }

    fn gap_of(&mut self, obj: &serde_json::Map<String, Value>) -> (Option<Duration>, Vec<&'static str>) {
        for key in GAP_KEYS {
            if let Some(Value::String(s)) = obj.get(*key) {
                if let Ok(d) = parse_duration(s.trim_end_matches('.')) {
                    return (Some(d), vec![key]);
                }
            }
        }
        if let (Some(num), Some(Value::String(unit))) = (obj.get("time_num").and_then(Value::as_u64), obj.get("time_unit")) {
            let word = unit.trim().trim_end_matches('s');
            if let Some(unit) = TimeUnit::from_word(word) {
                if num > 0 {
                    return (Some(Duration::new(num, unit)), vec!["time_num", "time_unit"]);
                }
            }
        }
        (None, Vec::new())
    }

    fn session(&mut self, value: &Value, speakers: &mut Vec<String>) -> Option<(Option<Duration>, Vec<Utterance>)> {
        let (turns, gap) = match value {
            Value::Array(turns) => (turns.as_slice(), None),
            Value::Object(obj) => {
                let key = TURN_LIST_KEYS.iter().find(|k| obj.get(**k).is_some_and(Value::is_array))?;
                let (gap, mut used) = self.gap_of(obj);
                used.push(key);
                self.note_unmapped("session.", obj, &used);
                (obj[*key].as_array().map(Vec::as_slice).unwrap_or_default(), gap)
            }
            _ => return None,
        };
        let mut utterances = Vec::new();
        for (i, turn) in turns.iter().enumerate() {
            let (speaker_name, text) = match turn {
                Value::String(s) => (if i % 2 == 0 { "A" } else { "B" }.to_string(), s.clone()),
                Value::Object(obj) => {
                    let text_key = TEXT_KEYS.iter().find(|k| obj.get(**k).is_some_and(Value::is_string));
                    let speaker_key = SPEAKER_KEYS.iter().find(|k| obj.get(**k).is_some_and(Value::is_string));
                    let Some(text_key) = text_key else { continue };
                    let mut used = vec![*text_key];
                    let name = match speaker_key {
                        Some(k) => {
                            used.push(k);
                            obj[*k].as_str().unwrap_or_default().to_string()
                        }
                        None => if i % 2 == 0 { "A" } else { "B" }.to_string(),
                    };
                    self.note_unmapped("turn.", obj, &used);
                    (name, obj[*text_key].as_str().unwrap_or_default().to_string())
                }
                _ => continue,
            };
            if text.trim().is_empty() {
                continue;
            }
            let slot = match speakers.iter().position(|s| *s == speaker_name) {
                Some(p) => p,
                None => {
                    speakers.push(speaker_name);
                    speakers.len() - 1
                }
            };
            let speaker = match slot {
                0 => Speaker::A,
                1 => Speaker::B,
                _ => return None,
            };
            utterances.push(Utterance::new(speaker, text.trim()));
        }
        Some((gap, utterances))
    }

    fn conversation(&mut self, value: &Value, fallback_id: String, split: Split) -> Result<Conversation, String> {
        let obj = value.as_object().ok_or("record is not an object")?;
        let mut used: Vec<&str> = Vec::new();
        let mut raw_sessions: Vec<&Value> = Vec::new();
        if let Some(key) = SESSION_LIST_KEYS.iter().find(|k| obj.get(**k).is_some_and(Value::is_array)) {
            used.push(key);
            raw_sessions.extend(obj[*key].as_array().into_iter().flatten());
        }
        // A current session stored next to the earlier ones.
        let mut trailing: Option<(Option<Duration>, &Value)> = None;
        if let Some(key) = TURN_LIST_KEYS.iter().find(|k| obj.get(**k).is_some_and(Value::is_array)) {
            used.push(key);
            let (gap, gap_keys) = self.gap_of(obj);
            used.extend(gap_keys);
            trailing = Some((gap, &obj[*key]));
        }
        let id = ID_KEYS
            .iter()
            .find_map(|k| {
                obj.get(*k).and_then(|v| match v {
                    Value::String(s) => Some(s.clone()),
                    Value::Number(n) => Some(n.to_string()),
                    _ => None,
                })
                .map(|s| {
                    used.push(k);
                    s
                })
            })
            .unwrap_or(fallback_id);
        if obj.contains_key("split") {
            used.push("split");
        }
        self.note_unmapped("", obj, &used);

        let mut speakers = Vec::new();
        let mut sessions = Vec::new();
        for raw in raw_sessions {
            let (gap, utterances) = self.session(raw, &mut speakers).ok_or("unreadable session")?;
            sessions.push((gap, utterances));
        }
        if let Some((gap, raw)) = trailing {
            let (inner_gap, utterances) = self.session(raw, &mut speakers).ok_or("unreadable session")?;
            sessions.push((gap.or(inner_gap), utterances));
        }
        let split = match obj.get("split").and_then(Value::as_str) {
            Some("train") => Split::Train,
            Some("valid") | Some("validation") | Some("dev") => Split::Valid,
            Some("test") => Split::Test,
            _ => split,
        };
        let conv = Conversation {
            id,
            split,
            sessions: sessions
                .into_iter()
                .enumerate()
                .map(|(i, (gap, utterances))| SessionRecord {
                    index: i as u32 + 1,
                    gap_before: if i == 0 { None } else { gap },
                    events_shown: BTreeMap::new(),
                    utterances,
                })
                .collect(),
        };
        conv.validate().map_err(|e| e.to_string())?;
        Ok(conv)
    }
}

fn split_from_file_name(name: &str) -> Split {
    let lower = name.to_lowercase();
    if lower.contains("test") {
        Split::Test
    } else if lower.contains("valid") || lower.contains("dev") {
        Split::Valid
    } else {
        Split::Train
    }
}

/// Maps `.json`/`.jsonl` files under `dir` into canonical conversations.
/// Accepts records with a session list (`sessions`, `previous_dialogs`) and
/// an optional trailing `dialog`; speakers are assigned A/B in order of
/// first appearance.
pub fn adapt_external_corpus(dir: impl AsRef<Path>) -> Result<(Vec<Conversation>, AdapterReport), DatasetError> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Err(DatasetError::MissingFile(dir.to_path_buf()));
    }
    let mut files = BTreeSet::new();
    collect_files(dir, &mut files).map_err(|e| io_error(dir, e))?;
    let mut report = AdapterReport::default();
    let mut convs = Vec::new();
    for path in files {
        let text = std::fs::read_to_string(&path).map_err(|e| io_error(&path, e))?;
        report.files_read += 1;
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let split = split_from_file_name(&name);
        let records: Vec<Value> = match serde_json::from_str::<Value>(&text) {
            Ok(Value::Array(items)) => items,
            Ok(other) => vec![other],
            Err(_) => text.lines().filter(|l| !l.trim().is_empty()).filter_map(|l| serde_json::from_str(l).ok()).collect(),
        };
        for (i, record) in records.iter().enumerate() {
            report.records_seen += 1;
            let mut adapter = Adapter { report: &mut report };
            match adapter.conversation(record, format!("{name}#{}", i + 1), split) {
                Ok(conv) => convs.push(conv),
                Err(reason) => report.rejected.push(format!("{name}#{}: {reason}", i + 1)),
            }
        }
    }
    for (field, count) in &report.unmapped_fields {
        tracing::info!(field, count, "unmapped field in external corpus");
    }
    Ok((convs, report))
}

fn collect_files(dir: &Path, out: &mut BTreeSet<PathBuf>) -> std::io::Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else if path.extension().is_some_and(|e| e == "json" || e == "jsonl") {
            out.insert(path);
        }
    }
    Ok(())
}
