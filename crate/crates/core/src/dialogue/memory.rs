//! Per-session transcript documents with lexical top-k retrieval.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::{content_tokens, tokens};

pub const DEFAULT_TOP_K: usize = 5;

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("memory holds no documents")]
    EmptyMemory,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("transcript is empty")]
    EmptyTranscript,
    #[error("memory file {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionDocument {
    pub id: u64,
    pub session_index: u32,
    pub text: String,
    pub token_count: usize,
    pub content_token_count: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionMemory {
    documents: Vec<SessionDocument>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Retrieved<'a> {
    pub document: &'a SessionDocument,
    pub score: f64,
}

type TermCounts = BTreeMap<String, u64>;

fn term_counts(text: &str) -> TermCounts {
    let mut counts = TermCounts::new();
    for token in content_tokens(text) {
        *counts.entry(token).or_default() += 1;
    }
    counts
}

fn squared_norm(counts: &TermCounts) -> u128 {
    counts.values().map(|&c| (c as u128) * (c as u128)).sum()
}

fn dot(a: &TermCounts, b: &TermCounts) -> u128 {
    let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    small
        .iter()
        .filter_map(|(t, &c)| large.get(t).map(|&d| (c as u128) * (d as u128)))
        .sum()
}

/// Cosine kept as exact integers so that ties are exact.
#[derive(Debug, Clone, Copy)]
struct Cosine {
    dot: u128,
    /// Squared norm of the document; the query norm is shared by all
    /// candidates and cancels out of comparisons.
    doc_norm2: u128,
}

impl Cosine {
    fn value(self, query_norm2: u128) -> f64 {
        if self.dot == 0 {
            return 0.0;
        }
        self.dot as f64 / ((self.doc_norm2 as f64).sqrt() * (query_norm2 as f64).sqrt())
    }

    /// Compares dot_a / sqrt(n_a) with dot_b / sqrt(n_b) via squares.
    fn cmp(self, other: Cosine) -> Ordering {
        match (self.dot, other.dot) {
            (0, 0) => Ordering::Equal,
            (0, _) => Ordering::Less,
            (_, 0) => Ordering::Greater,
            _ => {
                let lhs = (self.dot * self.dot).checked_mul(other.doc_norm2);
                let rhs = (other.dot * other.dot).checked_mul(self.doc_norm2);
                match (lhs, rhs) {
                    (Some(l), Some(r)) => l.cmp(&r),
                    _ => self.value(1).total_cmp(&other.value(1)),
                }
            }
        }
    }
}

impl SessionMemory {
    pub fn new() -> Self {
        SessionMemory::default()
    }

    pub fn documents(&self) -> &[SessionDocument] {
        &self.documents
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    /// Appends a session transcript as its own document; ids start at 1.
    pub fn store_session_document(&mut self, transcript: &str, session_index: u32) -> Result<u64, MemoryError> {
        if transcript.trim().is_empty() {
            return Err(MemoryError::EmptyTranscript);
        }
        let id = self.documents.last().map_or(1, |d| d.id + 1);
        self.documents.push(SessionDocument {
            id,
            session_index,
            text: transcript.to_string(),
            token_count: tokens(transcript).len(),
            content_token_count: content_tokens(transcript).len(),
        });
        Ok(id)
    }

    /// Ranks documents by term-frequency cosine with `query`; equal scores
    /// prefer the later session.
    pub fn retrieve_top_k(&self, query: &str, k: usize) -> Result<Vec<Retrieved<'_>>, MemoryError> {
        if k == 0 {
            return Err(MemoryError::ZeroK);
        }
        if self.documents.is_empty() {
            return Err(MemoryError::EmptyMemory);
        }
        let q = term_counts(query);
        let query_norm2 = squared_norm(&q);
        let mut scored: Vec<(Cosine, &SessionDocument)> = self
            .documents
            .iter()
            .map(|doc| {
                let d = term_counts(&doc.text);
                (
                    Cosine {
                        dot: dot(&q, &d),
                        doc_norm2: squared_norm(&d),
                    },
                    doc,
                )
            })
            .collect();
        scored.sort_by(|(ca, da), (cb, db)| {
            cb.cmp(*ca)
                .then(db.session_index.cmp(&da.session_index))
                .then(db.id.cmp(&da.id))
        });
        scored.truncate(k);
        Ok(scored
            .into_iter()
            .map(|(c, document)| Retrieved {
                document,
                score: c.value(query_norm2),
            })
            .collect())
    }

    pub fn persist(&self, path: impl AsRef<Path>) -> Result<(), MemoryError> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("memory serializes");
        std::fs::write(path, text).map_err(|e| MemoryError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, MemoryError> {
        let path = path.as_ref();
        let io = |message: String| MemoryError::Io {
            path: path.display().to_string(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| io(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| io(e.to_string()))
    }
}
