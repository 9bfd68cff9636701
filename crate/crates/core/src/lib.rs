//! Simulated passage of time for multi-session dialogue.

pub mod catalog;
pub mod dataset;
pub mod dialogue;
pub mod eval;
pub mod llm;
pub mod progress;
pub mod temporal;
pub mod text;
pub mod timeline;
