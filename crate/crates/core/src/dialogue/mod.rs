//! Time-aware model inputs, session memory and multi-session self-chat.

pub mod context;
pub mod memory;
pub mod selfchat;

pub use context::{build_context, ContextBlock, ContextError, ContextInput, ContextMode};
pub use memory::{SessionDocument, SessionMemory};
pub use selfchat::{plan_self_chat, plan_self_chat_with_gaps, run_self_chat, SelfChatConfig, SelfChatError, SelfChatSettings};
