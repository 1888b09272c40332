//! Conversational attention sinks.
//!
//! End-of-utterance tokens in a dialogue act as compact summaries of their
//! utterance. This crate provides the pieces needed to exploit that:
//!
//! - [`dialogue`]: conversations, token layouts and utterance segmentation
//! - [`mask`]: streaming, reconstruction (SMR) and recall (LMR) attention
//!   masks, plus dense / local / StreamingLLM baselines
//! - [`cache`]: the streaming KV retention policy and baseline policies
//! - [`tasks`]: training-sample layouts and synthetic corpora
//! - [`analyzer`]: sink aggregation statistics over attention maps

pub mod analyzer;
pub mod cache;
pub mod dialogue;
pub mod error;
pub mod mask;
pub mod tasks;

pub use dialogue::{layout_uniform, Conversation, SegmentMap, TokenId, TokenSeq, Utterance};
pub use error::{Error, Result};
pub use mask::{MaskKind, MaskMatrix};
pub use tasks::{Task, TrainingSample};
