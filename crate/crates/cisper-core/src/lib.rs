//! CISPER: emotion recognition in conversation with continuous prompts.
//!
//! The pipeline has three stages: per-utterance feature extraction (semantic
//! plus nine-relation commonsense embeddings), trainable prompt generation
//! that blends those features per conversation, and cloze-style emotion
//! prediction where the prompt embeddings are injected around each utterance
//! in a masked-LM input. Training, evaluation, ablation and prompt-length
//! sweep harnesses sit on top.

pub mod cloze;
pub mod config;
pub mod corpus;
pub mod encoders;
pub mod eval;
pub mod fixtures;
pub mod model;
pub mod nn;
pub mod promptgen;
pub mod train;
