//! Desk-scale two-stage reinforcement post-training for audio-visual
//! reasoning: grounding rewards, modality-contrast rewards, a sequence-level
//! clipped policy optimizer, data curation and a symbolic world with exact
//! oracle judges.

// `!(x >= lo)` guards also reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod curation;
pub mod eval;
pub mod gradcheck;
pub mod gspo;
pub mod interval;
pub mod judge;
pub mod orchestrator;
pub mod policy;
pub mod reward;
pub mod runtime;
pub mod trace;
pub mod util;
pub mod world;

pub use runtime::Error;
