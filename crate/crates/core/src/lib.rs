//! Multi-stream end-to-end speech recognition.
//!
//! One encoder per microphone-array stream, frame-level content attention
//! per stream, a stream-level attention that fuses the per-stream context
//! vectors, per-encoder CTC heads trained jointly with the attention decoder,
//! and joint CTC/attention beam search with optional language-model fusion.

pub mod attention;
pub mod ctc;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod lm;
pub mod model;
pub mod numerics;
pub mod params;
pub mod search;
pub mod training;

pub use error::{Error, Result};
