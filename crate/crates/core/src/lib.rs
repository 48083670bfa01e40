//! Forged-region localization driven by a tiny multimodal reasoner.
//!
//! A decoder-only transformer reads visual tokens and a text prompt and
//! answers with a templated response containing a `[SEG]` token. The hidden
//! state at that token is projected by an MLP into a query vector which a
//! cross-attention mask decoder turns into per-pixel edit logits.

pub mod data;
pub mod error;
pub mod experiments;
pub mod gradcheck;
pub mod image;
pub mod lora;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod reasoner;
pub mod seg_decoder;
pub mod tape;
pub mod text;
pub mod trainer;

pub use error::{Error, Result};
