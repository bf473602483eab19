//! Temporal parsing transformer for action quality assessment.
//!
//! A query-based transformer decoder parses a video's clip features into
//! ordered part representations via temperature-controlled cross-attention;
//! attention-center losses keep the parts ordered, compact, and spread out;
//! and a contrastive regressor scores a test video against exemplars by
//! classifying and regressing the score difference over a fixed interval
//! table. Everything runs on an in-crate reverse-mode autodiff engine, and a
//! synthetic phase-structured dataset stands in for real video features.

pub mod autodiff;
pub(crate) mod bytes;
pub mod config;
pub mod data;
pub mod decoder;
pub mod export;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod regressor;
pub mod error;

pub use error::{Error, Result};
