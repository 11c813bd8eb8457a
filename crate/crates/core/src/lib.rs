//! Two-stage multi-modal survival prognosis from fundus-like images and
//! tabular covariates.
//!
//! Stage 1 pretrains a selective-scan vision backbone against learnable
//! cosine class prototypes. Stage 2 freezes it, fuses its multi-scale
//! features with tabular covariates through iterative attention, gates the
//! result with the predicted class prototype, and trains a Cox survival head.
//! [`survstats`] holds the evaluation and biomarker toolkit.

pub mod backbone;
pub mod error;
pub mod fusion;
pub mod nn;
pub mod parallel;
pub mod pipeline;
pub mod pretrain;
pub mod survstats;
pub mod synthdata;

pub use error::{Error, Result};
pub use parallel::Exec;
