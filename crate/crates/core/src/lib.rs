//! Rate-adaptive task-oriented vector quantization for remote inference.
//!
//! A single learned codebook whose length-`2^l` prefixes serve every bit
//! resolution, plus a progressive (successive-refinement) variant, trained
//! end-to-end against a classification task and evaluated under a
//! time-varying channel simulator.

pub mod autodiff;
pub mod channel;
pub mod codebook;
pub mod config;
pub mod data;
pub mod experiments;
pub mod model;
pub mod report;
pub mod train;
pub mod vq;

pub(crate) mod textfmt;
