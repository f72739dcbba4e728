//! Spoken language identification on synthetic desk-scale corpora, with
//! relevance weighting for noisy speech.
//!
//! The crate covers the full chain: corpus synthesis with controlled
//! noise ([`corpus`]), diagonal-covariance mixture training ([`ubm`]),
//! sufficient statistics with optional entropy-based frame weighting
//! ([`bwstats`]), total-variability embedding extraction ([`tvm`]),
//! discriminative backends ([`backend`]), neural embedding and sequence
//! models built on a small reverse-mode graph ([`embednet`], [`models`]),
//! and detection metrics ([`eval`]). [`pipeline`] wires the stages
//! together behind a key=value config, and the `relid` binary exposes
//! them as subcommands.
//!
//! Start with the `examples/` directory: each example is a runnable
//! walkthrough of one capability, from corpus generation through
//! evaluation.

pub mod backend;
pub mod bwstats;
pub mod corpus;
pub mod embednet;
pub mod error;
pub mod eval;
pub mod io;
pub mod linalg;
pub mod models;
pub mod pipeline;
pub mod tvm;
pub mod ubm;

pub use error::{Error, Result};
