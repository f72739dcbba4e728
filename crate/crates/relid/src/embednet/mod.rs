//! Minimal neural-network primitives with reverse-mode differentiation.
//!
//! Everything runs on [`graph::Graph`], an arena of 2-D f64 tensors.
//! [`layers`] builds the standard blocks (dense, LSTM, GRU,
//! bidirectional wrappers, TDNN context layers, statistics pooling,
//! attention pooling), [`params`] holds named parameter tensors and
//! the checkpoint format, [`optim`] provides Adam and gradient
//! clipping, and [`gradcheck`] verifies any composition against central
//! finite differences.

pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;

pub use gradcheck::{check_gradients, GradCheckReport};
pub use graph::{Graph, NodeId};
pub use optim::{clip_global_norm, Adam};
pub use params::{bind, read_checkpoint, write_checkpoint, Binding, ParamSet};
