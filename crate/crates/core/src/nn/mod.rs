//! Differentiable tensor core and the non-capsule layers.

pub mod checkpoint;
pub mod graph;
pub mod layers;
pub mod params;

pub use graph::{BnMode, Gradients, Graph, Var};
pub use layers::{attention_pool, dropout, AttentionPool, BatchNorm, BiLstm, BnUpdate, Dense};
pub use params::{Bound, Param, ParamId, ParamStore};
