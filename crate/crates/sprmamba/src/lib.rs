//! Temporal sequence modeling for surgical phase recognition.
//!
//! The crate implements a full desk-scale pipeline: a reverse-mode autodiff
//! core over dense arrays, selective state-space layers, the SRTM hybrid
//! block (state-space branch for long-range context, attention branch for
//! local context), hierarchical window/long-range sampling, a multi-stage
//! refinement network with per-stage classification heads, training with
//! AdamW and a warmup+cosine schedule, frame/phase metrics including the
//! relaxed boundary protocol, binary feature files, and a synthetic workflow
//! generator for end-to-end verification.
//!
//! Start with the runnable programs in `examples/` — one per capability —
//! or the `sprm` binary for the file-based pipeline
//! (`gen-data` / `train` / `predict` / `eval` / `selfcheck`).

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod graph;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod sampling;
pub mod selfcheck;
pub mod srtm;
pub mod ssm;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use graph::{Activation, Graph, NodeId, Padding, ParamId, ParamStore};
pub use model::{Model, ModelConfig, StageOutput};
pub use tensor::NdArray;
