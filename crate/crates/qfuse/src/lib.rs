//! Continually evolving multimodal query fusion for survival prediction.
//!
//! A shared query transformer encodes each modality's feature sequence into a
//! fixed set of query embeddings, with per-modality low-rank adapters routed
//! by modality name. Supporting-modality queries are compressed and
//! self-gated before being concatenated after the primary modality's queries.
//! Models train against a Cox partial-likelihood objective and are evaluated
//! by concordance index, alongside classical fusion baselines and a
//! modality-addition protocol with frozen-base guarantees.
//!
//! The `parallel` feature (on by default) runs batch gradients, evaluation
//! and cohort generation on a rayon pool; without it every code path falls
//! back to equivalent sequential loops.

pub mod cohort;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod rng;
pub mod lora;
pub mod model;
pub mod par;
pub mod params;
pub mod qformer;
pub mod smqf;
pub mod survival;
pub mod tensor;

pub use error::{DataError, ModelError, SurvivalError, TensorError};
pub use graph::{Graph, OpKind, Var};
pub use tensor::Tensor;
