//! Visual dialog answer ranking with cascaded multi-modal graph attention
//! and dual-stream transformer layers.
//!
//! The model alternates between edge-conditioned graph attention blocks over
//! three modality graphs (image regions, question tokens, dialog rounds) and
//! a two-stream transformer layer. Hub nodes carry summary vectors between
//! the graphs in a fixed cascade (image -> history -> question -> image), and
//! the graph outputs are fused back into the transformer hidden states with a
//! residual coefficient before the next layer.
//!
//! Entry points:
//! - [`graph`]: build and prune the three modality graphs from annotations.
//! - [`gnn`]: graph attention layers, hub embeddings, and the cascade.
//! - [`model`]: tokenization, the dual-stream backbone, and the full forward.
//! - [`objectives`]: mask planning and the loss heads.
//! - [`ranking`]: candidate scoring, metrics, and ensembling.
//! - [`data`]: synthetic dialog generation and dataset ingestion.
//! - [`train`]: optimization stages, checkpoints, evaluation, ablations.
//!
//! See the `examples/` directory for one runnable example per capability.

pub mod data;
pub mod error;
pub mod gnn;
pub mod graph;
pub mod model;
pub mod objectives;
pub mod params;
pub mod ranking;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
