//! Random-rejection direct preference optimization (RDPO) for conditional
//! report generation, at desk scale.
//!
//! The crate is organized as a pipeline:
//!
//! - [`synthcxr`]: deterministic synthetic corpus of feature images paired with
//!   templated reports, plus the tokenizer, finding labeler and graph extractor.
//! - [`model`]: a small image-conditioned language model with exact analytic
//!   gradients, low-rank adapters and checkpoint I/O.
//! - [`align`]: supervised fine-tuning, the DPO objective with in-batch random
//!   rejected responses, the optimizer, the cosine schedule and training loops.
//! - [`metrics`]: lexical, embedding, label and graph report metrics, their
//!   composite, and the one-sided Wilcoxon signed-rank test.
//! - [`harness`]: the `rdpo-lab` command implementations.
//!
//! Batch work (per-pair gradients, corpus generation, decoding) goes through
//! [`exec`], which uses rayon when the `parallel` feature is enabled and a
//! plain loop otherwise. Reductions always run in index order, so results do
//! not depend on the worker count.

pub mod align;
pub mod error;
pub mod exec;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod synthcxr;

pub use error::{Error, Result};
