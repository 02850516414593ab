//! Furniture set retrieval toolkit.
//!
//! Given per-instance feature vectors cropped from interior scenes and a
//! catalog of furniture identities, this crate covers the full retrieval
//! chain: dataset ingestion and validation, ZCA whitening, category-bounded
//! attribute clustering, a small verification-trained embedding model,
//! exhaustive nearest-identity search, design-context embeddings, and
//! context-aware re-ranking of whole furniture sets, with evaluation metrics
//! and a deterministic synthetic data generator for end-to-end testing.

pub mod attributes;
pub mod context;
pub mod embednet;
pub mod error;
pub mod eval;
pub mod index;
pub mod ingest;
pub mod rerank;
pub mod synth;
pub mod whiten;

pub use error::{Error, Result};
