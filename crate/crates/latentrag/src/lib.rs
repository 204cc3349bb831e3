//! Latent-token agentic retrieval-augmented generation, small enough to run on a desk.
//!
//! Instead of spelling out intermediate thoughts and search queries as text, the
//! agent reserves a handful of special slot positions, runs one forward pass per
//! block, and treats the resulting last-layer hidden states as the thought and
//! the subquery themselves.  Latent subqueries are projected into a dense
//! retriever's input space and distilled against a frozen reference encoder with
//! a KL objective; latent blocks can optionally be decoded back to text in
//! parallel for inspection.  Everything — autodiff, transformer, retriever,
//! training loop, evaluation harness, synthetic corpus — lives in this crate.

pub mod agent;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod decode;
pub mod error;
pub mod eval;
pub mod formats;
pub mod infer;
pub mod kernels;
pub mod ledger;
pub mod model;
pub mod params;
pub mod retrieval;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
