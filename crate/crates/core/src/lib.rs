//! Dual-encoder entity retrieval.
//!
//! Mentions in context and knowledge-base entities are embedded by two
//! independent towers into one vector space and compared by cosine. The
//! crate covers the whole offline pipeline short of file IO:
//!
//! - [`corpus`]: entity catalogs, annotated documents, splits and a
//!   synthetic corpus generator with deliberately ambiguous spans.
//! - [`features`]: tokenization, n-gram extraction and hashing, mention and
//!   entity feature bundles.
//! - [`model`]: the two towers, cosine scoring and the parameter layout.
//! - [`training`]: in-batch softmax and logistic losses, exact manual
//!   gradients, SGD with momentum and the training loop.
//! - [`mining`]: iterative hard-negative mining.
//! - [`index`]: brute-force, product-quantized (asymmetric) and
//!   tree + asymmetric search over entity encodings.
//! - [`baselines`]: alias tables with priors and BM25 over titles.
//! - [`eval`]: recall@k and the retriever contract.
//!
//! The crate is `no_std` and only needs `alloc`.

#![no_std]
#![deny(unsafe_code)]

extern crate alloc;

pub mod baselines;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod features;
pub mod index;
mod linalg;
pub mod mining;
pub mod model;
pub mod training;

pub use error::{Error, Result};
