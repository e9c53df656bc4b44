//! Laboratory for training compact encoder-decoder transformers on modular
//! exponentiation (a^b mod c) and analyzing how they learn it.
//!
//! The pipeline is file-based: `sampler` generates datasets, `codec` maps
//! instances to base-B token sequences, `model` + `trainer` fit a small
//! transformer from scratch, and `analysis` / `interpret` post-process the
//! resulting metrics and checkpoints (per-modulus grokking curves, activation
//! patching with KL maps, embedding PCA).

pub mod analysis;
pub mod codec;
pub mod config;
pub mod dataset;
pub mod error;
pub mod interpret;
pub mod model;
pub mod numtheory;
pub mod rng;
pub mod sampler;
pub mod trainer;

pub use error::Error;

pub type Result<T> = std::result::Result<T, Error>;
