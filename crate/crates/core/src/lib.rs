//! Learned retrieval of continuous-time event sequences.
//!
//! Given a query sequence of timestamped, categorically marked events, the
//! engine ranks a corpus of sequences by
//!
//! ```text
//! score(q, c) = kappa(U(q), c) + gamma * sim_U(q, c)
//! ```
//!
//! where `kappa` is the cosine between normalized log-likelihood gradients
//! (Fisher vectors) of an intensity-free marked temporal point process,
//! `sim_U` is a model-independent time/mark similarity, and `U` is a
//! trainable monotone unwarping of the query clock. Candidate selection can
//! be made sub-linear with trained binary hash codes over the Fisher vectors.
//!
//! Module map:
//!
//! - [`data`]: sequences, corpora, judgments, splits, file formats
//! - [`autodiff`]: dense reverse-mode tape used for every gradient
//! - [`mtpp`]: self- and cross-attention lognormal point process
//! - [`unwarp`]: monotone integral-of-ReLU-network time transform
//! - [`relevance`]: distances, Fisher vectors and the relevance score
//! - [`trainer`]: pairwise margin ranking with Adam
//! - [`hashing`]: trainable and random-hyperplane codes, bucket index
//! - [`retrieval`]: hashed and exhaustive top-K, metrics, evaluation
//! - [`datagen`]: seeded synthetic benchmark
//! - [`cli`]: the `ctes` command surface
//!
//! See the crate's `examples/` directory for one runnable program per
//! capability.

pub mod autodiff;
pub mod cli;
pub mod data;
pub mod datagen;
pub mod hashing;
pub mod mtpp;
pub mod relevance;
pub mod retrieval;
pub mod seed;
pub mod trainer;
pub mod unwarp;

mod binio;

pub use data::{Corpus, Event, EventSequence, RelevanceJudgments};



pub use mtpp::{ModelConfig, MtppModel, Variant};
pub use relevance::{FisherConfig, RelevanceModel};
pub use trainer::{Checkpoint, TrainConfig};
pub use unwarp::Unwarp;
