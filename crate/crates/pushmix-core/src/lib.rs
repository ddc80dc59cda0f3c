//! Complementary-product recommendation for push notifications.
//!
//! The pipeline: parse interaction and impression logs ([`ingest`]), score
//! product pairs for complementarity from purchase/view graphs ([`graph`]),
//! assemble assignment and prediction feature vectors ([`features`]), train a
//! latent-context mixture of logistic experts with EM ([`mixture`]), rank
//! candidate products per user and anchor purchase ([`rank`]), and study the
//! whole thing on synthetic data with planted ground truth ([`synth`],
//! [`eval`]).

pub mod error;
pub mod eval;
pub mod features;
pub mod graph;
pub mod ingest;
pub mod mixture;
pub mod rank;
mod rng;
pub mod stats;
pub mod synth;

pub use error::{Error, Result};
pub use features::{Example, FeatureSchema, FeatureSources};
pub use graph::{BipartiteGraph, CandidatePair, ScoreSet, ScoreTable};
pub use ingest::{InteractionEvent, PushImpression};
pub use mixture::em::em_fit;
pub use mixture::{FitConfig, MixtureParams};
