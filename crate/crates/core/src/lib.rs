//! Post-encoder pipeline for tri-modal tissue representation learning.
//!
//! H&E patches, multiplexed immunofluorescence (mIF) patches and clinical text
//! are embedded by frozen encoders (modelled here as a pluggable feature
//! provider), projected into a shared space by small trainable heads, and then
//! used for cross-modal retrieval, slice-level clinical prediction,
//! retrieval-based biomarker inference and metadata counterfactuals.
//!
//! Module map:
//!
//! - [`ingest`]: data model, manifests, embedding files, patient splits, synthetic cohorts
//! - [`preprocess`]: channel normalization, sliding-window tiling, paired crops
//! - [`textgen`]: patch statistics, spatial patterns, template text, metadata edits
//! - [`align`]: projection heads, contrastive objective, gradients, training loop
//! - [`retrieval`]: cosine index, Recall@K, KNN, zero-shot, fusion, biomarker inference
//! - [`downstream`]: folds, linear probes, attention MIL, survival and ranking metrics
//! - [`stats`]: rank tests, paired t-test, BH-FDR, Pearson
//! - [`counterfactual`]: paired fusion retrieval, composition shift, clustering, PCA

pub mod align;
pub mod counterfactual;
pub mod downstream;
pub mod error;
pub mod ingest;
pub mod linalg;
pub mod metrics;
pub mod preprocess;
pub mod retrieval;
pub mod rng;
pub mod stats;
pub mod textgen;

pub use error::{AtlasError, Result};
