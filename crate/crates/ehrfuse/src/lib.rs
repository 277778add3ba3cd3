//! Code-centric multimodal fusion for next-visit diagnosis prediction.
//!
//! The crate trains a three-modality model (diagnosis codes, demographics,
//! clinical-note tokens) over synthetic longitudinal patient cohorts: each
//! modality is encoded separately, the code stream anchors two cross-modal
//! transformers and a gated fusion layer, and training combines a multi-label
//! cross-entropy with bimodal contrastive alignment and a parent-code
//! auxiliary objective.

pub mod ablate;
pub mod config;
pub mod data;
pub mod encoders;
pub mod fusion;
pub mod gradsuite;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod ontology;
pub mod metrics;
pub mod params;
pub mod train;
pub mod tensor;
