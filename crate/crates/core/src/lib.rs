//! Siamese two-modality embedding training at desk scale.
//!
//! Two MLP towers (one per modality) are trained either negative-free — each
//! tower's predictor chases EMA targets of both modalities — or with a
//! symmetric InfoNCE contrastive baseline. The crate also carries the full
//! evaluation stack: cross-modal retrieval, zero-shot classification and
//! tagging, modality-gap measurements, and sweep drivers for the loss-balance
//! and batch-scaling experiments, all on synthetic paired data.

pub mod autodiff;
pub mod error;
pub mod rng;

pub use error::{Result, SlapError};
