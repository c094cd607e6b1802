//! Evidential multimodal regression at desk scale.
//!
//! The pipeline: per-modality temporal encoding, wavelet-based
//! frequency-aware refinement with heterogeneous experts and adaptive
//! gating, shared/private representation disentanglement, Normal-Inverse-Gamma
//! evidence heads with evidence-guided Bayesian fusion, and a calibration
//! evaluation toolkit (PICP/MPIW, uncertainty-quantile binning,
//! sparsification curves). A deterministic synthetic multimodal generator
//! with controllable heteroscedastic noise makes the whole thing testable
//! end to end.
//!
//! Everything trains on a minimal reverse-mode tape over dense `f64`
//! matrices ([`tape`]); no external ML framework.

pub mod config;
pub mod disentangle;
pub mod evidential;
pub mod exec;
pub mod ffe;
pub mod gradcheck;
pub mod matrix;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod student_t;
pub mod synthdata;
pub mod tape;
pub mod training;
pub mod wavelet;

use thiserror::Error;

/// Library-wide error type.
#[derive(Debug, Error)]
pub enum EvidentError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, EvidentError>;
