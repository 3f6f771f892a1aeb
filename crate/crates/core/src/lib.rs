//! Self-supervised ECG representation learning on a state-space backbone.
//!
//! The crate covers the whole path from raw single-lead recordings to
//! evaluated embeddings:
//!
//! - [`signal_io`]: on-disk dataset layout, quality gating, cross-validation splits
//! - [`preprocess`]: resampling, smoothing, high-pass, subject z-scoring, windowing, R peaks
//! - [`augment`]: the eight signal transforms and the multi-label pretext sampler
//! - [`ssm`]: discretized state-space layers, S4 blocks and the backbone network
//! - [`train`]: pretraining, fine-tuning, AdamW and checkpoints
//! - [`eval`]: metrics, reports, embedding-distance analyses, synthetic corpus

pub mod augment;
pub mod error;
pub mod eval;
pub mod preprocess;
pub mod rng;
pub mod signal_io;
pub mod ssm;
pub mod train;

pub use error::{Error, Result};
