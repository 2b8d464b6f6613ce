//! Cross-modal knowledge distillation for PPG-based individual
//! identification with an ECG teacher.
//!
//! The crate covers the full pipeline: signal ingestion and windowing,
//! 1-D convolutional backbones split into feature extractor and classifier,
//! the distillation loss family (contrastive alignment, MMD, triplet,
//! temperature-scaled KL, cross-classifier assessment), three-phase
//! training, and closed/open-set evaluation. Everything runs on a small
//! deterministic f64 autodiff tape so runs are bit-reproducible.

pub mod backbones;
pub mod error;
pub mod graph;
pub mod losses;
pub mod nn;
pub mod rng;
pub mod signals;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;
