//! Fusion low-rank adapters (FLoRA) for multimodal device-directed speech
//! detection on top of a frozen encoder-decoder transformer.
//!
//! The crate contains a small f64 autograd engine, the backbone and its
//! adapter sites, modality front-ends, a synthetic dataset with a known
//! Bayes-optimal reference, training loops and detection metrics.

pub mod adapters;
pub mod autograd;
pub mod backbone;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod frontends;
pub mod gradcheck;
pub mod linalg;
pub mod metrics;
pub mod modality;
pub mod params;
pub mod optim;
pub mod tensor;
pub mod train;
pub mod checkpoint;

pub use adapters::{AdapterParams, AdapterSet, AdapterSiteId, AdapterView};
pub use autograd::{Activation, NodeId, Tape};
pub use backbone::{count_params, init_backbone, Model, ParamCount, Session};
pub use config::ModelConfig;
pub use data::{GenConfig, Sample};
pub use error::{Error, Result};
pub use metrics::{compute_eer, compute_fa_at_fr, ScoreSet};
pub use modality::{Modality, ModalitySet};
pub use params::{FreezePolicy, ParamStore};
pub use tensor::Tensor;
