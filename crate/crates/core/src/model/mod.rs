//! Two-stage encoder: a unimodal text encoder followed by a cross-modal
//! encoder over `[text ; visual slots]`.

mod checkpoint;
mod config;
mod masking;
mod network;
pub mod vocab;

pub use config::ModelConfig;
pub use masking::{mask_regions, mask_tokens, RegionMask, Substitution, TokenMask};
pub use network::{
    jmlm_loss, jmrm_loss, perplexity, BatchLoss, CrossModalModel, ExampleVars, ForwardOutput, LossMode, LossValues,
    MaskedBatch, MaskedExample, VisualInput,
};
pub use vocab::Vocab;
