//! Semi-supervised learning for mixed-type tabular data.
//!
//! The pipeline pretrains an encoder with a supervised contrastive loss on
//! within-class Mixup views taken at a random hidden layer, plus a feature
//! reconstruction loss over all rows. After a warm start, unlabeled rows get
//! pseudo-labels by diffusing labels over a kNN graph of latent codes, and join
//! the contrastive term. A small MLP predictor is finally trained with Mixup on
//! the frozen encoder's latents.

pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod labelprop;
pub mod losses;
pub mod matrix;
pub mod mixup;
pub mod network;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
pub use matrix::Matrix;
