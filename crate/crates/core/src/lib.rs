//! Tri-modal power-load forecasting.
//!
//! A load window is augmented into a text description and a stack of image
//! frames, the three views are encoded into a shared embedding space, and a
//! cross-attention forecaster predicts the next `h` steps. Training combines
//! the prediction loss with contrastive redundancy and synergy terms. The
//! [`pid`] module holds an exact partial-information-decomposition lab for
//! small discrete systems.

pub mod checkpoint;
pub mod contrastive;
pub mod data;
pub mod error;
pub mod experiment;
pub mod image;
pub mod model;
pub mod pid;
pub mod tensor;
pub mod text;

pub use error::{Error, Result, TensorError};
pub use tensor::{Adam, AdamConfig, ParamId, ParamStore, Tape, Tensor, Var};
