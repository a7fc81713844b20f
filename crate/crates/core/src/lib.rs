//! Spectral-temporal graph forecasting for multi-subsystem sensor networks.
//!
//! The crate learns a latent sensor graph from windowed multichannel data via
//! GRU embeddings and self-attention, filters the window in the graph- and
//! time-spectral domains through residual backcast/forecast blocks, and
//! forecasts a designated electric channel subset from the fused electric +
//! hydraulic set. Everything trains through the in-crate reverse-mode
//! autodiff tape.

pub mod autodiff;
pub mod baseline;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod filter;
pub mod graph;
mod init;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod synth;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, ParamId, ParamStore, Tape, Var};
pub use error::{CoreError, Result};
pub use tensor::{ComplexSpectrum, Tensor};
