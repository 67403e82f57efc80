//! Deep joint source-channel coding of images over a half-duplex relay
//! channel.
//!
//! The source encodes an image into `k` complex channel symbols. In the
//! first period the relay and destination both receive them; in the second
//! the relay forwards its own `k` symbols: a scaled copy (AF), a re-encoding
//! of its own reconstruction (DF), or a learned transform of what it heard
//! (PF). The destination decodes from both observations. The
//! non-cooperative baseline uses the direct link only.
//!
//! Modules, bottom up:
//! - [`channel`]: complex AWGN links, power normalization, AF scaling, MRC.
//! - [`autograd`], [`nn`], [`models`]: a reverse-mode autodiff tape and the
//!   encoder, decoder and relay networks built on it.
//! - [`protocols`]: differentiable end-to-end forward passes and losses.
//! - [`training`], [`checkpoint`]: Adam, plateau decay, early stopping.
//! - [`metrics`], [`evaluation`], [`report`]: PSNR/SSIM, SNR sweeps, the
//!   separation baseline, tables and figures.
//! - [`data`], [`config`]: CIFAR-10 ingestion and the run configuration.
//! - [`simulation`]: Monte-Carlo checks of MRC and the AF noise variance.

pub mod autograd;
pub mod channel;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
mod kernels;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod protocols;
pub mod report;
pub mod serde_db;
pub mod simulation;
pub mod tensor;
pub mod training;

pub use channel::{ComplexSignal, LinkConfig, RelayLinks, SnrTriple};
pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use data::ImageSet;
pub use error::{Error, Result};
pub use evaluation::{EvalRecord, SeparationBudget};
pub use models::{EncoderConfig, JsccModel};
pub use protocols::{ProtocolKind, ProtocolSpec};
pub use tensor::Tensor;
pub use training::{GammaMode, TrainConfig};
