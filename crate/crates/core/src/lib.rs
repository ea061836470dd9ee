//! Debiasing variational autoencoder for face detection.
//!
//! A convolutional encoder predicts a face logit together with a Gaussian
//! latent posterior. A decoder reconstructs faces from latent samples. Before
//! each epoch the distribution of latent means over the training faces is
//! estimated with per-dimension histograms, and faces in sparse regions are
//! drawn more often.
//!
//! Modules, bottom up:
//!
//! - [`tensor`], [`ops`] and [`tape`]: `f64` tensors, convolution kernels and
//!   a reverse-mode gradient tape.
//! - [`models`], [`loss`] and [`optim`]: the two architectures, the gated
//!   objective and Adam.
//! - [`resample`]: latent histograms and sampling weights.
//! - [`train`]: the debiasing and standard training loops.
//! - [`data`], [`eval`], [`checkpoint`] and [`report`]: synthetic and on-disk
//!   datasets, per-group accuracy, model files and CSV output.
//!
//! The guide in `book/` walks through each piece with runnable examples.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod loss;
pub mod models;
pub mod ops;
pub mod optim;
pub mod report;
pub mod resample;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use rng::RngStream;
pub use tensor::Tensor;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tape.md")]
    mod tape {}
    #[doc = include_str!("../../../book/src/models.md")]
    mod models {}
    #[doc = include_str!("../../../book/src/objective.md")]
    mod objective {}
    #[doc = include_str!("../../../book/src/resampling.md")]
    mod resampling {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
