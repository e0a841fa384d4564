//! Multivariate time-series forecasting with a delay-embedding transformer.
//!
//! Each channel's input window is turned into a Hankel matrix of delay
//! coordinates, cut into patches, and encoded by a transformer whose
//! weights are shared by all channels. A per-channel affine head maps the
//! encoding to the forecast.
//!
//! Modules, bottom up:
//!
//! - [`tensor`]: dense `f64` tensors, reverse-mode differentiation, Adam.
//! - [`embed`]: series containers, Hankel embedding, patching, windows.
//! - [`model`]: configuration, parameters and the forward pass.
//! - [`lorenz`]: the coupled Lorenz benchmark generator.
//! - [`pipeline`]: normalization, training, evaluation, baselines,
//!   fine-tuning.
//! - [`io`] and [`cli`]: file formats and the command-line tool.

pub mod cli;
pub mod embed;
pub mod error;
pub mod io;
pub mod lorenz;
pub mod model;
pub mod pipeline;
pub mod tensor;

pub use error::{Error, Result};

#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/delay-embedding.md")]
    mod delay_embedding {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/lorenz.md")]
    mod lorenz {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
