//! Bijective GRU layers and folded recurrent networks for video prediction.
//!
//! The crate is self-contained: a small tensor type with reverse-mode
//! differentiation ([`tensor`]), the spatial operations the topology needs
//! ([`nn_ops`]), bGRU cells ([`cells`]), the folded stack ([`folded`]),
//! training ([`training`]), synthetic data ([`data`]), evaluation metrics
//! ([`metrics`]) and the text configuration format ([`config`]).

mod binio;
pub mod cells;
pub mod config;
pub mod data;
pub mod error;
pub mod folded;
pub mod metrics;
pub mod nn_ops;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Rng, Tape, Tensor, Var};
