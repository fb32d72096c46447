//! Gather-and-distribute detection neck built on a small NCHW kernel set.
//!
//! Model code is written once against [`autodiff::Exec`] and runs eagerly,
//! on a gradient tape, on the `f64` reference backend, or through the
//! shape-only FLOP counter in [`analysis`].

pub mod analysis;
pub mod autodiff;
pub mod config;
pub mod error;
pub mod gd_branches;
pub mod gradcheck;
pub mod inject_laf;
pub mod layers;
pub mod neck;
pub mod params;
pub mod reference;
pub mod repconv;
pub mod tensor;
pub mod weights;

pub use error::{Error, Result, WeightFormatError};
pub use params::{ParamSpecs, ParamStore};
pub use tensor::{Activation, ConvSpec, Dims, Tensor};
