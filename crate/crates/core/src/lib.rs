//! Identity-preserving image-to-image transformation.
//!
//! A from-scratch GAN whose generator links encoder and decoder feature
//! maps through windowed cross-attention ([`cnc`]) and modulates decoder
//! batch normalization with the identity feature ([`aim`]), together with
//! the tensor/autodiff substrate, a procedural fine-grained dataset, and
//! recognition-oriented evaluation protocols.

pub mod aim;
pub mod autodiff;
pub mod checkpoint;
pub mod cnc;
pub mod config;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod networks;
pub mod optim;
pub mod params;
pub mod synthdata;
pub mod tensor;
pub mod training;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use tensor::{DType, Real, Tensor};
