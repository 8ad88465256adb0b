//! Least-volume autoencoders and latent conditional Sinkhorn GANs for
//! Bayesian inverse problems, with the Kraichnan–Orszag and two-phase
//! reservoir benchmarks and k-NN entropy diagnostics.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod bench;
pub mod csgan;
pub mod error;
pub mod io;
pub mod kosys;
pub mod ksgent;
pub mod lvae;
pub mod nn;
pub mod normalize;
pub mod ot;
pub mod resim;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
