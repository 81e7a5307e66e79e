//! Low-rank compression of convolutional networks.
//!
//! Convolutions are factorized with Tucker-2 (two 1×1 convolutions around a
//! small D×D core), fully-connected layers with truncated SVD. Ranks come from
//! empirical variational-Bayes matrix factorization on the input-channel
//! unfolding, with the output-channel rank following the channel ratio.
//! Factorized models are trained at full rank with an orthogonality penalty on
//! the factor matrices, truncated, then retrained.

pub mod conv_exec;
pub mod dataset;
pub mod decomp;
pub mod error;
pub mod io;
pub mod metrics;
pub mod rank_select;
pub mod regularizer;
pub mod svd;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Matrix, Tensor};
