//! Diversifying regularization (DR) for layer-wise and discriminative training.
//!
//! DR is a side-information penalty: for pairs of examples carrying different
//! class labels it rewards hidden representations that are far apart. This
//! crate provides it for three model families:
//!
//! * binary RBMs trained with CD-k, stacked greedily into a DBN ([`rbm`], [`dbn`]),
//!   where DR is the Hellinger divergence between factorized hidden posteriors;
//! * fully connected sigmoid networks ([`dnn`]), where DR is a squared Euclidean
//!   distance between hidden activations at every hidden layer;
//! * variational autoencoders ([`vae`]), where DR acts on reconstructions.
//!
//! Every analytic gradient has a finite-difference or enumeration oracle
//! ([`gradcheck`], [`rbm::exact`]).

pub mod checkpoint;
pub mod config;
pub mod curve;
pub mod data;
pub mod dbn;
pub mod divergence;
pub mod dnn;
mod error;
pub mod experiment;
pub mod gradcheck;
pub mod numerics;
pub mod parallel;
pub mod rbm;
pub mod sideinfo;
pub mod vae;

pub use error::{Error, Result};
pub use numerics::{DenseMatrix, DenseVector, RngState};
