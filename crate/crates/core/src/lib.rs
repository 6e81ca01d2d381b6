//! Channel estimation toolkit for LIS-assisted mm-Wave massive MIMO downlink.
//!
//! The crate covers the whole pipeline:
//!
//! * [`channel`]: Saleh-Valenzuela style geometric channels, the BS-LIS
//!   channel, the cascaded channel `G_k = H diag(h_A,k)` and LIS reflect states.
//! * [`pilots`]: orthogonal pilot matrices and the two-phase pilot protocol
//!   (LIS off, then per-element or all-on), with pilot corruption and
//!   imperfect switching.
//! * [`ls`]: closed-form least-squares estimators for the direct and
//!   cascaded channels.
//! * [`dataset`]: training-set generation, input tensors, label vectors and
//!   the binary dataset container.
//! * [`nn`]: a small CPU convolutional network (ChannelNet) with SGD+momentum
//!   training, early stopping and checkpoints.
//! * [`eval`]: NMSE and the Monte Carlo robustness sweeps.

pub mod channel;
pub mod config;
pub mod dataset;
mod error;
pub mod eval;
pub mod ls;
pub mod nn;
pub mod pilots;
pub mod rng;

pub use error::{Error, Result};

/// Complex baseband sample type used throughout.
pub type C64 = num_complex::Complex64;
/// Dense complex column vector.
pub type CVector = nalgebra::DVector<C64>;
/// Dense complex matrix.
pub type CMatrix = nalgebra::DMatrix<C64>;
