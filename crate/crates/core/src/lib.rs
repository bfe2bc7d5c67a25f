//! Standard Model of white matter fitting with coordinate networks.
//!
//! The crate contains the signal model ([`forward`]), the real SH machinery ([`sh`]),
//! a Fourier-feature coordinate network with hand-written reverse-mode gradients ([`inr`]),
//! the training loop ([`train`]), a voxelwise Levenberg–Marquardt baseline ([`nlls`]),
//! synthetic phantoms ([`phantom`]), gradient non-uniformity correction ([`gradnl`]),
//! scoring/upsampling ([`metrics`]) and the on-disk formats ([`io`]).

pub mod error;
pub mod forward;
pub mod gradnl;
pub mod inr;
pub mod io;
pub mod metrics;
pub mod nlls;
pub mod phantom;
pub mod sh;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
