//! Music grounding by short video.
//!
//! Given a query video and a collection of music tracks, the model scores how
//! well each track fits the video and localises the music moment that best
//! serves as its background music. The crate bundles a small reverse-mode
//! autodiff engine, the transformer blocks the network is built from, the
//! network itself, its losses, the evaluation protocol, data interchange,
//! and a deterministic training harness.

// `!(x > lo)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Index loops mirror the maths in the kernels and reference implementations.
#![allow(clippy::needless_range_loop)]

pub mod autodiff;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod train;

pub use error::{Error, ErrorKind, Result, TensorError};
