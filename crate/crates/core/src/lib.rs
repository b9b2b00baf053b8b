//! Video person re-identification toolkit.
//!
//! A single-stream 2D-convolution pipeline: frames are embedded by a residual
//! (or tiny) encoder, aggregated per clip with temporal attention, passed through
//! a BN neck and a bias-free classifier, and trained with a composite of
//! label-smoothed identity loss, ranked list loss, center loss and an
//! erasing-attention term. Evaluation averages clip features into video
//! features and reports CMC / mAP.

pub mod checkpoint;
pub mod config;
pub mod datasets;
pub mod error;
pub mod evalkit;
pub mod losses;
pub mod model;
pub mod optim;
pub mod seed;
pub mod trainer;
pub mod transforms;

pub use candle_core;
pub use error::{Error, Result};
