//! Guiding frozen segmentation networks with pixel hints and text queries.
//!
//! A backbone is split into a head and a tail at a named layer. A guiding
//! block between the two rescales the head's activations per row, column and
//! channel. Its parameters come either from gradient descent on a handful of
//! user-labelled pixels ([`backprop`]) or from a small recurrent text encoder
//! trained on automatically generated queries ([`language`], [`trainer`]).

pub mod backbone;
pub mod backprop;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod guiding;
pub mod language;
pub mod metrics;
pub mod nn;
pub mod query;
pub mod trainer;

pub use error::{Error, Result};
