//! Partial-to-full non-rigid shape correspondence by direct feature matching.
//!
//! The pipeline computes a soft correspondence from feature similarity
//! (cosine similarity + temperature softmax) and scores it with a Gromov
//! distortion loss plus a spectral regularizer, never passing features
//! through a least-squares functional-map layer. The functional-map layer is
//! still provided, together with the decomposition of its output into an
//! ideal map and a partiality error term.

pub mod cli;
pub mod descriptors;
pub mod error;
pub mod eval;
pub mod fmaps;
pub mod geodesics;
pub mod losses;
pub mod matching;
pub mod mesh;
pub mod optimize;
pub mod partialgen;
pub mod spectral;
pub mod store;

pub use error::{Error, Result};
