//! Anisotropic bond percolation on `Z^d x Z^s`.
//!
//! `Z^d` edges open with probability `p`, `Z^s` edges with probability `q`.
//! The crate samples such configurations on finite boxes, labels their
//! clusters, estimates the critical curve `q_c(p)`, and runs the
//! layer-hopping exploration that couples the origin's cluster to
//! homogeneous percolation on `Z^d` at the larger parameter
//! `r = p + qbar p (1 - p)`.

pub mod error;
pub mod estimators;
pub mod lattice;
pub mod clusters;
pub mod coupling;
pub mod exact;
pub mod sampling;
pub mod stats;

pub use error::{Error, Result};
