//! Two-stage clustering of large collections of noisily sampled time series.
//!
//! Stage 1 filters every series onto a cubic B-spline system by least squares
//! ([`basis`]). Stage 2 clusters the coefficient vectors with trimmed k-means
//! ([`tclust`]), allocates every series to its nearest mean, and picks the
//! number of clusters with a slope-calibrated penalty ([`selection`]).
//! [`mixtures`] holds the Gaussian mixture machinery the allocation rules come
//! from, [`evalsim`] the simulation harness and adjusted Rand index, and
//! [`pipeline`] the volume I/O and end-to-end driver used by the CLI.

pub mod basis;
pub mod cli;
pub mod error;
pub mod evalsim;
pub mod mixtures;
pub mod numeric;
pub mod pipeline;
pub mod rng;
pub mod selection;
pub mod tclust;

pub use error::{Error, Result};
