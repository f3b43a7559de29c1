//! Uncertainty-guided progressive pseudo-label refinery.
//!
//! Pseudo labels produced by k-means on a shifted target domain are scored by
//! the KL divergence between a cosine centroid classifier and a smoothed
//! one-hot distribution, filtered by a self-paced threshold that admits a
//! growing fraction of samples, and used to refine a linear embedding by
//! alternating sample selection with gradient steps.

pub mod cli;
pub mod clusterer;
pub mod embedder;
pub mod error;
pub mod evalkit;
pub mod io;
pub mod matrix;
pub mod refinery;
pub mod selector;
pub mod synthgen;
pub mod uncertainty;

pub use error::{Error, Result};
pub use matrix::Matrix;
