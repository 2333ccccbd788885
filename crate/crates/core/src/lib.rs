//! Fast on-line kernel density estimation for active object localization.
//!
//! The crate is organized bottom-up:
//!
//! - [`kernel`]: exact Gaussian KDE, conditional KDE and bandwidth selection.
//! - [`multipole`]: truncated Taylor (multipole) expansions of Gaussian kernel
//!   sums, stochastic filtering over density grids and Gaussian smoothing.
//! - [`clustering`]: context features, k-means, Calinski-Harabasz model
//!   selection and importance clusters.
//! - [`situation_model`]: learned joint location / size models and their
//!   conditioning on workspace detections.
//! - [`search`]: the active localization loop driven by an IOU oracle.
//! - [`harness`]: datasets, synthetic generation, cross-validation and
//!   benchmarking.

pub mod clustering;
pub mod error;
pub mod grid;
pub mod harness;
pub mod kernel;
pub mod multipole;
pub mod rng;
pub mod search;
pub mod situation_model;

pub use error::{Error, Result};
pub use grid::{DensityGrid, GridSpec, SparseDensityGrid};
pub use kernel::{Bandwidth, Point, WeightedSample};
pub use rng::RandomStream;
