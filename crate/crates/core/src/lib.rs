//! Conditional variable screening with deep ReLU networks.
//!
//! For a response `Y`, high-dimensional predictors `X` driven by latent
//! factors, and a candidate coordinate `X_j`, the crate tests whether `X_j`
//! carries information about `Y` beyond the factors. The workflow fits a
//! network regression on diversified factors and `X_j`, smooths its partial
//! derivative in `X_j` with a quartic kernel, centres the fit along an
//! estimated score function, and evaluates moment-generating-function test
//! statistics (fixed-t, sup and square variants).

pub mod error;
pub mod data;
pub mod debias;
pub mod factor;
pub mod nn;
pub mod pipeline;
pub mod score;
pub mod seed;
pub mod simulation;
pub mod smoothing;
pub mod stats;

pub use error::{Result, ScreenError};
