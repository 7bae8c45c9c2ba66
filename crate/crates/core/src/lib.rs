//! Correlated-noise differentially private training with previous-step noise
//! cancellation.
//!
//! The crate covers the strategy-matrix algebra (`matrix`), sensitivity under
//! min-separated participation (`sensitivity`), RMSE/MaxSE analysis
//! (`metrics`), a zero-memory correlated noise generator (`noise`), Gaussian
//! noise calibration (`calibration`) and a small private trainer (`trainer`).

pub mod matrix;
pub mod numeric;
pub mod sensitivity;
pub mod noise;
pub mod calibration;
pub mod metrics;
pub mod trainer;
