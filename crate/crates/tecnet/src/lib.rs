//! Global ionospheric TEC map forecasting with convolutional recurrent
//! neural networks.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: deterministic reverse-mode autodiff engine (convolutions,
//!   elementwise math, reductions, Gaussian blur, Adam, gradient oracle);
//! - [`cells`]: convolutional LSTM / GRU recurrent units;
//! - [`arch`]: the three forecasting networks;
//! - [`forecast`]: direct and residual rollout plus the periodic baseline;
//! - [`data`]: map ingestion, preprocessing, synthetic generation, dataset
//!   files;
//! - [`train`]: loss, optimization loop, multi-run statistics, checkpoints;
//! - [`metrics`]: the RMS metric family and report export.

pub mod tensor;

pub mod arch;
pub mod cells;
pub mod data;
pub mod forecast;
pub mod metrics;
pub mod train;
