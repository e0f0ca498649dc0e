//! Companion-matrix state-space models for time series.
//!
//! Each SSM stores its state matrix as a shift plus a free last column, so a
//! state update costs O(d). Convolution filters are built either by O(ℓd)
//! powering or spectrally in O(ℓ log ℓ + d log d), and closed-loop forecasts
//! roll out as powers of `A + BK`.

pub mod bench;
pub mod companion;
pub mod constructions;
pub mod data;
pub mod error;
pub mod exec;
pub mod filter;
pub mod model;
pub mod spectral;
pub mod train;
pub mod verify;

pub use companion::{normalize_stability, CompanionMatrix, Ssm, StepOutput};
pub use data::Channels;
pub use error::{Result, SsmError};
pub use exec::Execution;
pub use filter::{
    apply_filter, c_tilde, closed_loop_rollout, fast_closed_loop_rollout, fast_output_filter, last_state,
    naive_output_filter, FilterCache, FilterPlan,
};
pub use model::{build_forecast_network, MultiSsmLayer, Network, NetworkConfig};
