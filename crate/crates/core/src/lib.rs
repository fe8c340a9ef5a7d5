//! Split-network adversarial training with feature-space robustness adapters.

pub mod adapter;
pub mod attacks;
pub mod backbone;
pub mod datasets;
pub mod error;
pub mod metrics;
pub mod numcore;
pub mod trainer;

pub use error::{Result, RfaError};
