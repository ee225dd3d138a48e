//! Deterministic simulator for federated adversarial learning.
//!
//! The library is organised as a stack: [`core_math`] supplies vectors,
//! projections and keyed RNG streams; [`models`] the differentiable
//! predictors and their smoothness constants; [`adversary`] projected
//! gradient attacks; [`smoothing`] the three local update rules;
//! [`data`] synthetic task generation and client partitioning;
//! [`federation`] the server loop and aggregation rules; and [`metrics`]
//! the measurement side (generalization gap, stability, heterogeneity,
//! bound scores).

pub mod adversary;
pub mod core_math;
pub mod data;
pub mod error;
pub mod federation;
pub mod metrics;
pub mod models;
pub mod smoothing;

pub use error::{FalError, Result};
