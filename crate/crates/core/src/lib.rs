//! Joint estimation of battery equivalent-circuit states and
//! operating-condition dependent circuit parameters.
//!
//! The circuit parameters of a first-order RC battery model (inverse
//! capacity, RC-pair dynamics, series resistance) are modelled as Gaussian
//! processes over state of charge, applied current and lifetime. The GPs are
//! given an exact state-space representation on a spatial grid and estimated
//! jointly with the battery states by an extended Kalman filter, followed by
//! Rauch-Tung-Striebel smoothing over lifetime. Kernel and noise
//! hyperparameters are fitted by minimising the recursively accumulated
//! negative log marginal likelihood.
//!
//! The crate is `no_std` (with `alloc`), so the estimator can run on
//! embedded targets; file formats, CSV ingestion and the command-line
//! driver live in the companion `gpecm` crate.
//!
//! Module map:
//!
//! - [`kernels`]: covariance functions and their discrete-time transitions
//! - [`field`]: grid-discretised GPs, off-grid prediction, batch-GP oracles
//! - [`battery`]: electro-thermal circuit model, discretisation, Jacobians
//! - [`filter`]: joint EKF over segments, likelihood recursion, smoother
//! - [`hyperopt`]: marginal-likelihood hyperparameter estimation
//! - [`sim`]: ground-truth simulation for recovery and ageing studies
//! - [`pchip`]: shape-preserving cubic interpolation used by OCV tables

#![no_std]
#![warn(missing_debug_implementations)]

extern crate alloc;

use alloc::string::String;

pub mod battery;
pub mod field;
pub mod filter;
pub mod hyperopt;
pub mod kernels;
mod linalg;
pub mod pchip;
pub mod sim;

pub use battery::{BatteryState, EcmParams, OcvCurve, ParamEstimate, ThermalParams};
pub use field::{GpField, Grid};
pub use filter::{CycleSegment, JointState, ModelSpec, SmoothedPosterior};
pub use hyperopt::HyperParams;

/// Errors produced by estimator operations.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Kernel inputs do not carry the dimensions the parameters declare.
    #[error("operating-point dimensions do not match kernel parameters")]
    DimMismatch,
    /// A quantity that must be strictly positive was not.
    #[error("{0} must be strictly positive")]
    NonPositive(&'static str),
    /// A quantity that must be nonnegative was negative.
    #[error("{0} must not be negative")]
    Negative(&'static str),
    /// A matrix factorisation or solve failed.
    #[error("numerical conditioning failure in {0}")]
    Conditioning(&'static str),
    /// Input data violates a structural precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),
    /// Failure attributable to one lifetime segment.
    #[error("segment {index}: {source}")]
    Segment {
        index: usize,
        #[source]
        source: alloc::boxed::Box<Error>,
    },
}

impl Error {
    pub(crate) fn in_segment(self, index: usize) -> Error {
        Error::Segment {
            index,
            source: alloc::boxed::Box::new(self),
        }
    }
}

pub type Result<T> = core::result::Result<T, Error>;

/// `n` evenly spaced values from `a` to `b` inclusive.
pub fn linspace(a: f64, b: f64, n: usize) -> alloc::vec::Vec<f64> {
    assert!(n >= 2, "linspace needs at least two points");
    let h = (b - a) / (n - 1) as f64;
    (0..n).map(|k| a + h * k as f64).collect()
}
