//! Density-weighted average derivative estimation with Edgeworth-corrected inference.
// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dwad;
pub mod dgp;
pub mod edgeworth;
pub mod error;
pub mod kernel;
pub mod normal;
pub mod par;
pub mod quadrature;
pub mod rng;
pub mod simlab;
pub mod summation;

pub use error::{Error, ErrorCategory, Result};
pub use kernel::{verify_moments, Kernel, MomentReport, MultiIndex};
pub use dwad::{estimate, DwadFit, IntervalEstimate, Sample, VarianceKind};
