//! Confidence regions for misspecified M-estimators fitted to data collected
//! by adaptive contextual bandits.
//!
//! The estimator solves an augmented, inverse-propensity-weighted estimating
//! equation whose per-round scores are whitened by a plug-in estimate of
//! their conditional variance. The resulting statistic is approximately
//! standard normal, so an ellipsoid around the estimate covers the
//! policy-specific projection target at the nominal rate.
//!
//! ```
//! use maipwm::harness::{parse_config, Experiment};
//!
//! let config = parse_config(r#"
//! horizon = 200
//! reps = 2
//! methods = ["maipwm_external"]
//! scenario = { preset = 1, arms = 2 }
//! policy = { kind = "uniform" }
//! pool = { source = "synthetic", size = 50, dim = 2 }
//! "#)?;
//! let exp = Experiment::prepare(config)?;
//! let rows = exp.run()?;
//! assert_eq!(rows.len(), 2);
//! # Ok::<(), maipwm::Error>(())
//! ```
//!
//! See the guide in `book/` for a walk through each module.

// `!(x > 0.0)` also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod env;
pub mod error;
pub mod harness;
pub mod inference;
pub mod mathkit;
pub mod mestim;
pub mod nuisance;
pub mod policies;
pub mod varest;

pub use error::{Error, Result};

#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/policies.md")]
    mod policies {}
    #[doc = include_str!("../../../book/src/nuisance.md")]
    mod nuisance {}
    #[doc = include_str!("../../../book/src/estimation.md")]
    mod estimation {}
    #[doc = include_str!("../../../book/src/variance.md")]
    mod variance {}
    #[doc = include_str!("../../../book/src/regions.md")]
    mod regions {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
