//! Hypothetical-estimand treatment effects for recurrent events when
//! patients switch treatment.
//!
//! The crate provides counting-process data handling, Poisson / LWYY and
//! negative-binomial estimators (weighted and unweighted), inverse
//! probability of switching weights from pooled logistic regression,
//! percentile bootstrap inference, a trial simulator and a Monte Carlo study
//! driver.
//!
//! The estimating-equation code is generic over [`scalar::Real`]; the
//! aliases below fix the scalar type to `f64`.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod data_model;
pub mod error;
pub mod estimators;
pub mod inference;
pub mod io;
pub mod ipw;
pub mod linalg;
pub mod nb_models;
pub mod scalar;
pub mod simulation;
pub mod study;

pub use data_model::{
    expand_counting_process, locf_impute, summarize, DataView, DatasetSummary, Subject, TvSeries,
};
pub use error::{Error, Result};
pub use ipw::WeightSeries;

/// Counting-process row in double precision.
pub type Row = data_model::CountingProcessRow<f64>;
/// Model fit in double precision.
pub type Fit = estimators::FitResult<f64>;
/// Covariance matrix in double precision.
pub type Mat = linalg::Matrix<f64>;
/// Breslow baseline in double precision.
pub type Baseline = estimators::BaselineEstimate<f64>;
