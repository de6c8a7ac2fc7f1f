//! Simulation and analysis of stepped wedge cluster randomized trials with
//! continuous-time recruitment.
//!
//! Data are generated under a continuous-time decay correlation, analysed with
//! discrete-time linear mixed models (exchangeable, nested exchangeable,
//! discrete-time decay working structures) and summarised with model-based,
//! CR0 and Mancl-DeRouen sandwich variances.

// `!(x > 0.0)` is used on purpose so that NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod covariance;
pub mod datagen;
pub mod error;
pub mod estimator;
pub mod harness;
pub mod inference;
pub mod io;
pub mod recruitment;
pub mod streams;
pub mod trial;

pub use covariance::{DesignCorrelationParams, Structure, VarianceComponents};
pub use datagen::{Dataset, GenerativeSpec, InterventionEffectSpec, PeriodEffectSpec, Record};
pub use error::{Error, Result};
pub use estimator::{fit_ml, EffectKind, FitOptions, FitResult, WorkingModel};
pub use inference::{EffectInference, VcovKind};
pub use recruitment::{PatternKind, RecruitmentPlan, SizeRule};
pub use trial::{Exposure, TrialDesign};
