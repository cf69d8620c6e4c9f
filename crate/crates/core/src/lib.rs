//! Finite-depth/width ResNet training, its continuous-depth limit, and the
//! particle discretization of the mean-field Wasserstein gradient flow, with
//! the empirical-measure metrics and experiment drivers used to compare them.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod activation;
pub mod dataset;
pub mod discrete;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod measures;
pub mod odeflow;

pub use activation::{ActivationSpec, HomogeneityClass};
pub use dataset::{AffineReadout, Dataset};
pub use discrete::{LossCurve, ParamTensor};
pub use error::{Error, Result};
pub use measures::{EmpiricalMeasure, PathMeasure};
pub use odeflow::{FlowState, ParamPathEnsemble};
