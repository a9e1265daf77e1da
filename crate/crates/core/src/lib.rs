//! Distributed resource allocation for networks of autonomous agents and
//! humans.
//!
//! A globally coupled allocation problem is rewritten with graph-Laplacian
//! auxiliary variables into per-agent constraints, then solved by a
//! projected saddle-point flow that every agent runs using only its
//! neighbors' data. Humans are not controlled; their workload follows a
//! response model of their neighbors and is represented by a virtual proxy.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`).
// `!(a > b)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]


pub mod dynamics;
pub mod error;
pub mod harness;
pub mod human;
pub mod model;
pub mod oracle;
pub mod reformulation;
pub mod scalar;
pub mod topology;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Scenario64 = model::Scenario<f64>;
pub type Scenario32 = model::Scenario<f32>;
pub type SystemState64 = dynamics::SystemState<f64>;
pub type SystemState32 = dynamics::SystemState<f32>;
pub type HumanResponseModel64 = human::HumanResponseModel<f64>;
pub type HumanResponseModel32 = human::HumanResponseModel<f32>;
pub type DecoupledConstraint64 = reformulation::DecoupledConstraint<f64>;
pub type DecoupledConstraint32 = reformulation::DecoupledConstraint<f32>;
