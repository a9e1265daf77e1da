use nalgebra::DVector;
use serde::Serialize;

use crate::dynamics::{Reference, SystemState};
use crate::error::{Error, Result};
use crate::model::Scenario;
use crate::scalar::{lit, Scalar};

fn same_len<T: Scalar>(what: &str, a: &DVector<T>, b: &DVector<T>) -> Result<()> {
    if a.len() == b.len() {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            id: what.into(),
            detail: format!("expected length {}, got {}", b.len(), a.len()),
        })
    }
}

/// `W = Σ‖x_i - x_i*‖² + Σ‖y_k - y_k*‖²`, with `y` recomputed at the state.
pub fn deviation_w<T: Scalar>(
    scenario: &Scenario<T>,
    state: &SystemState<T>,
    reference: &Reference<T>,
) -> Result<T> {
    same_len("reference x", &reference.x, &state.x)?;
    let y = scenario.responses(&state.x, state.t)?;
    same_len("reference y", &reference.y, &y)?;
    Ok((&state.x - &reference.x).norm_squared() + (y - &reference.y).norm_squared())
}

/// `V = ½‖(x, z) - (x†, z†)‖² + ½‖λ - λ†‖²`.
pub fn lyapunov_v<T: Scalar>(state: &SystemState<T>, saddle: &SystemState<T>) -> Result<T> {
    same_len("saddle x", &saddle.x, &state.x)?;
    same_len("saddle z", &saddle.z, &state.z)?;
    same_len("saddle λ", &saddle.lambda, &state.lambda)?;
    let half = lit::<T>(0.5);
    Ok(half
        * ((&state.x - &saddle.x).norm_squared()
            + (&state.z - &saddle.z).norm_squared()
            + (&state.lambda - &saddle.lambda).norm_squared()))
}

/// Workload as the 1-norm of every agent's state.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WorkloadShare<T> {
    /// `(id, ‖state‖₁)` in canonical order.
    pub by_agent: Vec<(String, T)>,
    pub autonomous_total: T,
    pub human_total: T,
}

pub fn workload_share<T: Scalar>(
    scenario: &Scenario<T>,
    state: &SystemState<T>,
) -> Result<WorkloadShare<T>> {
    let dims = scenario.dimensions();
    let topo = scenario.topology();
    let y = scenario.responses(&state.x, state.t)?;
    let l1 = |s: &[T]| s.iter().fold(T::zero(), |acc, v| acc + v.abs());
    let mut by_agent = Vec::with_capacity(dims.nodes());
    let (mut auto, mut hum) = (T::zero(), T::zero());
    for i in 0..dims.m {
        let w = l1(scenario.x_block(&state.x, i));
        auto += w;
        by_agent.push((topo.id_at(i).to_string(), w));
    }
    for k in 0..dims.h {
        let w = l1(scenario.y_block(&y, k));
        hum += w;
        by_agent.push((topo.id_at(dims.m + k).to_string(), w));
    }
    Ok(WorkloadShare {
        by_agent,
        autonomous_total: auto,
        human_total: hum,
    })
}
