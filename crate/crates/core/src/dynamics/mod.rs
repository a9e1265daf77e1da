//! Projected saddle-point flow on the decoupled Lagrangian
//!
//! ```text
//! L(x, z, λ) = F(x) + G(Q(x)) + λᵀ([Ā x; B̄ Q(x)] + L̄ z + C)
//! ẋ = -∂L/∂x,   ż = -L̄ λ,   λ̇ = [∂L/∂λ]⁺_λ
//! ```
//!
//! [`step`] is a projected forward-Euler step; [`integrate`] runs it to
//! convergence. The [`agent`] submodule executes the same update as
//! synchronous per-agent rounds that only exchange neighbor messages.

pub mod agent;
mod integrate;

use nalgebra::{DMatrix, DVector, DVectorView};

pub use integrate::{integrate, Engine, IntegrateOptions, Reference, Termination};

use crate::error::{Error, Result};
use crate::human::{fd_step, ResponseEval};
use crate::model::{CostFunction, Dimensions, Scenario};
use crate::reformulation::DecoupledConstraint;
use crate::scalar::{lit, wide, Scalar};

/// Phase point `(x, z, λ)` at time `t`, stacked in canonical order.
///
/// Human states are never stored; they are recomputed from `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemState<T: Scalar> {
    pub x: DVector<T>,
    pub z: DVector<T>,
    pub lambda: DVector<T>,
    pub t: T,
}

impl<T: Scalar> SystemState<T> {
    pub fn zeros(dims: &Dimensions) -> Self {
        Self {
            x: DVector::zeros(dims.total_x),
            z: DVector::zeros(dims.multiplier_len()),
            lambda: DVector::zeros(dims.multiplier_len()),
            t: T::zero(),
        }
    }

    /// Starting point from the scenario's `initial` section, zeros elsewhere.
    pub fn initial(scenario: &Scenario<T>) -> Result<Self> {
        let dims = scenario.dimensions();
        let mut s = Self::zeros(dims);
        if let Some(init) = scenario.initial() {
            let topo = scenario.topology();
            for (id, v) in &init.x {
                let i = topo.index_of(id)?;
                s.x.rows_mut(dims.x_offsets[i], v.len()).copy_from(v);
            }
            for (id, v) in &init.z {
                let node = topo.index_of(id)?;
                s.z.rows_mut(node * dims.rows, dims.rows).copy_from(v);
            }
            for (id, v) in &init.lambda {
                let node = topo.index_of(id)?;
                s.lambda.rows_mut(node * dims.rows, dims.rows).copy_from(v);
            }
        }
        Ok(s)
    }

    pub fn x_block(&self, dims: &Dimensions, i: usize) -> DVectorView<'_, T> {
        self.x.rows(dims.x_offsets[i], dims.x_range(i).len())
    }

    pub fn z_block(&self, dims: &Dimensions, node: usize) -> DVectorView<'_, T> {
        self.z.rows(node * dims.rows, dims.rows)
    }

    pub fn lambda_block(&self, dims: &Dimensions, node: usize) -> DVectorView<'_, T> {
        self.lambda.rows(node * dims.rows, dims.rows)
    }

    fn check(&self, dims: &Dimensions) -> Result<()> {
        if self.x.len() != dims.total_x
            || self.z.len() != dims.multiplier_len()
            || self.lambda.len() != dims.multiplier_len()
        {
            return Err(Error::DimensionMismatch {
                id: "state".into(),
                detail: format!(
                    "expected x/z/λ lengths {}/{}/{}, got {}/{}/{}",
                    dims.total_x,
                    dims.multiplier_len(),
                    dims.multiplier_len(),
                    self.x.len(),
                    self.z.len(),
                    self.lambda.len()
                ),
            });
        }
        Ok(())
    }

    pub fn max_abs(&self) -> T {
        self.x.amax().max(self.z.amax()).max(self.lambda.amax())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowDerivative<T: Scalar> {
    pub dx: DVector<T>,
    pub dz: DVector<T>,
    pub dlambda: DVector<T>,
}

/// Componentwise `[a]⁺_b`: `a_i` where `b_i > 0`, `max(0, a_i)` where `b_i = 0`.
///
/// Entries of `b` below `-1e-12` are rejected; tiny negative values are
/// treated as zero.
pub fn projection_plus<T: Scalar>(a: &DVector<T>, b: &DVector<T>) -> Result<DVector<T>> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            id: "projection".into(),
            detail: format!("lengths {} and {}", a.len(), b.len()),
        });
    }
    let floor = lit::<T>(-1e-12);
    let mut out = a.clone();
    for (i, (o, &bi)) in out.iter_mut().zip(b.iter()).enumerate() {
        if bi < floor {
            return Err(Error::NegativeMultiplier {
                index: i,
                value: wide(bi),
            });
        }
        if bi <= T::zero() {
            *o = o.max(T::zero());
        }
    }
    Ok(out)
}

/// Cross term a human proxy contributes to each autonomous neighbor's
/// gradient: `J_jᵀ (∇g_k(y_k) + B_kᵀ λ_k)`, in model neighbor order.
pub(crate) fn human_feedback<T: Scalar>(
    cost: &CostFunction<T>,
    b: &DMatrix<T>,
    eval: &ResponseEval<T>,
    lambda_k: DVectorView<'_, T>,
) -> Vec<DVector<T>> {
    let mut e = cost.gradient(eval.y.as_slice());
    e.gemv_tr(T::one(), b, &lambda_k, T::one());
    eval.jacobian.iter().map(|j| j.tr_mul(&e)).collect()
}

/// Quantities shared by the Lagrangian, its gradient and the flow.
pub(crate) struct Evaluation<T: Scalar> {
    pub y: DVector<T>,
    pub humans: Vec<ResponseEval<T>>,
    /// `[Ā x; B̄ Q(x)] + L̄ z + C`.
    pub residual: DVector<T>,
}

pub(crate) fn evaluate<T: Scalar>(
    scenario: &Scenario<T>,
    dc: &DecoupledConstraint<T>,
    state: &SystemState<T>,
) -> Result<Evaluation<T>> {
    let dims = scenario.dimensions();
    state.check(dims)?;
    let humans = scenario.evaluate_humans(&state.x, state.t)?;
    let mut y = DVector::zeros(dims.total_y);
    for (k, e) in humans.iter().enumerate() {
        y.rows_mut(dims.y_offsets[k], e.y.len()).copy_from(&e.y);
    }
    let residual = crate::reformulation::decoupled_residual(dc, &state.x, &y, &state.z)?;
    Ok(Evaluation { y, humans, residual })
}

fn gradient_from<T: Scalar>(
    scenario: &Scenario<T>,
    state: &SystemState<T>,
    ev: &Evaluation<T>,
) -> DVector<T> {
    let dims = scenario.dimensions();
    let mut grad = DVector::zeros(dims.total_x);
    for i in 0..dims.m {
        let mut gi = scenario.cost(i).gradient(scenario.x_block(&state.x, i));
        gi.gemv_tr(T::one(), scenario.a_block(i), &state.lambda_block(dims, i), T::one());
        grad.rows_mut(dims.x_offsets[i], gi.len()).copy_from(&gi);
    }
    for (k, eval) in ev.humans.iter().enumerate() {
        let lam = state.lambda_block(dims, dims.m + k);
        for (&j, fb) in scenario
            .human_neighbors(k)
            .iter()
            .zip(human_feedback(scenario.cost(dims.m + k), scenario.b_block(k), eval, lam))
        {
            let mut block = grad.rows_mut(dims.x_offsets[j], fb.len());
            block += fb;
        }
    }
    grad
}

/// `F(x) + G(Q(x)) + λᵀ([Ā x; B̄ Q(x)] + L̄ z + C)` at the state's time.
pub fn lagrangian<T: Scalar>(
    scenario: &Scenario<T>,
    dc: &DecoupledConstraint<T>,
    state: &SystemState<T>,
) -> Result<T> {
    let ev = evaluate(scenario, dc, state)?;
    Ok(scenario.objective(&state.x, &ev.y)? + state.lambda.dot(&ev.residual))
}

/// Analytic `∂L/∂x`.
pub fn lagrangian_gradient_x<T: Scalar>(
    scenario: &Scenario<T>,
    dc: &DecoupledConstraint<T>,
    state: &SystemState<T>,
) -> Result<DVector<T>> {
    let ev = evaluate(scenario, dc, state)?;
    Ok(gradient_from(scenario, state, &ev))
}

/// Right-hand side of the projected flow.
pub fn flow_rhs<T: Scalar>(
    scenario: &Scenario<T>,
    dc: &DecoupledConstraint<T>,
    state: &SystemState<T>,
) -> Result<FlowDerivative<T>> {
    let ev = evaluate(scenario, dc, state)?;
    let dx = -gradient_from(scenario, state, &ev);
    let dz = -(dc.l_bar() * &state.lambda);
    let dlambda = projection_plus(&ev.residual, &state.lambda)?;
    Ok(FlowDerivative { dx, dz, dlambda })
}

/// One projected forward-Euler step of length `dt`.
///
/// `λ ← max(0, λ + dt·g)` with `g` the unprojected residual at the pre-step
/// state, so the multipliers stay in the nonnegative orthant.
pub fn step<T: Scalar>(
    scenario: &Scenario<T>,
    dc: &DecoupledConstraint<T>,
    state: &SystemState<T>,
    dt: T,
) -> Result<SystemState<T>> {
    if !(dt > T::zero()) {
        return Err(Error::InvalidArgument(format!("step size {dt} must be positive")));
    }
    let ev = evaluate(scenario, dc, state)?;
    let grad = gradient_from(scenario, state, &ev);
    let mut next = state.clone();
    next.x.axpy(-dt, &grad, T::one());
    next.z.gemv(-dt, dc.l_bar(), &state.lambda, T::one());
    next.lambda.axpy(dt, &ev.residual, T::one());
    next.lambda.apply(|l| *l = l.max(T::zero()));
    next.t = state.t + dt;

    let finite = |v: &DVector<T>| v.iter().all(|e| e.is_finite());
    if !(finite(&next.x) && finite(&next.z) && finite(&next.lambda)) {
        let max_abs = [&grad, &ev.residual, &state.x, &state.z, &state.lambda]
            .iter()
            .flat_map(|v| v.iter())
            .fold(0.0f64, |m, e| {
                let a = wide(e.abs());
                if a.is_nan() { f64::INFINITY } else { m.max(a) }
            });
        return Err(Error::Divergence {
            t: wide(state.t),
            max_abs,
        });
    }
    Ok(next)
}

/// Largest relative error between the analytic `∂L/∂x` and central finite
/// differences of [`lagrangian`] (step `1e-6`).
pub fn gradient_check<T: Scalar>(
    scenario: &Scenario<T>,
    dc: &DecoupledConstraint<T>,
    state: &SystemState<T>,
) -> Result<T> {
    let analytic = lagrangian_gradient_x(scenario, dc, state)?;
    let h = fd_step::<T>();
    let two = lit::<T>(2.0);
    let mut worst = T::zero();
    let mut probe = state.clone();
    for c in 0..state.x.len() {
        let orig = probe.x[c];
        probe.x[c] = orig + h;
        let up = lagrangian(scenario, dc, &probe)?;
        probe.x[c] = orig - h;
        let down = lagrangian(scenario, dc, &probe)?;
        probe.x[c] = orig;
        let fd = (up - down) / (two * h);
        let err = (analytic[c] - fd).abs() / analytic[c].abs().max(T::one());
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reformulation::{build_decoupled, SplitPolicy};
    use serde_json::json;

    pub(crate) fn single(c: f64) -> Scenario<f64> {
        Scenario::from_json(
            &json!({
                "agents": [{"id": "a1", "kind": "autonomous", "dim": 1}],
                "costs": {"a1": {"type": "quadratic", "weight": [[1.0]]}},
                "constraint": {"rows": 1, "a_blocks": {"a1": [[1.0]]}, "c": [c]}
            })
            .to_string(),
        )
        .unwrap()
    }

    fn state(x: f64, z: f64, l: f64) -> SystemState<f64> {
        SystemState {
            x: DVector::from_vec(vec![x]),
            z: DVector::from_vec(vec![z]),
            lambda: DVector::from_vec(vec![l]),
            t: 0.0,
        }
    }

    #[test]
    fn projection_examples() {
        let v = |s: &[f64]| DVector::from_column_slice(s);
        assert_eq!(projection_plus(&v(&[-1.0]), &v(&[0.0])).unwrap(), v(&[0.0]));
        assert_eq!(projection_plus(&v(&[-1.0]), &v(&[0.5])).unwrap(), v(&[-1.0]));
        assert_eq!(projection_plus(&v(&[2.0, -3.0]), &v(&[0.0, 1.0])).unwrap(), v(&[2.0, -3.0]));
        assert!(matches!(
            projection_plus(&v(&[1.0]), &v(&[-1e-6])),
            Err(Error::NegativeMultiplier { .. })
        ));
        assert!(projection_plus(&v(&[1.0]), &v(&[-1e-14])).is_ok());
    }

    #[test]
    fn lagrangian_single_agent() {
        let s = single(-1.0);
        let dc = build_decoupled(&s, SplitPolicy::FirstAgent);
        assert_eq!(lagrangian(&s, &dc, &state(2.0, 0.0, 1.0)).unwrap(), 5.0);
        assert_eq!(lagrangian(&s, &dc, &state(2.0, 0.0, 0.0)).unwrap(), 4.0);
    }

    #[test]
    fn step_single_agent() {
        let s = single(-1.0);
        let dc = build_decoupled(&s, SplitPolicy::FirstAgent);
        let next = step(&s, &dc, &state(2.0, 0.0, 1.0), 0.1).unwrap();
        assert!((next.x[0] - 1.5).abs() < 1e-15);
        assert!((next.lambda[0] - 1.1).abs() < 1e-15);
        assert!((next.t - 0.1).abs() < 1e-15);
    }

    #[test]
    fn step_clamps_multiplier() {
        // x = 0, c = -5: residual -5 pushes λ below zero.
        let s = single(-5.0);
        let dc = build_decoupled(&s, SplitPolicy::FirstAgent);
        for dt in [1e-3, 0.5, 10.0] {
            let next = step(&s, &dc, &state(0.0, 0.0, 0.0), dt).unwrap();
            assert_eq!(next.lambda[0], 0.0);
        }
    }

    #[test]
    fn zero_derivative_leaves_state() {
        let s = single(-1.0);
        let dc = build_decoupled(&s, SplitPolicy::FirstAgent);
        let st = state(0.0, 0.0, 0.0);
        let rhs = flow_rhs(&s, &dc, &st).unwrap();
        assert_eq!(rhs.dx[0], 0.0);
        assert_eq!(rhs.dlambda[0], 0.0);
        let next = step(&s, &dc, &st, 0.25).unwrap();
        assert_eq!((next.x.clone(), next.z.clone(), next.lambda.clone()), (st.x, st.z, st.lambda));
        assert_eq!(next.t, 0.25);
    }

    #[test]
    fn divergence_is_reported() {
        let s = single(-1.0);
        let dc = build_decoupled(&s, SplitPolicy::FirstAgent);
        let err = step(&s, &dc, &state(1e300, 0.0, 0.0), 1e10).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }));
        assert!(step(&s, &dc, &state(1.0, 0.0, 0.0), 0.0).is_err());
    }

    #[test]
    fn gradient_check_single() {
        let s = single(-1.0);
        let dc = build_decoupled(&s, SplitPolicy::FirstAgent);
        assert!(gradient_check(&s, &dc, &state(0.3, 0.0, 0.7)).unwrap() <= 1e-8);
    }
}
