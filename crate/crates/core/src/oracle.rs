//! Centralized reference solver for quadratic costs with affine humans.
//!
//! Substituting `y = d + S x` turns the problem into a strictly convex QP
//!
//! ```text
//! min ½ xᵀ H x + gᵀ x + const   s.t.   G_c x + h_c ≤ 0
//! ```
//!
//! which is solved exactly by enumerating active sets. The solver shares no
//! code with the gradient flow it is used to validate.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::dynamics::{lagrangian_gradient_x, SystemState};
use crate::error::{Error, Result};
use crate::human::ResponseFamily;
use crate::model::Scenario;
use crate::reformulation::{block_sum, certificate_from_slack, DecoupledConstraint};
use crate::scalar::{lit, wide, Scalar};

/// Largest constraint count accepted by the active-set enumeration.
pub const MAX_ENUMERATED_ROWS: usize = 12;

#[derive(Debug, Clone)]
pub struct ReducedProgram<T: Scalar> {
    pub h: DMatrix<T>,
    pub g: DVector<T>,
    pub constant: T,
    pub g_c: DMatrix<T>,
    pub h_c: DVector<T>,
    /// Per human: `(S_k, d_k)` with `y_k = d_k + S_k x`.
    pub responses: Vec<(DMatrix<T>, DVector<T>)>,
}

impl<T: Scalar> ReducedProgram<T> {
    pub fn objective(&self, x: &DVector<T>) -> T {
        lit::<T>(0.5) * x.dot(&(&self.h * x)) + self.g.dot(x) + self.constant
    }

    pub fn constraint(&self, x: &DVector<T>) -> DVector<T> {
        &self.g_c * x + &self.h_c
    }

    pub fn responses_at(&self, x: &DVector<T>) -> DVector<T> {
        let total: usize = self.responses.iter().map(|(_, d)| d.len()).sum();
        let mut y = DVector::zeros(total);
        let mut off = 0;
        for (s, d) in &self.responses {
            y.rows_mut(off, d.len()).copy_from(&(d + s * x));
            off += d.len();
        }
        y
    }
}

/// Expands the scenario into a [`ReducedProgram`] using the true (settled)
/// human parameters.
pub fn reduce<T: Scalar>(scenario: &Scenario<T>) -> Result<ReducedProgram<T>> {
    let dims = scenario.dimensions();
    let two = lit::<T>(2.0);
    let n = dims.total_x;
    let mut h = DMatrix::zeros(n, n);
    let mut g = DVector::zeros(n);
    let mut constant = T::zero();
    let mut g_c = DMatrix::zeros(dims.rows, n);
    let mut h_c = scenario.offset().clone();
    let quadratic = |node: usize| {
        scenario.cost(node).as_quadratic().map(|q| q.weight().clone()).ok_or_else(|| {
            Error::OracleUnsupported(format!(
                "cost of `{}` is not quadratic",
                scenario.topology().id_at(node)
            ))
        })
    };

    for i in 0..dims.m {
        let w = quadratic(i)?;
        let r = dims.x_range(i);
        h.view_mut((r.start, r.start), w.shape()).copy_from(&(w * two));
        g_c.view_mut((0, r.start), (dims.rows, r.len())).copy_from(scenario.a_block(i));
    }

    let mut responses = Vec::with_capacity(dims.h);
    for k in 0..dims.h {
        let model = scenario.human_model(k);
        if model.family() != ResponseFamily::Affine {
            return Err(Error::OracleUnsupported(format!(
                "human `{}` does not use the affine response family",
                model.human_id()
            )));
        }
        let gamma = quadratic(dims.m + k)?;
        let d = model.base().clone();
        let mut s = DMatrix::zeros(d.len(), n);
        for (&j, gain) in scenario.human_neighbors(k).iter().zip(model.gains()) {
            let r = dims.x_range(j);
            s.view_mut((0, r.start), gain.shape()).copy_from(&(gain * model.attitude()));
        }
        let gs = &gamma * &s;
        h += s.tr_mul(&gs) * two;
        g += gs.tr_mul(&d) * two;
        constant += d.dot(&(&gamma * &d));
        let b = scenario.b_block(k);
        g_c += b * &s;
        h_c += b * &d;
        responses.push((s, d));
    }
    Ok(ReducedProgram {
        h,
        g,
        constant,
        g_c,
        h_c,
        responses,
    })
}

fn accept_tol<T: Scalar>() -> T {
    lit::<T>(1e-9).max(T::default_epsilon() * lit(1e3))
}

/// Solves `min ½ xᵀ H x + gᵀ x  s.t.  G x + h ≤ 0` for `H ≻ 0` by active-set
/// enumeration. Returns `(x, μ)`.
pub fn solve_qp<T: Scalar>(
    h: &DMatrix<T>,
    g: &DVector<T>,
    gm: &DMatrix<T>,
    hv: &DVector<T>,
) -> Result<(DVector<T>, DVector<T>)> {
    let n = h.nrows();
    let r = gm.nrows();
    if r > MAX_ENUMERATED_ROWS {
        return Err(Error::EnumerationBound {
            rows: r,
            max: MAX_ENUMERATED_ROWS,
        });
    }
    let tol = accept_tol::<T>();
    let feas_tol = tol * (T::one() + hv.amax());
    // Visit smaller active sets first; under strict convexity at most one
    // primal point is accepted, so this only fixes which multiplier
    // representation is returned in degenerate cases.
    let mut masks: Vec<u32> = (0..1u32 << r).collect();
    masks.sort_by_key(|m| (m.count_ones(), *m));
    for mask in masks {
        let active: Vec<usize> = (0..r).filter(|&j| mask & (1 << j) != 0).collect();
        let a = active.len();
        let mut kkt = DMatrix::zeros(n + a, n + a);
        let mut rhs = DVector::zeros(n + a);
        kkt.view_mut((0, 0), (n, n)).copy_from(h);
        rhs.rows_mut(0, n).copy_from(&(-g));
        for (p, &j) in active.iter().enumerate() {
            let row = gm.row(j);
            kkt.view_mut((n + p, 0), (1, n)).copy_from(&row);
            kkt.view_mut((0, n + p), (n, 1)).copy_from(&row.transpose());
            rhs[n + p] = -hv[j];
        }
        let Some(sol) = kkt.clone().lu().solve(&rhs) else {
            continue;
        };
        if !sol.iter().all(|v| v.is_finite()) || (&kkt * &sol - &rhs).amax() > feas_tol {
            continue;
        }
        let x = sol.rows(0, n).into_owned();
        let slack = gm * &x + hv;
        let inactive_ok = (0..r)
            .filter(|j| mask & (1 << j) == 0)
            .all(|j| slack[j] <= feas_tol);
        let dual_ok = (0..a).all(|p| sol[n + p] >= -tol);
        if inactive_ok && dual_ok {
            let mut mu = DVector::zeros(r);
            for (p, &j) in active.iter().enumerate() {
                mu[j] = sol[n + p].max(T::zero());
            }
            return Ok((x, mu));
        }
    }
    Err(Error::Infeasible(
        "no active set satisfies the optimality conditions".into(),
    ))
}

#[derive(Debug, Clone)]
pub struct CentralSolution<T: Scalar> {
    pub x: DVector<T>,
    pub y: DVector<T>,
    pub mu: DVector<T>,
    pub value: T,
}

/// Global optimum `(x*, y*, μ*, value)` of the coupled problem.
pub fn solve_centralized<T: Scalar>(
    scenario: &Scenario<T>,
) -> Result<CentralSolution<T>> {
    let rp = reduce(scenario)?;
    if rp.g_c.nrows() > MAX_ENUMERATED_ROWS {
        return Err(Error::EnumerationBound {
            rows: rp.g_c.nrows(),
            max: MAX_ENUMERATED_ROWS,
        });
    }
    let (x, mu) = solve_qp(&rp.h, &rp.g, &rp.g_c, &rp.h_c)?;
    let y = rp.responses_at(&x);
    let value = scenario.objective(&x, &y)?;
    Ok(CentralSolution { x, y, mu, value })
}

/// Verifies a strictly feasible point exists: `G_c x + h_c + ε ≤ 0` for a
/// margin `ε = 1e-6 (1 + ‖h_c‖∞)`.
pub fn check_slater<T: Scalar>(scenario: &Scenario<T>) -> Result<()> {
    let rp = reduce(scenario)?;
    let n = rp.h.nrows();
    let eps = lit::<T>(1e-6) * (T::one() + rp.h_c.amax());
    let shifted = rp.h_c.add_scalar(eps);
    match solve_qp(&DMatrix::identity(n, n), &DVector::zeros(n), &rp.g_c, &shifted) {
        Ok(_) => Ok(()),
        Err(Error::Infeasible(_)) => Err(Error::SlaterViolated(format!(
            "no point satisfies the coupled constraint with margin {:e}",
            wide(eps)
        ))),
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KktResidual<T> {
    /// `max(‖∂L/∂x‖∞, ‖L̄λ‖∞)`.
    pub stationarity: T,
    /// Largest positive entry of the decoupled residual, or 0.
    pub primal: T,
    pub dual_min: T,
    /// `|λᵀ r|` with `r` the decoupled residual.
    pub comp_slack: T,
}

impl<T: Scalar> KktResidual<T> {
    pub fn max(&self) -> T {
        self.stationarity
            .max(self.primal)
            .max((-self.dual_min).max(T::zero()))
            .max(self.comp_slack)
    }
}

pub fn kkt_residual<T: Scalar>(
    scenario: &Scenario<T>,
    dc: &DecoupledConstraint<T>,
    state: &SystemState<T>,
) -> Result<KktResidual<T>> {
    let grad = lagrangian_gradient_x(scenario, dc, state)?;
    let consensus = dc.l_bar() * &state.lambda;
    let y = scenario.responses(&state.x, state.t)?;
    let residual = crate::reformulation::decoupled_residual(dc, &state.x, &y, &state.z)?;
    let amax = |v: &DVector<T>| if v.is_empty() { T::zero() } else { v.amax() };
    Ok(KktResidual {
        stationarity: amax(&grad).max(amax(&consensus)),
        primal: residual.max().max(T::zero()),
        dual_min: state.lambda.min(),
        comp_slack: state.lambda.dot(&residual).abs(),
    })
}

/// Lifts a centralized optimum to a saddle point of the decoupled
/// Lagrangian: `λ = 1 ⊗ μ*` and `z` from a certificate whose slack is
/// zero on rows with `μ* > 0` and sits in the first agent's block.
pub fn lift_saddle<T: Scalar>(
    scenario: &Scenario<T>,
    dc: &DecoupledConstraint<T>,
    solution: &CentralSolution<T>,
) -> Result<SystemState<T>> {
    let dims = scenario.dimensions();
    let r = dims.rows;
    let nodes = dims.nodes();
    let blocks = dc.stacked(&solution.x, &solution.y)?;
    let coupled = block_sum(&blocks, r);
    let mut slack = DVector::zeros(r * nodes);
    for j in 0..r {
        if solution.mu[j] <= T::zero() {
            slack[j] = (-coupled[j]).max(T::zero());
        }
    }
    let z = certificate_from_slack(dc, &blocks, &slack)?;
    let mut lambda = DVector::zeros(r * nodes);
    for v in 0..nodes {
        lambda.rows_mut(v * r, r).copy_from(&solution.mu);
    }
    Ok(SystemState {
        x: solution.x.clone(),
        z,
        lambda,
        t: T::zero(),
    })
}
