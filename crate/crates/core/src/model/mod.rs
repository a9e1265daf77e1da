//! Problem instances: costs, the coupling constraint, human models and
//! solver options, plus ingestion from the JSON scenario format.

pub mod document;

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, DVectorView, SymmetricEigen};

pub use document::{
    AgentDoc, AgentKindDoc, AttitudeDoc, ConstraintDoc, CostDoc, FamilyDoc, HumanModelDoc,
    InitialDoc, ScenarioDocument, ScheduleDeltaDoc, ScheduleDoc, SolverDoc,
};

use crate::error::{Error, Result};
use crate::human::{ApproximationSchedule, HumanResponseModel, ResponseEval};
use crate::reformulation::SplitPolicy;
use crate::scalar::{lit, wide, Scalar};
use crate::topology::NetworkTopology;

/// `f(x) = xᵀ W x` with `W` symmetric positive definite.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticCost<T: Scalar> {
    weight: DMatrix<T>,
}

impl<T: Scalar> QuadraticCost<T> {
    /// Validates symmetry and positive definiteness of `weight`.
    pub fn new(id: &str, weight: DMatrix<T>) -> Result<Self> {
        if !weight.is_square() || weight.is_empty() {
            return Err(Error::DimensionMismatch {
                id: id.to_owned(),
                detail: format!("cost weight is {}x{}", weight.nrows(), weight.ncols()),
            });
        }
        if weight.iter().any(|v| !v.is_finite()) {
            return Err(Error::Schema(format!("cost weight of `{id}` has non-finite entries")));
        }
        let asym = (&weight - weight.transpose()).amax();
        let scale = weight.amax().max(T::one());
        if asym > lit::<T>(1e-12) * scale {
            return Err(Error::NotSymmetric {
                id: id.to_owned(),
                asymmetry: wide(asym),
            });
        }
        let min_eig = SymmetricEigen::new(weight.clone()).eigenvalues.min();
        if !(min_eig > lit(1e-10)) {
            return Err(Error::NotPositiveDefinite {
                id: id.to_owned(),
                min_eigenvalue: wide(min_eig),
            });
        }
        Ok(Self { weight })
    }

    pub fn weight(&self) -> &DMatrix<T> {
        &self.weight
    }
}

/// Extension point for convex differentiable costs outside the quadratic family.
pub trait ConvexCost<T: Scalar>: fmt::Debug + Send + Sync {
    fn dim(&self) -> usize;
    fn value(&self, x: &[T]) -> T;
    fn gradient(&self, x: &[T]) -> DVector<T>;
}

#[derive(Debug, Clone)]
pub enum CostFunction<T: Scalar> {
    Quadratic(QuadraticCost<T>),
    Custom(Arc<dyn ConvexCost<T>>),
}

impl<T: Scalar> CostFunction<T> {
    pub fn dim(&self) -> usize {
        match self {
            Self::Quadratic(q) => q.weight.nrows(),
            Self::Custom(c) => c.dim(),
        }
    }

    pub fn value(&self, x: &[T]) -> T {
        match self {
            Self::Quadratic(q) => {
                let v = DVectorView::from_slice(x, x.len());
                v.dot(&(&q.weight * v))
            }
            Self::Custom(c) => c.value(x),
        }
    }

    pub fn gradient(&self, x: &[T]) -> DVector<T> {
        match self {
            Self::Quadratic(q) => {
                let v = DVectorView::from_slice(x, x.len());
                (&q.weight * v) * lit::<T>(2.0)
            }
            Self::Custom(c) => c.gradient(x),
        }
    }

    pub fn as_quadratic(&self) -> Option<&QuadraticCost<T>> {
        match self {
            Self::Quadratic(q) => Some(q),
            Self::Custom(_) => None,
        }
    }
}

/// `Σ A_i x_i + Σ B_k y_k + c ≤ 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingConstraint<T: Scalar> {
    pub a_blocks: BTreeMap<String, DMatrix<T>>,
    pub b_blocks: BTreeMap<String, DMatrix<T>>,
    pub c: DVector<T>,
}

impl<T: Scalar> CouplingConstraint<T> {
    pub fn rows(&self) -> usize {
        self.c.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverOptions {
    pub dt: f64,
    pub tolerance: f64,
    pub max_time: f64,
    pub split_policy: SplitPolicy,
    pub record_stride: usize,
    pub check_slater: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            tolerance: 1e-6,
            max_time: 200.0,
            split_policy: SplitPolicy::FirstAgent,
            record_stride: 100,
            check_slater: false,
        }
    }
}

impl SolverOptions {
    fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Schema(format!("solver option {what}")));
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return bad("dt must be positive");
        }
        if !(self.tolerance.is_finite() && self.tolerance > 0.0) {
            return bad("tolerance must be positive");
        }
        if !(self.max_time.is_finite() && self.max_time > 0.0) {
            return bad("max_time must be positive");
        }
        if self.record_stride == 0 {
            return bad("record_stride must be at least 1");
        }
        Ok(())
    }
}

/// Optional starting point; omitted blocks start at zero.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct InitialGuess<T: Scalar> {
    pub x: BTreeMap<String, DVector<T>>,
    pub z: BTreeMap<String, DVector<T>>,
    pub lambda: BTreeMap<String, DVector<T>>,
}

/// Stacking layout of the compact vectors `x` and `y` in canonical order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dimensions {
    pub total_x: usize,
    pub total_y: usize,
    pub rows: usize,
    pub m: usize,
    pub h: usize,
    /// `m + 1` offsets into `x`; agent `i` owns `x_offsets[i]..x_offsets[i + 1]`.
    pub x_offsets: Vec<usize>,
    /// `h + 1` offsets into `y`.
    pub y_offsets: Vec<usize>,
}

impl Dimensions {
    pub fn x_range(&self, i: usize) -> Range<usize> {
        self.x_offsets[i]..self.x_offsets[i + 1]
    }

    pub fn y_range(&self, k: usize) -> Range<usize> {
        self.y_offsets[k]..self.y_offsets[k + 1]
    }

    pub fn nodes(&self) -> usize {
        self.m + self.h
    }

    /// Length of the stacked `z` and `λ` vectors, `r(m + h)`.
    pub fn multiplier_len(&self) -> usize {
        self.rows * self.nodes()
    }

    pub fn block_range(&self, node: usize) -> Range<usize> {
        node * self.rows..(node + 1) * self.rows
    }
}

/// Raw components of a scenario, validated by [`Scenario::new`].
#[derive(Debug, Clone)]
pub struct ScenarioParts<T: Scalar> {
    pub topology: NetworkTopology,
    pub dims: BTreeMap<String, usize>,
    pub costs: BTreeMap<String, CostFunction<T>>,
    pub constraint: CouplingConstraint<T>,
    pub human_models: BTreeMap<String, HumanResponseModel<T>>,
    pub schedules: BTreeMap<String, ApproximationSchedule<T>>,
    pub solver: SolverOptions,
    pub initial: Option<InitialGuess<T>>,
}

/// A validated problem instance. Per-agent data is held in canonical order.
#[derive(Debug, Clone)]
pub struct Scenario<T: Scalar> {
    topology: NetworkTopology,
    layout: Dimensions,
    costs: Vec<CostFunction<T>>,
    a_blocks: Vec<DMatrix<T>>,
    b_blocks: Vec<DMatrix<T>>,
    c: DVector<T>,
    models: Vec<HumanResponseModel<T>>,
    model_neighbors: Vec<Vec<usize>>,
    schedules: Vec<Option<ApproximationSchedule<T>>>,
    solver: SolverOptions,
    initial: Option<InitialGuess<T>>,
}

impl<T: Scalar> Scenario<T> {
    pub fn new(parts: ScenarioParts<T>) -> Result<Self> {
        let ScenarioParts {
            topology,
            dims,
            costs,
            constraint,
            human_models,
            schedules,
            solver,
            initial,
        } = parts;
        solver.validate()?;
        if topology.m() == 0 {
            return Err(Error::Schema("scenario needs at least one autonomous agent".into()));
        }
        for id in dims.keys().chain(costs.keys()) {
            topology.index_of(id)?;
        }
        for id in constraint.a_blocks.keys().chain(constraint.b_blocks.keys()) {
            topology.index_of(id)?;
        }
        for id in human_models.keys().chain(schedules.keys()) {
            if topology.kind_of(id)? != crate::topology::AgentKind::Human {
                return Err(Error::InvalidHumanModel {
                    id: id.clone(),
                    detail: "response model attached to an autonomous agent".into(),
                });
            }
        }

        let dim_of = |id: &str| -> Result<usize> {
            match dims.get(id) {
                Some(&0) => Err(Error::DimensionMismatch {
                    id: id.to_owned(),
                    detail: "state dimension must be at least 1".into(),
                }),
                Some(&d) => Ok(d),
                None => Err(Error::Schema(format!("missing dimension for `{id}`"))),
            }
        };

        let rows = constraint.rows();
        if rows == 0 {
            return Err(Error::Schema("constraint must have at least one row".into()));
        }
        if constraint.c.iter().any(|v| !v.is_finite()) {
            return Err(Error::Schema("constraint offset has non-finite entries".into()));
        }

        let mut x_offsets = vec![0];
        let mut y_offsets = vec![0];
        let mut cost_vec = Vec::with_capacity(topology.node_count());
        let mut a_vec = Vec::with_capacity(topology.m());
        let mut b_vec = Vec::with_capacity(topology.h());
        for (idx, id) in topology.ids().iter().enumerate() {
            let d = dim_of(id)?;
            let cost = costs.get(id).ok_or_else(|| Error::MissingCost(id.clone()))?;
            if cost.dim() != d {
                return Err(Error::DimensionMismatch {
                    id: id.clone(),
                    detail: format!("cost has dimension {}, agent has {d}", cost.dim()),
                });
            }
            cost_vec.push(cost.clone());
            let is_auto = idx < topology.m();
            let (store, label) = if is_auto {
                (&constraint.a_blocks, "A")
            } else {
                (&constraint.b_blocks, "B")
            };
            let block = store
                .get(id)
                .ok_or_else(|| Error::Schema(format!("missing {label} block for `{id}`")))?;
            if block.nrows() != rows || block.ncols() != d {
                return Err(Error::DimensionMismatch {
                    id: id.clone(),
                    detail: format!(
                        "{label} block is {}x{}, expected {rows}x{d}",
                        block.nrows(),
                        block.ncols()
                    ),
                });
            }
            if block.iter().any(|v| !v.is_finite()) {
                return Err(Error::Schema(format!("{label} block of `{id}` has non-finite entries")));
            }
            if is_auto {
                a_vec.push(block.clone());
                x_offsets.push(x_offsets.last().unwrap() + d);
            } else {
                b_vec.push(block.clone());
                y_offsets.push(y_offsets.last().unwrap() + d);
            }
        }

        let mut models = Vec::with_capacity(topology.h());
        let mut model_neighbors = Vec::with_capacity(topology.h());
        let mut sched_vec = Vec::with_capacity(topology.h());
        for id in topology.human_ids() {
            let model = human_models
                .get(id)
                .ok_or_else(|| Error::MissingHumanModel(id.clone()))?;
            if model.human_id() != id {
                return Err(Error::InvalidHumanModel {
                    id: id.clone(),
                    detail: format!("model is labelled `{}`", model.human_id()),
                });
            }
            let (auto_nbrs, _) = topology.neighbors(id)?;
            if model.neighbor_ids().iter().map(String::as_str).ne(auto_nbrs.iter().copied()) {
                return Err(Error::InvalidHumanModel {
                    id: id.clone(),
                    detail: format!(
                        "gain blocks cover {:?}, autonomous neighbors are {:?}",
                        model.neighbor_ids(),
                        auto_nbrs
                    ),
                });
            }
            if model.output_dim() != dim_of(id)? {
                return Err(Error::DimensionMismatch {
                    id: id.clone(),
                    detail: format!(
                        "response model outputs {} entries, human state has {}",
                        model.output_dim(),
                        dim_of(id)?
                    ),
                });
            }
            let mut nbr_idx = Vec::with_capacity(auto_nbrs.len());
            for (nid, g) in model.neighbor_ids().iter().zip(model.gains()) {
                let n = dim_of(nid)?;
                if g.ncols() != n {
                    return Err(Error::DimensionMismatch {
                        id: nid.clone(),
                        detail: format!(
                            "gain block in model of `{id}` has {} columns, state has {n}",
                            g.ncols()
                        ),
                    });
                }
                nbr_idx.push(topology.index_of(nid)?);
            }
            let sched = schedules.get(id).cloned();
            if let Some(s) = &sched {
                validate_schedule(model, s)?;
            }
            models.push(model.clone());
            model_neighbors.push(nbr_idx);
            sched_vec.push(sched);
        }

        let layout = Dimensions {
            total_x: *x_offsets.last().unwrap(),
            total_y: *y_offsets.last().unwrap(),
            rows,
            m: topology.m(),
            h: topology.h(),
            x_offsets,
            y_offsets,
        };

        let scenario = Self {
            topology,
            layout,
            costs: cost_vec,
            a_blocks: a_vec,
            b_blocks: b_vec,
            c: constraint.c,
            models,
            model_neighbors,
            schedules: sched_vec,
            solver,
            initial,
        };
        if let Some(init) = &scenario.initial {
            scenario.validate_initial(init)?;
        }
        if scenario.solver.check_slater {
            crate::oracle::check_slater(&scenario)?;
        }
        Ok(scenario)
    }

    fn validate_initial(&self, init: &InitialGuess<T>) -> Result<()> {
        for (id, v) in &init.x {
            let i = self.topology.index_of(id)?;
            if i >= self.layout.m || v.len() != self.layout.x_range(i).len() {
                return Err(Error::DimensionMismatch {
                    id: id.clone(),
                    detail: "initial x block has the wrong shape or owner".into(),
                });
            }
        }
        for (id, v) in init.z.iter().chain(&init.lambda) {
            self.topology.index_of(id)?;
            if v.len() != self.layout.rows {
                return Err(Error::DimensionMismatch {
                    id: id.clone(),
                    detail: format!("initial multiplier block has length {}", v.len()),
                });
            }
        }
        if init.lambda.values().flat_map(|v| v.iter()).any(|&l| l < T::zero()) {
            return Err(Error::Schema("initial multipliers must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn topology(&self) -> &NetworkTopology {
        &self.topology
    }

    pub fn dimensions(&self) -> &Dimensions {
        &self.layout
    }

    pub fn solver(&self) -> &SolverOptions {
        &self.solver
    }

    pub fn initial(&self) -> Option<&InitialGuess<T>> {
        self.initial.as_ref()
    }

    pub fn offset(&self) -> &DVector<T> {
        &self.c
    }

    /// Cost of the node at canonical index `node`.
    pub fn cost(&self, node: usize) -> &CostFunction<T> {
        &self.costs[node]
    }

    /// `A_i` for autonomous agent `i` (canonical index).
    pub fn a_block(&self, i: usize) -> &DMatrix<T> {
        &self.a_blocks[i]
    }

    /// `B_k` for the `k`-th human (0-based among humans).
    pub fn b_block(&self, k: usize) -> &DMatrix<T> {
        &self.b_blocks[k]
    }

    pub fn human_model(&self, k: usize) -> &HumanResponseModel<T> {
        &self.models[k]
    }

    /// Canonical indices of the autonomous agents feeding human `k`, in model order.
    pub fn human_neighbors(&self, k: usize) -> &[usize] {
        &self.model_neighbors[k]
    }

    pub fn schedule(&self, k: usize) -> Option<&ApproximationSchedule<T>> {
        self.schedules[k].as_ref()
    }

    pub fn with_solver(mut self, solver: SolverOptions) -> Result<Self> {
        solver.validate()?;
        self.solver = solver;
        Ok(self)
    }

    /// Replaces every approximation schedule.
    pub fn with_schedules(
        mut self,
        schedules: BTreeMap<String, ApproximationSchedule<T>>,
    ) -> Result<Self> {
        let mut next = vec![None; self.layout.h];
        for (id, s) in schedules {
            let k = self.human_local(&id)?;
            validate_schedule(&self.models[k], &s)?;
            next[k] = Some(s);
        }
        self.schedules = next;
        Ok(self)
    }

    /// 0-based human position for a human id.
    pub fn human_local(&self, id: &str) -> Result<usize> {
        let idx = self.topology.index_of(id)?;
        idx.checked_sub(self.layout.m).ok_or_else(|| Error::InvalidHumanModel {
            id: id.to_owned(),
            detail: "not a human agent".into(),
        })
    }

    pub fn x_block<'a>(&self, x: &'a DVector<T>, i: usize) -> &'a [T] {
        &x.as_slice()[self.layout.x_range(i)]
    }

    pub fn y_block<'a>(&self, y: &'a DVector<T>, k: usize) -> &'a [T] {
        &y.as_slice()[self.layout.y_range(k)]
    }

    fn check_x(&self, x: &DVector<T>) -> Result<()> {
        if x.len() != self.layout.total_x {
            return Err(Error::DimensionMismatch {
                id: "x".into(),
                detail: format!("expected length {}, got {}", self.layout.total_x, x.len()),
            });
        }
        Ok(())
    }

    /// Evaluates human `k`'s response (and Jacobian) at compact `x` and time `t`.
    pub fn evaluate_human(&self, k: usize, x: &DVector<T>, t: T) -> Result<ResponseEval<T>> {
        self.check_x(x)?;
        let blocks: Vec<&[T]> = self.model_neighbors[k]
            .iter()
            .map(|&j| self.x_block(x, j))
            .collect();
        self.models[k].evaluate_blocks(&blocks, t, self.schedules[k].as_ref())
    }

    pub fn evaluate_humans(&self, x: &DVector<T>, t: T) -> Result<Vec<ResponseEval<T>>> {
        (0..self.layout.h).map(|k| self.evaluate_human(k, x, t)).collect()
    }

    /// Compact `y = Q(x)` at time `t`.
    pub fn responses(&self, x: &DVector<T>, t: T) -> Result<DVector<T>> {
        let mut y = DVector::zeros(self.layout.total_y);
        for k in 0..self.layout.h {
            let e = self.evaluate_human(k, x, t)?;
            y.rows_mut(self.layout.y_offsets[k], e.y.len()).copy_from(&e.y);
        }
        Ok(y)
    }

    /// `F(x) + G(y)`.
    pub fn objective(&self, x: &DVector<T>, y: &DVector<T>) -> Result<T> {
        self.check_x(x)?;
        if y.len() != self.layout.total_y {
            return Err(Error::DimensionMismatch {
                id: "y".into(),
                detail: format!("expected length {}, got {}", self.layout.total_y, y.len()),
            });
        }
        let mut total = T::zero();
        for i in 0..self.layout.m {
            total += self.costs[i].value(self.x_block(x, i));
        }
        for k in 0..self.layout.h {
            total += self.costs[self.layout.m + k].value(self.y_block(y, k));
        }
        Ok(total)
    }

    /// Parses and validates a scenario document (JSON).
    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ScenarioDocument = serde_json::from_str(text)?;
        Self::from_document(&doc)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_document())?)
    }

    pub fn from_document(doc: &ScenarioDocument) -> Result<Self> {
        document::build(doc)
    }

    pub fn to_document(&self) -> ScenarioDocument {
        document::export(self)
    }
}

fn validate_schedule<T: Scalar>(
    model: &HumanResponseModel<T>,
    s: &ApproximationSchedule<T>,
) -> Result<()> {
    let invalid = |detail: String| Error::InvalidHumanModel {
        id: model.human_id().to_owned(),
        detail,
    };
    if !(s.settle_time >= T::zero()) {
        return Err(invalid("schedule settle time must be nonnegative".into()));
    }
    for (nid, d) in &s.gain_deltas {
        let g = model
            .gain(nid)
            .ok_or_else(|| invalid(format!("schedule perturbs unknown neighbor `{nid}`")))?;
        if g.shape() != d.shape() {
            return Err(invalid(format!("schedule delta for `{nid}` has the wrong shape")));
        }
    }
    if let Some(b) = &s.base_delta {
        if b.len() != model.output_dim() {
            return Err(invalid("schedule base delta has the wrong length".into()));
        }
    }
    Ok(())
}

/// Compact dimensions and offsets of a scenario.
pub fn stack_dimensions<T: Scalar>(scenario: &Scenario<T>) -> Dimensions {
    scenario.dimensions().clone()
}

/// Parses a scenario document.
pub fn load_scenario<T: Scalar>(text: &str) -> Result<Scenario<T>> {
    Scenario::from_json(text)
}
