use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::agent::SyncNetwork;
use super::{step, SystemState};
use crate::error::{Error, Result};
use crate::harness::record::{sample_state, TrajectoryRecord};
use crate::model::{Scenario, SolverOptions};
use crate::reformulation::{build_decoupled, SplitPolicy};
use crate::scalar::{lit, wide, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    MaxTime,
    Diverged,
}

impl Termination {
    pub fn as_str(self) -> &'static str {
        match self {
            Termination::Converged => "converged",
            Termination::MaxTime => "max_time",
            Termination::Diverged => "diverged",
        }
    }
}

/// Which execution path advances the state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Engine {
    /// Compact matrix form.
    #[default]
    Compact,
    /// Synchronous per-agent rounds over neighbor messages.
    Distributed,
}

/// Known optimum used for the W and V columns of the record.
#[derive(Debug, Clone)]
pub struct Reference<T: Scalar> {
    pub x: DVector<T>,
    pub y: DVector<T>,
    /// Saddle point of the decoupled Lagrangian; enables V.
    pub saddle: Option<SystemState<T>>,
}

#[derive(Debug, Clone)]
pub struct IntegrateOptions<T: Scalar> {
    pub dt: f64,
    pub max_time: f64,
    pub tolerance: f64,
    /// Record every `record_stride`-th step; the final state is always recorded.
    pub record_stride: usize,
    pub split_policy: SplitPolicy,
    pub initial: Option<SystemState<T>>,
    pub reference: Option<Reference<T>>,
    /// Halve `dt` and restart once if the first attempt diverges.
    pub retry_on_divergence: bool,
    pub engine: Engine,
}

impl<T: Scalar> IntegrateOptions<T> {
    pub fn from_solver(solver: &SolverOptions) -> Self {
        Self {
            dt: solver.dt,
            max_time: solver.max_time,
            tolerance: solver.tolerance,
            record_stride: solver.record_stride,
            split_policy: solver.split_policy,
            initial: None,
            reference: None,
            retry_on_divergence: true,
            engine: Engine::Compact,
        }
    }

    pub fn with_reference(mut self, reference: Reference<T>) -> Self {
        self.reference = Some(reference);
        self
    }

    fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidArgument(format!("dt = {} must be positive", self.dt)));
        }
        if !(self.max_time >= self.dt && self.max_time.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "max_time = {} must be at least dt",
                self.max_time
            )));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::InvalidArgument("tolerance must be positive".into()));
        }
        if self.record_stride == 0 {
            return Err(Error::InvalidArgument("record_stride must be at least 1".into()));
        }
        Ok(())
    }
}

/// Run the projected flow until the update rate drops below the tolerance
/// or `max_time` is reached.
///
/// Convergence is only declared once every approximation schedule has
/// settled, so a run never stops on the perturbed model.
pub fn integrate<T: Scalar>(
    scenario: &Scenario<T>,
    opts: &IntegrateOptions<T>,
) -> Result<(SystemState<T>, TrajectoryRecord)> {
    opts.validate()?;
    match run(scenario, opts, opts.dt) {
        Err(Error::Divergence { .. }) if opts.retry_on_divergence => {
            run(scenario, opts, opts.dt / 2.0)
        }
        other => other,
    }
}

fn run<T: Scalar>(
    scenario: &Scenario<T>,
    opts: &IntegrateOptions<T>,
    dt: f64,
) -> Result<(SystemState<T>, TrajectoryRecord)> {
    let dc = build_decoupled(scenario, opts.split_policy);
    let mut state = match &opts.initial {
        Some(s) => s.clone(),
        None => SystemState::initial(scenario)?,
    };
    let t0 = wide(state.t);
    let settle = (0..scenario.dimensions().h)
        .filter_map(|k| scenario.schedule(k).map(|s| wide(s.settle_time)))
        .fold(t0, f64::max);
    let steps = ((opts.max_time / dt).round() as usize).max(1);
    let dt_t = lit::<T>(dt);
    let mut record = TrajectoryRecord::new(scenario, dt);
    let reference = opts.reference.as_ref();
    let mut termination = Termination::MaxTime;
    let mut taken = 0;
    let mut network = match opts.engine {
        Engine::Compact => None,
        Engine::Distributed => Some(SyncNetwork::new(scenario, &dc, &state)?),
    };

    for k in 0..steps {
        if k % opts.record_stride == 0 {
            record.push(sample_state(scenario, &dc, &state, reference)?);
        }
        let t_next = lit(t0 + (k + 1) as f64 * dt);
        let next = match network.as_mut() {
            None => {
                let mut next = step(scenario, &dc, &state, dt_t)?;
                next.t = t_next;
                next
            }
            Some(net) => {
                net.sweep(dt_t)?;
                net.set_time(t_next);
                let next = net.state(scenario);
                if !next.max_abs().is_finite() {
                    return Err(Error::Divergence {
                        t: wide(state.t),
                        max_abs: f64::INFINITY,
                    });
                }
                next
            }
        };
        let rate = update_norm(&state, &next) / dt;
        state = next;
        taken = k + 1;
        if wide(state.t) >= settle && rate <= opts.tolerance {
            termination = Termination::Converged;
            break;
        }
    }
    record.push(sample_state(scenario, &dc, &state, reference)?);
    record.finish(termination, wide(state.t), taken);
    Ok((state, record))
}

fn update_norm<T: Scalar>(a: &SystemState<T>, b: &SystemState<T>) -> f64 {
    let sq = |u: &DVector<T>, v: &DVector<T>| {
        u.iter()
            .zip(v.iter())
            .map(|(p, q)| {
                let d = wide(*q - *p);
                d * d
            })
            .sum::<f64>()
    };
    (sq(&a.x, &b.x) + sq(&a.z, &b.z) + sq(&a.lambda, &b.lambda)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::tests::single;

    fn opts() -> IntegrateOptions<f64> {
        let mut o = IntegrateOptions::from_solver(&SolverOptions::default());
        o.dt = 1e-2;
        o.tolerance = 1e-9;
        o
    }

    #[test]
    fn interior_optimum() {
        let s = single(-1.0);
        let mut o = opts();
        o.initial = Some(SystemState {
            x: DVector::from_vec(vec![2.0]),
            z: DVector::zeros(1),
            lambda: DVector::zeros(1),
            t: 0.0,
        });
        let (st, rec) = integrate(&s, &o).unwrap();
        assert_eq!(rec.termination, Termination::Converged);
        assert!(st.x[0].abs() < 1e-8);
        assert!(st.lambda[0].abs() < 1e-8);
    }

    #[test]
    fn active_constraint() {
        let s = single(1.0);
        let (st, rec) = integrate(&s, &opts()).unwrap();
        assert_eq!(rec.termination, Termination::Converged);
        assert!((st.x[0] + 1.0).abs() < 1e-7, "x = {}", st.x[0]);
        assert!((st.lambda[0] - 2.0).abs() < 1e-7, "λ = {}", st.lambda[0]);
    }

    #[test]
    fn records_are_time_ordered() {
        let s = single(1.0);
        let mut o = opts();
        o.record_stride = 7;
        o.max_time = 1.0;
        let (st, rec) = integrate(&s, &o).unwrap();
        assert_eq!(rec.termination, Termination::MaxTime);
        assert!(rec.samples.windows(2).all(|w| w[0].t < w[1].t));
        assert!((rec.samples.last().unwrap().t - st.t).abs() < 1e-12);
        assert!((st.t - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_options() {
        let s = single(1.0);
        let mut o = opts();
        o.dt = 0.0;
        assert!(integrate(&s, &o).is_err());
        let mut o = opts();
        o.record_stride = 0;
        assert!(integrate(&s, &o).is_err());
    }

    #[test]
    fn divergence_after_retry_is_an_error() {
        let s = single(1.0);
        let mut o = opts();
        o.dt = 50.0;
        o.max_time = 1e5;
        assert!(matches!(integrate(&s, &o), Err(Error::Divergence { .. })));
    }
}
