use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use super::metrics::{deviation_w, lyapunov_v, workload_share};
use crate::dynamics::{lagrangian, Reference, SystemState, Termination};
use crate::error::Result;
use crate::model::Scenario;
use crate::reformulation::{coupled_residual, DecoupledConstraint};
use crate::scalar::{wide, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Sample {
    pub t: f64,
    pub w: Option<f64>,
    pub v: Option<f64>,
    pub max_coupled_residual: f64,
    pub min_lambda: f64,
    pub lagrangian: f64,
    /// 1-norm workload per agent, canonical order.
    pub workload: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryRecord {
    pub ids: Vec<String>,
    pub dt: f64,
    pub samples: Vec<Sample>,
    pub termination: Termination,
    pub final_t: f64,
    pub steps: usize,
}

pub fn sample_state<T: Scalar>(
    scenario: &Scenario<T>,
    dc: &DecoupledConstraint<T>,
    state: &SystemState<T>,
    reference: Option<&Reference<T>>,
) -> Result<Sample> {
    let y = scenario.responses(&state.x, state.t)?;
    let coupled = coupled_residual(scenario, &state.x, &y)?;
    let w = reference.map(|r| deviation_w(scenario, state, r)).transpose()?;
    let v = reference
        .and_then(|r| r.saddle.as_ref())
        .map(|s| lyapunov_v(state, s))
        .transpose()?;
    Ok(Sample {
        t: wide(state.t),
        w: w.map(wide),
        v: v.map(wide),
        max_coupled_residual: wide(coupled.max()),
        min_lambda: wide(state.lambda.min()),
        lagrangian: wide(lagrangian(scenario, dc, state)?),
        workload: workload_share(scenario, state)?
            .by_agent
            .into_iter()
            .map(|(_, w)| wide(w))
            .collect(),
    })
}

impl TrajectoryRecord {
    pub fn new<T: Scalar>(scenario: &Scenario<T>, dt: f64) -> Self {
        Self {
            ids: scenario.topology().ids().to_vec(),
            dt,
            samples: Vec::new(),
            termination: Termination::MaxTime,
            final_t: 0.0,
            steps: 0,
        }
    }

    pub fn push(&mut self, s: Sample) {
        self.samples.push(s);
    }

    pub fn finish(&mut self, termination: Termination, final_t: f64, steps: usize) {
        self.termination = termination;
        self.final_t = final_t;
        self.steps = steps;
    }

    pub fn last(&self) -> Option<&Sample> {
        self.samples.last()
    }

    /// Comma-separated table, one row per sample. `W` and `V` columns appear
    /// only when the run had a reference.
    pub fn to_table(&self) -> String {
        let has_w = self.samples.iter().any(|s| s.w.is_some());
        let has_v = self.samples.iter().any(|s| s.v.is_some());
        let mut out = String::from("t");
        if has_w {
            out.push_str(",W");
        }
        if has_v {
            out.push_str(",V");
        }
        out.push_str(",max_coupled_residual,min_lambda,lagrangian");
        for id in &self.ids {
            let _ = write!(out, ",workload_{id}");
        }
        out.push('\n');
        let opt = |v: Option<f64>| v.map_or_else(String::new, |v| v.to_string());
        for s in &self.samples {
            let _ = write!(out, "{}", s.t);
            if has_w {
                let _ = write!(out, ",{}", opt(s.w));
            }
            if has_v {
                let _ = write!(out, ",{}", opt(s.v));
            }
            let _ = write!(out, ",{},{},{}", s.max_coupled_residual, s.min_lambda, s.lagrangian);
            for w in &s.workload {
                let _ = write!(out, ",{w}");
            }
            out.push('\n');
        }
        out
    }

    pub fn write_table(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_table())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_layout() {
        let rec = TrajectoryRecord {
            ids: vec!["a1".into(), "h1".into()],
            dt: 0.1,
            samples: vec![Sample {
                t: 0.5,
                w: Some(2.0),
                v: None,
                max_coupled_residual: -1.0,
                min_lambda: 0.0,
                lagrangian: 3.25,
                workload: vec![1.0, 2.0],
            }],
            termination: Termination::Converged,
            final_t: 0.5,
            steps: 5,
        };
        assert_eq!(
            rec.to_table(),
            "t,W,max_coupled_residual,min_lambda,lagrangian,workload_a1,workload_h1\n\
             0.5,2,-1,0,3.25,1,2\n"
        );
    }
}
