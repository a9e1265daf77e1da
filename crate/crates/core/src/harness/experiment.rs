use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;

use super::metrics::{deviation_w, lyapunov_v, workload_share};
use super::presets::{fig4_scenario, risk_grid_documents};
use super::record::TrajectoryRecord;
use crate::dynamics::{integrate, Engine, IntegrateOptions, Reference, SystemState, Termination};
use crate::error::{Error, Result};
use crate::model::{load_scenario, Scenario};
use crate::oracle::{kkt_residual, lift_saddle, solve_centralized, CentralSolution, KktResidual};
use crate::reformulation::build_decoupled;

pub const PRESETS: [&str; 2] = ["fig4_convergence", "fig5_risk_grid"];

/// Overrides applied on top of a scenario's own solver options.
#[derive(Debug, Clone, Default)]
pub struct ExperimentOptions {
    pub dt: Option<f64>,
    pub tolerance: Option<f64>,
    pub max_time: Option<f64>,
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    /// Solve the oracle and record W and V against it.
    pub oracle_reference: bool,
    pub engine: Engine,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub termination: Termination,
    pub final_t: f64,
    pub steps: usize,
    pub final_w: Option<f64>,
    pub final_v: Option<f64>,
    pub initial_v: Option<f64>,
    pub kkt: KktResidual<f64>,
    pub objective: f64,
    pub oracle_value: Option<f64>,
    pub autonomous_workload: f64,
    pub human_workload: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub scenario: Scenario<f64>,
    pub state: SystemState<f64>,
    pub record: TrajectoryRecord,
    pub oracle: Option<CentralSolution<f64>>,
    pub saddle: Option<SystemState<f64>>,
    pub summary: RunSummary,
}

#[derive(Debug, Clone, Serialize)]
pub struct GridCell {
    pub h1: String,
    pub h2: String,
    pub autonomous_workload: f64,
    pub human_workload: f64,
    pub total_cost: f64,
    pub workload: Vec<(String, f64)>,
    pub termination: Termination,
}

#[derive(Debug, Clone)]
pub enum ExperimentOutcome {
    Run(Box<RunOutcome>),
    Grid(Vec<GridCell>),
}

fn options_for(scenario: &Scenario<f64>, opts: &ExperimentOptions) -> IntegrateOptions<f64> {
    let mut io = IntegrateOptions::from_solver(scenario.solver());
    if let Some(dt) = opts.dt {
        io.dt = dt;
    }
    if let Some(tol) = opts.tolerance {
        io.tolerance = tol;
    }
    if let Some(t) = opts.max_time {
        io.max_time = t;
    }
    io.engine = opts.engine;
    io
}

/// Integrates one scenario, optionally against the oracle optimum.
pub fn run_scenario(scenario: Scenario<f64>, opts: &ExperimentOptions) -> Result<RunOutcome> {
    let dc = build_decoupled(&scenario, scenario.solver().split_policy);
    let mut io = options_for(&scenario, opts);
    let (oracle, saddle) = if opts.oracle_reference {
        let sol = solve_centralized(&scenario)?;
        let saddle = lift_saddle(&scenario, &dc, &sol)?;
        io.reference = Some(Reference {
            x: sol.x.clone(),
            y: sol.y.clone(),
            saddle: Some(saddle.clone()),
        });
        (Some(sol), Some(saddle))
    } else {
        (None, None)
    };
    let (state, record) = integrate(&scenario, &io)?;
    let y = scenario.responses(&state.x, state.t)?;
    let work = workload_share(&scenario, &state)?;
    let final_w = io.reference.as_ref().map(|r| deviation_w(&scenario, &state, r)).transpose()?;
    let final_v = saddle.as_ref().map(|s| lyapunov_v(&state, s)).transpose()?;
    let initial_v = saddle
        .as_ref()
        .map(|s| lyapunov_v(&SystemState::initial(&scenario)?, s))
        .transpose()?;
    let summary = RunSummary {
        termination: record.termination,
        final_t: record.final_t,
        steps: record.steps,
        final_w,
        final_v,
        initial_v,
        kkt: kkt_residual(&scenario, &dc, &state)?,
        objective: scenario.objective(&state.x, &y)?,
        oracle_value: oracle.as_ref().map(|o| o.value),
        autonomous_workload: work.autonomous_total,
        human_workload: work.human_total,
    };
    Ok(RunOutcome {
        scenario,
        state,
        record,
        oracle,
        saddle,
        summary,
    })
}

/// Risk-attitude grid: all four combinations on the same drawn instance.
pub fn risk_grid(opts: &ExperimentOptions) -> Result<Vec<GridCell>> {
    let mut cells = Vec::new();
    for (att, doc) in risk_grid_documents(opts.seed)? {
        let scenario = Scenario::from_document(&doc)?;
        let out = run_scenario(scenario, &ExperimentOptions { oracle_reference: false, ..opts.clone() })?;
        let share = workload_share(&out.scenario, &out.state)?;
        cells.push(GridCell {
            h1: att[0].as_str().to_string(),
            h2: att[1].as_str().to_string(),
            autonomous_workload: share.autonomous_total,
            human_workload: share.human_total,
            total_cost: out.summary.objective,
            workload: share.by_agent,
            termination: out.summary.termination,
        });
    }
    Ok(cells)
}

pub fn grid_table(cells: &[GridCell]) -> String {
    let mut out = String::from("h1,h2,autonomous_workload,human_workload,total_cost");
    if let Some(c) = cells.first() {
        for (id, _) in &c.workload {
            let _ = write!(out, ",workload_{id}");
        }
    }
    out.push('\n');
    for c in cells {
        let _ = write!(
            out,
            "{},{},{},{},{}",
            c.h1, c.h2, c.autonomous_workload, c.human_workload, c.total_cost
        );
        for (_, w) in &c.workload {
            let _ = write!(out, ",{w}");
        }
        out.push('\n');
    }
    out
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// Structured form of a centralized solution.
pub fn oracle_json(sol: &CentralSolution<f64>) -> serde_json::Value {
    let v = |x: &nalgebra::DVector<f64>| x.iter().copied().collect::<Vec<f64>>();
    json!({"x": v(&sol.x), "y": v(&sol.y), "mu": v(&sol.mu), "value": sol.value})
}

fn write_run(dir: &Path, out: &RunOutcome) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    out.record.write_table(&dir.join("trajectory.csv"))?;
    let final_x: Vec<f64> = out.state.x.iter().copied().collect();
    write_json(
        &dir.join("summary.json"),
        &json!({
            "summary": out.summary,
            "final_x": final_x,
            "oracle": out.oracle.as_ref().map(oracle_json),
        }),
    )
}

/// Runs a named preset or a scenario file and writes its artifacts.
///
/// `fig4_convergence` and file runs write `trajectory.csv` and
/// `summary.json`; `fig5_risk_grid` writes `risk_grid.csv` and
/// `summary.json`. Nothing is written when `out_dir` is `None`.
pub fn run_experiment(target: &str, opts: &ExperimentOptions) -> Result<ExperimentOutcome> {
    match target {
        "fig4_convergence" => {
            let scenario = fig4_scenario(opts.seed)?;
            let out = run_scenario(scenario, &ExperimentOptions { oracle_reference: true, ..opts.clone() })?;
            if let Some(dir) = &opts.out_dir {
                write_run(dir, &out)?;
                std::fs::write(dir.join("scenario.json"), out.scenario.to_json()? + "\n")?;
            }
            Ok(ExperimentOutcome::Run(Box::new(out)))
        }
        "fig5_risk_grid" => {
            let cells = risk_grid(opts)?;
            if let Some(dir) = &opts.out_dir {
                std::fs::create_dir_all(dir)?;
                std::fs::write(dir.join("risk_grid.csv"), grid_table(&cells))?;
                write_json(&dir.join("summary.json"), &cells)?;
            }
            Ok(ExperimentOutcome::Grid(cells))
        }
        path => {
            let p = Path::new(path);
            if !p.is_file() {
                return Err(Error::InvalidArgument(format!(
                    "`{path}` is neither a preset ({}) nor a scenario file",
                    PRESETS.join(", ")
                )));
            }
            let scenario = load_scenario(&std::fs::read_to_string(p)?)?;
            let out = run_scenario(scenario, opts)?;
            if let Some(dir) = &opts.out_dir {
                write_run(dir, &out)?;
            }
            Ok(ExperimentOutcome::Run(Box::new(out)))
        }
    }
}
