use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use teamalloc::dynamics::{Engine, Termination};
use teamalloc::harness::check::check_scenario;
use teamalloc::harness::experiment::{grid_table, oracle_json, PRESETS};
use teamalloc::harness::presets::{fig4_document, risk_grid_documents};
use teamalloc::harness::{run_experiment, ExperimentOptions, ExperimentOutcome};
use teamalloc::human::AttitudeKind;
use teamalloc::model::load_scenario;
use teamalloc::oracle::solve_centralized;
use teamalloc::reformulation::build_decoupled;
use teamalloc::{Error, Scenario64};

const OUT_ENV: &str = "TEAMALLOC_OUT_DIR";

#[derive(Parser)]
#[command(name = "teamalloc", version, about = "Distributed task allocation for human/autonomous teams")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReferenceArg {
    Oracle,
}

#[derive(Clone, Copy, ValueEnum)]
enum EngineArg {
    Compact,
    Distributed,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate the flow on a preset or a scenario file.
    Run {
        /// `fig4_convergence`, `fig5_risk_grid`, or a scenario file path.
        target: String,
        #[arg(long)]
        dt: Option<f64>,
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long)]
        max_time: Option<f64>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Output directory for trajectory and summary files.
        #[arg(long, env = OUT_ENV)]
        out: Option<PathBuf>,
        /// Record W and V against the centralized optimum.
        #[arg(long, value_enum)]
        reference: Option<ReferenceArg>,
        #[arg(long, value_enum, default_value = "compact")]
        engine: EngineArg,
    },
    /// Solve a scenario centrally and print the optimum.
    Oracle {
        /// Scenario file or `fig4_convergence`.
        scenario: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Verify feasibility equivalence and gradients on one instance.
    Check {
        /// Scenario file or `fig4_convergence`.
        scenario: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Print a preset's scenario document(s).
    Preset {
        name: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

fn usage(msg: String) -> anyhow::Error {
    Error::InvalidArgument(msg).into()
}

fn load(target: &str, seed: u64) -> anyhow::Result<Scenario64> {
    if target == "fig4_convergence" {
        let at = [AttitudeKind::RiskSeeking, AttitudeKind::RiskAverse];
        return Ok(Scenario64::from_document(&fig4_document(seed, at)?)?);
    }
    let path = Path::new(target);
    if !path.is_file() {
        return Err(usage(format!(
            "`{target}` is neither a scenario file nor `fig4_convergence`"
        )));
    }
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {target}"))?;
    Ok(load_scenario(&text)?)
}

fn print_json(v: &serde_json::Value) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn by_id(ids: &[String], v: &DVector<f64>, offsets: &[usize]) -> serde_json::Value {
    let mut m = serde_json::Map::new();
    for (k, id) in ids.iter().enumerate() {
        let block: Vec<f64> = v.rows(offsets[k], offsets[k + 1] - offsets[k]).iter().copied().collect();
        m.insert(id.clone(), json!(block));
    }
    serde_json::Value::Object(m)
}

fn execute(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Run { target, dt, tol, max_time, seed, out, reference, engine } => {
            if !PRESETS.contains(&target.as_str()) && !Path::new(&target).is_file() {
                return Err(usage(format!(
                    "unknown preset or missing file `{target}` (presets: {})",
                    PRESETS.join(", ")
                )));
            }
            let opts = ExperimentOptions {
                dt,
                tolerance: tol,
                max_time,
                seed,
                out_dir: out,
                oracle_reference: reference.is_some(),
                engine: match engine {
                    EngineArg::Compact => Engine::Compact,
                    EngineArg::Distributed => Engine::Distributed,
                },
            };
            match run_experiment(&target, &opts)? {
                ExperimentOutcome::Run(run) => {
                    print_json(&json!({ "summary": run.summary }))?;
                    if run.summary.termination != Termination::Converged {
                        eprintln!("teamalloc: flow did not converge before max_time");
                        return Ok(ExitCode::from(2));
                    }
                }
                ExperimentOutcome::Grid(cells) => {
                    print!("{}", grid_table(&cells));
                    if cells.iter().any(|c| c.termination != Termination::Converged) {
                        eprintln!("teamalloc: a grid cell did not converge before max_time");
                        return Ok(ExitCode::from(2));
                    }
                }
            }
        }
        Command::Oracle { scenario, seed } => {
            let s = load(&scenario, seed)?;
            let sol = solve_centralized(&s)?;
            let dims = s.dimensions();
            let topo = s.topology();
            let mut out = oracle_json(&sol);
            out["x_by_agent"] = by_id(topo.autonomous_ids(), &sol.x, &dims.x_offsets);
            out["y_by_human"] = by_id(topo.human_ids(), &sol.y, &dims.y_offsets);
            print_json(&out)?;
        }
        Command::Check { scenario, seed } => {
            let s = load(&scenario, seed)?;
            let dc = build_decoupled(&s, s.solver().split_policy);
            // Sample around the optimum when the oracle applies, else around 0.
            let anchor = solve_centralized(&s)
                .map(|sol| sol.x)
                .unwrap_or_else(|_| DVector::zeros(s.dimensions().total_x));
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let report = check_scenario(&s, &dc, &anchor, &mut rng)?;
            print_json(&serde_json::to_value(&report)?)?;
            if !report.passed {
                return Ok(ExitCode::from(2));
            }
        }
        Command::Preset { name, seed } => match name.as_str() {
            "fig4_convergence" => {
                let at = [AttitudeKind::RiskSeeking, AttitudeKind::RiskAverse];
                print_json(&serde_json::to_value(fig4_document(seed, at)?)?)?;
            }
            "fig5_risk_grid" => {
                let cells: Vec<_> = risk_grid_documents(seed)?
                    .into_iter()
                    .map(|(att, doc)| json!({"h1": att[0].as_str(), "h2": att[1].as_str(), "scenario": doc}))
                    .collect();
                print_json(&json!(cells))?;
            }
            other => {
                return Err(usage(format!(
                    "unknown preset `{other}` (presets: {})",
                    PRESETS.join(", ")
                )))
            }
        },
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("teamalloc: {err:#}");
            let code = err.downcast_ref::<Error>().map_or(1, Error::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
