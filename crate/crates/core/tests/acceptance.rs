//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits non-zero if any failed.

use std::collections::BTreeMap;
use std::time::Instant;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use teamalloc::dynamics::agent::{LocalView, SyncNetwork};
use teamalloc::dynamics::{integrate, step, Engine, IntegrateOptions, Reference, Termination};
use teamalloc::harness::check::{gradient_suite, theorem1_equivalence, EquivalenceReport};
use teamalloc::harness::experiment::{run_scenario, RunOutcome};
use teamalloc::harness::presets::{fig4_scenario, random_scenario, RandomScenarioConfig};
use teamalloc::harness::{run_experiment, ExperimentOptions, ExperimentOutcome};
use teamalloc::human::ApproximationSchedule;
use teamalloc::oracle::{lift_saddle, solve_centralized};
use teamalloc::reformulation::build_decoupled;
use teamalloc::topology::AgentKind;
use teamalloc::{Scenario64, SystemState64};

const SEED: u64 = 1;

type Outcome = Result<(bool, String), teamalloc::Error>;

fn fig4() -> Scenario64 {
    fig4_scenario(SEED).expect("fig4 preset")
}

fn state_sup(s: &SystemState64) -> f64 {
    s.x.iter().chain(&s.z).chain(&s.lambda).fold(0.0f64, |m, v| m.max(v.abs()))
}

fn state_diff(a: &SystemState64, b: &SystemState64) -> f64 {
    let d = |u: &DVector<f64>, v: &DVector<f64>| (u - v).amax();
    d(&a.x, &b.x).max(d(&a.z, &b.z)).max(d(&a.lambda, &b.lambda))
}

/// Distributed fig4 run shared by the convergence and KKT criteria.
fn fig4_distributed() -> Result<(RunOutcome, f64), teamalloc::Error> {
    let opts = ExperimentOptions {
        seed: SEED,
        max_time: Some(200.0),
        dt: Some(1e-3),
        oracle_reference: true,
        engine: Engine::Distributed,
        ..Default::default()
    };
    let clock = Instant::now();
    let out = run_scenario(fig4(), &opts)?;
    Ok((out, clock.elapsed().as_secs_f64()))
}

fn convergence(run: &RunOutcome, wall: f64) -> Outcome {
    let w = run.summary.final_w.unwrap_or(f64::INFINITY);
    let ok = w <= 1e-6 && run.summary.final_t <= 200.0 + 1e-9 && wall <= 60.0;
    Ok((
        ok,
        format!(
            "W(final) = {w:.3e} at t = {:.3} s ({}), wall {wall:.1} s",
            run.summary.final_t,
            run.summary.termination.as_str()
        ),
    ))
}

fn kkt(run: &RunOutcome) -> Outcome {
    let k = run.summary.kkt;
    let conv = run.summary.termination == Termination::Converged;
    let ok = conv
        && k.stationarity <= 1e-5
        && k.primal <= 1e-6
        && k.dual_min >= -1e-15
        && k.comp_slack <= 1e-6;
    Ok((
        ok,
        format!(
            "stationarity {:.2e}, primal {:.2e}, min λ {:.2e}, comp. slackness {:.2e}",
            k.stationarity, k.primal, k.dual_min, k.comp_slack
        ),
    ))
}

fn equivalence() -> Outcome {
    let mut total = EquivalenceReport::default();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    for (t, r) in [1usize, 2, 3, 1, 2].into_iter().enumerate() {
        let cfg = RandomScenarioConfig {
            nodes: 3..=10,
            rows: r..=r,
            path_only: t == 3,
            softplus: t == 4,
            ..Default::default()
        };
        let s = random_scenario(&mut rng, &cfg)?;
        let dc = build_decoupled(&s, s.solver().split_policy);
        let anchor = match solve_centralized(&s) {
            Ok(sol) => sol.x,
            Err(_) => DVector::zeros(s.dimensions().total_x),
        };
        total.merge(&theorem1_equivalence(&s, &dc, &anchor, &mut rng, 100)?);
    }
    let ok = total.samples >= 500
        && total.passed()
        && total.certified > 0
        && total.certified == total.coupled_feasible
        && total.decoupled_feasible > 0
        && total.max_certificate_residual <= 1e-8
        && total.max_coupled_residual <= 1e-8;
    Ok((
        ok,
        format!(
            "{} triples, {} coupled-feasible all certified (max residual {:.1e}), {} decoupled-feasible (max coupled residual {:.1e}), {} counterexamples",
            total.samples,
            total.coupled_feasible,
            total.max_certificate_residual,
            total.decoupled_feasible,
            total.max_coupled_residual,
            total.counterexamples
        ),
    ))
}

fn gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let affine = fig4();
    let e_affine = gradient_suite(&affine, &build_decoupled(&affine, affine.solver().split_policy), &mut rng, 50)?;
    let cfg = RandomScenarioConfig { softplus: true, human_fraction: 0.5, ..Default::default() };
    let smooth = random_scenario(&mut rng, &cfg)?;
    let e_smooth = gradient_suite(&smooth, &build_decoupled(&smooth, smooth.solver().split_policy), &mut rng, 50)?;
    Ok((
        e_affine <= 1e-5 && e_smooth <= 1e-4,
        format!("affine max rel. error {e_affine:.2e} (≤ 1e-5), softplus {e_smooth:.2e} (≤ 1e-4)"),
    ))
}

fn lyapunov() -> Outcome {
    let s = fig4();
    let dc = build_decoupled(&s, s.solver().split_policy);
    let sol = solve_centralized(&s)?;
    let saddle = lift_saddle(&s, &dc, &sol)?;
    let mut io = IntegrateOptions::from_solver(s.solver());
    io.dt = 1e-3;
    io.max_time = 200.0;
    io.record_stride = 1;
    io.reference = Some(Reference { x: sol.x.clone(), y: sol.y.clone(), saddle: Some(saddle) });
    let (_, rec) = integrate(&s, &io)?;
    let v: Vec<f64> = rec.samples.iter().map(|p| p.v.unwrap_or(f64::NAN)).collect();
    let bound = 10.0 * io.dt * io.dt;
    let worst = v.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max);
    let ratio = v[v.len() - 1] / v[0];
    Ok((
        worst <= bound && ratio <= 1e-4,
        format!(
            "{} steps, largest increase {worst:.2e} (≤ {bound:.0e}), V(final)/V(0) = {ratio:.2e}",
            v.len() - 1
        ),
    ))
}

/// Replaces every input that agent `i`'s round does not read.
fn corrupt(s: &Scenario64, state: &SystemState64, i: usize, rng: &mut ChaCha8Rng) -> SystemState64 {
    let topo = s.topology();
    let dims = s.dimensions();
    let near = |u: usize| u == i || topo.are_neighbors(i, u);
    // x blocks that feed a human neighbor's feedback to `i`.
    let feeds = |u: usize| {
        topo.neighbor_indices(i)
            .iter()
            .any(|&k| topo.kind_at(k) == AgentKind::Human && topo.are_neighbors(k, u))
    };
    let mut out = state.clone();
    for u in 0..dims.nodes() {
        if near(u) {
            continue;
        }
        for v in out.z.rows_mut(u * dims.rows, dims.rows).iter_mut() {
            *v = rng.gen_range(-1e3..1e3);
        }
        for v in out.lambda.rows_mut(u * dims.rows, dims.rows).iter_mut() {
            *v = rng.gen_range(0.0..1e3);
        }
        if u < dims.m && !feeds(u) {
            for v in out.x.rows_mut(dims.x_offsets[u], dims.x_offsets[u + 1] - dims.x_offsets[u]).iter_mut() {
                *v = rng.gen_range(-1e3..1e3);
            }
        }
    }
    out
}

fn same_view(a: &LocalView<f64>, b: &LocalView<f64>) -> bool {
    let bits = |v: &DVector<f64>| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let x = |v: &LocalView<f64>| match v {
        LocalView::Autonomous(a) => Some(bits(&a.x)),
        LocalView::Proxy(_) => None,
    };
    x(a) == x(b) && bits(a.z()) == bits(b.z()) && bits(a.lambda()) == bits(b.lambda())
}

fn distributed() -> Outcome {
    let s = fig4();
    let dc = build_decoupled(&s, s.solver().split_policy);
    let dt = 1e-3;
    let mut compact = SystemState64::initial(&s)?;
    let mut net = SyncNetwork::new(&s, &dc, &compact)?;
    for k in 0..1000 {
        let t = (k + 1) as f64 * dt;
        compact = step(&s, &dc, &compact, dt)?;
        compact.t = t;
        net.sweep(dt)?;
        net.set_time(t);
    }
    let err = state_diff(&compact, &net.state(&s));

    // Locality at a mid-trajectory state, for every agent.
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut changed = Vec::new();
    for i in 0..s.dimensions().nodes() {
        let mut clean = SyncNetwork::new(&s, &dc, &compact)?;
        clean.sweep(dt)?;
        for _ in 0..3 {
            let mut dirty = SyncNetwork::new(&s, &dc, &corrupt(&s, &compact, i, &mut rng))?;
            dirty.sweep(dt)?;
            if !same_view(&clean.views()[i], &dirty.views()[i]) {
                changed.push(s.topology().id_at(i).to_string());
                break;
            }
        }
    }
    Ok((
        err <= 1e-10 && changed.is_empty(),
        format!(
            "max entry error after 1000 sweeps {err:.1e}; corrupted non-neighbor inputs changed {} of {} local updates",
            changed.len(),
            s.dimensions().nodes()
        ),
    ))
}

/// Final state and trajectory sup-norm of the compact flow.
fn tracked(s: &Scenario64, opts: &IntegrateOptions<f64>) -> Result<(SystemState64, f64, Termination), teamalloc::Error> {
    let (fin, rec) = integrate(s, opts)?;
    let dc = build_decoupled(s, opts.split_policy);
    let mut st = SystemState64::initial(s)?;
    let mut sup = state_sup(&st);
    for k in 0..rec.steps {
        st = step(s, &dc, &st, opts.dt)?;
        st.t = (k + 1) as f64 * opts.dt;
        sup = sup.max(state_sup(&st));
    }
    Ok((fin, sup, rec.termination))
}

fn approximation() -> Outcome {
    let exact = fig4();
    let schedules: BTreeMap<_, _> = exact
        .topology()
        .human_ids()
        .iter()
        .enumerate()
        .map(|(k, id)| {
            (id.clone(), ApproximationSchedule::relative_gain_perturbation(exact.human_model(k), 0.5, 5.0))
        })
        .collect();
    let perturbed = exact.clone().with_schedules(schedules)?;
    let mut io = IntegrateOptions::from_solver(exact.solver());
    io.max_time = 200.0;
    let (e_fin, e_sup, e_term) = tracked(&exact, &io)?;
    let (p_fin, p_sup, p_term) = tracked(&perturbed, &io)?;
    let diff = state_diff(&e_fin, &p_fin);
    let conv = e_term == Termination::Converged && p_term == Termination::Converged;
    Ok((
        conv && p_sup <= 10.0 * e_sup && diff <= 1e-4,
        format!(
            "sup-norm {p_sup:.3} vs exact {e_sup:.3} (ratio {:.3}), final state gap {diff:.1e}",
            p_sup / e_sup
        ),
    ))
}

fn risk_grid() -> Outcome {
    let opts = ExperimentOptions { seed: SEED, ..Default::default() };
    let ExperimentOutcome::Grid(c) = run_experiment("fig5_risk_grid", &opts)? else {
        return Ok((false, "risk grid returned a single run".into()));
    };
    let conv = c.iter().all(|g| g.termination == Termination::Converged);
    // Cells: [seeking/seeking, seeking/averse, averse/seeking, averse/averse].
    let work = c[0].autonomous_workload - c[3].autonomous_workload;
    let cost_s = c[0].total_cost - c[2].total_cost;
    let cost_a = c[1].total_cost - c[3].total_cost;
    Ok((
        conv && work >= 1e-6 && cost_s >= 1e-6 && cost_a >= 1e-6,
        format!(
            "autonomous workload seeking/seeking − averse/averse = {work:.3}; cost(h1 seeking) − cost(h1 averse) = {cost_s:.3} (h2 seeking), {cost_a:.3} (h2 averse)"
        ),
    ))
}

fn cross_validation() -> Outcome {
    let mut worst = 0.0f64;
    let mut unconverged = 0;
    for seed in 1..=10 {
        let s = fig4_scenario(seed)?;
        let sol = solve_centralized(&s)?;
        let mut io = IntegrateOptions::from_solver(s.solver());
        io.tolerance = 1e-10;
        io.max_time = 1000.0;
        let (fin, rec) = integrate(&s, &io)?;
        if rec.termination != Termination::Converged {
            unconverged += 1;
        }
        let value = s.objective(&fin.x, &s.responses(&fin.x, fin.t)?)?;
        worst = worst.max((value - sol.value).abs() / sol.value.abs().max(1.0));
    }
    Ok((
        worst <= 1e-5 && unconverged == 0,
        format!("10 scenarios, max relative value gap {worst:.2e}, {unconverged} unconverged"),
    ))
}

type Reported = Result<(bool, String), String>;

fn main() {
    let mut results: Vec<(u32, &str, Reported)> = Vec::new();
    let mut add = |n, name, o: Outcome| results.push((n, name, o.map_err(|e| e.to_string())));
    match fig4_distributed() {
        Ok((run, wall)) => {
            add(1, "convergence", convergence(&run, wall));
            add(5, "KKT at equilibrium", kkt(&run));
        }
        Err(e) => {
            let msg = e.to_string();
            add(1, "convergence", Err(e));
            results.push((5, "KKT at equilibrium", Err(msg)));
        }
    }
    let mut add = |n, name, o: Outcome| results.push((n, name, o.map_err(|e| e.to_string())));
    add(2, "feasibility equivalence", equivalence());
    add(3, "gradient fidelity", gradients());
    add(4, "Lyapunov monotonicity", lyapunov());
    add(6, "compact = distributed, locality", distributed());
    add(7, "approximate human model", approximation());
    add(8, "risk-attitude directionality", risk_grid());
    add(9, "oracle cross-validation", cross_validation());
    results.sort_by_key(|r| r.0);

    let mut failed = 0;
    for (n, name, outcome) in &results {
        let (ok, detail) = match outcome {
            Ok((ok, d)) => (*ok, d.clone()),
            Err(e) => (false, format!("error: {e}")),
        };
        if !ok {
            failed += 1;
        }
        println!("{} {n}. {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
