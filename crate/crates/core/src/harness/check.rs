//! Instance-level verification: coupled/decoupled feasibility equivalence
//! and the analytic Lagrangian gradient.

use nalgebra::DVector;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dynamics::{gradient_check, SystemState};
use crate::error::Result;
use crate::human::ResponseFamily;
use crate::model::Scenario;
use crate::reformulation::{
    certificate_from_slack, coupled_residual, decoupled_residual, find_certificate_z,
    DecoupledConstraint,
};

/// Residual bound for both directions of the feasibility equivalence.
pub const EQUIVALENCE_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct EquivalenceReport {
    pub samples: usize,
    pub coupled_feasible: usize,
    /// Coupled-feasible samples whose certificate `z` made every block feasible.
    pub certified: usize,
    /// Decoupled-feasible `(x, y, z)` triples that were tested.
    pub decoupled_feasible: usize,
    pub max_certificate_residual: f64,
    pub max_coupled_residual: f64,
    pub counterexamples: usize,
}

impl EquivalenceReport {
    pub fn passed(&self) -> bool {
        self.counterexamples == 0
    }

    pub fn merge(&mut self, o: &EquivalenceReport) {
        self.samples += o.samples;
        self.coupled_feasible += o.coupled_feasible;
        self.certified += o.certified;
        self.decoupled_feasible += o.decoupled_feasible;
        self.max_certificate_residual = self.max_certificate_residual.max(o.max_certificate_residual);
        self.max_coupled_residual = self.max_coupled_residual.max(o.max_coupled_residual);
        self.counterexamples += o.counterexamples;
    }
}

fn noise(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.gen_range(-scale..=scale))
}

/// Samples `(x, y)` around `anchor` at mixed scales and checks both
/// directions of the feasibility equivalence.
///
/// For every coupled-feasible sample the certificate `z` must make the
/// decoupled residual `≤ 1e-8`. Each such sample also yields a decoupled
/// -feasible triple with the slack spread randomly over all blocks, plus the
/// raw random `z`; every decoupled-feasible triple must be coupled feasible.
pub fn theorem1_equivalence(
    scenario: &Scenario<f64>,
    dc: &DecoupledConstraint<f64>,
    anchor: &DVector<f64>,
    rng: &mut ChaCha8Rng,
    samples: usize,
) -> Result<EquivalenceReport> {
    let dims = scenario.dimensions();
    let r = dims.rows;
    let nodes = dims.nodes();
    let mut rep = EquivalenceReport {
        samples,
        ..Default::default()
    };
    let converse = |rep: &mut EquivalenceReport, x: &DVector<f64>, y: &DVector<f64>, z: &DVector<f64>| -> Result<()> {
        let d = decoupled_residual(dc, x, y, z)?;
        if d.max() <= 0.0 {
            rep.decoupled_feasible += 1;
            let c = coupled_residual(scenario, x, y)?.max();
            rep.max_coupled_residual = rep.max_coupled_residual.max(c);
            if c > EQUIVALENCE_TOLERANCE {
                rep.counterexamples += 1;
            }
        }
        Ok(())
    };
    for i in 0..samples {
        let scale = [1e-3, 0.05, 0.3, 1.0][i % 4];
        let x = anchor + noise(rng, dims.total_x, scale);
        let y = scenario.responses(&x, f64::INFINITY)? + noise(rng, dims.total_y, scale);
        let s = coupled_residual(scenario, &x, &y)?;
        let z_rand = noise(rng, dims.multiplier_len(), 1.0);
        converse(&mut rep, &x, &y, &z_rand)?;
        if s.max() > 0.0 {
            continue;
        }
        rep.coupled_feasible += 1;
        match find_certificate_z(dc, &x, &y, &s)? {
            Some(z) => {
                let worst = decoupled_residual(dc, &x, &y, &z)?.max();
                rep.max_certificate_residual = rep.max_certificate_residual.max(worst);
                if worst <= EQUIVALENCE_TOLERANCE {
                    rep.certified += 1;
                } else {
                    rep.counterexamples += 1;
                }
            }
            None => rep.counterexamples += 1,
        }
        if nodes > 1 {
            let weights: Vec<f64> = (0..nodes).map(|_| rng.gen_range(0.0..1.0)).collect();
            let total: f64 = weights.iter().sum();
            let mut slack = DVector::zeros(r * nodes);
            for (v, w) in weights.iter().enumerate() {
                for j in 0..r {
                    slack[v * r + j] = -s[j] * w / total;
                }
            }
            let blocks = dc.stacked(&x, &y)?;
            let mut z = certificate_from_slack(dc, &blocks, &slack)?;
            // Shift along the kernel of L̄; feasibility is unaffected.
            let w = noise(rng, r, 1.0);
            for v in 0..nodes {
                let mut b = z.rows_mut(v * r, r);
                b += &w;
            }
            converse(&mut rep, &x, &y, &z)?;
        }
    }
    Ok(rep)
}

/// Largest relative gradient error over `states` random states.
pub fn gradient_suite(
    scenario: &Scenario<f64>,
    dc: &DecoupledConstraint<f64>,
    rng: &mut ChaCha8Rng,
    states: usize,
) -> Result<f64> {
    let dims = scenario.dimensions();
    let mut worst = 0.0f64;
    for i in 0..states {
        let state = SystemState {
            x: noise(rng, dims.total_x, 1.5),
            z: noise(rng, dims.multiplier_len(), 1.0),
            lambda: if i == 0 {
                DVector::zeros(dims.multiplier_len())
            } else {
                noise(rng, dims.multiplier_len(), 1.0).abs()
            },
            t: 0.0,
        };
        worst = worst.max(gradient_check(scenario, dc, &state)?);
    }
    Ok(worst)
}

/// Gradient tolerance for a scenario: looser when any human is softplus.
pub fn gradient_tolerance(scenario: &Scenario<f64>) -> f64 {
    let smooth = (0..scenario.dimensions().h)
        .any(|k| matches!(scenario.human_model(k).family(), ResponseFamily::SoftplusAffine { .. }));
    if smooth {
        1e-4
    } else {
        1e-5
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckReport {
    pub equivalence: EquivalenceReport,
    pub gradient_max_error: f64,
    pub gradient_tolerance: f64,
    pub passed: bool,
}

pub fn check_scenario(
    scenario: &Scenario<f64>,
    dc: &DecoupledConstraint<f64>,
    anchor: &DVector<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<CheckReport> {
    let equivalence = theorem1_equivalence(scenario, dc, anchor, rng, 200)?;
    let gradient_max_error = gradient_suite(scenario, dc, rng, 50)?;
    let gradient_tolerance = gradient_tolerance(scenario);
    Ok(CheckReport {
        passed: equivalence.passed() && gradient_max_error <= gradient_tolerance,
        equivalence,
        gradient_max_error,
        gradient_tolerance,
    })
}
