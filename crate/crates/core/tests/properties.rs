use nalgebra::DVector;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use teamalloc::dynamics::agent::SyncNetwork;
use teamalloc::dynamics::{flow_rhs, integrate, step, IntegrateOptions, Reference, SystemState};
use teamalloc::harness::deviation_w;
use teamalloc::harness::presets::{random_scenario, RandomScenarioConfig};
use teamalloc::oracle::{kkt_residual, lift_saddle, solve_centralized};
use teamalloc::reformulation::{
    build_decoupled, coupled_residual, decoupled_residual, find_certificate_z, SplitPolicy,
};
use teamalloc::Scenario64;

fn scenario(seed: u64, softplus: bool) -> (Scenario64, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = RandomScenarioConfig { nodes: 3..=10, softplus, ..Default::default() };
    (random_scenario(&mut rng, &cfg).unwrap(), rng)
}

fn noise(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.gen_range(-scale..=scale))
}

fn random_state(s: &Scenario64, rng: &mut ChaCha8Rng) -> SystemState<f64> {
    let d = s.dimensions();
    SystemState {
        x: noise(rng, d.total_x, 2.0),
        z: noise(rng, d.multiplier_len(), 2.0),
        lambda: noise(rng, d.multiplier_len(), 2.0).abs(),
        t: 0.0,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn feasibility_status_is_split_independent(seed in any::<u64>(), scale in 0.01f64..2.0) {
        let (s, mut rng) = scenario(seed, false);
        let x = noise(&mut rng, s.dimensions().total_x, scale);
        let y = s.responses(&x, 0.0).unwrap();
        let coupled = coupled_residual(&s, &x, &y).unwrap();
        for policy in [SplitPolicy::FirstAgent, SplitPolicy::Uniform] {
            let dc = build_decoupled(&s, policy);
            let cert = find_certificate_z(&dc, &x, &y, &coupled).unwrap();
            prop_assert_eq!(cert.is_some(), coupled.max() <= 0.0);
            if let Some(z) = cert {
                prop_assert!(decoupled_residual(&dc, &x, &y, &z).unwrap().max() <= 1e-8);
            }
        }
    }

    #[test]
    fn flow_ignores_consensus_shift_of_z(seed in any::<u64>()) {
        let (s, mut rng) = scenario(seed, seed % 2 == 0);
        let dc = build_decoupled(&s, SplitPolicy::FirstAgent);
        let st = random_state(&s, &mut rng);
        let r = s.dimensions().rows;
        let w = noise(&mut rng, r, 3.0);
        let mut shifted = st.clone();
        shifted.z += DVector::from_element(s.dimensions().nodes(), 1.0).kronecker(&w);
        let a = flow_rhs(&s, &dc, &st).unwrap();
        let b = flow_rhs(&s, &dc, &shifted).unwrap();
        prop_assert!((a.dx - b.dx).amax() <= 1e-10);
        prop_assert!((a.dz - b.dz).amax() <= 1e-12);
        prop_assert!((a.dlambda - b.dlambda).amax() <= 1e-10);
    }

    #[test]
    fn multipliers_stay_nonnegative_and_sweeps_match_steps(seed in any::<u64>(), dt in 1e-3f64..5e-2) {
        let (s, mut rng) = scenario(seed, seed % 3 == 0);
        let dc = build_decoupled(&s, SplitPolicy::FirstAgent);
        let mut compact = random_state(&s, &mut rng);
        let mut net = SyncNetwork::new(&s, &dc, &compact).unwrap();
        for k in 0..40 {
            let t = (k + 1) as f64 * dt;
            compact = step(&s, &dc, &compact, dt).unwrap();
            compact.t = t;
            net.sweep(dt).unwrap();
            net.set_time(t);
            prop_assert!(compact.lambda.iter().all(|&l| l >= 0.0));
        }
        let d = net.state(&s);
        let gap = (&d.x - &compact.x).amax()
            .max((&d.z - &compact.z).amax())
            .max((&d.lambda - &compact.lambda).amax());
        prop_assert!(gap <= 1e-10 * (1.0 + compact.x.amax().max(compact.z.amax())));
    }

    #[test]
    fn lifted_optimum_is_a_kkt_equilibrium(seed in any::<u64>()) {
        let (s, _) = scenario(seed, false);
        let dc = build_decoupled(&s, SplitPolicy::FirstAgent);
        let sol = solve_centralized(&s).unwrap();
        let saddle = lift_saddle(&s, &dc, &sol).unwrap();
        let f = flow_rhs(&s, &dc, &saddle).unwrap();
        prop_assert!(f.dx.amax() <= 1e-6);
        prop_assert!(f.dz.amax() <= 1e-6);
        prop_assert!(f.dlambda.amax() <= 1e-6);
        prop_assert!(kkt_residual(&s, &dc, &saddle).unwrap().max() <= 1e-6);
    }
}

#[test]
fn final_sample_matches_returned_state() {
    let (s, _) = scenario(11, false);
    let sol = solve_centralized(&s).unwrap();
    let mut io = IntegrateOptions::from_solver(s.solver());
    io.max_time = 5.0;
    io.record_stride = 7;
    let reference = Reference { x: sol.x.clone(), y: sol.y.clone(), saddle: None };
    io.reference = Some(reference.clone());
    let (fin, rec) = integrate(&s, &io).unwrap();
    let w = deviation_w(&s, &fin, &reference).unwrap();
    assert!((rec.last().unwrap().w.unwrap() - w).abs() <= 1e-12);

    let (_, again) = integrate(&s, &io).unwrap();
    assert_eq!(rec.to_table(), again.to_table());
}
