//! End-to-end checks across modules: sampled noise through propagation and
//! bounds, and geodesics turned into controls.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rode_core::bounds::{bound_chain, construct_worst_case, tightness_gap, WorstCaseConfig};
use rode_core::geodesic::{inverse_control, rescaled_grid, shoot_geodesic, NoiseMetric, ShootingOptions};
use rode_core::noise::{MaternConfig, NoiseGenerator, NoiseModelSpec};
use rode_core::rode::{error_process, propagate, propagate_endpoint, ControlHamiltonian};
use rode_core::su_algebra::{pauli_word, random_special_unitary, NormKind};
use rode_core::{PauliFrame, TimeGrid};

fn su2() -> Arc<PauliFrame> {
    Arc::new(PauliFrame::from_qubits(1).unwrap())
}

fn control(seed: u64) -> ControlHamiltonian {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flat: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
    ControlHamiltonian::polynomial_flat(su2(), pauli_word("Y").unwrap().scale(0.5), &flat, 3, 1.0).unwrap()
}

#[test]
fn sampled_noise_respects_bound_chain() {
    let grid = TimeGrid::with_resolution(1.0, 200).unwrap();
    let ctrl = control(1);
    let spec = NoiseModelSpec::squashed_matern(MaternConfig { nu: 1.5, length_scale: 0.3, amplitude: 1.0 }, 0.7);
    let gen = NoiseGenerator::new(&spec, &grid).unwrap();
    let u0 = propagate(&ctrl, None, &grid).unwrap();
    let mut ensemble = Vec::new();
    for seed in 0..20 {
        let n = gen.sample(&ctrl, None, 1.0, seed).unwrap();
        let chain = bound_chain(&ctrl, &u0, &n, 0.7).unwrap();
        // Slack covers the trapezoid quadrature of the integrals.
        assert_eq!(chain.violations(1e-6), 0, "seed {seed}");
        assert_eq!(chain.linear_violations(1e-9), 0, "seed {seed}");
        let us = propagate(&ctrl, Some(&n), &grid).unwrap();
        assert!(us.max_unitarity_defect() < 1e-12);
        ensemble.push(us);
    }
    let ep = error_process(&ensemble, &u0, NormKind::Operator).unwrap();
    assert!(ep.mean[0].abs() < 1e-14);
    assert!(ep.max.iter().zip(grid.points()).all(|(e, t)| *e <= 0.7 * t + 1e-9));
}

#[test]
fn worst_case_gap_shrinks_with_epsilon() {
    let grid = TimeGrid::with_resolution(1.0, 200).unwrap();
    let ctrl = control(2);
    let env = vec![0.5; grid.len()];
    let mut last = f64::INFINITY;
    for eps in [0.2, 0.02, 0.0] {
        let cfg = WorstCaseConfig::new(su2().element(1).clone(), eps, env.clone(), 9).unwrap();
        let n = construct_worst_case(&ctrl, &cfg, &grid).unwrap();
        let gap = tightness_gap(&ctrl, &n).unwrap().iter().map(|g| g.abs()).fold(0.0, f64::max);
        assert!(gap <= last + 1e-15, "eps {eps}: {gap} after {last}");
        last = gap;
    }
    assert!(last < 1e-10);
}

#[test]
fn geodesic_controls_reach_inverse_endpoint() {
    let metric = NoiseMetric::new(su2(), vec![1.0, 0.5, 0.2]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..3 {
        let target = random_special_unitary(2, &mut rng);
        let sol = shoot_geodesic(&metric, &target, &ShootingOptions::default()).unwrap();
        assert!(sol.converged && sol.endpoint_residual < 1e-6);
        for horizon in [1.0, 2.5] {
            let ctrl = inverse_control(&sol, su2(), pauli_word("X").unwrap().scale(0.3), horizon).unwrap();
            let grid = rescaled_grid(&sol, horizon).unwrap();
            let u = propagate_endpoint(&ctrl, None, &grid).unwrap();
            assert!((u.matrix() - sol.endpoint().adjoint().matrix()).norm() < 1e-10);
        }
    }
}
