//! Command implementations. Each writes its CSV artifacts and fills the
//! summary scalars of the run record.

use std::io::Write;

use rode_core::bounds::{bound_chain, construct_worst_case, tightness_gap, wcnc_tube_probability, write_summary_csv, WorstCaseConfig};
use rode_core::control::{experiment_noise_aware_vs_blind, snr_sweep, ExperimentConfig, Mode};
use rode_core::geodesic::{inverse_control, rescaled_grid, shoot_geodesic, NoiseMetric, ShootingOptions};
use rode_core::noise::{enumerate_branches, NoiseGenerator, NoiseKind, NoiseTrajectory};
use rode_core::rode::{
    basis_state, ensemble_density, error_process, propagate, propagate_endpoint, trajectory_csv_header, ControlFunctions,
    ControlHamiltonian, UnitaryTrajectory,
};
use rode_core::stats;
use rode_core::NormKind;
use serde_json::{json, Value};

use crate::config::{Command, RunConfig};
use crate::{Artifacts, CliError, Summary};

pub fn execute(command: Command, cfg: &RunConfig, out: &mut Artifacts, summary: &mut Summary) -> Result<(), CliError> {
    match command {
        Command::Simulate => simulate(cfg, out, summary),
        Command::Bounds => bounds(cfg, out, summary),
        Command::Geodesic => geodesic(cfg, out, summary),
        Command::Optimize => optimize(cfg, out, summary),
        Command::Sweep => sweep(cfg, out, summary),
        Command::Wcnc => wcnc(cfg, out, summary),
        Command::Validate => Ok(()),
    }
}

fn control(cfg: &RunConfig) -> Result<ControlHamiltonian, CliError> {
    Ok(ControlHamiltonian::polynomial_flat(cfg.frame()?, cfg.drift()?, &cfg.coefficients(), cfg.problem.degree, cfg.problem.horizon)?)
}

fn coupling_metric(cfg: &RunConfig) -> Result<Option<NoiseMetric>, CliError> {
    Ok(if cfg.noise.coupled { Some(cfg.metric()?) } else { None })
}

/// `numeric.samples` noise paths with seeds `seed + i`.
fn ensemble(cfg: &RunConfig, ctrl: &ControlHamiltonian) -> Result<Vec<NoiseTrajectory>, CliError> {
    let grid = cfg.grid()?;
    let gen = NoiseGenerator::new(&cfg.noise_spec()?, &grid)?;
    let metric = coupling_metric(cfg)?;
    (0..cfg.numeric.samples)
        .map(|i| Ok(gen.sample(ctrl, metric.as_ref(), cfg.problem.eta, cfg.seed.wrapping_add(i as u64))?))
        .collect()
}

fn sup_envelope(noise: &[NoiseTrajectory]) -> f64 {
    noise.iter().flat_map(|n| n.envelope.iter().copied()).fold(0.0, f64::max)
}

fn write_states<W: Write>(w: &mut W, trajectories: &[(&str, usize, &UnitaryTrajectory)]) -> std::io::Result<()> {
    let dim = trajectories[0].2.endpoint().dim();
    let cols: Vec<String> = (0..dim).flat_map(|i| [format!("psi{i}_re"), format!("psi{i}_im")]).collect();
    writeln!(w, "sample_index,flavor,t,{}", cols.join(","))?;
    for (flavor, idx, traj) in trajectories {
        for (t, u) in traj.grid.points().iter().zip(&traj.values) {
            write!(w, "{idx},{flavor},{t:.12e}")?;
            for i in 0..dim {
                let z = u.matrix()[(i, 0)];
                write!(w, ",{:.12e},{:.12e}", z.re, z.im)?;
            }
            writeln!(w)?;
        }
    }
    Ok(())
}

fn matrix_json(m: &rode_core::su_algebra::CMatrix) -> Value {
    let rows: Vec<Value> = (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| json!([m[(i, j)].re, m[(i, j)].im])).collect()).collect();
    Value::Array(rows)
}

fn simulate(cfg: &RunConfig, out: &mut Artifacts, summary: &mut Summary) -> Result<(), CliError> {
    let grid = cfg.grid()?;
    let ctrl = control(cfg)?;
    let u0 = propagate(&ctrl, None, &grid)?;
    let noise = ensemble(cfg, &ctrl)?;
    let paths: Vec<UnitaryTrajectory> = noise.iter().map(|n| propagate(&ctrl, Some(n), &grid)).collect::<Result<_, _>>()?;
    let dim = ctrl.dim();

    out.write("trajectories.csv", |w| {
        writeln!(w, "{}", trajectory_csv_header(dim))?;
        u0.write_csv_rows(w, 0)?;
        for (i, p) in paths.iter().enumerate() {
            p.write_csv_rows(w, i)?;
        }
        Ok(())
    })?;
    out.write("states.csv", |w| {
        let mut all = vec![("noiseless", 0, &u0)];
        all.extend(paths.iter().enumerate().map(|(i, p)| ("schrodinger", i, p)));
        write_states(w, &all)
    })?;
    out.write("noise.csv", |w| noise[0].write_csv(w))?;

    let ep = error_process(&paths, &u0, NormKind::Operator)?;
    let fro = error_process(&paths, &u0, NormKind::Frobenius)?;
    let k = sup_envelope(&noise);
    let integrals: Vec<Vec<f64>> = noise.iter().map(|n| grid.running_integral(&n.envelope)).collect();
    let geometric: Vec<f64> = (0..grid.len()).map(|i| integrals.iter().map(|v| v[i]).fold(0.0, f64::max)).collect();
    out.write("summary.csv", |w| write_summary_csv(w, &ep, k, &geometric))?;

    let slack = cfg.numeric.bound_slack;
    let linear_violations: usize =
        (0..grid.len()).map(|i| paths.iter().filter(|p| p.values[i].distance_in(&u0.values[i], NormKind::Operator) > k * grid.points()[i] + slack).count()).sum();
    summary.set("samples", paths.len());
    summary.num("max_error_op", stats::max(&ep.max));
    summary.num("max_error_fro", stats::max(&fro.max));
    summary.num("final_mean_error_op", *ep.mean.last().unwrap());
    summary.num("max_unitarity_defect", paths.iter().chain([&u0]).map(|p| p.max_unitarity_defect()).fold(0.0, f64::max));
    summary.num("envelope_sup", k);
    summary.set("linear_bound_violations", linear_violations);

    let psi0 = basis_state(dim, 0);
    let states: Vec<_> = paths.iter().map(|p| p.endpoint().apply(&psi0)).collect();
    let rho = ensemble_density(&states, None)?;
    summary.num("purity", rho.purity());
    summary.set("density", matrix_json(rho.matrix()));
    let spec = cfg.noise_spec()?;
    if spec.kind == NoiseKind::MixedUnitary {
        let branches = enumerate_branches(&spec, ctrl.frame(), &grid)?;
        let weights: Vec<f64> = branches.iter().map(|b| b.0).collect();
        let exact: Vec<_> = branches
            .iter()
            .map(|(_, n)| Ok(propagate_endpoint(&ctrl, Some(n), &grid)?.apply(&psi0)))
            .collect::<Result<_, CliError>>()?;
        let rho = ensemble_density(&exact, Some(&weights))?;
        summary.num("exact_purity", rho.purity());
        summary.set("exact_density", matrix_json(rho.matrix()));
    }
    Ok(())
}

fn bounds(cfg: &RunConfig, out: &mut Artifacts, summary: &mut Summary) -> Result<(), CliError> {
    let grid = cfg.grid()?;
    let ctrl = control(cfg)?;
    let u0 = propagate(&ctrl, None, &grid)?;
    let noise = ensemble(cfg, &ctrl)?;
    let k = sup_envelope(&noise);
    let chains: Vec<_> = noise.iter().map(|n| bound_chain(&ctrl, &u0, n, k)).collect::<Result<_, _>>()?;
    let slack = cfg.numeric.bound_slack;
    let colmax = |f: &dyn Fn(&rode_core::bounds::BoundChain) -> &Vec<f64>| -> Vec<f64> {
        (0..grid.len()).map(|i| chains.iter().map(|c| f(c)[i]).fold(0.0, f64::max)).collect()
    };
    let cols = [
        colmax(&|c| &c.err_op),
        colmax(&|c| &c.err_fro),
        colmax(&|c| &c.interaction_distance),
        colmax(&|c| &c.pathwise_integral),
        colmax(&|c| &c.envelope_integral),
        colmax(&|c| &c.linear),
    ];
    out.write("bounds.csv", |w| {
        writeln!(w, "t,max_err_op,max_err_fro,max_interaction_distance,max_pathwise_integral,max_envelope_integral,linear_bound")?;
        for (i, t) in grid.points().iter().enumerate() {
            write!(w, "{t:.12e}")?;
            for c in &cols {
                write!(w, ",{:.12e}", c[i])?;
            }
            writeln!(w)?;
        }
        Ok(())
    })?;
    summary.set("samples", chains.len());
    summary.num("envelope_sup", k);
    summary.set("chain_violations", chains.iter().map(|c| c.violations(slack)).sum::<usize>());
    summary.set("linear_bound_violations", chains.iter().map(|c| c.linear_violations(slack)).sum::<usize>());

    // Worst-case construction along the first envelope, constant direction
    // equal to the first frame element.
    let direction = ctrl.frame().element(0).clone();
    let envelope = noise[0].envelope.clone();
    let mut rows = Vec::new();
    for (i, &eps) in cfg.numeric.tightness_epsilons.iter().enumerate() {
        let wc = WorstCaseConfig::new(direction.clone(), eps, envelope.clone(), cfg.seed.wrapping_add(i as u64))?;
        let n = construct_worst_case(&ctrl, &wc, &grid)?;
        let gap = tightness_gap(&ctrl, &n)?;
        rows.push((eps, *gap.last().unwrap(), gap.iter().map(|g| g.abs()).fold(0.0, f64::max)));
    }
    out.write("tightness.csv", |w| {
        writeln!(w, "epsilon,final_gap,max_abs_gap")?;
        for (e, g, m) in &rows {
            writeln!(w, "{e:.6e},{g:.12e},{m:.12e}")?;
        }
        Ok(())
    })?;
    summary.set("tightness_gaps", rows.iter().map(|r| json!({"epsilon": r.0, "final_gap": r.1})).collect::<Vec<_>>());
    Ok(())
}

fn geodesic(cfg: &RunConfig, out: &mut Artifacts, summary: &mut Summary) -> Result<(), CliError> {
    let metric = cfg.metric()?;
    let target = cfg.target()?;
    let opts = ShootingOptions {
        tol: cfg.numeric.shooting_tolerance,
        max_restarts: cfg.numeric.shooting_restarts,
        steps: cfg.numeric.shooting_steps,
        seed: cfg.seed,
        ..ShootingOptions::default()
    };
    let sol = shoot_geodesic(&metric, &target, &opts)?;
    out.write("geodesic.csv", |w| sol.write_csv(w))?;

    // Controls steering the noiseless system along the reversed geodesic,
    // so U₀(T) = x(1)†.
    let horizon = cfg.problem.horizon;
    let ctrl = inverse_control(&sol, cfg.frame()?, cfg.drift()?, horizon)?;
    let grid = rescaled_grid(&sol, horizon)?;
    let u = propagate_endpoint(&ctrl, None, &grid)?;
    let control_residual = (u.matrix() - sol.endpoint().adjoint().matrix()).norm();
    if let ControlFunctions::Sampled { times, values } = ctrl.controls() {
        out.write("geodesic_controls.csv", |w| {
            let m = values[0].len();
            let h: Vec<String> = (0..m).map(|a| format!("h{a}")).collect();
            writeln!(w, "t,{}", h.join(","))?;
            for (t, v) in times.iter().zip(values) {
                write!(w, "{t:.12e}")?;
                for x in v {
                    write!(w, ",{x:.12e}")?;
                }
                writeln!(w)?;
            }
            Ok(())
        })?;
    }
    summary.num("length", sol.length);
    summary.num("endpoint_residual", sol.endpoint_residual);
    summary.num("speed_drift", sol.speed_drift);
    summary.set("iterations", sol.iterations);
    summary.set("restarts", sol.restarts);
    summary.set("v0", sol.v0.clone());
    summary.num("control_residual", control_residual);
    if !sol.converged {
        return Err(CliError::NotConverged(format!("geodesic shooting residual {:.3e}", sol.endpoint_residual)));
    }
    Ok(())
}

fn experiment_config(cfg: &RunConfig) -> Result<ExperimentConfig, CliError> {
    Ok(ExperimentConfig {
        num_controls: cfg.numeric.num_controls,
        samples: cfg.numeric.samples,
        seed: cfg.seed,
        noise: cfg.noise_spec()?,
        optimize: cfg.optimize_options(),
    })
}

fn optimize(cfg: &RunConfig, out: &mut Artifacts, summary: &mut Summary) -> Result<(), CliError> {
    let problem = cfg.optimization_problem()?;
    let cmp = experiment_noise_aware_vs_blind(&problem, &experiment_config(cfg)?)?;
    out.write("fig2_errors.csv", |w| cmp.write_errors_csv(w))?;
    out.write("optimize_controls.csv", |w| {
        let n = problem.num_coefficients();
        let c: Vec<String> = (0..n).map(|i| format!("c{i}")).collect();
        writeln!(w, "control_index,mode,cost,blind_cost,path_length,mean_err_op,mean_err_fro,converged,{}", c.join(","))?;
        for o in &cmp.outcomes {
            let r = &o.result;
            write!(
                w,
                "{},{},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{}",
                o.control_index,
                o.mode.tag(),
                r.cost,
                r.blind_cost,
                r.path_length,
                o.stats.mean_op,
                o.stats.mean_fro,
                r.converged
            )?;
            for x in &r.coefficients {
                write!(w, ",{x:.12e}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    })?;
    let unconverged = cmp.outcomes.iter().filter(|o| !o.result.converged).count();
    summary.set("num_controls", cfg.numeric.num_controls);
    summary.set("samples", cfg.numeric.samples);
    summary.num("eta", cmp.eta);
    summary.num("mean_blind_err_op", cmp.mean_blind_op);
    summary.num("mean_aware_err_op", cmp.mean_aware_op);
    summary.num("mean_blind_err_fro", cmp.mean_blind_fro);
    summary.num("mean_aware_err_fro", cmp.mean_aware_fro);
    summary.num("ratio", cmp.ratio);
    summary.num("paired_diff_mean", cmp.diff_mean);
    summary.num("paired_diff_ci_lo", cmp.diff_ci.0);
    summary.num("paired_diff_ci_hi", cmp.diff_ci.1);
    summary.set("aware_significantly_better", cmp.aware_significantly_better());
    summary.set("unconverged_optimizations", unconverged);
    if unconverged > 0 {
        return Err(CliError::NotConverged(format!("{unconverged} optimizations stopped at the evaluation budget")));
    }
    Ok(())
}

fn sweep(cfg: &RunConfig, out: &mut Artifacts, summary: &mut Summary) -> Result<(), CliError> {
    let problem = cfg.optimization_problem()?;
    let res = snr_sweep(&problem, &cfg.numeric.etas, &experiment_config(cfg)?)?;
    out.write("fig3_sweep.csv", |w| res.write_csv(w))?;
    out.write("fig3_sweep_fro.csv", |w| res.write_frobenius_csv(w))?;
    let aware = res.linear_fit(Mode::Aware);
    let blind = res.linear_fit(Mode::Blind);
    summary.set("etas", cfg.numeric.etas.clone());
    summary.set("num_controls", cfg.numeric.num_controls);
    summary.num("aware_slope", aware.slope);
    summary.num("aware_r_squared", aware.r_squared);
    summary.num("blind_slope", blind.slope);
    summary.num("blind_r_squared", blind.r_squared);
    summary.set("aware_not_worse_everywhere", res.comparisons.iter().all(|c| c.aware_not_worse()));
    summary.set("ratios", res.comparisons.iter().map(|c| if c.ratio.is_finite() { json!(c.ratio) } else { json!(c.ratio.to_string()) }).collect::<Vec<_>>());
    Ok(())
}

fn wcnc(cfg: &RunConfig, out: &mut Artifacts, summary: &mut Summary) -> Result<(), CliError> {
    let grid = cfg.grid()?;
    let ctrl = control(cfg)?;
    let u0 = propagate(&ctrl, None, &grid)?;
    let gen = NoiseGenerator::new(&cfg.noise_spec()?, &grid)?;
    let metric = coupling_metric(cfg)?;
    let eta = cfg.problem.eta;
    let sampler = |seed: u64| gen.sample(&ctrl, metric.as_ref(), eta, seed);
    let est = wcnc_tube_probability(sampler, &u0, &cfg.numeric.tube_epsilons, cfg.numeric.tube_samples, cfg.seed)?;
    out.write("wcnc.csv", |w| {
        writeln!(w, "epsilon,hits,samples,probability,ci_lo,ci_hi")?;
        for e in &est {
            writeln!(w, "{:.6e},{},{},{:.12e},{:.12e},{:.12e}", e.epsilon, e.hits, e.samples, e.probability, e.ci_lo, e.ci_hi)?;
        }
        Ok(())
    })?;
    summary.set("tube_samples", cfg.numeric.tube_samples);
    summary.set(
        "estimates",
        est.iter().map(|e| json!({"epsilon": e.epsilon, "probability": e.probability, "ci_lo": e.ci_lo, "ci_hi": e.ci_hi})).collect::<Vec<_>>(),
    );
    Ok(())
}
