//! Noise-induced error bounds and their tightness.
//!
//! For `dU/dt = −i(H₀ + H₁)U` the interaction-picture propagator
//! `U_I = U₀†U_S` satisfies
//! `‖U_S − U₀‖_op ≤ ‖U_S − U₀‖_F ≤ d_F(U_I, 𝟙) ≤ ∫‖H₁,I‖_F ≤ ∫Λ ≤ K t`.

use std::io::{self, Write};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{invalid, Result};
use crate::grid::TimeGrid;
use crate::noise::NoiseTrajectory;
use crate::rode::{
    interaction_propagator, interaction_transform, propagate, propagate_interaction, propagate_stepwise,
    ControlHamiltonian, ErrorProcess, UnitaryTrajectory,
};
use crate::stats::{self, LinearFit};
use crate::su_algebra::{frobenius_distance, CMatrix, HermitianOperator, NormKind, PauliFrame, UnitaryOperator};

/// `K·t`.
pub fn linear_bound(k: f64, t: f64) -> f64 {
    k * t
}

/// Running trapezoidal integral of a nonnegative integrand, e.g. `Λ(t)` or
/// `‖H₁(t, ω)‖_F`.
pub fn geometric_bound(integrand: &[f64], grid: &TimeGrid) -> Result<Vec<f64>> {
    if integrand.len() != grid.len() {
        return invalid(format!("expected {} integrand values, got {}", grid.len(), integrand.len()));
    }
    if let Some(x) = integrand.iter().find(|x| !(**x >= 0.0)) {
        return invalid(format!("integrand must be nonnegative, found {x}"));
    }
    Ok(grid.running_integral(integrand))
}

/// Every term of the inequality chain for one sample path, per grid time.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundChain {
    pub times: Vec<f64>,
    pub err_op: Vec<f64>,
    pub err_fro: Vec<f64>,
    pub interaction_distance: Vec<f64>,
    pub pathwise_integral: Vec<f64>,
    pub envelope_integral: Vec<f64>,
    pub linear: Vec<f64>,
}

impl BoundChain {
    /// Number of (time, link) pairs where a link of the chain fails by more
    /// than `slack`.
    pub fn violations(&self, slack: f64) -> usize {
        let mut count = 0;
        for k in 0..self.times.len() {
            let chain = [
                self.err_op[k],
                self.err_fro[k],
                self.interaction_distance[k],
                self.pathwise_integral[k],
                self.envelope_integral[k],
                self.linear[k],
            ];
            count += chain.windows(2).filter(|w| w[0] > w[1] + slack).count();
        }
        count
    }

    /// Violations of `‖U_S − U₀‖_op ≤ K t + slack` only.
    pub fn linear_violations(&self, slack: f64) -> usize {
        self.err_op.iter().zip(&self.linear).filter(|(e, b)| **e > **b + slack).count()
    }
}

/// Evaluates the whole chain along one path. `k` is the essential bound on
/// `‖H₁‖_F` used for the linear term.
pub fn bound_chain(ctrl: &ControlHamiltonian, u0: &UnitaryTrajectory, noise: &NoiseTrajectory, k: f64) -> Result<BoundChain> {
    let grid = &noise.grid;
    let us = propagate(ctrl, Some(noise), grid)?;
    let hi = interaction_transform(u0, noise)?;
    let ui = propagate_interaction(ctrl.frame(), &hi)?;
    let id = UnitaryOperator::identity(ctrl.dim());
    let mut chain = BoundChain {
        times: grid.points().to_vec(),
        err_op: Vec::with_capacity(grid.len()),
        err_fro: Vec::with_capacity(grid.len()),
        interaction_distance: Vec::with_capacity(grid.len()),
        pathwise_integral: geometric_bound(&hi.frobenius_norms(), grid)?,
        envelope_integral: geometric_bound(&noise.envelope, grid)?,
        linear: grid.points().iter().map(|t| linear_bound(k, *t)).collect(),
    };
    for ((a, b), c) in us.values.iter().zip(&u0.values).zip(&ui.values) {
        chain.err_op.push(a.distance_in(b, NormKind::Operator));
        chain.err_fro.push(a.distance_in(b, NormKind::Frobenius));
        chain.interaction_distance.push(frobenius_distance(c, &id)?);
    }
    Ok(chain)
}

/// Ensemble summary CSV: `t,max_err,mean_err,q05,q95,linear_bound,geometric_bound`.
pub fn write_summary_csv<W: Write>(out: &mut W, ep: &ErrorProcess, k: f64, envelope_integral: &[f64]) -> io::Result<()> {
    writeln!(out, "t,max_err,mean_err,q05,q95,linear_bound,geometric_bound")?;
    for i in 0..ep.times.len() {
        let t = ep.times[i];
        writeln!(
            out,
            "{t:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e}",
            ep.max[i],
            ep.mean[i],
            ep.q05[i],
            ep.q95[i],
            linear_bound(k, t),
            envelope_integral[i]
        )?;
    }
    Ok(())
}

/// Adversarial noise specification: constant interaction-picture direction
/// `Ĥ₀`, envelope `Λ`, and a perturbation size `ε`.
#[derive(Debug, Clone, PartialEq)]
pub struct WorstCaseConfig {
    pub direction: HermitianOperator,
    pub epsilon: f64,
    pub envelope: Vec<f64>,
    pub seed: u64,
}

impl WorstCaseConfig {
    pub fn new(direction: HermitianOperator, epsilon: f64, envelope: Vec<f64>, seed: u64) -> Result<Self> {
        let n = direction.frobenius_norm();
        if (n - 1.0).abs() > 1e-10 {
            return invalid(format!("worst-case direction must have unit Frobenius norm, got {n}"));
        }
        if !(epsilon >= 0.0) || !epsilon.is_finite() {
            return invalid(format!("epsilon must be nonnegative, got {epsilon}"));
        }
        if envelope.iter().any(|l| !(*l >= 0.0)) {
            return invalid("envelope must be nonnegative");
        }
        Ok(Self { direction, epsilon, envelope, seed })
    }
}

fn random_unit_direction(frame: &PauliFrame, rng: &mut ChaCha8Rng) -> HermitianOperator {
    loop {
        let c: Vec<f64> = (0..frame.len()).map(|_| StandardNormal.sample(rng)).collect();
        let n = c.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            let c: Vec<f64> = c.iter().map(|x| x / n).collect();
            return frame.combine_unchecked(&c);
        }
    }
}

/// `H₁,S(t) = U₀(t) Λ(t) D(t) U₀(t)†` with `D(t)` the normalization of
/// `Ĥ₀ + ε R(t)`, `R(t)` a fresh seeded uniform unit direction per grid
/// point. At `ε = 0` the interaction picture is exactly `Λ(t)Ĥ₀`.
pub fn construct_worst_case(ctrl: &ControlHamiltonian, cfg: &WorstCaseConfig, grid: &TimeGrid) -> Result<NoiseTrajectory> {
    if cfg.envelope.len() != grid.len() {
        return invalid(format!("envelope has {} values, grid has {}", cfg.envelope.len(), grid.len()));
    }
    if cfg.direction.dim() != ctrl.dim() {
        return invalid("worst-case direction dimension does not match the control");
    }
    let u0 = propagate(ctrl, None, grid)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let values = u0
        .values
        .iter()
        .zip(&cfg.envelope)
        .map(|(u, &lam)| {
            let d = if cfg.epsilon > 0.0 {
                let r = random_unit_direction(ctrl.frame(), &mut rng);
                let p = cfg.direction.add_scaled(&r, cfg.epsilon);
                let n = p.frobenius_norm();
                if n > 0.0 { p.scale(1.0 / n) } else { cfg.direction.clone() }
            } else {
                cfg.direction.clone()
            };
            d.scale(lam).transform_by(u)
        })
        .collect();
    Ok(NoiseTrajectory { grid: grid.clone(), values, envelope: cfg.envelope.clone(), seed: cfg.seed })
}

/// `∫₀ᵗ Λ − d_F(U_I(t), 𝟙)` with `U_I` integrated directly from the
/// interaction-picture noise `U₀† H₁ U₀`.
pub fn tightness_gap(ctrl: &ControlHamiltonian, noise: &NoiseTrajectory) -> Result<Vec<f64>> {
    let u0 = propagate(ctrl, None, &noise.grid)?;
    let ui = propagate_interaction(ctrl.frame(), &interaction_transform(&u0, noise)?)?;
    gap_from(&ui, noise)
}

/// Same gap with `U_I = U₀† U_S` from two Schrödinger-picture propagations.
pub fn tightness_gap_schrodinger(ctrl: &ControlHamiltonian, noise: &NoiseTrajectory) -> Result<Vec<f64>> {
    let u0 = propagate(ctrl, None, &noise.grid)?;
    let us = propagate(ctrl, Some(noise), &noise.grid)?;
    gap_from(&interaction_propagator(&u0, &us)?, noise)
}

fn gap_from(ui: &UnitaryTrajectory, noise: &NoiseTrajectory) -> Result<Vec<f64>> {
    let integral = geometric_bound(&noise.envelope, &noise.grid)?;
    let id = UnitaryOperator::identity(noise.dim());
    ui.values
        .iter()
        .zip(&integral)
        .map(|(u, i)| Ok(i - frobenius_distance(u, &id)?))
        .collect()
}

/// Tube-event estimate for one `ε`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TubeEstimate {
    pub epsilon: f64,
    pub hits: usize,
    pub samples: usize,
    pub probability: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

/// Largest deviations of one path from the tube: direction distance
/// `‖Ĥ_I(t) − Ĥ_I(0)‖_F` and amplitude shortfall `Λ(t) − λ(t)`, maximized
/// over grid times.
pub fn tube_deviation(u0: &UnitaryTrajectory, noise: &NoiseTrajectory) -> Result<(f64, f64)> {
    let hi = interaction_transform(u0, noise)?;
    let unit = |h: &HermitianOperator| {
        let n = h.frobenius_norm();
        if n > 0.0 { h.scale(1.0 / n) } else { h.clone() }
    };
    let d0 = unit(&hi.values[0]);
    let mut dir: f64 = 0.0;
    let mut amp: f64 = f64::NEG_INFINITY;
    for (h, lam) in hi.values.iter().zip(&noise.envelope) {
        dir = dir.max(unit(h).sub(&d0).frobenius_norm());
        amp = amp.max(lam - h.frobenius_norm());
    }
    Ok((dir, amp))
}

/// Fraction of `n` sampled paths that stay in the rotating `ε`-tube at every
/// grid point, for each `ε`, on common sample paths `sampler(seed + i)`.
pub fn wcnc_tube_probability<F>(
    sampler: F,
    u0: &UnitaryTrajectory,
    epsilons: &[f64],
    n: usize,
    seed: u64,
) -> Result<Vec<TubeEstimate>>
where
    F: Fn(u64) -> Result<NoiseTrajectory> + Sync,
{
    if n == 0 {
        return invalid("tube probability needs at least one sample");
    }
    if let Some(e) = epsilons.iter().find(|e| !(**e > 0.0)) {
        return invalid(format!("epsilon must be positive, got {e}"));
    }
    let devs: Vec<(f64, f64)> = (0..n)
        .into_par_iter()
        .map(|i| tube_deviation(u0, &sampler(seed.wrapping_add(i as u64))?))
        .collect::<Result<_>>()?;
    Ok(epsilons
        .iter()
        .map(|&eps| {
            let hits = devs.iter().filter(|(d, a)| *d < eps && *a < eps).count();
            let (lo, hi) = stats::wilson_interval(hits, n, 1.96);
            TubeEstimate { epsilon: eps, hits, samples: n, probability: hits as f64 / n as f64, ci_lo: lo, ci_hi: hi }
        })
        .collect())
}

/// Deviation statistics for one block length.
#[derive(Debug, Clone, PartialEq)]
pub struct DecorrelationRow {
    pub delta: f64,
    /// `‖mean_ω U_S(T, ω) − U₀(T)‖_F`, averaged over replicates.
    pub mean_propagator_deviation: f64,
    /// `mean_ω ‖U_S(T, ω) − U₀(T)‖_F`, averaged over replicates.
    pub mean_pathwise_deviation: f64,
    pub replicate_propagator_deviation: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecorrelationStudy {
    pub rows: Vec<DecorrelationRow>,
    pub propagator_fit: LinearFit,
    pub pathwise_fit: LinearFit,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecorrelationOptions {
    pub amplitude: f64,
    pub samples: usize,
    pub replicates: usize,
    pub seed: u64,
}

/// Piecewise-constant noise with an independent uniform direction of norm
/// `K` on each block of length `δ`; blocks must align with the grid.
fn block_noise(frame: &PauliFrame, grid: &TimeGrid, delta: f64, k: f64, seed: u64) -> Result<Vec<CMatrix>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(grid.steps());
    let mut current: Option<(usize, CMatrix)> = None;
    for s in 0..grid.steps() {
        let block = ((grid.midpoint(s) / delta).floor()) as usize;
        match &current {
            Some((b, _)) if *b == block => {}
            _ => {
                let h = random_unit_direction(frame, &mut rng).scale(k).into_matrix();
                current = Some((block, h));
            }
        }
        out.push(current.as_ref().unwrap().1.clone());
    }
    Ok(out)
}

fn check_blocks(grid: &TimeGrid, delta: f64) -> Result<()> {
    let horizon = grid.horizon();
    let ratio = horizon / delta;
    if !(delta > 0.0) || (ratio - ratio.round()).abs() > 1e-9 {
        return invalid(format!("block length {delta} does not divide the horizon {horizon}"));
    }
    let steps_per_block = grid.steps() as f64 / ratio;
    if (steps_per_block - steps_per_block.round()).abs() > 1e-9 || steps_per_block.round() < 1.0 {
        return invalid(format!("block length {delta} is not a whole number of grid steps"));
    }
    Ok(())
}

/// Ensemble deviation of the propagator from `U₀(T)` as the noise
/// correlation time `δ` shrinks at fixed amplitude.
pub fn decorrelation_study(
    ctrl: &ControlHamiltonian,
    grid: &TimeGrid,
    deltas: &[f64],
    opts: &DecorrelationOptions,
) -> Result<DecorrelationStudy> {
    if opts.samples == 0 || opts.replicates == 0 {
        return invalid("decorrelation study needs samples and replicates");
    }
    if deltas.len() < 2 {
        return invalid("decorrelation study needs at least two block lengths");
    }
    for &d in deltas {
        check_blocks(grid, d)?;
    }
    let frame: Arc<PauliFrame> = ctrl.frame().clone();
    let u0 = crate::rode::propagate_endpoint(ctrl, None, grid)?;
    let dim = ctrl.dim();
    let mut rows = Vec::with_capacity(deltas.len());
    for (di, &delta) in deltas.iter().enumerate() {
        let mut rep_prop = Vec::with_capacity(opts.replicates);
        let mut rep_path = Vec::with_capacity(opts.replicates);
        for r in 0..opts.replicates {
            let base = opts
                .seed
                .wrapping_add((di as u64) << 40)
                .wrapping_add((r as u64) * opts.samples as u64);
            let ends: Vec<CMatrix> = (0..opts.samples)
                .into_par_iter()
                .map(|i| {
                    let noise = block_noise(&frame, grid, delta, opts.amplitude, base.wrapping_add(i as u64))?;
                    Ok(propagate_stepwise(ctrl, &noise, grid)?.endpoint().matrix().clone())
                })
                .collect::<Result<_>>()?;
            let mut mean = CMatrix::zeros(dim, dim);
            let mut path = 0.0;
            for e in &ends {
                mean += e;
                path += (e - u0.matrix()).norm();
            }
            mean /= crate::su_algebra::C64::new(opts.samples as f64, 0.0);
            rep_prop.push((mean - u0.matrix()).norm());
            rep_path.push(path / opts.samples as f64);
        }
        rows.push(DecorrelationRow {
            delta,
            mean_propagator_deviation: stats::mean(&rep_prop),
            mean_pathwise_deviation: stats::mean(&rep_path),
            replicate_propagator_deviation: rep_prop,
        });
    }
    let ld: Vec<f64> = rows.iter().map(|r| r.delta.ln()).collect();
    let lp: Vec<f64> = rows.iter().map(|r| r.mean_propagator_deviation.ln()).collect();
    let lw: Vec<f64> = rows.iter().map(|r| r.mean_pathwise_deviation.ln()).collect();
    Ok(DecorrelationStudy { propagator_fit: stats::linear_fit(&ld, &lp), pathwise_fit: stats::linear_fit(&ld, &lw), rows })
}
