//! Pathwise propagation of `dU/dt = −i(H₀(t) + H₁(t, ω))U`.
//!
//! Each step uses the midpoint exponential
//! `U_{k+1} = exp(−i H(t_k + Δ_k/2) Δ_k) U_k`, with the noise linearly
//! interpolated to the midpoint. The update is unitary by construction and
//! second-order accurate in the step size.

use std::io::{self, Write};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Matrix2};

use crate::error::{invalid, Result};
use crate::grid::TimeGrid;
use crate::noise::NoiseTrajectory;
use crate::stats;
use crate::su_algebra::{
    expm_skew_2x2, expm_skew_matrix, CMatrix, HermitianOperator, NormKind, PauliFrame,
    UnitaryOperator, C64,
};

pub const DEFAULT_DEGREE: usize = 5;

/// Time dependence of the control coefficients `u_j(t)`.
#[derive(Debug, Clone, PartialEq)]
pub enum ControlFunctions {
    /// `u_j(t) = Σ_k c_{j,k} t^k`; one coefficient row per frame direction.
    Polynomial(Vec<Vec<f64>>),
    /// Piecewise-linear interpolation of samples `values[k][j]` at `times[k]`.
    Sampled { times: Vec<f64>, values: Vec<Vec<f64>> },
}

/// `H₀(t) = H_d + Σ_j u_j(t) H_j` on `[0, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlHamiltonian {
    frame: Arc<PauliFrame>,
    drift: HermitianOperator,
    drift_coeffs: Vec<f64>,
    controls: ControlFunctions,
    horizon: f64,
}

fn horner(coeffs: &[f64], t: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, c| acc * t + c)
}

impl ControlHamiltonian {
    pub fn polynomial(
        frame: Arc<PauliFrame>,
        drift: HermitianOperator,
        coeffs: Vec<Vec<f64>>,
        horizon: f64,
    ) -> Result<Self> {
        if coeffs.len() != frame.len() {
            return invalid(format!(
                "expected {} coefficient rows (one per frame direction), got {}",
                frame.len(),
                coeffs.len()
            ));
        }
        if coeffs.iter().any(|r| r.iter().any(|c| !c.is_finite())) {
            return invalid("control coefficients must be finite");
        }
        Self::build(frame, drift, ControlFunctions::Polynomial(coeffs), horizon)
    }

    /// Polynomial control from a flat direction-major coefficient vector
    /// `[c_{0,0..=d}, c_{1,0..=d}, …]`.
    pub fn polynomial_flat(
        frame: Arc<PauliFrame>,
        drift: HermitianOperator,
        flat: &[f64],
        degree: usize,
        horizon: f64,
    ) -> Result<Self> {
        let width = degree + 1;
        if flat.len() != frame.len() * width {
            return invalid(format!(
                "expected {} coefficients for degree {degree}, got {}",
                frame.len() * width,
                flat.len()
            ));
        }
        let rows = flat.chunks(width).map(|c| c.to_vec()).collect();
        Self::polynomial(frame, drift, rows, horizon)
    }

    pub fn sampled(
        frame: Arc<PauliFrame>,
        drift: HermitianOperator,
        times: Vec<f64>,
        values: Vec<Vec<f64>>,
        horizon: f64,
    ) -> Result<Self> {
        if times.len() < 2 || times.len() != values.len() {
            return invalid("sampled control needs matching times/values with at least two samples");
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return invalid("sample times must be strictly increasing");
        }
        if values.iter().any(|v| v.len() != frame.len()) {
            return invalid("every sample needs one value per frame direction");
        }
        Self::build(frame, drift, ControlFunctions::Sampled { times, values }, horizon)
    }

    pub fn zero(frame: Arc<PauliFrame>, horizon: f64) -> Result<Self> {
        let dim = frame.dim();
        let rows = vec![vec![0.0]; frame.len()];
        Self::polynomial(frame, HermitianOperator::zeros(dim), rows, horizon)
    }

    fn build(
        frame: Arc<PauliFrame>,
        drift: HermitianOperator,
        controls: ControlFunctions,
        horizon: f64,
    ) -> Result<Self> {
        if drift.dim() != frame.dim() {
            return invalid(format!("drift is {}x{}, frame acts on dimension {}", drift.dim(), drift.dim(), frame.dim()));
        }
        if !(horizon > 0.0) || !horizon.is_finite() {
            return invalid(format!("horizon must be positive, got {horizon}"));
        }
        let drift_coeffs = frame.coefficients(&drift);
        Ok(Self { frame, drift, drift_coeffs, controls, horizon })
    }

    pub fn frame(&self) -> &Arc<PauliFrame> {
        &self.frame
    }

    pub fn dim(&self) -> usize {
        self.frame.dim()
    }

    pub fn drift(&self) -> &HermitianOperator {
        &self.drift
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn controls(&self) -> &ControlFunctions {
        &self.controls
    }

    /// Same frame, drift and horizon; new polynomial coefficients.
    pub fn with_flat_coefficients(&self, flat: &[f64], degree: usize) -> Result<Self> {
        Self::polynomial_flat(self.frame.clone(), self.drift.clone(), flat, degree, self.horizon)
    }

    fn check_time(&self, t: f64) -> Result<()> {
        let slack = 1e-12 * (1.0 + self.horizon);
        if !(t >= -slack && t <= self.horizon + slack) {
            return invalid(format!("t = {t} outside [0, {}]", self.horizon));
        }
        Ok(())
    }

    /// `u_j(t)` without range checks.
    pub(crate) fn controls_at_unchecked(&self, t: f64, out: &mut [f64]) {
        match &self.controls {
            ControlFunctions::Polynomial(rows) => {
                for (o, row) in out.iter_mut().zip(rows) {
                    *o = horner(row, t);
                }
            }
            ControlFunctions::Sampled { times, values } => {
                let last = times.len() - 1;
                let idx = match times.binary_search_by(|x| x.partial_cmp(&t).unwrap()) {
                    Ok(i) => i.min(last - 1),
                    Err(0) => 0,
                    Err(i) => (i - 1).min(last - 1),
                };
                let (t0, t1) = (times[idx], times[idx + 1]);
                let w = ((t - t0) / (t1 - t0)).clamp(0.0, 1.0);
                for (j, o) in out.iter_mut().enumerate() {
                    *o = (1.0 - w) * values[idx][j] + w * values[idx + 1][j];
                }
            }
        }
    }

    pub fn controls_at(&self, t: f64) -> Result<Vec<f64>> {
        self.check_time(t)?;
        let mut out = vec![0.0; self.frame.len()];
        self.controls_at_unchecked(t, &mut out);
        Ok(out)
    }

    /// Frame coefficients `h_j(t)` of the full control Hamiltonian, drift
    /// included. The identity part of the drift only contributes a global
    /// phase and has no frame component.
    pub fn frame_coefficients(&self, t: f64) -> Result<Vec<f64>> {
        let mut h = self.controls_at(t)?;
        for (x, d) in h.iter_mut().zip(&self.drift_coeffs) {
            *x += d;
        }
        Ok(h)
    }

    /// `H_d + Σ_j u_j(t) H_j`.
    pub fn evaluate(&self, t: f64) -> Result<HermitianOperator> {
        let u = self.controls_at(t)?;
        Ok(self.drift.add(&self.frame.combine_unchecked(&u)))
    }
}

/// Which propagator a [`UnitaryTrajectory`] holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flavor {
    Schrodinger,
    Noiseless,
    Interaction,
}

impl Flavor {
    pub fn tag(self) -> &'static str {
        match self {
            Flavor::Schrodinger => "schrodinger",
            Flavor::Noiseless => "noiseless",
            Flavor::Interaction => "interaction",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnitaryTrajectory {
    pub grid: TimeGrid,
    pub values: Vec<UnitaryOperator>,
    pub flavor: Flavor,
}

impl UnitaryTrajectory {
    pub fn endpoint(&self) -> &UnitaryOperator {
        self.values.last().unwrap()
    }

    pub fn max_unitarity_defect(&self) -> f64 {
        self.values.iter().map(|u| u.unitarity_defect()).fold(0.0, f64::max)
    }

    /// CSV rows `t,sample_index,u00_re,u00_im,…,flavor` (row-major entries).
    pub fn write_csv_rows<W: Write>(&self, out: &mut W, sample_index: usize) -> io::Result<()> {
        for (t, u) in self.grid.points().iter().zip(&self.values) {
            write!(out, "{t:.12e},{sample_index}")?;
            write_matrix_entries(out, u.matrix())?;
            writeln!(out, ",{}", self.flavor.tag())?;
        }
        Ok(())
    }
}

pub(crate) fn write_matrix_entries<W: Write>(out: &mut W, m: &CMatrix) -> io::Result<()> {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            let z = m[(i, j)];
            write!(out, ",{:.12e},{:.12e}", z.re, z.im)?;
        }
    }
    Ok(())
}

pub(crate) fn matrix_entry_header(prefix: &str, dim: usize) -> String {
    let mut cols = Vec::with_capacity(2 * dim * dim);
    for i in 0..dim {
        for j in 0..dim {
            cols.push(format!("{prefix}{i}{j}_re"));
            cols.push(format!("{prefix}{i}{j}_im"));
        }
    }
    cols.join(",")
}

pub fn trajectory_csv_header(dim: usize) -> String {
    format!("t,sample_index,{},flavor", matrix_entry_header("u", dim))
}

#[inline]
pub(crate) fn to_m2(m: &CMatrix) -> Matrix2<C64> {
    Matrix2::new(m[(0, 0)], m[(0, 1)], m[(1, 0)], m[(1, 1)])
}

#[inline]
pub(crate) fn from_m2(m: &Matrix2<C64>) -> CMatrix {
    CMatrix::from_row_slice(2, 2, &[m[(0, 0)], m[(0, 1)], m[(1, 0)], m[(1, 1)]])
}

/// Precomputed stepping data for a control Hamiltonian on a fixed grid.
enum Stepper<'a> {
    Qubit {
        ctrl: &'a ControlHamiltonian,
        drift: Matrix2<C64>,
        frame: Vec<Matrix2<C64>>,
    },
    General {
        ctrl: &'a ControlHamiltonian,
    },
}

impl<'a> Stepper<'a> {
    fn new(ctrl: &'a ControlHamiltonian) -> Self {
        if ctrl.dim() == 2 {
            Stepper::Qubit {
                ctrl,
                drift: to_m2(ctrl.drift.matrix()),
                frame: ctrl.frame.elements().iter().map(|b| to_m2(b.matrix())).collect(),
            }
        } else {
            Stepper::General { ctrl }
        }
    }
}

/// Noise contribution at the midpoint of step `k`.
pub(crate) enum MidpointNoise<'a> {
    None,
    Linear(&'a NoiseTrajectory),
    /// Caller-supplied per-step Hermitian matrices.
    PerStep(&'a [CMatrix]),
}

impl MidpointNoise<'_> {
    fn qubit(&self, k: usize) -> Option<Matrix2<C64>> {
        match self {
            MidpointNoise::None => None,
            MidpointNoise::Linear(n) => {
                let a = n.values[k].matrix();
                let b = n.values[k + 1].matrix();
                Some((to_m2(a) + to_m2(b)) * C64::new(0.5, 0.0))
            }
            MidpointNoise::PerStep(v) => Some(to_m2(&v[k])),
        }
    }

    fn general(&self, k: usize) -> Option<CMatrix> {
        match self {
            MidpointNoise::None => None,
            MidpointNoise::Linear(n) => {
                Some((n.values[k].matrix() + n.values[k + 1].matrix()) * C64::new(0.5, 0.0))
            }
            MidpointNoise::PerStep(v) => Some(v[k].clone()),
        }
    }
}

/// Runs the midpoint-exponential scheme, calling `visit(k, U_k)` at every
/// grid point.
pub(crate) fn run_steps(
    ctrl: &ControlHamiltonian,
    grid: &TimeGrid,
    noise: MidpointNoise<'_>,
    mut visit: impl FnMut(usize, &CMatrix),
) {
    let stepper = Stepper::new(ctrl);
    let m = ctrl.frame.len();
    let mut u_coeffs = vec![0.0; m];
    match stepper {
        Stepper::Qubit { ctrl, drift, frame } => {
            let mut u = Matrix2::<C64>::identity();
            visit(0, &from_m2(&u));
            for k in 0..grid.steps() {
                let tm = grid.midpoint(k).min(ctrl.horizon);
                ctrl.controls_at_unchecked(tm, &mut u_coeffs);
                let mut h = drift;
                for (c, b) in u_coeffs.iter().zip(&frame) {
                    h += b * C64::new(*c, 0.0);
                }
                if let Some(n) = noise.qubit(k) {
                    h += n;
                }
                u = expm_skew_2x2(&h, grid.dt(k)) * u;
                visit(k + 1, &from_m2(&u));
            }
        }
        Stepper::General { ctrl } => {
            let n = ctrl.dim();
            let mut u = CMatrix::identity(n, n);
            visit(0, &u);
            for k in 0..grid.steps() {
                let tm = grid.midpoint(k).min(ctrl.horizon);
                ctrl.controls_at_unchecked(tm, &mut u_coeffs);
                let mut h = ctrl.drift.matrix() + ctrl.frame.combine_unchecked(&u_coeffs).matrix();
                if let Some(nm) = noise.general(k) {
                    h += nm;
                }
                u = expm_skew_matrix(&h, grid.dt(k)) * u;
                visit(k + 1, &u);
            }
        }
    }
}

fn check_inputs(ctrl: &ControlHamiltonian, noise: Option<&NoiseTrajectory>, grid: &TimeGrid) -> Result<()> {
    if grid.horizon() > ctrl.horizon() * (1.0 + 1e-12) + 1e-12 {
        return invalid(format!("grid horizon {} exceeds control horizon {}", grid.horizon(), ctrl.horizon()));
    }
    if let Some(n) = noise {
        if !n.grid.matches(grid) {
            return invalid("noise grid does not match the propagation grid");
        }
        if n.dim() != ctrl.dim() {
            return invalid(format!("noise acts on dimension {}, control on {}", n.dim(), ctrl.dim()));
        }
    }
    Ok(())
}

/// Propagates the random Schrödinger equation along one noise path (or the
/// noiseless system when `noise` is `None`).
pub fn propagate(
    ctrl: &ControlHamiltonian,
    noise: Option<&NoiseTrajectory>,
    grid: &TimeGrid,
) -> Result<UnitaryTrajectory> {
    check_inputs(ctrl, noise, grid)?;
    let mut values = Vec::with_capacity(grid.len());
    let mid = noise.map_or(MidpointNoise::None, MidpointNoise::Linear);
    run_steps(ctrl, grid, mid, |_, u| values.push(UnitaryOperator::from_matrix_unchecked(u.clone())));
    let flavor = if noise.is_some() { Flavor::Schrodinger } else { Flavor::Noiseless };
    Ok(UnitaryTrajectory { grid: grid.clone(), values, flavor })
}

/// Endpoint `U(T)` only.
pub fn propagate_endpoint(
    ctrl: &ControlHamiltonian,
    noise: Option<&NoiseTrajectory>,
    grid: &TimeGrid,
) -> Result<UnitaryOperator> {
    check_inputs(ctrl, noise, grid)?;
    let mut last = None;
    let steps = grid.steps();
    let mid = noise.map_or(MidpointNoise::None, MidpointNoise::Linear);
    run_steps(ctrl, grid, mid, |k, u| {
        if k == steps {
            last = Some(u.clone());
        }
    });
    Ok(UnitaryOperator::from_matrix_unchecked(last.unwrap()))
}

/// Propagation with per-step midpoint noise matrices (e.g. piecewise-constant
/// noise that should not be interpolated across block boundaries).
pub fn propagate_stepwise(
    ctrl: &ControlHamiltonian,
    step_noise: &[CMatrix],
    grid: &TimeGrid,
) -> Result<UnitaryTrajectory> {
    check_inputs(ctrl, None, grid)?;
    if step_noise.len() != grid.steps() {
        return invalid(format!("expected {} step noise matrices, got {}", grid.steps(), step_noise.len()));
    }
    let mut values = Vec::with_capacity(grid.len());
    run_steps(ctrl, grid, MidpointNoise::PerStep(step_noise), |_, u| {
        values.push(UnitaryOperator::from_matrix_unchecked(u.clone()))
    });
    Ok(UnitaryTrajectory { grid: grid.clone(), values, flavor: Flavor::Schrodinger })
}

/// Midpoint-exponential propagation of an explicitly given Hamiltonian
/// `H(t)`, evaluated at step midpoints.
pub fn propagate_fn(
    dim: usize,
    hamiltonian: impl Fn(f64) -> CMatrix,
    grid: &TimeGrid,
) -> Result<UnitaryTrajectory> {
    let mut values = Vec::with_capacity(grid.len());
    let mut u = CMatrix::identity(dim, dim);
    values.push(UnitaryOperator::from_matrix_unchecked(u.clone()));
    for k in 0..grid.steps() {
        let h = hamiltonian(grid.midpoint(k));
        if h.nrows() != dim || h.ncols() != dim {
            return invalid(format!("Hamiltonian at t = {} is not {dim}x{dim}", grid.midpoint(k)));
        }
        u = if dim == 2 {
            from_m2(&(expm_skew_2x2(&to_m2(&h), grid.dt(k)) * to_m2(&u)))
        } else {
            expm_skew_matrix(&h, grid.dt(k)) * u
        };
        values.push(UnitaryOperator::from_matrix_unchecked(u.clone()));
    }
    Ok(UnitaryTrajectory { grid: grid.clone(), values, flavor: Flavor::Noiseless })
}

/// `H₁,I(t_k) = U₀(t_k)† H₁,S(t_k) U₀(t_k)`; the envelope is unchanged.
pub fn interaction_transform(u0: &UnitaryTrajectory, noise: &NoiseTrajectory) -> Result<NoiseTrajectory> {
    if u0.flavor != Flavor::Noiseless {
        return invalid("interaction transform needs the noiseless propagator");
    }
    if !u0.grid.matches(&noise.grid) {
        return invalid("noise grid does not match the propagator grid");
    }
    let values = noise
        .values
        .iter()
        .zip(&u0.values)
        .map(|(h, u)| h.conjugate_by(u))
        .collect();
    Ok(NoiseTrajectory {
        grid: noise.grid.clone(),
        values,
        envelope: noise.envelope.clone(),
        seed: noise.seed,
    })
}

/// `U_I(t) = U₀(t)† U_S(t)` pointwise.
pub fn interaction_propagator(u0: &UnitaryTrajectory, us: &UnitaryTrajectory) -> Result<UnitaryTrajectory> {
    if !u0.grid.matches(&us.grid) {
        return invalid("propagator grids do not match");
    }
    let values = u0
        .values
        .iter()
        .zip(&us.values)
        .map(|(a, b)| a.adjoint().compose(b))
        .collect();
    Ok(UnitaryTrajectory { grid: us.grid.clone(), values, flavor: Flavor::Interaction })
}

/// Directly integrates `dU_I/dt = −i H₁,I(t) U_I` from interaction-picture
/// noise.
pub fn propagate_interaction(frame: &Arc<PauliFrame>, noise_interaction: &NoiseTrajectory) -> Result<UnitaryTrajectory> {
    let grid = &noise_interaction.grid;
    let zero = ControlHamiltonian::zero(frame.clone(), grid.horizon())?;
    let mut traj = propagate(&zero, Some(noise_interaction), grid)?;
    traj.flavor = Flavor::Interaction;
    Ok(traj)
}

/// Computational basis vector `|k⟩`.
pub fn basis_state(dim: usize, k: usize) -> DVector<C64> {
    let mut v = DVector::from_element(dim, C64::new(0.0, 0.0));
    v[k] = C64::new(1.0, 0.0);
    v
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix(CMatrix);

impl DensityMatrix {
    pub fn matrix(&self) -> &CMatrix {
        &self.0
    }

    pub fn trace(&self) -> f64 {
        self.0.trace().re
    }

    /// `Tr(ρ²)`.
    pub fn purity(&self) -> f64 {
        (&self.0 * &self.0).trace().re
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.0.clone().symmetric_eigen().eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min)
    }
}

/// `ρ̂ = Σ_i w_i |ψ_i⟩⟨ψ_i|`; uniform weights when `weights` is `None`.
pub fn ensemble_density(states: &[DVector<C64>], weights: Option<&[f64]>) -> Result<DensityMatrix> {
    if states.is_empty() {
        return invalid("ensemble is empty");
    }
    let dim = states[0].len();
    if let Some(w) = weights {
        if w.len() != states.len() {
            return invalid("one weight per state required");
        }
        if w.iter().any(|x| *x < 0.0) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return invalid("weights must be nonnegative and sum to 1");
        }
    }
    let uniform = 1.0 / states.len() as f64;
    let mut rho = CMatrix::zeros(dim, dim);
    for (i, psi) in states.iter().enumerate() {
        if psi.len() != dim {
            return invalid("states have inconsistent dimensions");
        }
        let norm = psi.norm();
        if (norm - 1.0).abs() > 1e-10 {
            return invalid(format!("state {i} has norm {norm}, expected 1"));
        }
        let w = weights.map_or(uniform, |w| w[i]);
        rho += psi * psi.adjoint() * C64::new(w, 0.0);
    }
    let rho = (&rho + rho.adjoint()) * C64::new(0.5, 0.0);
    Ok(DensityMatrix(rho))
}

/// Per-time statistics of `‖U_S(t, ω) − U₀(t)‖` over an ensemble. The
/// essential supremum is estimated by the sample maximum over `samples`
/// paths.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorProcess {
    pub times: Vec<f64>,
    pub max: Vec<f64>,
    pub mean: Vec<f64>,
    pub q05: Vec<f64>,
    pub q95: Vec<f64>,
    pub samples: usize,
    pub norm: NormKind,
}

pub fn error_process(ensemble: &[UnitaryTrajectory], u0: &UnitaryTrajectory, norm: NormKind) -> Result<ErrorProcess> {
    if ensemble.is_empty() {
        return invalid("ensemble is empty");
    }
    if ensemble.iter().any(|u| !u.grid.matches(&u0.grid)) {
        return invalid("ensemble grids do not match the reference grid");
    }
    let npts = u0.grid.len();
    let mut out = ErrorProcess {
        times: u0.grid.points().to_vec(),
        max: Vec::with_capacity(npts),
        mean: Vec::with_capacity(npts),
        q05: Vec::with_capacity(npts),
        q95: Vec::with_capacity(npts),
        samples: ensemble.len(),
        norm,
    };
    let mut errs = vec![0.0; ensemble.len()];
    for k in 0..npts {
        for (e, u) in errs.iter_mut().zip(ensemble) {
            *e = u.values[k].distance_in(&u0.values[k], norm);
        }
        out.max.push(stats::max(&errs));
        out.mean.push(stats::mean(&errs));
        out.q05.push(stats::quantile(&errs, 0.05));
        out.q95.push(stats::quantile(&errs, 0.95));
    }
    Ok(out)
}

/// Dense real matrix alias used by the geometry code.
pub type RMatrix = DMatrix<f64>;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::{MaternConfig, NoiseGenerator, NoiseModelSpec};
    use crate::su_algebra::{frobenius_norm, pauli_word};
    use std::f64::consts::PI;

    fn qubit_frame() -> Arc<PauliFrame> {
        Arc::new(PauliFrame::from_qubits(1).unwrap())
    }

    fn sigma(w: &str) -> HermitianOperator {
        pauli_word(w).unwrap()
    }

    #[test]
    fn evaluate_control_examples() {
        let frame = qubit_frame();
        let drift = sigma("Z").scale(0.3);
        let zero = ControlHamiltonian::polynomial(frame.clone(), drift.clone(), vec![vec![0.0; 6]; 3], 1.0).unwrap();
        assert_eq!(zero.evaluate(0.4).unwrap(), drift);
        let one = ControlHamiltonian::polynomial(frame.clone(), HermitianOperator::zeros(2), vec![vec![1.0], vec![0.0], vec![0.0]], 1.0).unwrap();
        let expected = sigma("X").scale(1.0 / 2f64.sqrt());
        assert!(frobenius_norm(&(one.evaluate(0.7).unwrap().matrix() - expected.matrix())) < 1e-15);
        assert!(one.evaluate(1.5).is_err());
        assert!(one.evaluate(-0.1).is_err());
    }

    #[test]
    fn horner_matches_power_sum() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let coeffs: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        for _ in 0..100 {
            let t: f64 = rng.random_range(0.0..1.0);
            let direct: f64 = coeffs.iter().enumerate().map(|(k, c)| c * t.powi(k as i32)).sum();
            assert!((horner(&coeffs, t) - direct).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_hamiltonian_is_identity() {
        let ctrl = ControlHamiltonian::zero(qubit_frame(), 1.0).unwrap();
        let grid = TimeGrid::uniform(1.0, 50).unwrap();
        let traj = propagate(&ctrl, None, &grid).unwrap();
        for u in &traj.values {
            assert!(frobenius_norm(&(u.matrix() - CMatrix::identity(2, 2))) < 1e-15);
        }
    }

    #[test]
    fn constant_rotation_generates_x_gate() {
        let frame = qubit_frame();
        let c = PI / 2.0 * 2f64.sqrt();
        let ctrl = ControlHamiltonian::polynomial(frame, HermitianOperator::zeros(2), vec![vec![c], vec![0.0], vec![0.0]], 1.0).unwrap();
        let grid = TimeGrid::uniform(1.0, 200).unwrap();
        let u = propagate_endpoint(&ctrl, None, &grid).unwrap();
        let expected = sigma("X").matrix() * C64::new(0.0, -1.0);
        assert!(frobenius_norm(&(u.matrix() - expected)) < 1e-8);
    }

    #[test]
    fn cos_drive_returns_to_identity_at_pi() {
        let y = sigma("Y").into_matrix();
        let grid = TimeGrid::uniform(PI, 2000).unwrap();
        let traj = propagate_fn(2, |t| &y * C64::new(t.cos(), 0.0), &grid).unwrap();
        assert!(frobenius_norm(&(traj.endpoint().matrix() - CMatrix::identity(2, 2))) < 1e-6);
        assert!(traj.max_unitarity_defect() < 1e-10);
    }

    #[test]
    fn general_dimension_path_matches_closed_form() {
        let frame = Arc::new(PauliFrame::from_qubits(2).unwrap());
        let mut rows = vec![vec![0.0]; 15];
        rows[14] = vec![0.8]; // ZZ/2
        let ctrl = ControlHamiltonian::polynomial(frame, HermitianOperator::zeros(4), rows, 1.0).unwrap();
        let grid = TimeGrid::uniform(1.0, 10).unwrap();
        let u = propagate_endpoint(&ctrl, None, &grid).unwrap();
        let expected = crate::su_algebra::expm_skew(&sigma("ZZ").scale(0.4), 1.0).unwrap();
        assert!(frobenius_norm(&(u.matrix() - expected.matrix())) < 1e-13);
    }

    fn matern_noise(ctrl: &ControlHamiltonian, grid: &TimeGrid, seed: u64) -> NoiseTrajectory {
        let spec = NoiseModelSpec::squashed_matern(MaternConfig::new(1.0, 0.2, 1.0).unwrap(), 1.0);
        NoiseGenerator::new(&spec, grid).unwrap().sample(ctrl, None, 0.5, seed).unwrap()
    }

    #[test]
    fn noise_enters_additively() {
        let frame = qubit_frame();
        let grid = TimeGrid::uniform(1.0, 80).unwrap();
        let ctrl = ControlHamiltonian::polynomial(frame.clone(), sigma("Y").scale(0.5), vec![vec![0.3, 0.2], vec![0.0, -0.4], vec![0.1, 0.0]], 1.0).unwrap();
        let noise = matern_noise(&ctrl, &grid, 4);
        let us = propagate(&ctrl, Some(&noise), &grid).unwrap();
        // Fold control + noise into one per-step Hamiltonian and propagate noiselessly.
        let zero = ControlHamiltonian::zero(frame, 1.0).unwrap();
        let combined: Vec<CMatrix> = (0..grid.steps())
            .map(|k| {
                let h0 = ctrl.evaluate(grid.midpoint(k)).unwrap();
                let n = (noise.values[k].matrix() + noise.values[k + 1].matrix()) * C64::new(0.5, 0.0);
                h0.matrix() + n
            })
            .collect();
        let single = propagate_stepwise(&zero, &combined, &grid).unwrap();
        for (a, b) in us.values.iter().zip(&single.values) {
            assert!(frobenius_norm(&(a.matrix() - b.matrix())) < 1e-12);
        }
    }

    #[test]
    fn interaction_transform_examples() {
        let frame = qubit_frame();
        let grid = TimeGrid::uniform(1.0, 40).unwrap();
        let zero = ControlHamiltonian::zero(frame.clone(), 1.0).unwrap();
        let u_id = propagate(&zero, None, &grid).unwrap();
        let noise = matern_noise(&zero, &grid, 9);
        let same = interaction_transform(&u_id, &noise).unwrap();
        for (a, b) in same.values.iter().zip(&noise.values) {
            assert!(frobenius_norm(&(a.matrix() - b.matrix())) < 1e-15);
        }

        let ctrl = ControlHamiltonian::polynomial(frame, HermitianOperator::zeros(2), vec![vec![0.9, -1.0], vec![0.3], vec![0.0, 0.7]], 1.0).unwrap();
        let u0 = propagate(&ctrl, None, &grid).unwrap();
        let hi = interaction_transform(&u0, &noise).unwrap();
        for (a, b) in hi.values.iter().zip(&noise.values) {
            assert!((a.frobenius_norm() - b.frobenius_norm()).abs() < 1e-12);
        }
        assert!(interaction_transform(&propagate(&ctrl, Some(&noise), &grid).unwrap(), &noise).is_err());
    }

    #[test]
    fn z_rotation_conjugation_oracle() {
        let theta = PI / 8.0;
        let u = crate::su_algebra::expm_skew(&sigma("Z"), theta).unwrap();
        let got = sigma("X").conjugate_by(&u);
        // U = diag(e^{−iθ}, e^{iθ}), so (U†σxU)_{01} = e^{2iθ}.
        let e = C64::from_polar(1.0, 2.0 * theta);
        let z = C64::new(0.0, 0.0);
        let oracle = CMatrix::from_row_slice(2, 2, &[z, e, e.conj(), z]);
        assert!(frobenius_norm(&(got.matrix() - &oracle)) < 1e-12);
        let closed = sigma("X").scale((2.0 * theta).cos()).add_scaled(&sigma("Y"), -(2.0 * theta).sin());
        assert!(frobenius_norm(&(got.matrix() - closed.matrix())) < 1e-10);
        let forward = sigma("X").scale((2.0 * theta).cos()).add_scaled(&sigma("Y"), (2.0 * theta).sin());
        assert!(frobenius_norm(&(sigma("X").transform_by(&u).matrix() - forward.matrix())) < 1e-12);
    }

    #[test]
    fn interaction_picture_identity() {
        let frame = qubit_frame();
        let grid = TimeGrid::uniform(1.0, 400).unwrap();
        let ctrl = ControlHamiltonian::polynomial(frame.clone(), sigma("Y").scale(0.5), vec![vec![0.5, 1.0], vec![-0.2], vec![0.0, 0.0, 0.8]], 1.0).unwrap();
        let noise = matern_noise(&ctrl, &grid, 21);
        let u0 = propagate(&ctrl, None, &grid).unwrap();
        let us = propagate(&ctrl, Some(&noise), &grid).unwrap();
        let from_s = interaction_propagator(&u0, &us).unwrap();
        let direct = propagate_interaction(&frame, &interaction_transform(&u0, &noise).unwrap()).unwrap();
        // Both routes are second-order schemes for the same ODE.
        let d = frobenius_norm(&(from_s.endpoint().matrix() - direct.endpoint().matrix()));
        assert!(d < 1e-4, "routes differ by {d}");
    }

    #[test]
    fn density_examples() {
        let psi0 = basis_state(2, 0);
        let psi1 = basis_state(2, 1);
        let single = ensemble_density(&[psi0.clone()], None).unwrap();
        assert!((single.purity() - 1.0).abs() < 1e-12);
        let mixed = ensemble_density(&[psi0.clone(), psi1], None).unwrap();
        assert!(frobenius_norm(&(mixed.matrix() - CMatrix::identity(2, 2) * C64::new(0.5, 0.0))) < 1e-15);
        assert!((mixed.purity() - 0.5).abs() < 1e-15);
        assert!(ensemble_density(&[], None).is_err());
        let not_unit = psi0 * C64::new(2.0, 0.0);
        assert!(ensemble_density(&[not_unit], None).is_err());
    }

    #[test]
    fn error_process_edge_cases() {
        let frame = qubit_frame();
        let grid = TimeGrid::uniform(1.0, 50).unwrap();
        let ctrl = ControlHamiltonian::polynomial(frame, HermitianOperator::zeros(2), vec![vec![1.0], vec![0.0], vec![0.5]], 1.0).unwrap();
        let u0 = propagate(&ctrl, None, &grid).unwrap();
        assert!(error_process(&[], &u0, NormKind::Operator).is_err());
        let zero_noise = NoiseTrajectory::zero(&grid, 2);
        let ens: Vec<_> = (0..3).map(|_| propagate(&ctrl, Some(&zero_noise), &grid).unwrap()).collect();
        let ep = error_process(&ens, &u0, NormKind::Frobenius).unwrap();
        assert!(ep.max.iter().all(|e| *e < 1e-14));
        let noisy: Vec<_> = (0..5).map(|s| propagate(&ctrl, Some(&matern_noise(&ctrl, &grid, s)), &grid).unwrap()).collect();
        let ep = error_process(&noisy, &u0, NormKind::Operator).unwrap();
        assert_eq!(ep.max[0], 0.0);
        assert!(ep.max[50] > 0.0);
    }

    /// Error of the midpoint scheme on `H = cos(t)σy` against
    /// `exp(−i sin(T)σy)` for a given number of steps.
    fn cos_drive_error(horizon: f64, steps: usize) -> f64 {
        let y = sigma("Y").into_matrix();
        let grid = TimeGrid::uniform(horizon, steps).unwrap();
        let traj = propagate_fn(2, |t| &y * C64::new(t.cos(), 0.0), &grid).unwrap();
        let exact = crate::su_algebra::expm_skew(&sigma("Y"), horizon.sin()).unwrap();
        frobenius_norm(&(traj.endpoint().matrix() - exact.matrix()))
    }

    #[test]
    fn midpoint_scheme_is_second_order() {
        let errs: Vec<f64> = [25, 50, 100, 200].iter().map(|&n| cos_drive_error(2.0, n)).collect();
        for w in errs.windows(2) {
            let order = (w[0] / w[1]).log2();
            assert!(order >= 1.9, "observed order {order} from {errs:?}");
        }
    }

    #[test]
    fn nested_ensembles_have_monotone_max() {
        let frame = qubit_frame();
        let grid = TimeGrid::uniform(1.0, 50).unwrap();
        let ctrl = ControlHamiltonian::polynomial(frame, sigma("Y").scale(0.5), vec![vec![0.2], vec![0.0, 1.0], vec![0.4]], 1.0).unwrap();
        let u0 = propagate(&ctrl, None, &grid).unwrap();
        let all: Vec<_> = (0..16).map(|s| propagate(&ctrl, Some(&matern_noise(&ctrl, &grid, s)), &grid).unwrap()).collect();
        let mut prev = vec![0.0; grid.len()];
        for n in [1, 2, 4, 8, 16] {
            let ep = error_process(&all[..n], &u0, NormKind::Operator).unwrap();
            for (a, b) in prev.iter().zip(&ep.max) {
                assert!(b >= a);
            }
            prev = ep.max;
        }
    }

    #[test]
    fn noisy_ensembles_are_mixed() {
        let frame = qubit_frame();
        let grid = TimeGrid::uniform(1.0, 100).unwrap();
        let ctrl = ControlHamiltonian::polynomial(frame, sigma("Y").scale(0.5), vec![vec![0.0]; 3], 1.0).unwrap();
        let psi = basis_state(2, 0);
        let states: Vec<_> = (0..20)
            .map(|s| propagate_endpoint(&ctrl, Some(&matern_noise(&ctrl, &grid, s)), &grid).unwrap().apply(&psi))
            .collect();
        let rho = ensemble_density(&states, None).unwrap();
        assert!(rho.purity() < 1.0 - 1e-6);
        assert!((rho.trace() - 1.0).abs() < 1e-10);
        assert!(rho.min_eigenvalue() >= -1e-10);
    }
}
