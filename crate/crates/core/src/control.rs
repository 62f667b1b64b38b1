//! Noise-blind and noise-aware optimal control over polynomial ansätze.
//!
//! The blind cost is `‖U₀(T) − V‖_F²`. The aware cost adds the squared
//! noise path length, `(η ∫ √g_Λ(H₀, H₀) dt)²`, which bounds the worst-case
//! noise-induced error.

use std::io::{self, Write};
use std::sync::Arc;

use nalgebra::Matrix2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geodesic::{path_length, NoiseMetric};
use crate::grid::{TimeGrid, DEFAULT_STEPS_PER_UNIT};
use crate::noise::{AmplitudeMode, EnvelopeForm, MaternConfig, NoiseGenerator, NoiseKind, NoiseModelSpec};
use crate::rode::{propagate_endpoint, to_m2, ControlHamiltonian, DEFAULT_DEGREE};
use crate::stats;
use crate::su_algebra::{
    expm_skew, frobenius_norm, operator_norm, operator_norm_2x2, pauli_word, CMatrix, HermitianOperator,
    PauliFrame, UnitaryOperator, C64,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Blind,
    Aware,
}

impl Mode {
    pub fn tag(self) -> &'static str {
        match self {
            Mode::Blind => "blind",
            Mode::Aware => "aware",
        }
    }
}

/// Precomputed propagation data for one-qubit problems in the Pauli frame.
///
/// Propagators are tracked as unit quaternions `q₀𝟙 − i q⃗·σ`, with the
/// drift trace carried as a global phase.
#[derive(Debug, Clone)]
struct QubitKernel {
    drift: [f64; 3],
    phase_rate: f64,
    mid_pows: Vec<f64>,
    grid_pows: Vec<f64>,
    dts: Vec<f64>,
}

impl QubitKernel {
    fn new(template: &ControlHamiltonian, degree: usize, grid: &TimeGrid) -> Option<Self> {
        let frame = template.frame();
        if frame.dim() != 2 || frame.len() != 3 {
            return None;
        }
        let r = std::f64::consts::FRAC_1_SQRT_2;
        for (b, label) in frame.elements().iter().zip(["X", "Y", "Z"]) {
            let expected = pauli_word(label).ok()?.scale(r);
            if (b.matrix() - expected.matrix()).norm() > 1e-14 {
                return None;
            }
        }
        let c = frame.coefficients(template.drift());
        let w = degree + 1;
        let pows = |t: f64| (0..w).scan(1.0, move |p, _| { let v = *p; *p *= t; Some(v) }).collect::<Vec<f64>>();
        Some(Self {
            drift: [c[0], c[1], c[2]],
            phase_rate: template.drift().trace() / 2.0,
            mid_pows: (0..grid.steps()).flat_map(|k| pows(grid.midpoint(k))).collect(),
            grid_pows: grid.points().iter().flat_map(|&t| pows(t)).collect(),
            dts: (0..grid.steps()).map(|k| grid.dt(k)).collect(),
        })
    }

    #[inline]
    fn controls(pows: &[f64], coeffs: &[f64], w: usize, out: &mut [f64]) {
        for (j, o) in out.iter_mut().enumerate() {
            let c = &coeffs[j * w..(j + 1) * w];
            *o = c.iter().zip(pows).map(|(a, p)| a * p).sum();
        }
    }

    /// `U(T)` with optional per-step midpoint noise coefficients.
    fn endpoint(&self, coeffs: &[f64], w: usize, noise_mid: Option<&[f64]>) -> Matrix2<C64> {
        let r = std::f64::consts::FRAC_1_SQRT_2;
        let mut a = [0.0; 3];
        let mut q = [1.0, 0.0, 0.0, 0.0];
        for (k, dt) in self.dts.iter().enumerate() {
            Self::controls(&self.mid_pows[k * w..(k + 1) * w], coeffs, w, &mut a);
            for j in 0..3 {
                a[j] += self.drift[j];
            }
            if let Some(n) = noise_mid {
                for j in 0..3 {
                    a[j] += n[3 * k + j];
                }
            }
            let s = r * dt;
            let b = [a[0] * s, a[1] * s, a[2] * s];
            let th = (b[0] * b[0] + b[1] * b[1] + b[2] * b[2]).sqrt();
            let (sn, cs) = th.sin_cos();
            // sin(θ)/θ, stable near zero.
            let f = if th > 1e-8 { sn / th } else { 1.0 - th * th / 6.0 };
            let p = [cs, f * b[0], f * b[1], f * b[2]];
            q = [
                p[0] * q[0] - p[1] * q[1] - p[2] * q[2] - p[3] * q[3],
                p[0] * q[1] + q[0] * p[1] + p[2] * q[3] - p[3] * q[2],
                p[0] * q[2] + q[0] * p[2] + p[3] * q[1] - p[1] * q[3],
                p[0] * q[3] + q[0] * p[3] + p[1] * q[2] - p[2] * q[1],
            ];
        }
        let horizon: f64 = self.dts.iter().sum();
        let phase = C64::from_polar(1.0, -self.phase_rate * horizon);
        Matrix2::new(
            C64::new(q[0], -q[3]),
            C64::new(-q[2], -q[1]),
            C64::new(q[2], -q[1]),
            C64::new(q[0], q[3]),
        ) * phase
    }
}

/// Optimal-control problem on a fixed grid with a polynomial ansatz.
#[derive(Debug, Clone)]
pub struct OptimizationProblem {
    pub target: UnitaryOperator,
    pub template: ControlHamiltonian,
    pub degree: usize,
    pub metric: NoiseMetric,
    pub eta: f64,
    pub grid: TimeGrid,
    drift_coeffs: Vec<f64>,
    kernel: Option<QubitKernel>,
}

impl OptimizationProblem {
    pub fn new(
        target: UnitaryOperator,
        frame: Arc<PauliFrame>,
        drift: HermitianOperator,
        degree: usize,
        horizon: f64,
        metric: NoiseMetric,
        eta: f64,
        grid: TimeGrid,
    ) -> Result<Self> {
        if target.dim() != frame.dim() {
            return invalid("target dimension does not match the frame");
        }
        let det = target.determinant();
        if (det - C64::new(1.0, 0.0)).norm() > 1e-10 {
            return invalid(format!("target must be special unitary, det = {det}"));
        }
        if !(eta >= 0.0) || !eta.is_finite() {
            return invalid(format!("signal-to-noise ratio must be nonnegative, got {eta}"));
        }
        if metric.frame().len() != frame.len() || metric.frame().dim() != frame.dim() {
            return invalid("metric frame does not match the control frame");
        }
        if (grid.horizon() - horizon).abs() > 1e-12 * (1.0 + horizon) {
            return invalid(format!("grid horizon {} differs from the problem horizon {horizon}", grid.horizon()));
        }
        let m = frame.len();
        let template = ControlHamiltonian::polynomial(frame.clone(), drift, vec![vec![0.0; degree + 1]; m], horizon)?;
        let drift_coeffs = frame.coefficients(template.drift());
        let kernel = QubitKernel::new(&template, degree, &grid);
        Ok(Self { target, template, degree, metric, eta, grid, drift_coeffs, kernel })
    }

    /// One qubit, drift `σy/2`, metric `diag(1, 1/100, 1/100)`, degree-5
    /// controls on `[0, T]`.
    pub fn one_qubit(target: UnitaryOperator, horizon: f64, eta: f64) -> Result<Self> {
        let frame = Arc::new(PauliFrame::from_qubits(1)?);
        let metric = NoiseMetric::new(frame.clone(), vec![1.0, 0.01, 0.01])?;
        let drift = pauli_word("Y")?.scale(0.5);
        let grid = TimeGrid::with_resolution(horizon, DEFAULT_STEPS_PER_UNIT)?;
        Self::new(target, frame, drift, DEFAULT_DEGREE, horizon, metric, eta, grid)
    }

    /// `exp(−i·0.4·σz)`.
    pub fn default_target() -> UnitaryOperator {
        expm_skew(&pauli_word("Z").unwrap(), 0.4).unwrap()
    }

    pub fn with_eta(&self, eta: f64) -> Result<Self> {
        if !(eta >= 0.0) || !eta.is_finite() {
            return invalid(format!("signal-to-noise ratio must be nonnegative, got {eta}"));
        }
        Ok(Self { eta, ..self.clone() })
    }

    pub fn num_coefficients(&self) -> usize {
        self.template.frame().len() * (self.degree + 1)
    }

    fn check(&self, coeffs: &[f64]) -> Result<()> {
        if coeffs.len() != self.num_coefficients() {
            return invalid(format!("expected {} coefficients, got {}", self.num_coefficients(), coeffs.len()));
        }
        Ok(())
    }

    pub fn control(&self, coeffs: &[f64]) -> Result<ControlHamiltonian> {
        self.template.with_flat_coefficients(coeffs, self.degree)
    }

    /// Noiseless `U₀(T)`.
    pub fn endpoint(&self, coeffs: &[f64]) -> Result<CMatrix> {
        self.check(coeffs)?;
        Ok(match &self.kernel {
            Some(k) => crate::rode::from_m2(&k.endpoint(coeffs, self.degree + 1, None)),
            None => propagate_endpoint(&self.control(coeffs)?, None, &self.grid)?.matrix().clone(),
        })
    }

    /// `√g_Λ(H₀(t_k), H₀(t_k))` at grid points.
    pub fn speeds(&self, coeffs: &[f64]) -> Result<Vec<f64>> {
        self.check(coeffs)?;
        match &self.kernel {
            Some(k) => {
                let w = self.degree + 1;
                let m = self.drift_coeffs.len();
                let mut h = vec![0.0; m];
                Ok((0..self.grid.len())
                    .map(|i| {
                        QubitKernel::controls(&k.grid_pows[i * w..(i + 1) * w], coeffs, w, &mut h);
                        for (x, d) in h.iter_mut().zip(&self.drift_coeffs) {
                            *x += d;
                        }
                        self.metric.norm_squared_unchecked(&h).sqrt()
                    })
                    .collect())
            }
            None => crate::geodesic::speeds(&self.control(coeffs)?, &self.metric, &self.grid),
        }
    }

    /// `∫₀^T √g_Λ(H₀, H₀) dt`.
    pub fn path_length(&self, coeffs: &[f64]) -> Result<f64> {
        Ok(self.grid.integral(&self.speeds(coeffs)?))
    }

    pub fn cost_blind(&self, coeffs: &[f64]) -> Result<f64> {
        let d = self.endpoint(coeffs)? - self.target.matrix();
        Ok(d.norm_squared())
    }

    /// `2n − 2|Tr(U₀(T)† V)|`.
    pub fn cost_phase_invariant(&self, coeffs: &[f64]) -> Result<f64> {
        let u = self.endpoint(coeffs)?;
        let n = u.nrows() as f64;
        Ok(2.0 * n - 2.0 * (u.adjoint() * self.target.matrix()).trace().norm())
    }

    pub fn cost_aware(&self, coeffs: &[f64]) -> Result<f64> {
        let l = self.eta * self.path_length(coeffs)?;
        Ok(self.cost_blind(coeffs)? + l * l)
    }

    pub fn cost(&self, coeffs: &[f64], mode: Mode) -> Result<f64> {
        match mode {
            Mode::Blind => self.cost_blind(coeffs),
            Mode::Aware => self.cost_aware(coeffs),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    NelderMead,
    GradientDescent,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizeOptions {
    pub method: Method,
    /// Cost evaluations allowed per restart.
    pub max_evals: usize,
    pub restarts: usize,
    pub seed: u64,
    /// Initial coefficients are drawn from `uniform(−r, r)`.
    pub init_range: f64,
    pub initial_step: f64,
    /// Convergence threshold on the simplex cost spread (or gradient norm).
    pub ftol: f64,
    /// Simplex rebuilds at the incumbent after convergence.
    pub reinits: usize,
}

impl Default for OptimizeOptions {
    fn default() -> Self {
        Self {
            method: Method::NelderMead,
            max_evals: 20_000,
            restarts: 1,
            seed: 0,
            init_range: 1.0,
            initial_step: 0.25,
            ftol: 1e-10,
            reinits: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OptimizationResult {
    pub mode: Mode,
    pub coefficients: Vec<f64>,
    pub initial_cost: f64,
    pub cost: f64,
    pub blind_cost: f64,
    pub aware_cost: f64,
    pub path_length: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    pub seed: u64,
    /// Best cost after each iteration of the winning restart.
    #[serde(skip)]
    pub history: Vec<f64>,
}

/// Outcome of a derivative-free minimization.
#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    pub history: Vec<f64>,
}

/// Nelder–Mead with dimension-adaptive coefficients
/// (`α = 1`, `β = 1 + 2/n`, `γ = 0.75 − 1/(2n)`, `δ = 1 − 1/n`).
pub fn nelder_mead(mut f: impl FnMut(&[f64]) -> f64, x0: &[f64], opts: &OptimizeOptions) -> Minimum {
    let n = x0.len();
    let nf = n as f64;
    let (alpha, beta, gamma, delta) = if n >= 2 {
        (1.0, 1.0 + 2.0 / nf, 0.75 - 0.5 / nf, 1.0 - 1.0 / nf)
    } else {
        (1.0, 2.0, 0.5, 0.5)
    };
    let mut evals = 0usize;
    let mut iterations = 0usize;
    let mut history = Vec::new();
    let mut eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        let v = f(x);
        if v.is_nan() { f64::INFINITY } else { v }
    };
    let mut best_x = x0.to_vec();
    let mut best_f = eval(x0, &mut evals);
    let mut converged = false;
    for round in 0..=opts.reinits {
        let start_f = best_f;
        let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
        simplex.push((best_x.clone(), best_f));
        for i in 0..n {
            let mut x = best_x.clone();
            let step = if x[i].abs() > 1e-8 { opts.initial_step * x[i].abs().max(0.1) } else { opts.initial_step };
            x[i] += step;
            let fx = eval(&x, &mut evals);
            simplex.push((x, fx));
        }
        let mut round_converged = false;
        while evals < opts.max_evals {
            simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
            iterations += 1;
            history.push(simplex[0].1);
            let spread = simplex[n].1 - simplex[0].1;
            if spread <= opts.ftol {
                round_converged = true;
                break;
            }
            let mut c = vec![0.0; n];
            for (x, _) in &simplex[..n] {
                for (ci, xi) in c.iter_mut().zip(x) {
                    *ci += xi / nf;
                }
            }
            let worst = simplex[n].0.clone();
            let fw = simplex[n].1;
            let point = |s: f64| -> Vec<f64> { c.iter().zip(&worst).map(|(ci, wi)| ci + s * (ci - wi)).collect() };
            let xr = point(alpha);
            let fr = eval(&xr, &mut evals);
            if fr < simplex[0].1 {
                let xe = point(alpha * beta);
                let fe = eval(&xe, &mut evals);
                simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
            } else if fr < simplex[n - 1].1 {
                simplex[n] = (xr, fr);
            } else {
                let (xc, fc) = if fr < fw {
                    let x = point(alpha * gamma);
                    let fx = eval(&x, &mut evals);
                    (x, fx)
                } else {
                    let x = point(-gamma);
                    let fx = eval(&x, &mut evals);
                    (x, fx)
                };
                if fc < fr.min(fw) {
                    simplex[n] = (xc, fc);
                } else {
                    let b = simplex[0].0.clone();
                    for item in simplex.iter_mut().skip(1) {
                        let x: Vec<f64> = b.iter().zip(&item.0).map(|(bi, xi)| bi + delta * (xi - bi)).collect();
                        let fx = eval(&x, &mut evals);
                        *item = (x, fx);
                    }
                }
            }
        }
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        if simplex[0].1 <= best_f {
            best_x = simplex[0].0.clone();
            best_f = simplex[0].1;
        }
        converged = round_converged;
        if evals >= opts.max_evals || (round > 0 && start_f - best_f <= opts.ftol) {
            break;
        }
    }
    Minimum { x: best_x, f: best_f, iterations, evaluations: evals, converged, history }
}

/// Steepest descent with central-difference gradients and Armijo
/// backtracking.
pub fn gradient_descent(mut f: impl FnMut(&[f64]) -> f64, x0: &[f64], opts: &OptimizeOptions) -> Minimum {
    let n = x0.len();
    let mut evals = 0usize;
    let mut x = x0.to_vec();
    let mut fx = f(&x);
    evals += 1;
    let mut history = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    let mut step = 1.0;
    let h = 1e-6;
    while evals + 2 * n + 1 < opts.max_evals {
        iterations += 1;
        let mut g = vec![0.0; n];
        for i in 0..n {
            let mut p = x.clone();
            let mut q = x.clone();
            p[i] += h;
            q[i] -= h;
            g[i] = (f(&p) - f(&q)) / (2.0 * h);
            evals += 2;
        }
        let gn2: f64 = g.iter().map(|v| v * v).sum();
        if gn2.sqrt() <= opts.ftol.sqrt() {
            converged = true;
            break;
        }
        let mut accepted = false;
        while evals < opts.max_evals {
            let trial: Vec<f64> = x.iter().zip(&g).map(|(a, b)| a - step * b).collect();
            let ft = f(&trial);
            evals += 1;
            if ft <= fx - 1e-4 * step * gn2 {
                x = trial;
                fx = ft;
                step *= 2.0;
                accepted = true;
                break;
            }
            step *= 0.5;
            if step < 1e-16 {
                break;
            }
        }
        history.push(fx);
        if !accepted {
            converged = true;
            break;
        }
    }
    Minimum { x, f: fx, iterations, evaluations: evals, converged, history }
}

fn random_init(n: usize, range: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-range..range)).collect()
}

/// Minimizes from a given starting point.
pub fn optimize_from(problem: &OptimizationProblem, mode: Mode, x0: &[f64], opts: &OptimizeOptions, seed: u64) -> Result<OptimizationResult> {
    problem.check(x0)?;
    let objective = |x: &[f64]| problem.cost(x, mode).unwrap_or(f64::INFINITY);
    let initial_cost = objective(x0);
    let min = match opts.method {
        Method::NelderMead => nelder_mead(objective, x0, opts),
        Method::GradientDescent => gradient_descent(objective, x0, opts),
    };
    let (x, cost) = if min.f <= initial_cost { (min.x, min.f) } else { (x0.to_vec(), initial_cost) };
    Ok(OptimizationResult {
        mode,
        blind_cost: problem.cost_blind(&x)?,
        aware_cost: problem.cost_aware(&x)?,
        path_length: problem.path_length(&x)?,
        coefficients: x,
        initial_cost,
        cost,
        iterations: min.iterations,
        evaluations: min.evaluations,
        converged: min.converged,
        seed,
        history: min.history,
    })
}

/// Multi-restart minimization; restart `r` starts at a uniform random point
/// drawn with seed `opts.seed + r`.
pub fn optimize(problem: &OptimizationProblem, mode: Mode, opts: &OptimizeOptions) -> Result<OptimizationResult> {
    if opts.restarts == 0 {
        return invalid("at least one restart is required");
    }
    let n = problem.num_coefficients();
    let results: Vec<OptimizationResult> = (0..opts.restarts)
        .into_par_iter()
        .map(|r| {
            let seed = opts.seed.wrapping_add(r as u64);
            optimize_from(problem, mode, &random_init(n, opts.init_range, seed), opts, seed)
        })
        .collect::<Result<_>>()?;
    Ok(results.into_iter().reduce(|a, b| if b.cost < a.cost { b } else { a }).unwrap())
}

/// Shared noise realizations: unit (or raw-scaled) frame directions at each
/// grid point, reused across controls, modes and `η` values.
#[derive(Debug, Clone)]
pub struct NoiseBank {
    pub spec: NoiseModelSpec,
    pub seed: u64,
    directions: Vec<Vec<f64>>,
    m: usize,
}

impl NoiseBank {
    /// Sample `i` uses seed `seed + i`, matching
    /// [`NoiseGenerator::sample`] with the same seed.
    pub fn new(spec: &NoiseModelSpec, grid: &TimeGrid, frame: &PauliFrame, samples: usize, seed: u64) -> Result<Self> {
        if samples == 0 {
            return invalid("noise bank needs at least one sample");
        }
        if !matches!(spec.kind, NoiseKind::SquashedMatern | NoiseKind::SquashedWiener) {
            return invalid("noise bank supports the squashed noise kinds");
        }
        let gen = NoiseGenerator::new(spec, grid)?;
        let m = frame.len();
        let directions = (0..samples)
            .into_par_iter()
            .map(|i| {
                let x = gen.squashed_paths(m, seed.wrapping_add(i as u64));
                let mut d = Vec::with_capacity(grid.len() * m);
                for k in 0..grid.len() {
                    let norm = (0..m).map(|j| x[j][k] * x[j][k]).sum::<f64>().sqrt();
                    let s = match spec.amplitude_mode {
                        AmplitudeMode::Unit if norm > 0.0 => 1.0 / norm,
                        AmplitudeMode::Unit => 0.0,
                        AmplitudeMode::Raw => 1.0 / (m as f64).sqrt(),
                    };
                    d.extend((0..m).map(|j| x[j][k] * s));
                }
                d
            })
            .collect();
        Ok(Self { spec: spec.clone(), seed, directions, m })
    }

    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }
}

/// Per-sample endpoint errors of one control under coupled noise.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RobustStats {
    pub err_op: Vec<f64>,
    pub err_fro: Vec<f64>,
    pub mean_op: f64,
    pub max_op: f64,
    pub q05_op: f64,
    pub median_op: f64,
    pub q95_op: f64,
    pub mean_fro: f64,
    pub max_fro: f64,
    /// Deterministic `‖U₀(T) − V‖` in both norms.
    pub residual_op: f64,
    pub residual_fro: f64,
    /// `η ∫ √g_Λ(H₀, H₀)` for this control.
    pub noise_length: f64,
}

/// Envelope `Λ(t_k)` of the coupled noise for a control.
fn coupled_envelope(problem: &OptimizationProblem, spec: &NoiseModelSpec, speeds: &[f64]) -> Vec<f64> {
    let c = problem.eta * spec.coupling.prefactor;
    speeds
        .iter()
        .map(|s| match spec.coupling.form {
            EnvelopeForm::Sqrt => c * s,
            EnvelopeForm::Literal => c * s * s,
        })
        .collect()
}

/// Propagates every bank sample with envelope `η·√g_Λ(H₀(t), H₀(t))` and
/// reports endpoint errors against the target.
pub fn evaluate_robust(problem: &OptimizationProblem, coeffs: &[f64], bank: &NoiseBank) -> Result<RobustStats> {
    problem.check(coeffs)?;
    if bank.m != problem.template.frame().len() {
        return invalid("noise bank frame does not match the problem");
    }
    let speeds = problem.speeds(coeffs)?;
    let envelope = coupled_envelope(problem, &bank.spec, &speeds);
    let target = problem.target.matrix();
    let u0 = problem.endpoint(coeffs)?;
    let residual = &u0 - target;
    let m = bank.m;
    let steps = problem.grid.steps();
    let w = problem.degree + 1;
    let errs: Vec<(f64, f64)> = bank
        .directions
        .par_iter()
        .map(|d| {
            let mut mid = vec![0.0; steps * m];
            for k in 0..steps {
                for j in 0..m {
                    mid[k * m + j] = 0.5 * (envelope[k] * d[k * m + j] + envelope[k + 1] * d[(k + 1) * m + j]);
                }
            }
            match &problem.kernel {
                Some(kern) => {
                    let u = if problem.eta == 0.0 { to_m2(&u0) } else { kern.endpoint(coeffs, w, Some(&mid)) };
                    let diff = u - to_m2(target);
                    Ok((operator_norm_2x2(&diff), diff.norm()))
                }
                None => {
                    let ctrl = problem.control(coeffs)?;
                    let noise = bank_trajectory(problem, &envelope, d, m);
                    let u = propagate_endpoint(&ctrl, Some(&noise), &problem.grid)?;
                    let diff = u.matrix() - target;
                    Ok((operator_norm(&diff), frobenius_norm(&diff)))
                }
            }
        })
        .collect::<Result<_>>()?;
    let err_op: Vec<f64> = errs.iter().map(|e| e.0).collect();
    let err_fro: Vec<f64> = errs.iter().map(|e| e.1).collect();
    Ok(RobustStats {
        mean_op: stats::mean(&err_op),
        max_op: stats::max(&err_op),
        q05_op: stats::quantile(&err_op, 0.05),
        median_op: stats::quantile(&err_op, 0.5),
        q95_op: stats::quantile(&err_op, 0.95),
        mean_fro: stats::mean(&err_fro),
        max_fro: stats::max(&err_fro),
        residual_op: operator_norm(&residual),
        residual_fro: frobenius_norm(&residual),
        noise_length: problem.eta * problem.grid.integral(&speeds),
        err_op,
        err_fro,
    })
}

fn bank_trajectory(problem: &OptimizationProblem, envelope: &[f64], d: &[f64], m: usize) -> crate::noise::NoiseTrajectory {
    let frame = problem.template.frame();
    let values = (0..problem.grid.len())
        .map(|k| {
            let c: Vec<f64> = d[k * m..(k + 1) * m].iter().map(|x| x * envelope[k]).collect();
            frame.combine_unchecked(&c)
        })
        .collect();
    crate::noise::NoiseTrajectory { grid: problem.grid.clone(), values, envelope: envelope.to_vec(), seed: 0 }
}

/// Experiment parameters shared by the paired comparison and the sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub num_controls: usize,
    pub samples: usize,
    pub seed: u64,
    pub noise: NoiseModelSpec,
    pub optimize: OptimizeOptions,
}

impl ExperimentConfig {
    /// Matérn `ν = 0.6`, `ℓ = 0.2 T`, `σ = 1`; 100 controls, 100 noise
    /// samples each.
    pub fn defaults(horizon: f64) -> Self {
        Self {
            num_controls: 100,
            samples: 100,
            seed: 0,
            noise: NoiseModelSpec::squashed_matern(MaternConfig { nu: 0.6, length_scale: 0.2 * horizon, amplitude: 1.0 }, 1.0),
            optimize: OptimizeOptions::default(),
        }
    }

    /// Seed of the shared noise bank.
    pub fn noise_seed(&self) -> u64 {
        self.seed.wrapping_add(1_000_000_007)
    }

    /// Seed of control `i`'s random initialization.
    pub fn control_seed(&self, i: usize) -> u64 {
        self.seed.wrapping_add(i as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ControlOutcome {
    pub control_index: usize,
    pub mode: Mode,
    pub result: OptimizationResult,
    pub stats: RobustStats,
}

/// Paired per-control comparison of the two modes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairedComparison {
    pub eta: f64,
    /// Blind then aware for each control, in control order.
    pub outcomes: Vec<ControlOutcome>,
    pub mean_blind_op: f64,
    pub mean_aware_op: f64,
    /// `mean(blind) / mean(aware)` of the operator-norm error.
    pub ratio: f64,
    /// Mean and 95% interval of the per-control difference `aware − blind`.
    pub diff_mean: f64,
    pub diff_ci: (f64, f64),
    pub mean_blind_fro: f64,
    pub mean_aware_fro: f64,
}

impl PairedComparison {
    fn from_outcomes(eta: f64, outcomes: Vec<ControlOutcome>) -> Self {
        let mode_means = |mode: Mode, f: fn(&RobustStats) -> f64| -> Vec<f64> {
            outcomes.iter().filter(|o| o.mode == mode).map(|o| f(&o.stats)).collect()
        };
        let b = mode_means(Mode::Blind, |s| s.mean_op);
        let a = mode_means(Mode::Aware, |s| s.mean_op);
        let d: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        let (dm, lo, hi) = stats::mean_ci95(&d);
        let mb = stats::mean(&b);
        let ma = stats::mean(&a);
        Self {
            eta,
            mean_blind_op: mb,
            mean_aware_op: ma,
            ratio: if ma > 0.0 { mb / ma } else if mb > 0.0 { f64::INFINITY } else { 1.0 },
            diff_mean: dm,
            diff_ci: (lo, hi),
            mean_blind_fro: stats::mean(&mode_means(Mode::Blind, |s| s.mean_fro)),
            mean_aware_fro: stats::mean(&mode_means(Mode::Aware, |s| s.mean_fro)),
            outcomes,
        }
    }

    /// Aware beats blind with 95% paired confidence.
    pub fn aware_significantly_better(&self) -> bool {
        self.diff_ci.1 < 0.0
    }

    /// Aware is not significantly worse than blind.
    pub fn aware_not_worse(&self) -> bool {
        self.diff_ci.0 <= 0.0
    }

    pub fn write_errors_csv<W: Write>(&self, out: &mut W) -> io::Result<()> {
        writeln!(out, "control_index,mode,sample_index,err_op,err_fro")?;
        for o in &self.outcomes {
            for (i, (e, f)) in o.stats.err_op.iter().zip(&o.stats.err_fro).enumerate() {
                writeln!(out, "{},{},{i},{e:.12e},{f:.12e}", o.control_index, o.mode.tag())?;
            }
        }
        Ok(())
    }
}

fn optimize_controls(problem: &OptimizationProblem, mode: Mode, cfg: &ExperimentConfig) -> Result<Vec<OptimizationResult>> {
    let n = problem.num_coefficients();
    (0..cfg.num_controls)
        .into_par_iter()
        .map(|i| {
            let seed = cfg.control_seed(i);
            optimize_from(problem, mode, &random_init(n, cfg.optimize.init_range, seed), &cfg.optimize, seed)
        })
        .collect()
}

fn paired(
    problem: &OptimizationProblem,
    blind: &[OptimizationResult],
    aware: &[OptimizationResult],
    bank: &NoiseBank,
) -> Result<PairedComparison> {
    let mut outcomes = Vec::with_capacity(2 * blind.len());
    for (i, (b, a)) in blind.iter().zip(aware).enumerate() {
        for r in [b, a] {
            outcomes.push(ControlOutcome {
                control_index: i,
                mode: r.mode,
                stats: evaluate_robust(problem, &r.coefficients, bank)?,
                result: r.clone(),
            });
        }
    }
    Ok(PairedComparison::from_outcomes(problem.eta, outcomes))
}

/// Optimizes every seeded control in both modes and evaluates all of them
/// on one shared noise bank.
pub fn experiment_noise_aware_vs_blind(problem: &OptimizationProblem, cfg: &ExperimentConfig) -> Result<PairedComparison> {
    if cfg.num_controls == 0 {
        return invalid("experiment needs at least one control");
    }
    let bank = NoiseBank::new(&cfg.noise, &problem.grid, problem.template.frame(), cfg.samples, cfg.noise_seed())?;
    let blind = optimize_controls(problem, Mode::Blind, cfg)?;
    let aware = if problem.eta == 0.0 {
        blind.iter().map(|r| OptimizationResult { mode: Mode::Aware, ..r.clone() }).collect()
    } else {
        optimize_controls(problem, Mode::Aware, cfg)?
    };
    paired(problem, &blind, &aware, &bank)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub eta: f64,
    pub mode: Mode,
    pub mean_err_op: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub mean_err_fro: f64,
    pub ci_lo_fro: f64,
    pub ci_hi_fro: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepResult {
    pub points: Vec<SweepPoint>,
    pub comparisons: Vec<PairedComparison>,
}

impl SweepResult {
    pub fn write_csv<W: Write>(&self, out: &mut W) -> io::Result<()> {
        writeln!(out, "eta,mode,mean_err_op,ci_lo,ci_hi")?;
        for p in &self.points {
            writeln!(out, "{:.6},{},{:.12e},{:.12e},{:.12e}", p.eta, p.mode.tag(), p.mean_err_op, p.ci_lo, p.ci_hi)?;
        }
        Ok(())
    }

    pub fn write_frobenius_csv<W: Write>(&self, out: &mut W) -> io::Result<()> {
        writeln!(out, "eta,mode,mean_err_fro,ci_lo,ci_hi")?;
        for p in &self.points {
            writeln!(out, "{:.6},{},{:.12e},{:.12e},{:.12e}", p.eta, p.mode.tag(), p.mean_err_fro, p.ci_lo_fro, p.ci_hi_fro)?;
        }
        Ok(())
    }

    /// Least-squares fit of the mean operator-norm error against `η`.
    pub fn linear_fit(&self, mode: Mode) -> stats::LinearFit {
        let (x, y): (Vec<f64>, Vec<f64>) = self.points.iter().filter(|p| p.mode == mode).map(|p| (p.eta, p.mean_err_op)).unzip();
        stats::linear_fit(&x, &y)
    }
}

/// Runs the paired experiment at every `η`. Blind controls do not depend on
/// `η` and are optimized once; aware controls at `η = 0` coincide with them.
pub fn snr_sweep(problem: &OptimizationProblem, etas: &[f64], cfg: &ExperimentConfig) -> Result<SweepResult> {
    if let Some(e) = etas.iter().find(|e| !(**e >= 0.0) || !e.is_finite()) {
        return invalid(format!("signal-to-noise ratios must be nonnegative, got {e}"));
    }
    if cfg.num_controls == 0 {
        return invalid("sweep needs at least one control");
    }
    let bank = NoiseBank::new(&cfg.noise, &problem.grid, problem.template.frame(), cfg.samples, cfg.noise_seed())?;
    let blind = optimize_controls(problem, Mode::Blind, cfg)?;
    let mut points = Vec::with_capacity(2 * etas.len());
    let mut comparisons = Vec::with_capacity(etas.len());
    for &eta in etas {
        let p = problem.with_eta(eta)?;
        let aware = if eta == 0.0 {
            blind.iter().map(|r| OptimizationResult { mode: Mode::Aware, ..r.clone() }).collect()
        } else {
            optimize_controls(&p, Mode::Aware, cfg)?
        };
        let cmp = paired(&p, &blind, &aware, &bank)?;
        for mode in [Mode::Blind, Mode::Aware] {
            let op: Vec<f64> = cmp.outcomes.iter().filter(|o| o.mode == mode).map(|o| o.stats.mean_op).collect();
            let fro: Vec<f64> = cmp.outcomes.iter().filter(|o| o.mode == mode).map(|o| o.stats.mean_fro).collect();
            let (m, lo, hi) = stats::mean_ci95(&op);
            let (mf, lof, hif) = stats::mean_ci95(&fro);
            points.push(SweepPoint { eta, mode, mean_err_op: m, ci_lo: lo, ci_hi: hi, mean_err_fro: mf, ci_lo_fro: lof, ci_hi_fro: hif });
        }
        comparisons.push(cmp);
    }
    Ok(SweepResult { points, comparisons })
}

/// `η` grid `0, 0.25, …, 2.0`.
pub fn default_eta_grid() -> Vec<f64> {
    (0..=8).map(|k| 0.25 * k as f64).collect()
}

/// Cross-check helper: noiseless `path_length` through the generic
/// integrator path.
pub fn generic_path_length(problem: &OptimizationProblem, coeffs: &[f64]) -> Result<f64> {
    path_length(&problem.control(coeffs)?, &problem.metric, &problem.grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::build_noise_trajectory;
    use crate::rode::propagate;
    use crate::su_algebra::random_special_unitary;
    use proptest::prelude::*;

    fn problem(eta: f64) -> OptimizationProblem {
        OptimizationProblem::one_qubit(OptimizationProblem::default_target(), 1.0, eta).unwrap()
    }

    fn coeffs(seed: u64) -> Vec<f64> {
        random_init(18, 1.0, seed)
    }

    #[test]
    fn one_qubit_problem_layout() {
        let p = problem(1.0);
        assert_eq!(p.num_coefficients(), 18);
        assert_eq!(p.grid.steps(), 400);
        assert!((p.drift_coeffs[1] - 0.5f64.sqrt()).abs() < 1e-15);
        assert!(OptimizationProblem::one_qubit(UnitaryOperator::identity(2).times_phase(0.2), 1.0, 1.0).is_err());
        assert!(problem(1.0).with_eta(-1.0).is_err());
    }

    #[test]
    fn exact_control_has_zero_blind_cost() {
        // Constant controls that cancel the drift and rotate by 0.4 about z.
        let mut p = problem(0.0);
        p = OptimizationProblem::new(p.target.clone(), p.template.frame().clone(), p.template.drift().clone(), 0, 1.0, p.metric.clone(), 0.0, p.grid.clone()).unwrap();
        let c = [0.0, -0.5f64.sqrt(), 0.4 * 2f64.sqrt()];
        assert!(p.cost_blind(&c).unwrap() < 1e-10);
        assert!(p.cost_phase_invariant(&c).unwrap().abs() < 1e-10);
    }

    #[test]
    fn kernel_matches_generic_propagation() {
        let p = problem(1.0);
        for seed in 0..50 {
            let c = coeffs(seed);
            let ctrl = p.control(&c).unwrap();
            let u = propagate(&ctrl, None, &p.grid).unwrap();
            let direct = (u.endpoint().matrix() - p.target.matrix()).norm_squared();
            assert!((p.cost_blind(&c).unwrap() - direct).abs() < 1e-10);
            assert!((p.path_length(&c).unwrap() - generic_path_length(&p, &c).unwrap()).abs() < 1e-12);
        }
        // A drift with trace contributes a global phase.
        let drift = pauli_word("Y").unwrap().scale(0.5).add(&HermitianOperator::identity(2).scale(0.3));
        let q = OptimizationProblem::new(p.target.clone(), p.template.frame().clone(), drift, 5, 1.0, p.metric.clone(), 1.0, p.grid.clone()).unwrap();
        assert!(q.kernel.is_some());
        let c = coeffs(9);
        let u = propagate_endpoint(&q.control(&c).unwrap(), None, &q.grid).unwrap();
        assert!((q.endpoint(&c).unwrap() - u.matrix()).norm() < 1e-10);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn cost_bounds_and_decomposition(seed in 0u64..10_000, eta in 0.0f64..3.0) {
            let p = problem(eta);
            let c = coeffs(seed);
            let blind = p.cost_blind(&c).unwrap();
            let aware = p.cost_aware(&c).unwrap();
            let l = p.path_length(&c).unwrap();
            prop_assert!(blind <= 8.0 + 1e-12);
            prop_assert!(((aware - blind) - (eta * l).powi(2)).abs() < 1e-12 * (1.0 + aware));
            prop_assert!(aware.sqrt() + 1e-12 >= blind.sqrt().max(eta * l));
        }
    }

    #[test]
    fn aware_equals_blind_at_zero_eta() {
        let p = problem(0.0);
        let c = coeffs(4);
        assert_eq!(p.cost_aware(&c).unwrap(), p.cost_blind(&c).unwrap());
        let zero = OptimizationProblem::new(UnitaryOperator::identity(2), p.template.frame().clone(), HermitianOperator::zeros(2), 5, 1.0, p.metric.clone(), 2.0, p.grid.clone()).unwrap();
        assert!(zero.cost_aware(&[0.0; 18]).unwrap() < 1e-20);
    }

    #[test]
    fn blind_cost_is_phase_sensitive() {
        let p = problem(0.0);
        let c = coeffs(1);
        let u = UnitaryOperator::new(p.endpoint(&c).unwrap()).unwrap();
        let phased = u.times_phase(0.3);
        let d = (u.matrix() - phased.matrix()).norm_squared();
        assert!(d > 0.0);
        let inv = 4.0 - 2.0 * (u.adjoint().compose(&phased)).matrix().trace().norm();
        assert!(inv.abs() < 1e-12);
    }

    #[test]
    fn nelder_mead_minimizes_rosenbrock() {
        let f = |x: &[f64]| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
        let m = nelder_mead(f, &[-1.2, 1.0], &OptimizeOptions { max_evals: 5000, ..Default::default() });
        assert!(m.f < 1e-10);
        assert!(m.history.windows(2).all(|w| w[1] <= w[0]));
        let g = gradient_descent(|x: &[f64]| x.iter().map(|v| (v - 2.0).powi(2)).sum(), &[0.0; 4], &OptimizeOptions::default());
        assert!(g.f < 1e-8);
    }

    #[test]
    fn blind_optimization_reaches_target() {
        let p = problem(0.0);
        let r = optimize(&p, Mode::Blind, &OptimizeOptions { restarts: 5, seed: 3, ..Default::default() }).unwrap();
        assert!(r.blind_cost < 1e-4, "blind cost {}", r.blind_cost);
        assert!(r.cost <= r.initial_cost);
        assert!(r.history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn optimization_is_deterministic() {
        let p = problem(1.0);
        let opts = OptimizeOptions { max_evals: 2000, restarts: 2, seed: 8, ..Default::default() };
        let a = optimize(&p, Mode::Aware, &opts).unwrap();
        let b = optimize(&p, Mode::Aware, &opts).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn large_eta_prefers_short_controls() {
        let opts = OptimizeOptions { max_evals: 6000, seed: 5, ..Default::default() };
        let short = optimize(&problem(1e3), Mode::Aware, &opts).unwrap();
        let mid = optimize(&problem(1.0), Mode::Aware, &opts).unwrap();
        assert!(short.path_length <= mid.path_length);
    }

    fn bank(p: &OptimizationProblem, n: usize, seed: u64) -> NoiseBank {
        let spec = ExperimentConfig::defaults(1.0).noise;
        NoiseBank::new(&spec, &p.grid, p.template.frame(), n, seed).unwrap()
    }

    #[test]
    fn bank_evaluation_matches_generic_noise_path() {
        let p = problem(1.3);
        let c = coeffs(2);
        let b = bank(&p, 5, 100);
        let s = evaluate_robust(&p, &c, &b).unwrap();
        let ctrl = p.control(&c).unwrap();
        for i in 0..5 {
            let noise = build_noise_trajectory(&b.spec, &ctrl, Some(&p.metric), 1.3, &p.grid, 100 + i as u64).unwrap();
            let u = propagate_endpoint(&ctrl, Some(&noise), &p.grid).unwrap();
            let e = operator_norm(&(u.matrix() - p.target.matrix()));
            assert!((e - s.err_op[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn robust_evaluation_examples() {
        // Constant controls that hit the target exactly.
        let mut c = vec![0.0; 18];
        c[6] = -0.5f64.sqrt();
        c[12] = 0.4 * 2f64.sqrt();
        let p0 = problem(0.0);
        let b = bank(&p0, 20, 1);
        let s = evaluate_robust(&p0, &c, &b).unwrap();
        assert!(s.err_op.iter().all(|e| *e == s.residual_op));
        let means: Vec<f64> = [0.5, 1.0, 2.0].iter().map(|&eta| evaluate_robust(&problem(eta), &c, &b).unwrap().mean_op).collect();
        assert!(means[0] <= means[1] && means[1] <= means[2], "{means:?}");
        let again = evaluate_robust(&problem(1.0), &c, &b).unwrap();
        assert_eq!(again, evaluate_robust(&problem(1.0), &c, &b).unwrap());
    }

    #[test]
    fn triangle_bound_holds_per_sample() {
        let p = problem(1.7);
        let b = bank(&p, 30, 4);
        for seed in 0..5 {
            let c = coeffs(seed);
            let s = evaluate_robust(&p, &c, &b).unwrap();
            for e in &s.err_fro {
                assert!(*e <= s.residual_fro + s.noise_length + 1e-4);
            }
        }
    }

    #[test]
    fn general_dimension_fallback() {
        let frame = Arc::new(PauliFrame::from_qubits(2).unwrap());
        let metric = NoiseMetric::isotropic(frame.clone(), 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let target = random_special_unitary(4, &mut rng);
        let grid = TimeGrid::uniform(1.0, 40).unwrap();
        let p = OptimizationProblem::new(target, frame.clone(), HermitianOperator::zeros(4), 1, 1.0, metric, 0.5, grid).unwrap();
        let c = random_init(p.num_coefficients(), 1.0, 3);
        assert!(p.cost_aware(&c).unwrap() >= p.cost_blind(&c).unwrap());
        let b = NoiseBank::new(&ExperimentConfig::defaults(1.0).noise, &p.grid, &frame, 3, 0).unwrap();
        let s = evaluate_robust(&p, &c, &b).unwrap();
        assert_eq!(s.err_op.len(), 3);
    }

    #[test]
    fn small_experiment_layout() {
        let p = problem(1.0);
        let mut cfg = ExperimentConfig::defaults(1.0);
        cfg.num_controls = 3;
        cfg.samples = 5;
        cfg.optimize.max_evals = 500;
        let cmp = experiment_noise_aware_vs_blind(&p, &cfg).unwrap();
        assert_eq!(cmp.outcomes.len(), 6);
        let mut buf = Vec::new();
        cmp.write_errors_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 6 * 5);
        assert!(text.starts_with("control_index,mode,sample_index,err_op,err_fro\n0,blind,0,"));
        let sweep = snr_sweep(&p, &[0.0, 1.0], &cfg).unwrap();
        assert_eq!(sweep.points.len(), 4);
        let z = &sweep.comparisons[0];
        assert_eq!(z.mean_blind_op, z.mean_aware_op);
        for o in &z.outcomes {
            assert!(o.stats.err_op.iter().all(|e| *e == o.stats.residual_op));
        }
    }
}
