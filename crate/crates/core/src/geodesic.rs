//! Left-invariant noise metrics on SU(n) and their geodesics.
//!
//! Curves are described by their body velocity `x⁻¹ẋ = −i Σ_a v^a H_a` in an
//! orthonormal frame `{H_a}`. With `e_a = −iH_a` the bracket is
//! `[e_b, e_c] = Σ_a C_abc e_a`, where `C_abc = Im Tr(H_a [H_b, H_c])`.
//! For `g_Λ = diag(l)` the geodesic (Euler–Arnold) equation reads
//! `v̇^a = −Γ^a_bc v^b v^c` with
//! `Γ^a_bc = (l_a C_abc + l_c C_cab + l_b C_bac) / (2 l_a)`.

use std::io::{self, Write};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::grid::TimeGrid;
use crate::rode::{matrix_entry_header, write_matrix_entries, ControlHamiltonian, Flavor, UnitaryTrajectory};
use crate::su_algebra::{
    expm_skew_matrix, logm_su, logm_su_traceless, CMatrix, HermitianOperator, PauliFrame, UnitaryOperator, C64,
};

/// Diagonal left-invariant metric `g_Λ = diag(l_1, …, l_m)` in a Pauli frame.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseMetric {
    frame: Arc<PauliFrame>,
    diag: Vec<f64>,
}

impl NoiseMetric {
    pub fn new(frame: Arc<PauliFrame>, diag: Vec<f64>) -> Result<Self> {
        if diag.len() != frame.len() {
            return invalid(format!("metric needs {} diagonal entries, got {}", frame.len(), diag.len()));
        }
        if let Some((j, l)) = diag.iter().enumerate().find(|(_, l)| !(**l > 0.0) || !l.is_finite()) {
            return invalid(format!("metric coefficient l[{j}] = {l} must be positive"));
        }
        Ok(Self { frame, diag })
    }

    pub fn isotropic(frame: Arc<PauliFrame>, scale: f64) -> Result<Self> {
        let m = frame.len();
        Self::new(frame, vec![scale; m])
    }

    pub fn frame(&self) -> &Arc<PauliFrame> {
        &self.frame
    }

    pub fn diag(&self) -> &[f64] {
        &self.diag
    }

    pub fn min_coefficient(&self) -> f64 {
        self.diag.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max_coefficient(&self) -> f64 {
        self.diag.iter().cloned().fold(0.0, f64::max)
    }

    pub fn norm_squared(&self, h: &[f64]) -> Result<f64> {
        self.check_len(h)?;
        Ok(self.norm_squared_unchecked(h))
    }

    pub(crate) fn norm_squared_unchecked(&self, h: &[f64]) -> f64 {
        h.iter().zip(&self.diag).map(|(x, l)| l * x * x).sum()
    }

    pub fn inner(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        self.check_len(a)?;
        self.check_len(b)?;
        Ok(a.iter().zip(b).zip(&self.diag).map(|((x, y), l)| l * x * y).sum())
    }

    fn check_len(&self, h: &[f64]) -> Result<()> {
        if h.len() != self.diag.len() {
            return invalid(format!("expected {} frame coefficients, got {}", self.diag.len(), h.len()));
        }
        Ok(())
    }
}

/// `√(Σ_j l_j h_j²)`.
pub fn metric_norm(metric: &NoiseMetric, h: &[f64]) -> Result<f64> {
    Ok(metric.norm_squared(h)?.sqrt())
}

/// Trapezoidal `∫₀^T √g_Λ(H₀(t), H₀(t)) dt`, drift included.
pub fn path_length(ctrl: &ControlHamiltonian, metric: &NoiseMetric, grid: &TimeGrid) -> Result<f64> {
    Ok(grid.integral(&speeds(ctrl, metric, grid)?))
}

/// `√g_Λ(H₀(t_k), H₀(t_k))` at every grid point.
pub fn speeds(ctrl: &ControlHamiltonian, metric: &NoiseMetric, grid: &TimeGrid) -> Result<Vec<f64>> {
    if metric.frame().len() != ctrl.frame().len() || metric.frame().dim() != ctrl.dim() {
        return invalid("metric frame does not match control frame");
    }
    grid.points()
        .iter()
        .map(|&t| Ok(metric.norm_squared_unchecked(&ctrl.frame_coefficients(t.min(ctrl.horizon()))?).sqrt()))
        .collect()
}

/// Structure constants `C[a][b][c] = Im Tr(H_a [H_b, H_c])`.
#[derive(Debug, Clone, PartialEq)]
pub struct StructureConstants {
    m: usize,
    data: Vec<f64>,
}

impl StructureConstants {
    pub fn new(frame: &PauliFrame) -> Self {
        let m = frame.len();
        let mut data = vec![0.0; m * m * m];
        let els: Vec<&CMatrix> = frame.elements().iter().map(|h| h.matrix()).collect();
        for b in 0..m {
            for c in (b + 1)..m {
                let comm = els[b] * els[c] - els[c] * els[b];
                for a in 0..m {
                    let v = (els[a] * &comm).trace().im;
                    data[(a * m + b) * m + c] = v;
                    data[(a * m + c) * m + b] = -v;
                }
            }
        }
        Self { m, data }
    }

    pub fn len(&self) -> usize {
        self.m
    }

    pub fn is_empty(&self) -> bool {
        self.m == 0
    }

    #[inline]
    pub fn get(&self, a: usize, b: usize, c: usize) -> f64 {
        self.data[(a * self.m + b) * self.m + c]
    }

    /// Matrix of `ad_ξ` in the `e_a` basis: `(ad_ξ)_{ac} = Σ_b ξ^b C_abc`.
    pub fn ad(&self, xi: &[f64]) -> DMatrix<f64> {
        let m = self.m;
        DMatrix::from_fn(m, m, |a, c| (0..m).map(|b| xi[b] * self.get(a, b, c)).sum())
    }
}

/// Frame Christoffel symbols `Γ^a_bc` of a diagonal left-invariant metric.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameChristoffel {
    m: usize,
    data: Vec<f64>,
}

impl FrameChristoffel {
    #[inline]
    pub fn get(&self, a: usize, b: usize, c: usize) -> f64 {
        self.data[(a * self.m + b) * self.m + c]
    }

    pub fn len(&self) -> usize {
        self.m
    }

    pub fn is_empty(&self) -> bool {
        self.m == 0
    }

    /// `−Γ^a_bc v^b v^c`.
    pub fn acceleration(&self, v: &[f64], out: &mut [f64]) {
        let m = self.m;
        for a in 0..m {
            let mut s = 0.0;
            for b in 0..m {
                if v[b] == 0.0 {
                    continue;
                }
                let row = &self.data[(a * m + b) * m..(a * m + b + 1) * m];
                s += v[b] * row.iter().zip(v).map(|(g, vc)| g * vc).sum::<f64>();
            }
            out[a] = -s;
        }
    }
}

pub fn frame_christoffel(metric: &NoiseMetric) -> FrameChristoffel {
    christoffel_from(&StructureConstants::new(metric.frame()), metric.diag())
}

fn christoffel_from(sc: &StructureConstants, l: &[f64]) -> FrameChristoffel {
    let m = sc.len();
    let mut data = vec![0.0; m * m * m];
    for a in 0..m {
        for b in 0..m {
            for c in 0..m {
                let v = l[a] * sc.get(a, b, c) + l[c] * sc.get(c, a, b) + l[b] * sc.get(b, a, c);
                data[(a * m + b) * m + c] = v / (2.0 * l[a]);
            }
        }
    }
    FrameChristoffel { m, data }
}

/// Geodesic on `[0, T]` starting at the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct GeodesicSolution {
    pub v0: Vec<f64>,
    /// Body velocity at grid points.
    pub velocities: Vec<Vec<f64>>,
    /// Body velocity at step midpoints, as used in the reconstruction.
    pub midpoint_velocities: Vec<Vec<f64>>,
    pub trajectory: UnitaryTrajectory,
    pub length: f64,
    /// Largest relative deviation of `g_Λ(v, v)` from its initial value.
    pub speed_drift: f64,
    pub endpoint_residual: f64,
    pub converged: bool,
    pub iterations: usize,
    pub restarts: usize,
}

impl GeodesicSolution {
    pub fn endpoint(&self) -> &UnitaryOperator {
        self.trajectory.endpoint()
    }

    pub fn csv_header(&self) -> String {
        let m = self.v0.len();
        let v: Vec<String> = (0..m).map(|a| format!("v{a}")).collect();
        format!("t,{},{}", v.join(","), matrix_entry_header("x", self.trajectory.endpoint().dim()))
    }

    pub fn write_csv<W: Write>(&self, out: &mut W) -> io::Result<()> {
        writeln!(out, "{}", self.csv_header())?;
        for ((t, v), x) in self.trajectory.grid.points().iter().zip(&self.velocities).zip(&self.trajectory.values) {
            write!(out, "{t:.12e}")?;
            for c in v {
                write!(out, ",{c:.12e}")?;
            }
            write_matrix_entries(out, x.matrix())?;
            writeln!(out)?;
        }
        Ok(())
    }
}

fn rk4_step(gamma: &FrameChristoffel, v: &[f64], dt: f64, scratch: &mut [Vec<f64>; 5]) -> Vec<f64> {
    let m = v.len();
    let [k1, k2, k3, k4, tmp] = scratch;
    gamma.acceleration(v, k1);
    for i in 0..m {
        tmp[i] = v[i] + 0.5 * dt * k1[i];
    }
    gamma.acceleration(tmp, k2);
    for i in 0..m {
        tmp[i] = v[i] + 0.5 * dt * k2[i];
    }
    gamma.acceleration(tmp, k3);
    for i in 0..m {
        tmp[i] = v[i] + dt * k3[i];
    }
    gamma.acceleration(tmp, k4);
    (0..m).map(|i| v[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])).collect()
}

/// Integrates the Euler–Arnold equation with RK4 and reconstructs
/// `x_{k+1} = x_k exp(−i Σ_a v^a(t_k + Δ/2) H_a Δ)`. Midpoint velocities come
/// from cubic Hermite interpolation of the RK4 nodes.
pub fn euler_arnold_flow(metric: &NoiseMetric, v0: &[f64], horizon: f64, steps: usize) -> Result<GeodesicSolution> {
    let gamma = frame_christoffel(metric);
    euler_arnold_with(metric, &gamma, v0, horizon, steps)
}

fn euler_arnold_with(
    metric: &NoiseMetric,
    gamma: &FrameChristoffel,
    v0: &[f64],
    horizon: f64,
    steps: usize,
) -> Result<GeodesicSolution> {
    let m = metric.frame().len();
    if v0.len() != m {
        return invalid(format!("initial velocity needs {m} components, got {}", v0.len()));
    }
    if steps < 10 {
        return invalid(format!("geodesic integration needs at least 10 steps, got {steps}"));
    }
    if !(horizon > 0.0) || !horizon.is_finite() {
        return invalid(format!("geodesic horizon must be positive, got {horizon}"));
    }
    let grid = TimeGrid::uniform(horizon, steps)?;
    let dt = horizon / steps as f64;
    let frame = metric.frame();
    let dim = frame.dim();
    let v0_norm = v0.iter().map(|x| x * x).sum::<f64>().sqrt();
    let e0 = metric.norm_squared_unchecked(v0);

    let mut scratch: [Vec<f64>; 5] = std::array::from_fn(|_| vec![0.0; m]);
    let mut velocities = Vec::with_capacity(steps + 1);
    let mut midpoints = Vec::with_capacity(steps);
    let mut values = Vec::with_capacity(steps + 1);
    let mut x = CMatrix::identity(dim, dim);
    let mut v = v0.to_vec();
    let mut f0 = vec![0.0; m];
    let mut f1 = vec![0.0; m];
    let mut speed_drift: f64 = 0.0;
    velocities.push(v.clone());
    values.push(UnitaryOperator::from_matrix_unchecked(x.clone()));
    for _ in 0..steps {
        let next = rk4_step(gamma, &v, dt, &mut scratch);
        let n = next.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !n.is_finite() || n > 1e3 * v0_norm.max(1e-300) {
            return Err(Error::Numeric(format!("geodesic velocity diverged (|v| = {n:e})")));
        }
        gamma.acceleration(&v, &mut f0);
        gamma.acceleration(&next, &mut f1);
        let vm: Vec<f64> = (0..m).map(|i| 0.5 * (v[i] + next[i]) + dt / 8.0 * (f0[i] - f1[i])).collect();
        let h = frame.combine_unchecked(&vm);
        x = &x * expm_skew_matrix(h.matrix(), dt);
        if e0 > 0.0 {
            speed_drift = speed_drift.max((metric.norm_squared_unchecked(&next) - e0).abs() / e0);
        }
        midpoints.push(vm);
        v = next;
        velocities.push(v.clone());
        values.push(UnitaryOperator::from_matrix_unchecked(x.clone()));
    }
    let speeds: Vec<f64> = velocities.iter().map(|v| metric.norm_squared_unchecked(v).sqrt()).collect();
    let length = grid.integral(&speeds);
    Ok(GeodesicSolution {
        v0: v0.to_vec(),
        velocities,
        midpoint_velocities: midpoints,
        trajectory: UnitaryTrajectory { grid, values, flavor: Flavor::Noiseless },
        length,
        speed_drift,
        endpoint_residual: 0.0,
        converged: true,
        iterations: 0,
        restarts: 0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShootingOptions {
    pub tol: f64,
    pub max_restarts: usize,
    pub max_iters: usize,
    pub steps: usize,
    pub seed: u64,
    /// Standard deviation of the random restart velocities, relative to the
    /// norm of the round-metric initial guess (absolute when the guess is 0).
    pub restart_scale: f64,
}

impl Default for ShootingOptions {
    fn default() -> Self {
        Self { tol: 1e-6, max_restarts: 8, max_iters: 60, steps: 200, seed: 0, restart_scale: 1.0 }
    }
}

/// Coefficients of the Hermitian log of `x(1)† V`, the shooting residual.
fn residual_vector(frame: &PauliFrame, endpoint: &CMatrix, target: &CMatrix) -> Option<Vec<f64>> {
    let w = UnitaryOperator::from_matrix_unchecked(endpoint.adjoint() * target);
    logm_su_traceless(&w).ok().map(|h| frame.coefficients(&h))
}

fn endpoint_of(metric: &NoiseMetric, gamma: &FrameChristoffel, v0: &[f64], steps: usize) -> Option<CMatrix> {
    euler_arnold_with(metric, gamma, v0, 1.0, steps)
        .ok()
        .map(|s| s.trajectory.endpoint().matrix().clone())
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

struct ShotOutcome {
    v0: Vec<f64>,
    residual: f64,
    iterations: usize,
}

fn newton_shoot(
    metric: &NoiseMetric,
    gamma: &FrameChristoffel,
    target: &CMatrix,
    start: Vec<f64>,
    opts: &ShootingOptions,
) -> ShotOutcome {
    let frame = metric.frame();
    let m = frame.len();
    let eval = |v: &[f64]| endpoint_of(metric, gamma, v, opts.steps).and_then(|x| residual_vector(frame, &x, target));
    let mut v = start;
    let mut r = match eval(&v) {
        Some(r) => r,
        None => return ShotOutcome { residual: f64::INFINITY, v0: v, iterations: 0 },
    };
    let mut rn = norm(&r);
    let mut iterations = 0;
    let h = 1e-6;
    while rn >= opts.tol && iterations < opts.max_iters {
        iterations += 1;
        let mut jac = DMatrix::zeros(m, m);
        let mut ok = true;
        for j in 0..m {
            let mut vp = v.clone();
            let mut vm = v.clone();
            vp[j] += h;
            vm[j] -= h;
            match (eval(&vp), eval(&vm)) {
                (Some(rp), Some(rm)) => {
                    for i in 0..m {
                        jac[(i, j)] = (rp[i] - rm[i]) / (2.0 * h);
                    }
                }
                _ => {
                    ok = false;
                    break;
                }
            }
        }
        if !ok {
            break;
        }
        let rhs = -DVector::from_column_slice(&r);
        let step = jac
            .clone()
            .lu()
            .solve(&rhs)
            .filter(|s| s.iter().all(|x| x.is_finite()))
            .or_else(|| jac.svd(true, true).solve(&rhs, 1e-12).ok());
        let Some(step) = step else { break };
        let mut alpha = 1.0;
        let mut improved = false;
        for _ in 0..30 {
            let trial: Vec<f64> = v.iter().zip(step.iter()).map(|(a, d)| a + alpha * d).collect();
            if let Some(rt) = eval(&trial) {
                let tn = norm(&rt);
                if tn < rn {
                    v = trial;
                    r = rt;
                    rn = tn;
                    improved = true;
                    break;
                }
            }
            alpha *= 0.5;
        }
        if !improved {
            break;
        }
    }
    ShotOutcome { v0: v, residual: rn, iterations }
}

/// Single shooting for the geodesic from `𝟙` to `target` on `[0, 1]`.
///
/// Restart 0 starts from the round-metric velocity (coefficients of
/// `log V`); further restarts perturb it with seeded Gaussian noise. The
/// shortest converged restart wins; without convergence the smallest
/// residual is returned with `converged = false`.
pub fn shoot_geodesic(metric: &NoiseMetric, target: &UnitaryOperator, opts: &ShootingOptions) -> Result<GeodesicSolution> {
    let frame = metric.frame();
    if target.dim() != frame.dim() {
        return invalid(format!("target is {0}x{0}, metric frame acts on dimension {1}", target.dim(), frame.dim()));
    }
    let det = target.determinant();
    if (det - C64::new(1.0, 0.0)).norm() > 1e-8 {
        return invalid(format!("target must be special unitary, det = {det}"));
    }
    let gamma = frame_christoffel(metric);
    let guess = match logm_su(target) {
        Ok(h) => frame.coefficients(&h),
        Err(_) => vec![0.0; frame.len()],
    };
    let scale = opts.restart_scale * if norm(&guess) > 0.0 { norm(&guess) } else { 1.0 };
    let starts: Vec<Vec<f64>> = (0..=opts.max_restarts)
        .map(|i| {
            if i == 0 {
                guess.clone()
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(i as u64));
                guess.iter().map(|g| g + scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)).collect()
            }
        })
        .collect();
    let shots: Vec<ShotOutcome> = starts
        .into_par_iter()
        .map(|s| newton_shoot(metric, &gamma, target.matrix(), s, opts))
        .collect();

    let mut best: Option<(usize, f64)> = None;
    for (i, shot) in shots.iter().enumerate() {
        if shot.residual < opts.tol {
            let len = metric.norm_squared_unchecked(&shot.v0).sqrt();
            if best.is_none_or(|(_, l)| len < l - 1e-12) {
                best = Some((i, len));
            }
        }
    }
    let converged = best.is_some();
    let pick = best.map(|(i, _)| i).unwrap_or_else(|| {
        shots
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.residual.total_cmp(&b.1.residual))
            .map(|(i, _)| i)
            .unwrap()
    });
    let shot = &shots[pick];
    let mut sol = euler_arnold_with(metric, &gamma, &shot.v0, 1.0, opts.steps)?;
    sol.endpoint_residual = shot.residual;
    sol.converged = converged;
    sol.iterations = shot.iterations;
    sol.restarts = opts.max_restarts;
    Ok(sol)
}

/// Body-velocity field of a composite curve `x(t) exp(−i P(t))`, measured
/// stepwise as `log(x_k† x_{k+1}) / Δ`, and its `g_Λ` length.
pub fn discrete_length(metric: &NoiseMetric, points: &[UnitaryOperator], grid: &TimeGrid) -> Result<f64> {
    if points.len() != grid.len() {
        return invalid("one point per grid time required");
    }
    let frame = metric.frame();
    let mut total = 0.0;
    for k in 0..grid.steps() {
        let w = points[k].adjoint().compose(&points[k + 1]);
        let h = logm_su_traceless(&w)?;
        total += metric.norm_squared_unchecked(&frame.coefficients(&h)).sqrt();
    }
    Ok(total)
}

/// Competitor path `x(t)·exp(−i s(t) Σ_a p_a(t) H_a)` with `s(t) = t(1 − t)/T²`
/// and cubic `p_a`, sharing the endpoints of `sol`.
pub fn perturbed_path(sol: &GeodesicSolution, metric: &NoiseMetric, cubic: &[[f64; 4]]) -> Result<Vec<UnitaryOperator>> {
    let frame = metric.frame();
    if cubic.len() != frame.len() {
        return invalid("one cubic per frame direction required");
    }
    let horizon = sol.trajectory.grid.horizon();
    Ok(sol
        .trajectory
        .grid
        .points()
        .iter()
        .zip(&sol.trajectory.values)
        .map(|(&t, x)| {
            let s = t / horizon;
            let bump = s * (1.0 - s);
            let c: Vec<f64> = cubic.iter().map(|p| bump * (p[0] + s * (p[1] + s * (p[2] + s * p[3])))).collect();
            let h = frame.combine_unchecked(&c);
            UnitaryOperator::from_matrix_unchecked(x.matrix() * expm_skew_matrix(h.matrix(), 1.0))
        })
        .collect())
}

/// Control Hamiltonian whose noiseless propagator is `x(t)†`, the inverse of
/// the geodesic, on horizon `T`: `h(t) = −v(t/T)/T`. Samples sit at grid
/// points and step midpoints so midpoint propagation reproduces the
/// reconstruction exactly. The drift is subtracted from the controls.
pub fn inverse_control(sol: &GeodesicSolution, frame: Arc<PauliFrame>, drift: HermitianOperator, horizon: f64) -> Result<ControlHamiltonian> {
    let grid = &sol.trajectory.grid;
    let tau = horizon / grid.horizon();
    let d = frame.coefficients(&drift);
    let mut times = Vec::with_capacity(2 * grid.len());
    let mut values = Vec::with_capacity(2 * grid.len());
    let sample = |v: &[f64]| -> Vec<f64> { v.iter().zip(&d).map(|(x, dj)| -x / tau - dj).collect() };
    for k in 0..grid.len() {
        times.push(grid.points()[k] * tau);
        values.push(sample(&sol.velocities[k]));
        if k < grid.steps() {
            times.push(grid.midpoint(k) * tau);
            values.push(sample(&sol.midpoint_velocities[k]));
        }
    }
    ControlHamiltonian::sampled(frame, drift, times, values, horizon)
}

/// Grid matching the reconstruction of `sol` rescaled to `horizon`.
pub fn rescaled_grid(sol: &GeodesicSolution, horizon: f64) -> Result<TimeGrid> {
    let tau = horizon / sol.trajectory.grid.horizon();
    TimeGrid::new(sol.trajectory.grid.points().iter().map(|t| t * tau).collect())
}

/// Bernoulli numbers `B_0 … B_n` with `B_1 = +1/2`.
pub fn bernoulli_numbers(n: usize) -> Vec<f64> {
    let mut b = vec![0.0; n + 1];
    b[0] = 1.0;
    for k in 1..=n {
        // Σ_{j<k+1} C(k+1, j) B_j = 0 for the B_1 = −1/2 convention.
        let mut binom = 1.0;
        let mut s = 0.0;
        for (j, bj) in b.iter().enumerate().take(k) {
            s += binom * bj;
            binom *= (k + 1 - j) as f64 / (j + 1) as f64;
        }
        b[k] = -s / (k + 1) as f64;
    }
    if n >= 1 {
        b[1] = 0.5;
    }
    b
}

/// `φ(A) = A (1 − e^{−A})^{−1} = Σ_k B_k A^k / k!` truncated at order `n`.
pub fn bernoulli_series(a: &DMatrix<f64>, order: usize) -> DMatrix<f64> {
    let b = bernoulli_numbers(order);
    let m = a.nrows();
    let mut acc = DMatrix::identity(m, m);
    let mut term = DMatrix::identity(m, m);
    for (k, bk) in b.iter().enumerate().skip(1) {
        term = &term * a / k as f64;
        if *bk != 0.0 {
            acc += &term * *bk;
        }
    }
    acc
}

/// Exponential-chart geometry `ξ ↦ exp(−i Σ_a ξ^a H_a)` for a noise metric.
///
/// The coordinate vector `∂_a` at `ξ` has body velocity `P(ξ)⁻¹ e_a` with
/// `P = φ(ad_ξ)`, so `g_ab(ξ) = g_Λ(P⁻¹e_a, P⁻¹e_b)`.
#[derive(Debug, Clone)]
pub struct ExponentialChart {
    metric: NoiseMetric,
    sc: StructureConstants,
    pub series_order: usize,
    pub fd_step: f64,
}

impl ExponentialChart {
    pub fn new(metric: &NoiseMetric, series_order: usize, fd_step: f64) -> Result<Self> {
        if series_order < 2 {
            return invalid("series order must be at least 2");
        }
        if !(fd_step > 0.0) {
            return invalid(format!("finite-difference step must be positive, got {fd_step}"));
        }
        Ok(Self { metric: metric.clone(), sc: StructureConstants::new(metric.frame()), series_order, fd_step })
    }

    fn check_chart(&self, xi: &[f64]) -> Result<()> {
        let n = norm(xi);
        if xi.len() != self.sc.len() {
            return invalid(format!("chart point needs {} coordinates, got {}", self.sc.len(), xi.len()));
        }
        if n >= std::f64::consts::FRAC_PI_2 {
            return invalid(format!("|ξ|_F = {n} outside the chart radius π/2"));
        }
        Ok(())
    }

    pub fn ad(&self, xi: &[f64]) -> DMatrix<f64> {
        self.sc.ad(xi)
    }

    /// `P(ξ) = φ(ad_ξ)`.
    pub fn pushforward(&self, xi: &[f64]) -> Result<DMatrix<f64>> {
        self.check_chart(xi)?;
        Ok(bernoulli_series(&self.ad(xi), self.series_order))
    }

    /// Columns are the body velocities of the coordinate vectors.
    pub fn body_frame(&self, xi: &[f64]) -> Result<DMatrix<f64>> {
        let p = self.pushforward(xi)?;
        p.try_inverse().ok_or_else(|| Error::Numeric("chart pushforward is singular".into()))
    }

    pub fn coordinate_metric(&self, xi: &[f64]) -> Result<DMatrix<f64>> {
        let q = self.body_frame(xi)?;
        let l = DMatrix::from_diagonal(&DVector::from_column_slice(self.metric.diag()));
        Ok(q.transpose() * l * q)
    }

    /// `Γ^a_bc(ξ)` as `m` matrices indexed `[a][(b, c)]`, from central
    /// differences of `g_ab`.
    pub fn christoffel(&self, xi: &[f64]) -> Result<Vec<DMatrix<f64>>> {
        let m = self.sc.len();
        let h = self.fd_step;
        let g = self.coordinate_metric(xi)?;
        let ginv = g.clone().try_inverse().ok_or_else(|| Error::Numeric("coordinate metric is singular".into()))?;
        let mut dg = Vec::with_capacity(m);
        for d in 0..m {
            let mut p = xi.to_vec();
            let mut q = xi.to_vec();
            p[d] += h;
            q[d] -= h;
            dg.push((self.coordinate_metric(&p)? - self.coordinate_metric(&q)?) / (2.0 * h));
        }
        // Γ_{d,bc} = ½(∂_b g_cd + ∂_c g_bd − ∂_d g_bc)
        let mut out = vec![DMatrix::zeros(m, m); m];
        for b in 0..m {
            for c in 0..m {
                let lowered: Vec<f64> = (0..m).map(|d| 0.5 * (dg[b][(c, d)] + dg[c][(b, d)] - dg[d][(b, c)])).collect();
                for (a, oa) in out.iter_mut().enumerate() {
                    oa[(b, c)] = (0..m).map(|d| ginv[(a, d)] * lowered[d]).sum();
                }
            }
        }
        Ok(out)
    }

    fn second_derivative(&self, xi: &[f64], dxi: &[f64]) -> Result<Vec<f64>> {
        let gamma = self.christoffel(xi)?;
        Ok(gamma
            .iter()
            .map(|g| {
                let v = DVector::from_column_slice(dxi);
                -(v.transpose() * g * &v)[(0, 0)]
            })
            .collect())
    }

    /// RK4 integration of `ξ̈^a + Γ^a_bc ξ̇^b ξ̇^c = 0` from `ξ(0) = 0`,
    /// `ξ̇(0) = v0`; returns `exp(−i Σ ξ^a(T) H_a)`.
    pub fn geodesic_endpoint(&self, v0: &[f64], horizon: f64, steps: usize) -> Result<UnitaryOperator> {
        let m = self.sc.len();
        if v0.len() != m {
            return invalid(format!("initial velocity needs {m} components"));
        }
        let dt = horizon / steps as f64;
        let mut x = vec![0.0; m];
        let mut v = v0.to_vec();
        let add = |a: &[f64], b: &[f64], s: f64| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| x + s * y).collect() };
        for _ in 0..steps {
            let k1x = v.clone();
            let k1v = self.second_derivative(&x, &v)?;
            let x2 = add(&x, &k1x, 0.5 * dt);
            let v2 = add(&v, &k1v, 0.5 * dt);
            let k2v = self.second_derivative(&x2, &v2)?;
            let x3 = add(&x, &v2, 0.5 * dt);
            let v3 = add(&v, &k2v, 0.5 * dt);
            let k3v = self.second_derivative(&x3, &v3)?;
            let x4 = add(&x, &v3, dt);
            let v4 = add(&v, &k3v, dt);
            let k4v = self.second_derivative(&x4, &v4)?;
            for i in 0..m {
                x[i] += dt / 6.0 * (k1x[i] + 2.0 * v2[i] + 2.0 * v3[i] + v4[i]);
                v[i] += dt / 6.0 * (k1v[i] + 2.0 * k2v[i] + 2.0 * k3v[i] + k4v[i]);
            }
        }
        self.check_chart(&x)?;
        let h = self.metric.frame().combine_unchecked(&x);
        Ok(UnitaryOperator::from_matrix_unchecked(expm_skew_matrix(h.matrix(), 1.0)))
    }
}

/// Coordinate Christoffels of the exponential chart at `ξ`.
pub fn chart_christoffel_crosscheck(metric: &NoiseMetric, xi: &HermitianOperator, fd_step: f64, series_order: usize) -> Result<Vec<DMatrix<f64>>> {
    let chart = ExponentialChart::new(metric, series_order, fd_step)?;
    chart.christoffel(&metric.frame().coefficients(xi))
}
