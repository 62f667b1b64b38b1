//! Bounded Hermitian noise processes.
//!
//! Squashed kinds draw one independent scalar process per frame direction,
//! squash each coordinate with `(2/π) arctan`, combine the coordinates in the
//! frame and scale the result by the envelope `Λ(t)`. Mixed-unitary models
//! pick one deterministic Hamiltonian path per realization.

use std::io::{self, Write};
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geodesic::NoiseMetric;
use crate::grid::TimeGrid;
use crate::rode::{matrix_entry_header, write_matrix_entries, ControlHamiltonian};
use crate::special::{bessel_k, gamma};
use crate::su_algebra::{HermitianOperator, PauliFrame};

const JITTER_LADDER: [f64; 3] = [1e-10, 1e-8, 1e-6];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaternConfig {
    pub nu: f64,
    pub length_scale: f64,
    pub amplitude: f64,
}

impl Default for MaternConfig {
    fn default() -> Self {
        Self { nu: 0.6, length_scale: 0.2, amplitude: 1.0 }
    }
}

impl MaternConfig {
    pub fn new(nu: f64, length_scale: f64, amplitude: f64) -> Result<Self> {
        let cfg = Self { nu, length_scale, amplitude };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.nu > 0.0) || !self.nu.is_finite() {
            return invalid(format!("matern nu must be positive, got {}", self.nu));
        }
        if !(self.length_scale > 0.0) || !self.length_scale.is_finite() {
            return invalid(format!("matern length_scale must be positive, got {}", self.length_scale));
        }
        if !(self.amplitude >= 0.0) || !self.amplitude.is_finite() {
            return invalid(format!("matern amplitude must be nonnegative, got {}", self.amplitude));
        }
        Ok(())
    }
}

/// Matérn covariance `σ² (2^{1−ν}/Γ(ν)) r^ν K_ν(r)` with `r = √(2ν) τ/ℓ`.
pub fn matern_covariance(tau: f64, cfg: &MaternConfig) -> Result<f64> {
    if !(tau >= 0.0) {
        return invalid(format!("matern covariance needs tau >= 0, got {tau}"));
    }
    let var = cfg.amplitude * cfg.amplitude;
    if tau == 0.0 {
        return Ok(var);
    }
    let r = (2.0 * cfg.nu).sqrt() * tau / cfg.length_scale;
    // K_ν underflows long before r^ν overflows; the covariance is zero there.
    if r > 700.0 {
        return Ok(0.0);
    }
    let k = bessel_k(cfg.nu, r)?;
    let log_pref = (1.0 - cfg.nu) * std::f64::consts::LN_2 - gamma(cfg.nu).ln() + cfg.nu * r.ln();
    Ok(var * log_pref.exp() * k)
}

/// Cached Cholesky factor of a Matérn covariance matrix on a fixed grid.
#[derive(Debug, Clone)]
pub struct GpSampler {
    factor: DMatrix<f64>,
    jitter: f64,
}

impl GpSampler {
    pub fn new(grid: &TimeGrid, cfg: &MaternConfig) -> Result<Self> {
        cfg.validate()?;
        let t = grid.points();
        let n = t.len();
        let var = cfg.amplitude * cfg.amplitude;
        if var == 0.0 {
            return Ok(Self { factor: DMatrix::zeros(n, n), jitter: 0.0 });
        }
        let mut cov = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let c = matern_covariance((t[i] - t[j]).abs(), cfg)?;
                cov[(i, j)] = c;
                cov[(j, i)] = c;
            }
        }
        for rel in JITTER_LADDER {
            let mut m = cov.clone();
            for i in 0..n {
                m[(i, i)] += rel * var;
            }
            if let Some(ch) = Cholesky::<f64, Dyn>::new(m) {
                return Ok(Self { factor: ch.unpack(), jitter: rel * var });
            }
        }
        Err(Error::Numeric(format!(
            "Cholesky of the Matérn covariance failed after jitter {:e}·σ²",
            JITTER_LADDER[JITTER_LADDER.len() - 1]
        )))
    }

    /// Diagonal jitter that made the factorization succeed.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn len(&self) -> usize {
        self.factor.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.factor.nrows() == 0
    }

    pub fn sample_with<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let n = self.factor.nrows();
        let z = DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
        (&self.factor * z).iter().copied().collect()
    }
}

/// One zero-mean Matérn GP sample on `grid`.
pub fn sample_scalar_gp(grid: &TimeGrid, cfg: &MaternConfig, seed: u64) -> Result<Vec<f64>> {
    let sampler = GpSampler::new(grid, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sampler.sample_with(&mut rng))
}

/// `(2E/π) arctan(x)`, strictly inside `(−E, E)`.
pub fn squash_arctan(x: f64, bound: f64) -> f64 {
    2.0 * bound / std::f64::consts::PI * x.atan()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKind {
    SquashedMatern,
    SquashedWiener,
    MixedUnitary,
    Zero,
}

/// How the coupled envelope depends on `g_Λ(H₀, H₀)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvelopeForm {
    /// `Λ = η·c·√g_Λ(H₀,H₀)`.
    #[default]
    Sqrt,
    /// `Λ = η·c·g_Λ(H₀,H₀)`.
    Literal,
}

/// Shape of the combined direction `Σ_j x_j H_j` before envelope scaling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AmplitudeMode {
    /// Normalized to unit Frobenius norm, so `‖H₁‖_F = Λ`.
    #[default]
    Unit,
    /// Divided by `√m`, so `‖H₁‖_F < Λ`.
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Coupling {
    #[serde(default = "one")]
    pub prefactor: f64,
    #[serde(default)]
    pub form: EnvelopeForm,
}

fn one() -> f64 {
    1.0
}

impl Default for Coupling {
    fn default() -> Self {
        Self { prefactor: 1.0, form: EnvelopeForm::Sqrt }
    }
}

/// Deterministic Hamiltonian path of one mixed-unitary branch.
#[derive(Debug, Clone, PartialEq)]
pub enum HamiltonianPath {
    Zero,
    Constant(HermitianOperator),
    /// Frame-coefficient polynomials, one row per direction.
    FramePolynomial(Vec<Vec<f64>>),
}

impl HamiltonianPath {
    fn evaluate(&self, frame: &PauliFrame, t: f64) -> HermitianOperator {
        match self {
            HamiltonianPath::Zero => HermitianOperator::zeros(frame.dim()),
            HamiltonianPath::Constant(h) => h.clone(),
            HamiltonianPath::FramePolynomial(rows) => {
                let c: Vec<f64> = rows.iter().map(|r| r.iter().rev().fold(0.0, |a, x| a * t + x)).collect();
                frame.combine_unchecked(&c)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub probability: f64,
    pub path: HamiltonianPath,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModelSpec {
    pub kind: NoiseKind,
    pub matern: Option<MaternConfig>,
    /// Standard deviation of the Wiener increments per unit time (and of
    /// the initial value).
    pub wiener_scale: f64,
    /// Bound `E` of the raw process; the uncoupled envelope is `η·E`.
    pub bound: f64,
    pub branches: Vec<Branch>,
    pub coupling: Coupling,
    pub amplitude_mode: AmplitudeMode,
}

impl NoiseModelSpec {
    pub fn zero() -> Self {
        Self {
            kind: NoiseKind::Zero,
            matern: None,
            wiener_scale: 1.0,
            bound: 0.0,
            branches: Vec::new(),
            coupling: Coupling::default(),
            amplitude_mode: AmplitudeMode::Unit,
        }
    }

    pub fn squashed_matern(cfg: MaternConfig, bound: f64) -> Self {
        Self { kind: NoiseKind::SquashedMatern, matern: Some(cfg), bound, ..Self::zero() }
    }

    pub fn squashed_wiener(scale: f64, bound: f64) -> Self {
        Self { kind: NoiseKind::SquashedWiener, wiener_scale: scale, bound, ..Self::zero() }
    }

    pub fn mixed_unitary(branches: Vec<Branch>) -> Self {
        Self { kind: NoiseKind::MixedUnitary, branches, ..Self::zero() }
    }

    /// Bit flip with probability `p`: `(π/2)σx` for one time unit, else 0.
    pub fn bit_flip(p: f64) -> Self {
        let x = crate::su_algebra::pauli_word("X").unwrap().scale(std::f64::consts::FRAC_PI_2);
        Self::mixed_unitary(vec![
            Branch { probability: p, path: HamiltonianPath::Constant(x) },
            Branch { probability: 1.0 - p, path: HamiltonianPath::Zero },
        ])
    }

    pub fn with_amplitude_mode(mut self, mode: AmplitudeMode) -> Self {
        self.amplitude_mode = mode;
        self
    }

    pub fn with_coupling(mut self, coupling: Coupling) -> Self {
        self.coupling = coupling;
        self
    }

    /// All violations, empty when the spec is valid.
    pub fn diagnostics(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.bound >= 0.0) || !self.bound.is_finite() {
            out.push(format!("bound must be nonnegative, got {}", self.bound));
        }
        if !(self.coupling.prefactor >= 0.0) || !self.coupling.prefactor.is_finite() {
            out.push(format!("coupling prefactor must be nonnegative, got {}", self.coupling.prefactor));
        }
        match self.kind {
            NoiseKind::SquashedMatern => match &self.matern {
                None => out.push("squashed-matern noise needs a matern config".into()),
                Some(cfg) => {
                    if let Err(e) = cfg.validate() {
                        out.push(e.to_string());
                    }
                }
            },
            NoiseKind::SquashedWiener => {
                if !(self.wiener_scale > 0.0) || !self.wiener_scale.is_finite() {
                    out.push(format!("wiener scale must be positive, got {}", self.wiener_scale));
                }
            }
            NoiseKind::MixedUnitary => {
                if self.branches.is_empty() {
                    out.push("mixed-unitary noise needs at least one branch".into());
                }
                if self.branches.iter().any(|b| !(b.probability >= 0.0)) {
                    out.push("branch probabilities must be nonnegative".into());
                }
                let total: f64 = self.branches.iter().map(|b| b.probability).sum();
                if (total - 1.0).abs() > 1e-12 {
                    out.push(format!("branch probabilities sum to {total}, expected 1"));
                }
            }
            NoiseKind::Zero => {}
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.diagnostics();
        if d.is_empty() {
            Ok(())
        } else {
            invalid(d.join("; "))
        }
    }
}

/// Sampled Hermitian noise path with its envelope.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseTrajectory {
    pub grid: TimeGrid,
    pub values: Vec<HermitianOperator>,
    pub envelope: Vec<f64>,
    pub seed: u64,
}

impl NoiseTrajectory {
    pub fn zero(grid: &TimeGrid, dim: usize) -> Self {
        Self {
            grid: grid.clone(),
            values: vec![HermitianOperator::zeros(dim); grid.len()],
            envelope: vec![0.0; grid.len()],
            seed: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.values[0].dim()
    }

    pub fn frobenius_norms(&self) -> Vec<f64> {
        self.values.iter().map(|h| h.frobenius_norm()).collect()
    }

    /// Largest `‖H₁(t_k)‖_F − Λ(t_k)`; nonpositive up to rounding when the
    /// envelope holds.
    pub fn envelope_excess(&self) -> f64 {
        self.values
            .iter()
            .zip(&self.envelope)
            .map(|(h, l)| h.frobenius_norm() - l)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn satisfies_envelope(&self) -> bool {
        self.envelope_excess() <= 1e-12
    }

    pub fn csv_header(dim: usize) -> String {
        format!("t,{},envelope", matrix_entry_header("h", dim))
    }

    pub fn write_csv<W: Write>(&self, out: &mut W) -> io::Result<()> {
        writeln!(out, "{}", Self::csv_header(self.dim()))?;
        for ((t, h), l) in self.grid.points().iter().zip(&self.values).zip(&self.envelope) {
            write!(out, "{t:.12e}")?;
            write_matrix_entries(out, h.matrix())?;
            writeln!(out, ",{l:.12e}")?;
        }
        Ok(())
    }
}

/// Noise generator bound to a spec and a grid; caches the GP factor.
#[derive(Debug, Clone)]
pub struct NoiseGenerator {
    spec: NoiseModelSpec,
    grid: TimeGrid,
    gp: Option<GpSampler>,
}

impl NoiseGenerator {
    pub fn new(spec: &NoiseModelSpec, grid: &TimeGrid) -> Result<Self> {
        spec.validate()?;
        let gp = match spec.kind {
            NoiseKind::SquashedMatern => Some(GpSampler::new(grid, spec.matern.as_ref().unwrap())?),
            _ => None,
        };
        Ok(Self { spec: spec.clone(), grid: grid.clone(), gp })
    }

    pub fn spec(&self) -> &NoiseModelSpec {
        &self.spec
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    /// Unsquashed per-direction paths `W_j(t_k)` for the squashed kinds,
    /// `m` rows of grid length. Empty for the other kinds.
    pub fn raw_paths(&self, directions: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match self.spec.kind {
            NoiseKind::SquashedMatern => {
                let gp = self.gp.as_ref().unwrap();
                (0..directions).map(|_| gp.sample_with(&mut rng)).collect()
            }
            NoiseKind::SquashedWiener => {
                let s = self.spec.wiener_scale;
                (0..directions)
                    .map(|_| {
                        let mut w = Vec::with_capacity(self.grid.len());
                        let mut x = s * rng.sample::<f64, _>(StandardNormal);
                        w.push(x);
                        for k in 0..self.grid.steps() {
                            x += s * self.grid.dt(k).sqrt() * rng.sample::<f64, _>(StandardNormal);
                            w.push(x);
                        }
                        w
                    })
                    .collect()
            }
            _ => Vec::new(),
        }
    }

    /// Squashed unit-bounded directions `x_j(t_k) ∈ (−1, 1)`.
    pub fn squashed_paths(&self, directions: usize, seed: u64) -> Vec<Vec<f64>> {
        self.raw_paths(directions, seed)
            .into_iter()
            .map(|row| row.into_iter().map(|x| squash_arctan(x, 1.0)).collect())
            .collect()
    }

    /// Envelope `Λ(t_k)` for the given control and coupling.
    pub fn envelope(&self, ctrl: &ControlHamiltonian, metric: Option<&NoiseMetric>, eta: f64) -> Result<Vec<f64>> {
        envelope(&self.spec, ctrl, metric, eta, &self.grid)
    }

    /// Combines squashed directions with an envelope into a trajectory.
    pub fn assemble(&self, frame: &PauliFrame, squashed: &[Vec<f64>], envelope: &[f64], seed: u64) -> NoiseTrajectory {
        assemble(frame, squashed, envelope, self.spec.amplitude_mode, &self.grid, seed)
    }

    /// One realization for `ctrl`. Squashed kinds are coupled to the
    /// control through `metric` when given.
    pub fn sample(&self, ctrl: &ControlHamiltonian, metric: Option<&NoiseMetric>, eta: f64, seed: u64) -> Result<NoiseTrajectory> {
        match self.spec.kind {
            NoiseKind::Zero => Ok(NoiseTrajectory { seed, ..NoiseTrajectory::zero(&self.grid, ctrl.dim()) }),
            NoiseKind::MixedUnitary => sample_mixed_unitary_on(&self.spec, ctrl.frame(), &self.grid, seed),
            NoiseKind::SquashedMatern | NoiseKind::SquashedWiener => {
                let env = self.envelope(ctrl, metric, eta)?;
                let x = self.squashed_paths(ctrl.frame().len(), seed);
                Ok(self.assemble(ctrl.frame(), &x, &env, seed))
            }
        }
    }
}

fn check_metric(ctrl: &ControlHamiltonian, metric: Option<&NoiseMetric>) -> Result<()> {
    if let Some(m) = metric {
        if m.frame().dim() != ctrl.dim() || m.frame().len() != ctrl.frame().len() {
            return invalid(format!(
                "metric frame (dim {}, {} directions) does not match control frame (dim {}, {} directions)",
                m.frame().dim(),
                m.frame().len(),
                ctrl.dim(),
                ctrl.frame().len()
            ));
        }
    }
    Ok(())
}

/// `Λ(t_k) = η·c·√g_Λ(h(t_k), h(t_k))` (or the literal `g_Λ` form) when
/// coupled, `η·E` otherwise.
pub fn envelope(
    spec: &NoiseModelSpec,
    ctrl: &ControlHamiltonian,
    metric: Option<&NoiseMetric>,
    eta: f64,
    grid: &TimeGrid,
) -> Result<Vec<f64>> {
    if !(eta >= 0.0) || !eta.is_finite() {
        return invalid(format!("signal-to-noise ratio must be nonnegative, got {eta}"));
    }
    check_metric(ctrl, metric)?;
    match metric {
        None => Ok(vec![eta * spec.bound; grid.len()]),
        Some(m) => grid
            .points()
            .iter()
            .map(|&t| {
                let h = ctrl.frame_coefficients(t.min(ctrl.horizon()))?;
                let g = m.norm_squared(&h)?;
                let base = match spec.coupling.form {
                    EnvelopeForm::Sqrt => g.sqrt(),
                    EnvelopeForm::Literal => g,
                };
                Ok(eta * spec.coupling.prefactor * base)
            })
            .collect(),
    }
}

fn assemble(
    frame: &PauliFrame,
    squashed: &[Vec<f64>],
    envelope: &[f64],
    mode: AmplitudeMode,
    grid: &TimeGrid,
    seed: u64,
) -> NoiseTrajectory {
    let m = frame.len();
    let mut coeffs = vec![0.0; m];
    let values = (0..grid.len())
        .map(|k| {
            for (c, row) in coeffs.iter_mut().zip(squashed) {
                *c = row[k];
            }
            let norm = coeffs.iter().map(|x| x * x).sum::<f64>().sqrt();
            let scale = match mode {
                AmplitudeMode::Unit if norm > 0.0 => envelope[k] / norm,
                AmplitudeMode::Unit => 0.0,
                AmplitudeMode::Raw => envelope[k] / (m as f64).sqrt(),
            };
            for c in coeffs.iter_mut() {
                *c *= scale;
            }
            frame.combine_unchecked(&coeffs)
        })
        .collect();
    NoiseTrajectory { grid: grid.clone(), values, envelope: envelope.to_vec(), seed }
}

/// Builds one noise realization for `ctrl`.
pub fn build_noise_trajectory(
    spec: &NoiseModelSpec,
    ctrl: &ControlHamiltonian,
    metric: Option<&NoiseMetric>,
    eta: f64,
    grid: &TimeGrid,
    seed: u64,
) -> Result<NoiseTrajectory> {
    check_metric(ctrl, metric)?;
    NoiseGenerator::new(spec, grid)?.sample(ctrl, metric, eta, seed)
}

fn branch_trajectory(path: &HamiltonianPath, frame: &PauliFrame, grid: &TimeGrid, seed: u64) -> NoiseTrajectory {
    let values: Vec<HermitianOperator> = grid.points().iter().map(|&t| path.evaluate(frame, t)).collect();
    let envelope = values.iter().map(|h| h.frobenius_norm()).collect();
    NoiseTrajectory { grid: grid.clone(), values, envelope, seed }
}

fn sample_mixed_unitary_on(spec: &NoiseModelSpec, frame: &Arc<PauliFrame>, grid: &TimeGrid, seed: u64) -> Result<NoiseTrajectory> {
    let j = draw_branch(spec, seed)?;
    Ok(branch_trajectory(&spec.branches[j].path, frame, grid, seed))
}

/// Index of the branch drawn for `seed`.
pub fn draw_branch(spec: &NoiseModelSpec, seed: u64) -> Result<usize> {
    if spec.kind != NoiseKind::MixedUnitary {
        return invalid("branch draws need a mixed-unitary spec");
    }
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (j, b) in spec.branches.iter().enumerate() {
        acc += b.probability;
        if u < acc {
            return Ok(j);
        }
    }
    Ok(spec.branches.iter().rposition(|b| b.probability > 0.0).unwrap_or(0))
}

/// One branch path drawn with its probability.
pub fn sample_mixed_unitary(spec: &NoiseModelSpec, frame: &Arc<PauliFrame>, grid: &TimeGrid, seed: u64) -> Result<NoiseTrajectory> {
    if spec.kind != NoiseKind::MixedUnitary {
        return invalid("sample_mixed_unitary needs a mixed-unitary spec");
    }
    sample_mixed_unitary_on(spec, frame, grid, seed)
}

/// Every branch path with its weight, for exact mixtures.
pub fn enumerate_branches(spec: &NoiseModelSpec, frame: &Arc<PauliFrame>, grid: &TimeGrid) -> Result<Vec<(f64, NoiseTrajectory)>> {
    if spec.kind != NoiseKind::MixedUnitary {
        return invalid("branch enumeration needs a mixed-unitary spec");
    }
    spec.validate()?;
    Ok(spec
        .branches
        .iter()
        .map(|b| (b.probability, branch_trajectory(&b.path, frame, grid, 0)))
        .collect())
}
