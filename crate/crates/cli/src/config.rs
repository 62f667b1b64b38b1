//! Run configuration: JSON schema, overrides and semantic validation.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use num_complex::Complex64;
use rode_core::control::{default_eta_grid, OptimizationProblem, OptimizeOptions};
use rode_core::geodesic::NoiseMetric;
use rode_core::noise::{AmplitudeMode, Branch, Coupling, HamiltonianPath, MaternConfig, NoiseModelSpec};
use rode_core::su_algebra::{expm_skew, pauli_word, CMatrix};
use rode_core::{HermitianOperator, PauliFrame, TimeGrid, UnitaryOperator};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Simulate,
    Bounds,
    Geodesic,
    Optimize,
    Sweep,
    Wcnc,
    Validate,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Bounds => "bounds",
            Command::Geodesic => "geodesic",
            Command::Optimize => "optimize",
            Command::Sweep => "sweep",
            Command::Wcnc => "wcnc",
            Command::Validate => "validate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Optional; must agree with the command given on the command line.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub command: Option<Command>,
    pub system: SystemConfig,
    pub noise: NoiseConfig,
    /// Diagonal of the noise metric in the Pauli frame. Defaults to
    /// `(1, 1/100, 1/100)` on one qubit and all ones otherwise.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metric: Option<Vec<f64>>,
    pub problem: ProblemConfig,
    pub numeric: NumericConfig,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            command: None,
            system: SystemConfig::default(),
            noise: NoiseConfig::default(),
            metric: None,
            problem: ProblemConfig::default(),
            numeric: NumericConfig::default(),
            seed: 0,
            output: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SystemConfig {
    pub qubits: usize,
    /// Drift as coefficients of unnormalized Pauli words, e.g. `{"Y": 0.5}`.
    pub drift: BTreeMap<String, f64>,
}

impl Default for SystemConfig {
    fn default() -> Self {
        Self { qubits: 1, drift: BTreeMap::from([("Y".to_string(), 0.5)]) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKindName {
    Zero,
    SquashedMatern,
    SquashedWiener,
    MixedUnitary,
    BitFlip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchConfig {
    pub probability: f64,
    /// Constant branch Hamiltonian in unnormalized Pauli words.
    #[serde(default)]
    pub hamiltonian: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    pub kind: NoiseKindName,
    pub matern: MaternConfig,
    pub wiener_scale: f64,
    pub bound: f64,
    pub flip_probability: f64,
    pub branches: Vec<BranchConfig>,
    /// Couple the envelope to the control through the noise metric. The
    /// optimize and sweep commands are always coupled.
    pub coupled: bool,
    pub coupling: Coupling,
    pub amplitude_mode: AmplitudeMode,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            kind: NoiseKindName::SquashedMatern,
            matern: MaternConfig::default(),
            wiener_scale: 1.0,
            bound: 1.0,
            flip_probability: 0.3,
            branches: Vec::new(),
            coupled: false,
            coupling: Coupling::default(),
            amplitude_mode: AmplitudeMode::Unit,
        }
    }
}

/// Target gate: `{"gate": "X" | "Z" | "H"}`, `{"z_rotation": θ}` for
/// `exp(−iθσz)`, or `{"matrix": [[[re, im], …], …]}` (row-major).
/// Targets are projected to the special unitary group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum TargetConfig {
    Gate(String),
    ZRotation(f64),
    Matrix(Vec<Vec<[f64; 2]>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProblemConfig {
    pub target: TargetConfig,
    pub horizon: f64,
    pub eta: f64,
    pub degree: usize,
    /// Control coefficients for simulate, bounds and wcnc, flattened
    /// direction-major. Zero controls when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coefficients: Option<Vec<f64>>,
}

impl Default for ProblemConfig {
    fn default() -> Self {
        Self { target: TargetConfig::ZRotation(0.4), horizon: 1.0, eta: 1.0, degree: 5, coefficients: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NumericConfig {
    pub steps_per_unit: usize,
    /// Noise samples per ensemble (and per control).
    pub samples: usize,
    pub num_controls: usize,
    pub bound_slack: f64,
    pub tightness_epsilons: Vec<f64>,
    pub shooting_tolerance: f64,
    pub shooting_restarts: usize,
    pub shooting_steps: usize,
    pub max_evals: usize,
    pub restarts: usize,
    /// Simplex cost-spread tolerance of the optimizer.
    pub ftol: f64,
    pub etas: Vec<f64>,
    pub tube_epsilons: Vec<f64>,
    pub tube_samples: usize,
}

impl Default for NumericConfig {
    fn default() -> Self {
        let opt = OptimizeOptions::default();
        Self {
            steps_per_unit: 400,
            samples: 100,
            num_controls: 100,
            bound_slack: 1e-4,
            tightness_epsilons: vec![0.0, 1e-1, 1e-2, 1e-3],
            shooting_tolerance: 1e-6,
            shooting_restarts: 8,
            shooting_steps: 200,
            max_evals: opt.max_evals,
            restarts: opt.restarts,
            ftol: opt.ftol,
            etas: default_eta_grid(),
            tube_epsilons: vec![0.5, 0.25, 0.125],
            tube_samples: 1000,
        }
    }
}

/// Sets `path` (dot separated) in a JSON object. The value is parsed as JSON
/// and taken as a plain string when that fails.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {assignment:?} is not of the form key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("override key {key:?} is malformed")));
    }
    let value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
    let mut node = root;
    for (i, part) in parts.iter().enumerate() {
        if !node.is_object() {
            return Err(CliError::Config(format!("override key {key:?} descends into a non-object")));
        }
        let map = node.as_object_mut().unwrap();
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!()
}

pub fn parse_config(text: &str, overrides: &[String]) -> Result<RunConfig, CliError> {
    let mut value: Value = if text.trim().is_empty() {
        Value::Object(Default::default())
    } else {
        serde_json::from_str(text).map_err(|e| CliError::Config(format!("config is not valid JSON: {e}")))?
    };
    if !value.is_object() {
        return Err(CliError::Config("config must be a JSON object".into()));
    }
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    serde_json::from_value(value).map_err(|e| CliError::Config(format!("config schema: {e}")))
}

fn pauli_sum(terms: &BTreeMap<String, f64>, qubits: usize, field: &str, out: &mut Vec<String>) -> Option<HermitianOperator> {
    let dim = 1usize << qubits;
    let mut h = HermitianOperator::zeros(dim);
    let mut ok = true;
    for (word, c) in terms {
        if word.len() != qubits {
            out.push(format!("{field}.{word}: Pauli word must have {qubits} letters"));
            ok = false;
            continue;
        }
        match pauli_word(word) {
            Ok(p) if c.is_finite() => h = h.add_scaled(&p, *c),
            Ok(_) => {
                out.push(format!("{field}.{word}: coefficient must be finite"));
                ok = false;
            }
            Err(e) => {
                out.push(format!("{field}.{word}: {e}"));
                ok = false;
            }
        }
    }
    ok.then_some(h)
}

impl RunConfig {
    fn qubits_ok(&self) -> bool {
        (1..=2).contains(&self.system.qubits)
    }

    pub fn frame(&self) -> Result<Arc<PauliFrame>, CliError> {
        Ok(Arc::new(PauliFrame::from_qubits(self.system.qubits)?))
    }

    pub fn dim(&self) -> usize {
        1 << self.system.qubits
    }

    pub fn drift(&self) -> Result<HermitianOperator, CliError> {
        let mut d = Vec::new();
        pauli_sum(&self.system.drift, self.system.qubits, "system.drift", &mut d).ok_or_else(|| CliError::Config(d.join("; ")))
    }

    pub fn metric_diag(&self) -> Vec<f64> {
        match &self.metric {
            Some(m) => m.clone(),
            None if self.system.qubits == 1 => vec![1.0, 0.01, 0.01],
            None => vec![1.0; (1 << (2 * self.system.qubits)) - 1],
        }
    }

    pub fn metric(&self) -> Result<NoiseMetric, CliError> {
        Ok(NoiseMetric::new(self.frame()?, self.metric_diag())?)
    }

    pub fn grid(&self) -> Result<TimeGrid, CliError> {
        Ok(TimeGrid::with_resolution(self.problem.horizon, self.numeric.steps_per_unit)?)
    }

    pub fn num_coefficients(&self) -> usize {
        ((1usize << (2 * self.system.qubits)) - 1) * (self.problem.degree + 1)
    }

    pub fn coefficients(&self) -> Vec<f64> {
        self.problem.coefficients.clone().unwrap_or_else(|| vec![0.0; self.num_coefficients()])
    }

    pub fn noise_spec(&self) -> Result<NoiseModelSpec, CliError> {
        let n = &self.noise;
        let spec = match n.kind {
            NoiseKindName::Zero => NoiseModelSpec::zero(),
            NoiseKindName::SquashedMatern => NoiseModelSpec::squashed_matern(n.matern, n.bound),
            NoiseKindName::SquashedWiener => NoiseModelSpec::squashed_wiener(n.wiener_scale, n.bound),
            NoiseKindName::BitFlip => NoiseModelSpec::bit_flip(n.flip_probability),
            NoiseKindName::MixedUnitary => {
                let mut d = Vec::new();
                let branches = n
                    .branches
                    .iter()
                    .enumerate()
                    .map(|(i, b)| {
                        let h = pauli_sum(&b.hamiltonian, self.system.qubits, &format!("noise.branches[{i}].hamiltonian"), &mut d);
                        Branch { probability: b.probability, path: h.map_or(HamiltonianPath::Zero, HamiltonianPath::Constant) }
                    })
                    .collect();
                if !d.is_empty() {
                    return Err(CliError::Config(d.join("; ")));
                }
                NoiseModelSpec::mixed_unitary(branches)
            }
        };
        Ok(spec.with_coupling(n.coupling).with_amplitude_mode(n.amplitude_mode))
    }

    pub fn target(&self) -> Result<UnitaryOperator, CliError> {
        let dim = self.dim();
        let u = match &self.problem.target {
            TargetConfig::ZRotation(theta) => {
                if self.system.qubits != 1 {
                    return Err(CliError::Config("problem.target: z_rotation needs one qubit".into()));
                }
                expm_skew(&pauli_word("Z")?, *theta)?
            }
            TargetConfig::Gate(name) => {
                if self.system.qubits != 1 {
                    return Err(CliError::Config("problem.target: named gates act on one qubit".into()));
                }
                let m = match name.as_str() {
                    "X" => pauli_word("X")?.into_matrix(),
                    "Z" => pauli_word("Z")?.into_matrix(),
                    "H" | "H-gate" => pauli_word("X")?.add(&pauli_word("Z")?).scale(std::f64::consts::FRAC_1_SQRT_2).into_matrix(),
                    other => return Err(CliError::Config(format!("problem.target.gate: unknown gate {other:?}"))),
                };
                UnitaryOperator::new(m)?
            }
            TargetConfig::Matrix(rows) => {
                if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
                    return Err(CliError::Config(format!("problem.target.matrix: expected a {dim}×{dim} matrix")));
                }
                let entries: Vec<Complex64> = rows.iter().flatten().map(|[re, im]| Complex64::new(*re, *im)).collect();
                UnitaryOperator::new(CMatrix::from_row_slice(dim, dim, &entries))
                    .map_err(|e| CliError::Config(format!("problem.target.matrix: {e}")))?
            }
        };
        Ok(u.to_special_unitary())
    }

    pub fn optimization_problem(&self) -> Result<OptimizationProblem, CliError> {
        Ok(OptimizationProblem::new(
            self.target()?,
            self.frame()?,
            self.drift()?,
            self.problem.degree,
            self.problem.horizon,
            self.metric()?,
            self.problem.eta,
            self.grid()?,
        )?)
    }

    pub fn optimize_options(&self) -> OptimizeOptions {
        OptimizeOptions {
            max_evals: self.numeric.max_evals,
            restarts: self.numeric.restarts,
            ftol: self.numeric.ftol,
            seed: self.seed,
            ..OptimizeOptions::default()
        }
    }

    /// Every schema-level and semantic violation, each naming its field.
    pub fn diagnostics(&self, command: Command) -> Vec<String> {
        let mut out = Vec::new();
        if let Some(c) = self.command {
            if c != command && command != Command::Validate {
                out.push(format!("command: config names {:?} but {:?} was requested", c.name(), command.name()));
            }
        }
        if !self.qubits_ok() {
            out.push(format!("system.qubits: must be 1 or 2, got {}", self.system.qubits));
            return out;
        }
        pauli_sum(&self.system.drift, self.system.qubits, "system.drift", &mut out);

        let n = &self.noise;
        let nonneg = |x: f64| x >= 0.0 && x.is_finite();
        if !nonneg(n.bound) {
            out.push(format!("noise.bound: must be nonnegative, got {}", n.bound));
        }
        if !nonneg(n.coupling.prefactor) {
            out.push(format!("noise.coupling.prefactor: must be nonnegative, got {}", n.coupling.prefactor));
        }
        match n.kind {
            NoiseKindName::SquashedMatern => {
                if let Err(e) = n.matern.validate() {
                    out.push(format!("noise.matern: {e}"));
                }
            }
            NoiseKindName::SquashedWiener => {
                if !(n.wiener_scale > 0.0 && n.wiener_scale.is_finite()) {
                    out.push(format!("noise.wiener_scale: must be positive, got {}", n.wiener_scale));
                }
            }
            NoiseKindName::BitFlip => {
                if self.system.qubits != 1 {
                    out.push("noise.kind: bit-flip noise acts on one qubit".into());
                }
                if !(0.0..=1.0).contains(&n.flip_probability) {
                    out.push(format!("noise.flip_probability: must lie in [0, 1], got {}", n.flip_probability));
                }
            }
            NoiseKindName::MixedUnitary => {
                if n.branches.is_empty() {
                    out.push("noise.branches: mixed-unitary noise needs at least one branch".into());
                }
                for (i, b) in n.branches.iter().enumerate() {
                    if !(b.probability >= 0.0) {
                        out.push(format!("noise.branches[{i}].probability: must be nonnegative, got {}", b.probability));
                    }
                    pauli_sum(&b.hamiltonian, self.system.qubits, &format!("noise.branches[{i}].hamiltonian"), &mut out);
                }
                let total: f64 = n.branches.iter().map(|b| b.probability).sum();
                if !n.branches.is_empty() && (total - 1.0).abs() > 1e-12 {
                    out.push(format!("noise.branches: probabilities sum to {total}, expected 1"));
                }
            }
            NoiseKindName::Zero => {}
        }
        if matches!(command, Command::Optimize | Command::Sweep | Command::Wcnc)
            && !matches!(n.kind, NoiseKindName::SquashedMatern | NoiseKindName::SquashedWiener)
        {
            out.push(format!("noise.kind: the {} command needs squashed noise", command.name()));
        }

        let expected = (1usize << (2 * self.system.qubits)) - 1;
        let diag = self.metric_diag();
        if diag.len() != expected {
            out.push(format!("metric: expected {expected} coefficients, got {}", diag.len()));
        }
        for (i, l) in diag.iter().enumerate() {
            if !(*l > 0.0 && l.is_finite()) {
                out.push(format!("metric[{i}]: coefficient must be positive, got {l}"));
            }
        }

        let p = &self.problem;
        if !(p.horizon > 0.0 && p.horizon.is_finite()) {
            out.push(format!("problem.horizon: must be positive, got {}", p.horizon));
        }
        if !nonneg(p.eta) {
            out.push(format!("problem.eta: must be nonnegative, got {}", p.eta));
        }
        if p.degree > 12 {
            out.push(format!("problem.degree: at most 12 supported, got {}", p.degree));
        }
        if let Some(c) = &p.coefficients {
            if c.len() != self.num_coefficients() {
                out.push(format!("problem.coefficients: expected {} values, got {}", self.num_coefficients(), c.len()));
            }
            if c.iter().any(|x| !x.is_finite()) {
                out.push("problem.coefficients: values must be finite".into());
            }
        }
        if matches!(command, Command::Geodesic | Command::Optimize | Command::Sweep | Command::Validate) {
            if let Err(e) = self.target() {
                out.push(match e {
                    CliError::Config(m) => m,
                    other => format!("problem.target: {other}"),
                });
            }
        }

        let q = &self.numeric;
        if q.steps_per_unit == 0 {
            out.push("numeric.steps_per_unit: must be positive".into());
        }
        if q.samples == 0 {
            out.push("numeric.samples: must be positive".into());
        }
        if q.num_controls == 0 {
            out.push("numeric.num_controls: must be positive".into());
        }
        if q.restarts == 0 {
            out.push("numeric.restarts: must be positive".into());
        }
        if q.tube_samples == 0 {
            out.push("numeric.tube_samples: must be positive".into());
        }
        if q.shooting_steps < 10 {
            out.push(format!("numeric.shooting_steps: at least 10 required, got {}", q.shooting_steps));
        }
        if !(q.shooting_tolerance > 0.0) {
            out.push(format!("numeric.shooting_tolerance: must be positive, got {}", q.shooting_tolerance));
        }
        if !(q.ftol > 0.0 && q.ftol.is_finite()) {
            out.push(format!("numeric.ftol: must be positive, got {}", q.ftol));
        }
        if !nonneg(q.bound_slack) {
            out.push(format!("numeric.bound_slack: must be nonnegative, got {}", q.bound_slack));
        }
        if let Some(e) = q.etas.iter().find(|e| !nonneg(**e)) {
            out.push(format!("numeric.etas: must be nonnegative, got {e}"));
        }
        if q.etas.is_empty() {
            out.push("numeric.etas: at least one value required".into());
        }
        if let Some(e) = q.tightness_epsilons.iter().find(|e| !nonneg(**e)) {
            out.push(format!("numeric.tightness_epsilons: must be nonnegative, got {e}"));
        }
        if let Some(e) = q.tube_epsilons.iter().find(|e| !(**e > 0.0)) {
            out.push(format!("numeric.tube_epsilons: must be positive, got {e}"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = parse_config("{}", &[]).unwrap();
        assert!(c.diagnostics(Command::Validate).is_empty());
        assert_eq!(c.metric_diag(), vec![1.0, 0.01, 0.01]);
        assert_eq!(c.num_coefficients(), 18);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(parse_config(r#"{"sed": 1}"#, &[]), Err(CliError::Config(_))));
        assert!(matches!(parse_config(r#"{"noise": {"bond": 1}}"#, &[]), Err(CliError::Config(_))));
    }

    #[test]
    fn overrides_set_nested_values() {
        let c = parse_config("{}", &["numeric.samples=7".into(), "noise.kind=squashed-wiener".into(), "problem.eta=0.5".into()]).unwrap();
        assert_eq!(c.numeric.samples, 7);
        assert_eq!(c.noise.kind, NoiseKindName::SquashedWiener);
        assert_eq!(c.problem.eta, 0.5);
        assert!(parse_config("{}", &["numeric.samples".into()]).is_err());
    }

    #[test]
    fn branch_probability_violation_names_field() {
        let text = r#"{"noise": {"kind": "mixed-unitary", "branches": [
            {"probability": 0.6, "hamiltonian": {"X": 1.0}}, {"probability": 0.6}]}}"#;
        let d = parse_config(text, &[]).unwrap().diagnostics(Command::Validate);
        assert_eq!(d.len(), 1, "{d:?}");
        assert!(d[0].starts_with("noise.branches"));
    }

    #[test]
    fn degenerate_metric_is_rejected() {
        let d = parse_config(r#"{"metric": [1.0, 0.0, 1.0]}"#, &[]).unwrap().diagnostics(Command::Validate);
        assert_eq!(d.len(), 1);
        assert!(d[0].starts_with("metric[1]"));
        let d = parse_config(r#"{"problem": {"eta": -1}}"#, &[]).unwrap().diagnostics(Command::Validate);
        assert!(d[0].starts_with("problem.eta"));
    }

    #[test]
    fn named_targets_are_special_unitary() {
        for g in ["X", "Z", "H"] {
            let c = parse_config(&format!(r#"{{"problem": {{"target": {{"gate": "{g}"}}}}}}"#), &[]).unwrap();
            let u = c.target().unwrap();
            assert!((u.determinant() - Complex64::new(1.0, 0.0)).norm() < 1e-12);
        }
        let c = parse_config(r#"{"problem": {"target": {"matrix": [[[0,0],[1,0]],[[1,0],[0,0]]]}}}"#, &[]).unwrap();
        assert!(c.target().is_ok());
        let bad = parse_config(r#"{"problem": {"target": {"matrix": [[[2,0],[0,0]],[[0,0],[1,0]]]}}}"#, &[]).unwrap();
        assert!(!bad.diagnostics(Command::Geodesic).is_empty());
    }
}
