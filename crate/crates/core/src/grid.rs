//! Time grids and running quadrature.

use crate::error::{invalid, Result};

/// Default resolution: uniform steps per unit time.
pub const DEFAULT_STEPS_PER_UNIT: usize = 400;

/// Strictly increasing time grid starting at `t₀ = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    points: Vec<f64>,
}

impl TimeGrid {
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.len() < 2 {
            return invalid("time grid needs at least two points");
        }
        if points[0] != 0.0 {
            return invalid(format!("time grid must start at 0, got {}", points[0]));
        }
        if points.iter().any(|t| !t.is_finite()) {
            return invalid("time grid contains non-finite values");
        }
        if points.windows(2).any(|w| w[1] <= w[0]) {
            return invalid("time grid must be strictly increasing");
        }
        Ok(Self { points })
    }

    pub fn uniform(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return invalid(format!("horizon must be positive, got {horizon}"));
        }
        if steps == 0 {
            return invalid("grid needs at least one step");
        }
        let dt = horizon / steps as f64;
        let mut points: Vec<f64> = (0..=steps).map(|k| k as f64 * dt).collect();
        points[steps] = horizon;
        Ok(Self { points })
    }

    /// Uniform grid with `ceil(steps_per_unit · horizon)` steps.
    pub fn with_resolution(horizon: f64, steps_per_unit: usize) -> Result<Self> {
        let steps = ((steps_per_unit as f64) * horizon).ceil().max(1.0) as usize;
        Self::uniform(horizon, steps)
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn steps(&self) -> usize {
        self.points.len() - 1
    }

    pub fn horizon(&self) -> f64 {
        *self.points.last().unwrap()
    }

    pub fn dt(&self, k: usize) -> f64 {
        self.points[k + 1] - self.points[k]
    }

    pub fn midpoint(&self, k: usize) -> f64 {
        0.5 * (self.points[k] + self.points[k + 1])
    }

    pub fn matches(&self, other: &TimeGrid) -> bool {
        self.len() == other.len()
            && self
                .points
                .iter()
                .zip(&other.points)
                .all(|(a, b)| (a - b).abs() <= 1e-12 * (1.0 + a.abs()))
    }

    /// Running trapezoidal integral `∫₀^{t_k} f`, one value per grid point.
    pub fn running_integral(&self, values: &[f64]) -> Vec<f64> {
        debug_assert_eq!(values.len(), self.len());
        let mut out = Vec::with_capacity(values.len());
        let mut acc = 0.0;
        out.push(0.0);
        for k in 0..self.steps() {
            acc += 0.5 * self.dt(k) * (values[k] + values[k + 1]);
            out.push(acc);
        }
        out
    }

    pub fn integral(&self, values: &[f64]) -> f64 {
        *self.running_integral(values).last().unwrap()
    }
}
