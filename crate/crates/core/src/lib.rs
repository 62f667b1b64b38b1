//! Simulation and optimization toolkit for quantum systems driven by the
//! random Schrödinger equation `dU/dt = -i(H₀(t) + H₁(t, ω))U`.
//!
//! The crate is organised bottom-up:
//!
//! - [`su_algebra`]: dense Hermitian/unitary operators, orthonormal Pauli
//!   frames, spectral exponential and logarithm, Frobenius geometry on SU(n).
//! - [`special`]: modified Bessel function of the second kind for real order.
//! - [`noise`]: bounded Hermitian noise paths (squashed Matérn / Wiener
//!   processes, control-coupled envelopes, mixed-unitary branch models).
//! - [`rode`]: pathwise propagation, interaction picture, ensemble density
//!   matrices and error processes.
//! - [`bounds`]: linear and geometric error bounds, worst-case constructions,
//!   tube probabilities and decorrelation studies.
//! - [`geodesic`]: noise metrics, Euler–Arnold geodesics and shooting.
//! - [`control`]: noise-blind and noise-aware polynomial control optimization
//!   and the robustness experiments built on it.

pub mod bounds;
pub mod control;
pub mod error;
pub mod geodesic;
pub mod grid;
pub mod noise;
pub mod rode;
pub mod special;
pub mod stats;
pub mod su_algebra;

pub use error::{Error, Result};
pub use grid::TimeGrid;
pub use su_algebra::{CMatrix, HermitianOperator, NormKind, PauliFrame, UnitaryOperator};
