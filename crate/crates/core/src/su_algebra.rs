//! Complex matrix algebra on su(n) / SU(n).
//!
//! Operators are dense `n × n` complex matrices. Exponentials and logarithms
//! are spectral: `exp(-iHt)` diagonalises the Hermitian generator, and the
//! logarithm diagonalises the unitary through its (diagonal) Schur form. The
//! principal branch is used and eigenvalues within `1e-8` of `-1` are
//! rejected instead of being perturbed.

use std::fmt;

use nalgebra::{DMatrix, DVector, Matrix2};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub type C64 = Complex64;
pub type CMatrix = DMatrix<C64>;

const HERMITIAN_TOL: f64 = 1e-12;
const UNITARY_TOL: f64 = 1e-10;
const BRANCH_CUT_TOL: f64 = 1e-8;

/// Matrix norm used when reporting errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Operator,
    Frobenius,
}

impl NormKind {
    pub fn of(self, m: &CMatrix) -> f64 {
        match self {
            NormKind::Operator => operator_norm(m),
            NormKind::Frobenius => frobenius_norm(m),
        }
    }
}

impl fmt::Display for NormKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NormKind::Operator => write!(f, "operator"),
            NormKind::Frobenius => write!(f, "frobenius"),
        }
    }
}

pub fn frobenius_norm(m: &CMatrix) -> f64 {
    m.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Largest singular value.
pub fn operator_norm(m: &CMatrix) -> f64 {
    if m.nrows() == 2 && m.ncols() == 2 {
        let a = Matrix2::new(m[(0, 0)], m[(0, 1)], m[(1, 0)], m[(1, 1)]);
        return operator_norm_2x2(&a);
    }
    m.clone()
        .singular_values()
        .iter()
        .cloned()
        .fold(0.0, f64::max)
}

pub(crate) fn operator_norm_2x2(a: &Matrix2<C64>) -> f64 {
    let g = a.adjoint() * a;
    let m00 = g[(0, 0)].re;
    let m11 = g[(1, 1)].re;
    let disc = ((m00 - m11).powi(2) + 4.0 * g[(0, 1)].norm_sqr()).sqrt();
    (0.5 * (m00 + m11 + disc)).max(0.0).sqrt()
}

fn hermitian_defect(m: &CMatrix) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in i..n {
            worst = worst.max((m[(i, j)] - m[(j, i)].conj()).norm());
        }
    }
    worst
}

fn unitary_defect(m: &CMatrix) -> f64 {
    let n = m.nrows();
    frobenius_norm(&(m.adjoint() * m - CMatrix::identity(n, n)))
}

/// Dense Hermitian operator.
#[derive(Debug, Clone, PartialEq)]
pub struct HermitianOperator(CMatrix);

impl HermitianOperator {
    /// Validates Hermiticity to `1e-12` per entry and stores the exactly
    /// symmetrised matrix.
    pub fn new(m: CMatrix) -> Result<Self> {
        if m.nrows() != m.ncols() || m.nrows() == 0 {
            return invalid(format!("operator must be square and non-empty, got {}x{}", m.nrows(), m.ncols()));
        }
        let defect = hermitian_defect(&m);
        if !(defect <= HERMITIAN_TOL) {
            return invalid(format!("matrix is not Hermitian (defect {defect:.3e})"));
        }
        Ok(Self::symmetrized(m))
    }

    /// Projects onto the Hermitian part without validation. Used for products
    /// that are Hermitian in exact arithmetic.
    pub(crate) fn symmetrized(m: CMatrix) -> Self {
        let h = (&m + m.adjoint()) * C64::new(0.5, 0.0);
        Self(h)
    }

    pub fn zeros(dim: usize) -> Self {
        Self(CMatrix::zeros(dim, dim))
    }

    pub fn identity(dim: usize) -> Self {
        Self(CMatrix::identity(dim, dim))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.0
    }

    pub fn into_matrix(self) -> CMatrix {
        self.0
    }

    pub fn frobenius_norm(&self) -> f64 {
        frobenius_norm(&self.0)
    }

    pub fn operator_norm(&self) -> f64 {
        operator_norm(&self.0)
    }

    pub fn trace(&self) -> f64 {
        self.0.trace().re
    }

    /// `Re Tr(A B)`, the Frobenius inner product for Hermitian operators.
    pub fn inner(&self, other: &HermitianOperator) -> f64 {
        let n = self.dim();
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..n {
                acc += (self.0[(i, j)] * other.0[(j, i)]).re;
            }
        }
        acc
    }

    pub fn scale(&self, s: f64) -> Self {
        Self(&self.0 * C64::new(s, 0.0))
    }

    pub fn add(&self, other: &HermitianOperator) -> Self {
        Self(&self.0 + &other.0)
    }

    pub fn sub(&self, other: &HermitianOperator) -> Self {
        Self(&self.0 - &other.0)
    }

    /// `self + s·other`.
    pub fn add_scaled(&self, other: &HermitianOperator, s: f64) -> Self {
        Self(&self.0 + &other.0 * C64::new(s, 0.0))
    }

    pub fn traceless_part(&self) -> Self {
        let n = self.dim();
        let shift = self.trace() / n as f64;
        Self(&self.0 - CMatrix::identity(n, n) * C64::new(shift, 0.0))
    }

    /// `U† H U`: the interaction-picture image of `self` under `U`.
    pub fn conjugate_by(&self, u: &UnitaryOperator) -> Self {
        Self::symmetrized(u.0.adjoint() * &self.0 * &u.0)
    }

    /// `U H U†`.
    pub fn transform_by(&self, u: &UnitaryOperator) -> Self {
        Self::symmetrized(&u.0 * &self.0 * u.0.adjoint())
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        let mut ev: Vec<f64> = self.0.clone().symmetric_eigen().eigenvalues.iter().cloned().collect();
        ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
        ev
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|z| *z == C64::new(0.0, 0.0))
    }
}

/// Dense unitary operator.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitaryOperator(CMatrix);

impl UnitaryOperator {
    /// Validates `‖U†U − 𝟙‖_F < 1e-10`.
    pub fn new(m: CMatrix) -> Result<Self> {
        if m.nrows() != m.ncols() || m.nrows() == 0 {
            return invalid(format!("operator must be square and non-empty, got {}x{}", m.nrows(), m.ncols()));
        }
        let defect = unitary_defect(&m);
        if !(defect < UNITARY_TOL) {
            return invalid(format!("matrix is not unitary (defect {defect:.3e})"));
        }
        Ok(Self(m))
    }

    pub(crate) fn from_matrix_unchecked(m: CMatrix) -> Self {
        Self(m)
    }

    pub fn identity(dim: usize) -> Self {
        Self(CMatrix::identity(dim, dim))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.0
    }

    pub fn adjoint(&self) -> Self {
        Self(self.0.adjoint())
    }

    /// `self · other`.
    pub fn compose(&self, other: &UnitaryOperator) -> Self {
        Self(&self.0 * &other.0)
    }

    pub fn apply(&self, psi: &DVector<C64>) -> DVector<C64> {
        &self.0 * psi
    }

    pub fn unitarity_defect(&self) -> f64 {
        unitary_defect(&self.0)
    }

    pub fn determinant(&self) -> C64 {
        self.0.determinant()
    }

    /// Multiplies by `det(U)^{-1/n}` (principal root) so the result lies in SU(n).
    pub fn to_special_unitary(&self) -> Self {
        let n = self.dim() as f64;
        let phase = self.determinant().arg() / n;
        Self(&self.0 * C64::from_polar(1.0, -phase))
    }

    pub fn times_phase(&self, phi: f64) -> Self {
        Self(&self.0 * C64::from_polar(1.0, phi))
    }

    /// `‖self − other‖` in the requested norm.
    pub fn distance_in(&self, other: &UnitaryOperator, norm: NormKind) -> f64 {
        norm.of(&(&self.0 - &other.0))
    }
}

/// Orthonormal frame of traceless Hermitian operators spanning su(n).
#[derive(Debug, Clone, PartialEq)]
pub struct PauliFrame {
    dim: usize,
    basis: Vec<HermitianOperator>,
    labels: Vec<String>,
}

fn single_pauli(code: usize) -> CMatrix {
    let z = C64::new(0.0, 0.0);
    let o = C64::new(1.0, 0.0);
    let i = C64::new(0.0, 1.0);
    match code {
        0 => CMatrix::from_row_slice(2, 2, &[o, z, z, o]),
        1 => CMatrix::from_row_slice(2, 2, &[z, o, o, z]),
        2 => CMatrix::from_row_slice(2, 2, &[z, -i, i, z]),
        3 => CMatrix::from_row_slice(2, 2, &[o, z, z, -o]),
        _ => unreachable!("pauli code out of range"),
    }
}

fn kron(a: &CMatrix, b: &CMatrix) -> CMatrix {
    a.kronecker(b)
}

/// Unnormalised Pauli word such as `"XZ"` (first letter acts on the first
/// tensor factor).
pub fn pauli_word(word: &str) -> Result<HermitianOperator> {
    if word.is_empty() {
        return invalid("empty Pauli word");
    }
    let mut acc: Option<CMatrix> = None;
    for ch in word.chars() {
        let code = match ch.to_ascii_uppercase() {
            'I' => 0,
            'X' => 1,
            'Y' => 2,
            'Z' => 3,
            other => return invalid(format!("unknown Pauli letter {other:?} in {word:?}")),
        };
        let p = single_pauli(code);
        acc = Some(match acc {
            None => p,
            Some(m) => kron(&m, &p),
        });
    }
    Ok(HermitianOperator(acc.unwrap()))
}

impl PauliFrame {
    /// The `4^k − 1` non-identity Pauli words on `k` qubits, each divided by
    /// `2^{k/2}`, in lexicographic order with `I < X < Y < Z` per site.
    pub fn from_qubits(num_qubits: usize) -> Result<Self> {
        if num_qubits == 0 {
            return invalid("num_qubits must be at least 1");
        }
        if num_qubits > 6 {
            return invalid(format!("{num_qubits} qubits exceeds the supported dimension (n ≤ 64)"));
        }
        let dim = 1usize << num_qubits;
        let norm = (dim as f64).sqrt();
        let letters = ['I', 'X', 'Y', 'Z'];
        let total = 1usize << (2 * num_qubits);
        let mut basis = Vec::with_capacity(total - 1);
        let mut labels = Vec::with_capacity(total - 1);
        for index in 1..total {
            let mut digits = vec![0usize; num_qubits];
            let mut rest = index;
            for site in (0..num_qubits).rev() {
                digits[site] = rest % 4;
                rest /= 4;
            }
            let mut m = single_pauli(digits[0]);
            for &d in &digits[1..] {
                m = kron(&m, &single_pauli(d));
            }
            basis.push(HermitianOperator(m / C64::new(norm, 0.0)));
            labels.push(digits.iter().map(|&d| letters[d]).collect());
        }
        Ok(Self { dim, basis, labels })
    }

    /// Orthonormal frame for arbitrary `n ≥ 2`: Pauli words when `n` is a
    /// power of two, otherwise Gram–Schmidt over the elementary traceless
    /// Hermitian matrices (off-diagonal symmetric/antisymmetric pairs, then
    /// consecutive diagonal differences).
    pub fn for_dim(dim: usize) -> Result<Self> {
        if dim < 2 {
            return invalid(format!("su(n) frame needs n ≥ 2, got {dim}"));
        }
        if dim > 64 {
            return invalid(format!("dimension {dim} exceeds the supported n ≤ 64"));
        }
        if dim.is_power_of_two() {
            return Self::from_qubits(dim.trailing_zeros() as usize);
        }
        let z = C64::new(0.0, 0.0);
        let mut candidates = Vec::new();
        let mut labels = Vec::new();
        for j in 0..dim {
            for k in (j + 1)..dim {
                let mut s = CMatrix::from_element(dim, dim, z);
                s[(j, k)] = C64::new(1.0, 0.0);
                s[(k, j)] = C64::new(1.0, 0.0);
                candidates.push(s);
                labels.push(format!("S{j}{k}"));
                let mut a = CMatrix::from_element(dim, dim, z);
                a[(j, k)] = C64::new(0.0, -1.0);
                a[(k, j)] = C64::new(0.0, 1.0);
                candidates.push(a);
                labels.push(format!("A{j}{k}"));
            }
        }
        for j in 0..dim - 1 {
            let mut d = CMatrix::from_element(dim, dim, z);
            d[(j, j)] = C64::new(1.0, 0.0);
            d[(j + 1, j + 1)] = C64::new(-1.0, 0.0);
            candidates.push(d);
            labels.push(format!("D{j}"));
        }
        let mut basis: Vec<HermitianOperator> = Vec::with_capacity(candidates.len());
        for c in candidates {
            let mut v = HermitianOperator(c);
            for b in &basis {
                let proj = v.inner(b);
                v = v.add_scaled(b, -proj);
            }
            let norm = v.frobenius_norm();
            basis.push(v.scale(1.0 / norm));
        }
        Ok(Self { dim, basis, labels })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of frame elements, `n² − 1`.
    pub fn len(&self) -> usize {
        self.basis.len()
    }

    pub fn is_empty(&self) -> bool {
        self.basis.is_empty()
    }

    pub fn elements(&self) -> &[HermitianOperator] {
        &self.basis
    }

    pub fn element(&self, j: usize) -> &HermitianOperator {
        &self.basis[j]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// `Tr(H H_j)` for every frame element. The identity component of `H`
    /// is orthogonal to the frame and therefore dropped.
    pub fn coefficients(&self, h: &HermitianOperator) -> Vec<f64> {
        self.basis.iter().map(|b| h.inner(b)).collect()
    }

    /// `Σ_j c_j H_j`.
    pub fn combine(&self, coeffs: &[f64]) -> Result<HermitianOperator> {
        if coeffs.len() != self.len() {
            return invalid(format!("expected {} frame coefficients, got {}", self.len(), coeffs.len()));
        }
        Ok(self.combine_unchecked(coeffs))
    }

    pub(crate) fn combine_unchecked(&self, coeffs: &[f64]) -> HermitianOperator {
        let mut m = CMatrix::zeros(self.dim, self.dim);
        for (c, b) in coeffs.iter().zip(&self.basis) {
            if *c != 0.0 {
                m += &b.0 * C64::new(*c, 0.0);
            }
        }
        HermitianOperator(m)
    }
}

/// `exp(−iHt)` for Hermitian `H`.
pub fn expm_skew(h: &HermitianOperator, t: f64) -> Result<UnitaryOperator> {
    if hermitian_defect(&h.0) > HERMITIAN_TOL {
        return invalid("expm_skew requires a Hermitian generator");
    }
    Ok(UnitaryOperator(expm_skew_matrix(&h.0, t)))
}

/// Spectral `exp(−iHt)` on a raw matrix assumed Hermitian.
pub(crate) fn expm_skew_matrix(h: &CMatrix, t: f64) -> CMatrix {
    if h.nrows() == 2 {
        let a = Matrix2::new(h[(0, 0)], h[(0, 1)], h[(1, 0)], h[(1, 1)]);
        let e = expm_skew_2x2(&a, t);
        return CMatrix::from_row_slice(2, 2, &[e[(0, 0)], e[(0, 1)], e[(1, 0)], e[(1, 1)]]);
    }
    let eig = h.clone().symmetric_eigen();
    let q = &eig.eigenvectors;
    let n = h.nrows();
    let mut scaled = q.clone();
    for k in 0..n {
        let phase = C64::from_polar(1.0, -eig.eigenvalues[k] * t);
        for i in 0..n {
            scaled[(i, k)] *= phase;
        }
    }
    scaled * q.adjoint()
}

/// Closed-form `exp(−iHt)` for a 2×2 Hermitian `H = a₀𝟙 + a·σ`: the
/// eigenvalues are `a₀ ± |a|` with spectral projectors `(𝟙 ± â·σ)/2`.
#[inline]
pub(crate) fn expm_skew_2x2(h: &Matrix2<C64>, t: f64) -> Matrix2<C64> {
    let a0 = 0.5 * (h[(0, 0)].re + h[(1, 1)].re);
    let az = 0.5 * (h[(0, 0)].re - h[(1, 1)].re);
    let ax = 0.5 * (h[(0, 1)].re + h[(1, 0)].re);
    let ay = 0.5 * (h[(1, 0)].im - h[(0, 1)].im);
    let r = (ax * ax + ay * ay + az * az).sqrt();
    let rt = r * t;
    let c = rt.cos();
    let s = if rt.abs() < 1e-300 { t } else { rt.sin() / r };
    let phase = C64::from_polar(1.0, -a0 * t);
    // cos(rt)𝟙 − i·s·(a·σ)
    let m00 = C64::new(c, -s * az);
    let m11 = C64::new(c, s * az);
    let m01 = C64::new(-s * ay, -s * ax);
    let m10 = C64::new(s * ay, -s * ax);
    Matrix2::new(m00 * phase, m01 * phase, m10 * phase, m11 * phase)
}

/// Principal logarithm: Hermitian `H` with `exp(−iH) = U` and eigenvalues in
/// `(−π, π)`. Fails when an eigenvalue of `U` lies within `1e-8` of `−1`.
pub fn logm_su(u: &UnitaryOperator) -> Result<HermitianOperator> {
    let n = u.dim();
    let schur = u.0.clone().schur();
    let (q, t) = schur.unpack();
    let mut scaled = q.clone();
    for k in 0..n {
        let lambda = t[(k, k)];
        if (lambda + C64::new(1.0, 0.0)).norm() < BRANCH_CUT_TOL {
            return Err(Error::BranchCut {
                eigenvalue_re: lambda.re,
                eigenvalue_im: lambda.im,
            });
        }
        let theta = -lambda.arg();
        for i in 0..n {
            scaled[(i, k)] *= C64::new(theta, 0.0);
        }
    }
    Ok(HermitianOperator::symmetrized(scaled * q.adjoint()))
}

/// Traceless projection of [`logm_su`]; equals the logarithm itself for
/// special unitary input.
pub fn logm_su_traceless(u: &UnitaryOperator) -> Result<HermitianOperator> {
    Ok(logm_su(u)?.traceless_part())
}

/// Geodesic (Killing) distance `d_F(U, V) = ‖log(U†V)‖_F`.
pub fn frobenius_distance(u: &UnitaryOperator, v: &UnitaryOperator) -> Result<f64> {
    if u.dim() != v.dim() {
        return invalid(format!("dimension mismatch {} vs {}", u.dim(), v.dim()));
    }
    Ok(logm_su(&u.adjoint().compose(v))?.frobenius_norm())
}

/// Haar-random unitary via QR of a complex Ginibre matrix with the phase
/// correction on the diagonal of R.
pub fn random_unitary<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> UnitaryOperator {
    let g = CMatrix::from_fn(dim, dim, |_, _| {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        C64::new(re, im)
    });
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for k in 0..dim {
        let d = r[(k, k)];
        let phase = if d.norm() > 0.0 { d / d.norm() } else { C64::new(1.0, 0.0) };
        for i in 0..dim {
            q[(i, k)] *= phase;
        }
    }
    UnitaryOperator(q)
}

pub fn random_special_unitary<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> UnitaryOperator {
    random_unitary(dim, rng).to_special_unitary()
}

/// Hermitian matrix with independent standard normal real/imaginary parts
/// (GUE up to scaling).
pub fn random_hermitian<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> HermitianOperator {
    let g = CMatrix::from_fn(dim, dim, |_, _| {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        C64::new(re, im)
    });
    HermitianOperator::symmetrized(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sigma(code: usize) -> HermitianOperator {
        HermitianOperator(single_pauli(code))
    }

    /// Scaling-and-squaring Taylor series for `exp(−iHt)`, independent of
    /// the spectral route.
    fn expm_series_oracle(h: &CMatrix, t: f64) -> CMatrix {
        let n = h.nrows();
        let a = h * C64::new(0.0, -t);
        let norm = frobenius_norm(&a);
        let squarings = (norm.log2().ceil().max(0.0) as i32) + 4;
        let a = &a / C64::new(2f64.powi(squarings), 0.0);
        let mut term = CMatrix::identity(n, n);
        let mut sum = CMatrix::identity(n, n);
        for k in 1..30 {
            term = &term * &a / C64::new(k as f64, 0.0);
            sum += &term;
        }
        for _ in 0..squarings {
            sum = &sum * &sum;
        }
        sum
    }

    #[test]
    fn single_qubit_frame_is_normalised_paulis() {
        let f = PauliFrame::from_qubits(1).unwrap();
        assert_eq!(f.len(), 3);
        assert_eq!(f.labels(), &["X", "Y", "Z"]);
        let s2 = 2f64.sqrt();
        for (j, code) in [1, 2, 3].into_iter().enumerate() {
            let expected = sigma(code).scale(1.0 / s2);
            assert!(frobenius_norm(&(f.element(j).matrix() - expected.matrix())) < 1e-15);
        }
    }

    #[test]
    fn frames_are_orthonormal_and_traceless() {
        for frame in [
            PauliFrame::from_qubits(1).unwrap(),
            PauliFrame::from_qubits(2).unwrap(),
            PauliFrame::for_dim(3).unwrap(),
            PauliFrame::for_dim(5).unwrap(),
        ] {
            let n = frame.dim();
            assert_eq!(frame.len(), n * n - 1);
            for (i, a) in frame.elements().iter().enumerate() {
                assert!(a.trace().abs() < 1e-12);
                for (j, b) in frame.elements().iter().enumerate() {
                    let expected = if i == j { 1.0 } else { 0.0 };
                    assert!((a.inner(b) - expected).abs() < 1e-12, "n={n} ({i},{j})");
                }
            }
        }
    }

    #[test]
    fn two_qubit_ordering_is_lexicographic() {
        let f = PauliFrame::from_qubits(2).unwrap();
        let labels: Vec<&str> = f.labels().iter().map(|s| s.as_str()).collect();
        assert_eq!(labels[..5], ["IX", "IY", "IZ", "XI", "XX"]);
        assert_eq!(labels[14], "ZZ");
        assert!(PauliFrame::from_qubits(0).is_err());
    }

    #[test]
    fn frame_completeness() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in [2, 3, 4] {
            let frame = PauliFrame::for_dim(n).unwrap();
            let h = random_hermitian(n, &mut rng).traceless_part();
            let rebuilt = frame.combine(&frame.coefficients(&h)).unwrap();
            assert!(frobenius_norm(&(rebuilt.matrix() - h.matrix())) < 1e-10);
        }
    }

    #[test]
    fn expm_closed_forms() {
        let x = sigma(1);
        let u0 = expm_skew(&x, 0.0).unwrap();
        assert!(frobenius_norm(&(u0.matrix() - CMatrix::identity(2, 2))) < 1e-15);
        let u = expm_skew(&x, std::f64::consts::FRAC_PI_2).unwrap();
        let expected = x.matrix() * C64::new(0.0, -1.0);
        assert!(frobenius_norm(&(u.matrix() - expected)) < 1e-15);
        assert!(expm_skew(&HermitianOperator(CMatrix::from_row_slice(2, 2, &[
            C64::new(0.0, 0.0), C64::new(1.0, 0.0), C64::new(0.0, 0.0), C64::new(0.0, 0.0)
        ])), 1.0).is_err());
    }

    #[test]
    fn expm_matches_series_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in [2, 4, 3] {
            let h = random_hermitian(n, &mut rng);
            let u = expm_skew(&h, 0.37).unwrap();
            let oracle = expm_series_oracle(h.matrix(), 0.37);
            assert!(frobenius_norm(&(u.matrix() - oracle)) < 1e-10, "n={n}");
            assert!(u.unitarity_defect() < 1e-12);
        }
    }

    #[test]
    fn logm_examples() {
        let id = UnitaryOperator::identity(2);
        assert!(logm_su(&id).unwrap().frobenius_norm() < 1e-14);
        let z = sigma(3);
        let u = expm_skew(&z, 0.3).unwrap();
        let l = logm_su(&u).unwrap();
        assert!(frobenius_norm(&(l.matrix() - z.scale(0.3).matrix())) < 1e-12);
        let minus_one = expm_skew(&z, std::f64::consts::PI).unwrap();
        assert!(matches!(logm_su(&minus_one), Err(Error::BranchCut { .. })));
    }

    #[test]
    fn distance_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let u = random_unitary(2, &mut rng);
        assert!(frobenius_distance(&u, &u).unwrap() < 1e-12);
        let r = expm_skew(&sigma(3), 0.3).unwrap();
        let d = frobenius_distance(&UnitaryOperator::identity(2), &r).unwrap();
        assert!((d - 0.3 * 2f64.sqrt()).abs() < 1e-12);
        assert!((d - 0.424_264).abs() < 1e-6);
        for _ in 0..20 {
            let w = random_unitary(3, &mut rng);
            let a = random_unitary(3, &mut rng);
            let b = random_unitary(3, &mut rng);
            let Ok(d0) = frobenius_distance(&a, &b) else { continue };
            let d1 = frobenius_distance(&w.compose(&a), &w.compose(&b)).unwrap();
            assert!((d0 - d1).abs() < 1e-10);
        }
    }

    #[test]
    fn chord_geodesic_inequality() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut checked = 0;
        for i in 0..1000 {
            let n = if i % 2 == 0 { 2 } else { 3 };
            let u = random_unitary(n, &mut rng);
            let v = random_unitary(n, &mut rng);
            let Ok(d) = frobenius_distance(&u, &v) else { continue };
            let op = u.distance_in(&v, NormKind::Operator);
            let fro = u.distance_in(&v, NormKind::Frobenius);
            assert!(op <= fro + 1e-12 && fro <= d + 1e-12, "op={op} fro={fro} d={d}");
            checked += 1;
        }
        assert!(checked > 990);
    }

    #[test]
    fn exp_log_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for n in [2, 3, 4] {
            for _ in 0..50 {
                let u = random_unitary(n, &mut rng);
                let Ok(h) = logm_su(&u) else { continue };
                for ev in h.eigenvalues() {
                    assert!(ev.abs() < std::f64::consts::PI);
                }
                let back = expm_skew(&h, 1.0).unwrap();
                assert!(frobenius_norm(&(back.matrix() - u.matrix())) < 1e-9);
            }
        }
    }

    #[test]
    fn operator_norm_agrees_with_svd() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for _ in 0..20 {
            let a = random_hermitian(2, &mut rng).into_matrix() * C64::new(0.3, 0.7);
            let svd = a.clone().singular_values().max();
            assert!((operator_norm(&a) - svd).abs() < 1e-12);
        }
    }

    #[test]
    fn special_unitary_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let v = random_special_unitary(3, &mut rng);
        assert!((v.determinant() - C64::new(1.0, 0.0)).norm() < 1e-12);
    }
}
