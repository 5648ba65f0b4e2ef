//! Operators, Hamiltonians and propagation for two coupled spin-1/2 nuclei.
//!
//! The Hilbert space is C² ⊗ C² with spin I on the left factor and spin S on
//! the right, so the computational basis is |αα⟩, |αβ⟩, |βα⟩, |ββ⟩. Spin
//! operators carry the half-Pauli normalization
//!
//! ```text
//! I_β = (σ_β / 2) ⊗ 1,    S_β = 1 ⊗ (σ_β / 2),    Tr(I_β²) = 1
//! ```
//!
//! so that the rotating-frame Hamiltonian `ω_I I_z + ω_S S_z + 2πJ I_z S_z`
//! is built from its coefficients verbatim. Angular frequencies are in rad/s;
//! the scalar coupling `J` is carried in Hz and multiplied by 2π only when a
//! Hamiltonian is assembled.

use std::f64::consts::PI;
use std::fmt;
use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use nalgebra::{Matrix2, Matrix4, SymmetricEigen};
use num_complex::Complex64 as C64;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Elementwise tolerance on `H - H†` for operators that must be Hermitian.
pub const HERMITIAN_TOL: f64 = 1e-12;
/// Elementwise tolerance on `U†U - 1` for propagators.
pub const UNITARY_TOL: f64 = 1e-10;
/// Largest imaginary part tolerated in an expectation value.
pub const EXPECTATION_IMAG_TOL: f64 = 1e-10;

pub type Mat4 = Matrix4<C64>;

/// Cartesian axis of a spin operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    pub fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }

    fn pauli(self) -> Matrix2<C64> {
        let (o, z, i) = (C64::new(1.0, 0.0), C64::new(0.0, 0.0), C64::new(0.0, 1.0));
        match self {
            Axis::X => Matrix2::new(z, o, o, z),
            Axis::Y => Matrix2::new(z, -i, i, z),
            Axis::Z => Matrix2::new(o, z, z, -o),
        }
    }
}

/// A ±1 sign, serialized as the integer `1` or `-1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Sign {
    Plus,
    Minus,
}

impl Sign {
    pub fn value(self) -> f64 {
        match self {
            Sign::Plus => 1.0,
            Sign::Minus => -1.0,
        }
    }

    pub fn flip(self) -> Sign {
        match self {
            Sign::Plus => Sign::Minus,
            Sign::Minus => Sign::Plus,
        }
    }
}

impl Serialize for Sign {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_i8(match self {
            Sign::Plus => 1,
            Sign::Minus => -1,
        })
    }
}

impl<'de> Deserialize<'de> for Sign {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        match i8::deserialize(deserializer)? {
            1 => Ok(Sign::Plus),
            -1 => Ok(Sign::Minus),
            other => Err(serde::de::Error::custom(format!("sign must be 1 or -1, got {other}"))),
        }
    }
}

/// A 4×4 complex operator on the two-spin Hilbert space.
///
/// Used for Hamiltonians, propagators and density matrices alike. The label is
/// only set on the named basis operators and is dropped by arithmetic.
#[derive(Clone, Copy, PartialEq)]
pub struct TwoSpinOperator {
    entries: Mat4,
    label: Option<&'static str>,
}

impl fmt::Debug for TwoSpinOperator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.label {
            Some(label) => write!(f, "TwoSpinOperator({label}){}", self.entries),
            None => write!(f, "TwoSpinOperator{}", self.entries),
        }
    }
}

fn kron(a: &Matrix2<C64>, b: &Matrix2<C64>) -> Mat4 {
    Mat4::from_fn(|r, c| a[(r / 2, c / 2)] * b[(r % 2, c % 2)])
}

impl TwoSpinOperator {
    pub fn from_matrix(entries: Mat4) -> Self {
        Self { entries, label: None }
    }

    pub fn zero() -> Self {
        Self::from_matrix(Mat4::zeros())
    }

    pub fn identity() -> Self {
        Self::from_matrix(Mat4::identity())
    }

    pub fn with_label(mut self, label: &'static str) -> Self {
        self.label = Some(label);
        self
    }

    pub fn label(&self) -> Option<&'static str> {
        self.label
    }

    pub fn matrix(&self) -> &Mat4 {
        &self.entries
    }

    /// Spin operator `I_axis = (σ/2) ⊗ 1`.
    pub fn i(axis: Axis) -> Self {
        Self::from_matrix(kron(&(axis.pauli() * C64::new(0.5, 0.0)), &Matrix2::identity()))
    }

    /// Spin operator `S_axis = 1 ⊗ (σ/2)`.
    pub fn s(axis: Axis) -> Self {
        Self::from_matrix(kron(&Matrix2::identity(), &(axis.pauli() * C64::new(0.5, 0.0))))
    }

    /// Bilinear product `I_a S_b`.
    pub fn bilinear(a: Axis, b: Axis) -> Self {
        Self::i(a) * Self::s(b)
    }

    /// Total transverse/longitudinal operator `I_axis + S_axis`.
    pub fn total(axis: Axis) -> Self {
        Self::i(axis) + Self::s(axis)
    }

    /// Scalar product `I·S`.
    pub fn dot_product() -> Self {
        Axis::ALL
            .iter()
            .fold(Self::zero(), |acc, &a| acc + Self::bilinear(a, a))
    }

    pub fn dagger(&self) -> Self {
        Self::from_matrix(self.entries.adjoint())
    }

    pub fn trace(&self) -> C64 {
        self.entries.trace()
    }

    pub fn scale(&self, factor: C64) -> Self {
        Self::from_matrix(self.entries * factor)
    }

    pub fn commutator(&self, other: &Self) -> Self {
        Self::from_matrix(self.entries * other.entries - other.entries * self.entries)
    }

    /// Largest elementwise modulus.
    pub fn max_abs(&self) -> f64 {
        self.entries.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    /// Max elementwise deviation `|H - H†|`.
    pub fn hermiticity_deviation(&self) -> f64 {
        (self.entries - self.entries.adjoint())
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max)
    }

    /// Max elementwise deviation `|U†U - 1|`.
    pub fn unitarity_deviation(&self) -> f64 {
        (self.entries.adjoint() * self.entries - Mat4::identity())
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max)
    }

    /// Hermitian to within [`HERMITIAN_TOL`], scaled by the operator norm for
    /// large-valued Hamiltonians.
    pub fn is_hermitian(&self) -> bool {
        self.hermiticity_deviation() <= HERMITIAN_TOL * self.max_abs().max(1.0)
    }

    pub fn is_unitary(&self) -> bool {
        self.unitarity_deviation() <= UNITARY_TOL
    }

    pub fn ensure_hermitian(&self) -> Result<()> {
        if self.is_hermitian() {
            Ok(())
        } else {
            Err(Error::NotHermitian { deviation: self.hermiticity_deviation() })
        }
    }

    pub fn ensure_unitary(&self) -> Result<()> {
        if self.is_unitary() {
            Ok(())
        } else {
            Err(Error::NotUnitary { deviation: self.unitarity_deviation() })
        }
    }

    /// `self^n` by repeated squaring.
    pub fn pow(&self, mut n: u64) -> Self {
        let mut base = self.entries;
        let mut acc = Mat4::identity();
        while n > 0 {
            if n & 1 == 1 {
                acc = base * acc;
            }
            base = base * base;
            n >>= 1;
        }
        Self::from_matrix(acc)
    }

    /// Max elementwise difference between `self` and `other` after removing
    /// the best global phase, i.e. `min_φ max |e^{iφ} self - other|` with φ
    /// taken from `arg Tr(self† other)`.
    pub fn phase_aligned_distance(&self, other: &Self) -> f64 {
        let overlap = (self.entries.adjoint() * other.entries).trace();
        let phase = if overlap.norm() > 0.0 { overlap / overlap.norm() } else { C64::new(1.0, 0.0) };
        (self.entries * phase - other.entries)
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max)
    }
}

impl Add for TwoSpinOperator {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        Self::from_matrix(self.entries + rhs.entries)
    }
}

impl AddAssign for TwoSpinOperator {
    fn add_assign(&mut self, rhs: Self) {
        self.entries += rhs.entries;
        self.label = None;
    }
}

impl Sub for TwoSpinOperator {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        Self::from_matrix(self.entries - rhs.entries)
    }
}

impl Neg for TwoSpinOperator {
    type Output = Self;
    fn neg(self) -> Self {
        Self::from_matrix(-self.entries)
    }
}

impl Mul for TwoSpinOperator {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        Self::from_matrix(self.entries * rhs.entries)
    }
}

impl Mul<f64> for TwoSpinOperator {
    type Output = Self;
    fn mul(self, rhs: f64) -> Self {
        Self::from_matrix(self.entries * C64::new(rhs, 0.0))
    }
}

impl Mul<TwoSpinOperator> for f64 {
    type Output = TwoSpinOperator;
    fn mul(self, rhs: TwoSpinOperator) -> TwoSpinOperator {
        rhs * self
    }
}

/// Labels of the product-operator basis, in the order returned by
/// [`product_basis`].
pub const BASIS_LABELS: [&str; 16] = [
    "1", "Ix", "Iy", "Iz", "Sx", "Sy", "Sz", "2IxSx", "2IxSy", "2IxSz", "2IySx", "2IySy",
    "2IySz", "2IzSx", "2IzSy", "2IzSz",
];

/// The 16 Hermitian product operators `{1, I_β, S_β, 2 I_β S_γ}`.
///
/// Order: identity, `I_x, I_y, I_z`, `S_x, S_y, S_z`, then `2 I_β S_γ` with β
/// the slow index. Every non-identity element has `Tr(B²) = 1`; the identity
/// has `Tr(1) = 4`.
pub fn product_basis() -> [TwoSpinOperator; 16] {
    let mut out = [TwoSpinOperator::identity(); 16];
    out[0] = TwoSpinOperator::identity().with_label(BASIS_LABELS[0]);
    for a in Axis::ALL {
        out[1 + a.index()] = TwoSpinOperator::i(a).with_label(BASIS_LABELS[1 + a.index()]);
        out[4 + a.index()] = TwoSpinOperator::s(a).with_label(BASIS_LABELS[4 + a.index()]);
        for b in Axis::ALL {
            let k = 7 + 3 * a.index() + b.index();
            out[k] = (TwoSpinOperator::bilinear(a, b) * 2.0).with_label(BASIS_LABELS[k]);
        }
    }
    out
}

/// Real coefficients of a Hermitian operator in the product-operator basis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProductOperatorDecomposition {
    coefficients: [f64; 16],
}

impl ProductOperatorDecomposition {
    pub fn zero() -> Self {
        Self { coefficients: [0.0; 16] }
    }

    pub fn from_coefficients(coefficients: [f64; 16]) -> Self {
        Self { coefficients }
    }

    /// Projects `op` onto the basis with `c_k = Tr(B_k† op) / Tr(B_k† B_k)`.
    pub fn decompose(op: &TwoSpinOperator) -> Result<Self> {
        op.ensure_hermitian()?;
        let basis = product_basis();
        let mut coefficients = [0.0; 16];
        for (c, b) in coefficients.iter_mut().zip(basis.iter()) {
            let norm = (b.dagger() * *b).trace().re;
            *c = (b.dagger() * *op).trace().re / norm;
        }
        Ok(Self { coefficients })
    }

    pub fn reconstruct(&self) -> TwoSpinOperator {
        product_basis()
            .iter()
            .zip(self.coefficients.iter())
            .fold(TwoSpinOperator::zero(), |acc, (b, &c)| acc + *b * c)
    }

    pub fn coefficients(&self) -> &[f64; 16] {
        &self.coefficients
    }

    pub fn iter(&self) -> impl Iterator<Item = (&'static str, f64)> + '_ {
        BASIS_LABELS.iter().copied().zip(self.coefficients.iter().copied())
    }

    pub fn get(&self, label: &str) -> Option<f64> {
        BASIS_LABELS
            .iter()
            .position(|&l| l == label)
            .map(|k| self.coefficients[k])
    }

    /// Coefficient of `I_axis`.
    pub fn zeeman_i(&self, axis: Axis) -> f64 {
        self.coefficients[1 + axis.index()]
    }

    /// Coefficient of `S_axis`.
    pub fn zeeman_s(&self, axis: Axis) -> f64 {
        self.coefficients[4 + axis.index()]
    }

    /// Coefficient of the bare bilinear `I_a S_b` (twice the `2I_aS_b` entry).
    pub fn bilinear(&self, a: Axis, b: Axis) -> f64 {
        2.0 * self.coefficients[7 + 3 * a.index() + b.index()]
    }

    /// Field vector acting on spin I.
    pub fn field_i(&self) -> [f64; 3] {
        [self.zeeman_i(Axis::X), self.zeeman_i(Axis::Y), self.zeeman_i(Axis::Z)]
    }

    /// Field vector acting on spin S.
    pub fn field_s(&self) -> [f64; 3] {
        [self.zeeman_s(Axis::X), self.zeeman_s(Axis::Y), self.zeeman_s(Axis::Z)]
    }

    /// Coupling tensor `C` with `H_coupling = Σ C[a][b] I_a S_b`.
    pub fn coupling_tensor(&self) -> [[f64; 3]; 3] {
        let mut c = [[0.0; 3]; 3];
        for a in Axis::ALL {
            for b in Axis::ALL {
                c[a.index()][b.index()] = self.bilinear(a, b);
            }
        }
        c
    }

    /// Largest absolute coefficient difference.
    pub fn max_difference(&self, other: &Self) -> f64 {
        self.coefficients
            .iter()
            .zip(other.coefficients.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl Serialize for ProductOperatorDecomposition {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeMap;
        let mut map = serializer.serialize_map(Some(16))?;
        for (label, value) in self.iter() {
            map.serialize_entry(label, &value)?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for ProductOperatorDecomposition {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let map = std::collections::HashMap::<String, f64>::deserialize(deserializer)?;
        let mut coefficients = [0.0; 16];
        for (label, value) in map {
            let k = BASIS_LABELS
                .iter()
                .position(|&l| l == label)
                .ok_or_else(|| serde::de::Error::custom(format!("unknown basis label {label}")))?;
            coefficients[k] = value;
        }
        Ok(Self { coefficients })
    }
}

/// Form of the scalar coupling between the two spins.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CouplingKind {
    /// Weak-coupling truncation `2πJ I_z S_z`.
    Ising,
    /// Full scalar coupling `2πJ (I·S)`.
    Isotropic,
}

/// Physical parameters of the coupled pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpinSystem {
    /// Chemical shift of spin I, rad/s.
    #[serde(rename = "omega_i_rad_s")]
    pub omega_i: f64,
    /// Chemical shift of spin S, rad/s.
    #[serde(rename = "omega_s_rad_s")]
    pub omega_s: f64,
    /// Scalar coupling, Hz.
    #[serde(rename = "j_hz")]
    pub j: f64,
    pub coupling: CouplingKind,
}

/// Ratio `2πJ / |ω_I - ω_S|` above which the pair is flagged as strongly coupled.
pub const WEAK_COUPLING_LIMIT: f64 = 0.1;

impl SpinSystem {
    pub fn new(omega_i: f64, omega_s: f64, j: f64, coupling: CouplingKind) -> Self {
        Self { omega_i, omega_s, j, coupling }
    }

    /// Ising pair with chemical shifts given in Hz.
    pub fn ising_hz(shift_i_hz: f64, shift_s_hz: f64, j: f64) -> Self {
        Self::new(2.0 * PI * shift_i_hz, 2.0 * PI * shift_s_hz, j, CouplingKind::Ising)
    }

    pub fn isotropic_hz(shift_i_hz: f64, shift_s_hz: f64, j: f64) -> Self {
        Self::new(2.0 * PI * shift_i_hz, 2.0 * PI * shift_s_hz, j, CouplingKind::Isotropic)
    }

    pub fn with_coupling(mut self, coupling: CouplingKind) -> Self {
        self.coupling = coupling;
        self
    }

    /// `2πJ` in rad/s.
    pub fn coupling_rad_s(&self) -> f64 {
        2.0 * PI * self.j
    }

    /// Largest chemical shift magnitude, rad/s.
    pub fn max_shift(&self) -> f64 {
        self.omega_i.abs().max(self.omega_s.abs())
    }

    /// `2πJ / |ω_I - ω_S|`; infinite for equal shifts with nonzero coupling.
    pub fn weak_coupling_ratio(&self) -> f64 {
        let delta = (self.omega_i - self.omega_s).abs();
        let coupling = self.coupling_rad_s().abs();
        if coupling == 0.0 {
            0.0
        } else if delta == 0.0 {
            f64::INFINITY
        } else {
            coupling / delta
        }
    }

    /// False when `2πJ > 0.1 |ω_I - ω_S|`, i.e. the Ising truncation is suspect.
    pub fn is_weakly_coupled(&self) -> bool {
        self.weak_coupling_ratio() <= WEAK_COUPLING_LIMIT
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.omega_i.is_finite() && self.omega_s.is_finite() && self.j.is_finite()) {
            return Err(Error::InvalidParameter("spin system parameters must be finite".into()));
        }
        Ok(())
    }

    /// `ω_I I_z + ω_S S_z`.
    pub fn zeeman(&self) -> TwoSpinOperator {
        TwoSpinOperator::i(Axis::Z) * self.omega_i + TwoSpinOperator::s(Axis::Z) * self.omega_s
    }

    /// `2πJ I_z S_z` or `2πJ (I·S)`.
    pub fn coupling_operator(&self) -> TwoSpinOperator {
        let op = match self.coupling {
            CouplingKind::Ising => TwoSpinOperator::bilinear(Axis::Z, Axis::Z),
            CouplingKind::Isotropic => TwoSpinOperator::dot_product(),
        };
        op * self.coupling_rad_s()
    }

    /// Free-precession Hamiltonian (no rf).
    pub fn free_hamiltonian(&self) -> TwoSpinOperator {
        self.zeeman() + self.coupling_operator()
    }
}

/// `shift·(ω_I I_z + ω_S S_z) + coupling + rf·A (cos φ F_x + sin φ F_y)`,
/// with `F = I + S`.
///
/// The four sign combinations (+,+), (−,+), (−,−), (+,−) give the four
/// segment Hamiltonians of the decoupling cycle.
pub fn hamiltonian(
    system: &SpinSystem,
    rf_amplitude: f64,
    rf_phase: f64,
    shift_sign: Sign,
    rf_sign: Sign,
) -> TwoSpinOperator {
    let rf = TwoSpinOperator::total(Axis::X) * rf_phase.cos() + TwoSpinOperator::total(Axis::Y) * rf_phase.sin();
    system.zeeman() * shift_sign.value()
        + system.coupling_operator()
        + rf * (rf_sign.value() * rf_amplitude)
}

/// `exp(-i h t)` by Hermitian eigendecomposition.
pub fn propagate(h: &TwoSpinOperator, t: f64) -> Result<TwoSpinOperator> {
    h.ensure_hermitian()?;
    if !t.is_finite() {
        return Err(Error::InvalidParameter(format!("propagation time {t} is not finite")));
    }
    // Symmetrize so that rounding noise below the tolerance does not leak
    // into the eigensolver.
    let sym = (h.matrix() + h.matrix().adjoint()) * C64::new(0.5, 0.0);
    let eig = SymmetricEigen::new(sym);
    let phases = Matrix4::from_diagonal(&eig.eigenvalues.map(|e| C64::from_polar(1.0, -e * t)));
    let v = eig.eigenvectors;
    Ok(TwoSpinOperator::from_matrix(v * phases * v.adjoint()))
}

/// Instantaneous non-selective rotation
/// `exp(-i flip (cos φ F_x + sin φ F_y))`, built in closed form per spin.
pub fn rotation(flip: f64, phase: f64) -> TwoSpinOperator {
    let (c, s) = ((flip / 2.0).cos(), (flip / 2.0).sin());
    let minus_i_s = C64::new(0.0, -s);
    let r = Matrix2::new(
        C64::new(c, 0.0),
        minus_i_s * C64::from_polar(1.0, -phase),
        minus_i_s * C64::from_polar(1.0, phase),
        C64::new(c, 0.0),
    );
    TwoSpinOperator::from_matrix(kron(&r, &r))
}

/// `U ρ U†`.
pub fn evolve(rho: &TwoSpinOperator, u: &TwoSpinOperator) -> Result<TwoSpinOperator> {
    u.ensure_unitary()?;
    Ok(TwoSpinOperator::from_matrix(u.matrix() * rho.matrix() * u.matrix().adjoint()))
}

/// `Tr(ρ · obs)`, rejecting results with a non-negligible imaginary part.
pub fn expect(rho: &TwoSpinOperator, obs: &TwoSpinOperator) -> Result<f64> {
    let value = (rho.matrix() * obs.matrix()).trace();
    let scale = rho.max_abs().max(obs.max_abs()).max(1.0);
    if value.im.abs() > EXPECTATION_IMAG_TOL * scale * scale {
        return Err(Error::ComplexExpectation { imag: value.im });
    }
    Ok(value.re)
}
