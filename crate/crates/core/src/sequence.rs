//! Pulse sequences: piecewise-constant segments and instantaneous rotations.
//!
//! Three builders cover the experiments of interest:
//!
//! * [`build_decoupling_block`]: four rf segments of length Δt with
//!   amplitudes (+A, +A, −A, −A) and two hard π_x pulses, so that in the frame
//!   of the pulses the chemical shift runs through the cycle (+, −, −, +).
//!   Because `P H(+,±) P = H(−,±)` for the π_x propagator `P` (and `P² = 1`
//!   on two spins), the lab-frame order
//!
//!   ```text
//!   seg(+A) · π_x · seg(+A) · seg(−A) · π_x · seg(−A)
//!   ```
//!
//!   reproduces `e^{-iH₄Δt} e^{-iH₃Δt} e^{-iH₂Δt} e^{-iH₁Δt}` exactly.
//! * [`build_isotropic_block`]: free precession τ₁, π_x, free precession τ₂,
//!   then a small flip θ. It leaves a net π_x frame behind; see
//!   [`crate::effham::isotropic_effective`].
//! * [`build_constant_time_t1`]: decoupled evolution for d₁, π_x, decoupled
//!   evolution for d₂.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spin::{hamiltonian, propagate, rotation, CouplingKind, Sign, SpinSystem, TwoSpinOperator};

/// One interval of piecewise-constant evolution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    #[serde(rename = "duration_s")]
    pub duration: f64,
    pub shift_sign: Sign,
    #[serde(rename = "rf_amplitude_rad_s")]
    pub rf_amplitude: f64,
    #[serde(rename = "rf_phase_rad")]
    pub rf_phase: f64,
    pub rf_sign: Sign,
}

impl Segment {
    /// Free precession under the system Hamiltonian.
    pub fn free(duration: f64) -> Self {
        Self { duration, shift_sign: Sign::Plus, rf_amplitude: 0.0, rf_phase: 0.0, rf_sign: Sign::Plus }
    }

    /// x-phase rf of amplitude `sign·A` with the physical (+) chemical shift.
    pub fn rf_x(duration: f64, amplitude: f64, sign: Sign) -> Self {
        Self { duration, shift_sign: Sign::Plus, rf_amplitude: amplitude, rf_phase: 0.0, rf_sign: sign }
    }

    pub fn hamiltonian(&self, system: &SpinSystem) -> TwoSpinOperator {
        hamiltonian(system, self.rf_amplitude, self.rf_phase, self.shift_sign, self.rf_sign)
    }

    pub fn propagator(&self, system: &SpinSystem) -> Result<TwoSpinOperator> {
        propagate(&self.hamiltonian(system), self.duration)
    }

    fn validate(&self) -> Result<()> {
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(Error::InvalidParameter(format!("segment duration must be positive, got {}", self.duration)));
        }
        if !(self.rf_amplitude.is_finite() && self.rf_phase.is_finite()) {
            return Err(Error::InvalidParameter("segment rf parameters must be finite".into()));
        }
        Ok(())
    }
}

/// Zero-duration non-selective rotation of both spins.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InstantPulse {
    #[serde(rename = "flip_angle_rad")]
    pub flip_angle: f64,
    #[serde(rename = "phase_rad")]
    pub phase: f64,
}

impl InstantPulse {
    pub fn pi_x() -> Self {
        Self { flip_angle: PI, phase: 0.0 }
    }

    pub fn propagator(&self) -> TwoSpinOperator {
        rotation(self.flip_angle, self.phase)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Element {
    Segment(Segment),
    Pulse(InstantPulse),
    /// A nested sequence, applied with its own repetition count.
    Block(PulseSequence),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SequenceKind {
    Free,
    Decoupling,
    Isotropic,
    IsotropicSchedule,
    ConstantTime,
    Custom,
}

/// How the π pulses inside the decoupling block are realized.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum PiPulse {
    /// Instantaneous rotation.
    #[default]
    Delta,
    /// Rectangular x pulse of the given amplitude (rad/s), with chemical shift
    /// and coupling active during the pulse.
    Finite { rf_amplitude: f64 },
}

/// Ordered elements, repeated `repetitions` times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PulseSequence {
    pub kind: SequenceKind,
    pub system: SpinSystem,
    pub elements: Vec<Element>,
    pub repetitions: u64,
    /// Per-segment flip `A·Δt` for decoupling-based sequences.
    #[serde(default)]
    pub theta: Option<f64>,
    /// Builder parameters, keyed with unit suffixes (e.g. `delta_t_s`).
    #[serde(default)]
    pub parameters: BTreeMap<String, f64>,
}

impl PulseSequence {
    pub fn new(kind: SequenceKind, system: SpinSystem) -> Self {
        Self { kind, system, elements: Vec::new(), repetitions: 1, theta: None, parameters: BTreeMap::new() }
    }

    pub fn push(mut self, element: Element) -> Self {
        self.elements.push(element);
        self
    }

    pub fn repeated(mut self, repetitions: u64) -> Self {
        self.repetitions = repetitions;
        self
    }

    fn with_parameter(mut self, key: &str, value: f64) -> Self {
        self.parameters.insert(key.to_string(), value);
        self
    }

    /// Total segment time of one pass through `elements`.
    pub fn block_duration(&self) -> f64 {
        self.elements
            .iter()
            .map(|e| match e {
                Element::Segment(s) => s.duration,
                Element::Pulse(_) => 0.0,
                Element::Block(b) => b.duration(),
            })
            .sum()
    }

    /// `block_duration · repetitions`.
    pub fn duration(&self) -> f64 {
        self.block_duration() * self.repetitions as f64
    }

    pub fn validate(&self) -> Result<()> {
        self.system.validate()?;
        for e in &self.elements {
            match e {
                Element::Segment(s) => s.validate()?,
                Element::Pulse(p) => {
                    if !(p.flip_angle.is_finite() && p.phase.is_finite()) {
                        return Err(Error::InvalidParameter("pulse parameters must be finite".into()));
                    }
                }
                Element::Block(b) => b.validate()?,
            }
        }
        Ok(())
    }

    /// Writes the sequence as a versioned JSON document.
    pub fn to_json(&self) -> Result<String> {
        let doc = SequenceDocument {
            schema_version: SEQUENCE_SCHEMA_VERSION,
            block_duration_s: self.block_duration(),
            sequence: self.clone(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: SequenceDocument = serde_json::from_str(text)?;
        if doc.schema_version != SEQUENCE_SCHEMA_VERSION {
            return Err(Error::InvalidParameter(format!(
                "unsupported sequence schema version {}",
                doc.schema_version
            )));
        }
        doc.sequence.validate()?;
        let expected = doc.sequence.block_duration();
        if (expected - doc.block_duration_s).abs() > 1e-12 * expected.abs().max(1.0) {
            return Err(Error::InvalidParameter(format!(
                "block_duration_s {} does not match element durations {}",
                doc.block_duration_s, expected
            )));
        }
        Ok(doc.sequence)
    }
}

pub const SEQUENCE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct SequenceDocument {
    schema_version: u32,
    block_duration_s: f64,
    sequence: PulseSequence,
}

/// Reference propagator `e^{-iH₄Δt} e^{-iH₃Δt} e^{-iH₂Δt} e^{-iH₁Δt}` with the
/// four segment Hamiltonians written directly with sign-flipped chemical
/// shifts, i.e. without any π pulses.
pub fn segment_cycle_propagator(system: &SpinSystem, a: f64, dt: f64) -> Result<TwoSpinOperator> {
    const CYCLE: [(Sign, Sign); 4] =
        [(Sign::Plus, Sign::Plus), (Sign::Minus, Sign::Plus), (Sign::Minus, Sign::Minus), (Sign::Plus, Sign::Minus)];
    let mut u = TwoSpinOperator::identity();
    for (shift, rf) in CYCLE {
        u = propagate(&hamiltonian(system, a, 0.0, shift, rf), dt)? * u;
    }
    Ok(u)
}

/// The decoupling building block with instantaneous π pulses.
///
/// Errors when `|a|·dt ≥ π/2` or `dt ≤ 0`.
pub fn build_decoupling_block(system: &SpinSystem, a: f64, dt: f64) -> Result<PulseSequence> {
    build_decoupling_block_with(system, a, dt, PiPulse::Delta)
}

pub fn build_decoupling_block_with(system: &SpinSystem, a: f64, dt: f64, pi_pulse: PiPulse) -> Result<PulseSequence> {
    system.validate()?;
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidParameter(format!("delta_t must be positive, got {dt}")));
    }
    if !a.is_finite() {
        return Err(Error::InvalidParameter("rf amplitude must be finite".into()));
    }
    let theta = a * dt;
    if theta.abs() >= PI / 2.0 {
        return Err(Error::Regime(format!("flip per segment A·Δt = {theta} must be below π/2")));
    }
    let pi = match pi_pulse {
        PiPulse::Delta => Element::Pulse(InstantPulse::pi_x()),
        PiPulse::Finite { rf_amplitude } => {
            if !(rf_amplitude > 0.0 && rf_amplitude.is_finite()) {
                return Err(Error::InvalidParameter("finite π pulse amplitude must be positive".into()));
            }
            Element::Segment(Segment::rf_x(PI / rf_amplitude, rf_amplitude, Sign::Plus))
        }
    };
    let seq = PulseSequence::new(SequenceKind::Decoupling, *system)
        .push(Element::Segment(Segment::rf_x(dt, a, Sign::Plus)))
        .push(pi.clone())
        .push(Element::Segment(Segment::rf_x(dt, a, Sign::Plus)))
        .push(Element::Segment(Segment::rf_x(dt, a, Sign::Minus)))
        .push(pi)
        .push(Element::Segment(Segment::rf_x(dt, a, Sign::Minus)))
        .with_parameter("rf_amplitude_rad_s", a)
        .with_parameter("delta_t_s", dt);
    let mut seq = seq;
    seq.theta = Some(theta);

    #[cfg(debug_assertions)]
    if pi_pulse == PiPulse::Delta {
        let built = compile(&seq)?;
        let reference = segment_cycle_propagator(system, a, dt)?;
        debug_assert!(
            built.phase_aligned_distance(&reference) <= 1e-9,
            "π-pulse placement does not reproduce the segment cycle"
        );
    }
    Ok(seq)
}

/// Free precession τ₁, π_x, free precession τ₂, then a flip `theta_flip`
/// about the axis at `flip_phase` (0 = x, π/2 = y).
pub fn build_isotropic_block(
    system: &SpinSystem,
    tau1: f64,
    tau2: f64,
    theta_flip: f64,
    flip_phase: f64,
) -> Result<PulseSequence> {
    system.validate()?;
    if system.coupling != CouplingKind::Isotropic {
        return Err(Error::InvalidParameter("isotropic block requires an isotropic coupling".into()));
    }
    if !(tau2 > 0.0 && tau2.is_finite() && tau1.is_finite()) {
        return Err(Error::InvalidParameter(format!("tau2 must be positive, got {tau2}")));
    }
    if tau1 <= tau2 {
        return Err(Error::InvalidParameter(format!("tau1 ({tau1}) must exceed tau2 ({tau2})")));
    }
    if !(theta_flip.is_finite() && flip_phase.is_finite()) {
        return Err(Error::InvalidParameter("flip parameters must be finite".into()));
    }
    if !system.is_weakly_coupled() {
        log::warn!(
            "2πJ/|ω_I−ω_S| = {:.3}: free precession will not truncate the isotropic coupling",
            system.weak_coupling_ratio()
        );
    }
    let mut seq = PulseSequence::new(SequenceKind::Isotropic, *system)
        .push(Element::Segment(Segment::free(tau1)))
        .push(Element::Pulse(InstantPulse::pi_x()))
        .push(Element::Segment(Segment::free(tau2)))
        .with_parameter("tau1_s", tau1)
        .with_parameter("tau2_s", tau2)
        .with_parameter("delta_t_s", tau1 - tau2)
        .with_parameter("theta_flip_rad", theta_flip)
        .with_parameter("flip_phase_rad", flip_phase);
    if theta_flip != 0.0 {
        seq = seq.push(Element::Pulse(InstantPulse { flip_angle: theta_flip, phase: flip_phase }));
    }
    seq.theta = Some(theta_flip);
    Ok(seq)
}

/// Free-precession pair timings of one isotropic block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IsotropicTiming {
    #[serde(rename = "tau1_s")]
    pub tau1: f64,
    #[serde(rename = "tau2_s")]
    pub tau2: f64,
}

impl IsotropicTiming {
    pub fn new(tau1: f64, tau2: f64) -> Self {
        Self { tau1, tau2 }
    }

    /// `(τ₂ + Δt, τ₂)`.
    pub fn from_tau2(tau2: f64, delta_t: f64) -> Self {
        Self { tau1: tau2 + delta_t, tau2 }
    }

    pub fn delta_t(&self) -> f64 {
        self.tau1 - self.tau2
    }
}

/// Concatenation of isotropic blocks with varied free-precession times.
pub fn build_isotropic_schedule(
    system: &SpinSystem,
    timings: &[IsotropicTiming],
    theta_flip: f64,
    flip_phase: f64,
) -> Result<PulseSequence> {
    let mut seq = PulseSequence::new(SequenceKind::IsotropicSchedule, *system);
    for t in timings {
        seq.elements.push(Element::Block(build_isotropic_block(system, t.tau1, t.tau2, theta_flip, flip_phase)?));
    }
    seq.theta = Some(theta_flip);
    Ok(seq)
}

/// Constant-time indirect evolution: `block` repeated over d₁, a hard π_x,
/// then `block` repeated over d₂.
///
/// `d1` and `d2` are rounded to whole blocks; the realized values are stored
/// as `d1_s` / `d2_s` in the sequence parameters.
pub fn build_constant_time_t1(block: &PulseSequence, d1: f64, d2: f64) -> Result<PulseSequence> {
    if !(d1 >= 0.0 && d2 >= 0.0 && d1.is_finite() && d2.is_finite()) {
        return Err(Error::InvalidParameter(format!("d1, d2 must be non-negative, got {d1}, {d2}")));
    }
    let unit = block.duration();
    if !(unit > 0.0) {
        return Err(Error::InvalidParameter("constant-time block must have positive duration".into()));
    }
    let n1 = (d1 / unit).round() as u64;
    let n2 = (d2 / unit).round() as u64;
    let mut seq = PulseSequence::new(SequenceKind::ConstantTime, block.system);
    if n1 > 0 {
        seq.elements.push(Element::Block(block.clone().repeated(block.repetitions * n1)));
    }
    seq.elements.push(Element::Pulse(InstantPulse::pi_x()));
    if n2 > 0 {
        seq.elements.push(Element::Block(block.clone().repeated(block.repetitions * n2)));
    }
    seq.theta = block.theta;
    seq.parameters = block.parameters.clone();
    seq.parameters.insert("d1_s".into(), n1 as f64 * unit);
    seq.parameters.insert("d2_s".into(), n2 as f64 * unit);
    Ok(seq)
}

/// Total propagator of `seq`: element propagators multiplied in time order,
/// then raised to `repetitions`.
pub fn compile(seq: &PulseSequence) -> Result<TwoSpinOperator> {
    let mut u = TwoSpinOperator::identity();
    for e in &seq.elements {
        let step = match e {
            Element::Segment(s) => {
                s.validate()?;
                s.propagator(&seq.system)?
            }
            Element::Pulse(p) => p.propagator(),
            Element::Block(b) => compile(b)?,
        };
        u = step * u;
    }
    Ok(u.pow(seq.repetitions))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spin::Axis;

    fn fig3_system() -> SpinSystem {
        SpinSystem::ising_hz(120.0, 100.0, 1.0)
    }

    #[test]
    fn fig3_block_parameters() {
        let seq = build_decoupling_block(&fig3_system(), 1e3, 2e-4).unwrap();
        assert!((seq.block_duration() - 8e-4).abs() < 1e-18);
        assert!((seq.theta.unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(seq.parameters["delta_t_s"], 2e-4);
    }

    #[test]
    fn block_matches_cycle_product() {
        let sys = fig3_system();
        let u = compile(&build_decoupling_block(&sys, 1e3, 2e-4).unwrap()).unwrap();
        let v = segment_cycle_propagator(&sys, 1e3, 2e-4).unwrap();
        assert!(u.phase_aligned_distance(&v) <= 1e-10);
    }

    #[test]
    fn zero_rf_block_is_an_echo() {
        let sys = fig3_system();
        let u = compile(&build_decoupling_block(&sys, 0.0, 2e-4).unwrap()).unwrap();
        // Chemical shift is refocused: only the coupling survives.
        let expected = propagate(&sys.coupling_operator(), 8e-4).unwrap();
        assert!(u.phase_aligned_distance(&expected) < 1e-12);
        let zz = TwoSpinOperator::bilinear(Axis::Z, Axis::Z);
        assert!(u.commutator(&zz).max_abs() < 1e-12);
        assert!(u.commutator(&TwoSpinOperator::i(Axis::Z)).max_abs() < 1e-12);
    }

    #[test]
    fn rejects_large_flip() {
        let err = build_decoupling_block(&fig3_system(), 1e4, 2e-4).unwrap_err();
        assert!(matches!(err, Error::Regime(_)));
        assert!(build_decoupling_block(&fig3_system(), 1e3, 0.0).is_err());
    }

    #[test]
    fn pi_pulse_leaves_ising_coupling_fixed() {
        let p = InstantPulse::pi_x().propagator();
        let zz = fig3_system().coupling_operator();
        assert!((p * zz * p.dagger() - zz).max_abs() < 1e-12);
        let iz = TwoSpinOperator::i(Axis::Z);
        assert!((p * iz * p.dagger() + iz).max_abs() < 1e-12);
    }

    #[test]
    fn finite_pulses_approach_delta_limit() {
        let sys = fig3_system();
        let ideal = compile(&build_decoupling_block(&sys, 1e3, 2e-4).unwrap()).unwrap();
        let coarse = compile(&build_decoupling_block_with(&sys, 1e3, 2e-4, PiPulse::Finite { rf_amplitude: 2e5 }).unwrap()).unwrap();
        let fine = compile(&build_decoupling_block_with(&sys, 1e3, 2e-4, PiPulse::Finite { rf_amplitude: 2e6 }).unwrap()).unwrap();
        let d_coarse = coarse.phase_aligned_distance(&ideal);
        let d_fine = fine.phase_aligned_distance(&ideal);
        assert!(d_fine < d_coarse && d_fine < 1e-3, "{d_coarse} {d_fine}");
    }

    #[test]
    fn compile_basics() {
        let sys = fig3_system();
        let empty = PulseSequence::new(SequenceKind::Custom, sys);
        assert_eq!(compile(&empty).unwrap(), TwoSpinOperator::identity());

        let seg = Segment::rf_x(3e-4, 500.0, Sign::Minus);
        let one = PulseSequence::new(SequenceKind::Custom, sys).push(Element::Segment(seg));
        let direct = propagate(&hamiltonian(&sys, 500.0, 0.0, Sign::Plus, Sign::Minus), 3e-4).unwrap();
        assert!((compile(&one).unwrap() - direct).max_abs() < 1e-14);

        let block = build_decoupling_block(&sys, 1e3, 2e-4).unwrap();
        let ub = compile(&block).unwrap();
        let mut manual = TwoSpinOperator::identity();
        for _ in 0..37 {
            manual = ub * manual;
        }
        assert!((compile(&block.clone().repeated(37)).unwrap() - manual).max_abs() < 1e-9);
    }

    #[test]
    fn isotropic_block_layout_and_errors() {
        let sys = SpinSystem::isotropic_hz(120.0, 100.0, 1.0);
        let b = build_isotropic_block(&sys, 5.2e-3, 5e-3, 0.1, 0.0).unwrap();
        assert_eq!(b.elements.len(), 4);
        assert!((b.block_duration() - 10.2e-3).abs() < 1e-15);
        assert!((b.parameters["delta_t_s"] - 2e-4).abs() < 1e-15);
        assert!(build_isotropic_block(&sys, 5e-3, 5e-3, 0.1, 0.0).is_err());
        assert!(build_isotropic_block(&sys, 4e-3, 5e-3, 0.1, 0.0).is_err());
        assert!(build_isotropic_block(&fig3_system(), 5.2e-3, 5e-3, 0.1, 0.0).is_err());
    }

    #[test]
    fn constant_time_rounds_to_blocks() {
        let block = build_decoupling_block(&fig3_system(), 1e3, 2e-4).unwrap();
        let ct = build_constant_time_t1(&block, 0.1, 0.0504).unwrap();
        assert!((ct.parameters["d1_s"] - 0.1).abs() < 1e-12);
        assert!((ct.parameters["d2_s"] - 63.0 * 8e-4).abs() < 1e-12);
        assert!((ct.duration() - (0.1 + 63.0 * 8e-4)).abs() < 1e-12);
        assert!(build_constant_time_t1(&block, -1.0, 0.0).is_err());
    }

    #[test]
    fn json_round_trip() {
        let block = build_decoupling_block(&fig3_system(), 1e3, 2e-4).unwrap();
        let ct = build_constant_time_t1(&block, 0.08, 0.04).unwrap();
        let text = ct.to_json().unwrap();
        assert!(text.contains("\"duration_s\""));
        assert!(text.contains("\"rf_amplitude_rad_s\""));
        let back = PulseSequence::from_json(&text).unwrap();
        assert_eq!(back, ct);

        let tampered = text.replacen("\"block_duration_s\": 0.12", "\"block_duration_s\": 0.5", 1);
        if tampered != text {
            assert!(PulseSequence::from_json(&tampered).is_err());
        }
    }
}
