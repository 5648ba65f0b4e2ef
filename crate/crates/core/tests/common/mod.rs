//! Invariant checks shared by the property tests and the acceptance run.

#![allow(dead_code)]

use homodecouple::acquisition::{spectrum, Fid};
use homodecouple::sequence::segment_cycle_propagator;
use homodecouple::spin::{evolve, propagate, ProductOperatorDecomposition, TwoSpinOperator};
use homodecouple::{build_decoupling_block, compile, CouplingKind, SpinSystem};
use proptest::prelude::*;
use std::f64::consts::PI;

pub const CASES: u32 = 128;

pub fn coefficients(scale: f64) -> impl Strategy<Value = [f64; 16]> {
    prop::array::uniform16(-scale..scale)
}

pub fn hermitian(scale: f64) -> impl Strategy<Value = TwoSpinOperator> {
    coefficients(scale).prop_map(|c| ProductOperatorDecomposition::from_coefficients(c).reconstruct())
}

pub fn system() -> impl Strategy<Value = SpinSystem> {
    (-300.0..300.0f64, -300.0..300.0f64, -20.0..20.0f64, any::<bool>()).prop_map(|(i, s, j, iso)| {
        let kind = if iso { CouplingKind::Isotropic } else { CouplingKind::Ising };
        SpinSystem::new(2.0 * PI * i, 2.0 * PI * s, j, kind)
    })
}

/// (system, A, Δt) with `|A|·Δt < π/2`.
pub fn block_parameters() -> impl Strategy<Value = (SpinSystem, f64, f64)> {
    (system(), 1e-5..1e-3f64, -1.5..1.5f64).prop_map(|(sys, dt, theta)| (sys, theta / dt, dt))
}

pub fn unitarity(h: &TwoSpinOperator, t: f64) -> Result<(), TestCaseError> {
    let u = propagate(h, t).map_err(|e| TestCaseError::fail(e.to_string()))?;
    prop_assert!(u.unitarity_deviation() <= 1e-10, "‖U†U − 1‖ = {}", u.unitarity_deviation());
    Ok(())
}

pub fn trace_preservation(rho: &TwoSpinOperator, h: &TwoSpinOperator, t: f64) -> Result<(), TestCaseError> {
    let u = propagate(h, t).map_err(|e| TestCaseError::fail(e.to_string()))?;
    let out = evolve(rho, &u).map_err(|e| TestCaseError::fail(e.to_string()))?;
    let scale = rho.max_abs().max(1.0);
    prop_assert!((out.trace() - rho.trace()).norm() <= 1e-10 * scale);
    let purity = |r: &TwoSpinOperator| (*r * *r).trace().re;
    prop_assert!((purity(&out) - purity(rho)).abs() <= 1e-9 * scale * scale);
    Ok(())
}

pub fn hermiticity(rho: &TwoSpinOperator, h: &TwoSpinOperator, t: f64) -> Result<(), TestCaseError> {
    prop_assert!(h.is_hermitian());
    let u = propagate(h, t).map_err(|e| TestCaseError::fail(e.to_string()))?;
    let out = evolve(rho, &u).map_err(|e| TestCaseError::fail(e.to_string()))?;
    prop_assert!(out.hermiticity_deviation() <= 1e-12 * rho.max_abs().max(1.0));
    Ok(())
}

pub fn parseval(samples: &[f64], dwell: f64, zero_fill: usize) -> Result<(), TestCaseError> {
    let fid = Fid { samples: samples.to_vec(), dwell, theta: 0.0, metadata: None };
    let spec = spectrum(&fid, fid.duration(), zero_fill).map_err(|e| TestCaseError::fail(e.to_string()))?;
    let time: f64 = samples.iter().map(|x| x * x).sum::<f64>() * dwell;
    let freq = spec.energy();
    prop_assert!((time - freq).abs() <= 1e-9 * time.max(f64::MIN_POSITIVE), "{} vs {}", time, freq);
    Ok(())
}

pub fn decomposition_round_trip(c: &[f64; 16]) -> Result<(), TestCaseError> {
    let op = ProductOperatorDecomposition::from_coefficients(*c).reconstruct();
    let back = ProductOperatorDecomposition::decompose(&op).map_err(|e| TestCaseError::fail(e.to_string()))?;
    let scale = c.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
    prop_assert!(back.max_difference(&ProductOperatorDecomposition::from_coefficients(*c)) <= 1e-12 * scale);
    prop_assert!((back.reconstruct() - op).max_abs() <= 1e-12 * scale);
    Ok(())
}

/// Maximum elementwise distance between the built block and the segment
/// cycle product, after global-phase alignment.
pub fn block_equivalence_distance(system: &SpinSystem, a: f64, dt: f64) -> f64 {
    let block = compile(&build_decoupling_block(system, a, dt).expect("valid block")).expect("compiles");
    let reference = segment_cycle_propagator(system, a, dt).expect("reference");
    block.phase_aligned_distance(&reference)
}

pub fn block_equivalence(system: &SpinSystem, a: f64, dt: f64) -> Result<(), TestCaseError> {
    let d = block_equivalence_distance(system, a, dt);
    prop_assert!(d <= 1e-10, "distance {}", d);
    Ok(())
}
