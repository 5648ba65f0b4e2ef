//! Effective Hamiltonians of periodic sequences.
//!
//! Two independent routes are provided: the closed-form third-order
//! expansion of the decoupling block ([`bch_effective`]) and the principal
//! matrix logarithm of any propagator ([`numeric_effective`]). The tilted
//! frame analysis ([`tilt_analysis`]) reads off the scaled chemical shifts and
//! the residual coupling along the effective field.

use std::f64::consts::PI;

use nalgebra::{Matrix4, Schur};
use num_complex::Complex64 as C64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sequence::{build_isotropic_block, build_isotropic_schedule, compile, InstantPulse, IsotropicTiming};
use crate::spin::{CouplingKind, ProductOperatorDecomposition, SpinSystem, TwoSpinOperator, BASIS_LABELS};

/// `√(A² + max ω²)·Δt` above which [`bch_effective`] refuses.
pub const BCH_REGIME_LIMIT: f64 = 0.5;
/// `√(A² + max ω²)·Δt` above which [`bch_effective`] warns.
pub const BCH_REGIME_WARNING: f64 = 0.25;
/// Closest an eigenphase may come to ±π in [`numeric_effective`].
pub const BRANCH_CUT_MARGIN: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectiveSource {
    AnalyticBch,
    NumericLog,
}

/// `H_eff` with `U = exp(-i·generating_time·H_eff)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectiveHamiltonian {
    pub decomposition: ProductOperatorDecomposition,
    #[serde(rename = "generating_time_s")]
    pub generating_time: f64,
    pub source: EffectiveSource,
}

impl EffectiveHamiltonian {
    pub fn operator(&self) -> TwoSpinOperator {
        self.decomposition.reconstruct()
    }

    /// `exp(-i·generating_time·H_eff)`.
    pub fn propagator(&self) -> Result<TwoSpinOperator> {
        crate::spin::propagate(&self.operator(), self.generating_time)
    }

    pub fn coefficient(&self, label: &str) -> f64 {
        self.decomposition.get(label).unwrap_or(0.0)
    }

    /// JSON-ready summary; the tilt block is omitted when the Zeeman field
    /// vanishes.
    pub fn report(&self) -> EffectiveReport {
        EffectiveReport {
            schema_version: EFFECTIVE_REPORT_SCHEMA_VERSION,
            source: self.source,
            generating_time_s: self.generating_time,
            coefficients_rad_s: self.decomposition,
            tilt: tilt_analysis(self).ok(),
        }
    }
}

pub const EFFECTIVE_REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectiveReport {
    pub schema_version: u32,
    pub source: EffectiveSource,
    pub generating_time_s: f64,
    pub coefficients_rad_s: ProductOperatorDecomposition,
    pub tilt: Option<TiltAnalysis>,
}

/// Closed-form third-order effective Hamiltonian of one decoupling block,
/// with `θ = A·Δt` and generating time `4Δt`:
///
/// ```text
/// H = Σ_{k∈{I,S}} ω_k (−(θ/2) K_y + (θ²/2) K_z)
///   + 2πJ [ I_zS_z + θ (I_yS_z + I_zS_y) + (4/3)θ² (I_yS_y − I_zS_z) ]
/// ```
///
/// The Zeeman signs are those of `e^{-iH₄Δt}…e^{-iH₁Δt}` with the cycle
/// (+,+), (−,+), (−,−), (+,−) for (shift, rf).
pub fn bch_effective(system: &SpinSystem, a: f64, dt: f64) -> Result<EffectiveHamiltonian> {
    system.validate()?;
    if system.coupling != CouplingKind::Ising {
        return Err(Error::InvalidParameter("the closed-form expansion assumes an Ising coupling".into()));
    }
    if !(dt > 0.0 && dt.is_finite() && a.is_finite()) {
        return Err(Error::InvalidParameter(format!("need dt > 0 and finite A, got dt={dt}, A={a}")));
    }
    let regime = a.hypot(system.max_shift()) * dt;
    if regime >= BCH_REGIME_LIMIT {
        return Err(Error::Regime(format!(
            "√(A²+ω²)·Δt = {regime:.3} must stay below {BCH_REGIME_LIMIT}"
        )));
    }
    if regime > BCH_REGIME_WARNING {
        log::warn!("√(A²+ω²)·Δt = {regime:.3} is large; third-order expansion may be inaccurate");
    }

    let theta = a * dt;
    let j = system.coupling_rad_s();
    let mut c = [0.0; 16];
    let idx = |label: &str| BASIS_LABELS.iter().position(|l| *l == label).unwrap();
    c[idx("Iy")] = -0.5 * theta * system.omega_i;
    c[idx("Sy")] = -0.5 * theta * system.omega_s;
    c[idx("Iz")] = 0.5 * theta * theta * system.omega_i;
    c[idx("Sz")] = 0.5 * theta * theta * system.omega_s;
    // Entries refer to 2I_aS_b, hence the halving.
    let quad = 4.0 / 3.0 * theta * theta * j;
    c[idx("2IzSz")] = 0.5 * (j - quad);
    c[idx("2IySy")] = 0.5 * quad;
    c[idx("2IySz")] = 0.5 * theta * j;
    c[idx("2IzSy")] = 0.5 * theta * j;

    Ok(EffectiveHamiltonian {
        decomposition: ProductOperatorDecomposition::from_coefficients(c),
        generating_time: 4.0 * dt,
        source: EffectiveSource::AnalyticBch,
    })
}

/// Principal logarithm: the traceless Hermitian `H` with `u ∝ exp(-i t H)`.
///
/// The global phase of `u` is fixed by choosing the fourth root of `det u`
/// for which the principal eigenphases sum to zero; an eigenphase within
/// [`BRANCH_CUT_MARGIN`] of ±π is an error.
pub fn numeric_effective(u: &TwoSpinOperator, t: f64) -> Result<EffectiveHamiltonian> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::InvalidParameter(format!("generating time must be positive, got {t}")));
    }
    u.ensure_unitary()?;

    let (q, tri) = Schur::new(*u.matrix()).unpack();
    let lambda: [C64; 4] = std::array::from_fn(|k| tri[(k, k)]);
    let phases = centered_phases(&lambda)?;

    let diag = Matrix4::from_diagonal(&nalgebra::Vector4::from_fn(|k, _| C64::new(-phases[k] / t, 0.0)));
    let h = q * diag * q.adjoint();
    let h = TwoSpinOperator::from_matrix(h);
    let scale = h.max_abs().max(1.0 / t);
    if h.hermiticity_deviation() > 1e-10 * scale {
        return Err(Error::NotHermitian { deviation: h.hermiticity_deviation() });
    }
    let h = TwoSpinOperator::from_matrix((h.matrix() + h.matrix().adjoint()) * C64::new(0.5, 0.0));

    Ok(EffectiveHamiltonian {
        decomposition: ProductOperatorDecomposition::decompose(&h)?,
        generating_time: t,
        source: EffectiveSource::NumericLog,
    })
}

fn centered_phases(lambda: &[C64; 4]) -> Result<[f64; 4]> {
    let det: C64 = lambda.iter().product();
    let root = C64::from_polar(1.0, det.arg() / 4.0);
    let mut best: Option<[f64; 4]> = None;
    let mut best_extent = f64::INFINITY;
    let mut quarter = C64::new(1.0, 0.0);
    for _ in 0..4 {
        let r = root * quarter;
        let phases: [f64; 4] = std::array::from_fn(|k| (lambda[k] / r).arg());
        let sum: f64 = phases.iter().sum();
        let extent = phases.iter().fold(0.0_f64, |m, p| m.max(p.abs()));
        if sum.abs() < 1e-6 && extent < best_extent {
            best = Some(phases);
            best_extent = extent;
        }
        quarter *= C64::new(0.0, 1.0);
    }
    let mut phases = best.ok_or_else(|| {
        let worst = lambda.iter().fold(0.0_f64, |m, l| m.max(l.arg().abs()));
        Error::BranchCut { phase: worst }
    })?;
    let mean = phases.iter().sum::<f64>() / 4.0;
    for p in &mut phases {
        *p -= mean;
    }
    if let Some(p) = phases.iter().find(|p| p.abs() >= PI - BRANCH_CUT_MARGIN) {
        return Err(Error::BranchCut { phase: *p });
    }
    Ok(phases)
}

/// Effective field and surviving coupling in the frame tilted onto the
/// effective Zeeman axis `y′`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TiltAnalysis {
    /// Angle of `y′` away from `y` towards `z`.
    #[serde(rename = "gamma_rad")]
    pub gamma: f64,
    /// Unit vector of `y′` in the (x, y, z) frame.
    pub axis: [f64; 3],
    #[serde(rename = "scaled_shift_i_rad_s")]
    pub scaled_shift_i: f64,
    #[serde(rename = "scaled_shift_s_rad_s")]
    pub scaled_shift_s: f64,
    /// Coefficient of `I_y′S_y′`.
    #[serde(rename = "residual_coupling_rad_s")]
    pub residual_coupling: f64,
    /// Frobenius norm of the truncated coupling components.
    #[serde(rename = "perpendicular_residue_rad_s")]
    pub perpendicular_residue: f64,
}

impl TiltAnalysis {
    /// Residual coupling in Hz (`J_eff`).
    pub fn residual_coupling_hz(&self) -> f64 {
        self.residual_coupling / (2.0 * PI)
    }
}

/// Projects the effective Hamiltonian onto the common effective-field axis.
///
/// The axis is the bisector of the two per-spin field directions (they are
/// nearly parallel when the shifts are scaled by the same θ). Coupling
/// components that do not commute with `I_y′ + S_y′` are truncated; for two
/// spins with a common axis the secular part of `Σ C_ab I_a S_b` is
/// `(nᵀCn) I_nS_n` plus the planar flip-flop term, and only the axial part is
/// reported as the residual coupling.
pub fn tilt_analysis(h: &EffectiveHamiltonian) -> Result<TiltAnalysis> {
    let fi = h.decomposition.field_i();
    let fs = h.decomposition.field_s();
    let scale = h.decomposition.coefficients().iter().fold(0.0_f64, |m, c| m.max(c.abs()));
    let tol = 1e-12 * scale.max(f64::MIN_POSITIVE);
    let ni = norm(&fi);
    let ns = norm(&fs);

    let mut axis = match (ni > tol, ns > tol) {
        (false, false) => return Err(Error::ZeroZeeman),
        (true, false) => fi,
        (false, true) => fs,
        (true, true) => {
            let ui = fi.map(|v| v / ni);
            let us = fs.map(|v| v / ns);
            let s = if dot(&ui, &us) >= 0.0 { 1.0 } else { -1.0 };
            [ui[0] + s * us[0], ui[1] + s * us[1], ui[2] + s * us[2]]
        }
    };
    let n = norm(&axis);
    if n <= f64::EPSILON {
        return Err(Error::ZeroZeeman);
    }
    axis = axis.map(|v| v / n);
    if axis[1] < 0.0 || (axis[1] == 0.0 && axis[2] < 0.0) {
        axis = axis.map(|v| -v);
    }
    if axis[1].abs() + axis[2].abs() <= f64::EPSILON {
        return Err(Error::ZeroZeeman);
    }
    let gamma = axis[2].abs().atan2(axis[1].abs());

    let c = h.decomposition.coupling_tensor();
    let mut axial = 0.0;
    for a in 0..3 {
        for b in 0..3 {
            axial += axis[a] * c[a][b] * axis[b];
        }
    }
    let mut residue = 0.0;
    for a in 0..3 {
        for b in 0..3 {
            let d = c[a][b] - axial * axis[a] * axis[b];
            residue += d * d;
        }
    }

    Ok(TiltAnalysis {
        gamma,
        axis,
        scaled_shift_i: dot(&axis, &fi),
        scaled_shift_s: dot(&axis, &fs),
        residual_coupling: axial,
        perpendicular_residue: residue.sqrt(),
    })
}

fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm(a: &[f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

/// Planar (flip-flop) and axial parts of an effective coupling tensor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanarCoupling {
    /// Coefficient of `I_xS_x + I_yS_y`.
    #[serde(rename = "kappa1_rad_s")]
    pub kappa1: f64,
    /// Coefficient of `I_xS_y − I_yS_x`.
    #[serde(rename = "kappa2_rad_s")]
    pub kappa2: f64,
    /// Coefficient of `I_zS_z`.
    #[serde(rename = "zz_rad_s")]
    pub zz: f64,
}

impl PlanarCoupling {
    pub fn from_decomposition(d: &ProductOperatorDecomposition) -> Self {
        let c = d.coupling_tensor();
        Self { kappa1: 0.5 * (c[0][0] + c[1][1]), kappa2: 0.5 * (c[0][1] - c[1][0]), zz: c[2][2] }
    }
}

/// Effective Hamiltonian of a run of isotropic blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsotropicEffective {
    pub effective: EffectiveHamiltonian,
    pub planar: PlanarCoupling,
    /// `2πJ · Σ(τ₁+τ₂) / ΣΔt`.
    #[serde(rename = "predicted_zz_rad_s")]
    pub predicted_zz: f64,
    /// False when `2πJ/|ω_I − ω_S|` is too large for the flip-flop terms to
    /// average out.
    pub weakly_coupled: bool,
}

/// Effective Hamiltonian of consecutive isotropic blocks.
///
/// Every block ends in a π_x frame, so the propagator is multiplied by
/// `P^N` before the logarithm, and the generating time is `ΣΔt`, the net
/// chemical-shift evolution time. With this normalization the Zeeman and
/// flip terms come out as `ω_I I_z + ω_S S_z + A F_x` (A = θ/Δt) and the
/// axial coupling as `(τ₁+τ₂)/Δt · 2πJ`.
pub fn isotropic_effective(
    system: &SpinSystem,
    timings: &[IsotropicTiming],
    theta_flip: f64,
    flip_phase: f64,
) -> Result<IsotropicEffective> {
    if timings.is_empty() {
        return Err(Error::InvalidParameter("at least one isotropic block is required".into()));
    }
    let seq = build_isotropic_schedule(system, timings, theta_flip, flip_phase)?;
    let mut u = compile(&seq)?;
    if timings.len() % 2 == 1 {
        u = InstantPulse::pi_x().propagator() * u;
    }
    let generating_time: f64 = timings.iter().map(IsotropicTiming::delta_t).sum();
    let effective = numeric_effective(&u, generating_time)?;
    let evolution: f64 = timings.iter().map(|t| t.tau1 + t.tau2).sum();
    let weakly_coupled = system.is_weakly_coupled();
    if !weakly_coupled {
        log::warn!(
            "2πJ/|ω_I−ω_S| = {:.3}: isotropic coupling is not truncated to Ising form",
            system.weak_coupling_ratio()
        );
    }
    Ok(IsotropicEffective {
        planar: PlanarCoupling::from_decomposition(&effective.decomposition),
        predicted_zz: system.coupling_rad_s() * evolution / generating_time,
        effective,
        weakly_coupled,
    })
}

/// `κ₁` of one isotropic block.
pub fn block_kappa1(system: &SpinSystem, timing: IsotropicTiming, theta_flip: f64, flip_phase: f64) -> Result<f64> {
    let block = build_isotropic_block(system, timing.tau1, timing.tau2, theta_flip, flip_phase)?;
    let u = InstantPulse::pi_x().propagator() * compile(&block)?;
    let effective = numeric_effective(&u, timing.delta_t())?;
    Ok(PlanarCoupling::from_decomposition(&effective.decomposition).kappa1)
}

/// Average `κ₁` of a schedule: the mean of the per-block values, i.e. the
/// first-order average over the blocks.
pub fn schedule_kappa1(
    system: &SpinSystem,
    timings: &[IsotropicTiming],
    theta_flip: f64,
    flip_phase: f64,
) -> Result<f64> {
    if timings.is_empty() {
        return Err(Error::InvalidParameter("empty schedule".into()));
    }
    let mut sum = 0.0;
    for t in timings {
        sum += block_kappa1(system, *t, theta_flip, flip_phase)?;
    }
    Ok(sum / timings.len() as f64)
}

/// Copy of `system` with shift difference `delta` about the same mean shift.
pub fn with_shift_difference(system: &SpinSystem, delta: f64) -> SpinSystem {
    let mean = 0.5 * (system.omega_i + system.omega_s);
    SpinSystem { omega_i: mean + 0.5 * delta, omega_s: mean - 0.5 * delta, ..*system }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleScanOptions {
    /// `τ₁ − τ₂`, common to all blocks.
    #[serde(rename = "delta_t_s")]
    pub delta_t: f64,
    pub blocks: usize,
    pub candidates: usize,
    /// Number of shift differences sampled across the range.
    pub offsets: usize,
    /// Half-width of the shift-difference range relative to the nominal one.
    pub relative_range: f64,
    /// Upper end of the τ₂ candidates; defaults to `4π/|Δω₀|`.
    #[serde(rename = "max_tau2_s")]
    pub max_tau2: Option<f64>,
    #[serde(rename = "theta_flip_rad")]
    pub theta_flip: f64,
    #[serde(rename = "flip_phase_rad")]
    pub flip_phase: f64,
}

impl Default for ScheduleScanOptions {
    fn default() -> Self {
        Self {
            delta_t: 2e-4,
            blocks: 16,
            candidates: 400,
            offsets: 41,
            relative_range: 0.5,
            max_tau2: None,
            theta_flip: 0.0,
            flip_phase: 0.0,
        }
    }
}

/// Result of [`scan_isotropic_schedule`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleScan {
    /// Block that nulls `κ₁` at the nominal shift difference.
    pub single: IsotropicTiming,
    pub schedule: Vec<IsotropicTiming>,
    #[serde(rename = "offsets_rad_s")]
    pub offsets: Vec<f64>,
    #[serde(rename = "single_kappa1_rad_s")]
    pub single_kappa1: Vec<f64>,
    #[serde(rename = "schedule_kappa1_rad_s")]
    pub schedule_kappa1: Vec<f64>,
}

impl ScheduleScan {
    pub fn single_worst(&self) -> f64 {
        max_abs(&self.single_kappa1)
    }

    pub fn schedule_worst(&self) -> f64 {
        max_abs(&self.schedule_kappa1)
    }

    /// `single_worst / schedule_worst`.
    pub fn reduction(&self) -> f64 {
        self.single_worst() / self.schedule_worst()
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

/// Searches for τ₂ values whose blocks, concatenated, keep `|κ₁|` small over
/// `Δω ∈ Δω₀·[1 − r, 1 + r]`.
///
/// The reference is the single block whose `κ₁` vanishes at `Δω₀`. The
/// schedule is chosen from a grid of τ₂ between that block's τ₂ and
/// `max_tau2` by greedy insertion followed by coordinate descent on
/// `max_Δω |mean κ₁|`.
pub fn scan_isotropic_schedule(system: &SpinSystem, options: &ScheduleScanOptions) -> Result<ScheduleScan> {
    let delta0 = system.omega_i - system.omega_s;
    if delta0 == 0.0 {
        return Err(Error::InvalidParameter("schedule scan needs ω_I ≠ ω_S".into()));
    }
    let dt = options.delta_t;
    if !(dt > 0.0) || options.blocks == 0 || options.candidates < 2 || options.offsets == 0 {
        return Err(Error::InvalidParameter("invalid schedule scan options".into()));
    }
    if !(0.0..1.0).contains(&options.relative_range) {
        return Err(Error::InvalidParameter("relative_range must lie in [0, 1)".into()));
    }
    let max_tau2 = options.max_tau2.unwrap_or(4.0 * PI / delta0.abs());
    let (theta, phase) = (options.theta_flip, options.flip_phase);

    let nominal = |tau2: f64| block_kappa1(system, IsotropicTiming::from_tau2(tau2, dt), theta, phase);
    let single = IsotropicTiming::from_tau2(first_zero(nominal, dt, max_tau2, options.candidates)?, dt);

    let offsets: Vec<f64> = (0..options.offsets)
        .map(|k| {
            let f = if options.offsets == 1 { 0.0 } else { k as f64 / (options.offsets - 1) as f64 };
            delta0 * (1.0 - options.relative_range + 2.0 * options.relative_range * f)
        })
        .collect();
    let systems: Vec<SpinSystem> = offsets.iter().map(|d| with_shift_difference(system, *d)).collect();

    let single_kappa1 =
        systems.par_iter().map(|s| block_kappa1(s, single, theta, phase)).collect::<Result<Vec<_>>>()?;

    let candidates: Vec<IsotropicTiming> = (0..options.candidates)
        .map(|k| {
            let f = k as f64 / (options.candidates - 1) as f64;
            IsotropicTiming::from_tau2(single.tau2 + f * (max_tau2 - single.tau2), dt)
        })
        .collect();
    let table: Vec<Vec<f64>> = candidates
        .par_iter()
        .map(|c| systems.iter().map(|s| block_kappa1(s, *c, theta, phase)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;

    let choice = optimize_schedule(&table, options.blocks);
    let schedule: Vec<IsotropicTiming> = choice.iter().map(|&c| candidates[c]).collect();
    let schedule_kappa1 = (0..offsets.len())
        .map(|o| choice.iter().map(|&c| table[c][o]).sum::<f64>() / choice.len() as f64)
        .collect();

    Ok(ScheduleScan { single, schedule, offsets, single_kappa1, schedule_kappa1 })
}

/// Smallest τ₂ in `(dt/8, max]` where `f` changes sign, refined by bisection.
fn first_zero(f: impl Fn(f64) -> Result<f64>, dt: f64, max: f64, steps: usize) -> Result<f64> {
    let lo0 = dt / 8.0;
    let mut prev_x = lo0;
    let mut prev = f(lo0)?;
    for k in 1..=steps {
        let x = lo0 + (max - lo0) * k as f64 / steps as f64;
        let y = f(x)?;
        if prev.signum() != y.signum() {
            let (mut a, mut b, mut fa) = (prev_x, x, prev);
            for _ in 0..60 {
                let m = 0.5 * (a + b);
                let fm = f(m)?;
                if fm.signum() == fa.signum() {
                    a = m;
                    fa = fm;
                } else {
                    b = m;
                }
            }
            return Ok(0.5 * (a + b));
        }
        prev_x = x;
        prev = y;
    }
    Err(Error::Solver(format!("no block with κ₁ = 0 for τ₂ ≤ {max}")))
}

fn optimize_schedule(table: &[Vec<f64>], blocks: usize) -> Vec<usize> {
    let offsets = table[0].len();
    let worst = |sum: &[f64], n: usize| sum.iter().fold(0.0_f64, |m, s| m.max((s / n as f64).abs()));

    let mut sum = vec![0.0; offsets];
    let mut choice = Vec::with_capacity(blocks);
    for n in 1..=blocks {
        let best = (0..table.len())
            .map(|c| {
                let trial: Vec<f64> = sum.iter().zip(&table[c]).map(|(s, k)| s + k).collect();
                (c, worst(&trial, n))
            })
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(c, _)| c)
            .unwrap_or(0);
        for (s, k) in sum.iter_mut().zip(&table[best]) {
            *s += k;
        }
        choice.push(best);
    }

    let mut current = worst(&sum, blocks);
    for _ in 0..50 {
        let mut improved = false;
        for slot in 0..blocks {
            let old = choice[slot];
            let base: Vec<f64> = sum.iter().zip(&table[old]).map(|(s, k)| s - k).collect();
            for c in 0..table.len() {
                let trial: Vec<f64> = base.iter().zip(&table[c]).map(|(s, k)| s + k).collect();
                let w = worst(&trial, blocks);
                if w < current * (1.0 - 1e-12) {
                    current = w;
                    choice[slot] = c;
                    sum = trial;
                    improved = true;
                }
            }
        }
        if !improved {
            break;
        }
    }
    choice
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sequence::{build_decoupling_block, segment_cycle_propagator};
    use crate::spin::{hamiltonian, propagate, Axis, Sign};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pair() -> SpinSystem {
        SpinSystem::ising_hz(120.0, 100.0, 1.0)
    }

    fn random_hermitian(rng: &mut ChaCha8Rng, scale: f64) -> TwoSpinOperator {
        let m = Matrix4::from_fn(|_, _| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
        let h = (m + m.adjoint()) * C64::new(0.5 * scale, 0.0);
        let tr = h.trace() / C64::new(4.0, 0.0);
        TwoSpinOperator::from_matrix(h - Matrix4::identity() * tr)
    }

    /// Third-order BCH accumulated pairwise over `e^{X_n}…e^{X_1}`.
    fn nested_commutator_bch(factors: &[(TwoSpinOperator, f64)]) -> TwoSpinOperator {
        let i = C64::new(0.0, 1.0);
        let mut z = TwoSpinOperator::zero();
        let mut total = 0.0;
        for (h, t) in factors {
            let x = h.scale(-i * *t);
            let xy = x.commutator(&z);
            z = x + z + xy.scale(C64::new(0.5, 0.0))
                + (x.commutator(&xy) + z.commutator(&z.commutator(&x))).scale(C64::new(1.0 / 12.0, 0.0));
            total += t;
        }
        z.scale(i / total)
    }

    #[test]
    fn log_exp_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let h = random_hermitian(&mut rng, 300.0);
            let t = 2e-3;
            let u = propagate(&h, t).unwrap();
            let back = numeric_effective(&u, t).unwrap().operator();
            assert!((back - h).max_abs() < 1e-8 * h.max_abs().max(1.0));
        }
    }

    #[test]
    fn log_of_identity_and_global_phase() {
        let zero = numeric_effective(&TwoSpinOperator::identity(), 1e-3).unwrap();
        assert!(zero.operator().max_abs() < 1e-12);
        let minus = TwoSpinOperator::identity().scale(C64::new(-1.0, 0.0));
        assert!(numeric_effective(&minus, 1e-3).unwrap().operator().max_abs() < 1e-9);
        let h = TwoSpinOperator::i(Axis::Z) * 400.0;
        let u = propagate(&h, 1e-3).unwrap().scale(C64::from_polar(1.0, 2.1));
        assert!((numeric_effective(&u, 1e-3).unwrap().operator() - h).max_abs() < 1e-9);
    }

    #[test]
    fn log_rejects_invalid_input() {
        let bad = TwoSpinOperator::i(Axis::X) * 3.0;
        assert!(matches!(numeric_effective(&bad, 1.0), Err(Error::NotUnitary { .. })));
        assert!(numeric_effective(&TwoSpinOperator::identity(), 0.0).is_err());
    }

    #[test]
    fn phases_near_minus_one_are_recentred() {
        let p = C64::from_polar(1.0, PI - 1e-9);
        let m = C64::from_polar(1.0, -(PI - 1e-9));
        let one = C64::new(1.0, 0.0);
        // Eigenvalues straddling −1 are recentred away from the cut.
        assert!(centered_phases(&[p, m, one, one]).is_ok());
        let lambda = [p, p, m, m];
        let phases = centered_phases(&lambda).unwrap();
        assert!(phases.iter().all(|x| x.abs() < PI - BRANCH_CUT_MARGIN));
    }

    #[test]
    fn bch_reference_coefficients() {
        let h = bch_effective(&pair(), 1e3, 2e-4).unwrap();
        let w = 2.0 * PI * 120.0;
        assert!((h.coefficient("Iy") + 0.1 * w).abs() < 1e-9);
        assert!((h.coefficient("Iz") - 0.02 * w).abs() < 1e-9);
        let d = &h.decomposition;
        let quad = 4.0 / 3.0 * 0.04 * 2.0 * PI;
        assert!((d.bilinear(Axis::Y, Axis::Y) - quad).abs() < 1e-12);
        assert!((d.bilinear(Axis::Z, Axis::Z) - (2.0 * PI - quad)).abs() < 1e-12);
        assert!((d.bilinear(Axis::Y, Axis::Z) - 0.2 * 2.0 * PI).abs() < 1e-12);
        assert!((h.generating_time - 8e-4).abs() < 1e-18);
    }

    #[test]
    fn bch_echo_limit_and_errors() {
        let h = bch_effective(&pair(), 0.0, 2e-4).unwrap();
        let expected = pair().coupling_operator();
        assert!((h.operator() - expected).max_abs() < 1e-12);
        assert!(matches!(bch_effective(&pair(), 1e4, 1e-4), Err(Error::Regime(_))));
        let iso = pair().with_coupling(CouplingKind::Isotropic);
        assert!(bch_effective(&iso, 1e3, 2e-4).is_err());
    }

    #[test]
    fn closed_form_matches_generic_third_order_accumulator() {
        let sys = pair();
        let a = 1e3;
        let mut diffs = Vec::new();
        for dt in [1e-4, 5e-5] {
            let cycle = [(Sign::Plus, Sign::Plus), (Sign::Minus, Sign::Plus), (Sign::Minus, Sign::Minus), (Sign::Plus, Sign::Minus)];
            let factors: Vec<_> = cycle.iter().map(|(s, r)| (hamiltonian(&sys, a, 0.0, *s, *r), dt)).collect();
            let generic = ProductOperatorDecomposition::decompose(&nested_commutator_bch(&factors)).unwrap();
            let closed = bch_effective(&sys, a, dt).unwrap().decomposition;
            diffs.push(generic.max_difference(&closed));
        }
        assert!(diffs[0] / diffs[1] > 7.0, "{diffs:?}");
        assert!(diffs[0] < 1e-2 * 2.0 * PI * 120.0 * 0.1);
    }

    #[test]
    fn numeric_block_matches_bch_leading_terms() {
        let sys = pair();
        let u = compile(&build_decoupling_block(&sys, 1e3, 2e-4).unwrap()).unwrap();
        let num = numeric_effective(&u, 8e-4).unwrap();
        let w = 2.0 * PI * 120.0;
        let rel = (num.coefficient("Iy") / (-0.1 * w) - 1.0).abs();
        assert!(rel < 0.03, "{rel}");
        assert!(num.propagator().unwrap().phase_aligned_distance(&u) < 1e-10);
    }

    #[test]
    fn tilt_on_closed_form() {
        for theta in [0.2_f64, 0.05, 0.01] {
            let h = bch_effective(&pair(), theta / 2e-4, 2e-4).unwrap();
            let t = tilt_analysis(&h).unwrap();
            assert!((t.gamma - theta.atan()).abs() < 1e-12);
            let j = 2.0 * PI;
            let exact = theta * theta * (1.0 / 3.0 - 4.0 * theta * theta / 3.0) / (1.0 + theta * theta) * j;
            assert!((t.residual_coupling - exact).abs() < 1e-12 * j);
            let w = 2.0 * PI * 120.0;
            let shift = 0.5 * theta * w * (1.0 + theta * theta).sqrt();
            assert!((t.scaled_shift_i.abs() - shift).abs() < 1e-9 * w);
        }
        let small = tilt_analysis(&bch_effective(&pair(), 0.001 / 2e-4, 2e-4).unwrap()).unwrap();
        assert!((small.residual_coupling / (1e-6 * 2.0 * PI) - 1.0 / 3.0).abs() < 1e-4);
    }

    #[test]
    fn tilt_numeric_reference_pair() {
        let u = segment_cycle_propagator(&pair(), 1e3, 2e-4).unwrap();
        let t = tilt_analysis(&numeric_effective(&u, 8e-4).unwrap()).unwrap();
        let ratio = t.residual_coupling / (2.0 * PI) / (0.04 / 3.0);
        assert!((ratio - 1.0).abs() < 0.05, "{ratio}");
        assert!(t.perpendicular_residue > 0.0);
    }

    #[test]
    fn tilt_rejects_zero_field() {
        let h = EffectiveHamiltonian {
            decomposition: ProductOperatorDecomposition::decompose(&pair().coupling_operator()).unwrap(),
            generating_time: 1.0,
            source: EffectiveSource::NumericLog,
        };
        assert!(matches!(tilt_analysis(&h), Err(Error::ZeroZeeman)));
        assert!(h.report().tilt.is_none());
    }

    #[test]
    fn isotropic_block_zz_scaling() {
        let sys = SpinSystem::isotropic_hz(130.0, 100.0, 1.0);
        let iso = isotropic_effective(&sys, &[IsotropicTiming::new(5.2e-3, 5e-3)], 0.1, 0.0).unwrap();
        assert!((iso.planar.zz / iso.predicted_zz - 1.0).abs() < 0.05);
        assert!((iso.effective.coefficient("Iz") - sys.omega_i).abs() < 0.05 * sys.omega_i);
        assert!((iso.effective.coefficient("Ix") - 0.1 / 2e-4).abs() < 0.05 * 500.0);
    }

    #[test]
    fn isotropic_equal_shifts_keep_planar_coupling() {
        let sys = SpinSystem::isotropic_hz(100.0, 100.0, 1.0);
        let t = IsotropicTiming::new(5.2e-3, 5e-3);
        let iso = isotropic_effective(&sys, &[t], 0.0, 0.0).unwrap();
        assert!(!iso.weakly_coupled);
        assert!(iso.planar.kappa2.abs() < 1e-9);
        let expected = sys.coupling_rad_s() * (t.tau1 + t.tau2) / t.delta_t();
        assert!((iso.planar.kappa1 / expected - 1.0).abs() < 1e-6);
    }

    #[test]
    fn isotropic_without_coupling() {
        let sys = SpinSystem::isotropic_hz(130.0, 100.0, 0.0);
        let iso = isotropic_effective(&sys, &[IsotropicTiming::new(5.2e-3, 5e-3)], 0.1, 0.0).unwrap();
        let c = iso.effective.decomposition.coupling_tensor();
        assert!(c.iter().flatten().all(|v| v.abs() < 1e-8));
    }

    #[test]
    fn block_kappa1_matches_single_block_schedule() {
        let sys = SpinSystem::isotropic_hz(120.0, 100.0, 1.0);
        let t = IsotropicTiming::new(7.2e-3, 7e-3);
        let x = isotropic_effective(&sys, &[t], 0.0, 0.0).unwrap().planar;
        assert!(x.kappa2.abs() > 1.0);
        let kx = block_kappa1(&sys, t, 0.0, 0.0).unwrap();
        assert!((kx - x.kappa1).abs() < 1e-9);
    }

    #[test]
    fn refocusing_phase_does_not_change_kappa2() {
        // Zeeman and I·S commute with z rotations, so π_y and π_x refocusing
        // give the same block, and the small flip barely touches κ₂.
        let sys = SpinSystem::isotropic_hz(120.0, 100.0, 1.0);
        let t = IsotropicTiming::new(7.2e-3, 7e-3);
        let free = |tau| propagate(&sys.free_hamiltonian(), tau).unwrap();
        let px = InstantPulse::pi_x().propagator();
        let py = InstantPulse { flip_angle: PI, phase: PI / 2.0 }.propagator();
        let ux = px * free(t.tau2) * px * free(t.tau1);
        let uy = py * free(t.tau2) * py * free(t.tau1);
        assert!(ux.phase_aligned_distance(&uy) < 1e-12);
        let x = isotropic_effective(&sys, &[t], 0.0, 0.0).unwrap().planar;
        let flipped = isotropic_effective(&sys, &[t], 0.1, PI / 2.0).unwrap().planar;
        assert!(x.kappa2.abs() > 1.0);
        assert!((flipped.kappa2 / x.kappa2 - 1.0).abs() < 0.05);
    }

    #[test]
    fn report_serializes() {
        let h = bch_effective(&pair(), 1e3, 2e-4).unwrap();
        let text = serde_json::to_string(&h.report()).unwrap();
        assert!(text.contains("\"2IySy\""));
        assert!(text.contains("residual_coupling_rad_s"));
        let back: EffectiveReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back.coefficients_rad_s, h.decomposition);
    }

    #[test]
    fn schedule_optimizer_prefers_cancelling_pairs() {
        let table = vec![vec![1.0, 2.0], vec![-1.0, -2.0], vec![0.5, 3.0]];
        let choice = optimize_schedule(&table, 2);
        let mut sorted = choice.clone();
        sorted.sort();
        assert_eq!(sorted, vec![0, 1]);
    }
}
