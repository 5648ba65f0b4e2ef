//! Blurring of scaled spectra by rf inhomogeneity, and its inversion.
//!
//! The observed spectrum is modelled as `Z(f) = Σᵢ xᵢ χ(f − fᵢ) + N(f)` with
//! a point spread function χ calibrated from an isolated line. Amplitudes on
//! a candidate grid are recovered by (nonnegative) least squares.
//!
//! The blur is multiplicative (a line at f moves to `s·f` under rf scale
//! `s`), so a single shift-invariant χ is only valid over a limited region;
//! calibrate it near the lines being deconvolved.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64 as C64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acquisition::{acquire, spectrum_with, Evolution, Spectrum, SpectrumOptions};
use crate::error::{Error, Result};
use crate::sequence::build_decoupling_block;
use crate::spin::{Axis, SpinSystem, TwoSpinOperator};

/// Condition number above which the design matrix is rejected.
pub const MAX_CONDITION: f64 = 1e12;

/// Nonnegative profile on a frequency-offset grid, normalized to unit sum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointSpreadFunction {
    pub offsets_hz: Vec<f64>,
    pub weights: Vec<f64>,
}

impl PointSpreadFunction {
    /// Clips negative weights and normalizes. Offsets must be increasing.
    pub fn new(offsets_hz: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if offsets_hz.len() != weights.len() || offsets_hz.is_empty() {
            return Err(Error::InvalidParameter("PSF offsets and weights must have equal, nonzero length".into()));
        }
        if offsets_hz.windows(2).any(|w| w[1] <= w[0]) || offsets_hz.iter().chain(&weights).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("PSF offsets must be finite and strictly increasing".into()));
        }
        let mut weights: Vec<f64> = weights.into_iter().map(|w| w.max(0.0)).collect();
        let sum: f64 = weights.iter().sum();
        if sum <= 0.0 {
            return Err(Error::InvalidParameter("PSF has no positive weight".into()));
        }
        for w in &mut weights {
            *w /= sum;
        }
        Ok(Self { offsets_hz, weights })
    }

    /// Sampled Gaussian of width `sigma` on a grid of `spacing`, truncated at
    /// `±extent·sigma`.
    pub fn gaussian(sigma: f64, spacing: f64, extent: f64) -> Result<Self> {
        if !(sigma > 0.0 && spacing > 0.0 && extent > 0.0) {
            return Err(Error::InvalidParameter("Gaussian PSF needs positive sigma, spacing and extent".into()));
        }
        let half = (extent * sigma / spacing).ceil() as i64;
        let offsets: Vec<f64> = (-half..=half).map(|k| k as f64 * spacing).collect();
        let weights = offsets.iter().map(|o| (-0.5 * (o / sigma).powi(2)).exp()).collect();
        Self::new(offsets, weights)
    }

    /// A single unit weight at zero offset.
    pub fn delta() -> Self {
        Self { offsets_hz: vec![0.0], weights: vec![1.0] }
    }

    /// Linear interpolation; zero outside the sampled range.
    pub fn value_at(&self, offset: f64) -> f64 {
        let o = &self.offsets_hz;
        if o.len() == 1 {
            return if (offset - o[0]).abs() <= 1e-9 { self.weights[0] } else { 0.0 };
        }
        let tol = 1e-9 * (o[o.len() - 1] - o[0]);
        if offset < o[0] - tol || offset > o[o.len() - 1] + tol {
            return 0.0;
        }
        let k = o.partition_point(|x| *x <= offset);
        if k == 0 {
            return self.weights[0];
        }
        if k >= o.len() {
            return self.weights[o.len() - 1];
        }
        let f = (offset - o[k - 1]) / (o[k] - o[k - 1]);
        self.weights[k - 1] * (1.0 - f) + self.weights[k] * f
    }

    pub fn mean(&self) -> f64 {
        self.offsets_hz.iter().zip(&self.weights).map(|(o, w)| o * w).sum()
    }

    /// Variance about the mean offset.
    pub fn second_moment(&self) -> f64 {
        let m = self.mean();
        self.offsets_hz.iter().zip(&self.weights).map(|(o, w)| w * (o - m).powi(2)).sum()
    }

    /// `offset_hz,weight` rows with a header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("offset_hz,weight\n");
        for (o, w) in self.offsets_hz.iter().zip(&self.weights) {
            let _ = writeln!(out, "{o},{w}");
        }
        out
    }
}

/// Real spectrum on a uniform grid with an estimated noise level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlurredSpectrum {
    pub frequencies_hz: Vec<f64>,
    pub values: Vec<f64>,
    pub noise_level: f64,
}

impl BlurredSpectrum {
    /// Validates the grid and estimates the noise level robustly.
    pub fn new(frequencies_hz: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if frequencies_hz.len() != values.len() || frequencies_hz.len() < 2 {
            return Err(Error::InvalidParameter("spectrum needs at least two points and matching lengths".into()));
        }
        let step = frequencies_hz[1] - frequencies_hz[0];
        if !(step > 0.0)
            || frequencies_hz.windows(2).any(|w| ((w[1] - w[0]) - step).abs() > 1e-6 * step)
            || values.iter().any(|v| !v.is_finite())
        {
            return Err(Error::InvalidParameter("spectrum grid must be uniform and increasing".into()));
        }
        let noise_level = estimate_noise(&values);
        Ok(Self { frequencies_hz, values, noise_level })
    }

    /// Real part of the `f ≥ 0` half of a complex spectrum.
    pub fn from_spectrum(spec: &Spectrum) -> Result<Self> {
        let start = spec.frequencies_hz.iter().position(|f| *f >= 0.0).unwrap_or(0);
        Self::new(spec.frequencies_hz[start..].to_vec(), spec.amplitudes[start..].iter().map(|a| a.re).collect())
    }

    /// Noiseless `Σ aᵢ χ(f − fᵢ)` on `frequencies_hz`.
    pub fn synthesize(frequencies_hz: Vec<f64>, lines: &[(f64, f64)], psf: &PointSpreadFunction) -> Result<Self> {
        let values = frequencies_hz
            .iter()
            .map(|f| lines.iter().map(|(fl, a)| a * psf.value_at(f - fl)).sum())
            .collect();
        let mut out = Self::new(frequencies_hz, values)?;
        out.noise_level = 0.0;
        Ok(out)
    }

    /// Copy with white Gaussian noise of standard deviation `sigma` added.
    pub fn with_noise(&self, sigma: f64, seed: u64) -> Result<Self> {
        let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidParameter(format!("noise sigma: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = self.values.iter().map(|v| v + normal.sample(&mut rng)).collect();
        Ok(Self { frequencies_hz: self.frequencies_hz.clone(), values, noise_level: sigma })
    }

    pub fn spacing(&self) -> f64 {
        self.frequencies_hz[1] - self.frequencies_hz[0]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("freq_hz,value\n");
        for (f, v) in self.frequencies_hz.iter().zip(&self.values) {
            let _ = writeln!(out, "{f},{v}");
        }
        out
    }
}

/// `1.4826 · median(|v − median v|)`: the standard deviation of Gaussian
/// noise, insensitive to a minority of line points.
pub fn estimate_noise(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let median = |v: &mut Vec<f64>| {
        v.sort_by(f64::total_cmp);
        let n = v.len();
        if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        }
    };
    let mut v = values.to_vec();
    let m = median(&mut v);
    let mut dev: Vec<f64> = values.iter().map(|x| (x - m).abs()).collect();
    1.4826 * median(&mut dev)
}

/// Acquisition settings shared by all ensemble members.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleAcquisition {
    pub n_samples: usize,
    pub blocks_per_sample: u64,
    #[serde(rename = "truncate_at_s")]
    pub truncate_at: f64,
    pub zero_fill: usize,
    /// Exponential broadening (Hz) applied before the transform. Without it
    /// the real part of an off-grid line is partly dispersive.
    #[serde(rename = "line_broadening_hz", default)]
    pub line_broadening: f64,
}

/// `(scale, weight)` pairs sampling a Gaussian of relative width `sigma`
/// over `±3σ` with `count` points.
pub fn gaussian_scale_distribution(sigma: f64, count: usize) -> Result<Vec<(f64, f64)>> {
    if !(sigma > 0.0 && sigma < 1.0 / 3.0) || count == 0 {
        return Err(Error::InvalidParameter("scale distribution needs 0 < σ < 1/3 and at least one point".into()));
    }
    if count == 1 {
        return Ok(vec![(1.0, 1.0)]);
    }
    let raw: Vec<(f64, f64)> = (0..count)
        .map(|k| {
            let z = -3.0 + 6.0 * k as f64 / (count - 1) as f64;
            (1.0 + sigma * z, (-0.5 * z * z).exp())
        })
        .collect();
    let total: f64 = raw.iter().map(|p| p.1).sum();
    Ok(raw.into_iter().map(|(s, w)| (s, w / total)).collect())
}

/// Weighted sum of decoupled spectra with the rf amplitude scaled per
/// member, returned as the real `f ≥ 0` half.
pub fn simulate_rf_ensemble(
    system: &SpinSystem,
    a_nominal: f64,
    dt: f64,
    scale_distribution: &[(f64, f64)],
    acquisition: &EnsembleAcquisition,
) -> Result<BlurredSpectrum> {
    if scale_distribution.is_empty() {
        return Err(Error::InvalidParameter("scale distribution is empty".into()));
    }
    let total: f64 = scale_distribution.iter().map(|p| p.1).sum();
    if (total - 1.0).abs() > 1e-9 || scale_distribution.iter().any(|(s, w)| !(*s > 0.0) || *w < 0.0) {
        return Err(Error::InvalidParameter("scales must be positive and weights nonnegative, summing to 1".into()));
    }
    let rho0 = TwoSpinOperator::total(Axis::X);
    let spectra = scale_distribution
        .par_iter()
        .map(|(scale, weight)| {
            let block = build_decoupling_block(system, scale * a_nominal, dt)?;
            let evolution = Evolution::Sequence { sequence: &block, blocks_per_sample: acquisition.blocks_per_sample };
            let fid = acquire(system, evolution, &rho0, acquisition.n_samples)?;
            let options = SpectrumOptions {
                truncate_at: acquisition.truncate_at,
                zero_fill: acquisition.zero_fill,
                line_broadening: acquisition.line_broadening,
                rescale_axis: false,
            };
            let spec = spectrum_with(&fid, &options)?;
            Ok((spec, *weight))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut sum = spectra[0].0.clone();
    sum.amplitudes.iter_mut().for_each(|a| *a = C64::new(0.0, 0.0));
    for (spec, w) in &spectra {
        for (acc, a) in sum.amplitudes.iter_mut().zip(&spec.amplitudes) {
            *acc += a * *w;
        }
    }
    sum.theta = a_nominal * dt;
    BlurredSpectrum::from_spectrum(&sum)
}

/// PSF from the profile inside `[window.0, window.1]`, recentred on its
/// maximum, negatives clipped, unit sum.
pub fn calibrate_psf(spec: &BlurredSpectrum, window: (f64, f64)) -> Result<PointSpreadFunction> {
    let (lo, hi) = (window.0.min(window.1), window.0.max(window.1));
    let idx: Vec<usize> = (0..spec.frequencies_hz.len())
        .filter(|&k| spec.frequencies_hz[k] >= lo && spec.frequencies_hz[k] <= hi)
        .collect();
    let Some(&peak) = idx.iter().max_by(|a, b| spec.values[**a].total_cmp(&spec.values[**b])) else {
        return Err(Error::InvalidParameter(format!("window [{lo}, {hi}] Hz contains no spectrum points")));
    };
    let height = spec.values[peak];
    if !(height > 0.0 && height > 3.0 * spec.noise_level) {
        return Err(Error::InvalidParameter(format!(
            "window [{lo}, {hi}] Hz has no point above noise (max {height:.3e}, noise {:.3e})",
            spec.noise_level
        )));
    }
    let f0 = spec.frequencies_hz[peak];
    PointSpreadFunction::new(
        idx.iter().map(|&k| spec.frequencies_hz[k] - f0).collect(),
        idx.iter().map(|&k| spec.values[k]).collect(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Constraint {
    #[default]
    NonNegative,
    Unconstrained,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineEstimate {
    pub frequency_hz: f64,
    pub amplitude: f64,
    pub amplitude_stderr: f64,
}

impl LineEstimate {
    /// `amplitude / amplitude_stderr`.
    pub fn significance(&self) -> f64 {
        if self.amplitude_stderr > 0.0 {
            self.amplitude / self.amplitude_stderr
        } else {
            f64::INFINITY * self.amplitude.signum()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeconvolutionReport {
    pub lines: Vec<LineEstimate>,
    pub condition_number: f64,
    pub residual_norm: f64,
    /// Residual standard deviation `‖r‖/√(m − k)`.
    pub noise_estimate: f64,
    pub constraint: Constraint,
}

impl DeconvolutionReport {
    /// Lines whose amplitude exceeds `k` standard errors.
    pub fn significant(&self, k: f64) -> Vec<LineEstimate> {
        self.lines.iter().copied().filter(|l| l.amplitude > k * l.amplitude_stderr).collect()
    }

    /// `frequency_hz,amplitude,amplitude_stderr` rows with a header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("frequency_hz,amplitude,amplitude_stderr\n");
        for l in &self.lines {
            let _ = writeln!(out, "{},{},{}", l.frequency_hz, l.amplitude, l.amplitude_stderr);
        }
        out
    }
}

/// Nonnegative least-squares deconvolution on `candidate_grid`.
pub fn deconvolve(z: &BlurredSpectrum, psf: &PointSpreadFunction, candidate_grid: &[f64]) -> Result<DeconvolutionReport> {
    deconvolve_with(z, psf, candidate_grid, Constraint::NonNegative)
}

pub fn deconvolve_with(
    z: &BlurredSpectrum,
    psf: &PointSpreadFunction,
    candidate_grid: &[f64],
    constraint: Constraint,
) -> Result<DeconvolutionReport> {
    let m = z.frequencies_hz.len();
    let k = candidate_grid.len();
    if k == 0 {
        return Err(Error::InvalidParameter("candidate grid is empty".into()));
    }
    if m <= k {
        return Err(Error::InvalidParameter(format!("{k} candidates need more than {m} spectrum points")));
    }
    let (fmin, fmax) = (z.frequencies_hz[0], z.frequencies_hz[m - 1]);
    if let Some(c) = candidate_grid.iter().find(|c| !(**c >= fmin && **c <= fmax)) {
        return Err(Error::InvalidParameter(format!("candidate {c} Hz lies outside [{fmin}, {fmax}] Hz")));
    }

    let a = DMatrix::from_fn(m, k, |i, j| psf.value_at(z.frequencies_hz[i] - candidate_grid[j]));
    let b = DVector::from_column_slice(&z.values);
    let singular = a.clone().svd(false, false).singular_values;
    let smax = singular.max();
    let smin = singular.min();
    let condition_number = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !(condition_number <= MAX_CONDITION) {
        return Err(Error::RankDeficient { condition: condition_number });
    }

    let x = match constraint {
        Constraint::NonNegative => nnls(&a, &b)?,
        Constraint::Unconstrained => a.clone().svd(true, true).solve(&b, 0.0).map_err(|e| Error::Solver(e.into()))?,
    };
    let residual = &b - &a * &x;
    let residual_norm = residual.norm();
    let active: Vec<usize> = match constraint {
        Constraint::NonNegative => (0..k).filter(|&j| x[j] > 0.0).collect(),
        Constraint::Unconstrained => (0..k).collect(),
    };
    let dof = (m - active.len()) as f64;
    let variance = residual_norm * residual_norm / dof;

    let mut lines = Vec::with_capacity(active.len());
    if !active.is_empty() {
        let ap = a.select_columns(&active);
        let svd = ap.svd(false, true);
        let vt = svd.v_t.ok_or_else(|| Error::Solver("SVD did not return V".into()))?;
        for (p, &j) in active.iter().enumerate() {
            let mut diag = 0.0;
            for (r, s) in svd.singular_values.iter().enumerate() {
                diag += vt[(r, p)].powi(2) / (s * s);
            }
            lines.push(LineEstimate {
                frequency_hz: candidate_grid[j],
                amplitude: x[j],
                amplitude_stderr: (variance * diag).sqrt(),
            });
        }
    }

    Ok(DeconvolutionReport { lines, condition_number, residual_norm, noise_estimate: variance.sqrt(), constraint })
}

/// Lawson–Hanson active-set solution of `min ‖Ax − b‖₂` subject to `x ≥ 0`.
pub fn nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let (m, n) = a.shape();
    if b.len() != m {
        return Err(Error::InvalidParameter("nnls: dimension mismatch".into()));
    }
    let tol = 10.0 * f64::EPSILON * a.norm() * m.max(n) as f64;
    let mut x = DVector::zeros(n);
    let mut passive = vec![false; n];
    let max_iter = 3 * n + 30;
    let mut iter = 0;

    loop {
        let w = a.transpose() * (b - a * &x);
        let next = (0..n).filter(|&j| !passive[j] && w[j] > tol).max_by(|&i, &j| w[i].total_cmp(&w[j]));
        let Some(j) = next else { break };
        passive[j] = true;

        loop {
            iter += 1;
            if iter > max_iter {
                return Err(Error::Solver(format!("nnls did not converge in {max_iter} iterations")));
            }
            let s = passive_solve(a, b, &passive)?;
            if (0..n).all(|i| !passive[i] || s[i] > 0.0) {
                x = s;
                break;
            }
            let alpha = (0..n)
                .filter(|&i| passive[i] && s[i] <= 0.0)
                .map(|i| x[i] / (x[i] - s[i]))
                .fold(f64::INFINITY, f64::min);
            x += (&s - &x) * alpha;
            for i in 0..n {
                if passive[i] && x[i] <= tol {
                    passive[i] = false;
                    x[i] = 0.0;
                }
            }
        }
    }
    Ok(x)
}

fn passive_solve(a: &DMatrix<f64>, b: &DVector<f64>, passive: &[bool]) -> Result<DVector<f64>> {
    let cols: Vec<usize> = (0..passive.len()).filter(|&j| passive[j]).collect();
    let mut s = DVector::zeros(passive.len());
    if cols.is_empty() {
        return Ok(s);
    }
    let sub = a.select_columns(&cols).svd(true, true).solve(b, 0.0).map_err(|e| Error::Solver(e.into()))?;
    for (p, &j) in cols.iter().enumerate() {
        s[j] = sub[p];
    }
    Ok(s)
}
