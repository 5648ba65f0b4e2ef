//! Simulated acquisition: stroboscopic FIDs, spectra, peaks and envelopes.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;

use num_complex::Complex64 as C64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sequence::{build_constant_time_t1, compile, PulseSequence, SequenceKind};
use crate::spin::{propagate, Axis, SpinSystem, TwoSpinOperator};

/// Evolution between consecutive samples.
#[derive(Debug, Clone, Copy)]
pub enum Evolution<'a> {
    /// Free precession with a user dwell time (s).
    Free { dwell: f64 },
    /// `blocks_per_sample` passes through `sequence` per sample.
    Sequence { sequence: &'a PulseSequence, blocks_per_sample: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidMetadata {
    pub system: SpinSystem,
    pub sequence_kind: SequenceKind,
    #[serde(default)]
    pub parameters: BTreeMap<String, f64>,
    #[serde(default)]
    pub block_duration_s: Option<f64>,
    #[serde(default)]
    pub blocks_per_sample: Option<u64>,
    /// `⟨I_x + S_x⟩` at t = 0 before normalization.
    pub initial_signal: f64,
}

/// Real FID `s(t) = ⟨I_x + S_x⟩(t) / ⟨I_x + S_x⟩(0)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fid {
    pub samples: Vec<f64>,
    #[serde(rename = "dwell_s")]
    pub dwell: f64,
    pub theta: f64,
    #[serde(default)]
    pub metadata: Option<FidMetadata>,
}

pub const FID_SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct FidDocument {
    schema_version: u32,
    #[serde(flatten)]
    fid: Fid,
}

impl Fid {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Length of the record, `len · dwell`.
    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 * self.dwell
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dwell
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&FidDocument { schema_version: FID_SCHEMA_VERSION, fid: self.clone() })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: FidDocument = serde_json::from_str(text)?;
        if doc.schema_version != FID_SCHEMA_VERSION {
            return Err(Error::InvalidParameter(format!("unsupported FID schema version {}", doc.schema_version)));
        }
        doc.fid.validate()?;
        Ok(doc.fid)
    }

    /// `time_s,signal` rows with a header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("time_s,signal\n");
        for (k, s) in self.samples.iter().enumerate() {
            let _ = writeln!(out, "{},{}", self.time(k), s);
        }
        out
    }

    /// Reads `time_s,signal` rows; the dwell is taken from the first two
    /// time stamps and metadata is absent.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut times = Vec::new();
        let mut samples = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || (n == 0 && line.starts_with("time")) {
                continue;
            }
            let mut cols = line.split(',');
            let parse = |c: Option<&str>| -> Result<f64> {
                c.and_then(|v| v.trim().parse().ok())
                    .ok_or_else(|| Error::InvalidParameter(format!("malformed FID CSV line {}", n + 1)))
            };
            times.push(parse(cols.next())?);
            samples.push(parse(cols.next())?);
        }
        if samples.len() < 2 {
            return Err(Error::InvalidParameter("FID CSV needs at least two samples".into()));
        }
        let fid = Fid { dwell: times[1] - times[0], samples, theta: 0.0, metadata: None };
        fid.validate()?;
        Ok(fid)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dwell > 0.0 && self.dwell.is_finite()) {
            return Err(Error::InvalidParameter(format!("dwell must be positive, got {}", self.dwell)));
        }
        if self.samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidParameter("FID contains non-finite samples".into()));
        }
        Ok(())
    }
}

/// Sampling rate against the highest frequency expected in the signal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NyquistReport {
    pub sample_rate_hz: f64,
    pub max_expected_hz: f64,
    pub adequate: bool,
}

/// For decoupling sequences the expected lines sit near `(θ/2)·ω/2π`; for
/// other evolutions the bare shifts are used. The coupling adds `|J|`.
pub fn nyquist_report(system: &SpinSystem, evolution: &Evolution) -> NyquistReport {
    let (dwell, scale) = match evolution {
        Evolution::Free { dwell } => (*dwell, 1.0),
        Evolution::Sequence { sequence, blocks_per_sample } => {
            let scale = match (sequence.kind, sequence.theta) {
                (SequenceKind::Decoupling, Some(theta)) => (0.5 * theta).abs(),
                _ => 1.0,
            };
            (*blocks_per_sample as f64 * sequence.duration(), scale)
        }
    };
    let max_expected_hz = scale * system.max_shift() / (2.0 * PI) + system.j.abs();
    let sample_rate_hz = 1.0 / dwell;
    NyquistReport { sample_rate_hz, max_expected_hz, adequate: sample_rate_hz > 2.0 * max_expected_hz }
}

/// Samples `⟨I_x + S_x⟩` after each step, starting from `rho0`.
pub fn acquire(system: &SpinSystem, evolution: Evolution, rho0: &TwoSpinOperator, n_samples: usize) -> Result<Fid> {
    system.validate()?;
    rho0.ensure_hermitian()?;
    if n_samples == 0 {
        return Err(Error::InvalidParameter("n_samples must be positive".into()));
    }
    let report = nyquist_report(system, &evolution);
    if !report.adequate {
        log::warn!(
            "sample rate {:.3} Hz is below twice the expected {:.3} Hz; spectrum will alias",
            report.sample_rate_hz,
            report.max_expected_hz
        );
    }

    let (step, dwell, metadata) = match evolution {
        Evolution::Free { dwell } => {
            if !(dwell > 0.0 && dwell.is_finite()) {
                return Err(Error::InvalidParameter(format!("dwell must be positive, got {dwell}")));
            }
            let meta = FidMetadata {
                system: *system,
                sequence_kind: SequenceKind::Free,
                parameters: BTreeMap::new(),
                block_duration_s: None,
                blocks_per_sample: None,
                initial_signal: 0.0,
            };
            (propagate(&system.free_hamiltonian(), dwell)?, dwell, meta)
        }
        Evolution::Sequence { sequence, blocks_per_sample } => {
            if sequence.system != *system {
                return Err(Error::InvalidParameter("sequence was built for a different spin system".into()));
            }
            if blocks_per_sample == 0 {
                return Err(Error::InvalidParameter("blocks_per_sample must be positive".into()));
            }
            let dwell = blocks_per_sample as f64 * sequence.duration();
            if !(dwell > 0.0) {
                return Err(Error::InvalidParameter("sequence has zero duration".into()));
            }
            let meta = FidMetadata {
                system: *system,
                sequence_kind: sequence.kind,
                parameters: sequence.parameters.clone(),
                block_duration_s: Some(sequence.block_duration()),
                blocks_per_sample: Some(blocks_per_sample),
                initial_signal: 0.0,
            };
            (compile(sequence)?.pow(blocks_per_sample), dwell, meta)
        }
    };
    step.ensure_unitary()?;
    let theta = match evolution {
        Evolution::Sequence { sequence, .. } => sequence.theta.unwrap_or(0.0),
        Evolution::Free { .. } => 0.0,
    };

    let samples = observe(rho0, &step, n_samples)?;
    let (samples, initial) = normalize(samples)?;
    Ok(Fid { samples, dwell, theta, metadata: Some(FidMetadata { initial_signal: initial, ..metadata }) })
}

fn observe(rho0: &TwoSpinOperator, step: &TwoSpinOperator, n: usize) -> Result<Vec<f64>> {
    let obs = TwoSpinOperator::total(Axis::X);
    let u = *step.matrix();
    let ud = u.adjoint();
    let mut rho = *rho0.matrix();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let value = (rho * obs.matrix()).trace();
        if value.im.abs() > crate::spin::EXPECTATION_IMAG_TOL * value.re.abs().max(1.0) {
            return Err(Error::ComplexExpectation { imag: value.im });
        }
        out.push(value.re);
        rho = u * rho * ud;
    }
    Ok(out)
}

fn normalize(mut samples: Vec<f64>) -> Result<(Vec<f64>, f64)> {
    let s0 = samples[0];
    if s0.abs() < 1e-14 {
        return Err(Error::InvalidParameter("initial signal ⟨I_x+S_x⟩ vanishes; choose rho0 with transverse x magnetization".into()));
    }
    for s in &mut samples {
        *s /= s0;
    }
    samples[0] = 1.0;
    Ok((samples, s0))
}

/// Constant-time indirect series: for `k = 0..=N/2` the block runs
/// `N/2 + k` times, a hard π_x follows, then `N/2 − k` more blocks, where
/// `N·block = total_duration`. Sample `k` is `⟨I_x+S_x⟩` at the end, so the
/// indirect time is `d₁ − d₂ = 2k·block` and the dwell is two blocks.
pub fn acquire_constant_time(block: &PulseSequence, total_duration: f64, rho0: &TwoSpinOperator) -> Result<Fid> {
    rho0.ensure_hermitian()?;
    let unit = block.duration();
    if !(unit > 0.0 && total_duration > 0.0) {
        return Err(Error::InvalidParameter("constant-time acquisition needs positive durations".into()));
    }
    let blocks = (total_duration / unit).round() as u64;
    if blocks % 2 != 0 || ((blocks as f64 * unit) - total_duration).abs() > 1e-9 * total_duration {
        return Err(Error::InvalidParameter(format!(
            "total duration {total_duration} s must be an even number of {unit} s blocks"
        )));
    }
    let half = blocks / 2;
    let obs = TwoSpinOperator::total(Axis::X);
    let mut samples = Vec::with_capacity(half as usize + 1);
    for k in 0..=half {
        let d1 = (half + k) as f64 * unit;
        let d2 = (half - k) as f64 * unit;
        let u = compile(&build_constant_time_t1(block, d1, d2)?)?;
        let rho = u * *rho0 * u.dagger();
        samples.push(crate::spin::expect(&rho, &obs)?);
    }
    let (samples, initial) = normalize(samples)?;
    let mut parameters = block.parameters.clone();
    parameters.insert("constant_time_s".into(), blocks as f64 * unit);
    Ok(Fid {
        samples,
        dwell: 2.0 * unit,
        theta: block.theta.unwrap_or(0.0),
        metadata: Some(FidMetadata {
            system: block.system,
            sequence_kind: SequenceKind::ConstantTime,
            parameters,
            block_duration_s: Some(block.block_duration()),
            blocks_per_sample: None,
            initial_signal: initial,
        }),
    })
}

/// Processing options for [`spectrum_with`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectrumOptions {
    #[serde(rename = "truncate_at_s")]
    pub truncate_at: f64,
    pub zero_fill: usize,
    /// Exponential line broadening (Hz) to mimic a finite T₂; zero disables.
    #[serde(rename = "line_broadening_hz", default)]
    pub line_broadening: f64,
    /// Multiply the axis by `2/θ` to map scaled shifts back onto the bare
    /// chemical shifts.
    #[serde(default)]
    pub rescale_axis: bool,
}

impl SpectrumOptions {
    pub const DEFAULT_ZERO_FILL: usize = 4;

    pub fn new(truncate_at: f64) -> Self {
        Self { truncate_at, zero_fill: Self::DEFAULT_ZERO_FILL, line_broadening: 0.0, rescale_axis: false }
    }
}

/// Discrete spectrum on an ascending frequency grid.
///
/// Amplitudes are `dwell · DFT`, so `Σ|x|²·dwell = Σ|X|²·Δf`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    pub frequencies_hz: Vec<f64>,
    pub amplitudes: Vec<C64>,
    #[serde(rename = "truncation_time_s")]
    pub truncation_time: f64,
    pub zero_fill_factor: usize,
    #[serde(rename = "dwell_s")]
    pub dwell: f64,
    pub theta: f64,
    /// Factor applied to the physical frequency axis (1 or 2/θ).
    pub axis_scale: f64,
}

impl Spectrum {
    /// Grid spacing on the physical axis, `1/(zero_fill · truncation_time)`.
    pub fn resolution(&self) -> f64 {
        1.0 / (self.zero_fill_factor as f64 * self.truncation_time)
    }

    /// Grid spacing of the (possibly rescaled) axis.
    pub fn spacing(&self) -> f64 {
        self.resolution() * self.axis_scale
    }

    pub fn magnitudes(&self) -> Vec<f64> {
        self.amplitudes.iter().map(|a| a.norm()).collect()
    }

    pub fn energy(&self) -> f64 {
        self.amplitudes.iter().map(|a| a.norm_sqr()).sum::<f64>() * self.resolution()
    }

    /// `freq_hz,re,im,abs` rows with a header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("freq_hz,re,im,abs\n");
        for (f, a) in self.frequencies_hz.iter().zip(&self.amplitudes) {
            let _ = writeln!(out, "{},{},{},{}", f, a.re, a.im, a.norm());
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Spectrum of the first `truncate_at` seconds, zero-filled by `zero_fill`.
pub fn spectrum(fid: &Fid, truncate_at: f64, zero_fill: usize) -> Result<Spectrum> {
    spectrum_with(fid, &SpectrumOptions { zero_fill, ..SpectrumOptions::new(truncate_at) })
}

pub fn spectrum_with(fid: &Fid, options: &SpectrumOptions) -> Result<Spectrum> {
    fid.validate()?;
    let truncate_at = options.truncate_at;
    if !(truncate_at > 0.0 && truncate_at.is_finite()) {
        return Err(Error::InvalidParameter(format!("truncate_at must be positive, got {truncate_at}")));
    }
    if options.zero_fill == 0 {
        return Err(Error::InvalidParameter("zero_fill must be at least 1".into()));
    }
    let n = (truncate_at / fid.dwell - 1e-9).ceil() as usize;
    if n > fid.len() {
        return Err(Error::InvalidParameter(format!(
            "truncate_at {truncate_at} s exceeds the record length {} s",
            fid.duration()
        )));
    }
    let axis_scale = if options.rescale_axis {
        if fid.theta == 0.0 {
            return Err(Error::InvalidParameter("axis rescaling needs a nonzero θ".into()));
        }
        2.0 / fid.theta
    } else {
        1.0
    };
    let total = n * options.zero_fill;
    let mut buffer = vec![C64::new(0.0, 0.0); total];
    for (k, s) in fid.samples[..n].iter().enumerate() {
        let damp = if options.line_broadening > 0.0 { (-PI * options.line_broadening * fid.time(k)).exp() } else { 1.0 };
        buffer[k] = C64::new(s * damp, 0.0);
    }
    FftPlanner::new().plan_fft_forward(total).process(&mut buffer);

    let df = 1.0 / (total as f64 * fid.dwell);
    let half = total / 2;
    let mut frequencies_hz = Vec::with_capacity(total);
    let mut amplitudes = Vec::with_capacity(total);
    for k in (half + 1)..total {
        frequencies_hz.push((k as f64 - total as f64) * df * axis_scale);
        amplitudes.push(buffer[k] * fid.dwell);
    }
    for k in 0..=half {
        frequencies_hz.push(k as f64 * df * axis_scale);
        amplitudes.push(buffer[k] * fid.dwell);
    }
    debug_assert_eq!(frequencies_hz.len(), total);

    Ok(Spectrum {
        frequencies_hz,
        amplitudes,
        truncation_time: n as f64 * fid.dwell,
        zero_fill_factor: options.zero_fill,
        dwell: fid.dwell,
        theta: fid.theta,
        axis_scale,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Peak {
    /// Parabolically interpolated position.
    pub frequency_hz: f64,
    /// Grid point of the local maximum.
    pub grid_frequency_hz: f64,
    pub height: f64,
    /// Full width at half maximum, linearly interpolated between grid points.
    pub width_hz: f64,
}

/// Local maxima of `|X(f)|` at `f ≥ 0` above `threshold_fraction` of the
/// largest magnitude there, sorted by frequency.
pub fn find_peaks(spec: &Spectrum, threshold_fraction: f64) -> Result<Vec<Peak>> {
    if !(threshold_fraction > 0.0 && threshold_fraction < 1.0) {
        return Err(Error::InvalidParameter(format!("threshold_fraction must lie in (0, 1), got {threshold_fraction}")));
    }
    let start = spec.frequencies_hz.iter().position(|f| *f >= 0.0).unwrap_or(spec.frequencies_hz.len());
    let freqs = &spec.frequencies_hz[start..];
    let mags: Vec<f64> = spec.amplitudes[start..].iter().map(|a| a.norm()).collect();
    Ok(local_maxima(&mags, threshold_fraction)
        .into_iter()
        .map(|k| {
            let df = if k + 1 < freqs.len() { freqs[k + 1] - freqs[k] } else { freqs[k] - freqs[k - 1] };
            let (offset, height) = parabolic(&mags, k);
            Peak {
                frequency_hz: freqs[k] + offset * df,
                grid_frequency_hz: freqs[k],
                height,
                width_hz: fwhm(&mags, k, height) * df,
            }
        })
        .collect())
}

fn local_maxima(mags: &[f64], threshold_fraction: f64) -> Vec<usize> {
    let max = mags.iter().cloned().fold(0.0_f64, f64::max);
    if mags.len() < 3 || max <= 0.0 {
        return Vec::new();
    }
    let threshold = threshold_fraction * max;
    (1..mags.len() - 1)
        .filter(|&k| mags[k] > threshold && mags[k] > mags[k - 1] && mags[k] >= mags[k + 1])
        .collect()
}

/// Vertex offset (in bins) and height of the parabola through `k-1, k, k+1`.
fn parabolic(y: &[f64], k: usize) -> (f64, f64) {
    let (a, b, c) = (y[k - 1], y[k], y[k + 1]);
    let denom = a - 2.0 * b + c;
    if denom >= 0.0 {
        return (0.0, b);
    }
    let p = (0.5 * (a - c) / denom).clamp(-0.5, 0.5);
    (p, b - 0.25 * (a - c) * p)
}

fn fwhm(y: &[f64], k: usize, height: f64) -> f64 {
    let half = 0.5 * height;
    let crossing = |mut i: usize, step: isize| -> f64 {
        loop {
            let next = i as isize + step;
            if next < 0 || next as usize >= y.len() {
                return i as f64;
            }
            let j = next as usize;
            if y[j] < half {
                let frac = (y[i] - half) / (y[i] - y[j]);
                return i as f64 + step as f64 * frac;
            }
            i = j;
        }
    };
    crossing(k, 1) - crossing(k, -1)
}

/// Envelope fit result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeFit {
    /// `J_eff` of the model `c·|cos(π J_eff t)|`.
    #[serde(rename = "envelope_frequency_hz")]
    pub envelope_frequency: f64,
    /// RMS misfit relative to the RMS envelope.
    pub fit_residual: f64,
    /// `1/(2T)` for the fitted span T: below this no zero crossing is seen.
    #[serde(rename = "resolution_floor_hz")]
    pub resolution_floor: f64,
    pub carriers_hz: Vec<f64>,
}

impl EnvelopeFit {
    /// Time of the first envelope zero, `1/(2 J_eff)`.
    pub fn lifetime(&self) -> f64 {
        0.5 / self.envelope_frequency
    }

    pub fn is_resolved(&self) -> bool {
        self.envelope_frequency >= self.resolution_floor
    }
}

/// Relative RMS misfit above which [`fit_envelope`] fails.
pub const ENVELOPE_RESIDUAL_LIMIT: f64 = 0.2;
const CARRIER_THRESHOLD: f64 = 0.3;
const EDGE_FRACTION: f64 = 0.03;
const FIT_POINTS: usize = 4096;

/// Fits `c·|cos(π J t)|` to the summed analytic-signal magnitudes of the
/// `model_frequency_count` carrier bands of `fid`.
///
/// Carriers are found on the longest prefix whose Hann-windowed spectrum has
/// exactly that many peaks, so that unresolved multiplets count once. Each
/// band (split at carrier midpoints) is demodulated separately; the magnitude
/// of the full analytic signal would otherwise beat at the carrier spacing.
pub fn fit_envelope(fid: &Fid, model_frequency_count: usize) -> Result<EnvelopeFit> {
    fid.validate()?;
    if model_frequency_count == 0 {
        return Err(Error::InvalidParameter("model_frequency_count must be positive".into()));
    }
    let n = fid.len();
    if n < 64 {
        return Err(Error::InvalidParameter("FID too short for an envelope fit".into()));
    }
    let carriers = detect_carriers(fid, model_frequency_count)?;

    let mut planner = FftPlanner::new();
    let mut spectrum: Vec<C64> = fid.samples.iter().map(|s| C64::new(*s, 0.0)).collect();
    planner.plan_fft_forward(n).process(&mut spectrum);
    let df = 1.0 / (n as f64 * fid.dwell);
    let nyquist = n / 2;
    let mut edges = vec![0.0];
    edges.extend(carriers.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    edges.push(f64::INFINITY);

    let inverse = planner.plan_fft_inverse(n);
    let mut envelope = vec![0.0; n];
    for band in edges.windows(2) {
        let mut z = vec![C64::new(0.0, 0.0); n];
        for (k, zk) in z.iter_mut().enumerate().take(nyquist + 1) {
            let f = k as f64 * df;
            if f >= band[0] && f < band[1] {
                *zk = if k == 0 || (n % 2 == 0 && k == nyquist) { spectrum[k] } else { spectrum[k] * 2.0 };
            }
        }
        inverse.process(&mut z);
        for (e, v) in envelope.iter_mut().zip(&z) {
            *e += v.norm() / n as f64;
        }
    }

    let lo = (EDGE_FRACTION * n as f64).ceil() as usize;
    let hi = n - lo;
    let stride = ((hi - lo) / FIT_POINTS).max(1);
    let points: Vec<(f64, f64)> = (lo..hi).step_by(stride).map(|k| (fid.time(k), envelope[k])).collect();
    let span = fid.time(hi - 1);

    let spacing = carriers.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
    let j_max = if spacing.is_finite() { 0.5 * spacing } else { carriers[0].max(df) };
    let step = 0.02 / span;
    let grid = ((j_max / step).ceil() as usize).max(2);
    let misfit = |j: f64| envelope_misfit(&points, j);

    let (mut best_j, mut best) = (0.0, misfit(0.0));
    for g in 1..=grid {
        let j = g as f64 * step;
        let m = misfit(j);
        if m < best {
            best = m;
            best_j = j;
        }
    }
    let (j, rms) = golden_minimize(&misfit, (best_j - step).max(0.0), best_j + step);
    let (j, rms) = if rms < best { (j, rms) } else { (best_j, best) };

    let scale = (points.iter().map(|p| p.1 * p.1).sum::<f64>() / points.len() as f64).sqrt();
    let fit_residual = if scale > 0.0 { rms / scale } else { f64::INFINITY };
    if fit_residual > ENVELOPE_RESIDUAL_LIMIT {
        return Err(Error::Fit(format!(
            "relative residual {fit_residual:.3} exceeds {ENVELOPE_RESIDUAL_LIMIT} (J_eff={j:.5} Hz, carriers {carriers:?} Hz)"
        )));
    }
    Ok(EnvelopeFit { envelope_frequency: j, fit_residual, resolution_floor: 0.5 / span, carriers_hz: carriers })
}

/// RMS misfit of the best amplitude `c` for `c·|cos(π j t)|`.
fn envelope_misfit(points: &[(f64, f64)], j: f64) -> f64 {
    let (mut gg, mut gm, mut mm) = (0.0, 0.0, 0.0);
    for (t, m) in points {
        let g = (PI * j * t).cos().abs();
        gg += g * g;
        gm += g * m;
        mm += m * m;
    }
    let c = if gg > 0.0 { gm / gg } else { 0.0 };
    ((mm - 2.0 * c * gm + c * c * gg).max(0.0) / points.len() as f64).sqrt()
}

fn golden_minimize(f: &impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> (f64, f64) {
    let r = 0.5 * (5.0_f64.sqrt() - 1.0);
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..80 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    if fc < fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

fn detect_carriers(fid: &Fid, count: usize) -> Result<Vec<f64>> {
    let mut planner = FftPlanner::new();
    let mut len = fid.len();
    let mut seen = Vec::new();
    while len >= 32 {
        let mut buf: Vec<C64> = (0..len)
            .map(|k| {
                let w = (PI * k as f64 / len as f64).sin().powi(2);
                C64::new(fid.samples[k] * w, 0.0)
            })
            .collect();
        planner.plan_fft_forward(len).process(&mut buf);
        let mags: Vec<f64> = buf[..=len / 2].iter().map(|v| v.norm()).collect();
        let peaks = local_maxima(&mags, CARRIER_THRESHOLD);
        if peaks.len() == count {
            let df = 1.0 / (len as f64 * fid.dwell);
            return Ok(peaks.iter().map(|&k| (k as f64 + parabolic(&mags, k).0) * df).collect());
        }
        seen.push(peaks.len());
        len /= 2;
    }
    Err(Error::Fit(format!("could not isolate {count} carriers (peak counts by record length: {seen:?})")))
}
