//! Subcommand implementations. Each writes its files under the output
//! directory and returns the in-memory result for printing and tests.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use homodecouple::acquisition::{nyquist_report, NyquistReport};
use homodecouple::effham::{EffectiveReport, PlanarCoupling};
use homodecouple::{
    acquire, acquire_constant_time, bch_effective, calibrate_psf, compile, deconvolve_with, find_peaks, fit_envelope,
    isotropic_effective, numeric_effective, simulate_rf_ensemble, spectrum_with, tilt_analysis, Axis,
    BlurredSpectrum, DeconvolutionReport, EffectiveHamiltonian, EnvelopeFit, Evolution, Fid, IsotropicTiming,
    LineEstimate, Peak, PointSpreadFunction, SequenceKind, Spectrum, SpectrumOptions, SpinSystem, TwoSpinOperator,
    BASIS_LABELS,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Format, SequenceChoice};
use crate::error::{CliError, CliResult};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Where and how results are written.
#[derive(Debug, Clone)]
pub struct Output {
    pub directory: PathBuf,
    pub formats: Vec<Format>,
    pub seed: u64,
}

impl Output {
    /// Command-line flags take precedence over the config's output section.
    pub fn resolve(out: Option<PathBuf>, format: Option<Format>, seed: u64, cfg: Option<&ExperimentConfig>) -> Self {
        let directory = out
            .or_else(|| cfg.and_then(|c| c.output.directory.clone()))
            .unwrap_or_else(|| PathBuf::from("out"));
        let formats = match (format, cfg) {
            (Some(f), _) => vec![f],
            (None, Some(c)) => c.output.formats.clone(),
            (None, None) => vec![Format::Csv],
        };
        Self { directory, formats, seed }
    }

    fn wants(&self, f: Format) -> bool {
        self.formats.contains(&f)
    }

    fn write_in(&self, dir: &Path, name: &str, contents: &str) -> CliResult<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let path = dir.join(name);
        fs::write(&path, contents).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }

    pub fn write(&self, name: &str, contents: &str) -> CliResult<PathBuf> {
        self.write_in(&self.directory, name, contents)
    }

    /// Writes `stem.csv` and/or `stem.json` according to the formats.
    fn emit(
        &self,
        dir: &Path,
        stem: &str,
        csv: impl FnOnce() -> String,
        json: impl FnOnce() -> CliResult<String>,
    ) -> CliResult<()> {
        if self.wants(Format::Csv) {
            self.write_in(dir, &format!("{stem}.csv"), &csv())?;
        }
        if self.wants(Format::Json) {
            self.write_in(dir, &format!("{stem}.json"), &json()?)?;
        }
        Ok(())
    }

    /// `run.json`: command, seed and the resolved config.
    fn manifest(&self, command: &str, cfg: Option<&ExperimentConfig>, extra: serde_json::Value) -> CliResult<()> {
        let doc = serde_json::json!({
            "schema_version": REPORT_SCHEMA_VERSION,
            "command": command,
            "seed": self.seed,
            "config": cfg,
            "details": extra,
        });
        self.write("run.json", &pretty(&doc)?)?;
        Ok(())
    }
}

fn pretty<T: Serialize>(value: &T) -> CliResult<String> {
    serde_json::to_string_pretty(value).map_err(|e| CliError::Core(e.into()))
}

fn initial_state() -> TwoSpinOperator {
    TwoSpinOperator::total(Axis::X)
}

/// Echoed by `simulate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationSummary {
    pub theta: Option<f64>,
    pub block_duration_s: Option<f64>,
    pub dwell_s: f64,
    pub n_samples: usize,
    pub nyquist: NyquistReport,
}

pub fn simulate(cfg: &ExperimentConfig, out: &Output) -> CliResult<(Fid, SimulationSummary)> {
    let sys = cfg.spin_system()?;
    let block = cfg.block()?;
    let rho0 = initial_state();
    let acq = &cfg.acquisition;
    let (fid, nyquist) = match (cfg.sequence.kind, &block) {
        (SequenceChoice::ConstantTime, Some(b)) => {
            let total = cfg.sequence.constant_time_s.expect("validated");
            // Indirect samples are two blocks apart.
            let nyquist = nyquist_report(&sys, &Evolution::Sequence { sequence: b, blocks_per_sample: 2 });
            (acquire_constant_time(b, total, &rho0)?, nyquist)
        }
        (_, Some(b)) => {
            let evolution = Evolution::Sequence { sequence: b, blocks_per_sample: acq.blocks_per_sample };
            let nyquist = nyquist_report(&sys, &evolution);
            (acquire(&sys, evolution, &rho0, acq.n_samples.expect("validated"))?, nyquist)
        }
        (_, None) => {
            let evolution = Evolution::Free { dwell: acq.dwell_s.expect("validated") };
            let nyquist = nyquist_report(&sys, &evolution);
            (acquire(&sys, evolution, &rho0, acq.n_samples.expect("validated"))?, nyquist)
        }
    };
    let summary = SimulationSummary {
        theta: block.as_ref().and_then(|b| b.theta),
        block_duration_s: block.as_ref().map(|b| b.block_duration()),
        dwell_s: fid.dwell,
        n_samples: fid.len(),
        nyquist,
    };
    out.emit(&out.directory, "fid", || fid.to_csv(), || Ok(fid.to_json()?))?;
    out.manifest("simulate", Some(cfg), serde_json::to_value(&summary).map_err(|e| CliError::Core(e.into()))?)?;
    Ok((fid, summary))
}

/// Reads a FID written by `simulate`; the format follows the extension.
pub fn read_fid(path: &Path) -> CliResult<Fid> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let parsed = match path.extension().and_then(|e| e.to_str()) {
        Some("json") => Fid::from_json(&text),
        _ => Fid::from_csv(&text),
    };
    parsed.map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumArgs {
    pub truncate_at: Option<f64>,
    pub zero_fill: Option<usize>,
    pub line_broadening: f64,
    pub rescale_axis: bool,
    /// Peak threshold as a fraction of the largest magnitude.
    pub threshold: f64,
}

impl Default for SpectrumArgs {
    fn default() -> Self {
        Self { truncate_at: None, zero_fill: None, line_broadening: 0.0, rescale_axis: false, threshold: 0.1 }
    }
}

fn peaks_csv(peaks: &[Peak]) -> String {
    let mut out = String::from("frequency_hz,grid_frequency_hz,height,width_hz\n");
    for p in peaks {
        let _ = writeln!(out, "{},{},{},{}", p.frequency_hz, p.grid_frequency_hz, p.height, p.width_hz);
    }
    out
}

pub fn spectrum(fid: &Fid, args: &SpectrumArgs, out: &Output) -> CliResult<(Spectrum, Vec<Peak>)> {
    let options = SpectrumOptions {
        truncate_at: args.truncate_at.unwrap_or_else(|| fid.duration()),
        zero_fill: args.zero_fill.unwrap_or(SpectrumOptions::DEFAULT_ZERO_FILL),
        line_broadening: args.line_broadening,
        rescale_axis: args.rescale_axis,
    };
    let spec = spectrum_with(fid, &options)?;
    let peaks = find_peaks(&spec, args.threshold)?;
    out.emit(&out.directory, "spectrum", || spec.to_csv(), || Ok(spec.to_json()?))?;
    out.emit(&out.directory, "peaks", || peaks_csv(&peaks), || pretty(&peaks))?;
    out.manifest("spectrum", None, serde_json::json!({ "options": options, "threshold": args.threshold }))?;
    Ok((spec, peaks))
}

/// Envelope fit of a FID, plus the numeric effective Hamiltonian when the
/// FID metadata names a decoupling block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub schema_version: u32,
    pub envelope: EnvelopeFit,
    pub lifetime_s: f64,
    pub resolved: bool,
    pub effective: Option<EffectiveReport>,
    pub predicted_residual_coupling_hz: Option<f64>,
}

impl AnalysisReport {
    fn to_csv(&self) -> String {
        let mut rows = vec![
            ("envelope_frequency_hz", self.envelope.envelope_frequency),
            ("fit_residual", self.envelope.fit_residual),
            ("resolution_floor_hz", self.envelope.resolution_floor),
            ("lifetime_s", self.lifetime_s),
            ("resolved", f64::from(u8::from(self.resolved))),
        ];
        if let Some(j) = self.predicted_residual_coupling_hz {
            rows.push(("predicted_residual_coupling_hz", j));
        }
        let mut out = String::from("quantity,value\n");
        for (k, v) in rows {
            let _ = writeln!(out, "{k},{v}");
        }
        for (k, f) in self.envelope.carriers_hz.iter().enumerate() {
            let _ = writeln!(out, "carrier_{k}_hz,{f}");
        }
        out
    }
}

pub fn analyze(fid: &Fid, lines: usize, out: &Output) -> CliResult<AnalysisReport> {
    let envelope = fit_envelope(fid, lines)?;
    let effective = match &fid.metadata {
        Some(meta) if meta.sequence_kind == SequenceKind::Decoupling => {
            match (meta.parameters.get("rf_amplitude_rad_s"), meta.parameters.get("delta_t_s")) {
                (Some(&a), Some(&dt)) => {
                    let block = homodecouple::build_decoupling_block(&meta.system, a, dt)?;
                    Some(numeric_effective(&compile(&block)?, block.duration())?)
                }
                _ => None,
            }
        }
        _ => None,
    };
    let predicted = effective.as_ref().map(|h| tilt_analysis(h).map(|t| t.residual_coupling_hz())).transpose()?;
    let report = AnalysisReport {
        schema_version: REPORT_SCHEMA_VERSION,
        lifetime_s: envelope.lifetime(),
        resolved: envelope.is_resolved(),
        envelope,
        effective: effective.map(|h| h.report()),
        predicted_residual_coupling_hz: predicted,
    };
    out.emit(&out.directory, "analysis", || report.to_csv(), || pretty(&report))?;
    out.manifest("analyze", None, serde_json::json!({ "lines": lines }))?;
    Ok(report)
}

/// One row of the effective-Hamiltonian comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffhamRow {
    pub quantity: String,
    pub bch: Option<f64>,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffhamReport {
    pub schema_version: u32,
    pub theta: Option<f64>,
    pub rows: Vec<EffhamRow>,
    pub bch: Option<EffectiveReport>,
    pub numeric: EffectiveReport,
    pub planar: Option<PlanarCoupling>,
}

impl EffhamReport {
    pub fn row(&self, quantity: &str) -> Option<&EffhamRow> {
        self.rows.iter().find(|r| r.quantity == quantity)
    }

    fn to_csv(&self) -> String {
        let mut out = String::from("quantity,bch,numeric\n");
        for r in &self.rows {
            let bch = r.bch.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{}", r.quantity, bch, r.numeric);
        }
        out
    }

    /// Named scalar observables (the derived rows), for sweep tables.
    pub fn observables(&self) -> BTreeMap<String, f64> {
        let mut map: BTreeMap<String, f64> = self
            .rows
            .iter()
            .filter(|r| !BASIS_LABELS.contains(&r.quantity.as_str()))
            .map(|r| (r.quantity.clone(), r.numeric))
            .collect();
        if let Some(theta) = self.theta {
            map.insert("theta".into(), theta);
        }
        map
    }
}

/// Scaled shifts are reported as magnitude ratios: the sign of the tilted
/// axis is a convention.
fn tilt_rows(h: &EffectiveHamiltonian, sys: &SpinSystem) -> CliResult<Vec<(String, f64)>> {
    let t = tilt_analysis(h)?;
    let ratio = |shift: f64, omega: f64| if omega == 0.0 { 0.0 } else { (shift / omega).abs() };
    let mut rows = vec![
        ("scaled_shift_ratio_i".to_string(), ratio(t.scaled_shift_i, sys.omega_i)),
        ("scaled_shift_ratio_s".to_string(), ratio(t.scaled_shift_s, sys.omega_s)),
        ("residual_coupling_hz".to_string(), t.residual_coupling_hz()),
    ];
    if sys.j != 0.0 {
        rows.push(("residual_coupling_ratio".to_string(), t.residual_coupling / sys.coupling_rad_s()));
    }
    rows.push(("gamma_rad".to_string(), t.gamma));
    rows.push(("perpendicular_residue_rad_s".to_string(), t.perpendicular_residue));
    Ok(rows)
}

/// BCH against numeric effective Hamiltonian for the configured block.
pub fn effham_report(cfg: &ExperimentConfig) -> CliResult<EffhamReport> {
    let sys = cfg.spin_system()?;
    match cfg.sequence.kind {
        SequenceChoice::None => Err(CliError::Config("effham needs a sequence (kind decouple, isotropic or constant_time)".into())),
        SequenceChoice::Decouple | SequenceChoice::ConstantTime => {
            let a = cfg.rf_amplitude()?;
            let dt = cfg.delta_t()?;
            let block = homodecouple::build_decoupling_block(&sys, a, dt)?;
            let numeric = numeric_effective(&compile(&block)?, block.duration())?;
            let bch = bch_effective(&sys, a, dt)?;
            let mut rows: Vec<EffhamRow> = BASIS_LABELS
                .iter()
                .map(|l| EffhamRow { quantity: l.to_string(), bch: Some(bch.coefficient(l)), numeric: numeric.coefficient(l) })
                .collect();
            let bch_tilt: BTreeMap<String, f64> = tilt_rows(&bch, &sys)?.into_iter().collect();
            for (name, value) in tilt_rows(&numeric, &sys)? {
                rows.push(EffhamRow { bch: bch_tilt.get(&name).copied(), quantity: name, numeric: value });
            }
            Ok(EffhamReport {
                schema_version: REPORT_SCHEMA_VERSION,
                theta: block.theta,
                rows,
                bch: Some(bch.report()),
                numeric: numeric.report(),
                planar: None,
            })
        }
        SequenceChoice::Isotropic => {
            let seq = &cfg.sequence;
            let timing = IsotropicTiming::new(seq.tau1_s.expect("validated"), seq.tau2_s.expect("validated"));
            let theta = seq.theta_flip_rad.unwrap_or(0.0);
            let iso = isotropic_effective(&sys, &[timing], theta, seq.flip_phase_rad.unwrap_or(0.0))?;
            let mut rows: Vec<EffhamRow> = BASIS_LABELS
                .iter()
                .map(|l| EffhamRow { quantity: l.to_string(), bch: None, numeric: iso.effective.coefficient(l) })
                .collect();
            for (name, value) in [
                ("kappa1_rad_s", iso.planar.kappa1),
                ("kappa2_rad_s", iso.planar.kappa2),
                ("zz_rad_s", iso.planar.zz),
                ("predicted_zz_rad_s", iso.predicted_zz),
            ] {
                rows.push(EffhamRow { quantity: name.into(), bch: None, numeric: value });
            }
            Ok(EffhamReport {
                schema_version: REPORT_SCHEMA_VERSION,
                theta: Some(theta),
                rows,
                bch: None,
                numeric: iso.effective.report(),
                planar: Some(iso.planar),
            })
        }
    }
}

pub fn effham(cfg: &ExperimentConfig, out: &Output) -> CliResult<EffhamReport> {
    let report = effham_report(cfg)?;
    out.emit(&out.directory, "effham", || report.to_csv(), || pretty(&report))?;
    out.manifest("effham", Some(cfg), serde_json::Value::Null)?;
    Ok(report)
}

/// Parameter values from `start:stop:n` (inclusive, n ≥ 1).
pub fn parse_range(text: &str) -> CliResult<Vec<f64>> {
    let parts: Vec<&str> = text.split(':').collect();
    let bad = || CliError::Config(format!("range {text:?} must be start:stop:n"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let start: f64 = parts[0].trim().parse().map_err(|_| bad())?;
    let stop: f64 = parts[1].trim().parse().map_err(|_| bad())?;
    let n: usize = parts[2].trim().parse().map_err(|_| bad())?;
    match n {
        0 => Err(bad()),
        1 => Ok(vec![start]),
        _ => Ok((0..n).map(|k| start + (stop - start) * k as f64 / (n - 1) as f64).collect()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub index: usize,
    pub value: f64,
    pub observables: BTreeMap<String, f64>,
}

/// Effective-Hamiltonian observables at each parameter value.
///
/// Points run concurrently and each writes its own file under `points/`;
/// the `sweep` index is written once all points are done.
pub fn sweep(cfg: &ExperimentConfig, parameter: &str, values: &[f64], out: &Output) -> CliResult<Vec<SweepPoint>> {
    if values.is_empty() {
        return Err(CliError::Config("sweep needs at least one value".into()));
    }
    let configs = values
        .iter()
        .map(|&v| {
            let mut c = cfg.clone();
            c.set_parameter(parameter, v)?;
            Ok(c)
        })
        .collect::<CliResult<Vec<_>>>()?;
    let points_dir = out.directory.join("points");
    let points = configs
        .par_iter()
        .zip(values.par_iter())
        .enumerate()
        .map(|(index, (c, &value))| {
            let report = effham_report(c)?;
            out.emit(&points_dir, &format!("point_{index:04}"), || report.to_csv(), || pretty(&report))?;
            Ok(SweepPoint { index, value, observables: report.observables() })
        })
        .collect::<CliResult<Vec<_>>>()?;

    let columns: Vec<String> = points[0].observables.keys().filter(|c| *c != parameter).cloned().collect();
    out.emit(
        &out.directory,
        "sweep",
        || {
            let mut text = format!("index,{parameter},{}\n", columns.join(","));
            for p in &points {
                let cells: Vec<String> = columns.iter().map(|c| p.observables[c].to_string()).collect();
                let _ = writeln!(text, "{},{},{}", p.index, p.value, cells.join(","));
            }
            text
        },
        || pretty(&serde_json::json!({ "schema_version": REPORT_SCHEMA_VERSION, "parameter": parameter, "points": &points })),
    )?;
    out.manifest("sweep", Some(cfg), serde_json::json!({ "parameter": parameter, "values": values }))?;
    Ok(points)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeconvOutput {
    pub schema_version: u32,
    pub seed: u64,
    pub noise_sigma: f64,
    pub psf: PointSpreadFunction,
    pub report: DeconvolutionReport,
    /// Lines above three standard errors.
    pub significant: Vec<LineEstimate>,
}

/// Simulates the rf-inhomogeneous decoupled spectrum, calibrates the PSF
/// from the configured window and deconvolves onto the candidate grid.
pub fn deconv(cfg: &ExperimentConfig, out: &Output) -> CliResult<(BlurredSpectrum, DeconvOutput)> {
    let d = cfg.deconv.as_ref().ok_or_else(|| CliError::Config("deconv section is missing".into()))?;
    if cfg.sequence.kind != SequenceChoice::Decouple {
        return Err(CliError::Config("deconv needs sequence.kind decouple".into()));
    }
    let sys = cfg.spin_system()?;
    let acquisition = cfg.ensemble_acquisition()?;
    let mut blurred =
        simulate_rf_ensemble(&sys, cfg.rf_amplitude()?, cfg.delta_t()?, &d.distribution()?, &acquisition)?;
    if d.noise_sigma > 0.0 {
        blurred = blurred.with_noise(d.noise_sigma, out.seed)?;
    }
    let psf = calibrate_psf(&blurred, d.calibration_window_hz)?;
    let candidates = match &d.candidate_grid_hz {
        Some(g) => g.points(),
        None => {
            let max = blurred.values.iter().copied().fold(0.0, f64::max);
            blurred.frequencies_hz.iter().zip(&blurred.values).filter(|(_, v)| **v > 0.01 * max).map(|(f, _)| *f).collect()
        }
    };
    let report = deconvolve_with(&blurred, &psf, &candidates, d.constraint)?;
    let result = DeconvOutput {
        schema_version: REPORT_SCHEMA_VERSION,
        seed: out.seed,
        noise_sigma: d.noise_sigma,
        significant: report.significant(3.0),
        psf,
        report,
    };
    out.emit(&out.directory, "blurred", || blurred.to_csv(), || pretty(&blurred))?;
    out.emit(&out.directory, "psf", || result.psf.to_csv(), || pretty(&result.psf))?;
    out.emit(&out.directory, "lines", || result.report.to_csv(), || pretty(&result))?;
    out.manifest("deconv", Some(cfg), serde_json::Value::Null)?;
    Ok((blurred, result))
}
