//! Experiment configuration: one JSON document, units in every key name.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use homodecouple::deconv::gaussian_scale_distribution;
use homodecouple::{
    build_decoupling_block, build_isotropic_block, Constraint, CouplingKind, EnsembleAcquisition, PulseSequence,
    SpinSystem,
};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub system: SystemConfig,
    #[serde(default)]
    pub sequence: SequenceConfig,
    pub acquisition: AcquisitionConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deconv: Option<DeconvConfig>,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    pub shift_i_hz: f64,
    pub shift_s_hz: f64,
    pub j_hz: f64,
    #[serde(default = "default_coupling")]
    pub coupling: CouplingKind,
}

fn default_coupling() -> CouplingKind {
    CouplingKind::Ising
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SequenceChoice {
    #[default]
    None,
    Decouple,
    Isotropic,
    ConstantTime,
}

impl SequenceChoice {
    fn name(self) -> &'static str {
        match self {
            SequenceChoice::None => "none",
            SequenceChoice::Decouple => "decouple",
            SequenceChoice::Isotropic => "isotropic",
            SequenceChoice::ConstantTime => "constant_time",
        }
    }
}

/// Sequence parameters; which fields are required depends on `kind`.
///
/// The rf amplitude is given either as `rf_amplitude_rad_s` (A) or as
/// `rf_amplitude_hz` (A/2π), never both.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceConfig {
    #[serde(default)]
    pub kind: SequenceChoice,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rf_amplitude_rad_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rf_amplitude_hz: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_t_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau1_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau2_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_flip_rad: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flip_phase_rad: Option<f64>,
    /// d₁ + d₂ of the constant-time experiment.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constant_time_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcquisitionConfig {
    /// Required except for `constant_time`, where the count follows from
    /// `constant_time_s`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_samples: Option<usize>,
    /// Only for `none`; sequences set their own dwell.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dwell_s: Option<f64>,
    #[serde(default = "default_blocks_per_sample")]
    pub blocks_per_sample: u64,
    /// Defaults to the full record.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truncate_at_s: Option<f64>,
    #[serde(default = "default_zero_fill")]
    pub zero_fill: usize,
    #[serde(default)]
    pub line_broadening_hz: f64,
}

fn default_blocks_per_sample() -> u64 {
    1
}

fn default_zero_fill() -> usize {
    homodecouple::SpectrumOptions::DEFAULT_ZERO_FILL
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub start_hz: f64,
    pub stop_hz: f64,
    pub step_hz: f64,
}

impl GridConfig {
    pub fn points(&self) -> Vec<f64> {
        let n = ((self.stop_hz - self.start_hz) / self.step_hz + 1e-9).floor() as usize;
        (0..=n).map(|k| self.start_hz + k as f64 * self.step_hz).collect()
    }
}

/// rf-inhomogeneity deconvolution. The scale distribution is either a
/// Gaussian (`scale_sigma`, `scale_count`) or explicit `[scale, weight]`
/// pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeconvConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale_sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale_count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale_distribution: Option<Vec<(f64, f64)>>,
    /// Window around an isolated line whose profile is taken as the PSF.
    pub calibration_window_hz: (f64, f64),
    /// Defaults to the spectrum's own bins wherever the blurred profile
    /// exceeds 1% of its maximum.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidate_grid_hz: Option<GridConfig>,
    /// Standard deviation of added white noise, in spectrum units.
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub constraint: Constraint,
}

impl DeconvConfig {
    pub fn distribution(&self) -> CliResult<Vec<(f64, f64)>> {
        match (&self.scale_distribution, self.scale_sigma) {
            (Some(d), None) if self.scale_count.is_none() => Ok(d.clone()),
            (None, Some(sigma)) => Ok(gaussian_scale_distribution(sigma, self.scale_count.unwrap_or(41))?),
            _ => Err(CliError::Config(
                "deconv: give either scale_distribution or scale_sigma (with optional scale_count)".into(),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub directory: Option<PathBuf>,
    #[serde(default = "default_formats")]
    pub formats: Vec<Format>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { directory: None, formats: default_formats() }
    }
}

fn default_formats() -> Vec<Format> {
    vec![Format::Csv]
}

/// Names accepted by [`ExperimentConfig::set_parameter`]. `theta` sets
/// `delta_t_s = θ/A`.
pub const SWEEP_PARAMETERS: &[&str] = &[
    "shift_i_hz",
    "shift_s_hz",
    "j_hz",
    "rf_amplitude_rad_s",
    "rf_amplitude_hz",
    "delta_t_s",
    "theta",
    "tau1_s",
    "tau2_s",
    "theta_flip_rad",
    "flip_phase_rad",
    "constant_time_s",
    "noise_sigma",
];

fn positive(name: &str, v: f64) -> CliResult<f64> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(CliError::Config(format!("{name} must be positive and finite, got {v}")))
    }
}

fn require(name: &str, v: Option<f64>, kind: SequenceChoice) -> CliResult<f64> {
    v.ok_or_else(|| CliError::Config(format!("sequence.{name} is required for kind {}", kind.name())))
}

impl ExperimentConfig {
    /// Parses and validates; syntax errors carry line and column.
    pub fn from_json(text: &str) -> CliResult<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(CliError::Config(format!(
                "schema_version {} is not supported (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.spin_system()?;
        let seq = &self.sequence;
        let kind = seq.kind;
        let unused = |name: &str, present: bool| -> CliResult<()> {
            if present {
                Err(CliError::Config(format!("sequence.{name} is not used by kind {}", kind.name())))
            } else {
                Ok(())
            }
        };
        let rf = seq.rf_amplitude_rad_s.is_some() || seq.rf_amplitude_hz.is_some();
        let timing = seq.tau1_s.is_some() || seq.tau2_s.is_some();
        let flip = seq.theta_flip_rad.is_some() || seq.flip_phase_rad.is_some();
        match kind {
            SequenceChoice::None => {
                unused("rf_amplitude_*", rf)?;
                unused("delta_t_s", seq.delta_t_s.is_some())?;
                unused("tau1_s/tau2_s", timing)?;
                unused("theta_flip_rad/flip_phase_rad", flip)?;
                unused("constant_time_s", seq.constant_time_s.is_some())?;
            }
            SequenceChoice::Decouple | SequenceChoice::ConstantTime => {
                self.rf_amplitude()?;
                positive("sequence.delta_t_s", require("delta_t_s", seq.delta_t_s, kind)?)?;
                unused("tau1_s/tau2_s", timing)?;
                unused("theta_flip_rad/flip_phase_rad", flip)?;
                if kind == SequenceChoice::ConstantTime {
                    positive("sequence.constant_time_s", require("constant_time_s", seq.constant_time_s, kind)?)?;
                } else {
                    unused("constant_time_s", seq.constant_time_s.is_some())?;
                }
            }
            SequenceChoice::Isotropic => {
                unused("rf_amplitude_*", rf)?;
                unused("delta_t_s", seq.delta_t_s.is_some())?;
                unused("constant_time_s", seq.constant_time_s.is_some())?;
                positive("sequence.tau1_s", require("tau1_s", seq.tau1_s, kind)?)?;
                positive("sequence.tau2_s", require("tau2_s", seq.tau2_s, kind)?)?;
                if self.acquisition.blocks_per_sample % 2 != 0 {
                    return Err(CliError::Config(
                        "acquisition.blocks_per_sample must be even for isotropic blocks (each ends in a π_x frame)"
                            .into(),
                    ));
                }
            }
        }

        let acq = &self.acquisition;
        match kind {
            SequenceChoice::ConstantTime => {
                if acq.n_samples.is_some() {
                    return Err(CliError::Config(
                        "acquisition.n_samples is set by sequence.constant_time_s for kind constant_time".into(),
                    ));
                }
            }
            _ => {
                if acq.n_samples.unwrap_or(0) == 0 {
                    return Err(CliError::Config("acquisition.n_samples must be a positive integer".into()));
                }
            }
        }
        match (kind, acq.dwell_s) {
            (SequenceChoice::None, Some(d)) => {
                positive("acquisition.dwell_s", d)?;
            }
            (SequenceChoice::None, None) => {
                return Err(CliError::Config("acquisition.dwell_s is required without a sequence".into()))
            }
            (_, Some(_)) => {
                return Err(CliError::Config("acquisition.dwell_s is set by the sequence; remove it".into()))
            }
            _ => {}
        }
        if acq.blocks_per_sample == 0 {
            return Err(CliError::Config("acquisition.blocks_per_sample must be positive".into()));
        }
        if let Some(t) = acq.truncate_at_s {
            positive("acquisition.truncate_at_s", t)?;
        }
        if acq.zero_fill == 0 {
            return Err(CliError::Config("acquisition.zero_fill must be at least 1".into()));
        }
        if !(acq.line_broadening_hz >= 0.0 && acq.line_broadening_hz.is_finite()) {
            return Err(CliError::Config("acquisition.line_broadening_hz must be non-negative".into()));
        }
        if let Some(d) = &self.deconv {
            d.distribution()?;
            if let Some(g) = &d.candidate_grid_hz {
                positive("deconv.candidate_grid_hz.step_hz", g.step_hz)?;
                if g.stop_hz < g.start_hz {
                    return Err(CliError::Config("deconv.candidate_grid_hz: stop_hz is below start_hz".into()));
                }
            }
            if !(d.noise_sigma >= 0.0 && d.noise_sigma.is_finite()) {
                return Err(CliError::Config("deconv.noise_sigma must be non-negative".into()));
            }
        }
        if self.output.formats.is_empty() {
            return Err(CliError::Config("output.formats must name at least one format".into()));
        }
        Ok(())
    }

    pub fn spin_system(&self) -> CliResult<SpinSystem> {
        let s = &self.system;
        let sys = SpinSystem::new(2.0 * PI * s.shift_i_hz, 2.0 * PI * s.shift_s_hz, s.j_hz, s.coupling);
        sys.validate().map_err(|e| CliError::Config(format!("system: {e}")))?;
        Ok(sys)
    }

    /// A in rad/s.
    pub fn rf_amplitude(&self) -> CliResult<f64> {
        match (self.sequence.rf_amplitude_rad_s, self.sequence.rf_amplitude_hz) {
            (Some(a), None) if a.is_finite() => Ok(a),
            (None, Some(hz)) if hz.is_finite() => Ok(2.0 * PI * hz),
            (Some(_), Some(_)) => {
                Err(CliError::Config("give exactly one of sequence.rf_amplitude_rad_s and sequence.rf_amplitude_hz".into()))
            }
            (None, None) => Err(CliError::Config(format!(
                "sequence.rf_amplitude_rad_s or sequence.rf_amplitude_hz is required for kind {}",
                self.sequence.kind.name()
            ))),
            _ => Err(CliError::Config("rf amplitude must be finite".into())),
        }
    }

    pub fn delta_t(&self) -> CliResult<f64> {
        require("delta_t_s", self.sequence.delta_t_s, self.sequence.kind)
    }

    /// The repeating block, or `None` for free evolution. For
    /// `constant_time` this is the decoupling block.
    pub fn block(&self) -> CliResult<Option<PulseSequence>> {
        let sys = self.spin_system()?;
        let seq = &self.sequence;
        Ok(match seq.kind {
            SequenceChoice::None => None,
            SequenceChoice::Decouple | SequenceChoice::ConstantTime => {
                Some(build_decoupling_block(&sys, self.rf_amplitude()?, self.delta_t()?)?)
            }
            SequenceChoice::Isotropic => Some(build_isotropic_block(
                &sys,
                require("tau1_s", seq.tau1_s, seq.kind)?,
                require("tau2_s", seq.tau2_s, seq.kind)?,
                seq.theta_flip_rad.unwrap_or(0.0),
                seq.flip_phase_rad.unwrap_or(0.0),
            )?),
        })
    }

    pub fn ensemble_acquisition(&self) -> CliResult<EnsembleAcquisition> {
        let acq = &self.acquisition;
        let n_samples = acq.n_samples.ok_or_else(|| CliError::Config("acquisition.n_samples is required".into()))?;
        let block = self.block()?.ok_or_else(|| CliError::Config("deconv needs sequence.kind decouple".into()))?;
        let record = n_samples as f64 * acq.blocks_per_sample as f64 * block.duration();
        Ok(EnsembleAcquisition {
            n_samples,
            blocks_per_sample: acq.blocks_per_sample,
            truncate_at: acq.truncate_at_s.unwrap_or(record),
            zero_fill: acq.zero_fill,
            line_broadening: acq.line_broadening_hz,
        })
    }

    /// Overrides one numeric field; see [`SWEEP_PARAMETERS`].
    pub fn set_parameter(&mut self, name: &str, value: f64) -> CliResult<()> {
        let seq = &mut self.sequence;
        match name {
            "shift_i_hz" => self.system.shift_i_hz = value,
            "shift_s_hz" => self.system.shift_s_hz = value,
            "j_hz" => self.system.j_hz = value,
            "rf_amplitude_rad_s" => {
                seq.rf_amplitude_rad_s = Some(value);
                seq.rf_amplitude_hz = None;
            }
            "rf_amplitude_hz" => {
                seq.rf_amplitude_hz = Some(value);
                seq.rf_amplitude_rad_s = None;
            }
            "delta_t_s" => seq.delta_t_s = Some(value),
            "theta" => {
                let a = self.rf_amplitude()?;
                self.sequence.delta_t_s = Some(value / a);
            }
            "tau1_s" => seq.tau1_s = Some(value),
            "tau2_s" => seq.tau2_s = Some(value),
            "theta_flip_rad" => seq.theta_flip_rad = Some(value),
            "flip_phase_rad" => seq.flip_phase_rad = Some(value),
            "constant_time_s" => seq.constant_time_s = Some(value),
            "noise_sigma" => match &mut self.deconv {
                Some(d) => d.noise_sigma = value,
                None => return Err(CliError::Config("noise_sigma needs a deconv section".into())),
            },
            other => {
                return Err(CliError::Config(format!(
                    "unknown sweep parameter {other:?}; expected one of {}",
                    SWEEP_PARAMETERS.join(", ")
                )))
            }
        }
        self.validate()
    }
}
