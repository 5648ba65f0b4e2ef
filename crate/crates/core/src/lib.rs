//! Two-spin simulation of homonuclear decoupling by short rf segments
//! interleaved with π pulses.
//!
//! Modules build on each other bottom-up:
//! [`spin`] (operators and propagators) → [`sequence`] (pulse sequences) →
//! [`effham`] (effective Hamiltonians) and [`acquisition`] (FIDs, spectra,
//! envelope fits) → [`deconv`] (rf-inhomogeneity deconvolution).

pub mod error;
pub mod spin;
pub mod sequence;
pub mod effham;
pub mod acquisition;
pub mod deconv;

pub use acquisition::{
    acquire, acquire_constant_time, find_peaks, fit_envelope, spectrum, spectrum_with, EnvelopeFit, Evolution, Fid,
    FidMetadata, Peak, Spectrum, SpectrumOptions,
};
pub use deconv::{
    calibrate_psf, deconvolve, deconvolve_with, simulate_rf_ensemble, BlurredSpectrum, Constraint,
    DeconvolutionReport, EnsembleAcquisition, LineEstimate, PointSpreadFunction,
};
pub use effham::{
    bch_effective, isotropic_effective, numeric_effective, scan_isotropic_schedule, tilt_analysis,
    EffectiveHamiltonian, EffectiveSource, TiltAnalysis,
};
pub use error::{Error, Result};
pub use sequence::{
    build_constant_time_t1, build_decoupling_block, build_decoupling_block_with, build_isotropic_block,
    build_isotropic_schedule, compile, Element, InstantPulse, IsotropicTiming, PiPulse, PulseSequence, Segment,
    SequenceKind,
};
pub use spin::{
    expect, evolve, hamiltonian, product_basis, propagate, rotation, Axis, CouplingKind, ProductOperatorDecomposition,
    Sign, SpinSystem, TwoSpinOperator, BASIS_LABELS,
};
