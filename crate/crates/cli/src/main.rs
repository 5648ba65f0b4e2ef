use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use homodecouple_cli::commands::{self, SpectrumArgs};
use homodecouple_cli::{CliError, CliResult, ExperimentConfig, Format, Output};

#[derive(Parser)]
#[command(name = "homodecouple", version, about = "Two-spin homonuclear decoupling experiments")]
struct Cli {
    /// Output directory (overrides output.directory in the config)
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Output format (overrides output.formats in the config)
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,

    /// Seed for added noise; recorded in run.json
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Experiment config (JSON)
    #[arg(long)]
    config: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Acquire a FID for the configured system and sequence
    Simulate(ConfigArg),
    /// Fourier transform a FID file and pick peaks
    Spectrum {
        #[arg(long)]
        fid: PathBuf,
        /// Truncation time in seconds (default: whole record)
        #[arg(long)]
        truncate_at: Option<f64>,
        #[arg(long)]
        zero_fill: Option<usize>,
        /// Exponential line broadening in Hz
        #[arg(long, default_value_t = 0.0)]
        line_broadening: f64,
        /// Multiply the axis by 2/θ
        #[arg(long)]
        rescale_axis: bool,
        /// Peak threshold relative to the largest magnitude
        #[arg(long, default_value_t = 0.1)]
        threshold: f64,
    },
    /// Fit the beat envelope of a FID file
    Analyze {
        #[arg(long)]
        fid: PathBuf,
        /// Number of carrier frequencies in the model
        #[arg(long, default_value_t = 2)]
        lines: usize,
    },
    /// Compare the expansion and numeric effective Hamiltonians
    Effham(ConfigArg),
    /// Tabulate effective-Hamiltonian observables over one parameter
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Parameter name, e.g. theta, delta_t_s, j_hz
        #[arg(long)]
        param: String,
        /// start:stop:n, inclusive
        #[arg(long, conflicts_with = "values", required_unless_present = "values")]
        range: Option<String>,
        /// Comma-separated explicit values
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
    },
    /// Deconvolve an rf-inhomogeneous decoupled spectrum
    Deconv(ConfigArg),
}

fn run(cli: Cli) -> CliResult<()> {
    let load = |path: &PathBuf| -> CliResult<(ExperimentConfig, Output)> {
        let cfg = ExperimentConfig::load(path)?;
        let out = Output::resolve(cli.out.clone(), cli.format, cli.seed, Some(&cfg));
        Ok((cfg, out))
    };
    let bare = || Output::resolve(cli.out.clone(), cli.format, cli.seed, None);
    match &cli.command {
        Command::Simulate(a) => {
            let (cfg, out) = load(&a.config)?;
            let (fid, summary) = commands::simulate(&cfg, &out)?;
            if let Some(theta) = summary.theta {
                println!("theta = {theta}");
            }
            if let Some(block) = summary.block_duration_s {
                println!("block duration = {block} s");
            }
            let ny = &summary.nyquist;
            println!(
                "sample rate {:.3} Hz, highest expected line {:.3} Hz: {}",
                ny.sample_rate_hz,
                ny.max_expected_hz,
                if ny.adequate { "adequate" } else { "ALIASED" }
            );
            println!("{} samples, dwell {} s -> {}", fid.len(), fid.dwell, out.directory.display());
        }
        Command::Spectrum { fid, truncate_at, zero_fill, line_broadening, rescale_axis, threshold } => {
            let out = bare();
            let args = SpectrumArgs {
                truncate_at: *truncate_at,
                zero_fill: *zero_fill,
                line_broadening: *line_broadening,
                rescale_axis: *rescale_axis,
                threshold: *threshold,
            };
            let (spec, peaks) = commands::spectrum(&commands::read_fid(fid)?, &args, &out)?;
            println!("{} points, spacing {} Hz, {} peaks", spec.frequencies_hz.len(), spec.spacing(), peaks.len());
            for p in &peaks {
                println!("  {:.4} Hz  height {:.4}  width {:.4} Hz", p.frequency_hz, p.height, p.width_hz);
            }
        }
        Command::Analyze { fid, lines } => {
            let out = bare();
            let report = commands::analyze(&commands::read_fid(fid)?, *lines, &out)?;
            println!(
                "envelope {:.6} Hz, lifetime {:.3} s, fit residual {:.3}{}",
                report.envelope.envelope_frequency,
                report.lifetime_s,
                report.envelope.fit_residual,
                if report.resolved { "" } else { " (below resolution floor)" }
            );
            if let Some(j) = report.predicted_residual_coupling_hz {
                println!("residual coupling from the effective Hamiltonian {j:.6} Hz");
            }
        }
        Command::Effham(a) => {
            let (cfg, out) = load(&a.config)?;
            let report = commands::effham(&cfg, &out)?;
            for (name, value) in report.observables() {
                println!("{name} = {value}");
            }
        }
        Command::Sweep { config, param, range, values } => {
            let (cfg, out) = load(config)?;
            let values = match (range, values) {
                (Some(r), _) => commands::parse_range(r)?,
                (None, Some(v)) => v.clone(),
                (None, None) => return Err(CliError::Config("give --range or --values".into())),
            };
            let points = commands::sweep(&cfg, param, &values, &out)?;
            println!("{} points -> {}", points.len(), out.directory.display());
        }
        Command::Deconv(a) => {
            let (cfg, out) = load(&a.config)?;
            let (_, result) = commands::deconv(&cfg, &out)?;
            println!(
                "condition {:.3e}, noise {:.3e}, {} significant lines",
                result.report.condition_number,
                result.report.noise_estimate,
                result.significant.len()
            );
            for l in &result.significant {
                println!("  {:.4} Hz  amplitude {:.4} ± {:.4}", l.frequency_hz, l.amplitude, l.amplitude_stderr);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
