//! Batch front-end for the lattice wave-packet echo simulator.

mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use config::RunConfig;
use lattice_echo::analysis::{self};
use lattice_echo::dynamics::set_worker_count;
use lattice_echo::experiment::{self};
use lattice_echo::lattice::DerivedScales;
use lattice_echo::spectral;
use lattice_echo::Error as CoreError;
use output::{Emitter, FitReport};

#[derive(Parser)]
#[command(
    name = "lattice-echo",
    version,
    about = "Wave-packet echo simulator for atoms in a 1D optical lattice"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML configuration file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args, Default)]
struct Overrides {
    /// Lattice depth U0 in recoil energies.
    #[arg(long, global = true)]
    depth: Option<f64>,
    /// Detuning in linewidths (negative = red).
    #[arg(long, global = true)]
    detuning: Option<f64>,
    /// Lattice shift dz as a fraction of the wavelength.
    #[arg(long, global = true)]
    dz: Option<f64>,
    /// Relative 1-sigma depth spread across the ensemble.
    #[arg(long, global = true)]
    depth_spread: Option<f64>,
    /// 1/e shift ramp time in microseconds (0 = sudden).
    #[arg(long, global = true)]
    shift_ramp_us: Option<f64>,
    /// Spatial grid points (power of two).
    #[arg(long, global = true)]
    grid_points: Option<usize>,
    /// Number of lattice wells in the periodic domain.
    #[arg(long, global = true)]
    wells: Option<usize>,
    /// Integrator step in nanoseconds.
    #[arg(long, global = true)]
    dt_ns: Option<f64>,
    /// Initial state: ground | thermal.
    #[arg(long, global = true)]
    initial: Option<String>,
    /// Thermal temperature in recoil energies (omit for the lambda/18 match).
    #[arg(long, global = true)]
    temperature_er: Option<f64>,
    /// Echo delay in microseconds.
    #[arg(long, global = true)]
    delta_t: Option<f64>,
    /// Reference delay in microseconds.
    #[arg(long, global = true)]
    delta_t_ref: Option<f64>,
    /// Recording window length in microseconds.
    #[arg(long, global = true)]
    record_end: Option<f64>,
    /// Output clock interval in microseconds.
    #[arg(long, global = true)]
    output_dt: Option<f64>,
    /// Scattering rate multiplier (1 = physical, 0.001 = suppressed).
    #[arg(long, global = true)]
    scattering_scale: Option<f64>,
    /// Recoil model: absorption-emission | emission-only.
    #[arg(long, global = true)]
    recoil: Option<String>,
    /// Jump rate mode: weighted | uniform.
    #[arg(long, global = true)]
    rate_mode: Option<String>,
    /// Scattering scale of the reference run (omit: same as signal).
    #[arg(long, global = true)]
    reference_scale: Option<f64>,
    /// Trajectories per ensemble.
    #[arg(long, global = true)]
    n_traj: Option<usize>,
    /// Base seed; trajectory i uses base_seed xor i.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = available parallelism).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Disable normalization to the first oscillation maximum.
    #[arg(long, global = true)]
    no_normalize: bool,
    /// Observable: redistribution | mean-position.
    #[arg(long, global = true)]
    observable: Option<String>,
    /// Output directory.
    #[arg(long, global = true)]
    outdir: Option<PathBuf>,
    /// Also emit a gnuplot script referencing the CSV outputs.
    #[arg(long, global = true)]
    gnuplot_script: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Single-shift run: oscillation trace plus period and decay fits.
    Oscillate,
    /// Two-shift echo run with its long-delay reference.
    Echo,
    /// Scan the echo delay or the lattice detuning.
    Scan {
        /// Comma-separated echo delays in microseconds.
        #[arg(long, value_delimiter = ',')]
        delta_t_list: Option<Vec<f64>>,
        /// Comma-separated detunings in linewidths (negative).
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        detuning_list: Option<Vec<f64>>,
    },
    /// Eigenvalue table of the lattice well.
    Spectrum,
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are not errors.
            if e.use_stderr() {
                eprintln!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };

    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

/// 1 for configuration/usage problems, 2 for numeric or run failures.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<CoreError>() {
        Some(CoreError::Numeric(_) | CoreError::Run(_)) => 2,
        Some(_) => 1,
        None => 1,
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    cfg.apply_env();
    apply_overrides(&mut cfg, &cli.overrides);
    set_worker_count(cfg.run.workers)?;

    match &cli.command {
        Command::Oscillate => cmd_oscillate(&cfg, cli.overrides.gnuplot_script),
        Command::Echo => cmd_echo(&cfg, cli.overrides.gnuplot_script),
        Command::Scan {
            delta_t_list,
            detuning_list,
        } => cmd_scan(
            &cfg,
            delta_t_list.as_deref(),
            detuning_list.as_deref(),
            cli.overrides.gnuplot_script,
        ),
        Command::Spectrum => cmd_spectrum(&cfg, cli.overrides.gnuplot_script),
    }
}

fn apply_overrides(cfg: &mut RunConfig, o: &Overrides) {
    macro_rules! set {
        ($field:expr, $value:expr) => {
            if let Some(v) = &$value {
                $field = v.clone();
            }
        };
    }
    set!(cfg.lattice.depth_er, o.depth);
    set!(cfg.lattice.detuning_gamma, o.detuning);
    set!(cfg.lattice.dz_lambda, o.dz);
    set!(cfg.lattice.depth_spread, o.depth_spread);
    set!(cfg.lattice.shift_ramp_us, o.shift_ramp_us);
    set!(cfg.grid.points, o.grid_points);
    set!(cfg.grid.wells, o.wells);
    set!(cfg.grid.dt_ns, o.dt_ns);
    set!(cfg.initial.kind, o.initial);
    if o.temperature_er.is_some() {
        cfg.initial.temperature_er = o.temperature_er;
    }
    set!(cfg.protocol.delta_t_us, o.delta_t);
    set!(cfg.protocol.delta_t_ref_us, o.delta_t_ref);
    set!(cfg.protocol.record_end_us, o.record_end);
    set!(cfg.protocol.output_dt_us, o.output_dt);
    set!(cfg.scattering.scale, o.scattering_scale);
    set!(cfg.scattering.recoil, o.recoil);
    set!(cfg.scattering.rate_mode, o.rate_mode);
    if o.reference_scale.is_some() {
        cfg.scattering.reference_scale = o.reference_scale;
    }
    set!(cfg.run.n_traj, o.n_traj);
    set!(cfg.run.base_seed, o.seed);
    set!(cfg.run.workers, o.workers);
    if o.no_normalize {
        cfg.run.normalize = false;
    }
    set!(cfg.run.observable, o.observable);
    set!(cfg.output.dir, o.outdir);
}

#[derive(Serialize)]
struct OscillateReport {
    status: String,
    scale: f64,
    mean_jumps_per_trajectory: f64,
    period: Option<FitReport>,
    decay: Option<FitReport>,
}

fn cmd_oscillate(cfg: &RunConfig, gnuplot: bool) -> anyhow::Result<()> {
    let exp = cfg.experiment()?;
    let mut emitter = Emitter::new("oscillate", cfg)?;
    let result = experiment::run_oscillation(&exp)?;
    emitter.write_trace_csv("oscillate_signal.csv", &result.trace, &[])?;

    // Period and damped-oscillation fits; analysis failures are results,
    // not crashes.
    let report = match analysis::oscillation_period(&result.trace) {
        Ok((period, sigma)) => {
            let decay = analysis::fit_damped_oscillation(&result.trace)?;
            OscillateReport {
                status: "ok".into(),
                scale: result.scale,
                mean_jumps_per_trajectory: result.jumps.mean_per_trajectory,
                period: Some(FitReport {
                    status: "ok".into(),
                    converged: true,
                    suspicious: false,
                    residual_rms: 0.0,
                    parameters: vec![
                        output::FitParam {
                            name: "period".into(),
                            value: period,
                            sigma,
                        },
                    ],
                }),
                decay: Some(FitReport::from_fit(&decay)),
            }
        }
        Err(CoreError::Analysis(msg)) => OscillateReport {
            status: format!("analysis error: {msg}"),
            scale: result.scale,
            mean_jumps_per_trajectory: result.jumps.mean_per_trajectory,
            period: None,
            decay: None,
        },
        Err(e) => return Err(e.into()),
    };
    emitter.write_json("oscillate_fit.json", &report)?;
    if gnuplot {
        emitter.write_gnuplot("plot.gp")?;
    }
    emitter.finish(cfg.run.base_seed)?;
    Ok(())
}

#[derive(Serialize)]
struct EchoReport {
    status: String,
    delta_t_us: f64,
    peak_time_us: f64,
    amplitude: f64,
    amplitude_stderr: f64,
    scale: f64,
    signal_jumps_per_trajectory: f64,
    reference_jumps_per_trajectory: f64,
    warnings: Vec<String>,
}

fn cmd_echo(cfg: &RunConfig, gnuplot: bool) -> anyhow::Result<()> {
    let exp = cfg.experiment()?;
    let mut emitter = Emitter::new("echo", cfg)?;
    let delta_t = cfg.protocol.delta_t_us * 1e-6;
    let result = experiment::run_echo(delta_t, &exp)?;
    emitter.warnings = result.warnings.clone();

    emitter.write_trace_csv(
        "echo_curves.csv",
        &result.signal_trace,
        &[
            (
                "reference_mean",
                "dimensionless",
                result.reference_trace.values(),
            ),
            ("echo_curve", "dimensionless", result.echo_curve.values()),
        ],
    )?;

    let scales = DerivedScales::new(&exp.params, &exp.species)?;
    let report = match analysis::measure_echo(&result.echo_curve, scales.osc_frequency, delta_t)
    {
        Ok(m) => EchoReport {
            status: "ok".into(),
            delta_t_us: cfg.protocol.delta_t_us,
            peak_time_us: m.peak_time * 1e6,
            amplitude: m.amplitude,
            amplitude_stderr: m.amplitude_stderr,
            scale: result.scale,
            signal_jumps_per_trajectory: result.signal_jumps.mean_per_trajectory,
            reference_jumps_per_trajectory: result.reference_jumps.mean_per_trajectory,
            warnings: result.warnings.clone(),
        },
        Err(CoreError::Usage(msg)) | Err(CoreError::Analysis(msg)) => EchoReport {
            status: format!("analysis error: {msg}"),
            delta_t_us: cfg.protocol.delta_t_us,
            peak_time_us: f64::NAN,
            amplitude: f64::NAN,
            amplitude_stderr: f64::NAN,
            scale: result.scale,
            signal_jumps_per_trajectory: result.signal_jumps.mean_per_trajectory,
            reference_jumps_per_trajectory: result.reference_jumps.mean_per_trajectory,
            warnings: result.warnings.clone(),
        },
        Err(e) => return Err(e.into()),
    };
    emitter.write_json("echo_measurement.json", &report)?;
    if gnuplot {
        emitter.write_gnuplot("plot.gp")?;
    }
    emitter.finish(cfg.run.base_seed)?;
    Ok(())
}

fn cmd_scan(
    cfg: &RunConfig,
    delta_t_list: Option<&[f64]>,
    detuning_list: Option<&[f64]>,
    gnuplot: bool,
) -> anyhow::Result<()> {
    match (delta_t_list, detuning_list) {
        (Some(dts), None) => cmd_scan_delays(cfg, dts, gnuplot),
        (None, Some(dets)) => cmd_scan_detuning(cfg, dets, gnuplot),
        _ => Err(CoreError::config(
            "scan needs exactly one of --delta-t-list or --detuning-list",
        )
        .into()),
    }
}

fn cmd_scan_delays(cfg: &RunConfig, delta_ts_us: &[f64], gnuplot: bool) -> anyhow::Result<()> {
    let exp = cfg.experiment()?;
    let mut emitter = Emitter::new("scan", cfg)?;
    let delta_ts: Vec<f64> = delta_ts_us.iter().map(|d| d * 1e-6).collect();
    let scan = experiment::scan_delays(&delta_ts, &exp)?;

    let mut col_dt = Vec::new();
    let mut col_2dt = Vec::new();
    let mut col_peak = Vec::new();
    let mut col_amp = Vec::new();
    let mut col_err = Vec::new();
    for point in &scan.points {
        let name = format!("scan_dt_{:05.1}us.csv", point.delta_t * 1e6);
        if let Some(result) = &point.result {
            emitter.write_trace_csv(
                &name,
                &result.signal_trace,
                &[
                    (
                        "reference_mean",
                        "dimensionless",
                        result.reference_trace.values(),
                    ),
                    ("echo_curve", "dimensionless", result.echo_curve.values()),
                ],
            )?;
        }
        col_dt.push(point.delta_t * 1e6);
        col_2dt.push(2.0 * point.delta_t * 1e6);
        match &point.measurement {
            Some(m) => {
                col_peak.push(m.peak_time * 1e6);
                col_amp.push(m.amplitude);
                col_err.push(m.amplitude_stderr);
            }
            None => {
                emitter.warnings.push(format!(
                    "scan point at {:.1} us: {}",
                    point.delta_t * 1e6,
                    point.status
                ));
                col_peak.push(f64::NAN);
                col_amp.push(f64::NAN);
                col_err.push(f64::NAN);
            }
        }
    }
    emitter.write_csv(
        "scan_summary.csv",
        &[
            ("delta_t", "us", &col_dt),
            ("echo_time_2dt", "us", &col_2dt),
            ("peak_time", "us", &col_peak),
            ("amplitude", "dimensionless", &col_amp),
            ("amplitude_stderr", "dimensionless", &col_err),
        ],
    )?;

    let fit_report = match scan.coherence_fit() {
        Ok(fit) => FitReport::from_fit(&fit),
        Err(e) => FitReport::failed(e.to_string()),
    };
    emitter.write_json("scan_fit.json", &fit_report)?;
    if gnuplot {
        emitter.write_gnuplot("plot.gp")?;
    }
    emitter.finish(cfg.run.base_seed)?;
    Ok(())
}

fn cmd_scan_detuning(cfg: &RunConfig, detunings: &[f64], gnuplot: bool) -> anyhow::Result<()> {
    let exp = cfg.experiment()?;
    let mut emitter = Emitter::new("scan", cfg)?;
    // Delay grid for the per-detuning coherence fits.
    let delta_ts: Vec<f64> = vec![16e-6, 24e-6, 32e-6, 40e-6];
    let points = experiment::scan_detuning(detunings, &delta_ts, &exp)?;

    let mut col_det = Vec::new();
    let mut col_tausc = Vec::new();
    let mut col_tau2 = Vec::new();
    let mut col_sigma = Vec::new();
    let mut col_ratio = Vec::new();
    for p in &points {
        if !p.fit_converged {
            emitter
                .warnings
                .push(format!("detuning {}: {}", p.detuning_gamma, p.status));
        }
        col_det.push(p.detuning_gamma);
        col_tausc.push(p.tau_sc * 1e6);
        col_tau2.push(p.tau2.map_or(f64::NAN, |t| t * 1e6));
        col_sigma.push(p.tau2_sigma.map_or(f64::NAN, |t| t * 1e6));
        col_ratio.push(p.ratio.unwrap_or(f64::NAN));
    }
    emitter.write_csv(
        "detuning_summary.csv",
        &[
            ("detuning", "Gamma", &col_det),
            ("tau_sc", "us", &col_tausc),
            ("tau2", "us", &col_tau2),
            ("tau2_sigma", "us", &col_sigma),
            ("tau2_over_tau_sc", "dimensionless", &col_ratio),
        ],
    )?;
    #[derive(Serialize)]
    struct DetuningReport {
        status: String,
        ratios: Vec<f64>,
        mean_ratio: f64,
    }
    let ratios: Vec<f64> = points.iter().filter_map(|p| p.ratio).collect();
    let mean_ratio = if ratios.is_empty() {
        f64::NAN
    } else {
        ratios.iter().sum::<f64>() / ratios.len() as f64
    };
    emitter.write_json(
        "detuning_fit.json",
        &DetuningReport {
            status: if ratios.len() == points.len() {
                "ok".into()
            } else {
                "some points failed".into()
            },
            ratios,
            mean_ratio,
        },
    )?;
    if gnuplot {
        emitter.write_gnuplot("plot.gp")?;
    }
    emitter.finish(cfg.run.base_seed)?;
    Ok(())
}

fn cmd_spectrum(cfg: &RunConfig, gnuplot: bool) -> anyhow::Result<()> {
    let exp = cfg.experiment()?;
    let mut emitter = Emitter::new("spectrum", cfg)?;
    let sys = spectral::solve_eigensystem_default(&exp.params, 0.0, &exp.grid, &exp.species)?;
    let er = exp.species.recoil_energy();
    let n: Vec<f64> = (0..sys.len()).map(|i| i as f64).collect();
    let energy_er: Vec<f64> = sys.energies().iter().map(|e| e / er).collect();
    let gap_wr: Vec<f64> = sys
        .energies()
        .iter()
        .enumerate()
        .map(|(i, e)| {
            if i == 0 {
                0.0
            } else {
                (e - sys.energies()[i - 1]) / er
            }
        })
        .collect();
    emitter.write_csv(
        "spectrum.csv",
        &[
            ("n", "index", &n),
            ("energy", "E_R", &energy_er),
            ("gap", "omega_R", &gap_wr),
        ],
    )?;
    if gnuplot {
        emitter.write_gnuplot("plot.gp")?;
    }
    emitter.finish(cfg.run.base_seed)?;
    Ok(())
}
