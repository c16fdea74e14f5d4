//! The measurement protocols: initial-state preparation, pump and echo
//! shifts, reference runs, echo-curve construction, delay scans and detuning
//! scans.
//!
//! Timeline of an echo run: the state is prepared in the unshifted lattice
//! at t = −Δt, the lattice jumps to the shifted position at t = −Δt (pump),
//! back to the origin at t = 0 (echo shift), and the observable is recorded
//! on [0, t_record_end]. The reference run is identical with a delay long
//! enough that coherence is gone before the second shift; the echo curve is
//! the pointwise difference of the two on their shared clock.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::analysis::{self, EchoMeasurement, FitResult, SignalTrace};
use crate::dynamics::{
    run_ensemble, EnsembleOptions, EnsembleResult, JumpSettings, JumpStats,
};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::lattice::{self, AtomSpecies, DerivedScales, LatticeParams};
use crate::spectral::{self, EigenSystem};
use crate::wavefunction::WaveFunction;

/// A lattice translation at a point in time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShiftEvent {
    /// Event time (s).
    pub time: f64,
    /// New potential offset (m), in [0, λ/4).
    pub offset: f64,
}

/// Timeline of lattice translations and the recording window.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftProtocol {
    pub events: Vec<ShiftEvent>,
    pub t_record_start: f64,
    pub t_record_end: f64,
    /// Sampling interval of the output clock (s).
    pub output_dt: f64,
    /// Offset before the first event (m).
    pub initial_offset: f64,
}

impl ShiftProtocol {
    /// Two-shift echo timeline: 0 → dz at −Δt, dz → 0 at 0, recording on
    /// [0, t_record_end].
    pub fn echo(delta_t: f64, dz: f64, t_record_end: f64, output_dt: f64) -> Self {
        Self {
            events: vec![
                ShiftEvent {
                    time: -delta_t,
                    offset: dz,
                },
                ShiftEvent {
                    time: 0.0,
                    offset: 0.0,
                },
            ],
            t_record_start: 0.0,
            t_record_end,
            output_dt,
            initial_offset: 0.0,
        }
    }

    /// Single pump shift at t = 0, recording the subsequent oscillation.
    pub fn single_shift(dz: f64, t_record_end: f64, output_dt: f64) -> Self {
        Self {
            events: vec![ShiftEvent {
                time: 0.0,
                offset: dz,
            }],
            t_record_start: 0.0,
            t_record_end,
            output_dt,
            initial_offset: 0.0,
        }
    }

    /// Earliest simulated time.
    pub fn start_time(&self) -> f64 {
        self.events
            .first()
            .map(|e| e.time)
            .unwrap_or(self.t_record_start)
            .min(self.t_record_start)
    }

    /// Potential offset after the last event (the observable is centered
    /// here).
    pub fn final_offset(&self) -> f64 {
        self.events
            .last()
            .map(|e| e.offset)
            .unwrap_or(self.initial_offset)
    }

    pub fn validate(&self, species: &AtomSpecies) -> Result<()> {
        let quarter = species.wavelength / 4.0;
        for w in self.events.windows(2) {
            if w[1].time <= w[0].time {
                return Err(Error::config("shift events must be strictly increasing in time"));
            }
        }
        for e in &self.events {
            if !(e.offset >= 0.0 && e.offset < quarter) {
                return Err(Error::config(format!(
                    "shift offset {:.3e} m outside [0, lambda/4)",
                    e.offset
                )));
            }
        }
        if !(self.t_record_end > self.t_record_start) {
            return Err(Error::config("recording window is empty"));
        }
        if let Some(last) = self.events.last() {
            if last.time > self.t_record_end {
                return Err(Error::config(
                    "recording window must cover the last shift event",
                ));
            }
        }
        if !(self.output_dt > 0.0) {
            return Err(Error::config("output interval must be positive"));
        }
        Ok(())
    }
}

/// Initial motional state of the trajectories.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitialStateSpec {
    /// Band-0 eigenstate of a well.
    Ground,
    /// Boltzmann mixture over well eigenstates, realized by per-trajectory
    /// eigenstate sampling.
    Thermal {
        /// k_B T in recoil energies.
        temperature_er: f64,
    },
}

/// Position spread of lattice-cooled atoms, z_rms = λ/18.
pub const LOCALIZED_SPREAD_LAMBDA: f64 = 1.0 / 18.0;

/// Deep-well estimate of the temperature whose thermal spread is λ/18,
/// k_B T ≈ 2(2π/18)² U₀; seed for [`thermal_temperature_for_spread`].
pub fn thermal_auto_temperature_er(depth_er: f64) -> f64 {
    let x = std::f64::consts::TAU / 18.0;
    2.0 * x * x * depth_er
}

/// Temperature (in E_R) at which the Boltzmann mixture over the given
/// eigensystem has the target position spread (in λ units). Bisected on the
/// monotone spread(T) relation.
pub fn thermal_temperature_for_spread(
    eigensystem: &EigenSystem,
    target_spread_lambda: f64,
) -> Result<f64> {
    let lambda = eigensystem.grid().wavelength();
    let target_sq = (target_spread_lambda * lambda).powi(2);
    let er = eigensystem.species_recoil_energy();
    let spreads_sq: Vec<f64> = eigensystem
        .states()
        .iter()
        .map(|s| s.position_spread_folded(0.0).powi(2))
        .collect();
    let spread_sq = |t_er: f64| -> f64 {
        let kt = t_er * er;
        let e0 = eigensystem.energies()[0];
        let mut total = 0.0;
        let mut acc = 0.0;
        for (&e, &s2) in eigensystem.energies().iter().zip(&spreads_sq) {
            let w = (-(e - e0) / kt).exp();
            total += w;
            acc += w * s2;
        }
        acc / total
    };
    if spreads_sq[0] >= target_sq {
        return Err(Error::config(
            "target spread is below the ground-state spread; no thermal \
             temperature reproduces it",
        ));
    }
    let mut lo = 1e-6;
    let mut hi = thermal_auto_temperature_er(eigensystem.depth_er());
    let mut expand = 0;
    while spread_sq(hi) < target_sq {
        hi *= 2.0;
        expand += 1;
        if expand > 12 {
            return Err(Error::config(
                "target spread is not reachable within the retained states",
            ));
        }
    }
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if spread_sq(mid) < target_sq {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Boltzmann sampler over the eigenstates of one well.
#[derive(Debug, Clone)]
pub struct InitialState {
    eigensystem: Arc<EigenSystem>,
    weights: Vec<f64>,
}

impl InitialState {
    /// Normalized Boltzmann weights over the retained eigenstates.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Draw one eigenstate according to the weights. Ground-state
    /// preparations are deterministic and consume no randomness.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> WaveFunction {
        if self.weights[0] == 1.0 {
            return self.eigensystem.state(0).clone();
        }
        let u = rng.random::<f64>();
        let mut acc = 0.0;
        for (n, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return self.eigensystem.state(n).clone();
            }
        }
        self.eigensystem
            .state(self.weights.len() - 1)
            .clone()
    }
}

/// Build the initial-state sampler from an eigensystem of the unshifted
/// potential.
pub fn prepare_initial_state(
    spec: &InitialStateSpec,
    eigensystem: &Arc<EigenSystem>,
) -> Result<InitialState> {
    if eigensystem.potential_shift() != 0.0 {
        return Err(Error::usage(
            "initial states are prepared in the unshifted potential",
        ));
    }
    if eigensystem.is_empty() {
        return Err(Error::usage("eigensystem holds no states"));
    }
    let lambda = eigensystem.grid().wavelength();
    let ground_spread = eigensystem.state(0).position_spread_folded(0.0);
    if ground_spread > lambda / 10.0 {
        return Err(Error::config(format!(
            "ground state spread {:.3e} m exceeds lambda/10; lattice too \
             shallow for a localized preparation",
            ground_spread
        )));
    }

    let mut weights = vec![0.0; eigensystem.len()];
    match spec {
        InitialStateSpec::Ground => weights[0] = 1.0,
        InitialStateSpec::Thermal { temperature_er } => {
            if !(*temperature_er >= 0.0) {
                return Err(Error::config("temperature must be non-negative"));
            }
            if *temperature_er == 0.0 {
                weights[0] = 1.0;
            } else {
                let kt = temperature_er * eigensystem_species_er(eigensystem);
                let e0 = eigensystem.energies()[0];
                let mut total = 0.0;
                for (w, &e) in weights.iter_mut().zip(eigensystem.energies()) {
                    *w = (-(e - e0) / kt).exp();
                    total += *w;
                }
                for w in &mut weights {
                    *w /= total;
                }
                let unbound: f64 = weights
                    .iter()
                    .zip(eigensystem.energies())
                    .filter(|(_, &e)| e >= 0.0)
                    .map(|(w, _)| w)
                    .sum();
                if unbound > 0.20 {
                    return Err(Error::config(format!(
                        "thermal weight in unbound states is {:.0}% (> 20%); \
                         lower the temperature",
                        100.0 * unbound
                    )));
                }
            }
        }
    }
    Ok(InitialState {
        eigensystem: eigensystem.clone(),
        weights,
    })
}

fn eigensystem_species_er(eigensystem: &EigenSystem) -> f64 {
    // The recoil energy is implied by the grid wavelength and the bound
    // energies' scale; carry it through the stored species instead.
    eigensystem.species_recoil_energy()
}

/// Which observable is sampled on the output clock.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObservableKind {
    /// ⟨sin(2k(z − z_offset))⟩, the photon-redistribution proxy.
    Redistribution,
    /// Folded mean position ⟨z − z_offset⟩ in λ units.
    MeanPosition,
}

/// Closure sampling the observable about the given center.
pub fn observable(
    kind: ObservableKind,
    species: &AtomSpecies,
    z_offset: f64,
) -> impl Fn(&WaveFunction) -> f64 + Sync {
    let k = species.wavenumber();
    move |psi: &WaveFunction| match kind {
        ObservableKind::Redistribution => psi.expect_redistribution(k, z_offset),
        ObservableKind::MeanPosition => psi.mean_position_folded(z_offset),
    }
}

/// Everything an echo or oscillation run needs besides the delay.
#[derive(Clone)]
pub struct ExperimentConfig {
    pub species: AtomSpecies,
    pub grid: Arc<Grid>,
    pub params: LatticeParams,
    pub initial: InitialStateSpec,
    pub jumps: JumpSettings,
    /// Scattering scale of the reference run; `None` means the signal's own
    /// scale. The reference must reach complete decoherence before its
    /// second shift, so suppressed-scattering studies pair a suppressed
    /// signal with a physically scattering reference.
    pub reference_scattering_scale: Option<f64>,
    pub n_traj: usize,
    pub base_seed: u64,
    /// Reference delay Δt_ref (s).
    pub delta_t_ref: f64,
    /// Recording window length after the final shift (s).
    pub record_end: f64,
    /// Output clock interval (s).
    pub output_dt: f64,
    pub observable: ObservableKind,
    /// Normalize traces to the maximum of the first oscillation.
    pub normalize: bool,
    pub ensemble: EnsembleOptions,
}

impl ExperimentConfig {
    /// The wave-packet echo configuration of the main measurement:
    /// U₀ = 831 E_R, δ = −7.8 Γ, dz = 0.10 λ, Δt_ref = 108 μs.
    pub fn defaults() -> Self {
        let species = AtomSpecies::rb85();
        let grid = Arc::new(Grid::default_for(&species));
        Self {
            species,
            grid,
            params: LatticeParams::new(831.0, -7.8, 0.10).expect("valid defaults"),
            initial: InitialStateSpec::Ground,
            jumps: JumpSettings::default(),
            reference_scattering_scale: None,
            n_traj: 200,
            base_seed: 1,
            delta_t_ref: 108e-6,
            record_end: 60e-6,
            output_dt: 0.2e-6,
            observable: ObservableKind::Redistribution,
            normalize: true,
            ensemble: EnsembleOptions::default(),
        }
    }

    fn scales(&self) -> Result<DerivedScales> {
        DerivedScales::new(&self.params, &self.species)
    }

    /// Per-trajectory setup closure: draws the trajectory depth when the
    /// ensemble is inhomogeneous and samples the initial eigenstate.
    fn trajectory_setup(
        &self,
    ) -> Result<impl Fn(&mut ChaCha8Rng, usize) -> Result<(LatticeParams, WaveFunction)> + Sync + '_>
    {
        let base = solve_unshifted(&self.params, &self.grid, &self.species)?;
        let base_sampler = prepare_initial_state(&self.initial, &base)?;
        let spread = self.params.depth_spread;
        let depth_dist = if spread > 0.0 {
            Some(
                Normal::new(self.params.depth_er, spread * self.params.depth_er)
                    .map_err(|e| Error::config(format!("bad depth spread: {e}")))?,
            )
        } else {
            None
        };
        Ok(move |rng: &mut ChaCha8Rng, _i: usize| {
            match &depth_dist {
                None => Ok((self.params, base_sampler.sample(rng))),
                Some(dist) => {
                    // Truncated-positive draw of this trajectory's depth.
                    let mut depth = dist.sample(rng);
                    while depth <= 0.0 {
                        depth = dist.sample(rng);
                    }
                    let params = LatticeParams {
                        depth_er: depth,
                        ..self.params
                    };
                    let sys = solve_unshifted(&params, &self.grid, &self.species)?;
                    let sampler = prepare_initial_state(&self.initial, &sys)?;
                    Ok((params, sampler.sample(rng)))
                }
            }
        })
    }
}

fn solve_unshifted(
    params: &LatticeParams,
    grid: &Arc<Grid>,
    species: &AtomSpecies,
) -> Result<Arc<EigenSystem>> {
    Ok(Arc::new(spectral::solve_eigensystem_default(
        params, 0.0, grid, species,
    )?))
}

/// A signal/reference pair with their difference.
#[derive(Debug, Clone)]
pub struct EchoRunResult {
    pub signal_trace: SignalTrace,
    pub reference_trace: SignalTrace,
    /// signal − reference on the shared clock.
    pub echo_curve: SignalTrace,
    pub delta_t: f64,
    pub signal_jumps: JumpStats,
    pub reference_jumps: JumpStats,
    /// Common normalization factor applied to all three traces.
    pub scale: f64,
    pub warnings: Vec<String>,
}

/// An oscillation run (single shift), normalized like the echo runs.
#[derive(Debug, Clone)]
pub struct OscillationResult {
    pub trace: SignalTrace,
    pub jumps: JumpStats,
    pub scale: f64,
}

/// Run the two-shift echo protocol at delay `delta_t` together with its
/// long-delay reference, and form the echo curve.
pub fn run_echo(delta_t: f64, cfg: &ExperimentConfig) -> Result<EchoRunResult> {
    if !(delta_t > 0.0) {
        return Err(Error::config("echo delay must be positive"));
    }
    let mut warnings = Vec::new();
    validate_echo_config(cfg, &mut warnings)?;

    let reference = run_protocol_with_jumps(
        cfg,
        &ShiftProtocol::echo(
            cfg.delta_t_ref,
            cfg.params.shift_m(&cfg.species),
            cfg.record_end,
            cfg.output_dt,
        ),
        &reference_jumps(cfg),
    )?;
    assemble_echo(delta_t, cfg, &reference, warnings)
}

/// Echo run against a precomputed reference (shared across scan points).
fn assemble_echo(
    delta_t: f64,
    cfg: &ExperimentConfig,
    reference: &EnsembleResult,
    warnings: Vec<String>,
) -> Result<EchoRunResult> {
    let signal = run_protocol(
        cfg,
        &ShiftProtocol::echo(
            delta_t,
            cfg.params.shift_m(&cfg.species),
            cfg.record_end,
            cfg.output_dt,
        ),
    )?;

    assert_eq!(
        signal.trace.times(),
        reference.trace.times(),
        "signal and reference must share one clock"
    );

    let scale = if cfg.normalize {
        normalization_scale(&reference.trace, &cfg.scales()?)
    } else {
        1.0
    };
    let signal_trace = signal.trace.scaled(scale);
    let reference_trace = reference.trace.scaled(scale);
    let echo_curve = signal_trace.subtract(&reference_trace)?;

    Ok(EchoRunResult {
        signal_trace,
        reference_trace,
        echo_curve,
        delta_t,
        signal_jumps: signal.jump_stats,
        reference_jumps: reference.jump_stats,
        scale,
        warnings,
    })
}

fn validate_echo_config(cfg: &ExperimentConfig, warnings: &mut Vec<String>) -> Result<()> {
    if cfg.record_end >= cfg.delta_t_ref {
        return Err(Error::config(format!(
            "recording window ({:.1} us) must end before the reference delay \
             ({:.1} us): past it the reference run produces its own echo",
            cfg.record_end * 1e6,
            cfg.delta_t_ref * 1e6
        )));
    }
    if let Ok(scales) = cfg.scales() {
        let tau1 = scales.dephasing_time();
        if cfg.delta_t_ref <= 3.0 * tau1 {
            let w = format!(
                "reference delay {:.1} us is below 3*tau1 = {:.1} us; the \
                 reference may retain coherence",
                cfg.delta_t_ref * 1e6,
                3.0 * tau1 * 1e6
            );
            log::warn!("{w}");
            warnings.push(w);
        }
    }
    Ok(())
}

/// Common normalizer: the maximum absolute signal within the first
/// oscillation period after the final shift.
fn normalization_scale(trace: &SignalTrace, scales: &DerivedScales) -> f64 {
    let period = scales.osc_period();
    let t0 = trace.times()[0];
    let peak = trace
        .times()
        .iter()
        .zip(trace.values())
        .filter(|(&t, _)| t <= t0 + period)
        .map(|(_, v)| v.abs())
        .fold(0.0f64, f64::max);
    if peak > 1e-9 {
        1.0 / peak
    } else {
        1.0
    }
}

fn run_protocol(cfg: &ExperimentConfig, protocol: &ShiftProtocol) -> Result<EnsembleResult> {
    run_protocol_with_jumps(cfg, protocol, &cfg.jumps)
}

fn run_protocol_with_jumps(
    cfg: &ExperimentConfig,
    protocol: &ShiftProtocol,
    jumps: &JumpSettings,
) -> Result<EnsembleResult> {
    protocol.validate(&cfg.species)?;
    let obs = observable(cfg.observable, &cfg.species, protocol.final_offset());
    let setup = cfg.trajectory_setup()?;
    run_ensemble(
        cfg.n_traj,
        cfg.base_seed,
        &cfg.species,
        protocol,
        jumps,
        &obs,
        setup,
        &cfg.ensemble,
    )
}

fn reference_jumps(cfg: &ExperimentConfig) -> JumpSettings {
    JumpSettings {
        scattering_scale: cfg
            .reference_scattering_scale
            .unwrap_or(cfg.jumps.scattering_scale),
        ..cfg.jumps
    }
}

/// Single-shift oscillation run.
pub fn run_oscillation(cfg: &ExperimentConfig) -> Result<OscillationResult> {
    let protocol = ShiftProtocol::single_shift(
        cfg.params.shift_m(&cfg.species),
        cfg.record_end,
        cfg.output_dt,
    );
    let result = run_protocol(cfg, &protocol)?;
    let scale = if cfg.normalize {
        normalization_scale(&result.trace, &cfg.scales()?)
    } else {
        1.0
    };
    Ok(OscillationResult {
        trace: result.trace.scaled(scale),
        jumps: result.jump_stats,
        scale,
    })
}

/// One point of a delay scan. Per-point failures are recorded in `status`
/// and leave the optional fields empty; the scan itself continues.
#[derive(Debug, Clone)]
pub struct DelayScanPoint {
    pub delta_t: f64,
    pub result: Option<EchoRunResult>,
    pub measurement: Option<EchoMeasurement>,
    pub status: String,
}

/// Echo runs over a list of delays sharing one reference run.
#[derive(Debug, Clone)]
pub struct DelayScan {
    pub points: Vec<DelayScanPoint>,
}

impl DelayScan {
    /// (2Δt, amplitude, stderr) triples for the coherence fit, from the
    /// points that produced a measurement.
    pub fn amplitude_series(&self) -> Vec<(f64, f64, Option<f64>)> {
        self.points
            .iter()
            .filter_map(|p| {
                p.measurement.map(|m| {
                    (
                        2.0 * p.delta_t,
                        m.amplitude,
                        Some(m.amplitude_stderr).filter(|s| *s > 0.0),
                    )
                })
            })
            .collect()
    }

    /// Fit A₀ e^{−2Δt/τ₂} to the echo amplitudes.
    pub fn coherence_fit(&self) -> Result<FitResult> {
        analysis::fit_coherence_time(&self.amplitude_series())
    }
}

/// Scan the echo delay. All points share the reference run and the seed
/// derivation, so amplitude comparisons use common random numbers.
pub fn scan_delays(delta_ts: &[f64], cfg: &ExperimentConfig) -> Result<DelayScan> {
    if delta_ts.is_empty() {
        return Err(Error::config("delay scan needs at least one delay"));
    }
    for w in delta_ts.windows(2) {
        if w[1] <= w[0] {
            return Err(Error::config("delays must be strictly ascending"));
        }
    }
    let mut warnings = Vec::new();
    validate_echo_config(cfg, &mut warnings)?;
    let scales = cfg.scales()?;

    let reference = run_protocol_with_jumps(
        cfg,
        &ShiftProtocol::echo(
            cfg.delta_t_ref,
            cfg.params.shift_m(&cfg.species),
            cfg.record_end,
            cfg.output_dt,
        ),
        &reference_jumps(cfg),
    )?;

    let mut points = Vec::with_capacity(delta_ts.len());
    for &delta_t in delta_ts {
        let point = match assemble_echo(delta_t, cfg, &reference, warnings.clone()) {
            Ok(result) => {
                match analysis::measure_echo(&result.echo_curve, scales.osc_frequency, delta_t)
                {
                    Ok(measurement) => DelayScanPoint {
                        delta_t,
                        result: Some(result),
                        measurement: Some(measurement),
                        status: "ok".into(),
                    },
                    Err(e) => DelayScanPoint {
                        delta_t,
                        result: Some(result),
                        measurement: None,
                        status: e.to_string(),
                    },
                }
            }
            // Configuration and usage errors poison the whole scan; run
            // and numeric failures are recorded per point.
            Err(e @ (Error::Config(_) | Error::Usage(_))) => return Err(e),
            Err(e) => DelayScanPoint {
                delta_t,
                result: None,
                measurement: None,
                status: e.to_string(),
            },
        };
        points.push(point);
    }
    Ok(DelayScan { points })
}

/// One point of a matched-filter amplitude scan.
#[derive(Debug, Clone)]
pub struct MatchedEchoPoint {
    pub delta_t: f64,
    /// Matched-filter amplitude in units of the template echo amplitude.
    pub amplitude: f64,
    /// Jackknife standard error over trajectory blocks.
    pub stderr: f64,
}

/// Echo amplitudes over a delay scan, extracted by projecting the raw
/// signal traces onto a suppressed-scattering template.
#[derive(Debug, Clone)]
pub struct EchoAmplitudeScan {
    pub template_delta_t: f64,
    /// Raw mean trace of the suppressed template run.
    pub template_trace: SignalTrace,
    pub points: Vec<MatchedEchoPoint>,
}

impl EchoAmplitudeScan {
    pub fn amplitude_series(&self) -> Vec<(f64, f64, Option<f64>)> {
        self.points
            .iter()
            .map(|p| {
                (
                    2.0 * p.delta_t,
                    p.amplitude,
                    Some(p.stderr).filter(|s| *s > 0.0),
                )
            })
            .collect()
    }

    pub fn coherence_fit(&self) -> Result<FitResult> {
        analysis::fit_coherence_time(&self.amplitude_series())
    }
}

/// Number of jackknife blocks for matched-amplitude errors.
const JACKKNIFE_BLOCKS: usize = 16;

/// Run only the signal half of an echo protocol (no reference run).
pub fn run_echo_signal(delta_t: f64, cfg: &ExperimentConfig) -> Result<EnsembleResult> {
    run_protocol(
        cfg,
        &ShiftProtocol::echo(
            delta_t,
            cfg.params.shift_m(&cfg.species),
            cfg.record_end,
            cfg.output_dt,
        ),
    )
}

/// Scan the echo delay with reference-free matched-filter amplitudes.
///
/// A template signal is recorded at `template_delta_t` with the scattering
/// scale cut by 1000 on an independent seed stream; each scan point's raw
/// mean signal trace is projected onto the time-shifted template baseband in
/// a window around its expected echo. The window excludes the pump
/// transient for delays beyond roughly three dephasing times, and because
/// no reference is subtracted the estimator is linear in the data with no
/// rectification floor; uncertainties come from a leave-block-out jackknife
/// over trajectories.
pub fn scan_echo_amplitudes(
    delta_ts: &[f64],
    cfg: &ExperimentConfig,
    template_delta_t: f64,
) -> Result<EchoAmplitudeScan> {
    if delta_ts.is_empty() {
        return Err(Error::config("delay scan needs at least one delay"));
    }
    let scales = cfg.scales()?;
    let omega = scales.osc_frequency;

    let mut template_cfg = cfg.clone();
    template_cfg.base_seed = cfg.base_seed ^ 0x9E37_79B9_7F4A_7C15;
    template_cfg.jumps.scattering_scale = cfg.jumps.scattering_scale * 1e-3;
    let template = run_echo_signal(template_delta_t, &template_cfg)?;

    let mut points = Vec::with_capacity(delta_ts.len());
    for &delta_t in delta_ts {
        let signal = run_echo_signal(delta_t, cfg)?;
        let amplitude = analysis::matched_echo_amplitude(
            &signal.trace,
            &template.trace,
            omega,
            template_delta_t,
            delta_t,
        )?;
        let blocks = JACKKNIFE_BLOCKS.min(signal.trajectories.len()).max(2);
        let mut replicates = Vec::with_capacity(blocks);
        for b in 0..blocks {
            let sig = partial_mean_trace(&signal.trajectories, |i| i % blocks != b)?;
            replicates.push(analysis::matched_echo_amplitude(
                &sig,
                &template.trace,
                omega,
                template_delta_t,
                delta_t,
            )?);
        }
        let mean = replicates.iter().sum::<f64>() / blocks as f64;
        let var = replicates.iter().map(|a| (a - mean).powi(2)).sum::<f64>()
            * (blocks as f64 - 1.0)
            / blocks as f64;
        points.push(MatchedEchoPoint {
            delta_t,
            amplitude,
            stderr: var.sqrt(),
        });
    }
    Ok(EchoAmplitudeScan {
        template_delta_t,
        template_trace: template.trace,
        points,
    })
}

/// Mean trace over the trajectories whose position satisfies the filter.
fn partial_mean_trace(
    trajectories: &[crate::dynamics::TrajectoryResult],
    keep: impl Fn(usize) -> bool,
) -> Result<SignalTrace> {
    let kept: Vec<&crate::dynamics::TrajectoryResult> = trajectories
        .iter()
        .enumerate()
        .filter(|(i, _)| keep(*i))
        .map(|(_, t)| t)
        .collect();
    if kept.is_empty() {
        return Err(Error::usage("jackknife block left no trajectories"));
    }
    let times = kept[0].trace.times().to_vec();
    let mut mean = vec![0.0; times.len()];
    for t in &kept {
        for (acc, v) in mean.iter_mut().zip(t.trace.values()) {
            *acc += v;
        }
    }
    let m = kept.len() as f64;
    for v in &mut mean {
        *v /= m;
    }
    SignalTrace::new(times, mean, None)
}

/// One point of a detuning scan.
#[derive(Debug, Clone)]
pub struct DetuningScanPoint {
    /// Detuning in linewidths (negative).
    pub detuning_gamma: f64,
    /// Photon scattering time at this detuning (s).
    pub tau_sc: f64,
    /// Fitted coherence time (s) and its 1σ, when the fit succeeded.
    pub tau2: Option<f64>,
    pub tau2_sigma: Option<f64>,
    /// τ₂/τ_sc.
    pub ratio: Option<f64>,
    pub fit_converged: bool,
    pub status: String,
}

/// Coherence time in scattering-time units across lattice detunings at
/// fixed depth. Each detuning runs its own matched-filter delay scan and
/// coherence fit.
pub fn scan_detuning(
    detunings: &[f64],
    delta_ts: &[f64],
    cfg: &ExperimentConfig,
) -> Result<Vec<DetuningScanPoint>> {
    if detunings.is_empty() {
        return Err(Error::config("detuning scan needs at least one detuning"));
    }
    if detunings.iter().any(|d| *d >= 0.0) {
        return Err(Error::config("detunings must be red (negative)"));
    }
    let template_delta_t = delta_ts[delta_ts.len() / 2];
    let mut out = Vec::with_capacity(detunings.len());
    for &detuning in detunings {
        let mut point_cfg = cfg.clone();
        point_cfg.params.detuning_gamma = detuning;
        let tau_sc = 1.0
            / lattice::scattering_rate(cfg.params.depth_er, detuning, &cfg.species)?;
        let point = match scan_echo_amplitudes(delta_ts, &point_cfg, template_delta_t)
            .and_then(|s| {
                let fit = s.coherence_fit()?;
                Ok(fit)
            }) {
            Ok(fit) => {
                let tau2 = fit.value("tau2");
                DetuningScanPoint {
                    detuning_gamma: detuning,
                    tau_sc,
                    tau2,
                    tau2_sigma: fit.sigma("tau2"),
                    ratio: tau2.map(|t| t / tau_sc),
                    fit_converged: fit.converged,
                    status: if fit.converged {
                        "ok".into()
                    } else {
                        "fit did not converge".into()
                    },
                }
            }
            Err(e) => DetuningScanPoint {
                detuning_gamma: detuning,
                tau_sc,
                tau2: None,
                tau2_sigma: None,
                ratio: None,
                fit_converged: false,
                status: e.to_string(),
            },
        };
        out.push(point);
    }
    Ok(out)
}
