//! Coherent split-operator time evolution plus stochastic quantum jumps
//! modeling spontaneous photon scattering; single trajectories and
//! deterministic trajectory ensembles.
//!
//! Between jumps the state advances with Strang splitting,
//! e^{−iV dt/2ħ} e^{−iT dt/ħ} e^{−iV dt/2ħ}, applied through forward and
//! inverse spectral transforms. Jumps are unraveled to first order: each step
//! carries probability p = scale·Γ′_eff·dt of a photon recoil, after which
//! the state is renormalized.

use std::sync::Arc;

use num_complex::Complex64 as C64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
#[cfg(feature = "parallel")]
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};

use crate::analysis::SignalTrace;
use crate::error::{Error, Result};
use crate::experiment::ShiftProtocol;
use crate::grid::Grid;
use crate::lattice::{self, AtomSpecies, LatticeParams, HBAR};
use crate::wavefunction::WaveFunction;

/// Hard bound on the per-step jump probability; beyond this the first-order
/// unraveling is invalid and the step size must be reduced.
pub const MAX_JUMP_PROBABILITY: f64 = 0.05;

/// How the photon recoil imparted by a jump is modeled, in units of ħk along
/// the lattice axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecoilModel {
    /// Absorption from one of the two lattice beams (±1 ħk, equal odds) plus
    /// the axial projection of the dipole emission pattern.
    AbsorptionEmission,
    /// Emission projection only: near a well center the standing-wave field
    /// gradient vanishes, so absorption transfers no net momentum.
    EmissionOnly,
}

impl RecoilModel {
    /// Draw a recoil in ħk units. Consumes a fixed number of RNG values per
    /// call for reproducibility.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            RecoilModel::AbsorptionEmission => {
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                sign + sample_dipole_projection(rng)
            }
            RecoilModel::EmissionOnly => sample_dipole_projection(rng),
        }
    }

    /// Probability density of the total recoil.
    pub fn density(&self, q: f64) -> f64 {
        match self {
            RecoilModel::AbsorptionEmission => {
                0.5 * (dipole_projection_density(q - 1.0) + dipole_projection_density(q + 1.0))
            }
            RecoilModel::EmissionOnly => dipole_projection_density(q),
        }
    }
}

/// 1D projection of the dipole emission pattern: density 3/8 (1 + u²) on
/// [−1, 1].
pub fn dipole_projection_density(u: f64) -> f64 {
    if (-1.0..=1.0).contains(&u) {
        0.375 * (1.0 + u * u)
    } else {
        0.0
    }
}

/// Inverse-CDF sample of the dipole projection, via the closed-form real
/// root of u³ + 3u = 8F − 4.
fn sample_dipole_projection(rng: &mut ChaCha8Rng) -> f64 {
    let f = rng.random::<f64>();
    let t = 8.0 * f - 4.0;
    let d = (t * t / 4.0 + 1.0).sqrt();
    (t / 2.0 + d).cbrt() + (t / 2.0 - d).cbrt()
}

/// Whether the jump rate follows the local lattice intensity sampled by the
/// state or stays at the peak value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RateMode {
    /// Γ′_eff(ψ) = Γ′ ⟨|U(z)|⟩_ψ / U₀.
    IntensityWeighted,
    /// Γ′_eff = Γ′ regardless of the state.
    Uniform,
}

/// Scattering configuration for a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JumpSettings {
    /// Multiplier on the physical scattering rate (0 disables jumps; 1/1000
    /// reproduces the suppressed-scattering simulations).
    pub scattering_scale: f64,
    pub recoil: RecoilModel,
    pub rate_mode: RateMode,
}

impl Default for JumpSettings {
    fn default() -> Self {
        Self {
            scattering_scale: 1.0,
            recoil: RecoilModel::AbsorptionEmission,
            rate_mode: RateMode::IntensityWeighted,
        }
    }
}

impl JumpSettings {
    pub fn coherent_only() -> Self {
        Self {
            scattering_scale: 0.0,
            ..Self::default()
        }
    }
}

/// Times and recoil momenta of the jumps in one trajectory.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct JumpRecord {
    /// Jump times (s), strictly increasing.
    pub times: Vec<f64>,
    /// Recoils in ħk units, each in [−2, 2].
    pub recoil_momenta: Vec<f64>,
}

impl JumpRecord {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// One stochastic trajectory: observable trace on the output clock plus the
/// jump history.
#[derive(Debug, Clone)]
pub struct TrajectoryResult {
    pub trace: SignalTrace,
    pub jumps: JumpRecord,
    pub seed: u64,
}

/// Shared FFT plans for one grid size; cheap to clone across trajectories.
#[derive(Clone)]
pub struct FftPair {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl FftPair {
    pub fn new(points: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            forward: planner.plan_fft_forward(points),
            inverse: planner.plan_fft_inverse(points),
        }
    }

    fn scratch_len(&self) -> usize {
        self.forward
            .get_inplace_scratch_len()
            .max(self.inverse.get_inplace_scratch_len())
    }
}

/// Split-operator propagator for a fixed (grid, species, depth) with a
/// movable potential offset.
pub struct Propagator {
    grid: Arc<Grid>,
    species: AtomSpecies,
    params: LatticeParams,
    fft: FftPair,
    scratch: Vec<C64>,
    kinetic_mask: Vec<C64>,
    half_potential_mask: Vec<C64>,
    /// cos²(k(z − offset)) on the grid; the relative lattice intensity.
    intensity: Vec<f64>,
    offset: f64,
}

impl Propagator {
    pub fn new(
        grid: Arc<Grid>,
        species: &AtomSpecies,
        params: &LatticeParams,
        offset: f64,
        fft: &FftPair,
    ) -> Self {
        let n = grid.points();
        let dt = grid.dt();
        let kinetic_mask: Vec<C64> = (0..n)
            .map(|m| {
                let q = grid.fft_wavenumber(m);
                let e_kin = (HBAR * q).powi(2) / (2.0 * species.mass);
                C64::new(0.0, -e_kin * dt / HBAR).exp() / n as f64
            })
            .collect();
        let mut p = Self {
            grid,
            species: species.clone(),
            params: *params,
            fft: fft.clone(),
            scratch: vec![C64::new(0.0, 0.0); fft.scratch_len()],
            kinetic_mask,
            half_potential_mask: Vec::new(),
            intensity: Vec::new(),
            offset: f64::NAN,
            };
        p.set_offset(offset);
        p
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    /// Move the potential to a new offset, rebuilding the position-space
    /// masks. Samples are computed over one well and tiled, so they are
    /// exactly λ/2-periodic.
    pub fn set_offset(&mut self, offset: f64) {
        if offset == self.offset {
            return;
        }
        self.offset = offset;
        let n = self.grid.points();
        let w = self.grid.points_per_well();
        let k = self.species.wavenumber();
        let u0 = self.params.depth_j(&self.species);
        let dt = self.grid.dt();
        let mut intensity = Vec::with_capacity(n);
        let mut mask = Vec::with_capacity(n);
        for i in 0..w {
            let c = (k * (self.grid.position(i) - offset)).cos();
            let c2 = c * c;
            intensity.push(c2);
            mask.push(C64::new(0.0, u0 * c2 * dt / (2.0 * HBAR)).exp());
        }
        for i in w..n {
            intensity.push(intensity[i - w]);
            mask.push(mask[i - w]);
        }
        self.intensity = intensity;
        self.half_potential_mask = mask;
    }

    /// One Strang split step; exactly unitary up to roundoff.
    pub fn step_coherent(&mut self, psi: &mut WaveFunction) {
        let amps = psi.amplitudes_mut();
        for (a, m) in amps.iter_mut().zip(&self.half_potential_mask) {
            *a *= m;
        }
        self.fft.forward.process_with_scratch(amps, &mut self.scratch);
        for (a, m) in amps.iter_mut().zip(&self.kinetic_mask) {
            *a *= m;
        }
        self.fft.inverse.process_with_scratch(amps, &mut self.scratch);
        for (a, m) in amps.iter_mut().zip(&self.half_potential_mask) {
            *a *= m;
        }
        psi.time += self.grid.dt();
    }

    /// ⟨|U(z)|⟩_ψ / U₀ = ⟨cos²(k(z − offset))⟩_ψ, the weighting factor for
    /// the intensity-following jump rate.
    pub fn intensity_weight(&self, psi: &WaveFunction) -> f64 {
        let dz = self.grid.spacing();
        psi.amplitudes()
            .iter()
            .zip(&self.intensity)
            .map(|(a, w)| a.norm_sqr() * w)
            .sum::<f64>()
            * dz
    }

    /// Total energy ⟨T⟩ + ⟨V⟩ (J).
    pub fn energy(&mut self, psi: &WaveFunction) -> f64 {
        let n = self.grid.points();
        let dz = self.grid.spacing();
        let u0 = self.params.depth_j(&self.species);
        let potential: f64 = psi
            .amplitudes()
            .iter()
            .zip(&self.intensity)
            .map(|(a, w)| a.norm_sqr() * (-u0 * w))
            .sum::<f64>()
            * dz;
        let mut momentum: Vec<C64> = psi.amplitudes().to_vec();
        self.fft
            .forward
            .process_with_scratch(&mut momentum, &mut self.scratch);
        let kinetic: f64 = momentum
            .iter()
            .enumerate()
            .map(|(m, a)| {
                let q = self.grid.fft_wavenumber(m);
                a.norm_sqr() * (HBAR * q).powi(2) / (2.0 * self.species.mass)
            })
            .sum::<f64>()
            * dz
            / n as f64;
        kinetic + potential
    }

    /// Multiply by the recoil phase e^{i q k z} (q in ħk units) and
    /// renormalize.
    pub fn apply_recoil(&self, psi: &mut WaveFunction, q: f64) {
        let k = self.species.wavenumber();
        for (i, a) in psi.amplitudes_mut().iter_mut().enumerate() {
            let z = i as f64 * self.grid.spacing();
            *a *= C64::new(0.0, q * k * z).exp();
        }
        psi.renormalize();
    }
}

/// Exponential approach of the potential offset after shift events.
struct OffsetTrack {
    ramp_time: f64,
    target: f64,
    seg_start_time: f64,
    seg_start_offset: f64,
    settled: bool,
}

impl OffsetTrack {
    fn new(initial_offset: f64, ramp_time: f64) -> Self {
        Self {
            ramp_time,
            target: initial_offset,
            seg_start_time: f64::NEG_INFINITY,
            seg_start_offset: initial_offset,
            settled: true,
        }
    }

    fn shift_to(&mut self, target: f64, time: f64) {
        let current = self.offset_at(time);
        self.seg_start_offset = current;
        self.seg_start_time = time;
        self.target = target;
        self.settled = self.ramp_time == 0.0 || current == target;
    }

    fn offset_at(&self, time: f64) -> f64 {
        if self.settled {
            return self.target;
        }
        let x = (time - self.seg_start_time) / self.ramp_time;
        if x > 21.0 {
            // below 1e-9 of the ramp amplitude
            return self.target;
        }
        self.target + (self.seg_start_offset - self.target) * (-x).exp()
    }

    fn offset_for_step(&mut self, mid_time: f64) -> f64 {
        if !self.settled && (mid_time - self.seg_start_time) / self.ramp_time > 21.0 {
            self.settled = true;
        }
        self.offset_at(mid_time)
    }
}

/// Integer-step timeline compiled from a [`ShiftProtocol`].
struct CompiledSchedule {
    start_time: f64,
    total_steps: usize,
    events: Vec<(usize, f64)>,
    record_start_step: usize,
    output_stride: usize,
    n_outputs: usize,
    output_times: Vec<f64>,
}

fn compile_schedule(protocol: &ShiftProtocol, grid: &Grid) -> Result<CompiledSchedule> {
    let dt = grid.dt();
    let start_time = protocol.start_time();
    let to_step = |t: f64| -> usize { ((t - start_time) / dt).round().max(0.0) as usize };

    let stride_f = protocol.output_dt / dt;
    let stride = stride_f.round() as usize;
    if stride == 0 || (stride_f - stride as f64).abs() > 1e-6 {
        return Err(Error::config(format!(
            "output interval {:.3e} s must be an integer multiple of the \
             integrator step {:.3e} s",
            protocol.output_dt, dt
        )));
    }

    let total_steps = to_step(protocol.t_record_end);
    let record_start_step = to_step(protocol.t_record_start);
    if record_start_step > total_steps {
        return Err(Error::config("recording window is empty"));
    }
    let mut events: Vec<(usize, f64)> = protocol
        .events
        .iter()
        .map(|e| (to_step(e.time), e.offset))
        .collect();
    events.sort_by_key(|e| e.0);

    let n_outputs = (total_steps - record_start_step) / stride + 1;
    let output_times: Vec<f64> = (0..n_outputs)
        .map(|m| protocol.t_record_start + m as f64 * protocol.output_dt)
        .collect();

    Ok(CompiledSchedule {
        start_time,
        total_steps,
        events,
        record_start_step,
        output_stride: stride,
        n_outputs,
        output_times,
    })
}

/// Evolve one trajectory through the shift protocol, with first-order
/// quantum jumps at rate `scale·Γ′_eff(ψ)`.
#[allow(clippy::too_many_arguments)]
pub fn evolve_with_jumps(
    initial: WaveFunction,
    params: &LatticeParams,
    species: &AtomSpecies,
    protocol: &ShiftProtocol,
    jumps: &JumpSettings,
    observable: &(dyn Fn(&WaveFunction) -> f64 + Sync),
    fft: &FftPair,
    seed: u64,
) -> Result<TrajectoryResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    evolve_with_jumps_rng(
        initial, params, species, protocol, jumps, observable, fft, &mut rng, seed,
    )
}

#[allow(clippy::too_many_arguments)]
fn evolve_with_jumps_rng(
    mut psi: WaveFunction,
    params: &LatticeParams,
    species: &AtomSpecies,
    protocol: &ShiftProtocol,
    jumps: &JumpSettings,
    observable: &(dyn Fn(&WaveFunction) -> f64 + Sync),
    fft: &FftPair,
    rng: &mut ChaCha8Rng,
    seed: u64,
) -> Result<TrajectoryResult> {
    if jumps.scattering_scale < 0.0 {
        return Err(Error::config("scattering scale must be non-negative"));
    }
    let grid = psi.grid().clone();
    let dt = grid.dt();
    let schedule = compile_schedule(protocol, &grid)?;

    let peak_rate = if jumps.scattering_scale > 0.0 {
        lattice::scattering_rate(params.depth_er, params.detuning_gamma, species)?
    } else {
        0.0
    };
    let p_peak = jumps.scattering_scale * peak_rate * dt;
    if p_peak >= MAX_JUMP_PROBABILITY {
        return Err(Error::config(format!(
            "jump probability per step {p_peak:.3} exceeds {MAX_JUMP_PROBABILITY}; \
             reduce the time step or the scattering scale"
        )));
    }

    let mut track = OffsetTrack::new(protocol.initial_offset, params.shift_ramp_time);
    let mut propagator = Propagator::new(grid.clone(), species, params, protocol.initial_offset, fft);

    psi.time = schedule.start_time;
    let mut values = Vec::with_capacity(schedule.n_outputs);
    let mut record = JumpRecord::default();
    let mut next_event = 0usize;

    for step in 0..=schedule.total_steps {
        let t = schedule.start_time + step as f64 * dt;

        while next_event < schedule.events.len() && schedule.events[next_event].0 == step {
            track.shift_to(schedule.events[next_event].1, t);
            next_event += 1;
        }

        if step >= schedule.record_start_step
            && (step - schedule.record_start_step) % schedule.output_stride == 0
            && values.len() < schedule.n_outputs
        {
            if psi.has_non_finite() {
                return Err(Error::numeric(format!(
                    "non-finite amplitudes at t = {:.3e} s (seed {seed})",
                    t
                )));
            }
            values.push(observable(&psi));
        }

        if step == schedule.total_steps {
            break;
        }

        propagator.set_offset(track.offset_for_step(t + 0.5 * dt));
        propagator.step_coherent(&mut psi);

        if jumps.scattering_scale > 0.0 {
            let weight = match jumps.rate_mode {
                RateMode::IntensityWeighted => propagator.intensity_weight(&psi),
                RateMode::Uniform => 1.0,
            };
            let p = p_peak * weight;
            if p >= MAX_JUMP_PROBABILITY {
                return Err(Error::config(format!(
                    "jump probability per step {p:.3} exceeds {MAX_JUMP_PROBABILITY}"
                )));
            }
            if rng.random::<f64>() < p {
                let q = jumps.recoil.sample(rng);
                propagator.apply_recoil(&mut psi, q);
                record.times.push(t + dt);
                record.recoil_momenta.push(q);
            }
        }
    }

    let trace = SignalTrace::new(schedule.output_times, values, None)?;
    Ok(TrajectoryResult {
        trace,
        jumps: record,
        seed,
    })
}

/// Set the size of the global worker pool used for parallel ensembles.
/// Zero keeps the default (available parallelism). Must be called before
/// the first parallel run.
#[cfg(feature = "parallel")]
pub fn set_worker_count(workers: usize) -> Result<()> {
    if workers == 0 {
        return Ok(());
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build_global()
        .map_err(|e| Error::config(format!("could not size the worker pool: {e}")))
}

/// Without the `parallel` feature trajectories run sequentially and the
/// worker count is ignored.
#[cfg(not(feature = "parallel"))]
pub fn set_worker_count(_workers: usize) -> Result<()> {
    Ok(())
}

/// Aggregate jump statistics over an ensemble.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JumpStats {
    pub total_jumps: usize,
    pub mean_per_trajectory: f64,
    /// Mean jump rate per trajectory over the evolved span (1/s).
    pub mean_rate: f64,
}

/// Ensemble of trajectories reduced to a mean trace with standard errors.
#[derive(Debug, Clone)]
pub struct EnsembleResult {
    pub trace: SignalTrace,
    pub trajectories: Vec<TrajectoryResult>,
    /// (trajectory index, error message) for excluded trajectories.
    pub failures: Vec<(usize, String)>,
    pub jump_stats: JumpStats,
}

/// Execution options for ensembles.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnsembleOptions {
    /// Run trajectories on the rayon pool (needs the `parallel` feature).
    pub parallel: bool,
    /// Abort when more than this fraction of trajectories fails.
    pub max_failure_fraction: f64,
}

impl Default for EnsembleOptions {
    fn default() -> Self {
        Self {
            parallel: cfg!(feature = "parallel"),
            max_failure_fraction: 0.01,
        }
    }
}

/// Run `n_traj` independent trajectories with seeds `base_seed ⊕ i` and
/// average them. `setup` draws the per-trajectory lattice parameters and
/// initial state from the trajectory's own RNG stream, so the ensemble is
/// deterministic and independent of execution order.
#[allow(clippy::too_many_arguments)]
pub fn run_ensemble<F>(
    n_traj: usize,
    base_seed: u64,
    species: &AtomSpecies,
    protocol: &ShiftProtocol,
    jumps: &JumpSettings,
    observable: &(dyn Fn(&WaveFunction) -> f64 + Sync),
    setup: F,
    options: &EnsembleOptions,
) -> Result<EnsembleResult>
where
    F: Fn(&mut ChaCha8Rng, usize) -> Result<(LatticeParams, WaveFunction)> + Sync,
{
    if n_traj == 0 {
        return Err(Error::config("ensemble needs at least one trajectory"));
    }

    let run_one = |i: usize| -> (usize, Result<TrajectoryResult>) {
        let seed = base_seed ^ i as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let result = setup(&mut rng, i).and_then(|(params, psi)| {
            let fft = FftPair::new(psi.grid().points());
            evolve_with_jumps_rng(
                psi, &params, species, protocol, jumps, observable, &fft, &mut rng, seed,
            )
        });
        (i, result)
    };

    let results = map_trajectories(n_traj, options, run_one);
    let duration = protocol.t_record_end - protocol.start_time();
    reduce_ensemble(results, n_traj, duration, options)
}

#[cfg(feature = "parallel")]
fn map_trajectories<R>(
    n_traj: usize,
    options: &EnsembleOptions,
    run_one: R,
) -> Vec<(usize, Result<TrajectoryResult>)>
where
    R: Fn(usize) -> (usize, Result<TrajectoryResult>) + Sync + Send,
{
    if options.parallel {
        (0..n_traj).into_par_iter().map(run_one).collect()
    } else {
        (0..n_traj).map(run_one).collect()
    }
}

#[cfg(not(feature = "parallel"))]
fn map_trajectories<R>(
    n_traj: usize,
    _options: &EnsembleOptions,
    run_one: R,
) -> Vec<(usize, Result<TrajectoryResult>)>
where
    R: Fn(usize) -> (usize, Result<TrajectoryResult>) + Sync,
{
    (0..n_traj).map(run_one).collect()
}

/// Deterministic index-ordered reduction with the failure policy:
/// configuration and usage errors abort, numeric failures are excluded with
/// a warning up to the allowed fraction.
fn reduce_ensemble(
    mut results: Vec<(usize, Result<TrajectoryResult>)>,
    n_traj: usize,
    duration: f64,
    options: &EnsembleOptions,
) -> Result<EnsembleResult> {
    results.sort_by_key(|r| r.0);

    let mut trajectories = Vec::with_capacity(n_traj);
    let mut failures = Vec::new();
    for (i, r) in results {
        match r {
            Ok(t) => trajectories.push(t),
            Err(e @ (Error::Config(_) | Error::Usage(_))) => return Err(e),
            Err(e) => {
                log::warn!("trajectory {i} excluded: {e}");
                failures.push((i, e.to_string()));
            }
        }
    }

    let failed_fraction = failures.len() as f64 / n_traj as f64;
    if failed_fraction > options.max_failure_fraction {
        return Err(Error::run(format!(
            "{} of {} trajectories failed ({:.1}% > {:.1}% allowed)",
            failures.len(),
            n_traj,
            100.0 * failed_fraction,
            100.0 * options.max_failure_fraction
        )));
    }
    if trajectories.is_empty() {
        return Err(Error::run("all trajectories failed"));
    }

    let times = trajectories[0].trace.times().to_vec();
    let n_samples = times.len();
    let m = trajectories.len() as f64;
    let mut mean = vec![0.0; n_samples];
    for t in &trajectories {
        for (acc, v) in mean.iter_mut().zip(t.trace.values()) {
            *acc += v;
        }
    }
    for v in &mut mean {
        *v /= m;
    }
    let stderr: Vec<f64> = if trajectories.len() > 1 {
        let mut var = vec![0.0; n_samples];
        for t in &trajectories {
            for ((acc, v), mu) in var.iter_mut().zip(t.trace.values()).zip(&mean) {
                let d = v - mu;
                *acc += d * d;
            }
        }
        var.iter().map(|s| (s / (m * (m - 1.0))).sqrt()).collect()
    } else {
        vec![0.0; n_samples]
    };

    let total_jumps: usize = trajectories.iter().map(|t| t.jumps.len()).sum();
    let jump_stats = JumpStats {
        total_jumps,
        mean_per_trajectory: total_jumps as f64 / m,
        mean_rate: total_jumps as f64 / (m * duration),
    };

    Ok(EnsembleResult {
        trace: SignalTrace::new(times, mean, Some(stderr))?,
        trajectories,
        failures,
        jump_stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::{ShiftEvent, ShiftProtocol};
    use crate::spectral;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn rb85() -> AtomSpecies {
        AtomSpecies::rb85()
    }

    fn free_protocol(t_end: f64, output_dt: f64) -> ShiftProtocol {
        ShiftProtocol {
            events: vec![],
            t_record_start: 0.0,
            t_record_end: t_end,
            output_dt,
            initial_offset: 0.0,
        }
    }

    #[test]
    fn free_gaussian_spreads_analytically() {
        // With U0 = 0 the split step is the exact free propagator on the
        // grid, so the packet must follow sigma(t)^2 = sigma0^2 + (hbar t /
        // 2 m sigma0)^2 essentially to machine precision.
        let s = rb85();
        let grid = Arc::new(Grid::default_for(&s));
        let params = LatticeParams::new(0.0, -7.8, 0.0).unwrap();
        let fft = FftPair::new(grid.points());
        let mut prop = Propagator::new(grid.clone(), &s, &params, 0.0, &fft);
        let sigma0 = 0.10 * s.wavelength;
        let center = grid.length() / 2.0;
        let mut psi = WaveFunction::gaussian(grid.clone(), center, sigma0, 0.0);
        let m = s.mass;
        for _ in 0..1000 {
            prop.step_coherent(&mut psi);
        }
        let t = 1000.0 * grid.dt();
        let expected = (sigma0 * sigma0 + (HBAR * t / (2.0 * m * sigma0)).powi(2)).sqrt();
        let spread = {
            // direct second moment about the center (packet stays far from
            // the boundary)
            let m1 = psi.expect_position_fn(|z| z - center);
            let m2 = psi.expect_position_fn(|z| (z - center) * (z - center));
            (m2 - m1 * m1).sqrt()
        };
        assert_relative_eq!(spread, expected, max_relative = 1e-6);
    }

    #[test]
    fn eigenstate_is_stationary_and_norm_is_conserved() {
        let s = rb85();
        let grid = Arc::new(Grid::default_for(&s));
        let params = LatticeParams::new(831.0, -7.8, 0.0).unwrap();
        let sys = spectral::solve_eigensystem(&params, 0.0, &grid, 5, &s).unwrap();
        let phi = sys.state(3).clone();
        let fft = FftPair::new(grid.points());
        let mut prop = Propagator::new(grid.clone(), &s, &params, 0.0, &fft);
        let mut psi = phi.clone();
        let steps = 20_000; // 100 us at dt = 5 ns
        for _ in 0..steps {
            prop.step_coherent(&mut psi);
        }
        let overlap = phi.inner(&psi).norm();
        assert!(
            (overlap - 1.0).abs() < 1e-6,
            "eigenstate overlap drifted to {overlap}"
        );
        assert!(
            (psi.norm_sq() - 1.0).abs() < 1e-9,
            "norm drifted by {:.3e}",
            psi.norm_sq() - 1.0
        );
    }

    #[test]
    fn energy_is_conserved_for_a_displaced_packet() {
        let s = rb85();
        let grid = Arc::new(Grid::new(512, 8, 2.5e-9, &s).unwrap());
        let params = LatticeParams::new(831.0, -7.8, 0.0).unwrap();
        let sys = spectral::solve_eigensystem(&params, 0.0, &grid, 1, &s).unwrap();
        let fft = FftPair::new(grid.points());
        let mut prop = Propagator::new(grid.clone(), &s, &params, 0.0, &fft);
        // Displace the ground state by a twentieth of a wavelength.
        let mut psi = sys.translated_state(0, 0.05 * s.wavelength);
        let e0 = prop.energy(&psi);
        let steps = 40_000; // 100 us at dt = 2.5 ns
        for _ in 0..steps {
            prop.step_coherent(&mut psi);
        }
        let e1 = prop.energy(&psi);
        assert!(
            ((e1 - e0) / e0).abs() < 1e-6,
            "energy drifted by {:.3e} relative",
            (e1 - e0) / e0
        );
    }

    #[test]
    fn null_shift_reproduces_the_unshifted_run_bit_for_bit() {
        let s = rb85();
        let grid = Arc::new(Grid::default_for(&s));
        let params = LatticeParams::new(831.0, -7.8, 0.0).unwrap();
        let sys = spectral::solve_eigensystem(&params, 0.0, &grid, 1, &s).unwrap();
        let fft = FftPair::new(grid.points());
        let k = s.wavenumber();
        let obs = move |psi: &WaveFunction| psi.expect_redistribution(k, 0.0);

        let with_null_event = ShiftProtocol {
            events: vec![ShiftEvent {
                time: 2e-6,
                offset: 0.0,
            }],
            ..free_protocol(10e-6, 0.2e-6)
        };
        let without = free_protocol(10e-6, 0.2e-6);
        let jumps = JumpSettings::default();
        let a = evolve_with_jumps(
            sys.state(0).clone(),
            &params,
            &s,
            &with_null_event,
            &jumps,
            &obs,
            &fft,
            99,
        )
        .unwrap();
        let b = evolve_with_jumps(
            sys.state(0).clone(),
            &params,
            &s,
            &without,
            &jumps,
            &obs,
            &fft,
            99,
        )
        .unwrap();
        assert_eq!(a.trace.values(), b.trace.values());
        assert_eq!(a.jumps, b.jumps);
    }

    #[test]
    fn sudden_shift_launches_oscillation_at_the_expected_period() {
        let s = rb85();
        let grid = Arc::new(Grid::default_for(&s));
        let params = LatticeParams::new(831.0, -7.8, 0.10).unwrap();
        let sys = spectral::solve_eigensystem(&params, 0.0, &grid, 1, &s).unwrap();
        let fft = FftPair::new(grid.points());
        let dz = params.shift_m(&s);
        let k = s.wavenumber();
        let obs = move |psi: &WaveFunction| psi.expect_redistribution(k, dz);
        let protocol = ShiftProtocol {
            events: vec![ShiftEvent {
                time: 0.0,
                offset: dz,
            }],
            ..free_protocol(30e-6, 0.2e-6)
        };
        let result = evolve_with_jumps(
            sys.state(0).clone(),
            &params,
            &s,
            &protocol,
            &JumpSettings::coherent_only(),
            &obs,
            &fft,
            0,
        )
        .unwrap();
        let (period, _) = crate::analysis::oscillation_period(&result.trace).unwrap();
        assert_relative_eq!(period, 5.2e-6, max_relative = 0.10);
        assert!(result.jumps.is_empty());
    }

    #[test]
    fn ramped_shift_reduces_the_oscillation_amplitude_moderately() {
        let s = rb85();
        let grid = Arc::new(Grid::default_for(&s));
        let sudden = LatticeParams::new(831.0, -7.8, 0.10).unwrap();
        let ramped = sudden.with_shift_ramp(0.4e-6).unwrap();
        let sys = spectral::solve_eigensystem(&sudden, 0.0, &grid, 1, &s).unwrap();
        let fft = FftPair::new(grid.points());
        let dz = sudden.shift_m(&s);
        let k = s.wavenumber();
        let obs = move |psi: &WaveFunction| psi.expect_redistribution(k, dz);
        let protocol = ShiftProtocol {
            events: vec![ShiftEvent {
                time: 0.0,
                offset: dz,
            }],
            ..free_protocol(12e-6, 0.2e-6)
        };
        // Oscillation swing after the ramp has settled (t > 2 us), so the
        // static displacement transient does not enter the comparison.
        let amp = |params: &LatticeParams| -> f64 {
            let r = evolve_with_jumps(
                sys.state(0).clone(),
                params,
                &s,
                &protocol,
                &JumpSettings::coherent_only(),
                &obs,
                &fft,
                0,
            )
            .unwrap();
            let late: Vec<f64> = r
                .trace
                .times()
                .iter()
                .zip(r.trace.values())
                .filter(|(&t, _)| t > 2e-6)
                .map(|(_, &v)| v)
                .collect();
            let hi = late.iter().cloned().fold(f64::MIN, f64::max);
            let lo = late.iter().cloned().fold(f64::MAX, f64::min);
            (hi - lo) / 2.0
        };
        let a_sudden = amp(&sudden);
        let a_ramped = amp(&ramped);
        assert!(a_ramped < a_sudden);
        assert!(
            a_ramped > 0.85 * a_sudden,
            "ramp reduced the amplitude by more than 15%: {a_ramped} vs {a_sudden}"
        );
    }

    #[test]
    fn jump_count_matches_the_scattering_rate() {
        // Uniform rate: the count over T is Poisson with mean Gamma' T.
        let s = rb85();
        let grid = Arc::new(Grid::default_for(&s));
        let params = LatticeParams::new(831.0, -7.8, 0.0).unwrap();
        let sys = spectral::solve_eigensystem(&params, 0.0, &grid, 1, &s).unwrap();
        let fft = FftPair::new(grid.points());
        let obs = |_: &WaveFunction| 0.0;
        let protocol = free_protocol(27e-6, 1e-6);
        let jumps = JumpSettings {
            rate_mode: RateMode::Uniform,
            ..Default::default()
        };
        let n_traj = 40;
        let mut total = 0usize;
        for i in 0..n_traj {
            let r = evolve_with_jumps(
                sys.state(0).clone(),
                &params,
                &s,
                &protocol,
                &jumps,
                &obs,
                &fft,
                1000 + i,
            )
            .unwrap();
            total += r.jumps.len();
        }
        let mean = total as f64 / n_traj as f64;
        let rate = lattice::scattering_rate(831.0, -7.8, &s).unwrap();
        let expected = rate * 27e-6; // about 70, consistent with 68 +- 10
        let sigma_mean = expected.sqrt() / (n_traj as f64).sqrt();
        assert!(
            (mean - expected).abs() < 4.0 * sigma_mean,
            "mean jump count {mean:.1} vs expected {expected:.1}"
        );
        // The weighted mode scatters at most at the peak rate.
        let weighted = evolve_with_jumps(
            sys.state(0).clone(),
            &params,
            &s,
            &protocol,
            &JumpSettings::default(),
            &obs,
            &fft,
            7,
        )
        .unwrap();
        assert!(weighted.jumps.len() as f64 <= 1.3 * expected);
    }

    #[test]
    fn recoils_stay_in_range_and_follow_the_dipole_density() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 40_000;
        let mut counts = [0usize; 16];
        for _ in 0..n {
            let q = RecoilModel::EmissionOnly.sample(&mut rng);
            assert!((-1.0..=1.0).contains(&q));
            let bin = (((q + 1.0) / 2.0) * 16.0).min(15.0) as usize;
            counts[bin] += 1;
        }
        // chi-squared against the binned density, 15 dof, 5%: 25.0
        let mut chi2 = 0.0;
        for (b, &c) in counts.iter().enumerate() {
            let lo = -1.0 + b as f64 * 0.125;
            let hi = lo + 0.125;
            // integral of 3/8 (1 + u^2)
            let cdf = |u: f64| 0.375 * (u + u * u * u / 3.0) + 0.5;
            let p = cdf(hi) - cdf(lo);
            let e = p * n as f64;
            chi2 += (c as f64 - e).powi(2) / e;
        }
        assert!(chi2 < 25.0, "chi2 = {chi2:.1} exceeds the 5% critical value");

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..1000 {
            let q = RecoilModel::AbsorptionEmission.sample(&mut rng);
            assert!((-2.0..=2.0).contains(&q));
        }
    }

    #[test]
    fn trajectories_are_deterministic_in_seed_and_config() {
        let s = rb85();
        let grid = Arc::new(Grid::default_for(&s));
        let params = LatticeParams::new(831.0, -7.8, 0.10).unwrap();
        let sys = spectral::solve_eigensystem(&params, 0.0, &grid, 1, &s).unwrap();
        let fft = FftPair::new(grid.points());
        let k = s.wavenumber();
        let obs = move |psi: &WaveFunction| psi.expect_redistribution(k, 0.0);
        let protocol = free_protocol(10e-6, 0.5e-6);
        let run = || {
            evolve_with_jumps(
                sys.state(0).clone(),
                &params,
                &s,
                &protocol,
                &JumpSettings::default(),
                &obs,
                &fft,
                1234,
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.trace.values(), b.trace.values());
        assert_eq!(a.jumps, b.jumps);
        assert_eq!(a.seed, b.seed);
    }

    #[test]
    fn oversized_jump_probability_is_a_configuration_error() {
        let s = rb85();
        let grid = Arc::new(Grid::default_for(&s));
        let params = LatticeParams::new(831.0, -7.8, 0.0).unwrap();
        let sys = spectral::solve_eigensystem(&params, 0.0, &grid, 1, &s).unwrap();
        let fft = FftPair::new(grid.points());
        let obs = |_: &WaveFunction| 0.0;
        let jumps = JumpSettings {
            scattering_scale: 10.0,
            ..Default::default()
        };
        match evolve_with_jumps(
            sys.state(0).clone(),
            &params,
            &s,
            &free_protocol(1e-6, 0.5e-6),
            &jumps,
            &obs,
            &fft,
            0,
        ) {
            Err(Error::Config(_)) => {}
            other => panic!("expected configuration error, got {other:?}"),
        }
    }

    #[test]
    fn singleton_ensemble_equals_the_single_trajectory() {
        let s = rb85();
        let grid = Arc::new(Grid::default_for(&s));
        let params = LatticeParams::new(831.0, -7.8, 0.10).unwrap();
        let sys = spectral::solve_eigensystem(&params, 0.0, &grid, 1, &s).unwrap();
        let fft = FftPair::new(grid.points());
        let k = s.wavenumber();
        let obs = move |psi: &WaveFunction| psi.expect_redistribution(k, 0.0);
        let protocol = free_protocol(8e-6, 0.4e-6);
        let jumps = JumpSettings::default();
        let base_seed = 42;

        let single = evolve_with_jumps(
            sys.state(0).clone(),
            &params,
            &s,
            &protocol,
            &jumps,
            &obs,
            &fft,
            base_seed,
        )
        .unwrap();
        let ens = run_ensemble(
            1,
            base_seed,
            &s,
            &protocol,
            &jumps,
            &obs,
            |_rng, _i| Ok((params, sys.state(0).clone())),
            &EnsembleOptions::default(),
        )
        .unwrap();
        assert_eq!(ens.trace.values(), single.trace.values());
        assert_eq!(ens.trajectories[0].jumps, single.jumps);
    }

    #[test]
    fn deterministic_coherent_ensemble_collapses_to_one_trajectory() {
        let s = rb85();
        let grid = Arc::new(Grid::default_for(&s));
        let params = LatticeParams::new(831.0, -7.8, 0.10).unwrap();
        let sys = spectral::solve_eigensystem(&params, 0.0, &grid, 1, &s).unwrap();
        let k = s.wavenumber();
        let obs = move |psi: &WaveFunction| psi.expect_redistribution(k, 0.0);
        let protocol = free_protocol(6e-6, 0.4e-6);
        let ens = run_ensemble(
            4,
            7,
            &s,
            &protocol,
            &JumpSettings::coherent_only(),
            &obs,
            |_rng, _i| Ok((params, sys.state(0).clone())),
            &EnsembleOptions::default(),
        )
        .unwrap();
        for se in ens.trace.stderr().unwrap() {
            assert_abs_diff_eq!(*se, 0.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn ensemble_failure_policy_excludes_and_aborts_correctly() {
        let times: Vec<f64> = (0..4).map(|i| i as f64).collect();
        let ok = |i: usize| TrajectoryResult {
            trace: SignalTrace::new(times.clone(), vec![i as f64; 4], None).unwrap(),
            jumps: JumpRecord::default(),
            seed: i as u64,
        };
        // One numeric failure out of 50 (2%) with a 1% budget: run error.
        let results: Vec<(usize, Result<TrajectoryResult>)> = (0..50)
            .map(|i| {
                if i == 3 {
                    (i, Err(Error::numeric("injected")))
                } else {
                    (i, Ok(ok(i)))
                }
            })
            .collect();
        let opts = EnsembleOptions::default();
        assert!(matches!(
            reduce_ensemble(results, 50, 1.0, &opts),
            Err(Error::Run(_))
        ));
        // Same failure with a 5% budget: excluded with a record.
        let results: Vec<(usize, Result<TrajectoryResult>)> = (0..50)
            .map(|i| {
                if i == 3 {
                    (i, Err(Error::numeric("injected")))
                } else {
                    (i, Ok(ok(i)))
                }
            })
            .collect();
        let lax = EnsembleOptions {
            max_failure_fraction: 0.05,
            ..opts
        };
        let ens = reduce_ensemble(results, 50, 1.0, &lax).unwrap();
        assert_eq!(ens.failures.len(), 1);
        assert_eq!(ens.failures[0].0, 3);
        assert_eq!(ens.trajectories.len(), 49);
        // Config errors abort regardless of the budget.
        let results: Vec<(usize, Result<TrajectoryResult>)> =
            vec![(0, Err(Error::config("bad"))), (1, Ok(ok(1)))];
        assert!(matches!(
            reduce_ensemble(results, 2, 1.0, &lax),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn disjoint_seed_ranges_agree_within_errors() {
        let s = rb85();
        let grid = Arc::new(Grid::default_for(&s));
        let params = LatticeParams::new(831.0, -7.8, 0.10).unwrap();
        let sys = spectral::solve_eigensystem(&params, 0.0, &grid, 1, &s).unwrap();
        let k = s.wavenumber();
        let obs = move |psi: &WaveFunction| psi.expect_redistribution(k, 0.0);
        let protocol = free_protocol(10e-6, 0.5e-6);
        let jumps = JumpSettings::default();
        let setup = |_rng: &mut ChaCha8Rng, _i: usize| Ok((params, sys.state(0).clone()));
        let opts = EnsembleOptions::default();
        let a = run_ensemble(48, 1_000, &s, &protocol, &jumps, &obs, setup, &opts).unwrap();
        let b =
            run_ensemble(48, 9_000_000, &s, &protocol, &jumps, &obs, setup, &opts).unwrap();
        let mut violations = 0usize;
        let n = a.trace.len();
        for i in 0..n {
            let d = (a.trace.values()[i] - b.trace.values()[i]).abs();
            let se = (a.trace.stderr().unwrap()[i].powi(2)
                + b.trace.stderr().unwrap()[i].powi(2))
            .sqrt();
            if d > 3.0 * se.max(1e-12) {
                violations += 1;
            }
        }
        assert!(
            violations as f64 <= 0.02 * n as f64,
            "{violations} of {n} samples disagree beyond 3 standard errors"
        );
    }
}
