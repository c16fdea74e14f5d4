//! Run configuration: a sectioned TOML file plus flag overrides.
//!
//! Precedence: command-line flags over environment variables over the
//! config file over built-in defaults. The defaults alone reproduce the
//! headline echo scenario (U₀ = 831 E_R, δ = −7.8 Γ, dz = 0.10 λ,
//! Δt = 32 μs, Δt_ref = 108 μs).

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use lattice_echo::dynamics::{EnsembleOptions, JumpSettings, RateMode, RecoilModel};
use lattice_echo::experiment::{
    thermal_temperature_for_spread, ExperimentConfig, InitialStateSpec, ObservableKind,
    LOCALIZED_SPREAD_LAMBDA,
};
use lattice_echo::spectral;
use lattice_echo::{AtomSpecies, Grid, LatticeParams};

pub const ENV_OUTDIR: &str = "LATTICE_ECHO_OUTDIR";
pub const ENV_WORKERS: &str = "LATTICE_ECHO_WORKERS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub species: SpeciesConfig,
    pub lattice: LatticeConfig,
    pub grid: GridConfig,
    pub initial: InitialConfig,
    pub protocol: ProtocolConfig,
    pub scattering: ScatteringConfig,
    pub run: RunSection,
    pub output: OutputConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            species: SpeciesConfig::default(),
            lattice: LatticeConfig::default(),
            grid: GridConfig::default(),
            initial: InitialConfig::default(),
            protocol: ProtocolConfig::default(),
            scattering: ScatteringConfig::default(),
            run: RunSection::default(),
            output: OutputConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpeciesConfig {
    /// Atomic mass in unified mass units.
    pub mass_u: f64,
    pub wavelength_nm: f64,
    /// Natural linewidth Γ/2π in MHz.
    pub linewidth_mhz: f64,
    pub transition: String,
}

impl Default for SpeciesConfig {
    fn default() -> Self {
        Self {
            mass_u: 85.0,
            wavelength_nm: 780.0,
            linewidth_mhz: 5.89,
            transition: "5S1/2(F=3) -> 5P3/2(F'=4)".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatticeConfig {
    pub depth_er: f64,
    pub detuning_gamma: f64,
    pub dz_lambda: f64,
    pub depth_spread: f64,
    pub shift_ramp_us: f64,
}

impl Default for LatticeConfig {
    fn default() -> Self {
        Self {
            depth_er: 831.0,
            detuning_gamma: -7.8,
            dz_lambda: 0.10,
            depth_spread: 0.0,
            shift_ramp_us: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub points: usize,
    pub wells: usize,
    pub dt_ns: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            points: 512,
            wells: 8,
            dt_ns: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitialConfig {
    /// "ground" or "thermal".
    pub kind: String,
    /// k_B T in recoil energies; omitted for thermal means "choose the
    /// temperature whose spread is λ/18".
    pub temperature_er: Option<f64>,
}

impl Default for InitialConfig {
    fn default() -> Self {
        Self {
            kind: "ground".into(),
            temperature_er: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub delta_t_us: f64,
    pub delta_t_ref_us: f64,
    pub record_end_us: f64,
    pub output_dt_us: f64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            delta_t_us: 32.0,
            delta_t_ref_us: 108.0,
            record_end_us: 60.0,
            output_dt_us: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScatteringConfig {
    pub scale: f64,
    /// "absorption-emission" or "emission-only".
    pub recoil: String,
    /// "weighted" or "uniform".
    pub rate_mode: String,
    /// Scattering scale of the reference run; omitted means same as signal.
    pub reference_scale: Option<f64>,
}

impl Default for ScatteringConfig {
    fn default() -> Self {
        Self {
            scale: 1.0,
            recoil: "absorption-emission".into(),
            rate_mode: "weighted".into(),
            reference_scale: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub n_traj: usize,
    pub base_seed: u64,
    /// Worker threads for parallel ensembles; 0 = available parallelism.
    pub workers: usize,
    pub normalize: bool,
    /// "redistribution" or "mean-position".
    pub observable: String,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            n_traj: 200,
            base_seed: 1,
            workers: 0,
            normalize: true,
            observable: "redistribution".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config file {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// Serialize back to TOML (round-trips with [`RunConfig::from_file`]).
    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn apply_env(&mut self) {
        if let Ok(dir) = std::env::var(ENV_OUTDIR) {
            if !dir.is_empty() {
                self.output.dir = PathBuf::from(dir);
            }
        }
        if let Ok(w) = std::env::var(ENV_WORKERS) {
            if let Ok(n) = w.parse() {
                self.run.workers = n;
            }
        }
    }

    pub fn species(&self) -> anyhow::Result<AtomSpecies> {
        Ok(AtomSpecies::new(
            self.species.mass_u * lattice_echo::lattice::ATOMIC_MASS_UNIT,
            self.species.wavelength_nm * 1e-9,
            2.0 * std::f64::consts::PI * self.species.linewidth_mhz * 1e6,
            self.species.transition.clone(),
        )?)
    }

    pub fn lattice_params(&self) -> anyhow::Result<LatticeParams> {
        Ok(LatticeParams::new(
            self.lattice.depth_er,
            self.lattice.detuning_gamma,
            self.lattice.dz_lambda,
        )?
        .with_depth_spread(self.lattice.depth_spread)?
        .with_shift_ramp(self.lattice.shift_ramp_us * 1e-6)?)
    }

    /// Resolve into the experiment-level configuration, solving for the
    /// auto thermal temperature when requested.
    pub fn experiment(&self) -> anyhow::Result<ExperimentConfig> {
        let species = self.species()?;
        let grid = Arc::new(Grid::new(
            self.grid.points,
            self.grid.wells,
            self.grid.dt_ns * 1e-9,
            &species,
        )?);
        let params = self.lattice_params()?;

        let initial = match self.initial.kind.as_str() {
            "ground" => InitialStateSpec::Ground,
            "thermal" => {
                let temperature_er = match self.initial.temperature_er {
                    Some(t) => t,
                    None => {
                        let sys = spectral::solve_eigensystem_default(
                            &params, 0.0, &grid, &species,
                        )?;
                        thermal_temperature_for_spread(&sys, LOCALIZED_SPREAD_LAMBDA)?
                    }
                };
                InitialStateSpec::Thermal { temperature_er }
            }
            other => bail!("unknown initial state kind {other:?} (ground|thermal)"),
        };

        let recoil = match self.scattering.recoil.as_str() {
            "absorption-emission" => RecoilModel::AbsorptionEmission,
            "emission-only" => RecoilModel::EmissionOnly,
            other => bail!("unknown recoil model {other:?}"),
        };
        let rate_mode = match self.scattering.rate_mode.as_str() {
            "weighted" => RateMode::IntensityWeighted,
            "uniform" => RateMode::Uniform,
            other => bail!("unknown rate mode {other:?}"),
        };
        let observable = match self.run.observable.as_str() {
            "redistribution" => ObservableKind::Redistribution,
            "mean-position" => ObservableKind::MeanPosition,
            other => bail!("unknown observable {other:?}"),
        };

        Ok(ExperimentConfig {
            species,
            grid,
            params,
            initial,
            jumps: JumpSettings {
                scattering_scale: self.scattering.scale,
                recoil,
                rate_mode,
            },
            reference_scattering_scale: self.scattering.reference_scale,
            n_traj: self.run.n_traj,
            base_seed: self.run.base_seed,
            delta_t_ref: self.protocol.delta_t_ref_us * 1e-6,
            record_end: self.protocol.record_end_us * 1e-6,
            output_dt: self.protocol.output_dt_us * 1e-6,
            observable,
            normalize: self.run.normalize,
            ensemble: EnsembleOptions::default(),
        })
    }
}
