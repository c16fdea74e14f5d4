//! Atomic species constants, lattice parameters, and the closed-form scaling
//! relations between depth, oscillation frequency, scattering rate and
//! dephasing.
//!
//! All user-facing quantities are dimensionless in natural units (recoil
//! energy `E_R` for depths, natural linewidth `Γ` for detunings, wavelength
//! `λ` for lengths); conversion to SI happens once inside [`AtomSpecies`].

use crate::error::{Error, Result};

/// Reduced Planck constant (J s).
pub const HBAR: f64 = 1.054_571_817e-34;
/// Atomic mass unit (kg).
pub const ATOMIC_MASS_UNIT: f64 = 1.660_539_068_92e-27;

/// Empirical anharmonicity factor relating the measured packet oscillation
/// frequency to the harmonic well frequency: ω_osc = 0.86 ω_harm.
pub const ANHARMONIC_FREQ_FACTOR: f64 = 0.86;
/// Empirical factor for the mean anharmonic shift of the oscillation
/// frequencies entering the dephasing spread Δω_osc = 0.14 ω_osc − ω_R.
pub const FREQ_SPREAD_FACTOR: f64 = 0.14;

/// Single-point calibration anchor for [`calibrate_depth`]:
/// 56.5 mW/cm² at 7.8 Γ red detuning corresponds to 823 E_R.
const DEPTH_CAL_INTENSITY: f64 = 56.5;
const DEPTH_CAL_DETUNING: f64 = 7.8;
const DEPTH_CAL_DEPTH: f64 = 823.0;

/// An atomic species trapped in the lattice, with the derived recoil scales
/// computed once at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct AtomSpecies {
    /// Atomic mass (kg).
    pub mass: f64,
    /// Lattice light wavelength (m).
    pub wavelength: f64,
    /// Natural linewidth Γ of the trapping transition (angular, rad/s).
    pub linewidth: f64,
    /// Human-readable transition label.
    pub transition: String,
    wavenumber: f64,
    recoil_energy: f64,
    recoil_frequency: f64,
}

impl AtomSpecies {
    pub fn new(
        mass: f64,
        wavelength: f64,
        linewidth: f64,
        transition: impl Into<String>,
    ) -> Result<Self> {
        if !(mass > 0.0) || !(wavelength > 0.0) || !(linewidth > 0.0) {
            return Err(Error::config(
                "species mass, wavelength and linewidth must all be positive",
            ));
        }
        let wavenumber = 2.0 * std::f64::consts::PI / wavelength;
        let recoil_energy = (HBAR * wavenumber).powi(2) / (2.0 * mass);
        let recoil_frequency = recoil_energy / HBAR;
        Ok(Self {
            mass,
            wavelength,
            linewidth,
            transition: transition.into(),
            wavenumber,
            recoil_energy,
            recoil_frequency,
        })
    }

    /// Default species: ⁸⁵Rb on the 780 nm line, Γ/2π = 5.89 MHz, mass 85 u.
    pub fn rb85() -> Self {
        Self::new(
            85.0 * ATOMIC_MASS_UNIT,
            780e-9,
            2.0 * std::f64::consts::PI * 5.89e6,
            "5S1/2(F=3) -> 5P3/2(F'=4)",
        )
        .expect("rb85 constants are valid")
    }

    /// Lattice wavenumber k = 2π/λ (1/m).
    pub fn wavenumber(&self) -> f64 {
        self.wavenumber
    }

    /// Recoil energy E_R = (ħk)²/2m (J).
    pub fn recoil_energy(&self) -> f64 {
        self.recoil_energy
    }

    /// Recoil frequency ω_R = E_R/ħ (rad/s).
    pub fn recoil_frequency(&self) -> f64 {
        self.recoil_frequency
    }

    /// Single-photon recoil momentum ħk (kg m/s).
    pub fn recoil_momentum(&self) -> f64 {
        HBAR * self.wavenumber
    }
}

/// Lattice parameters in natural units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatticeParams {
    /// Potential depth U₀ in recoil energies.
    pub depth_er: f64,
    /// Detuning δ in linewidths Γ; negative means red detuning.
    pub detuning_gamma: f64,
    /// Lattice translation dz as a fraction of λ, in [0, 1/4).
    pub dz: f64,
    /// Relative 1σ spread of the depth across the ensemble, in [0, 1).
    pub depth_spread: f64,
    /// 1/e time of the exponential shift ramp (s); 0 means instantaneous.
    pub shift_ramp_time: f64,
}

impl LatticeParams {
    pub fn new(depth_er: f64, detuning_gamma: f64, dz: f64) -> Result<Self> {
        let params = Self {
            depth_er,
            detuning_gamma,
            dz,
            depth_spread: 0.0,
            shift_ramp_time: 0.0,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn with_depth_spread(mut self, depth_spread: f64) -> Result<Self> {
        self.depth_spread = depth_spread;
        self.validate()?;
        Ok(self)
    }

    pub fn with_shift_ramp(mut self, ramp_time: f64) -> Result<Self> {
        self.shift_ramp_time = ramp_time;
        self.validate()?;
        Ok(self)
    }

    /// Depth zero is tolerated so that free-particle spectra can be inspected;
    /// operations that require a trapping well reject it individually.
    pub fn validate(&self) -> Result<()> {
        if !(self.depth_er >= 0.0) {
            return Err(Error::config(format!(
                "lattice depth must be non-negative, got {} E_R",
                self.depth_er
            )));
        }
        if !(self.dz >= 0.0 && self.dz < 0.25) {
            return Err(Error::config(format!(
                "lattice shift dz must lie in [0, 0.25) lambda, got {}",
                self.dz
            )));
        }
        if !(self.depth_spread >= 0.0 && self.depth_spread < 1.0) {
            return Err(Error::config(format!(
                "depth spread must lie in [0, 1), got {}",
                self.depth_spread
            )));
        }
        if !(self.shift_ramp_time >= 0.0) {
            return Err(Error::config("shift ramp time must be non-negative"));
        }
        Ok(())
    }

    /// Depth in joules for the given species.
    pub fn depth_j(&self, species: &AtomSpecies) -> f64 {
        self.depth_er * species.recoil_energy()
    }

    /// Shift in meters for the given species.
    pub fn shift_m(&self, species: &AtomSpecies) -> f64 {
        self.dz * species.wavelength
    }
}

/// Scales derived from a (species, lattice) pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DerivedScales {
    /// Wave-packet oscillation frequency ω_osc (rad/s).
    pub osc_frequency: f64,
    /// Spread of oscillation frequencies Δω_osc (rad/s).
    pub dephasing_spread: f64,
    /// Photon scattering rate Γ′ (1/s).
    pub scattering_rate: f64,
    /// Photon scattering time τ_sc = 1/Γ′ (s).
    pub scattering_time: f64,
}

impl DerivedScales {
    pub fn new(params: &LatticeParams, species: &AtomSpecies) -> Result<Self> {
        let osc = osc_frequency(params.depth_er, species)?;
        let spread = dephasing_spread(osc, species)?;
        let rate = scattering_rate(params.depth_er, params.detuning_gamma, species)?;
        Ok(Self {
            osc_frequency: osc,
            dephasing_spread: spread,
            scattering_rate: rate,
            scattering_time: 1.0 / rate,
        })
    }

    /// Predicted dephasing time τ₁ = 1/Δω_osc (s).
    pub fn dephasing_time(&self) -> f64 {
        1.0 / self.dephasing_spread
    }

    /// Oscillation period 2π/ω_osc (s).
    pub fn osc_period(&self) -> f64 {
        2.0 * std::f64::consts::PI / self.osc_frequency
    }
}

/// Lattice potential U(z) = −U₀ cos²(k(z − shift)) at a point (J).
///
/// Periodic with period λ/2; minimum −U₀ at z = shift (mod λ/2).
pub fn potential(z: f64, shift: f64, params: &LatticeParams, species: &AtomSpecies) -> f64 {
    let u0 = params.depth_j(species);
    let c = (species.wavenumber() * (z - shift)).cos();
    -u0 * c * c
}

/// Photon scattering rate Γ′ = U₀ Γ / (ħ|δ|) (1/s).
///
/// With U₀ in recoil energies and δ in linewidths the linewidth cancels:
/// Γ′ = U₀[E_R] ω_R / |δ[Γ]|.
pub fn scattering_rate(depth_er: f64, detuning_gamma: f64, species: &AtomSpecies) -> Result<f64> {
    if detuning_gamma == 0.0 {
        return Err(Error::config(
            "scattering rate is undefined at zero detuning",
        ));
    }
    Ok(depth_er * species.recoil_frequency() / detuning_gamma.abs())
}

/// Wave-packet oscillation frequency ω_osc = 2 ω_R · 0.86 · √(U₀/E_R)
/// (rad/s), inverting U₀/E_R = (1/0.86²)(ω_osc/2ω_R)².
pub fn osc_frequency(depth_er: f64, species: &AtomSpecies) -> Result<f64> {
    if !(depth_er > 0.0) {
        return Err(Error::config(
            "oscillation frequency requires a positive lattice depth",
        ));
    }
    Ok(2.0 * species.recoil_frequency() * ANHARMONIC_FREQ_FACTOR * depth_er.sqrt())
}

/// Inverse of [`osc_frequency`]: depth in E_R from an oscillation frequency.
pub fn depth_from_osc_frequency(osc_frequency: f64, species: &AtomSpecies) -> f64 {
    let ratio = osc_frequency / (2.0 * species.recoil_frequency() * ANHARMONIC_FREQ_FACTOR);
    ratio * ratio
}

/// Mean spread of oscillation frequencies Δω_osc = 0.14 ω_osc − ω_R (rad/s).
///
/// The model only predicts a spread when the anharmonic shift exceeds the
/// common recoil shift; shallow lattices are a domain error.
pub fn dephasing_spread(osc_frequency: f64, species: &AtomSpecies) -> Result<f64> {
    let spread = FREQ_SPREAD_FACTOR * osc_frequency - species.recoil_frequency();
    if spread <= 0.0 {
        return Err(Error::config(format!(
            "no anharmonic dephasing spread: 0.14*omega_osc = {:.4e} rad/s does not \
             exceed omega_R = {:.4e} rad/s (lattice too shallow for this model)",
            FREQ_SPREAD_FACTOR * osc_frequency,
            species.recoil_frequency()
        )));
    }
    Ok(spread)
}

/// Lattice depth (E_R) from beam intensity (mW/cm²) and detuning (Γ units),
/// U₀ = C·I/|δ|, with C fixed by the single published anchor point.
pub fn calibrate_depth(intensity: f64, detuning_gamma: f64) -> Result<f64> {
    if !(intensity > 0.0) {
        return Err(Error::config("intensity must be positive"));
    }
    if detuning_gamma == 0.0 {
        return Err(Error::config(
            "depth calibration is undefined at zero detuning",
        ));
    }
    let c = DEPTH_CAL_DEPTH * DEPTH_CAL_DETUNING / DEPTH_CAL_INTENSITY;
    Ok(c * intensity / detuning_gamma.abs())
}
