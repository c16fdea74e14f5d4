//! Periodic spatial grid covering an integer number of lattice wells.

use crate::error::{Error, Result};
use crate::lattice::AtomSpecies;

/// Uniform periodic grid over `wells` lattice periods (domain length
/// `wells * λ/2`), with the integrator time step used on it.
///
/// The grid must resolve the lattice (Δz ≤ λ/64) and the time step must stay
/// below the anti-aliasing bound: the kinetic phase advance per step at the
/// momentum cutoff, `ħ q_max²/2m · dt`, must be < π/4.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    points: usize,
    wells: usize,
    dt: f64,
    wavelength: f64,
    length: f64,
    spacing: f64,
}

impl Grid {
    pub const MIN_POINTS: usize = 256;

    pub fn new(points: usize, wells: usize, dt: f64, species: &AtomSpecies) -> Result<Self> {
        if !points.is_power_of_two() || points < Self::MIN_POINTS {
            return Err(Error::config(format!(
                "grid points must be a power of two >= {}, got {}",
                Self::MIN_POINTS,
                points
            )));
        }
        if wells == 0 || points % wells != 0 {
            return Err(Error::config(format!(
                "well count must be positive and divide the point count \
                 (got {wells} wells, {points} points)"
            )));
        }
        if !(dt > 0.0) {
            return Err(Error::config("time step must be positive"));
        }
        let lambda = species.wavelength;
        let length = wells as f64 * lambda / 2.0;
        let spacing = length / points as f64;
        if spacing > lambda / 64.0 * (1.0 + 1e-12) {
            return Err(Error::config(format!(
                "grid spacing {:.3e} m does not resolve the lattice \
                 (needs <= lambda/64 = {:.3e} m); use more points or fewer wells",
                spacing,
                lambda / 64.0
            )));
        }
        let grid = Self {
            points,
            wells,
            dt,
            wavelength: lambda,
            length,
            spacing,
        };
        let max_phase = grid.max_kinetic_frequency(species) * dt;
        if max_phase >= std::f64::consts::FRAC_PI_4 {
            return Err(Error::config(format!(
                "time step {:.3e} s violates the anti-aliasing bound: kinetic phase \
                 per step at the momentum cutoff is {:.3} rad (must be < pi/4); \
                 reduce dt or the momentum cutoff",
                dt, max_phase
            )));
        }
        Ok(grid)
    }

    /// Default grid: 512 points over 8 wells, dt = 5 ns.
    pub fn default_for(species: &AtomSpecies) -> Self {
        Self::new(512, 8, 5e-9, species).expect("default grid is valid")
    }

    pub fn points(&self) -> usize {
        self.points
    }

    pub fn wells(&self) -> usize {
        self.wells
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Domain length (m).
    pub fn length(&self) -> f64 {
        self.length
    }

    /// Grid spacing Δz (m).
    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn wavelength(&self) -> f64 {
        self.wavelength
    }

    /// Points per λ/2 well.
    pub fn points_per_well(&self) -> usize {
        self.points / self.wells
    }

    /// Position of grid point `i` (m), domain [0, L).
    pub fn position(&self, i: usize) -> f64 {
        i as f64 * self.spacing
    }

    /// Momentum-space wavenumber of FFT bin `m` (1/m), standard FFT layout.
    pub fn fft_wavenumber(&self, m: usize) -> f64 {
        let dq = 2.0 * std::f64::consts::PI / self.length;
        let half = self.points / 2;
        if m < half {
            m as f64 * dq
        } else {
            (m as f64 - self.points as f64) * dq
        }
    }

    /// Largest kinetic frequency representable on the grid,
    /// ħ q_max²/2m with q_max = π/Δz (rad/s).
    pub fn max_kinetic_frequency(&self, species: &AtomSpecies) -> f64 {
        let ratio = self.points as f64 / self.wells as f64;
        species.recoil_frequency() * ratio * ratio
    }

    /// Fold a displacement from a well center into [−λ/4, λ/4).
    pub fn fold_to_well(&self, displacement: f64) -> f64 {
        let period = self.wavelength / 2.0;
        let mut d = displacement.rem_euclid(period);
        if d >= period / 2.0 {
            d -= period;
        }
        d
    }
}
