//! Complex amplitudes on a periodic spatial grid.

use std::sync::Arc;

use num_complex::Complex64 as C64;

use crate::error::{Error, Result};
use crate::grid::Grid;

/// A single-particle wave function sampled on a [`Grid`], normalized so that
/// Σ|ψᵢ|² Δz = 1 between quantum jumps.
#[derive(Debug, Clone)]
pub struct WaveFunction {
    grid: Arc<Grid>,
    amplitudes: Vec<C64>,
    /// Simulation time the amplitudes refer to (s).
    pub time: f64,
}

impl WaveFunction {
    pub fn new(grid: Arc<Grid>, amplitudes: Vec<C64>, time: f64) -> Result<Self> {
        if amplitudes.len() != grid.points() {
            return Err(Error::usage(format!(
                "amplitude count {} does not match grid point count {}",
                amplitudes.len(),
                grid.points()
            )));
        }
        Ok(Self {
            grid,
            amplitudes,
            time,
        })
    }

    /// Normalized Gaussian packet centered at `center` with width `sigma`,
    /// carrying mean momentum `ħ k0`.
    pub fn gaussian(grid: Arc<Grid>, center: f64, sigma: f64, k0: f64) -> Self {
        let mut amplitudes = Vec::with_capacity(grid.points());
        for i in 0..grid.points() {
            let z = grid.position(i) - center;
            let envelope = (-z * z / (4.0 * sigma * sigma)).exp();
            let phase = C64::new(0.0, k0 * z).exp();
            amplitudes.push(envelope * phase);
        }
        let mut wf = Self {
            grid,
            amplitudes,
            time: 0.0,
        };
        wf.renormalize();
        wf
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn amplitudes(&self) -> &[C64] {
        &self.amplitudes
    }

    pub fn amplitudes_mut(&mut self) -> &mut [C64] {
        &mut self.amplitudes
    }

    /// Σ|ψᵢ|² Δz.
    pub fn norm_sq(&self) -> f64 {
        let sum: f64 = self.amplitudes.iter().map(|a| a.norm_sqr()).sum();
        sum * self.grid.spacing()
    }

    pub fn renormalize(&mut self) {
        let n = self.norm_sq().sqrt();
        if n > 0.0 {
            let inv = 1.0 / n;
            for a in &mut self.amplitudes {
                *a *= inv;
            }
        }
    }

    /// ⟨φ|ψ⟩ with the Δz measure.
    pub fn inner(&self, other: &Self) -> C64 {
        let sum: C64 = self
            .amplitudes
            .iter()
            .zip(&other.amplitudes)
            .map(|(a, b)| a.conj() * b)
            .sum();
        sum * self.grid.spacing()
    }

    /// Expectation of an arbitrary real function of position.
    pub fn expect_position_fn(&self, f: impl Fn(f64) -> f64) -> f64 {
        let dz = self.grid.spacing();
        self.amplitudes
            .iter()
            .enumerate()
            .map(|(i, a)| a.norm_sqr() * f(self.grid.position(i)))
            .sum::<f64>()
            * dz
    }

    /// Photon-redistribution observable ⟨sin(2k(z − offset))⟩, the force
    /// proxy for a cos² lattice centered at `offset`.
    pub fn expect_redistribution(&self, wavenumber: f64, offset: f64) -> f64 {
        self.expect_position_fn(|z| (2.0 * wavenumber * (z - offset)).sin())
    }

    /// Mean displacement from `center`, folded into one well, in units of λ.
    pub fn mean_position_folded(&self, center: f64) -> f64 {
        let g = self.grid.clone();
        self.expect_position_fn(|z| g.fold_to_well(z - center)) / self.grid.wavelength()
    }

    /// RMS position spread about `center`, folded into one well (m).
    pub fn position_spread_folded(&self, center: f64) -> f64 {
        let g = self.grid.clone();
        let m1 = self.expect_position_fn(|z| g.fold_to_well(z - center));
        let m2 = self.expect_position_fn(|z| {
            let d = g.fold_to_well(z - center);
            d * d
        });
        (m2 - m1 * m1).max(0.0).sqrt()
    }

    pub fn has_non_finite(&self) -> bool {
        self.amplitudes
            .iter()
            .any(|a| !a.re.is_finite() || !a.im.is_finite())
    }
}
