//! Simulation of motional wave-packet echoes for atoms trapped in a 1D
//! optical lattice.
//!
//! A wave packet is launched by translating the lattice non-adiabatically,
//! dephases through the anharmonicity of the wells, and is refocused into an
//! echo by a second translation after a delay. Spontaneous photon scattering
//! is modeled with stochastic quantum jumps on top of split-operator coherent
//! propagation, so the echo amplitude decay gives direct access to the
//! motional coherence time.
//!
//! The crate is organized along the simulation pipeline:
//!
//! - [`lattice`]: atomic species constants, lattice parameters and the
//!   closed-form scaling relations (oscillation frequency, scattering rate,
//!   dephasing spread).
//! - [`grid`] / [`wavefunction`]: periodic spatial grid and complex
//!   amplitudes on it.
//! - [`spectral`]: eigenstates of the (shifted) lattice wells, used for state
//!   preparation and echo-mechanism diagnostics.
//! - [`dynamics`]: split-operator propagation, quantum jumps, and
//!   deterministic trajectory ensembles (parallel with the `parallel`
//!   feature, sequential otherwise).
//! - [`experiment`]: shift protocols, echo runs, delay and detuning scans.
//! - [`analysis`]: oscillation-period extraction, damped-oscillation and
//!   coherence-time fits, echo envelopes.

pub mod analysis;
pub mod dynamics;
pub mod error;
pub mod experiment;
pub mod grid;
pub mod lattice;
pub mod spectral;
pub mod wavefunction;

pub use error::{Error, Result};
pub use grid::Grid;
pub use lattice::{AtomSpecies, DerivedScales, LatticeParams};
pub use wavefunction::WaveFunction;
