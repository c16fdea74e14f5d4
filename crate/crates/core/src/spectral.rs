//! Eigenstates of the (shifted) lattice potential.
//!
//! The Hamiltonian H = p²/2m − U₀ cos²(k(z − shift)) is diagonalized in the
//! λ/2-periodic plane-wave basis e^{i 2kj z}: the potential carries a single
//! Fourier component, so it couples j ↔ j±1 and the matrix is Hermitian
//! tridiagonal. One state per well level results (no quasi-momentum
//! multiplets), defined on the full simulation grid so that prepared states
//! and eigenstates share a representation. Exact degeneracies (free-particle
//! and continuum ± pairs) are resolved into parity eigenstates, even before
//! odd.

use std::sync::Arc;

use nalgebra::DMatrix;
use num_complex::Complex64 as C64;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::lattice::{AtomSpecies, LatticeParams, HBAR};
use crate::wavefunction::WaveFunction;

/// Number of continuum states kept above the bound spectrum by
/// [`solve_eigensystem_default`].
pub const DEFAULT_CONTINUUM_STATES: usize = 10;

/// Relative energy splitting below which two states are treated as a
/// degenerate pair for parity canonicalization.
const DEGENERACY_TOL: f64 = 1e-9;

/// The lowest eigenpairs of the shifted lattice Hamiltonian.
#[derive(Debug, Clone)]
pub struct EigenSystem {
    energies: Vec<f64>,
    states: Vec<WaveFunction>,
    /// Plane-wave coefficients of each state over q = 2k·j,
    /// j ∈ [−(J−1), J−1].
    coefficients: Vec<Vec<C64>>,
    potential_shift: f64,
    depth_er: f64,
    grid: Arc<Grid>,
    species: AtomSpecies,
}

impl EigenSystem {
    /// Energies in ascending order (J).
    pub fn energies(&self) -> &[f64] {
        &self.energies
    }

    pub fn states(&self) -> &[WaveFunction] {
        &self.states
    }

    pub fn state(&self, n: usize) -> &WaveFunction {
        &self.states[n]
    }

    pub fn len(&self) -> usize {
        self.energies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.energies.is_empty()
    }

    pub fn potential_shift(&self) -> f64 {
        self.potential_shift
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    /// Number of bound states (E < 0).
    pub fn n_bound(&self) -> usize {
        self.energies.iter().filter(|e| **e < 0.0).count()
    }

    /// Depth of the potential these states belong to (E_R units).
    pub fn depth_er(&self) -> f64 {
        self.depth_er
    }

    /// Recoil energy of the species the system was solved for (J).
    pub fn species_recoil_energy(&self) -> f64 {
        self.species.recoil_energy()
    }

    /// State `n` translated by `displacement`, via phases on the plane-wave
    /// coefficients.
    pub fn translated_state(&self, n: usize, displacement: f64) -> WaveFunction {
        let two_k = 2.0 * self.species.wavenumber();
        let basis = BasisIndex::new(self.coefficients[n].len());
        let shifted: Vec<C64> = self
            .coefficients[n]
            .iter()
            .enumerate()
            .map(|(idx, c)| {
                let j = basis.j(idx) as f64;
                c * C64::new(0.0, -two_k * j * displacement).exp()
            })
            .collect();
        synthesize(&self.grid, &shifted)
    }

    /// Largest relative eigen-residual ‖Hφₙ − Eₙφₙ‖ / max(|Eₙ|, E_R) over
    /// the retained states, evaluated in the plane-wave basis.
    pub fn max_relative_residual(&self) -> f64 {
        let er = self.species.recoil_energy();
        let u0 = self.depth_er * er;
        let phase =
            C64::new(0.0, 2.0 * self.species.wavenumber() * self.potential_shift).exp();
        let mut worst: f64 = 0.0;
        for (coeffs, &energy) in self.coefficients.iter().zip(&self.energies) {
            let basis = BasisIndex::new(coeffs.len());
            let mut res_sq = 0.0;
            for idx in 0..coeffs.len() {
                let j = basis.j(idx) as f64;
                let mut h = (4.0 * j * j * er - 0.5 * u0 - energy) * coeffs[idx];
                if idx > 0 {
                    h -= 0.25 * u0 * phase.conj() * coeffs[idx - 1];
                }
                if idx + 1 < coeffs.len() {
                    h -= 0.25 * u0 * phase * coeffs[idx + 1];
                }
                res_sq += h.norm_sqr();
            }
            let scale = energy.abs().max(er);
            worst = worst.max(res_sq.sqrt() / scale);
        }
        worst
    }
}

/// A wave packet decomposed over the retained eigenstates.
#[derive(Debug, Clone)]
pub struct ModeDecomposition {
    /// cₙ = ⟨φₙ|ψ⟩ for each retained eigenstate.
    pub coefficients: Vec<C64>,
    /// Σ|cₙ|² over the retained modes.
    pub kept_fraction: f64,
}

/// Maps contiguous storage indices to plane-wave orders j ∈ [−(J−1), J−1].
struct BasisIndex {
    j_max: i64,
}

impl BasisIndex {
    fn new(size: usize) -> Self {
        Self {
            j_max: (size as i64 - 1) / 2,
        }
    }

    fn j(&self, idx: usize) -> i64 {
        idx as i64 - self.j_max
    }
}

/// Largest usable plane-wave basis size for a grid: orders up to one below
/// the grid momentum cutoff.
pub fn max_basis_size(grid: &Grid) -> usize {
    let j_cutoff = grid.points() / (2 * grid.wells());
    2 * (j_cutoff - 1) + 1
}

/// Solve for the `n_states` lowest eigenpairs of the shifted lattice
/// Hamiltonian on `grid`.
pub fn solve_eigensystem(
    params: &LatticeParams,
    shift: f64,
    grid: &Arc<Grid>,
    n_states: usize,
    species: &AtomSpecies,
) -> Result<EigenSystem> {
    let basis_size = max_basis_size(grid);
    if n_states == 0 {
        return Err(Error::usage("at least one eigenstate must be requested"));
    }
    if n_states > grid.points() / 4 {
        return Err(Error::usage(format!(
            "requested {} states exceeds the n_points/4 = {} limit",
            n_states,
            grid.points() / 4
        )));
    }
    if n_states > basis_size {
        return Err(Error::usage(format!(
            "requested {} states exceeds the {} plane-wave orders resolved by \
             this grid",
            n_states, basis_size
        )));
    }

    let er = species.recoil_energy();
    let u0 = params.depth_er * er;
    let two_k = 2.0 * species.wavenumber();
    let phase = C64::new(0.0, two_k * shift).exp();
    let index = BasisIndex::new(basis_size);

    let mut h = DMatrix::<C64>::zeros(basis_size, basis_size);
    for idx in 0..basis_size {
        let j = index.j(idx) as f64;
        h[(idx, idx)] = C64::new(4.0 * j * j * er - 0.5 * u0, 0.0);
        if idx + 1 < basis_size {
            // coupling by e^{±2ikz} with the shift phase
            h[(idx, idx + 1)] = -0.25 * u0 * phase;
            h[(idx + 1, idx)] = -0.25 * u0 * phase.conj();
        }
    }

    let eigen = nalgebra::SymmetricEigen::try_new(h, 1e-14, 100_000).ok_or_else(|| {
        Error::numeric(format!(
            "eigendecomposition of the {basis_size}x{basis_size} lattice \
             Hamiltonian did not converge"
        ))
    })?;

    // Ascending energy order.
    let mut order: Vec<usize> = (0..basis_size).collect();
    order.sort_by(|&a, &b| eigen.eigenvalues[a].total_cmp(&eigen.eigenvalues[b]));

    let mut energies: Vec<f64> = Vec::with_capacity(n_states);
    let mut coefficients: Vec<Vec<C64>> = Vec::with_capacity(n_states);
    for &col in order.iter().take(n_states) {
        energies.push(eigen.eigenvalues[col]);
        coefficients.push(eigen.eigenvectors.column(col).iter().copied().collect());
    }

    canonicalize_degenerate_pairs(&mut energies, &mut coefficients, two_k, shift, u0.max(er));
    for c in &mut coefficients {
        fix_gauge(c);
    }

    let states: Vec<WaveFunction> = coefficients
        .iter()
        .map(|c| synthesize(grid, c))
        .collect();

    let system = EigenSystem {
        energies,
        states,
        coefficients,
        potential_shift: shift,
        depth_er: params.depth_er,
        grid: grid.clone(),
        species: species.clone(),
    };

    let residual = system.max_relative_residual();
    if residual > 1e-8 {
        return Err(Error::numeric(format!(
            "eigendecomposition residual {residual:.3e} exceeds 1e-8 relative"
        )));
    }
    Ok(system)
}

/// Solve with the default state count: every bound state plus
/// [`DEFAULT_CONTINUUM_STATES`] continuum states.
pub fn solve_eigensystem_default(
    params: &LatticeParams,
    shift: f64,
    grid: &Arc<Grid>,
    species: &AtomSpecies,
) -> Result<EigenSystem> {
    let max_states = max_basis_size(grid).min(grid.points() / 4);
    let full = solve_eigensystem(params, shift, grid, max_states, species)?;
    let keep = (full.n_bound() + DEFAULT_CONTINUUM_STATES).min(full.len());
    Ok(EigenSystem {
        energies: full.energies[..keep].to_vec(),
        states: full.states[..keep].to_vec(),
        coefficients: full.coefficients[..keep].to_vec(),
        ..full
    })
}

/// Project a wave packet onto the retained eigenstates: cₙ = ⟨φₙ|ψ⟩.
pub fn project(psi: &WaveFunction, eigensystem: &EigenSystem) -> Result<ModeDecomposition> {
    if psi.grid().as_ref() != eigensystem.grid.as_ref() {
        return Err(Error::usage(
            "wave function and eigensystem live on different grids",
        ));
    }
    let coefficients: Vec<C64> = eigensystem
        .states
        .iter()
        .map(|phi| phi.inner(psi))
        .collect();
    let kept_fraction = coefficients.iter().map(|c| c.norm_sqr()).sum();
    Ok(ModeDecomposition {
        coefficients,
        kept_fraction,
    })
}

/// Rebuild the wave packet from a decomposition (identity on the retained
/// span).
pub fn reconstruct(
    decomposition: &ModeDecomposition,
    eigensystem: &EigenSystem,
) -> Result<WaveFunction> {
    if decomposition.coefficients.len() != eigensystem.len() {
        return Err(Error::usage(
            "decomposition length does not match the eigensystem",
        ));
    }
    let grid = eigensystem.grid.clone();
    let mut amplitudes = vec![C64::new(0.0, 0.0); grid.points()];
    for (c, phi) in decomposition
        .coefficients
        .iter()
        .zip(&eigensystem.states)
    {
        for (a, p) in amplitudes.iter_mut().zip(phi.amplitudes()) {
            *a += c * p;
        }
    }
    WaveFunction::new(grid, amplitudes, 0.0)
}

/// Echo-mechanism diagnostic: |Σₙ |cₙ|² e^{−iEₙt/ħ}| / Σₙ |cₙ|².
///
/// Near 1 whenever the retained eigenstate phases realign; invariant under a
/// global energy offset.
pub fn phase_alignment(
    decomposition: &ModeDecomposition,
    energies: &[f64],
    t: f64,
) -> Result<f64> {
    if decomposition.coefficients.is_empty() {
        return Err(Error::usage("empty decomposition"));
    }
    if decomposition.coefficients.len() != energies.len() {
        return Err(Error::usage(
            "decomposition and energy list have different lengths",
        ));
    }
    let mut sum = C64::new(0.0, 0.0);
    let mut weight = 0.0;
    for (c, &e) in decomposition.coefficients.iter().zip(energies) {
        let w = c.norm_sqr();
        sum += w * C64::new(0.0, -e * t / HBAR).exp();
        weight += w;
    }
    if weight == 0.0 {
        return Err(Error::usage("decomposition carries zero weight"));
    }
    Ok(sum.norm() / weight)
}

/// Build the grid samples of a λ/2-periodic plane-wave superposition.
///
/// Phases are generated from integer indices modulo the grid size, so the
/// samples are exactly periodic over one well.
fn synthesize(grid: &Arc<Grid>, coeffs: &[C64]) -> WaveFunction {
    let n = grid.points();
    let wells = grid.wells() as i64;
    let index = BasisIndex::new(coeffs.len());
    let twiddle: Vec<C64> = (0..n)
        .map(|m| C64::new(0.0, 2.0 * std::f64::consts::PI * m as f64 / n as f64).exp())
        .collect();
    let inv_sqrt_l = 1.0 / grid.length().sqrt();
    let mut amplitudes = vec![C64::new(0.0, 0.0); n];
    for (idx, c) in coeffs.iter().enumerate() {
        if c.norm_sqr() == 0.0 {
            continue;
        }
        let j = index.j(idx);
        for (i, a) in amplitudes.iter_mut().enumerate() {
            let m = (i as i64 * j * wells).rem_euclid(n as i64) as usize;
            *a += c * twiddle[m];
        }
    }
    for a in &mut amplitudes {
        *a *= inv_sqrt_l;
    }
    WaveFunction::new(grid.clone(), amplitudes, 0.0).expect("synthesis matches the grid")
}

/// Rotate exactly degenerate pairs into parity eigenstates about the well
/// center, even parity first.
fn canonicalize_degenerate_pairs(
    energies: &mut [f64],
    coefficients: &mut [Vec<C64>],
    two_k: f64,
    shift: f64,
    energy_scale: f64,
) {
    let n = energies.len();
    let mut i = 0;
    while i + 1 < n {
        let gap = (energies[i + 1] - energies[i]).abs();
        if gap > DEGENERACY_TOL * energy_scale.max(energies[i].abs()) {
            i += 1;
            continue;
        }
        // 2x2 parity block within the degenerate pair.
        let p00 = parity_overlap(&coefficients[i], &coefficients[i], two_k, shift);
        let p01 = parity_overlap(&coefficients[i], &coefficients[i + 1], two_k, shift);
        let p11 = parity_overlap(&coefficients[i + 1], &coefficients[i + 1], two_k, shift);
        // Hermitian eigenproblem for [[p00, p01], [p01*, p11]].
        let tr = p00.re + p11.re;
        let det = p00.re * p11.re - p01.norm_sqr();
        let disc = (tr * tr / 4.0 - det).max(0.0).sqrt();
        let lam_plus = tr / 2.0 + disc;
        // Eigenvector for the +1 (even) parity eigenvalue.
        let (alpha, beta) = if p01.norm() > 1e-12 {
            let beta = (lam_plus - p00.re) / p01.norm();
            (C64::new(1.0, 0.0), (p01 / p01.norm()).conj() * beta)
        } else if p00.re >= p11.re {
            (C64::new(1.0, 0.0), C64::new(0.0, 0.0))
        } else {
            (C64::new(0.0, 0.0), C64::new(1.0, 0.0))
        };
        let norm = (alpha.norm_sqr() + beta.norm_sqr()).sqrt();
        let (alpha, beta) = (alpha / norm, beta / norm);
        // Orthogonal partner carries the odd combination.
        let (gamma, delta) = (-beta.conj(), alpha.conj());
        let even: Vec<C64> = coefficients[i]
            .iter()
            .zip(&coefficients[i + 1])
            .map(|(a, b)| alpha * a + beta * b)
            .collect();
        let odd: Vec<C64> = coefficients[i]
            .iter()
            .zip(&coefficients[i + 1])
            .map(|(a, b)| gamma * a + delta * b)
            .collect();
        coefficients[i] = even;
        coefficients[i + 1] = odd;
        i += 2;
    }
}

/// ⟨a|P|b⟩ with parity about the well center: (Pc)_j = c_{−j} e^{−i 4kj s}.
fn parity_overlap(a: &[C64], b: &[C64], two_k: f64, shift: f64) -> C64 {
    let index = BasisIndex::new(a.len());
    let mut sum = C64::new(0.0, 0.0);
    for idx in 0..a.len() {
        let j = index.j(idx);
        let mirrored = (index.j_max - j) as usize; // storage index of -j
        let phase = C64::new(0.0, -2.0 * two_k * j as f64 * shift).exp();
        sum += a[idx].conj() * b[mirrored] * phase;
    }
    sum
}

/// Deterministic global phase: largest coefficient made real positive.
fn fix_gauge(coeffs: &mut [C64]) {
    let mut best = 0;
    let mut best_norm = 0.0;
    for (i, c) in coeffs.iter().enumerate() {
        if c.norm_sqr() > best_norm {
            best_norm = c.norm_sqr();
            best = i;
        }
    }
    if best_norm > 0.0 {
        let rot = coeffs[best].conj() / coeffs[best].norm();
        for c in coeffs.iter_mut() {
            *c *= rot;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use proptest::prelude::*;

    fn setup() -> (AtomSpecies, Arc<Grid>) {
        let s = AtomSpecies::rb85();
        let g = Arc::new(Grid::default_for(&s));
        (s, g)
    }

    /// Deep-lattice level energies from the standard continued asymptotic
    /// expansion of the Mathieu characteristic values (independent oracle).
    fn mathieu_level(depth_er: f64, r: usize) -> f64 {
        let q = depth_er / 4.0;
        let s = (2 * r + 1) as f64;
        let a = -2.0 * q + 2.0 * s * q.sqrt()
            - (s * s + 1.0) / 8.0
            - (s * s * s + 3.0 * s) / (128.0 * q.sqrt());
        a - depth_er / 2.0 // in units of E_R
    }

    /// Dense position-space finite-difference diagonalization of one well
    /// with a hand-rolled Jacobi eigensolver (independent oracle).
    fn fd_oracle_energies(depth_er: f64, species: &AtomSpecies, n: usize, keep: usize) -> Vec<f64> {
        let er = species.recoil_energy();
        let u0 = depth_er * er;
        let l = species.wavelength / 2.0;
        let dz = l / n as f64;
        let k = species.wavenumber();
        let t = lattice::HBAR * lattice::HBAR / (2.0 * 85.0 * lattice::ATOMIC_MASS_UNIT * dz * dz);
        // H = -t d2/dz2 (periodic) + V, scaled to E_R units for conditioning.
        let mut h = vec![vec![0.0f64; n]; n];
        for i in 0..n {
            let z = i as f64 * dz;
            let c = (k * z).cos();
            h[i][i] = (2.0 * t - u0 * c * c) / er;
            h[i][(i + 1) % n] = -t / er;
            h[(i + 1) % n][i] = -t / er;
        }
        jacobi_eigenvalues(&mut h, keep)
    }

    /// Classical Jacobi rotation eigensolver for a small symmetric matrix;
    /// returns the `keep` lowest eigenvalues.
    fn jacobi_eigenvalues(h: &mut [Vec<f64>], keep: usize) -> Vec<f64> {
        let n = h.len();
        for _sweep in 0..100 {
            let mut off = 0.0;
            for p in 0..n {
                for q in (p + 1)..n {
                    off += h[p][q] * h[p][q];
                }
            }
            if off < 1e-24 * n as f64 {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    if h[p][q].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (h[q][q] - h[p][p]) / (2.0 * h[p][q]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for i in 0..n {
                        let hip = h[i][p];
                        let hiq = h[i][q];
                        h[i][p] = c * hip - s * hiq;
                        h[i][q] = s * hip + c * hiq;
                    }
                    for i in 0..n {
                        let hpi = h[p][i];
                        let hqi = h[q][i];
                        h[p][i] = c * hpi - s * hqi;
                        h[q][i] = s * hpi + c * hqi;
                    }
                }
            }
        }
        let mut evals: Vec<f64> = (0..n).map(|i| h[i][i]).collect();
        evals.sort_by(f64::total_cmp);
        evals.truncate(keep);
        evals
    }

    #[test]
    fn bound_energies_match_the_fd_oracle() {
        let (s, g) = setup();
        let p = LatticeParams::new(831.0, -7.8, 0.0).unwrap();
        let sys = solve_eigensystem(&p, 0.0, &g, 10, &s).unwrap();
        let oracle = fd_oracle_energies(831.0, &s, 256, 10);
        for (n, (&e, &o)) in sys.energies().iter().zip(&oracle).enumerate() {
            let e_er = e / s.recoil_energy();
            assert!(
                (e_er - o).abs() <= 0.01 * o.abs(),
                "level {n}: plane-wave {e_er:.4} E_R vs FD oracle {o:.4} E_R"
            );
        }
    }

    #[test]
    fn deep_lattice_levels_match_mathieu_asymptotics() {
        let s = AtomSpecies::rb85();
        // Fine grid so the basis reaches the deep bound states.
        let g = Arc::new(Grid::new(512, 2, 4e-10, &s).unwrap());
        let p = LatticeParams::new(1e4, -7.8, 0.0).unwrap();
        let sys = solve_eigensystem(&p, 0.0, &g, 6, &s).unwrap();
        for r in 0..6 {
            let got = sys.energies()[r] / s.recoil_energy();
            let want = mathieu_level(1e4, r);
            assert_relative_eq!(got, want, max_relative = 1e-4);
        }
        // Harmonic limit: E1 - E0 -> 2 sqrt(U0 E_R) within 2%.
        let gap = (sys.energies()[1] - sys.energies()[0]) / s.recoil_energy();
        assert_relative_eq!(gap, 2.0 * 1e4f64.sqrt(), max_relative = 0.02);
    }

    #[test]
    fn level_spacing_sits_between_packet_and_harmonic_frequency() {
        // The lowest gap is the harmonic splitting minus one recoil; the
        // empirical packet frequency (0.86 of harmonic) lies below it.
        let (s, g) = setup();
        let p = LatticeParams::new(831.0, -7.8, 0.0).unwrap();
        let sys = solve_eigensystem(&p, 0.0, &g, 4, &s).unwrap();
        let gap = sys.energies()[1] - sys.energies()[0];
        let hbar_omega_osc = HBAR * lattice::osc_frequency(831.0, &s).unwrap();
        let hbar_omega_harm = 2.0 * (831.0f64).sqrt() * s.recoil_energy();
        assert!(gap > hbar_omega_osc && gap < hbar_omega_harm);
        // Mathieu asymptotics pin the gap to harmonic minus ~one recoil.
        let expect = (mathieu_level(831.0, 1) - mathieu_level(831.0, 0)) * s.recoil_energy();
        assert_relative_eq!(gap, expect, max_relative = 5e-3);
        let ratio = gap / hbar_omega_osc;
        assert!((1.10..1.18).contains(&ratio), "gap/(hbar omega_osc) = {ratio:.4}");
    }

    #[test]
    fn free_particle_energies_are_grid_momenta() {
        let (s, g) = setup();
        let p = LatticeParams::new(0.0, -7.8, 0.0).unwrap();
        let sys = solve_eigensystem(&p, 0.0, &g, 9, &s).unwrap();
        let er = s.recoil_energy();
        let expected = [0.0, 4.0, 4.0, 16.0, 16.0, 36.0, 36.0, 64.0, 64.0];
        for (e, want) in sys.energies().iter().zip(expected) {
            assert_abs_diff_eq!(e / er, want, epsilon = 1e-10);
        }
    }

    #[test]
    fn degenerate_free_pairs_are_parity_ordered() {
        let (s, g) = setup();
        let p = LatticeParams::new(0.0, -7.8, 0.0).unwrap();
        let sys = solve_eigensystem(&p, 0.0, &g, 5, &s).unwrap();
        // States 1,2 are the cos/sin pair at |j| = 1: even first.
        let two_k = 2.0 * s.wavenumber();
        for (n, want) in [(1usize, 1.0f64), (2, -1.0)] {
            let c = &sys.coefficients[n];
            let parity = parity_overlap(c, c, two_k, 0.0);
            assert_relative_eq!(parity.re, want, max_relative = 1e-9);
        }
    }

    #[test]
    fn states_are_orthonormal() {
        let (s, g) = setup();
        let p = LatticeParams::new(831.0, -7.8, 0.0).unwrap();
        let sys = solve_eigensystem(&p, 0.0, &g, 20, &s).unwrap();
        for a in 0..sys.len() {
            for b in a..sys.len() {
                let want = if a == b { 1.0 } else { 0.0 };
                let got = sys.state(a).inner(sys.state(b)).norm();
                assert_abs_diff_eq!(got, want, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn residuals_are_small() {
        let (s, g) = setup();
        let p = LatticeParams::new(831.0, -7.8, 0.10).unwrap();
        let sys =
            solve_eigensystem(&p, p.shift_m(&s), &g, 28, &s).unwrap();
        assert!(sys.max_relative_residual() <= 1e-8);
    }

    #[test]
    fn eigenvalues_are_translation_invariant_and_states_map() {
        let (s, g) = setup();
        let p = LatticeParams::new(831.0, -7.8, 0.10).unwrap();
        let shift = p.shift_m(&s);
        let sys0 = solve_eigensystem(&p, 0.0, &g, 16, &s).unwrap();
        let sys1 = solve_eigensystem(&p, shift, &g, 16, &s).unwrap();
        for (e0, e1) in sys0.energies().iter().zip(sys1.energies()) {
            assert_relative_eq!(e0, e1, max_relative = 1e-10);
        }
        // Bound states translate into each other.
        for n in 0..sys0.n_bound().min(10) {
            let moved = sys0.translated_state(n, shift);
            let overlap = sys1.state(n).inner(&moved).norm();
            assert_relative_eq!(overlap, 1.0, max_relative = 1e-8);
        }
    }

    #[test]
    fn ground_state_is_localized_in_one_well() {
        let (s, g) = setup();
        let p = LatticeParams::new(831.0, -7.8, 0.0).unwrap();
        let sys = solve_eigensystem(&p, 0.0, &g, 4, &s).unwrap();
        let spread = sys.state(0).position_spread_folded(0.0);
        assert!(spread < s.wavelength / 4.0);
    }

    #[test]
    fn projection_recovers_a_pure_eigenstate() {
        let (s, g) = setup();
        let p = LatticeParams::new(831.0, -7.8, 0.0).unwrap();
        let sys = solve_eigensystem(&p, 0.0, &g, 8, &s).unwrap();
        let modes = project(sys.state(3), &sys).unwrap();
        for (n, c) in modes.coefficients.iter().enumerate() {
            let want = if n == 3 { 1.0 } else { 0.0 };
            assert_abs_diff_eq!(c.norm(), want, epsilon = 1e-10);
        }
    }

    #[test]
    fn shifted_ground_state_projects_onto_bound_states_completely() {
        let (s, g) = setup();
        let p = LatticeParams::new(831.0, -7.8, 0.10).unwrap();
        let unshifted = solve_eigensystem(&p, 0.0, &g, 4, &s).unwrap();
        let shifted = solve_eigensystem_default(&p, p.shift_m(&s), &g, &s).unwrap();
        let modes = project(unshifted.state(0), &shifted).unwrap();
        let nonzero = modes
            .coefficients
            .iter()
            .filter(|c| c.norm_sqr() > 1e-4)
            .count();
        assert!(nonzero > 1, "shift must excite several eigenstates");
        assert!(
            modes.kept_fraction > 0.99,
            "kept fraction {} too small",
            modes.kept_fraction
        );
    }

    #[test]
    fn equal_superposition_splits_weight_evenly() {
        let (s, g) = setup();
        let p = LatticeParams::new(831.0, -7.8, 0.0).unwrap();
        let sys = solve_eigensystem(&p, 0.0, &g, 4, &s).unwrap();
        let mut amp: Vec<C64> = sys.state(0).amplitudes().to_vec();
        for (a, b) in amp.iter_mut().zip(sys.state(1).amplitudes()) {
            *a = (*a + b) / C64::new(2.0f64.sqrt(), 0.0);
        }
        let psi = WaveFunction::new(g.clone(), amp, 0.0).unwrap();
        let modes = project(&psi, &sys).unwrap();
        assert_relative_eq!(modes.coefficients[0].norm_sqr(), 0.5, max_relative = 1e-9);
        assert_relative_eq!(modes.coefficients[1].norm_sqr(), 0.5, max_relative = 1e-9);
    }

    #[test]
    fn project_rejects_grid_mismatch() {
        let (s, g) = setup();
        let other = Arc::new(Grid::new(1024, 16, 5e-9, &s).unwrap());
        let p = LatticeParams::new(831.0, -7.8, 0.0).unwrap();
        let sys = solve_eigensystem(&p, 0.0, &g, 4, &s).unwrap();
        let psi = WaveFunction::gaussian(other, 1e-7, 5e-8, 0.0);
        assert!(project(&psi, &sys).is_err());
    }

    #[test]
    fn reconstruct_inverts_project_on_the_retained_span() {
        let (s, g) = setup();
        let p = LatticeParams::new(831.0, -7.8, 0.10).unwrap();
        let sys = solve_eigensystem_default(&p, p.shift_m(&s), &g, &s).unwrap();
        let unshifted = solve_eigensystem(&p, 0.0, &g, 1, &s).unwrap();
        let psi = unshifted.state(0);
        let modes = project(psi, &sys).unwrap();
        let back = reconstruct(&modes, &sys).unwrap();
        // Residual outside the span is 1 - kept_fraction.
        let overlap = back.inner(psi).norm();
        assert!((overlap - modes.kept_fraction).abs() < 1e-8);
    }

    #[test]
    fn phase_alignment_trivials() {
        let d = ModeDecomposition {
            coefficients: vec![C64::new(0.6, 0.0), C64::new(0.0, 0.8)],
            kept_fraction: 1.0,
        };
        let e0 = 1e-27;
        let energies = [e0, 2e-27];
        assert_relative_eq!(phase_alignment(&d, &energies, 0.0).unwrap(), 1.0);
        // Single mode stays aligned forever.
        let single = ModeDecomposition {
            coefficients: vec![C64::new(1.0, 0.0)],
            kept_fraction: 1.0,
        };
        assert_relative_eq!(
            phase_alignment(&single, &energies[..1], 3.3e-5).unwrap(),
            1.0
        );
        // Two equal modes revive after a full relative-phase turn.
        let omega = (energies[1] - energies[0]) / HBAR;
        let t = 2.0 * std::f64::consts::PI / omega;
        let equal = ModeDecomposition {
            coefficients: vec![
                C64::new(0.5f64.sqrt(), 0.0),
                C64::new(0.5f64.sqrt(), 0.0),
            ],
            kept_fraction: 1.0,
        };
        assert_relative_eq!(
            phase_alignment(&equal, &energies, t).unwrap(),
            1.0,
            max_relative = 1e-9
        );
        // Half a turn gives |cos(omega t / 2)| = 0.
        assert_abs_diff_eq!(
            phase_alignment(&equal, &energies, t / 2.0).unwrap(),
            0.0,
            epsilon = 1e-9
        );
        let empty = ModeDecomposition {
            coefficients: vec![],
            kept_fraction: 0.0,
        };
        assert!(phase_alignment(&empty, &[], 0.0).is_err());
    }

    proptest! {
        #[test]
        fn phase_alignment_ignores_global_energy_offset(
            w in proptest::collection::vec(0.01f64..1.0, 2..6),
            offsets in -5.0f64..5.0,
            t_us in 0.0f64..50.0,
        ) {
            let coefficients: Vec<C64> =
                w.iter().map(|x| C64::new(x.sqrt(), 0.0)).collect();
            let d = ModeDecomposition { kept_fraction: 1.0, coefficients };
            let er = 2.5e-30;
            let energies: Vec<f64> =
                (0..w.len()).map(|i| (i as f64) * 40.0 * er).collect();
            let shifted: Vec<f64> =
                energies.iter().map(|e| e + offsets * er * 1e3).collect();
            let t = t_us * 1e-6;
            let a = phase_alignment(&d, &energies, t).unwrap();
            let b = phase_alignment(&d, &shifted, t).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}
