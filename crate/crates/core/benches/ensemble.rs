//! Throughput of the trajectory ensemble, sequential against the rayon
//! data-parallel path, plus the raw split-step cost.

use std::sync::Arc;

use criterion::{criterion_group, criterion_main, Criterion};

use lattice_echo::dynamics::{
    run_ensemble, EnsembleOptions, FftPair, JumpSettings, Propagator,
};
use lattice_echo::experiment::{observable, ObservableKind, ShiftProtocol};
use lattice_echo::spectral;
use lattice_echo::{AtomSpecies, Grid, LatticeParams};

struct Bench {
    species: AtomSpecies,
    params: LatticeParams,
    protocol: ShiftProtocol,
    psi0: lattice_echo::WaveFunction,
}

fn setup() -> Bench {
    let species = AtomSpecies::rb85();
    let grid = Arc::new(Grid::default_for(&species));
    let params = LatticeParams::new(831.0, -7.8, 0.10).unwrap();
    let sys = spectral::solve_eigensystem(&params, 0.0, &grid, 1, &species).unwrap();
    let dz = params.shift_m(&species);
    let protocol = ShiftProtocol {
        events: vec![lattice_echo::experiment::ShiftEvent {
            time: 0.0,
            offset: dz,
        }],
        t_record_start: 0.0,
        t_record_end: 10e-6,
        output_dt: 0.5e-6,
        initial_offset: 0.0,
    };
    Bench {
        species,
        params,
        protocol,
        psi0: sys.state(0).clone(),
    }
}

fn bench_split_step(c: &mut Criterion) {
    let b = setup();
    let grid = b.psi0.grid().clone();
    let fft = FftPair::new(grid.points());
    let mut prop = Propagator::new(grid, &b.species, &b.params, 0.0, &fft);
    let mut psi = b.psi0.clone();
    c.bench_function("split_step", |bench| {
        bench.iter(|| prop.step_coherent(&mut psi));
    });
}

fn bench_ensemble(c: &mut Criterion) {
    let b = setup();
    let obs = observable(ObservableKind::Redistribution, &b.species, 0.0);
    let jumps = JumpSettings::default();
    let n_traj = 8;

    let mut run = |parallel: bool| {
        let options = EnsembleOptions {
            parallel,
            ..Default::default()
        };
        run_ensemble(
            n_traj,
            11,
            &b.species,
            &b.protocol,
            &jumps,
            &obs,
            |_rng, _i| Ok((b.params, b.psi0.clone())),
            &options,
        )
        .unwrap()
    };

    let mut group = c.benchmark_group("ensemble_8x10us");
    group.sample_size(10);
    group.bench_function("sequential", |bench| bench.iter(|| run(false)));
    #[cfg(feature = "parallel")]
    group.bench_function("rayon", |bench| bench.iter(|| run(true)));
    group.finish();
}

criterion_group!(benches, bench_split_step, bench_ensemble);
criterion_main!(benches);
