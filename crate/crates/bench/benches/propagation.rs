use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;
use wickbench_bench::staggered;
use wickbench_core::{evolve_gibbs, gibbs_state, DrivenHamiltonian, PropagationControls, SwitchSource, SwitchSpec};

fn bench(c: &mut Criterion) {
    let mut group = c.benchmark_group("evolve_gibbs");
    group.sample_size(10);
    for side in [3, 4, 5] {
        let f = staggered(side, 0.1);
        let ens = gibbs_state(&f.hamiltonian, 4.0, 0.0).unwrap();
        let driven =
            DrivenHamiltonian::new(f.hamiltonian.clone(), f.perturbation.clone(), 0.05, SwitchSpec::exponential(), 0.5).unwrap();
        let mut ctl = PropagationControls::new(&driven, -0.5, SwitchSource::True).unwrap();
        ctl.t_start = -20.0;
        group.bench_function(format!("L={side}"), |b| b.iter(|| evolve_gibbs(black_box(&driven), &ens, -0.5, &ctl).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
