//! Timings of the main pipeline stages on simulated data.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use mbisbm::generator::{generate, GenConfig};
use mbisbm::spectral::{initialize, InitMethod, InitSpec};
use mbisbm::vb::{fit, FitOptions, PqInit};

fn config(k: usize, lambda: f64, dc: bool) -> GenConfig {
    let mut cfg = GenConfig::new(200, 800, k, lambda, 1.0 / 7.0);
    cfg.d1 = 2;
    cfg.d2 = 2;
    cfg.nu = 10.0;
    cfg.seed = 1;
    if dc {
        cfg.pareto_a = Some(2.0);
    }
    cfg
}

fn stages(c: &mut Criterion) {
    let cfg = config(10, 10.0, false);
    c.bench_function("generate K=10 lambda=10", |b| b.iter(|| generate(black_box(&cfg)).unwrap()));

    let data = generate(&cfg).unwrap();
    let bisc = InitSpec::new(InitMethod::Bisc);
    c.bench_function("bisc K=10 lambda=10", |b| {
        b.iter(|| initialize(&data.graph, &data.covariates, None, 10, black_box(&bisc)).unwrap())
    });

    let mut group = c.benchmark_group("fit");
    group.sample_size(10);
    for (name, k, lambda, dc) in [("typical K=5", 5, 3.1, false), ("K=10 lambda=10", 10, 10.0, false), ("DC K=10 lambda=10", 10, 10.0, true)] {
        let data = generate(&config(k, lambda, dc)).unwrap();
        let truth = Some((data.z1.as_slice(), data.z2.as_slice()));
        let (t1, t2) = initialize(&data.graph, &data.covariates, truth, k, &InitSpec::new(InitMethod::PerturbedTruth)).unwrap();
        let mut opts = FitOptions::new(k);
        opts.degree_correct = dc;
        opts.pq_init = PqInit::Fixed(0.1, 0.01);
        group.bench_function(name, |b| b.iter(|| fit(&data.graph, &data.covariates, &t1, &t2, black_box(&opts)).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, stages);
criterion_main!(benches);
