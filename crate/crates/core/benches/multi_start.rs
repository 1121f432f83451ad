//! Multi-start oracle throughput: rayon fan-out vs. the sequential
//! fallback on the looped 8-node network's over-determined scenario.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use wdn_se::estimator::{MeasurementEntry, MeasurementSet};
use wdn_se::network::Network;
use wdn_se::oracle;

fn over_determined_case() -> (Network, MeasurementSet) {
    let net = Network::parse_inp(include_str!("../tests/data/net8.inp")).unwrap();
    let meas = MeasurementSet {
        entries: vec![
            MeasurementEntry {
                from: "1".into(),
                to: "8".into(),
                value_ft: -134.60,
                weight: 1.0,
            },
            MeasurementEntry {
                from: "1".into(),
                to: "3".into(),
                value_ft: -175.64,
                weight: 0.1,
            },
        ],
        fixed: Default::default(),
    };
    (net, meas)
}

fn bench_multi_start(c: &mut Criterion) {
    let (net, meas) = over_determined_case();
    let bounds = [(-600.0, 600.0)];
    let mut group = c.benchmark_group("multi_start");
    group.sample_size(10);
    for starts in [8usize, 32] {
        group.bench_with_input(
            BenchmarkId::new("sequential", starts),
            &starts,
            |b, &n| {
                b.iter(|| {
                    oracle::solve_se_global_seq(&net, &meas, &bounds, n, 20).unwrap()
                })
            },
        );
        #[cfg(feature = "parallel")]
        group.bench_with_input(BenchmarkId::new("rayon", starts), &starts, |b, &n| {
            b.iter(|| oracle::solve_se_global(&net, &meas, &bounds, n, 20).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_multi_start);
criterion_main!(benches);
