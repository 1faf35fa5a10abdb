use std::time::Duration;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use guided_cascade::model::{Model, ModelConfig};
use guided_cascade::par::{set_mode, Mode};
use guided_cascade::rng::{normal_vec, rng_from_seed};
use guided_cascade::schedule::NoiseSchedule;
use guided_cascade::tensor::Tensor;
use guided_cascade::trainer::{LatentCache, Phase, TrainConfig, Trainer};

const BUCKETS: [usize; 3] = [16, 24, 32];

fn cache(n: usize) -> LatentCache {
    let mut rng = rng_from_seed(1);
    let mut z = |s: usize| Tensor::new(&[s, s, 4], normal_vec(&mut rng, s * s * 4));
    let base = (0..n).map(|_| z(16)).collect();
    let hr = BUCKETS.iter().map(|&s| (0..n).map(|_| z(s)).collect()).collect();
    LatentCache::from_parts((16, 16), (0..n).map(|i| i % 2).collect(), base, BUCKETS.to_vec(), hr).unwrap()
}

/// One optimizer step of the desk model per iteration, in each execution mode.
fn training_step(c: &mut Criterion) {
    let cache = cache(32);
    let mut group = c.benchmark_group("train_step");
    group.sample_size(10).measurement_time(Duration::from_secs(20));
    for phase in [Phase::Base, Phase::Adapter] {
        for (name, mode) in [("sequential", Mode::Sequential), ("parallel", Mode::Parallel)] {
            group.bench_function(BenchmarkId::new(phase.to_string(), name), |b| {
                set_mode(mode);
                let mut model = Model::new(&ModelConfig::preset("desk").unwrap(), 0).unwrap();
                let cfg = TrainConfig { phase, batch_size: 4, ..Default::default() };
                let mut trainer = Trainer::new(cfg, NoiseSchedule::default()).unwrap();
                b.iter(|| trainer.train_step(&mut model, &cache).unwrap());
            });
        }
    }
    set_mode(Mode::Parallel);
    group.finish();
}

criterion_group!(benches, training_step);
criterion_main!(benches);
