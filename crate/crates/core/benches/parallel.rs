//! Block-parallel kernels on a rayon pool versus one worker (the same
//! blocks run in order, as in the sequential build).

use blip_core::fisher::estimate_fisher;
use blip_core::nn::{Activation, Batch, HeadSpec, ParamMode};
use blip_core::parallel::with_threads;
use blip_core::tasks::Dataset;
use blip_core::{Network, NetworkSpec, QuantConfig};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn setup(hidden: usize, rows: usize) -> (Network, Array2<f64>, Vec<usize>) {
    let spec = NetworkSpec {
        input_dim: 784,
        hidden_dims: vec![hidden, hidden],
        activation: Activation::Relu,
        heads: vec![HeadSpec {
            task_id: 1,
            num_classes: 10,
        }],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let net = Network::init(spec, &QuantConfig::default(), &mut rng).unwrap();
    let x = Array2::from_shape_fn((rows, 784), |_| rng.random_range(0.0..1.0));
    let y = (0..rows).map(|i| i % 10).collect();
    (net, x, y)
}

fn thread_counts() -> Vec<usize> {
    let max = std::thread::available_parallelism().map_or(1, |n| n.get()).max(2);
    vec![1, max]
}

fn backward(c: &mut Criterion) {
    let mut group = c.benchmark_group("backward_batch32");
    group.sample_size(20);
    for hidden in [256, 1200] {
        let (net, x, y) = setup(hidden, 32);
        let batch = Batch {
            inputs: x,
            labels: y,
            task_id: 1,
        };
        for threads in thread_counts() {
            let mut grads = vec![0.0; net.num_params()];
            group.bench_with_input(
                BenchmarkId::new(format!("hidden{hidden}"), threads),
                &threads,
                |b, &t| {
                    with_threads(t, || {
                        b.iter(|| {
                            net.backward_into(batch.inputs.view(), &batch.labels, 1, ParamMode::Raw, &mut grads)
                                .unwrap()
                        })
                    })
                },
            );
        }
    }
    group.finish();
}

fn fisher(c: &mut Criterion) {
    let mut group = c.benchmark_group("fisher_512_rows");
    group.sample_size(10);
    let (net, x, y) = setup(256, 512);
    let data = Dataset::from_matrix(x, y).unwrap();
    for threads in thread_counts() {
        group.bench_with_input(BenchmarkId::from_parameter(threads), &threads, |b, &t| {
            with_threads(t, || {
                b.iter(|| {
                    let mut rng = ChaCha8Rng::seed_from_u64(2);
                    estimate_fisher(&net, &data, 1, &mut rng, None).unwrap()
                })
            })
        });
    }
    group.finish();
}

criterion_group!(benches, backward, fisher);
criterion_main!(benches);
