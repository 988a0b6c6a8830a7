//! Wall-time comparison of the allocation strategies on one dense block and
//! on the 100-layer CIFAR network, forward + backward.

use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use densekit::exec::{lower, lower_block, BlockDims, Network, Strategy};
use densekit::graph::{build, NetworkSpec};
use densekit::tensor::{Shape, Tensor};
use densekit::train::init_weights;

fn structured(shape: Shape) -> Tensor<f32> {
    let mut t = Tensor::zeros(shape);
    for (i, v) in t.data.iter_mut().enumerate() {
        *v = ((i % 23) as f32 - 11.0) / 11.0;
    }
    t
}

fn bench_block(c: &mut Criterion) {
    let dims = BlockDims { m: 12, k: 12, k0: 24, mult: 4, h: 16, w: 16, batch: 4 };
    let input = structured(Shape::new(dims.batch, dims.k0, dims.h, dims.w));
    let mut group = c.benchmark_group("block_m12_fwd_bwd");
    group.sample_size(20);
    for strategy in Strategy::ALL {
        let mut net = lower_block::<f32>(&dims, strategy, 0).unwrap();
        net.fill_params(1);
        group.bench_function(strategy.name(), |b| {
            b.iter(|| black_box(net.forward_backward(&input).unwrap()))
        });
    }
    group.finish();
}

fn bench_cifar100(c: &mut Criterion) {
    let spec = NetworkSpec::cifar(16, 12, 0.5, 4, 10); // L = 100
    let graph = build(&spec).unwrap();
    let batch = 8;
    let images = structured(Shape::new(batch, 3, 32, 32));
    let labels: Vec<usize> = (0..batch).map(|i| i % 10).collect();
    let mut group = c.benchmark_group("cifar100_step");
    group.sample_size(10);
    for strategy in [Strategy::Reference, Strategy::SharedRecompute] {
        let mut net: Network<f32> = lower(&graph, strategy, batch, (32, 32), 3).unwrap();
        init_weights(&mut net, 3);
        group.bench_function(strategy.name(), |b| {
            b.iter(|| {
                let loss = net.forward_train(&images, &labels).unwrap();
                net.backward().unwrap();
                black_box(loss)
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_block, bench_cifar100);
criterion_main!(benches);
