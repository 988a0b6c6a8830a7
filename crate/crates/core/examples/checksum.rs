//! Prints a bit-level checksum of a seeded forward+backward pass, for
//! comparing builds (parallel vs sequential fallback).

use densekit::exec::{lower, Network, Strategy};
use densekit::graph::{build, NetworkSpec};
use densekit::tensor::{Shape, Tensor};
use densekit::train::init_weights;

fn main() {
    let mut spec = NetworkSpec::cifar(3, 8, 0.5, 4, 4);
    spec.dropout = 0.2;
    let graph = build(&spec).unwrap();
    let mut net: Network<f64> = lower(&graph, Strategy::SharedRecompute, 3, (16, 16), 7).unwrap();
    init_weights(&mut net, 7);
    let mut s = 1u64;
    let shape = Shape::new(3, 3, 16, 16);
    let images = Tensor::from_vec(
        shape,
        (0..shape.numel())
            .map(|_| {
                s ^= s << 13;
                s ^= s >> 7;
                s ^= s << 17;
                (s >> 11) as f64 / (1u64 << 53) as f64 - 0.5
            })
            .collect(),
    )
    .unwrap();
    let loss = net.forward_train(&images, &[0, 1, 3]).unwrap();
    net.backward().unwrap();
    let mut h = 0xcbf29ce484222325u64;
    let mut feed = |v: f64| {
        for b in v.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    };
    feed(loss);
    for (_, id) in net.params.clone() {
        if let Some(g) = net.tape.grad(id) {
            g.data.iter().for_each(|v| feed(*v));
        }
    }
    println!("checksum {h:016x} loss {loss:.17e}");
}
