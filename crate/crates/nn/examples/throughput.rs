//! Times forward+backward passes of a DCGAN-sized conv stack.
//!
//! `cargo run --release -p poregan-nn --example throughput`

use std::time::Instant;

use poregan_nn::{glorot_uniform, Graph, ParamStore, Tensor};
use rand::SeedableRng;

fn main() {
    let mut rng = rand::rngs::StdRng::seed_from_u64(0);
    let batch = 16;
    // generator-like: 6x6x131 -> 96x96x3
    let chans = [131usize, 64, 32, 16, 8, 3];
    let kernels = [3usize, 3, 3, 5, 5];
    let strides = [1usize, 2, 2, 2, 2];
    let mut store = ParamStore::<f32>::new();
    let mut layers = Vec::new();
    for i in 0..5 {
        let (cin, cout, k) = (chans[i], chans[i + 1], kernels[i]);
        let w = store.add(format!("w{i}"), glorot_uniform(&[cin, cout, k, k], cin * k * k, cout * k * k, &mut rng));
        let b = store.add(format!("b{i}"), Tensor::zeros(&[cout]));
        layers.push((w, b, k, strides[i]));
    }
    let x = Tensor::<f32>::full(&[batch, 131, 6, 6], 0.1);
    let t = Instant::now();
    let reps = 5;
    for _ in 0..reps {
        let mut g = Graph::new();
        let mut h = g.input(x.clone());
        for &(w, b, k, s) in &layers {
            let (wv, bv) = (g.param(&store, w, true), g.param(&store, b, true));
            h = if s == 1 {
                g.conv_transpose2d(h, wv, bv, 1, k / 2, 0)
            } else {
                g.conv_transpose2d(h, wv, bv, 2, k / 2, 1)
            };
            h = g.leaky_relu(h, 0.2);
        }
        let seed = Tensor::full(g.shape(h), 1.0);
        let _ = g.backward(h, seed);
    }
    let per = t.elapsed().as_secs_f64() / reps as f64;
    println!("generator fwd+bwd, batch {batch}: {per:.3} s");
}
