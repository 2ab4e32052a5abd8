//! Shared inputs for the kernel benchmarks.

use litedet::graph::fixtures;
use litedet::{init_weights, ConvParams, ModelGraph, Rng, Tensor4, WeightStore};

pub fn random_tensor(shape: [usize; 4], seed: u64) -> Tensor4 {
    let mut rng = Rng::new(seed);
    Tensor4::from_fn(shape, |_, _, _, _| rng.uniform(-1.0, 1.0) as f32).expect("positive shape")
}

pub fn random_conv(c_in: usize, c_out: usize, k: usize, groups: usize, seed: u64) -> ConvParams {
    let mut rng = Rng::new(seed);
    ConvParams::from_fn(c_in, c_out, k, 1, k / 2, groups, |_| rng.uniform(-0.5, 0.5) as f32).expect("valid conv")
}

/// The improved fixture with seeded weights.
pub fn improved_model() -> (ModelGraph, WeightStore) {
    let g = ModelGraph::from_json(fixtures::IMPROVED_LITE).expect("fixture parses");
    let w = init_weights(&g, 0);
    (g, w)
}
