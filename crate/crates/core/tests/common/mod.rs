#![allow(dead_code)]

use gdneck_core::autodiff::{Exec, Graph};
use gdneck_core::gradcheck::{fd_gradcheck, GradcheckConfig};
use gdneck_core::layers::Module;
use gdneck_core::reference::{RefTensor, ReferenceExec};
use gdneck_core::{Dims, ParamStore, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, dims: Dims, lo: f32, hi: f32) -> Tensor {
    Tensor::from_fn(dims, |_, _, _, _| rng.random_range(lo..hi))
}

/// Tensor with a seeded uniform fill in `[lo, hi)`.
pub fn seeded(seed: u64, dims: Dims, lo: f32, hi: f32) -> Tensor {
    uniform(&mut rng(seed), dims, lo, hi)
}

/// Runs `graph` on the `f32` reference backend.
pub fn reference_forward<G: Graph>(
    graph: &G,
    inputs: &[Tensor],
    params: &ParamStore,
) -> Result<Vec<Tensor>> {
    let mut ex = ReferenceExec::<f32>::new(params);
    let vals: Vec<RefTensor<f32>> = inputs.iter().map(|t| ex.constant(t.clone())).collect();
    Ok(graph
        .forward(&mut ex, &vals)?
        .iter()
        .map(RefTensor::to_tensor)
        .collect())
}

pub fn max_abs(a: &[Tensor], b: &[Tensor]) -> f32 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| x.max_abs_diff(y))
        .fold(0.0, f32::max)
}

/// fd_gradcheck at epsilon 1e-3 with `probes` probes; returns the worst error.
pub fn gradcheck<G: Graph + Module>(graph: &G, inputs: &[Tensor], seed: u64, probes: usize) -> f64 {
    let store = graph.specs().unwrap().init(seed);
    gradcheck_with(graph, inputs, &store, probes)
}

pub fn gradcheck_with<G: Graph>(
    graph: &G,
    inputs: &[Tensor],
    store: &ParamStore,
    probes: usize,
) -> f64 {
    let cfg = GradcheckConfig {
        epsilon: 1e-3,
        probes,
        ..Default::default()
    };
    fd_gradcheck(graph, inputs, store, &cfg)
        .unwrap()
        .max_rel_error
}
