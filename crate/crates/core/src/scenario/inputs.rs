use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{DType, Graph, Tensor, TensorId};

/// Deterministic bindings for every graph input and weight, with `rows` batch rows.
pub fn random_bindings(graph: &Graph, rows: usize, seed: u64) -> BTreeMap<TensorId, Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = BTreeMap::new();
    for &t in graph.graph_inputs().iter().chain(graph.weights()) {
        let meta = graph.tensor(t);
        let shape = meta.shape_at(rows);
        let n: usize = shape.iter().product();
        let tensor = match graph.dtype() {
            DType::I64 => Tensor::from_i64(&shape, (0..n).map(|_| rng.gen_range(-8..=8)).collect()),
            DType::F32 => Tensor::from_f32(&shape, (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect()),
        };
        out.insert(t, tensor);
    }
    out
}
