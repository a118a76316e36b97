//! Synthetic graph descriptions for the canonical scenarios.

use serde::{Deserialize, Serialize};

use crate::graph::BatchSemantics::{Batched, Replicated};
use crate::graph::TensorRole::{GraphInput, GraphOutput, Intermediate, Weight};
use crate::graph::{DType, GraphDescription, OperatorKind};

/// Parameters of a generated model graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GeneratorSpec {
    /// Attention -> MatMul -> AllReduce -> RowScale per layer.
    DenseTp {
        layers: usize,
        hidden: usize,
        #[serde(default = "default_rows")]
        rows: usize,
        #[serde(default = "default_world")]
        world_size: i64,
        #[serde(default = "default_dtype")]
        dtype: DType,
    },
    /// Attention block, then all-to-all dispatch / expert MatMul / all-to-all
    /// combine, then a norm, per layer.
    MoeEp {
        layers: usize,
        hidden: usize,
        #[serde(default = "default_rows")]
        rows: usize,
        #[serde(default = "default_dtype")]
        dtype: DType,
    },
}

fn default_rows() -> usize {
    4
}

fn default_world() -> i64 {
    2
}

fn default_dtype() -> DType {
    DType::I64
}

impl GeneratorSpec {
    pub fn generate(&self) -> GraphDescription {
        match self {
            GeneratorSpec::DenseTp { layers, hidden, rows, world_size, dtype } => {
                dense_tp(*layers, *hidden, *rows, *world_size).with_dtype(*dtype)
            }
            GeneratorSpec::MoeEp { layers, hidden, rows, dtype } => moe_ep(*layers, *hidden, *rows).with_dtype(*dtype),
        }
    }
}

fn hidden_name(layer: usize, layers: usize) -> String {
    if layer == 0 {
        "x".to_string()
    } else if layer == layers {
        "y".to_string()
    } else {
        format!("h{layer}")
    }
}

/// Llama-like tensor-parallel block repeated `layers` times (4 ops per layer).
pub fn dense_tp(layers: usize, hidden: usize, rows: usize, world_size: i64) -> GraphDescription {
    let mut d = GraphDescription::default();
    let act = [rows, hidden];
    d.tensor("x", &act, Batched, GraphInput);
    for l in 0..layers {
        let (src, dst) = (hidden_name(l, layers), hidden_name(l + 1, layers));
        let (a, m, r, w) = (format!("l{l}.attn"), format!("l{l}.mlp"), format!("l{l}.ar"), format!("l{l}.w"));
        d.tensor(&w, &[hidden, hidden], Replicated, Weight)
            .tensor(&a, &act, Batched, Intermediate)
            .tensor(&m, &act, Batched, Intermediate)
            .tensor(&r, &act, Batched, Intermediate)
            .tensor(&dst, &act, Batched, if l + 1 == layers { GraphOutput } else { Intermediate });
        d.op(&format!("layer{l}.attention"), OperatorKind::Attention, &[&src], &[&a], &format!("layer{l}.attn"))
            .op(&format!("layer{l}.matmul"), OperatorKind::MatMul, &[&a, &w], &[&m], &format!("layer{l}.mlp"))
            .op(
                &format!("layer{l}.allreduce"),
                OperatorKind::AllReduce { world_size },
                &[&m],
                &[&r],
                &format!("layer{l}.comm"),
            )
            .op(&format!("layer{l}.rowscale"), OperatorKind::RowScale, &[&r], &[&dst], &format!("layer{l}.norm"));
    }
    d
}

/// DeepSeek-like expert-parallel block repeated `layers` times (6 ops per layer).
pub fn moe_ep(layers: usize, hidden: usize, rows: usize) -> GraphDescription {
    let mut d = GraphDescription::default();
    let act = [rows, hidden];
    d.tensor("x", &act, Batched, GraphInput);
    for l in 0..layers {
        let (src, dst) = (hidden_name(l, layers), hidden_name(l + 1, layers));
        let t = |s: &str| format!("l{l}.{s}");
        d.tensor(&t("wo"), &[hidden, hidden], Replicated, Weight)
            .tensor(&t("we"), &[hidden, hidden], Replicated, Weight);
        for s in ["attn", "proj", "dispatched", "experts", "combined"] {
            d.tensor(&t(s), &act, Batched, Intermediate);
        }
        d.tensor(&dst, &act, Batched, if l + 1 == layers { GraphOutput } else { Intermediate });
        let m = |s: &str| format!("layer{l}.{s}");
        d.op(&m("attention"), OperatorKind::Attention, &[&src], &[&t("attn")], &m("attn.core"))
            .op(&m("o_proj"), OperatorKind::MatMul, &[&t("attn"), &t("wo")], &[&t("proj")], &m("attn.proj"))
            .op(
                &m("dispatch"),
                OperatorKind::AllToAll { seed: 2 * l as u64 + 1 },
                &[&t("proj")],
                &[&t("dispatched")],
                &m("moe.dispatch"),
            )
            .op(&m("experts"), OperatorKind::MatMul, &[&t("dispatched"), &t("we")], &[&t("experts")], &m("moe.experts"))
            .op(
                &m("combine"),
                OperatorKind::AllToAll { seed: 2 * l as u64 + 2 },
                &[&t("experts")],
                &[&t("combined")],
                &m("moe.combine"),
            )
            .op(&m("norm"), OperatorKind::RowScale, &[&t("combined")], &[&dst], &m("norm"));
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_graph;

    #[test]
    fn thirty_two_layer_dense_block_has_128_ops() {
        let g = build_graph(&dense_tp(32, 4, 4, 2)).unwrap();
        assert_eq!(g.operators().len(), 128);
        let order: Vec<_> = g.operators().iter().map(|o| o.id).collect();
        assert!(g.is_topological(&order));
        // per layer: Attention, MatMul, AllReduce, RowScale
        let kinds: Vec<_> = g.operators()[..4].iter().map(|o| o.kind.name()).collect();
        assert_eq!(kinds, ["Attention", "MatMul", "AllReduce", "RowScale"]);
    }

    #[test]
    fn moe_graph_builds() {
        let g = build_graph(&moe_ep(2, 4, 4)).unwrap();
        assert_eq!(g.operators().len(), 12);
        assert_eq!(g.graph_outputs().len(), 1);
    }
}
