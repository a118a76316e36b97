use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::sync::Arc;

use thiserror::Error;

use super::{
    BatchSemantics, CostParams, CustomKernel, DType, Graph, GraphDescription, KernelRegistry, OpId, OperatorKind,
    OperatorNode, TensorId, TensorMeta, TensorRole,
};

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error("operator `{op}` references unknown tensor `{tensor}`")]
    UnknownTensor { op: String, tensor: String },
    #[error("operator `{op}`: {reason}")]
    ShapeMismatch { op: String, reason: String },
    #[error("cycle detected among operators {0:?}")]
    CycleDetected(Vec<String>),
    #[error("tensor `{tensor}`: {reason}")]
    InvalidTensor { tensor: String, reason: String },
    #[error("tensor `{tensor}` has dtype {found:?}, graph uses {expected:?}")]
    DtypeMismatch { tensor: String, expected: DType, found: DType },
    #[error("operator `{op}` uses unknown custom kernel `{name}`")]
    UnknownKernel { op: String, name: String },
    #[error("operator `{0}` has negative or non-finite cost")]
    InvalidCost(String),
}

/// Builds a graph using the default custom-kernel registry.
pub fn build_graph(desc: &GraphDescription) -> Result<Graph, GraphError> {
    build_graph_with(desc, &KernelRegistry::default())
}

pub fn build_graph_with(desc: &GraphDescription, registry: &KernelRegistry) -> Result<Graph, GraphError> {
    let mut tensors = Vec::with_capacity(desc.tensors.len());
    let mut by_name = BTreeMap::new();
    for (i, t) in desc.tensors.iter().enumerate() {
        if by_name.insert(t.id.clone(), TensorId(i)).is_some() {
            return Err(GraphError::DuplicateId(t.id.clone()));
        }
        if t.batch == BatchSemantics::Batched && t.shape.is_empty() {
            return Err(GraphError::InvalidTensor { tensor: t.id.clone(), reason: "batched tensors need rank >= 1".into() });
        }
        tensors.push(TensorMeta {
            id: TensorId(i),
            name: t.id.clone(),
            shape: t.shape.clone(),
            batch: t.batch,
            dtype: t.dtype,
            role: t.role,
        });
    }
    let dtype = tensors.first().map(|t| t.dtype).unwrap_or(DType::I64);
    if let Some(t) = tensors.iter().find(|t| t.dtype != dtype) {
        return Err(GraphError::DtypeMismatch { tensor: t.name.clone(), expected: dtype, found: t.dtype });
    }

    let mut op_names = BTreeMap::new();
    let mut raw_ops = Vec::with_capacity(desc.operators.len());
    let mut customs: BTreeMap<String, Arc<dyn CustomKernel>> = BTreeMap::new();
    for (i, o) in desc.operators.iter().enumerate() {
        if op_names.insert(o.id.clone(), i).is_some() {
            return Err(GraphError::DuplicateId(o.id.clone()));
        }
        let resolve = |names: &[String]| -> Result<Vec<TensorId>, GraphError> {
            names
                .iter()
                .map(|n| {
                    by_name
                        .get(n)
                        .copied()
                        .ok_or_else(|| GraphError::UnknownTensor { op: o.id.clone(), tensor: n.clone() })
                })
                .collect()
        };
        let inputs = resolve(&o.inputs)?;
        let outputs = resolve(&o.outputs)?;
        let cost = o.cost.unwrap_or(CostParams::ZERO);
        if !cost.is_valid() {
            return Err(GraphError::InvalidCost(o.id.clone()));
        }
        if let OperatorKind::Custom { name } = &o.op {
            let k = registry
                .get(name)
                .ok_or_else(|| GraphError::UnknownKernel { op: o.id.clone(), name: name.clone() })?;
            if k.arity() != (inputs.len(), outputs.len()) {
                return Err(GraphError::ShapeMismatch {
                    op: o.id.clone(),
                    reason: format!("kernel `{name}` expects arity {:?}", k.arity()),
                });
            }
            customs.insert(name.clone(), k.clone());
        }
        raw_ops.push(OperatorNode {
            id: OpId(i),
            name: o.id.clone(),
            resource_class: o.resource_class.unwrap_or_else(|| o.op.default_resource_class()),
            kind: o.op.clone(),
            inputs,
            outputs,
            module_path: o.module_path.clone(),
            region_tags: o.region_tags.clone(),
            cost,
        });
    }

    for op in &raw_ops {
        check_shapes(op, &tensors)?;
    }

    // producers
    let mut producer: Vec<Option<usize>> = vec![None; tensors.len()];
    for (i, op) in raw_ops.iter().enumerate() {
        for t in &op.outputs {
            let meta = &tensors[t.0];
            if matches!(meta.role, TensorRole::GraphInput | TensorRole::Weight) {
                return Err(GraphError::InvalidTensor {
                    tensor: meta.name.clone(),
                    reason: "graph inputs and weights cannot be produced by an operator".into(),
                });
            }
            if producer[t.0].replace(i).is_some() {
                return Err(GraphError::InvalidTensor { tensor: meta.name.clone(), reason: "produced more than once".into() });
            }
        }
    }
    for (t, meta) in tensors.iter().enumerate() {
        if matches!(meta.role, TensorRole::Intermediate | TensorRole::GraphOutput) && producer[t].is_none() {
            return Err(GraphError::InvalidTensor { tensor: meta.name.clone(), reason: "has no producer".into() });
        }
    }

    let order = topo_order(&raw_ops, &producer)?;

    // renumber operators into topological order
    let mut new_index = vec![0; raw_ops.len()];
    for (pos, old) in order.iter().enumerate() {
        new_index[*old] = pos;
    }
    let mut slots: Vec<Option<OperatorNode>> = raw_ops.into_iter().map(Some).collect();
    let operators: Vec<OperatorNode> = order
        .iter()
        .enumerate()
        .map(|(pos, old)| {
            let mut op = slots[*old].take().expect("each op placed once");
            op.id = OpId(pos);
            op
        })
        .collect();

    let producer: Vec<Option<OpId>> = producer.iter().map(|p| p.map(|old| OpId(new_index[old]))).collect();
    let mut consumers: Vec<Vec<OpId>> = vec![Vec::new(); tensors.len()];
    for op in &operators {
        for t in &op.inputs {
            if !consumers[t.0].contains(&op.id) {
                consumers[t.0].push(op.id);
            }
        }
    }
    for (t, meta) in tensors.iter().enumerate() {
        if meta.role == TensorRole::Intermediate && consumers[t].is_empty() {
            return Err(GraphError::InvalidTensor {
                tensor: meta.name.clone(),
                reason: "intermediate tensor is never consumed".into(),
            });
        }
    }

    let ids_with = |role| tensors.iter().filter(|t| t.role == role).map(|t| t.id).collect::<Vec<_>>();
    Ok(Graph {
        graph_inputs: ids_with(TensorRole::GraphInput),
        weights: ids_with(TensorRole::Weight),
        graph_outputs: ids_with(TensorRole::GraphOutput),
        tensors,
        operators,
        producer,
        consumers,
        by_name,
        customs,
        dtype,
    })
}

/// Kahn's algorithm, preferring the lowest description index among ready
/// operators so a description already in topological order keeps its order.
fn topo_order(ops: &[OperatorNode], producer: &[Option<usize>]) -> Result<Vec<usize>, GraphError> {
    let n = ops.len();
    let mut indegree = vec![0usize; n];
    let mut succ: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, op) in ops.iter().enumerate() {
        let mut preds: Vec<usize> = op.inputs.iter().filter_map(|t| producer[t.0]).collect();
        preds.sort_unstable();
        preds.dedup();
        indegree[i] = preds.len();
        for p in preds {
            succ[p].push(i);
        }
    }
    let mut heap: BinaryHeap<Reverse<usize>> = (0..n).filter(|i| indegree[*i] == 0).map(Reverse).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(Reverse(i)) = heap.pop() {
        order.push(i);
        for &s in &succ[i] {
            indegree[s] -= 1;
            if indegree[s] == 0 {
                heap.push(Reverse(s));
            }
        }
    }
    if order.len() != n {
        let stuck = (0..n).filter(|i| indegree[*i] > 0).map(|i| ops[i].name.clone()).collect();
        return Err(GraphError::CycleDetected(stuck));
    }
    Ok(order)
}

fn check_shapes(op: &OperatorNode, tensors: &[TensorMeta]) -> Result<(), GraphError> {
    let fail = |reason: String| GraphError::ShapeMismatch { op: op.name.clone(), reason };
    let arity = |ins: usize| -> Result<(), GraphError> {
        if op.inputs.len() != ins || op.outputs.len() != 1 {
            return Err(fail(format!("expected {ins} input(s) and 1 output")));
        }
        Ok(())
    };
    let meta = |t: TensorId| &tensors[t.0];
    let expect_out = |shape: &[usize]| -> Result<(), GraphError> {
        let out = meta(op.outputs[0]);
        if !out.is_batched() {
            return Err(fail(format!("output `{}` must be batched", out.name)));
        }
        if out.shape != shape {
            return Err(fail(format!("output `{}` declared {:?}, inferred {:?}", out.name, out.shape, shape)));
        }
        Ok(())
    };
    match &op.kind {
        OperatorKind::MatMul => {
            arity(2)?;
            let (x, w) = (meta(op.inputs[0]), meta(op.inputs[1]));
            if !x.is_batched() || x.shape.len() != 2 {
                return Err(fail(format!("left operand `{}` must be batched rank 2", x.name)));
            }
            if w.is_batched() || w.shape.len() != 2 {
                return Err(fail(format!("right operand `{}` must be replicated rank 2", w.name)));
            }
            if x.shape[1] != w.shape[0] {
                return Err(fail(format!("inner extents differ: {:?} x {:?}", x.shape, w.shape)));
            }
            expect_out(&[x.shape[0], w.shape[1]])
        }
        OperatorKind::ElemAdd => {
            arity(2)?;
            let (a, b) = (meta(op.inputs[0]), meta(op.inputs[1]));
            if !a.is_batched() || !b.is_batched() || a.shape != b.shape {
                return Err(fail(format!("operands must be batched with equal shapes: {:?} vs {:?}", a.shape, b.shape)));
            }
            expect_out(&a.shape)
        }
        OperatorKind::RowScale | OperatorKind::AllReduce { .. } | OperatorKind::AllToAll { .. } | OperatorKind::Attention => {
            arity(1)?;
            let x = meta(op.inputs[0]);
            if !x.is_batched() {
                return Err(fail(format!("input `{}` must be batched", x.name)));
            }
            expect_out(&x.shape)
        }
        OperatorKind::Custom { .. } => {
            if let Some(out) = op.outputs.iter().map(|t| meta(*t)).find(|m| !m.is_batched()) {
                return Err(fail(format!("output `{}` must be batched", out.name)));
            }
            // batch extents must agree so the kernel sees one row count
            let rows: Vec<usize> = op
                .inputs
                .iter()
                .chain(&op.outputs)
                .map(|t| meta(*t))
                .filter(|m| m.is_batched())
                .map(|m| m.shape[0])
                .collect();
            if rows.windows(2).any(|w| w[0] != w[1]) {
                return Err(fail("batched operands disagree on batch extent".into()));
            }
            Ok(())
        }
    }
}
