use std::collections::BTreeMap;

use thiserror::Error;

use super::kernels::{run_builtin, Element, View, ViewMut};
use super::{Graph, OperatorKind, OperatorNode, Tensor, TensorId};
use crate::graph::DType;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("no binding for tensor `{0}`")]
    MissingBinding(String),
    #[error("binding for `{tensor}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch { tensor: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("binding for `{0}` has the wrong dtype")]
    DtypeMismatch(String),
}

/// Checks bindings for every graph input and weight and returns the batch row
/// count they agree on. Batched tensors may be bound at any row count as long
/// as all of them agree; replicated tensors must match exactly.
pub(crate) fn check_bindings(graph: &Graph, bindings: &BTreeMap<TensorId, Tensor>) -> Result<usize, EvalError> {
    let mut rows = None;
    for &t in graph.graph_inputs().iter().chain(graph.weights()) {
        let meta = graph.tensor(t);
        let b = bindings.get(&t).ok_or_else(|| EvalError::MissingBinding(meta.name.clone()))?;
        if b.dtype() != meta.dtype {
            return Err(EvalError::DtypeMismatch(meta.name.clone()));
        }
        let expected = if meta.is_batched() {
            let r = *rows.get_or_insert(b.rows());
            meta.shape_at(r)
        } else {
            meta.shape.clone()
        };
        if b.shape != expected {
            return Err(EvalError::ShapeMismatch { tensor: meta.name.clone(), expected, found: b.shape.clone() });
        }
    }
    Ok(rows.unwrap_or_else(|| graph.graph_outputs().first().map(|t| graph.tensor(*t).rows()).unwrap_or(1)))
}

/// Evaluates the whole graph sequentially in its stored topological order and
/// returns every graph output.
pub fn eval_reference(
    graph: &Graph,
    bindings: &BTreeMap<TensorId, Tensor>,
) -> Result<BTreeMap<TensorId, Tensor>, EvalError> {
    let rows = check_bindings(graph, bindings)?;
    let mut values: BTreeMap<TensorId, Tensor> = BTreeMap::new();
    for op in graph.operators() {
        let outs = match graph.dtype() {
            DType::I64 => eval_op::<i64>(graph, op, rows, bindings, &values),
            DType::F32 => eval_op::<f32>(graph, op, rows, bindings, &values),
        };
        for (t, v) in op.outputs.iter().zip(outs) {
            values.insert(*t, v);
        }
    }
    Ok(graph.graph_outputs().iter().map(|t| (*t, values[t].clone())).collect())
}

pub(crate) fn eval_op<T: Element>(
    graph: &Graph,
    op: &OperatorNode,
    rows: usize,
    bindings: &BTreeMap<TensorId, Tensor>,
    values: &BTreeMap<TensorId, Tensor>,
) -> Vec<Tensor> {
    let inputs: Vec<View<'_, T>> = op
        .inputs
        .iter()
        .map(|t| {
            let v = bindings.get(t).or_else(|| values.get(t)).expect("inputs evaluated in topological order");
            View::new(T::slice(&v.data), v.rows(), v.row_len())
        })
        .collect();
    let mut outs: Vec<(Vec<usize>, Vec<T>)> = op
        .outputs
        .iter()
        .map(|t| {
            let shape = graph.tensor(*t).shape_at(rows);
            let len = shape.iter().product();
            (shape, vec![T::default(); len])
        })
        .collect();
    {
        let mut views: Vec<ViewMut<'_, T>> = outs
            .iter_mut()
            .map(|(shape, data)| {
                let r = shape.first().copied().unwrap_or(1);
                let c = shape.iter().skip(1).product();
                ViewMut::new(data, r, c)
            })
            .collect();
        match &op.kind {
            OperatorKind::Custom { name } => {
                let k = graph.custom_kernel(name).expect("custom kernels resolved at build time");
                T::run_custom(k.as_ref(), &inputs, &mut views);
            }
            kind => run_builtin(kind, &inputs, &mut views[0]),
        }
    }
    outs.into_iter().map(|(shape, data)| Tensor::new(shape, T::wrap(data))).collect()
}

/// Convenience: bindings by tensor name.
pub fn bindings_by_name(
    graph: &Graph,
    named: impl IntoIterator<Item = (String, Tensor)>,
) -> BTreeMap<TensorId, Tensor> {
    named
        .into_iter()
        .filter_map(|(n, t)| graph.tensor_by_name(&n).map(|m| (m.id, t)))
        .collect()
}
