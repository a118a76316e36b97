//! Declarative JSON graph description.
//!
//! ```json
//! {
//!   "tensors": [
//!     {"id": "x", "shape": [4, 2], "batch": "batched", "dtype": "i64", "role": "graph_input"},
//!     {"id": "w", "shape": [2, 3], "batch": "replicated", "dtype": "i64", "role": "weight"},
//!     {"id": "y", "shape": [4, 3], "batch": "batched", "dtype": "i64", "role": "graph_output"}
//!   ],
//!   "operators": [
//!     {"id": "mm", "op": {"kind": "mat_mul"}, "inputs": ["x", "w"], "outputs": ["y"],
//!      "module_path": "layer0.mlp"}
//!   ]
//! }
//! ```

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{BatchSemantics, CostParams, DType, OperatorKind, ResourceClass, TensorRole};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorDesc {
    pub id: String,
    pub shape: Vec<usize>,
    pub batch: BatchSemantics,
    #[serde(default = "default_dtype")]
    pub dtype: DType,
    pub role: TensorRole,
}

fn default_dtype() -> DType {
    DType::I64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorDesc {
    pub id: String,
    pub op: OperatorKind,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    #[serde(default)]
    pub module_path: String,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub region_tags: BTreeSet<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resource_class: Option<ResourceClass>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost: Option<CostParams>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GraphDescription {
    pub tensors: Vec<TensorDesc>,
    pub operators: Vec<OperatorDesc>,
}

impl GraphDescription {
    pub fn tensor(&mut self, id: &str, shape: &[usize], batch: BatchSemantics, role: TensorRole) -> &mut Self {
        self.tensors.push(TensorDesc { id: id.to_string(), shape: shape.to_vec(), batch, dtype: DType::I64, role });
        self
    }

    pub fn op(&mut self, id: &str, op: OperatorKind, inputs: &[&str], outputs: &[&str], module_path: &str) -> &mut Self {
        self.operators.push(OperatorDesc {
            id: id.to_string(),
            op,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            outputs: outputs.iter().map(|s| s.to_string()).collect(),
            module_path: module_path.to_string(),
            region_tags: BTreeSet::new(),
            resource_class: None,
            cost: None,
        });
        self
    }

    /// Sets every tensor's dtype.
    pub fn with_dtype(mut self, dtype: DType) -> Self {
        for t in &mut self.tensors {
            t.dtype = dtype;
        }
        self
    }
}
