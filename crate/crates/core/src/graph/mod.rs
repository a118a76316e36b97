//! Logical computational graph: tensors, operators, resource classes and the
//! reference interpreter used as the correctness oracle for every schedule.

mod build;
pub mod desc;
mod eval;
pub mod kernels;
mod tensor;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use build::{build_graph, build_graph_with, GraphError};
pub use desc::{GraphDescription, OperatorDesc, TensorDesc};
pub use eval::{bindings_by_name, eval_reference, EvalError};
pub(crate) use eval::{check_bindings, eval_op};
pub use kernels::{CustomKernel, Element, KernelRegistry, View, ViewMut};
pub use tensor::{concat_rows, split_rows, Tensor, TensorData, TensorOpError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TensorId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct OpId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchSemantics {
    /// Dimension 0 is the token axis and may be split into micro-batches.
    Batched,
    /// Weights and constants; never split.
    Replicated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DType {
    I64,
    F32,
}

impl DType {
    pub fn size_bytes(self) -> usize {
        match self {
            DType::I64 => 8,
            DType::F32 => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorRole {
    GraphInput,
    Weight,
    Intermediate,
    GraphOutput,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResourceClass {
    Compute,
    Memory,
    Network,
}

impl ResourceClass {
    pub const ALL: [ResourceClass; 3] = [ResourceClass::Compute, ResourceClass::Memory, ResourceClass::Network];

    pub fn index(self) -> usize {
        match self {
            ResourceClass::Compute => 0,
            ResourceClass::Memory => 1,
            ResourceClass::Network => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ResourceClass::Compute => "compute",
            ResourceClass::Memory => "memory",
            ResourceClass::Network => "network",
        }
    }
}

impl fmt::Display for ResourceClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Fixed plus per-token cost of one operator invocation, in simulated time units.
///
/// `alpha` is paid once per invocation regardless of batch size; it carries the
/// weight-read penalty that every additional micro-batch pays again.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CostParams {
    pub alpha: f64,
    pub beta: f64,
}

impl CostParams {
    pub const ZERO: CostParams = CostParams { alpha: 0.0, beta: 0.0 };

    pub fn new(alpha: f64, beta: f64) -> Self {
        CostParams { alpha, beta }
    }

    pub fn is_valid(&self) -> bool {
        self.alpha >= 0.0 && self.beta >= 0.0 && self.alpha.is_finite() && self.beta.is_finite()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        CostParams { alpha: self.alpha * factor, beta: self.beta * factor }
    }

    /// Nominal duration for `tokens` tokens.
    pub fn duration(&self, tokens: f64) -> f64 {
        self.alpha + self.beta * tokens
    }
}

impl std::ops::Add for CostParams {
    type Output = CostParams;

    fn add(self, rhs: CostParams) -> CostParams {
        CostParams { alpha: self.alpha + rhs.alpha, beta: self.beta + rhs.beta }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OperatorKind {
    /// Batched `[B, K]` times replicated `[K, N]`.
    MatMul,
    ElemAdd,
    /// Row-wise normalization stand-in: each row is divided by a row statistic.
    RowScale,
    /// Single-device stand-in for a sum over `world_size` replicas.
    AllReduce { world_size: i64 },
    /// Fixed, seeded permutation of each row's elements.
    AllToAll { seed: u64 },
    /// Row-wise prefix sum.
    Attention,
    Custom { name: String },
}

impl OperatorKind {
    pub fn name(&self) -> &str {
        match self {
            OperatorKind::MatMul => "MatMul",
            OperatorKind::ElemAdd => "ElemAdd",
            OperatorKind::RowScale => "RowScale",
            OperatorKind::AllReduce { .. } => "AllReduce",
            OperatorKind::AllToAll { .. } => "AllToAll",
            OperatorKind::Attention => "Attention",
            OperatorKind::Custom { .. } => "Custom",
        }
    }

    pub const NAMES: [&'static str; 7] =
        ["MatMul", "ElemAdd", "RowScale", "AllReduce", "AllToAll", "Attention", "Custom"];

    pub fn default_resource_class(&self) -> ResourceClass {
        match self {
            OperatorKind::MatMul | OperatorKind::Custom { .. } => ResourceClass::Compute,
            OperatorKind::ElemAdd | OperatorKind::RowScale | OperatorKind::Attention => ResourceClass::Memory,
            OperatorKind::AllReduce { .. } | OperatorKind::AllToAll { .. } => ResourceClass::Network,
        }
    }

    pub fn is_batch_decomposable(&self) -> bool {
        !matches!(self, OperatorKind::Custom { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorMeta {
    pub id: TensorId,
    pub name: String,
    pub shape: Vec<usize>,
    pub batch: BatchSemantics,
    pub dtype: DType,
    pub role: TensorRole,
}

impl TensorMeta {
    /// Elements per row: the product of every extent after dimension 0.
    pub fn row_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn is_batched(&self) -> bool {
        self.batch == BatchSemantics::Batched
    }

    /// Shape with the batch extent replaced by `rows` (unchanged for replicated tensors).
    pub fn shape_at(&self, rows: usize) -> Vec<usize> {
        let mut shape = self.shape.clone();
        if self.is_batched() {
            shape[0] = rows;
        }
        shape
    }
}

#[derive(Debug, Clone)]
pub struct OperatorNode {
    pub id: OpId,
    pub name: String,
    pub kind: OperatorKind,
    pub inputs: Vec<TensorId>,
    pub outputs: Vec<TensorId>,
    pub(crate) resource_class: ResourceClass,
    pub module_path: String,
    pub region_tags: BTreeSet<String>,
    pub cost: CostParams,
}

impl OperatorNode {
    pub fn resource_class(&self) -> ResourceClass {
        self.resource_class
    }
}

/// A validated graph. Operators are stored in a topological order and the
/// graph is immutable once built.
#[derive(Debug, Clone)]
pub struct Graph {
    pub(crate) tensors: Vec<TensorMeta>,
    pub(crate) operators: Vec<OperatorNode>,
    pub(crate) graph_inputs: Vec<TensorId>,
    pub(crate) weights: Vec<TensorId>,
    pub(crate) graph_outputs: Vec<TensorId>,
    pub(crate) producer: Vec<Option<OpId>>,
    pub(crate) consumers: Vec<Vec<OpId>>,
    pub(crate) by_name: BTreeMap<String, TensorId>,
    pub(crate) customs: BTreeMap<String, Arc<dyn CustomKernel>>,
    pub(crate) dtype: DType,
}

impl Graph {
    pub fn tensors(&self) -> &[TensorMeta] {
        &self.tensors
    }

    pub fn tensor(&self, id: TensorId) -> &TensorMeta {
        &self.tensors[id.0]
    }

    pub fn tensor_by_name(&self, name: &str) -> Option<&TensorMeta> {
        self.by_name.get(name).map(|id| &self.tensors[id.0])
    }

    pub fn operators(&self) -> &[OperatorNode] {
        &self.operators
    }

    pub fn op(&self, id: OpId) -> &OperatorNode {
        &self.operators[id.0]
    }

    pub fn graph_inputs(&self) -> &[TensorId] {
        &self.graph_inputs
    }

    pub fn weights(&self) -> &[TensorId] {
        &self.weights
    }

    pub fn graph_outputs(&self) -> &[TensorId] {
        &self.graph_outputs
    }

    pub fn producer(&self, t: TensorId) -> Option<OpId> {
        self.producer[t.0]
    }

    pub fn consumers(&self, t: TensorId) -> &[OpId] {
        &self.consumers[t.0]
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn custom_kernel(&self, name: &str) -> Option<&Arc<dyn CustomKernel>> {
        self.customs.get(name)
    }

    pub fn is_output(&self, t: TensorId) -> bool {
        self.tensors[t.0].role == TensorRole::GraphOutput
    }

    /// Returns a copy of this graph with every operator's cost replaced by `f(op)`.
    pub fn with_costs(&self, mut f: impl FnMut(&OperatorNode) -> CostParams) -> Graph {
        let mut g = self.clone();
        for op in &mut g.operators {
            op.cost = f(op);
        }
        g
    }

    /// Checks that `order` (a permutation of operator ids) respects every data dependency.
    pub fn is_topological(&self, order: &[OpId]) -> bool {
        if order.len() != self.operators.len() {
            return false;
        }
        let mut pos = vec![usize::MAX; self.operators.len()];
        for (i, id) in order.iter().enumerate() {
            if id.0 >= pos.len() || pos[id.0] != usize::MAX {
                return false;
            }
            pos[id.0] = i;
        }
        self.operators.iter().all(|op| {
            op.inputs
                .iter()
                .filter_map(|t| self.producer[t.0])
                .all(|p| pos[p.0] < pos[op.id.0])
        })
    }
}
