//! Dispatch backend: per-lane FIFO queues with dependency gating, the
//! instance tracker that turns completions into ready notifications, the
//! compiled-plan pool, and the host launch-cost model.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataflow::UbRange;
use crate::graph::{CostParams, CustomKernel, Graph, OperatorKind, ResourceClass, TensorData, TensorId};
use crate::partition::{PartitionPlan, SubgraphId};
use crate::sim::SimKernel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct Ticket(pub usize);

#[derive(Debug, Error, PartialEq)]
pub enum EngineError {
    #[error("engine stopped; request rejected")]
    EngineStopped,
    #[error("lane {lane} does not exist (engine has {lanes})")]
    InvalidLane { lane: usize, lanes: usize },
    #[error("request depends on unknown ticket {0}")]
    UnknownDependency(usize),
}

/// FIFO queues, one per lane. A lane's head runs once every ticket it depends
/// on has completed; heads are polled round-robin across lanes.
#[derive(Debug)]
pub struct DispatchQueue {
    lanes: Vec<VecDeque<usize>>,
    deps: Vec<Vec<usize>>,
    done: Vec<bool>,
    cursor: usize,
    stopped: bool,
}

impl DispatchQueue {
    pub fn new(lanes: usize) -> Self {
        DispatchQueue { lanes: vec![VecDeque::new(); lanes.max(1)], deps: Vec::new(), done: Vec::new(), cursor: 0, stopped: false }
    }

    pub fn enqueue(&mut self, lane: usize, deps: &[Ticket]) -> Result<Ticket, EngineError> {
        if self.stopped {
            return Err(EngineError::EngineStopped);
        }
        if lane >= self.lanes.len() {
            return Err(EngineError::InvalidLane { lane, lanes: self.lanes.len() });
        }
        let seq = self.deps.len();
        if let Some(d) = deps.iter().find(|d| d.0 >= seq) {
            return Err(EngineError::UnknownDependency(d.0));
        }
        self.deps.push(deps.iter().map(|d| d.0).collect());
        self.done.push(false);
        self.lanes[lane].push_back(seq);
        Ok(Ticket(seq))
    }

    pub fn stop(&mut self) {
        self.stopped = true;
    }

    /// Pops the next lane head whose dependencies have completed.
    pub fn next_runnable(&mut self) -> Option<Ticket> {
        let n = self.lanes.len();
        for step in 0..n {
            let lane = (self.cursor + step) % n;
            if let Some(&head) = self.lanes[lane].front() {
                if self.deps[head].iter().all(|d| self.done[*d]) {
                    self.lanes[lane].pop_front();
                    self.cursor = (lane + 1) % n;
                    return Some(Ticket(head));
                }
            }
        }
        None
    }

    pub fn complete(&mut self, t: Ticket) {
        self.done[t.0] = true;
    }

    pub fn is_idle(&self) -> bool {
        self.lanes.iter().all(VecDeque::is_empty)
    }

    pub fn len(&self) -> usize {
        self.deps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deps.is_empty()
    }
}

/// In-degree bookkeeping over subgraph instances `(subgraph, ubatch)`.
#[derive(Debug, Clone)]
pub struct InstanceTracker {
    indegree: Vec<Vec<usize>>,
    completed: Vec<Vec<usize>>,
    succs: Vec<Vec<SubgraphId>>,
}

impl InstanceTracker {
    pub fn new(plan: &PartitionPlan, ubatches: usize) -> Self {
        let indeg: Vec<usize> = plan.subgraphs.iter().map(|s| plan.preds(s.id).len()).collect();
        InstanceTracker {
            indegree: vec![indeg; ubatches],
            completed: vec![vec![0; plan.len()]; ubatches],
            succs: plan.subgraphs.iter().map(|s| plan.succs(s.id).to_vec()).collect(),
        }
    }

    /// Records completion of `members` over `range` and returns the instances
    /// whose last predecessor just completed, ordered by micro-batch then plan position.
    pub fn on_complete(&mut self, members: &[SubgraphId], range: UbRange) -> Vec<(SubgraphId, usize)> {
        let mut ready = Vec::new();
        for ub in range.0..range.1 {
            for m in members {
                self.completed[ub][m.0] += 1;
            }
            for m in members {
                for s in &self.succs[m.0] {
                    if members.contains(s) {
                        continue;
                    }
                    self.indegree[ub][s.0] -= 1;
                    if self.indegree[ub][s.0] == 0 {
                        ready.push((*s, ub));
                    }
                }
            }
        }
        ready.sort_by_key(|(s, ub)| (*ub, *s));
        ready
    }

    /// True when every instance completed exactly once.
    pub fn all_once(&self) -> bool {
        self.completed.iter().flatten().all(|c| *c == 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DispatchMode {
    /// The invocation was split; dispatches go through the dynamic scheduler.
    Dynamic,
    /// Unsplit invocation replayed in program order.
    SequentialFallback,
}

/// Host-side cost of issuing one dispatch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LaunchCosts {
    /// Reference framework without a programmable scheduler; reported only.
    pub baseline: f64,
    pub sequential_fallback: f64,
    pub dynamic: f64,
    /// Multiplier applied when the dispatched plan was not cached.
    pub uncached_factor: f64,
    /// Converts launch-cost units into simulated device time units.
    pub time_scale: f64,
}

impl Default for LaunchCosts {
    fn default() -> Self {
        LaunchCosts { baseline: 4.4, sequential_fallback: 4.7, dynamic: 10.8, uncached_factor: 6.4, time_scale: 0.01 }
    }
}

impl LaunchCosts {
    /// Per-dispatch host overhead in launch-cost units.
    pub fn launch_cost_model(&self, mode: DispatchMode, plan_cached: bool) -> f64 {
        let base = match mode {
            DispatchMode::Dynamic => self.dynamic,
            DispatchMode::SequentialFallback => self.sequential_fallback,
        };
        if plan_cached {
            base
        } else {
            base * self.uncached_factor
        }
    }

    /// The same overhead expressed in simulated device time.
    pub fn host_overhead(&self, mode: DispatchMode, plan_cached: bool) -> f64 {
        self.launch_cost_model(mode, plan_cached) * self.time_scale
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum PlanUnit {
    Subgraph(SubgraphId),
    Fused { name: String, members: Vec<SubgraphId> },
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct PlanKey {
    pub unit: PlanUnit,
    pub rows: usize,
}

/// Where a plan operand lives during replay.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    /// i-th resolved input of the dispatch.
    Input(usize),
    /// i-th output destination of the dispatch.
    Output(usize),
    /// i-th scratch arena slot.
    Arena(usize),
}

#[derive(Debug, Clone)]
pub enum PlanKernel {
    Builtin(OperatorKind),
    Custom(Arc<dyn CustomKernel>),
}

#[derive(Debug, Clone)]
pub struct PlanOp {
    pub name: String,
    pub kernel: PlanKernel,
    pub inputs: Vec<Slot>,
    pub outputs: Vec<Slot>,
}

/// Analysis-free replay form of one `(unit, rows)` pair.
#[derive(Debug, Clone)]
pub struct CompiledPlan {
    pub key: PlanKey,
    pub ops: Vec<PlanOp>,
    pub inputs: Vec<TensorId>,
    pub outputs: Vec<TensorId>,
    /// Elided tensors with the number of member subgraphs consuming each.
    pub elided: Vec<(TensorId, usize)>,
    /// `(rows, cols)` per input, output and arena slot.
    pub input_shapes: Vec<(usize, usize)>,
    pub output_shapes: Vec<(usize, usize)>,
    pub arena_shapes: Vec<(usize, usize)>,
    pub sim_kernels: Vec<SimKernel>,
    pub analysis_ops_performed: u64,
}

fn shape_of(graph: &Graph, t: TensorId, rows: usize) -> (usize, usize) {
    let m = graph.tensor(t);
    (if m.is_batched() { rows } else { m.rows() }, m.row_len())
}

/// Resolves every operand of one subgraph to a slot.
pub fn build_subgraph_plan(
    graph: &Graph,
    plan: &PartitionPlan,
    sg: SubgraphId,
    rows: usize,
    tokens_per_row: f64,
) -> CompiledPlan {
    let s = plan.subgraph(sg);
    let mut slots: BTreeMap<TensorId, Slot> = BTreeMap::new();
    for (i, t) in s.boundary_inputs.iter().enumerate() {
        slots.insert(*t, Slot::Input(i));
    }
    for (i, t) in s.boundary_outputs.iter().enumerate() {
        slots.insert(*t, Slot::Output(i));
    }
    let mut arena_shapes = Vec::new();
    let mut work = 0u64;
    let mut ops = Vec::with_capacity(s.ops.len());
    let mut sim_kernels = Vec::with_capacity(s.ops.len());
    for op in &s.ops {
        let node = graph.op(*op);
        let outputs = node
            .outputs
            .iter()
            .map(|t| {
                *slots.entry(*t).or_insert_with(|| {
                    arena_shapes.push(shape_of(graph, *t, rows));
                    Slot::Arena(arena_shapes.len() - 1)
                })
            })
            .collect();
        let inputs = node.inputs.iter().map(|t| slots[t]).collect();
        let kernel = match &node.kind {
            OperatorKind::Custom { name } => {
                PlanKernel::Custom(graph.custom_kernel(name).expect("resolved at build time").clone())
            }
            k => PlanKernel::Builtin(k.clone()),
        };
        work += 1 + node.inputs.len() as u64 + node.outputs.len() as u64;
        ops.push(PlanOp { name: node.name.clone(), kernel, inputs, outputs });
        sim_kernels.push(SimKernel {
            name: node.name.clone(),
            class: node.resource_class(),
            duration: node.cost.duration(rows as f64 * tokens_per_row),
        });
    }
    CompiledPlan {
        key: PlanKey { unit: PlanUnit::Subgraph(sg), rows },
        ops,
        inputs: s.boundary_inputs.clone(),
        outputs: s.boundary_outputs.clone(),
        elided: Vec::new(),
        input_shapes: s.boundary_inputs.iter().map(|t| shape_of(graph, *t, rows)).collect(),
        output_shapes: s.boundary_outputs.iter().map(|t| shape_of(graph, *t, rows)).collect(),
        arena_shapes,
        sim_kernels,
        analysis_ops_performed: work,
    }
}

/// External interface of a fused group: inputs produced outside it, outputs
/// consumed outside it (or graph outputs), and internal tensors it elides.
pub fn fused_io(
    graph: &Graph,
    plan: &PartitionPlan,
    members: &[SubgraphId],
) -> (Vec<TensorId>, Vec<TensorId>, Vec<(TensorId, usize)>) {
    let inside = |t: TensorId| plan.producer_of(graph, t).is_some_and(|p| members.contains(&p));
    let mut inputs = Vec::new();
    let mut outputs = Vec::new();
    let mut elided = Vec::new();
    for m in members {
        for t in &plan.subgraph(*m).boundary_inputs {
            if !inside(*t) && !inputs.contains(t) {
                inputs.push(*t);
            }
        }
    }
    for m in members {
        for t in &plan.subgraph(*m).boundary_outputs {
            let consumers: Vec<SubgraphId> = plan.consumers_of(*t).collect();
            let external = graph.is_output(*t) || consumers.iter().any(|c| !members.contains(c));
            if external {
                outputs.push(*t);
            } else {
                elided.push((*t, consumers.len()));
            }
        }
    }
    (inputs, outputs, elided)
}

/// A fused group replayed as one kernel with its own cost.
#[allow(clippy::too_many_arguments)]
pub fn build_fused_plan(
    graph: &Graph,
    plan: &PartitionPlan,
    members: &[SubgraphId],
    kernel: Arc<dyn CustomKernel>,
    cost: CostParams,
    class: ResourceClass,
    rows: usize,
    tokens_per_row: f64,
) -> CompiledPlan {
    let (inputs, outputs, elided) = fused_io(graph, plan, members);
    let name = kernel.name().to_string();
    let op = PlanOp {
        name: name.clone(),
        kernel: PlanKernel::Custom(kernel),
        inputs: (0..inputs.len()).map(Slot::Input).collect(),
        outputs: (0..outputs.len()).map(Slot::Output).collect(),
    };
    let work = members.iter().map(|m| plan.subgraph(*m).ops.len() as u64).sum::<u64>() + 1;
    CompiledPlan {
        key: PlanKey { unit: PlanUnit::Fused { name: name.clone(), members: members.to_vec() }, rows },
        ops: vec![op],
        input_shapes: inputs.iter().map(|t| shape_of(graph, *t, rows)).collect(),
        output_shapes: outputs.iter().map(|t| shape_of(graph, *t, rows)).collect(),
        inputs,
        outputs,
        elided,
        arena_shapes: Vec::new(),
        sim_kernels: vec![SimKernel { name, class, duration: cost.duration(rows as f64 * tokens_per_row) }],
        analysis_ops_performed: work,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct PoolStats {
    pub hits: u64,
    pub misses: u64,
}

impl PoolStats {
    pub fn hit_rate(&self) -> f64 {
        let total = self.hits + self.misses;
        if total == 0 {
            0.0
        } else {
            self.hits as f64 / total as f64
        }
    }
}

/// Compiled plans keyed by `(unit, rows)` plus one scratch arena per
/// micro-batch range, shared by every plan replayed for that range.
#[derive(Debug, Default)]
pub struct PlanPool {
    enabled: bool,
    plans: BTreeMap<PlanKey, Arc<CompiledPlan>>,
    arenas: BTreeMap<UbRange, Vec<TensorData>>,
    stats: PoolStats,
}

impl PlanPool {
    pub fn new(enabled: bool) -> Self {
        PlanPool { enabled, ..Default::default() }
    }

    /// Returns the cached plan for `key` or builds it. The flag reports a hit.
    pub fn get_or_build(&mut self, key: &PlanKey, build: impl FnOnce() -> CompiledPlan) -> (Arc<CompiledPlan>, bool) {
        if self.enabled {
            if let Some(p) = self.plans.get(key) {
                self.stats.hits += 1;
                return (p.clone(), true);
            }
        }
        self.stats.misses += 1;
        let plan = Arc::new(build());
        debug_assert_eq!(&plan.key, key);
        if self.enabled {
            self.plans.insert(key.clone(), plan.clone());
        }
        (plan, false)
    }

    pub fn stats(&self) -> PoolStats {
        self.stats
    }

    pub fn len(&self) -> usize {
        self.plans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.plans.is_empty()
    }

    pub(crate) fn take_arena(&mut self, range: UbRange) -> Vec<TensorData> {
        self.arenas.remove(&range).unwrap_or_default()
    }

    pub(crate) fn put_arena(&mut self, range: UbRange, arena: Vec<TensorData>) {
        self.arenas.insert(range, arena);
    }

    /// Elements held by all scratch arenas.
    pub fn arena_elements(&self) -> usize {
        self.arenas.values().flatten().map(TensorData::len).sum()
    }
}
