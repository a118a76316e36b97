//! The scheduling contract exposed to strategies (`split`, `get_ready_ops`,
//! `execute`) and the session that drives one forward invocation.
//!
//! `execute` only enqueues. Once the strategy returns, the full split
//! signature (including every merged instance) is known, so the data-flow
//! analysis runs once and the queued dispatches drain through the engine.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataflow::{static_analysis, Analysis, DataflowError, MemoryConfig, MemoryManager, MemoryReport, SplitSignature, UbRange};
use crate::engine::{
    build_fused_plan, build_subgraph_plan, fused_io, DispatchMode, DispatchQueue, EngineError, InstanceTracker,
    LaunchCosts, PlanKey, PlanPool, PlanUnit, PoolStats, Ticket,
};
use crate::exec::run_plan;
use crate::graph::{
    check_bindings, eval_op, CostParams, CustomKernel, Element, EvalError, Graph, OpId, ResourceClass, Tensor, TensorId,
    View, ViewMut,
};
use crate::partition::{PartitionPlan, SubgraphId};
use crate::sim::{simulate, DispatchRecord, ResourceModel, SimReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct OpHandle {
    pub subgraph: SubgraphId,
    pub ubatch: usize,
    pub topo_index: usize,
    run: u64,
    split_gen: u32,
}

/// Substitute operator for a tuple of different subgraphs.
#[derive(Debug, Clone)]
pub struct ReplaceFn {
    pub kernel: Arc<dyn CustomKernel>,
    pub cost: CostParams,
    pub class: ResourceClass,
}

impl ReplaceFn {
    pub fn new(kernel: Arc<dyn CustomKernel>, cost: CostParams, class: ResourceClass) -> Self {
        ReplaceFn { kernel, cost, class }
    }

    /// A replacement whose semantics are the member subgraphs' own operators
    /// run back to back, with the given cost.
    pub fn composed(graph: &Graph, plan: &PartitionPlan, members: &[SubgraphId], cost: CostParams, class: ResourceClass) -> Self {
        let (inputs, outputs, _) = fused_io(graph, plan, members);
        let mut ops: Vec<OpId> = members.iter().flat_map(|m| plan.subgraph(*m).ops.clone()).collect();
        ops.sort_unstable();
        let name = format!("composed[{}]", members.iter().map(|m| m.0.to_string()).collect::<Vec<_>>().join(","));
        let kernel = ComposedKernel { name, graph: Arc::new(graph.clone()), ops, inputs, outputs };
        ReplaceFn { kernel: Arc::new(kernel), cost, class }
    }
}

#[derive(Debug)]
struct ComposedKernel {
    name: String,
    graph: Arc<Graph>,
    ops: Vec<OpId>,
    inputs: Vec<TensorId>,
    outputs: Vec<TensorId>,
}

impl ComposedKernel {
    fn run<T: Element>(&self, inputs: &[View<'_, T>], outputs: &mut [ViewMut<'_, T>]) {
        let rows = self
            .inputs
            .iter()
            .zip(inputs)
            .find(|(t, _)| self.graph.tensor(**t).is_batched())
            .map(|(_, v)| v.rows)
            .unwrap_or_else(|| outputs[0].rows);
        let bindings: BTreeMap<TensorId, Tensor> = self
            .inputs
            .iter()
            .zip(inputs)
            .map(|(t, v)| (*t, Tensor::new(vec![v.rows, v.cols], T::wrap(v.data.to_vec()))))
            .collect();
        let mut values = BTreeMap::new();
        for op in &self.ops {
            let node = self.graph.op(*op);
            let outs = eval_op::<T>(&self.graph, node, rows, &bindings, &values);
            for (t, v) in node.outputs.iter().zip(outs) {
                values.insert(*t, v);
            }
        }
        for (t, o) in self.outputs.iter().zip(outputs.iter_mut()) {
            o.data.copy_from_slice(T::slice(&values[t].data));
        }
    }
}

impl CustomKernel for ComposedKernel {
    fn name(&self) -> &str {
        &self.name
    }

    fn arity(&self) -> (usize, usize) {
        (self.inputs.len(), self.outputs.len())
    }

    fn run_i64(&self, inputs: &[View<'_, i64>], outputs: &mut [ViewMut<'_, i64>]) {
        self.run(inputs, outputs)
    }

    fn run_f32(&self, inputs: &[View<'_, f32>], outputs: &mut [ViewMut<'_, f32>]) {
        self.run(inputs, outputs)
    }
}

#[derive(Debug, Error)]
pub enum SchedError {
    #[error("split sizes sum to {found}, batch has {expected} rows")]
    SizeMismatch { expected: usize, found: usize },
    #[error("split sizes must all be at least 1")]
    EmptyPart,
    #[error("split already performed for this invocation")]
    AlreadySplit,
    #[error("micro-batch {0} does not exist")]
    InvalidUbatch(usize),
    #[error("{0} is not ready")]
    NotReady(String),
    #[error("{0} appears twice in one execute call")]
    DuplicateHandle(String),
    #[error("replacement does not match the fused group: {0}")]
    SignatureMismatch(String),
    #[error("handle was issued under a different split")]
    MergeAcrossSplits,
    #[error("merged micro-batches must be contiguous: {0}")]
    NonContiguousMerge(String),
    #[error("lane {lane} does not exist (device has {lanes})")]
    InvalidLane { lane: usize, lanes: usize },
    #[error("execute called with no handles")]
    EmptyDispatch,
    #[error("graph lacks subgraphs labeled {0}")]
    MissingLabels(String),
    #[error("graph lacks the pattern {0}")]
    MissingPattern(String),
    #[error("strategy returned with {remaining} subgraph instances never executed")]
    IncompleteSchedule { remaining: usize },
    #[error("strategy error: {0}")]
    Strategy(String),
    #[error(transparent)]
    Dataflow(#[from] DataflowError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// A user-defined scheduling policy.
pub trait Scheduler: Send + Sync {
    fn name(&self) -> &str;

    /// Rejects graphs the strategy cannot handle before anything runs.
    fn check(&self, _graph: &Graph, _plan: &PartitionPlan) -> Result<(), SchedError> {
        Ok(())
    }

    fn schedule(&self, ctx: &mut SchedulerContext<'_>) -> Result<(), SchedError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RuntimeConfig {
    pub lanes: usize,
    pub prealloc: bool,
    pub gc: bool,
    pub plan_cache: bool,
    /// Tokens carried by one batch row (sequence length).
    pub tokens_per_row: f64,
    pub launch: LaunchCosts,
    pub resources: ResourceModel,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        RuntimeConfig {
            lanes: 2,
            prealloc: true,
            gc: true,
            plan_cache: true,
            tokens_per_row: 1.0,
            launch: LaunchCosts::default(),
            resources: ResourceModel::default(),
        }
    }
}

#[derive(Debug, Clone)]
struct Request {
    lane: usize,
    members: Vec<SubgraphId>,
    range: UbRange,
    replace: Option<ReplaceFn>,
    deps: Vec<Ticket>,
}

/// What one dispatch covered, for inspection.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DispatchInfo {
    pub seq: usize,
    pub lane: usize,
    pub subgraphs: Vec<SubgraphId>,
    pub ubatches: UbRange,
    pub rows: usize,
    pub fused: Option<String>,
    pub cached: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EngineStats {
    pub plan_hits: u64,
    pub plan_misses: u64,
    pub analysis_ops: u64,
    pub host_overhead_total: f64,
    /// Tickets in the order the engine ran them.
    pub completion_order: Vec<usize>,
}

impl EngineStats {
    pub fn hit_rate(&self) -> f64 {
        PoolStats { hits: self.plan_hits, misses: self.plan_misses }.hit_rate()
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub outputs: BTreeMap<TensorId, Tensor>,
    pub dispatches: Vec<DispatchInfo>,
    pub records: Vec<DispatchRecord>,
    pub sim: SimReport,
    pub memory: MemoryReport,
    pub stats: EngineStats,
    pub signature: SplitSignature,
    pub mode: DispatchMode,
    /// Every instance completed exactly once.
    pub quiescent: bool,
}

/// Graph, partition and long-lived caches shared by successive invocations.
#[derive(Debug)]
pub struct Session {
    graph: Arc<Graph>,
    plan: Arc<PartitionPlan>,
    cfg: RuntimeConfig,
    pool: PlanPool,
    analyses: BTreeMap<SplitSignature, Arc<Analysis>>,
    analysis_ops: u64,
    runs: u64,
}

impl Session {
    pub fn new(graph: Graph, plan: PartitionPlan, cfg: RuntimeConfig) -> Self {
        let pool = PlanPool::new(cfg.plan_cache);
        Session {
            graph: Arc::new(graph),
            plan: Arc::new(plan),
            cfg,
            pool,
            analyses: BTreeMap::new(),
            analysis_ops: 0,
            runs: 0,
        }
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn plan(&self) -> &PartitionPlan {
        &self.plan
    }

    pub fn config(&self) -> &RuntimeConfig {
        &self.cfg
    }

    pub fn pool_stats(&self) -> PoolStats {
        self.pool.stats()
    }

    /// Graph-analysis operations performed so far (static analyses and plan builds).
    pub fn analysis_ops(&self) -> u64 {
        self.analysis_ops
    }

    /// Memoized static analysis for `sig`.
    pub fn analysis(&mut self, sig: &SplitSignature) -> Result<Arc<Analysis>, DataflowError> {
        if let Some(a) = self.analyses.get(sig) {
            return Ok(a.clone());
        }
        let a = Arc::new(static_analysis(&self.graph, &self.plan, sig)?);
        self.analysis_ops += a.work;
        self.analyses.insert(sig.clone(), a.clone());
        Ok(a)
    }

    /// Runs one forward invocation under `strategy`.
    pub fn forward(&mut self, strategy: &dyn Scheduler, bindings: &BTreeMap<TensorId, Tensor>) -> Result<RunResult, SchedError> {
        let rows = check_bindings(&self.graph, bindings)?;
        strategy.check(&self.graph, &self.plan)?;
        self.runs += 1;
        let mut ctx = SchedulerContext::new(self, rows, self.runs);
        strategy.schedule(&mut ctx)?;
        let remaining = ctx.pending();
        if remaining > 0 {
            return Err(SchedError::IncompleteSchedule { remaining });
        }
        let (sizes, requests) = (ctx.sizes(), ctx.requests);
        self.drain(sizes, requests, bindings)
    }

    fn drain(
        &mut self,
        sizes: Vec<usize>,
        requests: Vec<Request>,
        bindings: &BTreeMap<TensorId, Tensor>,
    ) -> Result<RunResult, SchedError> {
        let graph = self.graph.clone();
        let plan = self.plan.clone();
        let mut sig = SplitSignature::new(sizes);
        for r in &requests {
            for m in &r.members {
                sig.add_merge(*m, r.range);
            }
        }
        let analysis = self.analysis(&sig)?;
        let mode = if sig.len() > 1 { DispatchMode::Dynamic } else { DispatchMode::SequentialFallback };
        let mut mem = MemoryManager::new(&graph, &analysis, MemoryConfig { prealloc: self.cfg.prealloc, gc: self.cfg.gc });
        for &t in graph.graph_inputs() {
            if graph.tensor(t).is_batched() {
                mem.bind_input(t, &bindings[&t]);
            }
        }
        let mut queue = DispatchQueue::new(self.cfg.lanes);
        for r in &requests {
            queue.enqueue(r.lane, &r.deps)?;
        }
        queue.stop();
        let mut tracker = InstanceTracker::new(&plan, sig.len());
        let (hits0, misses0) = (self.pool.stats().hits, self.pool.stats().misses);
        let ops0 = self.analysis_ops;
        let mut records: Vec<Option<DispatchRecord>> = vec![None; requests.len()];
        let mut infos: Vec<Option<DispatchInfo>> = vec![None; requests.len()];
        let mut order = Vec::with_capacity(requests.len());
        let tpr = self.cfg.tokens_per_row;

        while let Some(ticket) = queue.next_runnable() {
            let req = &requests[ticket.0];
            let rows = sig.range_rows(req.range);
            let (key, fused_name) = match &req.replace {
                Some(rf) => {
                    let name = rf.kernel.name().to_string();
                    (PlanKey { unit: PlanUnit::Fused { name: name.clone(), members: req.members.clone() }, rows }, Some(name))
                }
                None => (PlanKey { unit: PlanUnit::Subgraph(req.members[0]), rows }, None),
            };
            let (compiled, cached) = self.pool.get_or_build(&key, || match &req.replace {
                Some(rf) => build_fused_plan(&graph, &plan, &req.members, rf.kernel.clone(), rf.cost, rf.class, rows, tpr),
                None => build_subgraph_plan(&graph, &plan, req.members[0], rows, tpr),
            });
            if !cached {
                self.analysis_ops += compiled.analysis_ops_performed;
            }
            let sources = mem.on_inputs(req.range, &compiled.inputs)?;
            for (t, uses) in &compiled.elided {
                mem.elide(req.range, *t, *uses);
            }
            let dests = mem.on_outputs(req.range, &compiled.outputs)?;
            let mut arena = self.pool.take_arena(req.range);
            run_plan(&compiled, &mut mem, &sources, &dests, bindings, &mut arena, graph.dtype());
            self.pool.put_arena(req.range, arena);
            mem.finish_op();
            queue.complete(ticket);
            tracker.on_complete(&req.members, req.range);
            order.push(ticket.0);

            let label = match &fused_name {
                Some(n) => n.clone(),
                None => plan.subgraph(req.members[0]).label.clone(),
            };
            let suffix = if req.range.1 - req.range.0 == 1 {
                format!("@{}", req.range.0)
            } else {
                format!("@{}..{}", req.range.0, req.range.1)
            };
            records[ticket.0] = Some(DispatchRecord {
                label: format!("{label}{suffix}"),
                lane: req.lane,
                deps: req.deps.iter().map(|d| d.0).collect(),
                host_overhead: self.cfg.launch.host_overhead(mode, cached),
                rows,
                kernels: compiled.sim_kernels.clone(),
            });
            infos[ticket.0] = Some(DispatchInfo {
                seq: ticket.0,
                lane: req.lane,
                subgraphs: req.members.clone(),
                ubatches: req.range,
                rows,
                fused: fused_name,
                cached,
            });
        }
        debug_assert!(queue.is_idle());
        let records: Vec<DispatchRecord> = records.into_iter().map(|r| r.expect("every request drained")).collect();
        let dispatches: Vec<DispatchInfo> = infos.into_iter().map(|r| r.expect("every request drained")).collect();
        let sim = simulate(&records, &self.cfg.resources, self.cfg.lanes);
        let outputs = graph
            .graph_outputs()
            .iter()
            .map(|t| (*t, mem.read(*t).map(|v| Tensor::new(graph.tensor(*t).shape_at(v.rows()), v.data)).expect("outputs stay bound")))
            .collect();
        let stats = EngineStats {
            plan_hits: self.pool.stats().hits - hits0,
            plan_misses: self.pool.stats().misses - misses0,
            analysis_ops: self.analysis_ops - ops0,
            host_overhead_total: records.iter().map(|r| r.host_overhead).sum(),
            completion_order: order,
        };
        Ok(RunResult {
            outputs,
            dispatches,
            records,
            sim,
            memory: mem.report(),
            stats,
            signature: sig,
            mode,
            quiescent: tracker.all_once(),
        })
    }
}

/// Drives `strategy` over one invocation of `session`'s graph.
pub fn run_scheduler(
    strategy: &dyn Scheduler,
    session: &mut Session,
    bindings: &BTreeMap<TensorId, Tensor>,
) -> Result<RunResult, SchedError> {
    session.forward(strategy, bindings)
}

/// The handle through which a strategy drives one invocation.
pub struct SchedulerContext<'s> {
    session: &'s Session,
    rows: usize,
    run: u64,
    split: Option<Vec<usize>>,
    split_gen: u32,
    /// `status[ubatch][subgraph]`: ticket of the dispatch covering the instance.
    status: Vec<Vec<Option<Ticket>>>,
    requests: Vec<Request>,
}

impl<'s> SchedulerContext<'s> {
    fn new(session: &'s Session, rows: usize, run: u64) -> Self {
        SchedulerContext {
            session,
            rows,
            run,
            split: None,
            split_gen: 0,
            status: vec![vec![None; session.plan.len()]; 1],
            requests: Vec::new(),
        }
    }

    pub fn graph(&self) -> &Graph {
        &self.session.graph
    }

    pub fn plan(&self) -> &PartitionPlan {
        &self.session.plan
    }

    pub fn batch_rows(&self) -> usize {
        self.rows
    }

    pub fn tokens(&self) -> f64 {
        self.rows as f64 * self.session.cfg.tokens_per_row
    }

    pub fn lanes(&self) -> usize {
        self.session.cfg.lanes
    }

    pub fn num_ubatches(&self) -> usize {
        self.status.len()
    }

    pub fn is_split(&self) -> bool {
        self.split.is_some()
    }

    fn sizes(&self) -> Vec<usize> {
        self.split.clone().unwrap_or_else(|| vec![self.rows])
    }

    pub fn ubatch_sizes(&self) -> Vec<usize> {
        self.sizes()
    }

    fn pending(&self) -> usize {
        self.status.iter().flatten().filter(|s| s.is_none()).count()
    }

    pub fn is_finished(&self) -> bool {
        self.pending() == 0
    }

    /// Initializes execution for `sizes.len()` micro-batches.
    pub fn split(&mut self, sizes: &[usize]) -> Result<Vec<usize>, SchedError> {
        if self.split.is_some() || !self.requests.is_empty() {
            return Err(SchedError::AlreadySplit);
        }
        if sizes.contains(&0) || sizes.is_empty() {
            return Err(SchedError::EmptyPart);
        }
        let total: usize = sizes.iter().sum();
        if total != self.rows {
            return Err(SchedError::SizeMismatch { expected: self.rows, found: total });
        }
        self.split = Some(sizes.to_vec());
        self.split_gen += 1;
        self.status = vec![vec![None; self.session.plan.len()]; sizes.len()];
        Ok((0..sizes.len()).collect())
    }

    pub fn handle(&self, sg: SubgraphId, ubatch: usize) -> OpHandle {
        OpHandle { subgraph: sg, ubatch, topo_index: sg.0, run: self.run, split_gen: self.split_gen }
    }

    fn describe(&self, h: &OpHandle) -> String {
        format!("{}@{}", self.session.plan.subgraph(h.subgraph).label, h.ubatch)
    }

    /// Undispatched instances of `ubatch` whose predecessors are all dispatched.
    pub fn get_ready_ops(&self, ubatch: usize) -> Result<Vec<OpHandle>, SchedError> {
        let st = self.status.get(ubatch).ok_or(SchedError::InvalidUbatch(ubatch))?;
        let plan = &self.session.plan;
        Ok(plan
            .subgraphs
            .iter()
            .filter(|s| st[s.id.0].is_none() && plan.preds(s.id).iter().all(|p| st[p.0].is_some()))
            .map(|s| self.handle(s.id, ubatch))
            .collect())
    }

    /// Class carrying most of the subgraph's nominal work at the full batch.
    pub fn dominant_class(&self, sg: SubgraphId) -> ResourceClass {
        let graph = &self.session.graph;
        let mut work = [0.0f64; 3];
        let ops = &self.session.plan.subgraph(sg).ops;
        for op in ops {
            let n = graph.op(*op);
            work[n.resource_class().index()] += n.cost.duration(self.tokens());
        }
        if work.iter().all(|w| *w == 0.0) {
            return graph.op(ops[0]).resource_class();
        }
        let mut best = ResourceClass::Compute;
        for c in ResourceClass::ALL {
            if work[c.index()] > work[best.index()] {
                best = c;
            }
        }
        best
    }

    /// Dispatches `handles` on `lane` (lane 0 by default).
    pub fn execute(
        &mut self,
        handles: &[OpHandle],
        lane: Option<usize>,
        replace: Option<ReplaceFn>,
    ) -> Result<Ticket, SchedError> {
        if handles.is_empty() {
            return Err(SchedError::EmptyDispatch);
        }
        let plan = self.session.plan.clone();
        let lane = lane.unwrap_or(0);
        if lane >= self.lanes() {
            return Err(SchedError::InvalidLane { lane, lanes: self.lanes() });
        }
        let mut seen = BTreeSet::new();
        for h in handles {
            if h.run != self.run || h.split_gen != self.split_gen {
                return Err(SchedError::MergeAcrossSplits);
            }
            if h.ubatch >= self.num_ubatches() {
                return Err(SchedError::InvalidUbatch(h.ubatch));
            }
            if h.subgraph.0 >= plan.len() {
                return Err(SchedError::NotReady(format!("unknown subgraph {}", h.subgraph)));
            }
            if !seen.insert((h.subgraph, h.ubatch)) {
                return Err(SchedError::DuplicateHandle(self.describe(h)));
            }
        }

        // group by subgraph, keeping first-appearance order
        let mut groups: Vec<(SubgraphId, Vec<usize>)> = Vec::new();
        for h in handles {
            match groups.iter_mut().find(|g| g.0 == h.subgraph) {
                Some(g) => g.1.push(h.ubatch),
                None => groups.push((h.subgraph, vec![h.ubatch])),
            }
        }
        let mut ranges = Vec::with_capacity(groups.len());
        for (sg, ubs) in &mut groups {
            ubs.sort_unstable();
            if ubs.windows(2).any(|w| w[1] != w[0] + 1) {
                return Err(SchedError::NonContiguousMerge(format!(
                    "{} over micro-batches {:?}",
                    plan.subgraph(*sg).label,
                    ubs
                )));
            }
            ranges.push((ubs[0], ubs[ubs.len() - 1] + 1));
        }
        let fused = groups.len() > 1 && replace.is_some();

        // readiness: predecessors dispatched, or covered earlier in this call
        for (gi, (sg, ubs)) in groups.iter().enumerate() {
            for &ub in ubs {
                if self.status[ub][sg.0].is_some() {
                    return Err(SchedError::NotReady(format!("{}@{ub} (already executed)", plan.subgraph(*sg).label)));
                }
                for p in plan.preds(*sg) {
                    let in_call = groups
                        .iter()
                        .enumerate()
                        .any(|(gj, (s, u))| s == p && u.contains(&ub) && (fused || gj < gi));
                    if self.status[ub][p.0].is_none() && !in_call {
                        return Err(SchedError::NotReady(format!(
                            "{}@{ub} (waits on {})",
                            plan.subgraph(*sg).label,
                            plan.subgraph(*p).label
                        )));
                    }
                }
            }
        }

        if fused {
            let rf = replace.expect("checked above");
            if ranges.iter().any(|r| *r != ranges[0]) {
                return Err(SchedError::SignatureMismatch("fused handles must cover the same micro-batches".into()));
            }
            let mut members: Vec<SubgraphId> = groups.iter().map(|g| g.0).collect();
            members.sort_unstable();
            let (ins, outs, _) = fused_io(&self.session.graph, &plan, &members);
            if rf.kernel.arity() != (ins.len(), outs.len()) {
                return Err(SchedError::SignatureMismatch(format!(
                    "`{}` takes {:?}, group needs ({}, {})",
                    rf.kernel.name(),
                    rf.kernel.arity(),
                    ins.len(),
                    outs.len()
                )));
            }
            return Ok(self.push(lane, members, ranges[0], Some(rf)));
        }
        let mut last = None;
        for ((sg, _), range) in groups.iter().zip(ranges) {
            last = Some(self.push(lane, vec![*sg], range, None));
        }
        Ok(last.expect("at least one group"))
    }

    fn push(&mut self, lane: usize, members: Vec<SubgraphId>, range: UbRange, replace: Option<ReplaceFn>) -> Ticket {
        if self.split.is_none() {
            // executing without a split pins the invocation to one micro-batch
            self.split = Some(vec![self.rows]);
        }
        let plan = &self.session.plan;
        let mut deps = BTreeSet::new();
        for ub in range.0..range.1 {
            for m in &members {
                for p in plan.preds(*m) {
                    if !members.contains(p) {
                        deps.insert(self.status[ub][p.0].expect("readiness checked"));
                    }
                }
            }
        }
        let ticket = Ticket(self.requests.len());
        self.requests.push(Request { lane, members: members.clone(), range, replace, deps: deps.into_iter().collect() });
        for ub in range.0..range.1 {
            for m in &members {
                self.status[ub][m.0] = Some(ticket);
            }
        }
        ticket
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gen::dense_tp;
    use crate::graph::kernels::FusedAllReduceRowScale;
    use crate::graph::{bindings_by_name, build_graph, eval_reference, OperatorKind};
    use crate::partition::{partition, PartitionRule};

    struct Fixed<F: Fn(&mut SchedulerContext<'_>) -> Result<(), SchedError> + Send + Sync>(F);

    impl<F: Fn(&mut SchedulerContext<'_>) -> Result<(), SchedError> + Send + Sync> Scheduler for Fixed<F> {
        fn name(&self) -> &str {
            "fixed"
        }

        fn schedule(&self, ctx: &mut SchedulerContext<'_>) -> Result<(), SchedError> {
            (self.0)(ctx)
        }
    }

    fn setup(rules: &[PartitionRule]) -> (Session, BTreeMap<TensorId, Tensor>) {
        let g = build_graph(&dense_tp(2, 3, 4, 2)).unwrap();
        let plan = partition(&g, rules).unwrap();
        let b = bindings_by_name(
            &g,
            [
                ("x".to_string(), Tensor::from_i64(&[4, 3], (0..12).map(|v| v * 5 - 17).collect())),
                ("l0.w".to_string(), Tensor::from_i64(&[3, 3], vec![1, 2, 0, -1, 3, 1, 2, 0, 1])),
                ("l1.w".to_string(), Tensor::from_i64(&[3, 3], vec![0, 1, 1, 2, -2, 1, 1, 1, 3])),
            ],
        );
        (Session::new(g, plan, RuntimeConfig::default()), b)
    }

    fn func_rules() -> Vec<PartitionRule> {
        vec![PartitionRule::ByFunc("AllReduce".into()), PartitionRule::ByFunc("RowScale".into())]
    }

    fn in_order(ctx: &mut SchedulerContext<'_>) -> Result<(), SchedError> {
        for ub in 0..ctx.num_ubatches() {
            while let Some(h) = ctx.get_ready_ops(ub)?.first().copied() {
                ctx.execute(&[h], None, None)?;
            }
        }
        Ok(())
    }

    #[test]
    fn ready_frontier_on_chain() {
        let (s, _) = setup(&func_rules());
        let mut ctx = SchedulerContext::new(&s, 4, 1);
        let r = ctx.get_ready_ops(0).unwrap();
        assert_eq!(r.iter().map(|h| h.subgraph).collect::<Vec<_>>(), vec![SubgraphId(0)]);
        assert!(matches!(ctx.get_ready_ops(3), Err(SchedError::InvalidUbatch(3))));
        assert!(matches!(ctx.execute(&[ctx.handle(SubgraphId(1), 0)], None, None), Err(SchedError::NotReady(_))));
    }

    #[test]
    fn identity_split_matches_unsplit() {
        let (mut s, b) = setup(&func_rules());
        let reference = eval_reference(s.graph(), &b).unwrap();
        s.forward(&Fixed(in_order), &b).unwrap();
        let plain = s.forward(&Fixed(in_order), &b).unwrap();
        let split = s
            .forward(
                &Fixed(|ctx: &mut SchedulerContext<'_>| {
                    assert_eq!(ctx.split(&[4])?, vec![0]);
                    in_order(ctx)
                }),
                &b,
            )
            .unwrap();
        assert_eq!(plain.outputs, reference);
        assert_eq!(split.outputs, reference);
        assert_eq!(plain.sim.makespan, split.sim.makespan);
    }

    #[test]
    fn split_errors() {
        let (s, _) = setup(&[]);
        let mut ctx = SchedulerContext::new(&s, 4, 1);
        assert!(matches!(ctx.split(&[2, 3]), Err(SchedError::SizeMismatch { expected: 4, found: 5 })));
        assert_eq!(ctx.split(&[3, 1]).unwrap(), vec![0, 1]);
        assert!(matches!(ctx.split(&[2, 2]), Err(SchedError::AlreadySplit)));
    }

    #[test]
    fn merged_dispatch_reads_merge_buffer_without_copies() {
        let (mut s, b) = setup(&func_rules());
        let reference = eval_reference(s.graph(), &b).unwrap();
        let strategy = Fixed(|ctx: &mut SchedulerContext<'_>| {
            ctx.split(&[2, 2])?;
            // per-ubatch filler, merged all-reduce, then everything else per ubatch
            let a0 = ctx.get_ready_ops(0)?[0];
            let a1 = ctx.get_ready_ops(1)?[0];
            ctx.execute(&[a0], None, None)?;
            ctx.execute(&[a1], None, None)?;
            let m = [ctx.get_ready_ops(0)?[0], ctx.get_ready_ops(1)?[0]];
            ctx.execute(&m, Some(1), None)?;
            in_order(ctx)
        });
        let run = s.forward(&strategy, &b).unwrap();
        assert_eq!(run.outputs, reference);
        assert_eq!(run.memory.total_copied_elements, 0);
        assert!(run.memory.conservation_ok && run.quiescent);
        let merged = run.dispatches.iter().find(|d| d.ubatches == (0, 2)).unwrap();
        assert_eq!(merged.rows, 4);
        assert_eq!(run.memory.end_live_tensors, vec!["y".to_string()]);
    }

    #[test]
    fn fused_dispatch_matches_oracle() {
        let (mut s, b) = setup(&func_rules());
        let reference = eval_reference(s.graph(), &b).unwrap();
        let strategy = Fixed(|ctx: &mut SchedulerContext<'_>| {
            ctx.split(&[1, 3])?;
            for ub in 0..2 {
                while !ctx.get_ready_ops(ub)?.is_empty() {
                    let h = ctx.get_ready_ops(ub)?[0];
                    let kind = ctx.graph().op(ctx.plan().subgraph(h.subgraph).ops[0]).kind.clone();
                    if matches!(kind, OperatorKind::AllReduce { .. }) {
                        let next = ctx.handle(SubgraphId(h.subgraph.0 + 1), ub);
                        let rf = ReplaceFn::new(
                            Arc::new(FusedAllReduceRowScale { world_size: 2 }),
                            CostParams::new(1.0, 0.0),
                            ResourceClass::Network,
                        );
                        ctx.execute(&[h, next], Some(1), Some(rf))?;
                    } else {
                        ctx.execute(&[h], None, None)?;
                    }
                }
            }
            Ok(())
        });
        let run = s.forward(&strategy, &b).unwrap();
        assert_eq!(run.outputs, reference);
        assert_eq!(run.dispatches.iter().filter(|d| d.fused.is_some()).count(), 4);
        assert!(run.memory.conservation_ok && run.quiescent);
    }

    #[test]
    fn replacement_arity_checked() {
        let (s, _) = setup(&func_rules());
        let mut ctx = SchedulerContext::new(&s, 4, 1);
        let h0 = ctx.get_ready_ops(0).unwrap()[0];
        let h1 = ctx.handle(SubgraphId(1), 0);
        let rf = ReplaceFn::new(
            Arc::new(crate::graph::kernels::Negate),
            CostParams::ZERO,
            ResourceClass::Compute,
        );
        // filler reads x and l0.w: two inputs, negate takes one
        assert!(matches!(ctx.execute(&[h0, h1], None, Some(rf)), Err(SchedError::SignatureMismatch(_))));
    }

    #[test]
    fn incomplete_schedule_and_stale_handles() {
        let (mut s, b) = setup(&[]);
        assert!(matches!(s.forward(&Fixed(|_| Ok(())), &b), Err(SchedError::IncompleteSchedule { remaining: 1 })));
        let (s, _) = setup(&[]);
        let mut ctx = SchedulerContext::new(&s, 4, 1);
        let stale = ctx.get_ready_ops(0).unwrap()[0];
        ctx.split(&[2, 2]).unwrap();
        assert!(matches!(ctx.execute(&[stale], None, None), Err(SchedError::MergeAcrossSplits)));
    }

    #[test]
    fn second_forward_hits_every_plan() {
        let (mut s, b) = setup(&func_rules());
        let split2 = Fixed(|ctx: &mut SchedulerContext<'_>| {
            ctx.split(&[2, 2])?;
            in_order(ctx)
        });
        let first = s.forward(&split2, &b).unwrap();
        assert!(first.stats.plan_misses > 0 && first.stats.analysis_ops > 0);
        let second = s.forward(&split2, &b).unwrap();
        assert_eq!(second.stats.plan_misses, 0);
        assert_eq!(second.stats.hit_rate(), 1.0);
        assert_eq!(second.stats.analysis_ops, 0);
        assert_eq!(first.outputs, second.outputs);
    }
}
