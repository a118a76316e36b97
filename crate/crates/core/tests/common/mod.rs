//! Shared generators and independent oracles for the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Mutex;

use opflow::graph::BatchSemantics::{Batched, Replicated};
use opflow::graph::TensorRole::{GraphInput, GraphOutput, Intermediate, Weight};
use opflow::graph::{
    build_graph, CostParams, DType, Graph, GraphDescription, OperatorKind, ResourceClass, Tensor, TensorId, TensorRole,
};
use opflow::partition::{partition, PartitionPlan, PartitionRule};
use opflow::sched::{OpHandle, RunResult, SchedError, Scheduler, SchedulerContext};
use opflow::sim::{DispatchRecord, ResourceModel};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn scenario_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

/// A random operator DAG with at most `max_ops` operators, plus random
/// partition rules (contiguous region chunks, sometimes a `ByFunc`).
pub fn random_graph(r: &mut ChaCha8Rng, max_ops: usize, dtype: DType) -> (GraphDescription, Vec<PartitionRule>) {
    let n_ops = r.gen_range(1..=max_ops);
    // (name, width, role)
    let mut tensors: Vec<(String, usize, TensorRole)> = vec![("x0".into(), r.gen_range(2..=5), GraphInput)];
    if r.gen_bool(0.3) {
        let w = tensors[0].1;
        tensors.push(("x1".into(), w, GraphInput));
    }
    let mut weights: Vec<(String, usize, usize)> = Vec::new();
    let mut consumed: Vec<bool> = vec![false; tensors.len()];
    let mut ops: Vec<(String, OperatorKind, Vec<String>, String)> = Vec::new();

    for i in 0..n_ops {
        // prefer recent tensors; the first op always reads x0
        let pick = |r: &mut ChaCha8Rng, len: usize| -> usize {
            if r.gen_bool(0.6) {
                len - 1
            } else {
                r.gen_range(0..len)
            }
        };
        let a = if i == 0 { 0 } else { pick(r, tensors.len()) };
        let width = tensors[a].1;
        let out = format!("t{i}");
        let (kind, inputs, out_width) = match r.gen_range(0..7) {
            0 => {
                let n = r.gen_range(2..=5);
                let w = format!("w{i}");
                weights.push((w.clone(), width, n));
                (OperatorKind::MatMul, vec![tensors[a].0.clone(), w], n)
            }
            1 => {
                let same: Vec<usize> = (0..tensors.len()).filter(|j| tensors[*j].1 == width).collect();
                let b = *same.choose(r).expect("a itself qualifies");
                consumed[b] = true;
                (OperatorKind::ElemAdd, vec![tensors[a].0.clone(), tensors[b].0.clone()], width)
            }
            2 => (OperatorKind::RowScale, vec![tensors[a].0.clone()], width),
            3 => (OperatorKind::AllReduce { world_size: r.gen_range(1..=4) }, vec![tensors[a].0.clone()], width),
            4 => (OperatorKind::AllToAll { seed: r.gen() }, vec![tensors[a].0.clone()], width),
            5 => (OperatorKind::Attention, vec![tensors[a].0.clone()], width),
            _ => (OperatorKind::Custom { name: "negate".into() }, vec![tensors[a].0.clone()], width),
        };
        consumed[a] = true;
        tensors.push((out.clone(), out_width, Intermediate));
        consumed.push(false);
        ops.push((format!("op{i}"), kind, inputs, out));
    }
    if !consumed.iter().any(|c| !*c) {
        unreachable!("the last output is never consumed");
    }

    let mut d = GraphDescription::default();
    for (k, (name, w, role)) in tensors.iter().enumerate() {
        let role = match role {
            Intermediate if !consumed[k] => GraphOutput,
            Intermediate if r.gen_bool(0.1) => GraphOutput,
            other => *other,
        };
        d.tensor(name, &[6, *w], Batched, role);
    }
    for (name, k, n) in &weights {
        d.tensor(name, &[*k, *n], Replicated, Weight);
    }
    for (i, (name, kind, inputs, out)) in ops.iter().enumerate() {
        let ins: Vec<&str> = inputs.iter().map(String::as_str).collect();
        d.op(name, kind.clone(), &ins, &[out], &format!("blk{}.op{i}", i / 3));
        let cost = CostParams::new(r.gen_range(0.0..1.0), r.gen_range(0.0..0.5));
        d.operators[i].cost = Some(cost);
    }
    let mut d = d.with_dtype(dtype);

    // contiguous chunks, each tagged with its own region
    let mut rules = Vec::new();
    let mut start = 0;
    let mut chunk = 0;
    while start < n_ops {
        let len = r.gen_range(1..=4).min(n_ops - start);
        let tag = format!("r{chunk}");
        for op in &mut d.operators[start..start + len] {
            op.region_tags.insert(tag.clone());
        }
        if r.gen_bool(0.6) {
            rules.push(PartitionRule::ByRegion(tag));
        }
        start += len;
        chunk += 1;
    }
    if r.gen_bool(0.3) {
        rules.push(PartitionRule::ByFunc(["AllReduce", "RowScale", "MatMul"].choose(r).unwrap().to_string()));
    }
    (d, rules)
}

pub fn build_random(r: &mut ChaCha8Rng, max_ops: usize, dtype: DType) -> (Graph, PartitionPlan) {
    let (d, rules) = random_graph(r, max_ops, dtype);
    let g = build_graph(&d).expect("generated graph builds");
    let plan = partition(&g, &rules).expect("generated rules partition");
    (g, plan)
}

pub fn random_inputs(g: &Graph, rows: usize, r: &mut ChaCha8Rng) -> BTreeMap<TensorId, Tensor> {
    opflow::scenario::random_bindings(g, rows, r.gen())
}

/// Random positive sizes summing to `rows`.
pub fn random_sizes(r: &mut ChaCha8Rng, rows: usize, parts: usize) -> Vec<usize> {
    let parts = parts.min(rows).max(1);
    let mut cuts: Vec<usize> = (1..rows).collect();
    cuts.shuffle(r);
    let mut cuts: Vec<usize> = cuts.into_iter().take(parts - 1).collect();
    cuts.sort_unstable();
    let mut sizes = Vec::new();
    let mut prev = 0;
    for c in cuts.into_iter().chain([rows]) {
        sizes.push(c - prev);
        prev = c;
    }
    sizes
}

/// A legal schedule drawn at random: a random split into up to `max_parts`
/// micro-batches, then ready instances in random order, merged over random
/// runs of adjacent micro-batches, on random lanes.
pub struct RandomSchedule {
    rng: Mutex<ChaCha8Rng>,
    pub max_parts: usize,
    pub merge_p: f64,
}

impl RandomSchedule {
    pub fn new(seed: u64, max_parts: usize, merge_p: f64) -> Self {
        RandomSchedule { rng: Mutex::new(rng(seed)), max_parts, merge_p }
    }
}

impl Scheduler for RandomSchedule {
    fn name(&self) -> &str {
        "random"
    }

    fn schedule(&self, ctx: &mut SchedulerContext<'_>) -> Result<(), SchedError> {
        let mut r = self.rng.lock().unwrap();
        let parts = r.gen_range(1..=self.max_parts);
        if parts > 1 || r.gen_bool(0.5) {
            let sizes = random_sizes(&mut r, ctx.batch_rows(), parts);
            ctx.split(&sizes)?;
        }
        let n = ctx.num_ubatches();
        while !ctx.is_finished() {
            let mut ready: Vec<OpHandle> = Vec::new();
            for ub in 0..n {
                ready.extend(ctx.get_ready_ops(ub)?);
            }
            let h = *ready.choose(&mut *r).expect("a legal schedule always has a ready instance");
            let lane = r.gen_range(0..ctx.lanes());
            if r.gen_bool(self.merge_p) {
                let is_ready = |ub: usize| ready.iter().any(|o| o.subgraph == h.subgraph && o.ubatch == ub);
                let mut lo = h.ubatch;
                while lo > 0 && is_ready(lo - 1) {
                    lo -= 1;
                }
                let mut hi = h.ubatch + 1;
                while hi < n && is_ready(hi) {
                    hi += 1;
                }
                let a = r.gen_range(lo..=h.ubatch);
                let b = r.gen_range(h.ubatch + 1..=hi);
                let hs: Vec<OpHandle> = (a..b).map(|ub| ctx.handle(h.subgraph, ub)).collect();
                ctx.execute(&hs, Some(lane), None)?;
            } else {
                ctx.execute(&[h], Some(lane), None)?;
            }
        }
        Ok(())
    }
}

pub fn outputs_equal(a: &BTreeMap<TensorId, Tensor>, b: &BTreeMap<TensorId, Tensor>) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|((ka, ta), (kb, tb))| ka == kb && ta.approx_eq(tb, 1e-6, 1e-6))
}

pub fn output_names(g: &Graph) -> Vec<String> {
    let mut v: Vec<String> = g.graph_outputs().iter().map(|t| g.tensor(*t).name.clone()).collect();
    v.sort();
    v
}

fn record_duration(r: &DispatchRecord) -> f64 {
    r.kernels.iter().map(|k| k.duration).sum()
}

/// Longest path through the records, following dependencies and lane order,
/// with nominal kernel durations.
pub fn critical_path(records: &[DispatchRecord]) -> f64 {
    let mut finish = vec![0.0f64; records.len()];
    let mut lane_last: BTreeMap<usize, usize> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        let mut start: f64 = r.deps.iter().map(|d| finish[*d]).fold(0.0, f64::max);
        if let Some(&p) = lane_last.get(&r.lane) {
            start = start.max(finish[p]);
        }
        finish[i] = start + record_duration(r);
        lane_last.insert(r.lane, i);
    }
    finish.into_iter().fold(0.0, f64::max)
}

/// Largest per-class total work divided by that class's capacity.
pub fn class_work_bound(records: &[DispatchRecord], model: &ResourceModel) -> f64 {
    let mut work = [0.0f64; 3];
    for r in records {
        for k in &r.kernels {
            work[k.class.index()] += k.duration;
        }
    }
    (0..3).map(|c| work[c] / model.capacity[c] as f64).fold(0.0, f64::max)
}

/// Exact makespan of a schedule when every class has capacity 1 and there is
/// no interference: each kernel starts once its lane, its class (in dispatch
/// order), its dispatch's dependencies and the host are all ready.
pub fn list_schedule_makespan(records: &[DispatchRecord]) -> f64 {
    let mut done = vec![0.0f64; records.len()];
    let mut lane_free: BTreeMap<usize, f64> = BTreeMap::new();
    let mut class_free = [0.0f64; 3];
    let mut host = 0.0;
    let mut makespan: f64 = 0.0;
    for (i, r) in records.iter().enumerate() {
        let issue = host;
        host += r.host_overhead;
        let mut t = r.deps.iter().map(|d| done[*d]).fold(issue, f64::max);
        for k in &r.kernels {
            let start = t.max(*lane_free.get(&r.lane).unwrap_or(&0.0)).max(class_free[k.class.index()]);
            let end = start + k.duration;
            lane_free.insert(r.lane, end);
            class_free[k.class.index()] = end;
            t = end;
        }
        done[i] = t;
        makespan = makespan.max(t);
    }
    makespan
}

pub fn sum_durations(records: &[DispatchRecord]) -> f64 {
    records.iter().map(record_duration).sum()
}

pub fn class_share(result: &RunResult, class: ResourceClass) -> f64 {
    let total = sum_durations(&result.records);
    result.records.iter().flat_map(|r| &r.kernels).filter(|k| k.class == class).map(|k| k.duration).sum::<f64>() / total
}
