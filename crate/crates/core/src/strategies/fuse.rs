use std::sync::Arc;

use crate::graph::kernels::FusedAllReduceRowScale;
use crate::graph::{Graph, OperatorKind, ResourceClass};
use crate::partition::{PartitionPlan, SubgraphId};
use crate::sched::{ReplaceFn, SchedError, Scheduler, SchedulerContext};

use super::{guarded_sizes, run_sequential, StrategyConfig};

/// Replaces each AllReduce → RowScale subgraph pair with one fused kernel on
/// the communication lane, overlapped with the other micro-batch's compute.
#[derive(Debug, Clone)]
pub struct FuseNormComm {
    cfg: StrategyConfig,
}

impl FuseNormComm {
    pub fn new(cfg: StrategyConfig) -> Self {
        FuseNormComm { cfg }
    }
}

fn single_kind<'g>(graph: &'g Graph, plan: &PartitionPlan, sg: SubgraphId) -> Option<&'g OperatorKind> {
    match plan.subgraph(sg).ops.as_slice() {
        [op] => Some(&graph.op(*op).kind),
        _ => None,
    }
}

/// AllReduce subgraphs whose only successor is a lone RowScale consuming
/// nothing but the all-reduce output, with the all-reduce world size.
pub fn fusable_pairs(graph: &Graph, plan: &PartitionPlan) -> Vec<(SubgraphId, SubgraphId, i64)> {
    let mut pairs = Vec::new();
    for sg in &plan.subgraphs {
        let Some(OperatorKind::AllReduce { world_size }) = single_kind(graph, plan, sg.id) else { continue };
        let [next] = plan.succs(sg.id) else { continue };
        if !matches!(single_kind(graph, plan, *next), Some(OperatorKind::RowScale)) {
            continue;
        }
        let rs = plan.subgraph(*next);
        if rs.boundary_inputs == sg.boundary_outputs && plan.preds(*next) == [sg.id] {
            pairs.push((sg.id, *next, *world_size));
        }
    }
    pairs
}

impl Scheduler for FuseNormComm {
    fn name(&self) -> &str {
        "fuse_norm_comm"
    }

    fn check(&self, graph: &Graph, plan: &PartitionPlan) -> Result<(), SchedError> {
        if fusable_pairs(graph, plan).is_empty() {
            return Err(SchedError::MissingPattern("AllReduce -> RowScale subgraph pair".into()));
        }
        Ok(())
    }

    fn schedule(&self, ctx: &mut SchedulerContext<'_>) -> Result<(), SchedError> {
        let Some(sizes) = guarded_sizes(ctx, &self.cfg) else {
            return run_sequential(ctx);
        };
        let pairs = fusable_pairs(ctx.graph(), ctx.plan());
        let n = ctx.split(&sizes)?.len();
        let comm = self.cfg.lane_assignment.lane(ResourceClass::Network, ctx.lanes());
        let mut round = 0;
        while !ctx.is_finished() {
            for ub in 0..n.min(round + 1) {
                let Some(h) = ctx.get_ready_ops(ub)?.first().copied() else { continue };
                match pairs.iter().find(|p| p.0 == h.subgraph) {
                    Some(&(_, rs, world_size)) => {
                        let rf = ReplaceFn::new(
                            Arc::new(FusedAllReduceRowScale { world_size }),
                            self.cfg.fused_cost,
                            ResourceClass::Network,
                        );
                        ctx.execute(&[h, ctx.handle(rs, ub)], Some(comm), Some(rf))?;
                    }
                    None => {
                        let lane = self.cfg.lane_assignment.lane(ctx.dominant_class(h.subgraph), ctx.lanes());
                        ctx.execute(&[h], Some(lane), None)?;
                    }
                }
            }
            round += 1;
        }
        Ok(())
    }
}
