use crate::graph::{Graph, ResourceClass};
use crate::partition::{PartitionPlan, SubgraphId};
use crate::sched::{SchedError, Scheduler, SchedulerContext};

use super::{guarded_sizes, run_sequential, StrategyConfig};

const ROLES: [&str; 4] = ["attn", "dispatch", "experts", "combine"];

/// Attention runs once at full batch; the MoE section runs per micro-batch
/// with all-to-all on the network lane and experts on the compute lane.
///
/// Stages are issued breadth-first (dispatch of every micro-batch, then
/// experts, then combine), so lane FIFOs overlap micro-batch 0's
/// communication with micro-batch 1's compute and vice versa.
#[derive(Debug, Clone)]
pub struct Dbo {
    cfg: StrategyConfig,
}

impl Dbo {
    pub fn new(mut cfg: StrategyConfig) -> Self {
        if cfg.ubatch_weights.is_none() {
            cfg.n_microbatches = 2;
        }
        Dbo { cfg }
    }
}

/// Last dotted segment of a subgraph label.
fn role(plan: &PartitionPlan, sg: SubgraphId) -> &str {
    let label = &plan.subgraph(sg).label;
    label.rsplit('.').next().unwrap_or(label)
}

impl Scheduler for Dbo {
    fn name(&self) -> &str {
        "dbo"
    }

    fn check(&self, _graph: &Graph, plan: &PartitionPlan) -> Result<(), SchedError> {
        let missing: Vec<&str> = ROLES
            .iter()
            .copied()
            .filter(|r| !plan.subgraphs.iter().any(|s| role(plan, s.id) == *r))
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(SchedError::MissingLabels(missing.join(", ")))
        }
    }

    fn schedule(&self, ctx: &mut SchedulerContext<'_>) -> Result<(), SchedError> {
        let Some(sizes) = guarded_sizes(ctx, &self.cfg) else {
            return run_sequential(ctx);
        };
        let n = ctx.split(&sizes)?.len();
        let lanes = ctx.lanes();
        let comm = self.cfg.lane_assignment.lane(ResourceClass::Network, lanes);
        let compute = self.cfg.lane_assignment.lane(ResourceClass::Compute, lanes);
        for s in 0..ctx.plan().len() {
            let sg = SubgraphId(s);
            let r = role(ctx.plan(), sg).to_string();
            if r == "attn" {
                let all: Vec<_> = (0..n).map(|ub| ctx.handle(sg, ub)).collect();
                ctx.execute(&all, Some(compute), None)?;
                continue;
            }
            let lane = match r.as_str() {
                "dispatch" | "combine" => comm,
                "experts" => compute,
                _ => self.cfg.lane_assignment.lane(ctx.dominant_class(sg), lanes),
            };
            for ub in 0..n {
                let h = ctx.handle(sg, ub);
                ctx.execute(&[h], Some(lane), None)?;
            }
        }
        Ok(())
    }
}
