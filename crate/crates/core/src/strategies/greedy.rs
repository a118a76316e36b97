use crate::sched::{OpHandle, SchedError, Scheduler, SchedulerContext};

use super::{guarded_sizes, run_sequential, StrategyConfig};

/// Dispatches every ready instance each round, micro-batch by micro-batch.
/// With `merge_ready`, an instance ready in a run of adjacent micro-batches
/// is dispatched once over the whole run.
#[derive(Debug, Clone)]
pub struct Greedy {
    cfg: StrategyConfig,
}

impl Greedy {
    pub fn new(cfg: StrategyConfig) -> Self {
        Greedy { cfg }
    }
}

impl Scheduler for Greedy {
    fn name(&self) -> &str {
        "greedy"
    }

    fn schedule(&self, ctx: &mut SchedulerContext<'_>) -> Result<(), SchedError> {
        let Some(sizes) = guarded_sizes(ctx, &self.cfg) else {
            return run_sequential(ctx);
        };
        let n = ctx.split(&sizes)?.len();
        while !ctx.is_finished() {
            let mut ready: Vec<OpHandle> = Vec::new();
            for ub in 0..n {
                ready.extend(ctx.get_ready_ops(ub)?);
            }
            if ready.is_empty() {
                return Err(SchedError::Strategy("no instance ready but schedule unfinished".into()));
            }
            ready.sort_by_key(|h| (h.subgraph, h.ubatch));
            let mut i = 0;
            while i < ready.len() {
                let mut j = i + 1;
                if self.cfg.merge_ready {
                    while j < ready.len()
                        && ready[j].subgraph == ready[i].subgraph
                        && ready[j].ubatch == ready[j - 1].ubatch + 1
                    {
                        j += 1;
                    }
                }
                let lane = self.cfg.lane_assignment.lane(ctx.dominant_class(ready[i].subgraph), ctx.lanes());
                ctx.execute(&ready[i..j], Some(lane), None)?;
                i = j;
            }
        }
        Ok(())
    }
}
