use crate::sched::{SchedError, Scheduler, SchedulerContext};

use super::{guarded_sizes, run_sequential, StrategyConfig};

/// Splits the batch and lets micro-batches drift apart so that operators of
/// different resource classes overlap across lanes.
///
/// Micro-batch `i` joins `i` rounds late. In each round every joined
/// micro-batch dispatches its first ready instance on the lane assigned to
/// that instance's dominant class.
#[derive(Debug, Clone)]
pub struct SplitOverlap {
    cfg: StrategyConfig,
}

impl SplitOverlap {
    pub fn new(cfg: StrategyConfig) -> Self {
        SplitOverlap { cfg }
    }
}

impl Scheduler for SplitOverlap {
    fn name(&self) -> &str {
        "split_overlap"
    }

    fn schedule(&self, ctx: &mut SchedulerContext<'_>) -> Result<(), SchedError> {
        let Some(sizes) = guarded_sizes(ctx, &self.cfg) else {
            return run_sequential(ctx);
        };
        let n = ctx.split(&sizes)?.len();
        let mut round = 0;
        while !ctx.is_finished() {
            for ub in 0..n.min(round + 1) {
                if let Some(h) = ctx.get_ready_ops(ub)?.first().copied() {
                    let lane = self.cfg.lane_assignment.lane(ctx.dominant_class(h.subgraph), ctx.lanes());
                    ctx.execute(&[h], Some(lane), None)?;
                }
            }
            round += 1;
        }
        Ok(())
    }
}
