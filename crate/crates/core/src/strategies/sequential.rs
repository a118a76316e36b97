use crate::sched::{SchedError, Scheduler, SchedulerContext};

use super::run_sequential;

/// Program order on lane 0, no split.
#[derive(Debug, Clone, Copy, Default)]
pub struct Sequential;

impl Scheduler for Sequential {
    fn name(&self) -> &str {
        "sequential"
    }

    fn schedule(&self, ctx: &mut SchedulerContext<'_>) -> Result<(), SchedError> {
        run_sequential(ctx)
    }
}
