//! Built-in scheduling strategies and the name-keyed registry that builds them
//! from configuration.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{CostParams, ResourceClass};
use crate::sched::{SchedError, Scheduler, SchedulerContext};

mod dbo;
mod fuse;
mod greedy;
mod sequential;
mod split_overlap;

pub use dbo::Dbo;
pub use fuse::FuseNormComm;
pub use greedy::Greedy;
pub use sequential::Sequential;
pub use split_overlap::SplitOverlap;

/// Lane used for each resource class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LaneAssignment {
    pub compute: usize,
    pub memory: usize,
    pub network: usize,
}

impl Default for LaneAssignment {
    fn default() -> Self {
        LaneAssignment { compute: 0, memory: 0, network: 1 }
    }
}

impl LaneAssignment {
    /// Lane for `class`, clamped to the lanes the device has.
    pub fn lane(&self, class: ResourceClass, lanes: usize) -> usize {
        let l = match class {
            ResourceClass::Compute => self.compute,
            ResourceClass::Memory => self.memory,
            ResourceClass::Network => self.network,
        };
        l.min(lanes.saturating_sub(1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrategyConfig {
    pub name: String,
    /// Invocations with fewer tokens run sequentially.
    pub split_threshold_tokens: f64,
    pub n_microbatches: usize,
    /// Relative micro-batch sizes; near-equal parts when absent.
    pub ubatch_weights: Option<Vec<usize>>,
    pub lane_assignment: LaneAssignment,
    /// Cost of the replacement kernel used by fusing strategies.
    pub fused_cost: CostParams,
    /// Greedy only: run an instance that is ready in adjacent micro-batches as one merged dispatch.
    pub merge_ready: bool,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        StrategyConfig {
            name: "sequential".into(),
            split_threshold_tokens: 0.0,
            n_microbatches: 2,
            ubatch_weights: None,
            lane_assignment: LaneAssignment::default(),
            fused_cost: CostParams::ZERO,
            merge_ready: false,
        }
    }
}

impl StrategyConfig {
    pub fn named(name: &str) -> Self {
        StrategyConfig { name: name.into(), ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), StrategyError> {
        if self.n_microbatches == 0 {
            return Err(StrategyError::Invalid("n_microbatches must be at least 1".into()));
        }
        if !(self.split_threshold_tokens >= 0.0) {
            return Err(StrategyError::Invalid("split_threshold_tokens must be non-negative".into()));
        }
        if let Some(w) = &self.ubatch_weights {
            if w.is_empty() || w.contains(&0) {
                return Err(StrategyError::Invalid("ubatch_weights must be non-empty and positive".into()));
            }
        }
        if !self.fused_cost.is_valid() {
            return Err(StrategyError::Invalid("fused_cost must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Micro-batch sizes for `rows` rows, or `None` when fewer rows than parts.
    pub fn sizes(&self, rows: usize) -> Option<Vec<usize>> {
        let weights = self.ubatch_weights.clone().unwrap_or_else(|| vec![1; self.n_microbatches]);
        proportional_split(rows, &weights)
    }
}

/// Splits `rows` proportionally to `weights`, each part at least one row;
/// leftover rows go to the earliest parts.
pub fn proportional_split(rows: usize, weights: &[usize]) -> Option<Vec<usize>> {
    let n = weights.len();
    if n == 0 || rows < n {
        return None;
    }
    let total: usize = weights.iter().sum();
    let mut sizes: Vec<usize> = weights.iter().map(|w| (rows * w / total).max(1)).collect();
    let mut assigned: usize = sizes.iter().sum();
    let mut i = 0;
    while assigned < rows {
        sizes[i % n] += 1;
        assigned += 1;
        i += 1;
    }
    while assigned > rows {
        let j = (0..n).rev().find(|j| sizes[*j] > 1).expect("rows >= parts");
        sizes[j] -= 1;
        assigned -= 1;
    }
    Some(sizes)
}

#[derive(Debug, Error, PartialEq)]
pub enum StrategyError {
    #[error("unknown strategy `{name}` (known: {known})")]
    Unknown { name: String, known: String },
    #[error("invalid strategy config: {0}")]
    Invalid(String),
}

type Factory = fn(&StrategyConfig) -> Box<dyn Scheduler>;

/// Name → constructor table for strategies.
#[derive(Clone)]
pub struct StrategyRegistry {
    factories: BTreeMap<String, Factory>,
}

impl Default for StrategyRegistry {
    fn default() -> Self {
        let mut r = StrategyRegistry { factories: BTreeMap::new() };
        r.register("sequential", |_| Box::new(Sequential));
        r.register("split_overlap", |c| Box::new(SplitOverlap::new(c.clone())));
        r.register("dbo", |c| Box::new(Dbo::new(c.clone())));
        r.register("fuse_norm_comm", |c| Box::new(FuseNormComm::new(c.clone())));
        r.register("greedy", |c| Box::new(Greedy::new(c.clone())));
        r
    }
}

impl StrategyRegistry {
    pub fn register(&mut self, name: &str, factory: Factory) {
        self.factories.insert(name.to_string(), factory);
    }

    pub fn names(&self) -> Vec<&str> {
        self.factories.keys().map(String::as_str).collect()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.factories.contains_key(name)
    }

    pub fn build(&self, cfg: &StrategyConfig) -> Result<Box<dyn Scheduler>, StrategyError> {
        cfg.validate()?;
        let f = self.factories.get(&cfg.name).ok_or_else(|| StrategyError::Unknown {
            name: cfg.name.clone(),
            known: self.names().join(", "),
        })?;
        Ok(f(cfg))
    }
}

/// Every instance in subgraph order on lane 0, unsplit.
pub(crate) fn run_sequential(ctx: &mut SchedulerContext<'_>) -> Result<(), SchedError> {
    for ub in 0..ctx.num_ubatches() {
        while let Some(h) = ctx.get_ready_ops(ub)?.first().copied() {
            ctx.execute(&[h], Some(0), None)?;
        }
    }
    Ok(())
}

/// Split sizes when the invocation is large enough to split, else `None`.
pub(crate) fn guarded_sizes(ctx: &SchedulerContext<'_>, cfg: &StrategyConfig) -> Option<Vec<usize>> {
    if ctx.tokens() < cfg.split_threshold_tokens {
        return None;
    }
    cfg.sizes(ctx.batch_rows()).filter(|s| s.len() > 1)
}
