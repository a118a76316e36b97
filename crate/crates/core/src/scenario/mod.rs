//! Scenario files: one JSON document naming a graph, partition rules, a
//! strategy, costs, a workload and a seed. `validate`, `run` and `sweep` live
//! here so the command-line front end stays thin.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataflow::DataflowError;
use crate::engine::LaunchCosts;
use crate::gen::GeneratorSpec;
use crate::graph::{build_graph, CostParams, GraphDescription, GraphError, OperatorDesc, OperatorKind};
use crate::partition::{PartitionError, PartitionRule, PlanViolation};
use crate::sched::{RuntimeConfig, SchedError};
use crate::sim::ResourceModel;
use crate::strategies::{StrategyConfig, StrategyError};

mod inputs;
mod metrics;
mod run;

pub use inputs::random_bindings;
pub use metrics::{aggregate_speedup, MetricsReport, RunMetrics, WorkloadMetrics};
pub use run::{
    cmd_run, cmd_sweep, cmd_validate, run_scenario, sweep_csv, write_sweep, Artifacts, CheckLine, SweepRow, ValidationReport,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphSource {
    Generator(GeneratorSpec),
    /// Path to a graph description, relative to the scenario file.
    Path(PathBuf),
    Inline(GraphDescription),
}

/// Operator costs. A module-path pattern beats the operator's own declared
/// cost, which beats the per-kind default.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostConfig {
    /// Keyed by operator kind name (`MatMul`) or custom kernel name.
    pub kinds: BTreeMap<String, CostParams>,
    /// Keyed by a glob over the module path (`layer*.moe.experts`); the longest matching pattern wins.
    pub modules: BTreeMap<String, CostParams>,
    pub resources: ResourceModel,
    pub launch: LaunchCosts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeviceConfig {
    pub lanes: usize,
    pub prealloc: bool,
    pub gc: bool,
    pub plan_cache: bool,
    pub tokens_per_row: f64,
}

impl Default for DeviceConfig {
    fn default() -> Self {
        let r = RuntimeConfig::default();
        DeviceConfig { lanes: r.lanes, prealloc: r.prealloc, gc: r.gc, plan_cache: r.plan_cache, tokens_per_row: r.tokens_per_row }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadEntry {
    pub batch_rows: usize,
    #[serde(default = "one")]
    pub repeat: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    BatchRows,
    Threshold,
    /// Symmetric compute/network interference factor.
    Lambda,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::BatchRows => "batch_rows",
            SweepAxis::Threshold => "threshold",
            SweepAxis::Lambda => "lambda",
        }
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "batch_rows" => Ok(SweepAxis::BatchRows),
            "threshold" => Ok(SweepAxis::Threshold),
            "lambda" => Ok(SweepAxis::Lambda),
            _ => Err(format!("unknown axis `{s}` (batch_rows, threshold, lambda)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    /// Replaces the scenario workload for this sweep (ignored on the batch_rows axis).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workload: Option<Vec<WorkloadEntry>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub graph: GraphSource,
    #[serde(default)]
    pub partition_rules: Vec<PartitionRule>,
    pub strategy: StrategyConfig,
    #[serde(default)]
    pub cost: CostConfig,
    #[serde(default)]
    pub device: DeviceConfig,
    pub workload: Vec<WorkloadEntry>,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sweep: Vec<SweepSpec>,
    /// Default output directory, relative to the working directory.
    #[serde(default = "default_out")]
    pub output_dir: PathBuf,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Parse { path: PathBuf, source: serde_json::Error },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("unknown {what} `{label}`")]
    UnknownLabel { what: &'static str, label: String },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error(transparent)]
    Plan(#[from] PlanViolation),
    #[error(transparent)]
    Strategy(#[from] StrategyError),
    #[error(transparent)]
    Sched(#[from] SchedError),
    #[error(transparent)]
    Dataflow(#[from] DataflowError),
}

impl ScenarioConfig {
    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io { path: path.into(), source })?;
        let mut cfg: ScenarioConfig =
            serde_json::from_str(&text).map_err(|source| ScenarioError::Parse { path: path.into(), source })?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn runtime(&self) -> RuntimeConfig {
        RuntimeConfig {
            lanes: self.device.lanes,
            prealloc: self.device.prealloc,
            gc: self.device.gc,
            plan_cache: self.device.plan_cache,
            tokens_per_row: self.device.tokens_per_row,
            launch: self.cost.launch.clone(),
            resources: self.cost.resources.clone(),
        }
    }

    /// The graph description with configured costs applied.
    pub fn description(&self) -> Result<GraphDescription, ScenarioError> {
        let mut desc = match &self.graph {
            GraphSource::Generator(g) => g.generate(),
            GraphSource::Inline(d) => d.clone(),
            GraphSource::Path(p) => {
                let path = self.base_dir.join(p);
                let text = std::fs::read_to_string(&path).map_err(|source| ScenarioError::Io { path: path.clone(), source })?;
                serde_json::from_str(&text).map_err(|source| ScenarioError::Parse { path, source })?
            }
        };
        let modules: Vec<(glob::Pattern, &String, CostParams)> = self
            .cost
            .modules
            .iter()
            .map(|(p, c)| {
                glob::Pattern::new(p)
                    .map(|g| (g, p, *c))
                    .map_err(|e| ScenarioError::Invalid(format!("module pattern `{p}`: {e}")))
            })
            .collect::<Result<_, _>>()?;
        for op in &mut desc.operators {
            if let Some(c) = module_cost(&modules, op) {
                op.cost = Some(c);
            } else if op.cost.is_none() {
                op.cost = self.cost.kinds.get(kind_key(op)).copied();
            }
        }
        Ok(desc)
    }

    /// Checks that every name the config refers to exists in the graph.
    pub fn check_labels(&self, desc: &GraphDescription) -> Result<(), ScenarioError> {
        for kind in self.cost.kinds.keys() {
            if !desc.operators.iter().any(|o| kind_key(o) == kind) {
                return Err(ScenarioError::UnknownLabel { what: "operator kind", label: kind.clone() });
            }
        }
        for pat in self.cost.modules.keys() {
            let g = glob::Pattern::new(pat).map_err(|e| ScenarioError::Invalid(e.to_string()))?;
            if !desc.operators.iter().any(|o| g.matches(&o.module_path)) {
                return Err(ScenarioError::UnknownLabel { what: "module pattern", label: pat.clone() });
            }
        }
        for rule in &self.partition_rules {
            if let PartitionRule::ByRegion(tag) = rule {
                if !desc.operators.iter().any(|o| o.region_tags.contains(tag)) {
                    return Err(ScenarioError::UnknownLabel { what: "region", label: tag.clone() });
                }
            }
        }
        Ok(())
    }

    pub fn check(&self) -> Result<(), ScenarioError> {
        if self.workload.is_empty() {
            return Err(ScenarioError::Invalid("workload is empty".into()));
        }
        if let Some(w) = self.workload.iter().find(|w| w.batch_rows == 0 || w.repeat == 0) {
            return Err(ScenarioError::Invalid(format!("workload entry {w:?} needs batch_rows and repeat >= 1")));
        }
        if self.device.lanes == 0 {
            return Err(ScenarioError::Invalid("device.lanes must be at least 1".into()));
        }
        if !(self.device.tokens_per_row > 0.0) {
            return Err(ScenarioError::Invalid("device.tokens_per_row must be positive".into()));
        }
        if !self.cost.resources.is_valid() {
            return Err(ScenarioError::Invalid("resource model needs capacities >= 1 and interference >= 1".into()));
        }
        if let Some((k, _)) = self.cost.kinds.iter().chain(&self.cost.modules).find(|(_, c)| !c.is_valid()) {
            return Err(ScenarioError::Invalid(format!("cost for `{k}` must be finite and non-negative")));
        }
        self.strategy.validate()?;
        Ok(())
    }
}

fn kind_key(op: &OperatorDesc) -> &str {
    match &op.op {
        OperatorKind::Custom { name } => name,
        k => k.name(),
    }
}

fn module_cost(modules: &[(glob::Pattern, &String, CostParams)], op: &OperatorDesc) -> Option<CostParams> {
    modules
        .iter()
        .filter(|(g, _, _)| g.matches(&op.module_path))
        .max_by_key(|(_, p, _)| p.len())
        .map(|(_, _, c)| *c)
}

/// Builds the graph for `cfg`, surfacing description errors.
pub fn build(cfg: &ScenarioConfig) -> Result<crate::graph::Graph, ScenarioError> {
    let desc = cfg.description()?;
    cfg.check_labels(&desc)?;
    Ok(build_graph(&desc)?)
}
