use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::graph::{Tensor, TensorId};
use crate::sched::RunResult;
use crate::sim::Breakdown;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Shares {
    pub compute: f64,
    pub memory: f64,
    pub network: f64,
    pub idle: f64,
    pub overlap: f64,
}

impl From<Breakdown> for Shares {
    fn from(b: Breakdown) -> Self {
        Shares { compute: b.compute, memory: b.memory, network: b.network, idle: b.idle, overlap: b.overlap }
    }
}

/// Measurements of one forward invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub run: String,
    pub strategy: String,
    pub batch_rows: usize,
    pub tokens: f64,
    pub ubatch_sizes: Vec<usize>,
    pub dispatches: usize,
    pub makespan: f64,
    pub simulated_throughput_tokens_per_time: f64,
    pub shares: Shares,
    pub cache_hit_rate: f64,
    pub host_overhead_total: f64,
    pub total_copied_elements: u64,
    pub peak_live_bytes: u64,
    pub end_live_tensors: Vec<String>,
    pub outputs_match_reference: bool,
}

impl RunMetrics {
    pub fn from_result(run: &str, strategy: &str, tokens: f64, r: &RunResult, reference_ok: bool) -> Self {
        let rows = r.signature.total_rows();
        RunMetrics {
            run: run.to_string(),
            strategy: strategy.to_string(),
            batch_rows: rows,
            tokens,
            ubatch_sizes: r.signature.sizes.clone(),
            dispatches: r.records.len(),
            makespan: r.sim.makespan,
            simulated_throughput_tokens_per_time: if r.sim.makespan > 0.0 { tokens / r.sim.makespan } else { 0.0 },
            shares: r.sim.breakdown().into(),
            cache_hit_rate: r.stats.hit_rate(),
            host_overhead_total: r.stats.host_overhead_total,
            total_copied_elements: r.memory.total_copied_elements as u64,
            peak_live_bytes: r.memory.peak_live_bytes as u64,
            end_live_tensors: r.memory.end_live_tensors.clone(),
            outputs_match_reference: reference_ok,
        }
    }
}

/// The sequential baseline and the configured strategy on one workload repeat.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadMetrics {
    pub entry: usize,
    pub repeat: usize,
    pub batch_rows: usize,
    pub sequential: RunMetrics,
    pub strategy: RunMetrics,
    pub speedup_vs_sequential: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scenario: String,
    pub strategy: String,
    pub seed: u64,
    pub runs: Vec<WorkloadMetrics>,
    /// Total sequential makespan over total strategy makespan.
    pub speedup_vs_sequential: f64,
}

pub fn aggregate_speedup(runs: &[WorkloadMetrics]) -> f64 {
    let seq: f64 = runs.iter().map(|r| r.sequential.makespan).sum();
    let strat: f64 = runs.iter().map(|r| r.strategy.makespan).sum();
    if strat > 0.0 {
        seq / strat
    } else {
        1.0
    }
}

pub(crate) fn outputs_match(a: &BTreeMap<TensorId, Tensor>, b: &BTreeMap<TensorId, Tensor>) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|((ka, ta), (kb, tb))| ka == kb && ta.approx_eq(tb, 1e-6, 1e-6))
}
