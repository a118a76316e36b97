use std::path::{Path, PathBuf};

use log::{debug, info};
use serde::Serialize;

use crate::dataflow::{static_analysis, SplitSignature};
use crate::graph::{eval_reference, Graph};
use crate::partition::{partition, validate_plan, PartitionPlan};
use crate::sched::Session;
use crate::sim::SimReport;
use crate::strategies::{Sequential, StrategyRegistry};
use crate::trace;

use super::metrics::outputs_match;
use super::{
    aggregate_speedup, build, random_bindings, MetricsReport, RunMetrics, ScenarioConfig, ScenarioError, SweepAxis, SweepSpec,
    WorkloadMetrics,
};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckLine {
    pub name: String,
    pub ok: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub checks: Vec<CheckLine>,
    /// First violation, if any; later checks are skipped.
    pub error: Option<String>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.error.is_none()
    }
}

/// Builds the graph, partitions it, and analyses the declared split of every
/// workload entry.
pub fn cmd_validate(cfg: &ScenarioConfig) -> ValidationReport {
    let mut checks = Vec::new();
    let error = validate_into(cfg, &mut checks).err().map(|e| {
        checks.push(CheckLine { name: "error".into(), ok: false, detail: e.to_string() });
        e.to_string()
    });
    ValidationReport { checks, error }
}

fn ok(checks: &mut Vec<CheckLine>, name: &str, detail: String) {
    checks.push(CheckLine { name: name.into(), ok: true, detail });
}

fn validate_into(cfg: &ScenarioConfig, checks: &mut Vec<CheckLine>) -> Result<(), ScenarioError> {
    cfg.check()?;
    ok(checks, "config", format!("{} workload entries, seed {}", cfg.workload.len(), cfg.seed));
    let graph = build(cfg)?;
    ok(checks, "graph", format!("{} operators, {} tensors", graph.operators().len(), graph.tensors().len()));
    let plan = partition(&graph, &cfg.partition_rules)?;
    validate_plan(&plan, &graph)?;
    ok(checks, "partition", format!("{} subgraphs, {} edges", plan.len(), plan.sg_edges.len()));
    let strategy = StrategyRegistry::default().build(&cfg.strategy)?;
    strategy.check(&graph, &plan)?;
    ok(checks, "strategy", cfg.strategy.name.clone());
    for w in &cfg.workload {
        let sizes = cfg.strategy.sizes(w.batch_rows).unwrap_or_else(|| vec![w.batch_rows]);
        let a = static_analysis(&graph, &plan, &SplitSignature::new(sizes.clone()))?;
        let tracked = a.contexts.first().map_or(0, |c| c.states.len());
        ok(checks, "analysis", format!("batch {} split {:?}: {} tracked tensors", w.batch_rows, sizes, tracked));
    }
    Ok(())
}

/// A finished scenario: metrics plus the simulated timeline of every run.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub metrics: MetricsReport,
    pub traces: Vec<(String, SimReport)>,
}

fn prepare(cfg: &ScenarioConfig) -> Result<(Graph, PartitionPlan), ScenarioError> {
    cfg.check()?;
    let graph = build(cfg)?;
    let plan = partition(&graph, &cfg.partition_rules)?;
    validate_plan(&plan, &graph)?;
    Ok((graph, plan))
}

/// Runs the sequential baseline and the configured strategy on every workload repeat.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<Artifacts, ScenarioError> {
    let (graph, plan) = prepare(cfg)?;
    let strategy = StrategyRegistry::default().build(&cfg.strategy)?;
    strategy.check(&graph, &plan)?;
    let runtime = cfg.runtime();
    let mut baseline = Session::new(graph.clone(), plan.clone(), runtime.clone());
    let mut session = Session::new(graph, plan, runtime);
    let mut runs = Vec::new();
    let mut traces = Vec::new();
    for (e, w) in cfg.workload.iter().enumerate() {
        let bindings = random_bindings(session.graph(), w.batch_rows, cfg.seed.wrapping_add(e as u64));
        let reference = eval_reference(session.graph(), &bindings).map_err(crate::sched::SchedError::from)?;
        let tokens = w.batch_rows as f64 * cfg.device.tokens_per_row;
        for r in 0..w.repeat {
            let prefix = format!("{}_e{e}_b{}_r{r}", cfg.name, w.batch_rows);
            let seq = baseline.forward(&Sequential, &bindings)?;
            let out = session.forward(strategy.as_ref(), &bindings)?;
            let seq_name = format!("{prefix}_sequential");
            let run_name = format!("{prefix}_{}", strategy.name());
            let sm = RunMetrics::from_result(&seq_name, "sequential", tokens, &seq, outputs_match(&seq.outputs, &reference));
            let rm = RunMetrics::from_result(&run_name, strategy.name(), tokens, &out, outputs_match(&out.outputs, &reference));
            debug!("{run_name}: makespan {} vs {}", rm.makespan, sm.makespan);
            runs.push(WorkloadMetrics {
                entry: e,
                repeat: r,
                batch_rows: w.batch_rows,
                speedup_vs_sequential: if rm.makespan > 0.0 { sm.makespan / rm.makespan } else { 1.0 },
                sequential: sm,
                strategy: rm,
            });
            traces.push((seq_name, seq.sim));
            traces.push((run_name, out.sim));
        }
    }
    let speedup = aggregate_speedup(&runs);
    info!("{}: {} speedup {:.4}", cfg.name, cfg.strategy.name, speedup);
    Ok(Artifacts {
        metrics: MetricsReport {
            scenario: cfg.name.clone(),
            strategy: cfg.strategy.name.clone(),
            seed: cfg.seed,
            runs,
            speedup_vs_sequential: speedup,
        },
        traces,
    })
}

fn write(path: &Path, text: &str) -> Result<(), ScenarioError> {
    std::fs::write(path, text).map_err(|source| ScenarioError::Io { path: path.into(), source })
}

fn ensure_dir(dir: &Path) -> Result<(), ScenarioError> {
    std::fs::create_dir_all(dir).map_err(|source| ScenarioError::Io { path: dir.into(), source })
}

/// Runs the scenario and writes `metrics.json` and one `trace_<run>.json` per run into `out`.
pub fn cmd_run(cfg: &ScenarioConfig, out: &Path) -> Result<(MetricsReport, Vec<PathBuf>), ScenarioError> {
    let art = run_scenario(cfg)?;
    ensure_dir(out)?;
    let mut files = vec![out.join("metrics.json")];
    write(&files[0], &(serde_json::to_string_pretty(&art.metrics).expect("metrics serialize") + "\n"))?;
    for (name, sim) in &art.traces {
        let path = out.join(format!("trace_{name}.json"));
        write(&path, &(trace::to_json(sim) + "\n"))?;
        files.push(path);
    }
    Ok((art.metrics, files))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: f64,
    pub batch_rows: usize,
    pub sequential_makespan: f64,
    pub strategy_makespan: f64,
    pub speedup: f64,
}

fn apply(cfg: &ScenarioConfig, spec: &SweepSpec, value: f64) -> Result<ScenarioConfig, ScenarioError> {
    let mut c = cfg.clone();
    if let Some(w) = &spec.workload {
        c.workload = w.clone();
    }
    match spec.axis {
        SweepAxis::BatchRows => {
            if !(value >= 1.0) || value.fract() != 0.0 {
                return Err(ScenarioError::Invalid(format!("batch_rows sweep value {value} is not a positive integer")));
            }
            let repeat = c.workload.first().map_or(1, |w| w.repeat);
            c.workload = vec![super::WorkloadEntry { batch_rows: value as usize, repeat }];
        }
        SweepAxis::Threshold => c.strategy.split_threshold_tokens = value,
        SweepAxis::Lambda => {
            let (comp, net) = (0, 2);
            c.cost.resources.interference[comp][net] = value;
            c.cost.resources.interference[net][comp] = value;
        }
    }
    Ok(c)
}

/// Runs every sweep listed in the config (or only `axis`), one report per value.
pub fn cmd_sweep(cfg: &ScenarioConfig, axis: Option<SweepAxis>) -> Result<(Vec<MetricsReport>, Vec<SweepRow>), ScenarioError> {
    let specs: Vec<_> = cfg.sweep.iter().filter(|s| axis.is_none_or(|a| a == s.axis)).collect();
    if specs.is_empty() {
        return Err(ScenarioError::Invalid("config lists no matching sweep".into()));
    }
    let mut reports = Vec::new();
    let mut rows = Vec::new();
    for spec in specs {
        for &value in &spec.values {
            let c = apply(cfg, spec, value)?;
            let art = run_scenario(&c)?;
            for (e, w) in c.workload.iter().enumerate() {
                let entry: Vec<_> = art.metrics.runs.iter().filter(|r| r.entry == e).collect();
                let seq: f64 = entry.iter().map(|r| r.sequential.makespan).sum();
                let strat: f64 = entry.iter().map(|r| r.strategy.makespan).sum();
                rows.push(SweepRow {
                    axis: spec.axis,
                    value,
                    batch_rows: w.batch_rows,
                    sequential_makespan: seq,
                    strategy_makespan: strat,
                    speedup: if strat > 0.0 { seq / strat } else { 1.0 },
                });
            }
            reports.push(art.metrics);
        }
    }
    Ok((reports, rows))
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("sweep rows serialize");
    }
    String::from_utf8(w.into_inner().expect("in-memory writer")).expect("csv is utf-8")
}

/// Runs the sweeps and writes `sweep.csv` and `sweep_metrics.json` into `out`.
pub fn write_sweep(cfg: &ScenarioConfig, axis: Option<SweepAxis>, out: &Path) -> Result<Vec<SweepRow>, ScenarioError> {
    let (reports, rows) = cmd_sweep(cfg, axis)?;
    ensure_dir(out)?;
    write(&out.join("sweep.csv"), &sweep_csv(&rows))?;
    write(&out.join("sweep_metrics.json"), &(serde_json::to_string_pretty(&reports).expect("reports serialize") + "\n"))?;
    Ok(rows)
}
