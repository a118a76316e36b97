//! Partition rules and schedulable subgraphs.
//!
//! Subgraphs are contiguous runs of the graph's stored topological order, so
//! contracting each one to a node always yields an acyclic subgraph DAG.
//! When rules disagree about an operator, `ByRegion` beats `ByFunc` beats
//! `ByModule`; unmatched operators coalesce into maximal filler runs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Graph, OpId, OperatorKind, OperatorNode, TensorId};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionRule {
    /// Dotted module-path prefix; segments may use glob wildcards (`layer*.attn`).
    ByModule(String),
    /// Glob over operator kind names (`AllReduce`, `All*`) or custom kernel names.
    ByFunc(String),
    /// Exact region tag.
    ByRegion(String),
}

impl fmt::Display for PartitionRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PartitionRule::ByModule(p) => write!(f, "by_module({p:?})"),
            PartitionRule::ByFunc(p) => write!(f, "by_func({p:?})"),
            PartitionRule::ByRegion(t) => write!(f, "by_region({t:?})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SubgraphId(pub usize);

impl fmt::Display for SubgraphId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "sg{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Subgraph {
    pub id: SubgraphId,
    pub ops: Vec<OpId>,
    pub boundary_inputs: Vec<TensorId>,
    pub boundary_outputs: Vec<TensorId>,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionPlan {
    pub subgraphs: Vec<Subgraph>,
    pub sg_edges: Vec<(SubgraphId, SubgraphId)>,
    /// Index into the rule list that produced each subgraph; `None` for fillers.
    pub rule_trace: Vec<Option<usize>>,
    preds: Vec<Vec<SubgraphId>>,
    succs: Vec<Vec<SubgraphId>>,
    op_to_sg: Vec<SubgraphId>,
}

impl PartitionPlan {
    /// Assembles a plan from explicit memberships, deriving boundaries and
    /// edges. No invariants are checked; see [`validate_plan`].
    pub fn from_memberships(graph: &Graph, groups: Vec<(String, Vec<OpId>)>) -> PartitionPlan {
        let mut op_to_sg = vec![SubgraphId(usize::MAX); graph.operators().len()];
        for (i, (_, ops)) in groups.iter().enumerate() {
            for op in ops {
                op_to_sg[op.0] = SubgraphId(i);
            }
        }
        let subgraphs: Vec<Subgraph> = groups
            .into_iter()
            .enumerate()
            .map(|(i, (label, ops))| {
                let (boundary_inputs, boundary_outputs) = boundaries(graph, &ops, &op_to_sg, SubgraphId(i));
                Subgraph { id: SubgraphId(i), ops, boundary_inputs, boundary_outputs, label }
            })
            .collect();
        let sg_edges = project_edges(graph, &subgraphs, &op_to_sg);
        let mut preds = vec![Vec::new(); subgraphs.len()];
        let mut succs = vec![Vec::new(); subgraphs.len()];
        for (a, b) in &sg_edges {
            succs[a.0].push(*b);
            preds[b.0].push(*a);
        }
        let rule_trace = vec![None; subgraphs.len()];
        PartitionPlan { subgraphs, sg_edges, rule_trace, preds, succs, op_to_sg }
    }

    pub fn len(&self) -> usize {
        self.subgraphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subgraphs.is_empty()
    }

    pub fn subgraph(&self, id: SubgraphId) -> &Subgraph {
        &self.subgraphs[id.0]
    }

    pub fn preds(&self, id: SubgraphId) -> &[SubgraphId] {
        &self.preds[id.0]
    }

    pub fn succs(&self, id: SubgraphId) -> &[SubgraphId] {
        &self.succs[id.0]
    }

    pub fn subgraph_of(&self, op: OpId) -> SubgraphId {
        self.op_to_sg[op.0]
    }

    /// Subgraph producing `t`, if any.
    pub fn producer_of(&self, graph: &Graph, t: TensorId) -> Option<SubgraphId> {
        graph.producer(t).map(|op| self.op_to_sg[op.0])
    }

    /// Subgraphs that take `t` as a boundary input, in plan order.
    pub fn consumers_of(&self, t: TensorId) -> impl Iterator<Item = SubgraphId> + '_ {
        self.subgraphs.iter().filter(move |s| s.boundary_inputs.contains(&t)).map(|s| s.id)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum PartitionError {
    #[error("rule {rule} claims operator `{op}` already claimed as `{existing}`")]
    OverlappingRules { rule: String, op: String, existing: String },
    #[error("region `{tag}` is not contiguous: operator `{gap}` interrupts it")]
    NonContiguousRegion { tag: String, gap: String },
    #[error("rule {0} has an empty pattern")]
    EmptyRule(String),
    #[error("rule {rule} has an invalid pattern: {reason}")]
    InvalidPattern { rule: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Key {
    Region(String),
    Func(OpId),
    Module(String),
}

fn compile(rule: &PartitionRule, pat: &str) -> Result<glob::Pattern, PartitionError> {
    glob::Pattern::new(pat).map_err(|e| PartitionError::InvalidPattern { rule: rule.to_string(), reason: e.to_string() })
}

fn func_matches(pattern: &glob::Pattern, op: &OperatorNode) -> bool {
    pattern.matches(op.kind.name()) || matches!(&op.kind, OperatorKind::Custom { name } if pattern.matches(name))
}

/// Returns the concrete module instance of `path` matched by `pattern`, e.g.
/// `layer*.attn` on `layer3.attn.qkv` gives `layer3.attn`.
fn module_instance(patterns: &[glob::Pattern], path: &str) -> Option<String> {
    let segs: Vec<&str> = path.split('.').collect();
    if segs.len() < patterns.len() {
        return None;
    }
    patterns
        .iter()
        .zip(&segs)
        .all(|(p, s)| p.matches(s))
        .then(|| segs[..patterns.len()].join("."))
}

/// Partitions `graph` according to `rules`.
pub fn partition(graph: &Graph, rules: &[PartitionRule]) -> Result<PartitionPlan, PartitionError> {
    let ops = graph.operators();
    let mut keys: Vec<Option<(Key, usize)>> = vec![None; ops.len()];

    for rule in rules {
        let (PartitionRule::ByModule(p) | PartitionRule::ByFunc(p) | PartitionRule::ByRegion(p)) = rule;
        if p.is_empty() {
            return Err(PartitionError::EmptyRule(rule.to_string()));
        }
    }

    let describe = |k: &Key| match k {
        Key::Region(t) => format!("region {t}"),
        Key::Func(op) => format!("func {}", ops[op.0].name),
        Key::Module(m) => format!("module {m}"),
    };

    // regions first: highest precedence
    for (ri, rule) in rules.iter().enumerate() {
        let PartitionRule::ByRegion(tag) = rule else { continue };
        let tagged: Vec<usize> = (0..ops.len()).filter(|i| ops[*i].region_tags.contains(tag)).collect();
        let (Some(&lo), Some(&hi)) = (tagged.first(), tagged.last()) else { continue };
        if let Some(gap) = (lo..=hi).find(|i| !ops[*i].region_tags.contains(tag)) {
            return Err(PartitionError::NonContiguousRegion { tag: tag.clone(), gap: ops[gap].name.clone() });
        }
        for i in lo..=hi {
            match &keys[i] {
                Some((k @ Key::Region(other), _)) if other != tag => {
                    return Err(PartitionError::OverlappingRules {
                        rule: rule.to_string(),
                        op: ops[i].name.clone(),
                        existing: describe(k),
                    })
                }
                Some(_) => {}
                None => keys[i] = Some((Key::Region(tag.clone()), ri)),
            }
        }
    }

    for (ri, rule) in rules.iter().enumerate() {
        let PartitionRule::ByFunc(pat) = rule else { continue };
        let pattern = compile(rule, pat)?;
        for (i, op) in ops.iter().enumerate() {
            if keys[i].is_none() && func_matches(&pattern, op) {
                keys[i] = Some((Key::Func(op.id), ri));
            }
        }
    }

    for (ri, rule) in rules.iter().enumerate() {
        let PartitionRule::ByModule(prefix) = rule else { continue };
        let patterns = prefix.split('.').map(|seg| compile(rule, seg)).collect::<Result<Vec<_>, _>>()?;
        let mut ranges: BTreeMap<String, (usize, usize)> = BTreeMap::new();
        for (i, op) in ops.iter().enumerate() {
            if let Some(inst) = module_instance(&patterns, &op.module_path) {
                let r = ranges.entry(inst).or_insert((i, i));
                r.1 = i;
            }
        }
        let mut ordered: Vec<(String, (usize, usize))> = ranges.into_iter().collect();
        ordered.sort_by_key(|(_, r)| *r);
        for (inst, (lo, hi)) in ordered {
            for i in lo..=hi {
                match &keys[i] {
                    Some((Key::Module(other), _)) if *other != inst => {
                        return Err(PartitionError::OverlappingRules {
                            rule: rule.to_string(),
                            op: ops[i].name.clone(),
                            existing: format!("module {other}"),
                        })
                    }
                    Some(_) => {}
                    None => keys[i] = Some((Key::Module(inst.clone()), ri)),
                }
            }
        }
    }

    // maximal runs of equal keys
    let mut groups: Vec<(String, Vec<OpId>)> = Vec::new();
    let mut trace: Vec<Option<usize>> = Vec::new();
    let mut current: Option<&Option<(Key, usize)>> = None;
    let mut fillers = 0;
    for (i, key) in keys.iter().enumerate() {
        let same = match (current, key) {
            (Some(prev), k) => match (prev, k) {
                (None, None) => true,
                (Some((a, _)), Some((b, _))) => a == b && !matches!(a, Key::Func(_)),
                _ => false,
            },
            (None, _) => false,
        };
        if same {
            groups.last_mut().expect("run started").1.push(OpId(i));
        } else {
            let label = match key {
                Some((Key::Region(t), _)) => t.clone(),
                Some((Key::Func(op), _)) => ops[op.0].name.clone(),
                Some((Key::Module(m), _)) => m.clone(),
                None => {
                    fillers += 1;
                    format!("filler{}", fillers - 1)
                }
            };
            groups.push((label, vec![OpId(i)]));
            trace.push(key.as_ref().map(|(_, ri)| *ri));
        }
        current = Some(key);
    }
    if rules.is_empty() && groups.len() == 1 {
        groups[0].0 = "whole".to_string();
    }

    let mut plan = PartitionPlan::from_memberships(graph, groups);
    plan.rule_trace = trace;
    Ok(plan)
}

fn boundaries(graph: &Graph, ops: &[OpId], op_to_sg: &[SubgraphId], me: SubgraphId) -> (Vec<TensorId>, Vec<TensorId>) {
    let mut ins = Vec::new();
    let mut outs = Vec::new();
    for op in ops {
        let node = graph.op(*op);
        for t in &node.inputs {
            let external = graph.producer(*t).is_none_or(|p| op_to_sg[p.0] != me);
            if external && !ins.contains(t) {
                ins.push(*t);
            }
        }
        for t in &node.outputs {
            let escapes = graph.is_output(*t) || graph.consumers(*t).iter().any(|c| op_to_sg[c.0] != me);
            if escapes && !outs.contains(t) {
                outs.push(*t);
            }
        }
    }
    (ins, outs)
}

fn project_edges(graph: &Graph, subgraphs: &[Subgraph], op_to_sg: &[SubgraphId]) -> Vec<(SubgraphId, SubgraphId)> {
    let mut edges = BTreeSet::new();
    for sg in subgraphs {
        for op in &sg.ops {
            for t in &graph.op(*op).inputs {
                if let Some(p) = graph.producer(*t) {
                    let from = op_to_sg[p.0];
                    if from != sg.id && from.0 != usize::MAX {
                        edges.insert((from, sg.id));
                    }
                }
            }
        }
    }
    edges.into_iter().collect()
}

#[derive(Debug, Error, PartialEq)]
pub enum PlanViolation {
    #[error("operator `{0}` belongs to no subgraph")]
    Unassigned(String),
    #[error("operator `{op}` belongs to several subgraphs: {subgraphs:?}")]
    DuplicateMembership { op: String, subgraphs: Vec<SubgraphId> },
    #[error("subgraph at position {0} carries a mismatched id")]
    BadId(usize),
    #[error("contracted subgraph graph has a cycle through {0:?}")]
    Cycle(Vec<SubgraphId>),
    #[error("subgraph {0} is not a contiguous run of the topological order")]
    NonContiguous(SubgraphId),
    #[error("subgraph {sg} boundary {which} is {found:?}, expected {expected:?}")]
    BoundaryMismatch { sg: SubgraphId, which: &'static str, expected: Vec<String>, found: Vec<String> },
    #[error("subgraph edges {found:?} differ from the projected dependencies {expected:?}")]
    EdgeMismatch { expected: Vec<(SubgraphId, SubgraphId)>, found: Vec<(SubgraphId, SubgraphId)> },
}

/// Checks every subgraph invariant and reports the first violation.
pub fn validate_plan(plan: &PartitionPlan, graph: &Graph) -> Result<(), PlanViolation> {
    let n_ops = graph.operators().len();
    let mut owner: Vec<Vec<SubgraphId>> = vec![Vec::new(); n_ops];
    for (i, sg) in plan.subgraphs.iter().enumerate() {
        if sg.id.0 != i {
            return Err(PlanViolation::BadId(i));
        }
        for op in &sg.ops {
            owner[op.0].push(sg.id);
        }
    }
    for (i, o) in owner.iter().enumerate() {
        match o.len() {
            0 => return Err(PlanViolation::Unassigned(graph.operators()[i].name.clone())),
            1 => {}
            _ => {
                return Err(PlanViolation::DuplicateMembership {
                    op: graph.operators()[i].name.clone(),
                    subgraphs: o.clone(),
                })
            }
        }
    }
    let op_to_sg: Vec<SubgraphId> = owner.iter().map(|o| o[0]).collect();
    let expected_edges = project_edges(graph, &plan.subgraphs, &op_to_sg);
    if let Some(cycle) = find_cycle(plan.subgraphs.len(), &expected_edges) {
        return Err(PlanViolation::Cycle(cycle));
    }
    for sg in &plan.subgraphs {
        let mut idx: Vec<usize> = sg.ops.iter().map(|o| o.0).collect();
        idx.sort_unstable();
        if idx.windows(2).any(|w| w[1] != w[0] + 1) || idx.iter().map(|i| OpId(*i)).collect::<Vec<_>>() != sg.ops {
            return Err(PlanViolation::NonContiguous(sg.id));
        }
    }
    let names = |ts: &[TensorId]| ts.iter().map(|t| graph.tensor(*t).name.clone()).collect::<Vec<_>>();
    for sg in &plan.subgraphs {
        let (ins, outs) = boundaries(graph, &sg.ops, &op_to_sg, sg.id);
        if ins != sg.boundary_inputs {
            return Err(PlanViolation::BoundaryMismatch {
                sg: sg.id,
                which: "inputs",
                expected: names(&ins),
                found: names(&sg.boundary_inputs),
            });
        }
        if outs != sg.boundary_outputs {
            return Err(PlanViolation::BoundaryMismatch {
                sg: sg.id,
                which: "outputs",
                expected: names(&outs),
                found: names(&sg.boundary_outputs),
            });
        }
    }
    if expected_edges != plan.sg_edges {
        return Err(PlanViolation::EdgeMismatch { expected: expected_edges, found: plan.sg_edges.clone() });
    }
    Ok(())
}

fn find_cycle(n: usize, edges: &[(SubgraphId, SubgraphId)]) -> Option<Vec<SubgraphId>> {
    let mut indeg = vec![0usize; n];
    let mut succ = vec![Vec::new(); n];
    for (a, b) in edges {
        succ[a.0].push(b.0);
        indeg[b.0] += 1;
    }
    let mut stack: Vec<usize> = (0..n).filter(|i| indeg[*i] == 0).collect();
    let mut seen = 0;
    while let Some(i) = stack.pop() {
        seen += 1;
        for &s in &succ[i] {
            indeg[s] -= 1;
            if indeg[s] == 0 {
                stack.push(s);
            }
        }
    }
    (seen < n).then(|| (0..n).filter(|i| indeg[*i] > 0).map(SubgraphId).collect())
}
