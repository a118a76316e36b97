//! Per-micro-batch tensor state: reference counts, prealloc flags, buffer
//! bindings and the merge buffers that let a merged consumer read the outputs
//! of per-micro-batch producers without copying.
//!
//! Only tensors that cross a subgraph boundary are tracked. Operator-internal
//! intermediates live in the engine's scratch arena, and weights are
//! persistent.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;

use serde::Serialize;
use thiserror::Error;

use crate::graph::{DType, Graph, Tensor, TensorData, TensorId, TensorRole};
use crate::partition::{PartitionPlan, SubgraphId};

/// Half-open range of micro-batch indices.
pub type UbRange = (usize, usize);

/// Micro-batch sizes plus the subgraph instances executed merged.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct SplitSignature {
    pub sizes: Vec<usize>,
    /// Ranges of at least two micro-batches executed as one instance.
    pub merges: BTreeMap<SubgraphId, Vec<UbRange>>,
}

impl SplitSignature {
    pub fn new(sizes: Vec<usize>) -> Self {
        SplitSignature { sizes, merges: BTreeMap::new() }
    }

    pub fn with_merge(mut self, sg: SubgraphId, range: UbRange) -> Self {
        self.add_merge(sg, range);
        self
    }

    pub fn add_merge(&mut self, sg: SubgraphId, range: UbRange) {
        if range.1 - range.0 >= 2 {
            let v = self.merges.entry(sg).or_default();
            v.push(range);
            v.sort_unstable();
        }
    }

    pub fn len(&self) -> usize {
        self.sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sizes.is_empty()
    }

    pub fn total_rows(&self) -> usize {
        self.sizes.iter().sum()
    }

    /// Row offset of every micro-batch (prefix sums of `sizes`).
    pub fn offsets(&self) -> Vec<usize> {
        self.sizes
            .iter()
            .scan(0, |acc, s| {
                let o = *acc;
                *acc += s;
                Some(o)
            })
            .collect()
    }

    pub fn range_rows(&self, r: UbRange) -> usize {
        self.sizes[r.0..r.1].iter().sum()
    }

    pub fn merge_set(&self) -> BTreeSet<SubgraphId> {
        self.merges.keys().copied().collect()
    }

    /// The instance range of `sg` that covers micro-batch `i`.
    pub fn group_of(&self, sg: SubgraphId, i: usize) -> UbRange {
        self.merges
            .get(&sg)
            .and_then(|rs| rs.iter().find(|r| r.0 <= i && i < r.1).copied())
            .unwrap_or((i, i + 1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct BufferId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binding {
    Unmaterialized,
    Owned(BufferId),
    Slice { buf: BufferId, row_offset: usize, rows: usize },
    /// Produced and consumed inside one fused dispatch; never stored.
    Elided,
    Reclaimed,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorState {
    pub ref_count: usize,
    pub prealloc: bool,
    pub binding: Binding,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MicroBatchContext {
    pub ubatch_idx: usize,
    pub batch_rows: usize,
    pub row_offset: usize,
    pub states: BTreeMap<TensorId, TensorState>,
}

/// Result of the static pass for one split signature.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Analysis {
    pub signature: SplitSignature,
    pub contexts: Vec<MicroBatchContext>,
    /// Micro-batch spans backed by one merge buffer, per tensor.
    pub spans: BTreeMap<TensorId, Vec<UbRange>>,
    /// Bookkeeping steps performed; feeds the engine's analysis counter.
    pub work: u64,
}

#[derive(Debug, Error, PartialEq)]
pub enum DataflowError {
    #[error("merge set names unknown subgraph {0}")]
    UnknownSubgraph(SubgraphId),
    #[error("invalid split signature: {0}")]
    InvalidSignature(String),
    #[error("tensor `{tensor}` in micro-batch {ubatch} used after its last reference")]
    UseAfterFree { tensor: String, ubatch: usize },
    #[error("tensor `{tensor}` in micro-batch {ubatch} is read before it is produced")]
    Unmaterialized { tensor: String, ubatch: usize },
    #[error("tensor `{tensor}` in micro-batch {ubatch} produced twice")]
    DoubleProduce { tensor: String, ubatch: usize },
}

fn tracked(graph: &Graph, t: TensorId) -> bool {
    let m = graph.tensor(t);
    m.is_batched() && m.role != TensorRole::Weight
}

fn overlaps(a: UbRange, b: UbRange) -> bool {
    a.0 < b.1 && b.0 < a.1
}

/// Reference counts and prealloc flags for every micro-batch of `sig`.
pub fn static_analysis(graph: &Graph, plan: &PartitionPlan, sig: &SplitSignature) -> Result<Analysis, DataflowError> {
    let n = sig.len();
    if n == 0 || sig.sizes.contains(&0) {
        return Err(DataflowError::InvalidSignature(format!("sizes {:?}", sig.sizes)));
    }
    for (sg, ranges) in &sig.merges {
        if sg.0 >= plan.len() {
            return Err(DataflowError::UnknownSubgraph(*sg));
        }
        for (i, r) in ranges.iter().enumerate() {
            if r.1 > n || r.1 < r.0 + 2 || ranges[..i].iter().any(|o| overlaps(*o, *r)) {
                return Err(DataflowError::InvalidSignature(format!("merge range {r:?} of {sg}")));
            }
        }
    }
    let mut work = 0u64;

    let mut tensors: BTreeSet<TensorId> = graph.graph_inputs().iter().copied().filter(|t| tracked(graph, *t)).collect();
    for sg in &plan.subgraphs {
        tensors.extend(sg.boundary_outputs.iter().copied().filter(|t| tracked(graph, *t)));
    }

    let mut refs: BTreeMap<TensorId, usize> = BTreeMap::new();
    let mut spans: BTreeMap<TensorId, Vec<UbRange>> = BTreeMap::new();
    for &t in &tensors {
        let consumers: Vec<SubgraphId> = plan.consumers_of(t).collect();
        let sentinel = usize::from(graph.is_output(t));
        refs.insert(t, consumers.len() + sentinel);
        work += consumers.len() as u64 + 1;

        let producer = plan.producer_of(graph, t);
        let producer_ranges: Vec<UbRange> = match producer {
            Some(p) => (0..n).map(|i| sig.group_of(p, i)).collect::<BTreeSet<_>>().into_iter().collect(),
            None => (0..n).map(|i| (i, i + 1)).collect(),
        };
        let mut comps: Vec<UbRange> =
            consumers.iter().flat_map(|c| sig.merges.get(c).cloned().unwrap_or_default()).collect();
        if comps.is_empty() {
            continue;
        }
        loop {
            let touching: Vec<UbRange> =
                producer_ranges.iter().filter(|p| comps.iter().any(|c| overlaps(*c, **p))).copied().collect();
            let mut all = comps.clone();
            all.extend(touching);
            all.sort_unstable();
            let mut merged: Vec<UbRange> = Vec::new();
            for c in all {
                match merged.last_mut() {
                    Some(last) if overlaps(*last, c) => last.1 = last.1.max(c.1),
                    _ => merged.push(c),
                }
            }
            if merged == comps {
                break;
            }
            comps = merged;
        }
        // a span fed by one producer instance is that instance's own output buffer
        comps.retain(|c| producer_ranges.iter().filter(|p| overlaps(**p, *c)).count() > 1);
        if !comps.is_empty() {
            spans.insert(t, comps);
        }
    }

    let offsets = sig.offsets();
    let contexts = (0..n)
        .map(|i| {
            let states = tensors
                .iter()
                .map(|t| {
                    let prealloc = spans.get(t).is_some_and(|s| s.iter().any(|r| r.0 <= i && i < r.1));
                    (*t, TensorState { ref_count: refs[t], prealloc, binding: Binding::Unmaterialized })
                })
                .collect();
            work += tensors.len() as u64;
            MicroBatchContext { ubatch_idx: i, batch_rows: sig.sizes[i], row_offset: offsets[i], states }
        })
        .collect();
    Ok(Analysis { signature: sig.clone(), contexts, spans, work })
}

/// Where an instance reads one input from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Source {
    /// Element range of a buffer.
    Buffer { buf: BufferId, elems: Range<usize> },
    /// Weight or replicated graph input, read from the persistent store.
    Persistent(TensorId),
}

/// Element range an instance writes one output into.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dest {
    pub buf: BufferId,
    pub elems: Range<usize>,
}

#[derive(Debug)]
pub(crate) struct Buffer {
    pub(crate) data: TensorData,
    rows: usize,
    row_len: usize,
    /// Bindings (micro-batches) still referring to this buffer.
    live: usize,
    /// Per-micro-batch `(row_offset, rows)` when this is a merge buffer.
    slices: Vec<(usize, usize)>,
    copies: usize,
}

impl Buffer {
    fn bytes(&self, dtype: DType) -> usize {
        self.rows * self.row_len * dtype.size_bytes()
    }
}

/// Layout of a merge buffer, for inspection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MergeBufferInfo {
    pub buffer_id: BufferId,
    pub tensor: TensorId,
    pub total_rows: usize,
    pub row_len: usize,
    pub slices: Vec<(usize, usize)>,
    pub copies_counter: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MemoryReport {
    pub peak_live_bytes: usize,
    pub end_live_tensors: Vec<String>,
    pub total_copied_elements: usize,
    pub reclaimed: usize,
    pub conservation_ok: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemoryConfig {
    pub prealloc: bool,
    pub gc: bool,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        MemoryConfig { prealloc: true, gc: true }
    }
}

/// Runtime side of the data-flow analysis for one forward invocation.
#[derive(Debug)]
pub struct MemoryManager {
    dtype: DType,
    cfg: MemoryConfig,
    names: Vec<String>,
    outputs: BTreeSet<TensorId>,
    row_lens: Vec<usize>,
    sizes: Vec<usize>,
    offsets: Vec<usize>,
    contexts: Vec<MicroBatchContext>,
    spans: BTreeMap<TensorId, Vec<UbRange>>,
    initial_refs: BTreeMap<(usize, TensorId), usize>,
    decrements: BTreeMap<(usize, TensorId), usize>,
    buffers: BTreeMap<BufferId, Buffer>,
    merge_buffers: BTreeMap<(TensorId, usize), BufferId>,
    pending: Vec<(usize, TensorId)>,
    temps: Vec<BufferId>,
    next_id: u64,
    live_bytes: usize,
    peak_live_bytes: usize,
    copied_elements: usize,
    reclaimed: usize,
}

impl MemoryManager {
    pub fn new(graph: &Graph, analysis: &Analysis, cfg: MemoryConfig) -> Self {
        let contexts = analysis.contexts.clone();
        let initial_refs = contexts
            .iter()
            .flat_map(|c| c.states.iter().map(move |(t, s)| ((c.ubatch_idx, *t), s.ref_count)))
            .collect();
        MemoryManager {
            dtype: graph.dtype(),
            cfg,
            names: graph.tensors().iter().map(|t| t.name.clone()).collect(),
            outputs: graph.graph_outputs().iter().copied().collect(),
            row_lens: graph.tensors().iter().map(|t| t.row_len()).collect(),
            sizes: analysis.signature.sizes.clone(),
            offsets: analysis.signature.offsets(),
            contexts,
            spans: if cfg.prealloc { analysis.spans.clone() } else { BTreeMap::new() },
            initial_refs,
            decrements: BTreeMap::new(),
            buffers: BTreeMap::new(),
            merge_buffers: BTreeMap::new(),
            pending: Vec::new(),
            temps: Vec::new(),
            next_id: 0,
            live_bytes: 0,
            peak_live_bytes: 0,
            copied_elements: 0,
            reclaimed: 0,
        }
    }

    pub fn contexts(&self) -> &[MicroBatchContext] {
        &self.contexts
    }

    pub fn state(&self, ubatch: usize, t: TensorId) -> Option<&TensorState> {
        self.contexts[ubatch].states.get(&t)
    }

    fn is_tracked(&self, t: TensorId) -> bool {
        self.contexts.first().is_some_and(|c| c.states.contains_key(&t))
    }

    fn alloc(&mut self, data: TensorData, rows: usize, row_len: usize, live: usize) -> BufferId {
        let id = BufferId(self.next_id);
        self.next_id += 1;
        let buf = Buffer { data, rows, row_len, live, slices: Vec::new(), copies: 0 };
        self.live_bytes += buf.bytes(self.dtype);
        self.peak_live_bytes = self.peak_live_bytes.max(self.live_bytes);
        self.buffers.insert(id, buf);
        id
    }

    fn free(&mut self, id: BufferId) {
        if let Some(b) = self.buffers.remove(&id) {
            self.live_bytes -= b.bytes(self.dtype);
            self.copied_elements += b.copies;
        }
    }

    fn range_rows(&self, r: UbRange) -> usize {
        self.sizes[r.0..r.1].iter().sum()
    }

    /// Binds a full-batch graph input; every micro-batch sees a row slice of it.
    pub fn bind_input(&mut self, t: TensorId, value: &Tensor) {
        let n = self.sizes.len();
        let id = self.alloc(value.data.clone(), value.rows(), value.row_len(), n);
        for i in 0..n {
            let binding = Binding::Slice { buf: id, row_offset: self.offsets[i], rows: self.sizes[i] };
            let st = self.contexts[i].states.get_mut(&t).expect("graph inputs are tracked");
            st.binding = binding;
            if st.ref_count == 0 && !self.outputs.contains(&t) {
                self.pending.push((i, t));
            }
        }
        // an input nothing reads is dead on arrival
        self.finish_op();
    }

    /// Resolves the inputs of the instance covering micro-batches `range` and
    /// consumes one reference of each in every covered micro-batch.
    pub fn on_inputs(&mut self, range: UbRange, inputs: &[TensorId]) -> Result<Vec<Source>, DataflowError> {
        let mut out = Vec::with_capacity(inputs.len());
        for &t in inputs {
            if !self.is_tracked(t) {
                out.push(Source::Persistent(t));
                continue;
            }
            let mut parts = Vec::new();
            for i in range.0..range.1 {
                let st = &self.contexts[i].states[&t];
                match st.binding {
                    Binding::Reclaimed => {
                        return Err(DataflowError::UseAfterFree { tensor: self.names[t.0].clone(), ubatch: i })
                    }
                    Binding::Unmaterialized | Binding::Elided => {
                        return Err(DataflowError::Unmaterialized { tensor: self.names[t.0].clone(), ubatch: i })
                    }
                    Binding::Owned(buf) => parts.push((buf, 0, self.buffers[&buf].rows)),
                    Binding::Slice { buf, row_offset, rows } => parts.push((buf, row_offset, rows)),
                }
                if st.ref_count == 0 {
                    return Err(DataflowError::UseAfterFree { tensor: self.names[t.0].clone(), ubatch: i });
                }
            }
            for i in range.0..range.1 {
                self.consume(i, t);
            }
            out.push(self.view_or_concat(t, &parts));
        }
        Ok(out)
    }

    fn consume(&mut self, i: usize, t: TensorId) {
        let st = self.contexts[i].states.get_mut(&t).expect("tracked tensor");
        st.ref_count -= 1;
        *self.decrements.entry((i, t)).or_default() += 1;
        if st.ref_count == 0 && !self.outputs.contains(&t) {
            self.pending.push((i, t));
        }
    }

    fn view_or_concat(&mut self, t: TensorId, parts: &[(BufferId, usize, usize)]) -> Source {
        let row_len = self.row_lens[t.0];
        let contiguous = parts.windows(2).all(|w| w[0].0 == w[1].0 && w[0].1 + w[0].2 == w[1].1);
        if contiguous {
            let (buf, off, _) = parts[0];
            let rows: usize = parts.iter().map(|p| p.2).sum();
            return Source::Buffer { buf, elems: off * row_len..(off + rows) * row_len };
        }
        let mut data = TensorData::zeros(self.dtype, 0);
        for (buf, off, rows) in parts {
            data.extend_from(&self.buffers[buf].data.slice_range(off * row_len, (off + rows) * row_len));
        }
        let rows: usize = parts.iter().map(|p| p.2).sum();
        let id = self.alloc(data, rows, row_len, 1);
        self.buffers.get_mut(&id).expect("just allocated").copies = rows * row_len;
        self.temps.push(id);
        Source::Buffer { buf: id, elems: 0..rows * row_len }
    }

    /// Binds the outputs of the instance covering `range`. Preallocated
    /// outputs are redirected into their merge buffer slice.
    pub fn on_outputs(&mut self, range: UbRange, outputs: &[TensorId]) -> Result<Vec<Dest>, DataflowError> {
        let mut dests = Vec::with_capacity(outputs.len());
        for &t in outputs {
            for i in range.0..range.1 {
                if self.contexts[i].states[&t].binding != Binding::Unmaterialized {
                    return Err(DataflowError::DoubleProduce { tensor: self.names[t.0].clone(), ubatch: i });
                }
            }
            let row_len = self.row_lens[t.0];
            let span = self.spans.get(&t).and_then(|s| s.iter().find(|s| s.0 <= range.0 && range.1 <= s.1)).copied();
            let (buf, base) = match span {
                Some(span) => {
                    let buf = match self.merge_buffers.get(&(t, span.0)) {
                        Some(b) => *b,
                        None => {
                            let rows = self.range_rows(span);
                            let id = self.alloc(TensorData::zeros(self.dtype, rows * row_len), rows, row_len, span.1 - span.0);
                            let slices =
                                (span.0..span.1).map(|i| (self.offsets[i] - self.offsets[span.0], self.sizes[i])).collect();
                            self.buffers.get_mut(&id).expect("just allocated").slices = slices;
                            self.merge_buffers.insert((t, span.0), id);
                            id
                        }
                    };
                    (buf, self.offsets[span.0])
                }
                None => {
                    let rows = self.range_rows(range);
                    let id = self.alloc(TensorData::zeros(self.dtype, rows * row_len), rows, row_len, range.1 - range.0);
                    (id, self.offsets[range.0])
                }
            };
            for i in range.0..range.1 {
                let binding = if span.is_none() && range.1 - range.0 == 1 {
                    Binding::Owned(buf)
                } else {
                    Binding::Slice { buf, row_offset: self.offsets[i] - base, rows: self.sizes[i] }
                };
                self.contexts[i].states.get_mut(&t).expect("tracked tensor").binding = binding;
            }
            let start = (self.offsets[range.0] - base) * row_len;
            dests.push(Dest { buf, elems: start..start + self.range_rows(range) * row_len });
        }
        Ok(dests)
    }

    /// Marks `t` as produced and consumed `uses` times inside one fused dispatch.
    pub fn elide(&mut self, range: UbRange, t: TensorId, uses: usize) {
        if !self.is_tracked(t) {
            return;
        }
        for i in range.0..range.1 {
            self.contexts[i].states.get_mut(&t).expect("tracked tensor").binding = Binding::Elided;
            for _ in 0..uses {
                self.consume(i, t);
            }
        }
    }

    /// Reclaims everything whose last reference was consumed by the instance
    /// that just completed, and drops concatenation temporaries.
    pub fn finish_op(&mut self) {
        for id in std::mem::take(&mut self.temps) {
            self.free(id);
        }
        for (i, t) in std::mem::take(&mut self.pending) {
            if !self.cfg.gc {
                continue;
            }
            let st = self.contexts[i].states.get_mut(&t).expect("tracked tensor");
            let buf = match st.binding {
                Binding::Owned(b) | Binding::Slice { buf: b, .. } => Some(b),
                _ => None,
            };
            st.binding = Binding::Reclaimed;
            self.reclaimed += 1;
            if let Some(b) = buf {
                let entry = self.buffers.get_mut(&b).expect("bound buffers are live");
                entry.live -= 1;
                if entry.live == 0 {
                    self.free(b);
                }
            }
        }
    }

    pub(crate) fn data(&self, buf: BufferId) -> &TensorData {
        &self.buffers[&buf].data
    }

    pub(crate) fn take_data(&mut self, buf: BufferId) -> TensorData {
        std::mem::replace(&mut self.buffers.get_mut(&buf).expect("live buffer").data, TensorData::I64(Vec::new()))
    }

    pub(crate) fn put_data(&mut self, buf: BufferId, data: TensorData) {
        self.buffers.get_mut(&buf).expect("live buffer").data = data;
    }

    /// Reads the full-batch value of a tracked tensor from its bindings.
    pub fn read(&self, t: TensorId) -> Option<Tensor> {
        let row_len = self.row_lens[t.0];
        let mut data = TensorData::zeros(self.dtype, 0);
        let mut rows = 0;
        for c in &self.contexts {
            let (buf, off, r) = match c.states.get(&t)?.binding {
                Binding::Owned(b) => (b, 0, self.buffers.get(&b)?.rows),
                Binding::Slice { buf, row_offset, rows } => (buf, row_offset, rows),
                _ => return None,
            };
            data.extend_from(&self.buffers.get(&buf)?.data.slice_range(off * row_len, (off + r) * row_len));
            rows += r;
        }
        Some(Tensor::new(vec![rows, row_len], data))
    }

    pub fn merge_buffers(&self) -> Vec<MergeBufferInfo> {
        self.merge_buffers
            .iter()
            .filter_map(|((t, _), id)| {
                self.buffers.get(id).map(|b| MergeBufferInfo {
                    buffer_id: *id,
                    tensor: *t,
                    total_rows: b.rows,
                    row_len: b.row_len,
                    slices: b.slices.clone(),
                    copies_counter: b.copies,
                })
            })
            .collect()
    }

    pub fn copied_elements(&self) -> usize {
        self.copied_elements + self.buffers.values().map(|b| b.copies).sum::<usize>()
    }

    /// Conservation: every initial reference was consumed exactly once,
    /// except the sentinel held by graph outputs.
    pub fn conservation_holds(&self) -> bool {
        self.initial_refs.iter().all(|((i, t), init)| {
            let used = self.decrements.get(&(*i, *t)).copied().unwrap_or(0);
            let sentinel = usize::from(self.outputs.contains(t));
            *init == used + sentinel && self.contexts[*i].states[t].ref_count == sentinel
        })
    }

    pub fn report(&self) -> MemoryReport {
        let mut end_live: BTreeSet<TensorId> = BTreeSet::new();
        for c in &self.contexts {
            for (t, s) in &c.states {
                if matches!(s.binding, Binding::Owned(_) | Binding::Slice { .. }) {
                    end_live.insert(*t);
                }
            }
        }
        MemoryReport {
            peak_live_bytes: self.peak_live_bytes,
            end_live_tensors: end_live.into_iter().map(|t| self.names[t.0].clone()).collect(),
            total_copied_elements: self.copied_elements(),
            reclaimed: self.reclaimed,
            conservation_ok: self.conservation_holds(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gen::moe_ep;
    use crate::graph::desc::GraphDescription;
    use crate::graph::BatchSemantics::Batched;
    use crate::graph::TensorRole::*;
    use crate::graph::{build_graph, OperatorKind};
    use crate::partition::{partition, PartitionRule};

    /// x -> a (sg0) ; a -> b (sg1) ; a -> c (sg2) ; b,c -> y (sg3)
    fn diamond() -> (Graph, PartitionPlan) {
        let mut d = GraphDescription::default();
        for (n, r) in [("x", GraphInput), ("a", Intermediate), ("b", Intermediate), ("c", Intermediate), ("y", GraphOutput)] {
            d.tensor(n, &[4, 2], Batched, r);
        }
        d.op("p", OperatorKind::Attention, &["x"], &["a"], "")
            .op("q", OperatorKind::AllReduce { world_size: 3 }, &["a"], &["b"], "")
            .op("r", OperatorKind::RowScale, &["a"], &["c"], "")
            .op("s", OperatorKind::ElemAdd, &["b", "c"], &["y"], "");
        let g = build_graph(&d).unwrap();
        let plan = partition(&g, &[PartitionRule::ByFunc("*".into())]).unwrap();
        (g, plan)
    }

    fn id(g: &Graph, n: &str) -> TensorId {
        g.tensor_by_name(n).unwrap().id
    }

    #[test]
    fn ref_counts_follow_out_degree() {
        let (g, plan) = diamond();
        let a = static_analysis(&g, &plan, &SplitSignature::new(vec![4])).unwrap();
        let st = &a.contexts[0].states;
        assert_eq!(st[&id(&g, "a")].ref_count, 2);
        assert_eq!(st[&id(&g, "b")].ref_count, 1);
        // output with no consumers keeps a sentinel
        assert_eq!(st[&id(&g, "y")].ref_count, 1);
    }

    #[test]
    fn analysis_is_idempotent() {
        let (g, plan) = diamond();
        let sig = SplitSignature::new(vec![1, 3]).with_merge(SubgraphId(2), (0, 2));
        assert_eq!(static_analysis(&g, &plan, &sig), static_analysis(&g, &plan, &sig));
        assert_eq!(
            static_analysis(&g, &plan, &SplitSignature::new(vec![2, 2]).with_merge(SubgraphId(9), (0, 2))),
            Err(DataflowError::UnknownSubgraph(SubgraphId(9)))
        );
    }

    #[test]
    fn dbo_prealloc_flags_match_merge_point_inputs() {
        let g = build_graph(&moe_ep(2, 4, 4)).unwrap();
        let rules: Vec<PartitionRule> = ["layer*.attn", "layer*.moe.dispatch", "layer*.moe.experts", "layer*.moe.combine"]
            .iter()
            .map(|p| PartitionRule::ByModule(p.to_string()))
            .collect();
        let plan = partition(&g, &rules).unwrap();
        let attn: Vec<SubgraphId> =
            plan.subgraphs.iter().filter(|s| s.label.ends_with(".attn")).map(|s| s.id).collect();
        let mut sig = SplitSignature::new(vec![2, 2]);
        for a in &attn {
            sig.add_merge(*a, (0, 2));
        }
        let an = static_analysis(&g, &plan, &sig).unwrap();
        // brute force: inputs of merged subgraphs, whose producer is not itself merged
        let mut expected = BTreeSet::new();
        for a in &attn {
            for t in &plan.subgraph(*a).boundary_inputs {
                let merged_producer = plan.producer_of(&g, *t).is_some_and(|p| attn.contains(&p));
                if g.tensor(*t).role != Weight && !merged_producer {
                    expected.insert(*t);
                }
            }
        }
        assert_eq!(expected.len(), 2);
        for c in &an.contexts {
            let flagged: BTreeSet<TensorId> = c.states.iter().filter(|(_, s)| s.prealloc).map(|(t, _)| *t).collect();
            assert_eq!(flagged, expected);
        }
    }

    #[test]
    fn on_inputs_decrements_and_reclaims_after_op() {
        let (g, plan) = diamond();
        let an = static_analysis(&g, &plan, &SplitSignature::new(vec![4])).unwrap();
        let mut m = MemoryManager::new(&g, &an, MemoryConfig::default());
        let (x, a) = (id(&g, "x"), id(&g, "a"));
        m.bind_input(x, &Tensor::from_i64(&[4, 2], vec![1; 8]));
        m.on_inputs((0, 1), &[x]).unwrap();
        assert_eq!(m.state(0, x).unwrap().ref_count, 0);
        m.on_outputs((0, 1), &[a]).unwrap();
        m.finish_op();
        assert_eq!(m.state(0, x).unwrap().binding, Binding::Reclaimed);
        assert!(matches!(m.on_inputs((0, 1), &[x]), Err(DataflowError::UseAfterFree { .. })));
        m.on_inputs((0, 1), &[a]).unwrap();
        assert_eq!(m.state(0, a).unwrap().ref_count, 1);
        assert!(matches!(m.on_outputs((0, 1), &[a]), Err(DataflowError::DoubleProduce { .. })));
    }

    #[test]
    fn merge_buffer_layout_and_zero_copy_read() {
        let (g, plan) = diamond();
        // sg1 (q) runs merged; its input `a` comes from per-ubatch p
        let sig = SplitSignature::new(vec![2, 2]).with_merge(SubgraphId(1), (0, 2));
        let an = static_analysis(&g, &plan, &sig).unwrap();
        let a = id(&g, "a");
        assert!(an.contexts.iter().all(|c| c.states[&a].prealloc));
        let mut m = MemoryManager::new(&g, &an, MemoryConfig::default());
        let d0 = m.on_outputs((0, 1), &[a]).unwrap();
        let d1 = m.on_outputs((1, 2), &[a]).unwrap();
        assert_eq!(d0[0].buf, d1[0].buf);
        assert_eq!((d0[0].elems.clone(), d1[0].elems.clone()), (0..4, 4..8));
        let mb = m.merge_buffers();
        assert_eq!(mb.len(), 1);
        assert_eq!((mb[0].total_rows, mb[0].row_len, mb[0].slices.clone()), (4, 2, vec![(0, 2), (2, 2)]));
        assert_eq!(m.state(1, a).unwrap().binding, Binding::Slice { buf: d0[0].buf, row_offset: 2, rows: 2 });
        let src = m.on_inputs((0, 2), &[a]).unwrap();
        assert_eq!(src[0], Source::Buffer { buf: d0[0].buf, elems: 0..8 });
        assert_eq!(m.copied_elements(), 0);
    }

    #[test]
    fn fallback_concatenates_with_copies() {
        let (g, plan) = diamond();
        let sig = SplitSignature::new(vec![2, 2]).with_merge(SubgraphId(1), (0, 2));
        let an = static_analysis(&g, &plan, &sig).unwrap();
        let a = id(&g, "a");
        let mut m = MemoryManager::new(&g, &an, MemoryConfig { prealloc: false, gc: true });
        let d0 = m.on_outputs((0, 1), &[a]).unwrap();
        let d1 = m.on_outputs((1, 2), &[a]).unwrap();
        assert_ne!(d0[0].buf, d1[0].buf);
        // per-ubatch output is owned at exactly its own shape
        assert_eq!(d0[0].elems, 0..4);
        m.on_inputs((0, 2), &[a]).unwrap();
        m.finish_op();
        assert_eq!(m.copied_elements(), 8);
    }
}
