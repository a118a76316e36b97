//! Reference kernels for every operator kind.
//!
//! All kernels treat a tensor as a row-major `[rows, cols]` matrix where `cols`
//! is the product of the trailing extents. Integer kernels use wrapping
//! arithmetic so results stay exact and deterministic at any depth.

use std::collections::BTreeMap;
use std::fmt::Debug;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DType, OperatorKind, TensorData};

/// Scale applied by `RowScale` before dividing by the row statistic.
pub const ROW_SCALE_GAIN: i64 = 8;

#[derive(Debug, Clone, Copy)]
pub struct View<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
}

impl<'a, T> View<'a, T> {
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        View { data, rows, cols }
    }

    pub fn row(&self, r: usize) -> &'a [T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

#[derive(Debug)]
pub struct ViewMut<'a, T> {
    pub data: &'a mut [T],
    pub rows: usize,
    pub cols: usize,
}

impl<'a, T> ViewMut<'a, T> {
    pub fn new(data: &'a mut [T], rows: usize, cols: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        ViewMut { data, rows, cols }
    }
}

pub trait Element: Copy + Default + PartialEq + Debug + Send + Sync + 'static {
    const DTYPE: DType;

    fn add(self, other: Self) -> Self;
    fn mul(self, other: Self) -> Self;
    fn from_i64(v: i64) -> Self;
    fn row_scale(row: &[Self], out: &mut [Self]);

    fn slice(data: &TensorData) -> &[Self];
    fn slice_mut(data: &mut TensorData) -> &mut [Self];
    fn wrap(values: Vec<Self>) -> TensorData;

    fn run_custom(kernel: &dyn CustomKernel, inputs: &[View<'_, Self>], outputs: &mut [ViewMut<'_, Self>]);
}

impl Element for i64 {
    const DTYPE: DType = DType::I64;

    fn add(self, other: Self) -> Self {
        self.wrapping_add(other)
    }

    fn mul(self, other: Self) -> Self {
        self.wrapping_mul(other)
    }

    fn from_i64(v: i64) -> Self {
        v
    }

    fn row_scale(row: &[Self], out: &mut [Self]) {
        if row.is_empty() {
            return;
        }
        let sum = row.iter().fold(0u64, |acc, v| acc.wrapping_add(v.unsigned_abs()));
        let mean = sum / row.len() as u64;
        let stat = mean.min(i64::MAX as u64 - 1) as i64 + 1;
        for (o, v) in out.iter_mut().zip(row) {
            *o = v.wrapping_mul(ROW_SCALE_GAIN) / stat;
        }
    }

    fn slice(data: &TensorData) -> &[Self] {
        match data {
            TensorData::I64(v) => v,
            TensorData::F32(_) => panic!("expected i64 tensor data"),
        }
    }

    fn slice_mut(data: &mut TensorData) -> &mut [Self] {
        match data {
            TensorData::I64(v) => v,
            TensorData::F32(_) => panic!("expected i64 tensor data"),
        }
    }

    fn wrap(values: Vec<Self>) -> TensorData {
        TensorData::I64(values)
    }

    fn run_custom(kernel: &dyn CustomKernel, inputs: &[View<'_, Self>], outputs: &mut [ViewMut<'_, Self>]) {
        kernel.run_i64(inputs, outputs)
    }
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;

    fn add(self, other: Self) -> Self {
        self + other
    }

    fn mul(self, other: Self) -> Self {
        self * other
    }

    fn from_i64(v: i64) -> Self {
        v as f32
    }

    fn row_scale(row: &[Self], out: &mut [Self]) {
        if row.is_empty() {
            return;
        }
        let mean = row.iter().map(|v| v.abs()).sum::<f32>() / row.len() as f32;
        let stat = 1.0 + mean;
        for (o, v) in out.iter_mut().zip(row) {
            *o = v * ROW_SCALE_GAIN as f32 / stat;
        }
    }

    fn slice(data: &TensorData) -> &[Self] {
        match data {
            TensorData::F32(v) => v,
            TensorData::I64(_) => panic!("expected f32 tensor data"),
        }
    }

    fn slice_mut(data: &mut TensorData) -> &mut [Self] {
        match data {
            TensorData::F32(v) => v,
            TensorData::I64(_) => panic!("expected f32 tensor data"),
        }
    }

    fn wrap(values: Vec<Self>) -> TensorData {
        TensorData::F32(values)
    }

    fn run_custom(kernel: &dyn CustomKernel, inputs: &[View<'_, Self>], outputs: &mut [ViewMut<'_, Self>]) {
        kernel.run_f32(inputs, outputs)
    }
}

/// A user-supplied operator with its own reference semantics.
///
/// Used both for `Custom` graph nodes and for fused replacements dispatched
/// through `execute(.., replace_fn)`.
pub trait CustomKernel: Send + Sync + Debug {
    fn name(&self) -> &str;

    /// `(inputs, outputs)` the kernel expects.
    fn arity(&self) -> (usize, usize);

    fn run_i64(&self, inputs: &[View<'_, i64>], outputs: &mut [ViewMut<'_, i64>]);

    fn run_f32(&self, inputs: &[View<'_, f32>], outputs: &mut [ViewMut<'_, f32>]);
}

/// Column permutation used by `AllToAll`; a pure function of `(seed, cols)`.
pub fn all_to_all_permutation(seed: u64, cols: usize) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..cols).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    perm.shuffle(&mut rng);
    perm
}

/// Runs one built-in kind. `inputs` follow the operator's input order.
pub fn run_builtin<T: Element>(kind: &OperatorKind, inputs: &[View<'_, T>], out: &mut ViewMut<'_, T>) {
    match kind {
        OperatorKind::MatMul => {
            let (x, w) = (&inputs[0], &inputs[1]);
            let n = w.cols;
            for b in 0..x.rows {
                let xr = x.row(b);
                let orow = &mut out.data[b * n..(b + 1) * n];
                for (j, o) in orow.iter_mut().enumerate() {
                    let mut acc = T::default();
                    for (k, xv) in xr.iter().enumerate() {
                        acc = acc.add(xv.mul(w.data[k * n + j]));
                    }
                    *o = acc;
                }
            }
        }
        OperatorKind::ElemAdd => {
            for ((o, a), b) in out.data.iter_mut().zip(inputs[0].data).zip(inputs[1].data) {
                *o = a.add(*b);
            }
        }
        OperatorKind::RowScale => {
            let cols = out.cols;
            for r in 0..out.rows {
                T::row_scale(inputs[0].row(r), &mut out.data[r * cols..(r + 1) * cols]);
            }
        }
        OperatorKind::AllReduce { world_size } => {
            let ws = T::from_i64(*world_size);
            for (o, v) in out.data.iter_mut().zip(inputs[0].data) {
                *o = v.mul(ws);
            }
        }
        OperatorKind::AllToAll { seed } => {
            let cols = out.cols;
            let perm = all_to_all_permutation(*seed, cols);
            for r in 0..out.rows {
                let src = inputs[0].row(r);
                for (j, p) in perm.iter().enumerate() {
                    out.data[r * cols + j] = src[*p];
                }
            }
        }
        OperatorKind::Attention => {
            let cols = out.cols;
            for r in 0..out.rows {
                let src = inputs[0].row(r);
                let mut acc = T::default();
                for j in 0..cols {
                    acc = acc.add(src[j]);
                    out.data[r * cols + j] = acc;
                }
            }
        }
        OperatorKind::Custom { name } => panic!("custom kernel {name} must be dispatched through its registry entry"),
    }
}

/// Elementwise negation. Shipped so graph descriptions can exercise `Custom` nodes.
#[derive(Debug, Default)]
pub struct Negate;

impl CustomKernel for Negate {
    fn name(&self) -> &str {
        "negate"
    }

    fn arity(&self) -> (usize, usize) {
        (1, 1)
    }

    fn run_i64(&self, inputs: &[View<'_, i64>], outputs: &mut [ViewMut<'_, i64>]) {
        for (o, v) in outputs[0].data.iter_mut().zip(inputs[0].data) {
            *o = v.wrapping_neg();
        }
    }

    fn run_f32(&self, inputs: &[View<'_, f32>], outputs: &mut [ViewMut<'_, f32>]) {
        for (o, v) in outputs[0].data.iter_mut().zip(inputs[0].data) {
            *o = -v;
        }
    }
}

/// `RowScale(AllReduce(x))` in a single kernel.
#[derive(Debug)]
pub struct FusedAllReduceRowScale {
    pub world_size: i64,
}

impl FusedAllReduceRowScale {
    fn run<T: Element>(&self, inputs: &[View<'_, T>], outputs: &mut [ViewMut<'_, T>]) {
        let ws = T::from_i64(self.world_size);
        let out = &mut outputs[0];
        let cols = out.cols;
        let mut reduced = vec![T::default(); cols];
        for r in 0..out.rows {
            for (d, v) in reduced.iter_mut().zip(inputs[0].row(r)) {
                *d = v.mul(ws);
            }
            T::row_scale(&reduced, &mut out.data[r * cols..(r + 1) * cols]);
        }
    }
}

impl CustomKernel for FusedAllReduceRowScale {
    fn name(&self) -> &str {
        "fused_allreduce_rowscale"
    }

    fn arity(&self) -> (usize, usize) {
        (1, 1)
    }

    fn run_i64(&self, inputs: &[View<'_, i64>], outputs: &mut [ViewMut<'_, i64>]) {
        self.run(inputs, outputs)
    }

    fn run_f32(&self, inputs: &[View<'_, f32>], outputs: &mut [ViewMut<'_, f32>]) {
        self.run(inputs, outputs)
    }
}

/// Named custom kernels available to graph descriptions.
#[derive(Debug, Clone)]
pub struct KernelRegistry {
    kernels: BTreeMap<String, Arc<dyn CustomKernel>>,
}

impl Default for KernelRegistry {
    fn default() -> Self {
        let mut reg = KernelRegistry { kernels: BTreeMap::new() };
        reg.register(Arc::new(Negate));
        reg
    }
}

impl KernelRegistry {
    pub fn empty() -> Self {
        KernelRegistry { kernels: BTreeMap::new() }
    }

    pub fn register(&mut self, kernel: Arc<dyn CustomKernel>) {
        self.kernels.insert(kernel.name().to_string(), kernel);
    }

    pub fn get(&self, name: &str) -> Option<&Arc<dyn CustomKernel>> {
        self.kernels.get(name)
    }
}
