//! Numeric replay of a compiled plan against bound buffers.

use std::collections::BTreeMap;

use crate::dataflow::{Dest, MemoryManager, Source};
use crate::engine::{CompiledPlan, PlanKernel, Slot};
use crate::graph::kernels::run_builtin;
use crate::graph::{DType, Element, Tensor, TensorData, TensorId, View, ViewMut};

fn take(d: &mut TensorData) -> TensorData {
    std::mem::replace(d, TensorData::I64(Vec::new()))
}

/// Runs `plan` reading `sources` and writing straight into `dests`.
pub(crate) fn run_plan(
    plan: &CompiledPlan,
    mem: &mut MemoryManager,
    sources: &[Source],
    dests: &[Dest],
    persistent: &BTreeMap<TensorId, Tensor>,
    arena: &mut Vec<TensorData>,
    dtype: DType,
) {
    if arena.len() < plan.arena_shapes.len() {
        arena.resize_with(plan.arena_shapes.len(), || TensorData::zeros(dtype, 0));
    }
    for (slot, (r, c)) in arena.iter_mut().zip(&plan.arena_shapes) {
        slot.ensure_len(r * c);
    }
    let mut outs: Vec<TensorData> = dests.iter().map(|d| mem.take_data(d.buf)).collect();
    match dtype {
        DType::I64 => replay::<i64>(plan, mem, sources, dests, persistent, arena, &mut outs),
        DType::F32 => replay::<f32>(plan, mem, sources, dests, persistent, arena, &mut outs),
    }
    for (d, data) in dests.iter().zip(outs) {
        mem.put_data(d.buf, data);
    }
}

fn replay<T: Element>(
    plan: &CompiledPlan,
    mem: &MemoryManager,
    sources: &[Source],
    dests: &[Dest],
    persistent: &BTreeMap<TensorId, Tensor>,
    arena: &mut [TensorData],
    outs: &mut [TensorData],
) {
    for op in &plan.ops {
        let mut taken: Vec<TensorData> = op
            .outputs
            .iter()
            .map(|s| match s {
                Slot::Arena(i) => take(&mut arena[*i]),
                Slot::Output(k) => take(&mut outs[*k]),
                Slot::Input(_) => unreachable!("plans never write inputs"),
            })
            .collect();
        {
            let view = |s: &Slot| -> View<'_, T> {
                match *s {
                    Slot::Input(k) => {
                        let (r, c) = plan.input_shapes[k];
                        let data = match &sources[k] {
                            Source::Buffer { buf, elems } => &T::slice(mem.data(*buf))[elems.clone()],
                            Source::Persistent(t) => T::slice(&persistent[t].data),
                        };
                        View::new(data, r, c)
                    }
                    Slot::Output(k) => {
                        let (r, c) = plan.output_shapes[k];
                        View::new(&T::slice(&outs[k])[dests[k].elems.clone()], r, c)
                    }
                    Slot::Arena(i) => {
                        let (r, c) = plan.arena_shapes[i];
                        View::new(&T::slice(&arena[i])[..r * c], r, c)
                    }
                }
            };
            let inputs: Vec<View<'_, T>> = op.inputs.iter().map(view).collect();
            let mut outputs: Vec<ViewMut<'_, T>> = taken
                .iter_mut()
                .zip(&op.outputs)
                .map(|(d, s)| match *s {
                    Slot::Arena(i) => {
                        let (r, c) = plan.arena_shapes[i];
                        ViewMut::new(&mut T::slice_mut(d)[..r * c], r, c)
                    }
                    Slot::Output(k) => {
                        let (r, c) = plan.output_shapes[k];
                        ViewMut::new(&mut T::slice_mut(d)[dests[k].elems.clone()], r, c)
                    }
                    Slot::Input(_) => unreachable!(),
                })
                .collect();
            match &op.kernel {
                PlanKernel::Builtin(kind) => run_builtin(kind, &inputs, &mut outputs[0]),
                PlanKernel::Custom(k) => T::run_custom(k.as_ref(), &inputs, &mut outputs),
            }
        }
        for (s, d) in op.outputs.iter().zip(taken) {
            match s {
                Slot::Arena(i) => arena[*i] = d,
                Slot::Output(k) => outs[*k] = d,
                Slot::Input(_) => unreachable!(),
            }
        }
    }
}
