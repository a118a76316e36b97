//! Discrete-event simulator of one device with several lanes and three
//! contended resource classes.
//!
//! Each dispatch is a FIFO sequence of kernels on its lane. A kernel starts
//! once its lane is free, the dispatch's dependencies have finished, the host
//! has issued the dispatch, and its resource class has a free slot. Kernels of
//! one class are issued in dispatch order. While kernels of other classes are
//! active, a kernel progresses at `1 / prod(lambda[own][other])` of its
//! nominal speed.

use serde::{Deserialize, Serialize};

use crate::graph::ResourceClass;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceModel {
    /// Concurrent kernels allowed per class, indexed by `ResourceClass::index`.
    #[serde(default = "default_capacity")]
    pub capacity: [usize; 3],
    /// `interference[r1][r2]`: slowdown of an `r1` kernel while an `r2` kernel runs.
    #[serde(default = "default_interference")]
    pub interference: [[f64; 3]; 3],
}

fn default_capacity() -> [usize; 3] {
    [1, 1, 1]
}

fn default_interference() -> [[f64; 3]; 3] {
    [[1.0; 3]; 3]
}

impl Default for ResourceModel {
    fn default() -> Self {
        ResourceModel { capacity: default_capacity(), interference: default_interference() }
    }
}

impl ResourceModel {
    pub fn with_interference(mut self, r1: ResourceClass, r2: ResourceClass, factor: f64) -> Self {
        self.interference[r1.index()][r2.index()] = factor;
        self
    }

    pub fn is_valid(&self) -> bool {
        self.capacity.iter().all(|c| *c >= 1) && self.interference.iter().flatten().all(|l| *l >= 1.0 && l.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimKernel {
    pub name: String,
    pub class: ResourceClass,
    /// Nominal duration before interference.
    pub duration: f64,
}

/// One dispatch as seen by the device.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DispatchRecord {
    pub label: String,
    pub lane: usize,
    /// Indices of earlier records that must finish first.
    pub deps: Vec<usize>,
    pub host_overhead: f64,
    pub rows: usize,
    pub kernels: Vec<SimKernel>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimEvent {
    pub name: String,
    pub request: usize,
    pub lane: usize,
    pub class: ResourceClass,
    pub rows: usize,
    pub start: f64,
    pub duration: f64,
    pub end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HostEvent {
    pub request: usize,
    pub label: String,
    pub start: f64,
    pub duration: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimReport {
    pub makespan: f64,
    /// Sum of event durations per class.
    pub busy: [f64; 3],
    pub lanes: usize,
    pub events: Vec<SimEvent>,
    pub host_events: Vec<HostEvent>,
}

/// Fractions of the makespan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Breakdown {
    pub compute: f64,
    pub memory: f64,
    pub network: f64,
    /// No class busy.
    pub idle: f64,
    /// Two or more classes busy at once.
    pub overlap: f64,
}

impl Breakdown {
    pub fn share(&self, class: ResourceClass) -> f64 {
        match class {
            ResourceClass::Compute => self.compute,
            ResourceClass::Memory => self.memory,
            ResourceClass::Network => self.network,
        }
    }
}

impl SimReport {
    pub fn utilization(&self, class: ResourceClass) -> f64 {
        if self.makespan > 0.0 {
            self.busy[class.index()] / self.makespan
        } else {
            0.0
        }
    }

    /// Lanes with at least one event.
    pub fn busy_lanes(&self) -> Vec<usize> {
        let mut lanes: Vec<usize> = self.events.iter().map(|e| e.lane).collect();
        lanes.sort_unstable();
        lanes.dedup();
        lanes
    }

    pub fn breakdown(&self) -> Breakdown {
        breakdown(&self.events, self.makespan)
    }
}

/// Time shares per class computed from the union of each class's busy intervals.
pub fn breakdown(events: &[SimEvent], makespan: f64) -> Breakdown {
    if makespan <= 0.0 {
        return Breakdown { compute: 0.0, memory: 0.0, network: 0.0, idle: 0.0, overlap: 0.0 };
    }
    let mut points: Vec<f64> = events.iter().flat_map(|e| [e.start, e.end]).chain([0.0, makespan]).collect();
    points.sort_by(f64::total_cmp);
    points.dedup();
    let mut busy = [0.0; 3];
    let (mut idle, mut overlap) = (0.0, 0.0);
    for w in points.windows(2) {
        let (a, b) = (w[0], w[1]);
        let mid = (a + b) / 2.0;
        let mut active = [false; 3];
        for e in events {
            if e.start <= mid && mid < e.end {
                active[e.class.index()] = true;
            }
        }
        let n = active.iter().filter(|x| **x).count();
        for c in 0..3 {
            if active[c] {
                busy[c] += b - a;
            }
        }
        if n == 0 {
            idle += b - a;
        }
        if n >= 2 {
            overlap += b - a;
        }
    }
    Breakdown {
        compute: busy[0] / makespan,
        memory: busy[1] / makespan,
        network: busy[2] / makespan,
        idle: idle / makespan,
        overlap: overlap / makespan,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum KState {
    Waiting,
    Running { start: f64, remaining: f64 },
    Done,
}

struct Kernel {
    req: usize,
    idx: usize,
    lane: usize,
    class: usize,
    state: KState,
}

/// Runs the schedule to completion. Records must be in dispatch order and
/// only depend on earlier records.
pub fn simulate(records: &[DispatchRecord], model: &ResourceModel, lanes: usize) -> SimReport {
    let lanes = lanes.max(records.iter().map(|r| r.lane + 1).max().unwrap_or(1));
    let mut kernels: Vec<Kernel> = Vec::new();
    for (ri, r) in records.iter().enumerate() {
        debug_assert!(r.deps.iter().all(|d| *d < ri), "dependencies must point backwards");
        for (ki, k) in r.kernels.iter().enumerate() {
            kernels.push(Kernel { req: ri, idx: ki, lane: r.lane, class: k.class.index(), state: KState::Waiting });
        }
    }
    let lane_queue: Vec<Vec<usize>> =
        (0..lanes).map(|l| (0..kernels.len()).filter(|k| kernels[*k].lane == l).collect()).collect();
    let class_queue: Vec<Vec<usize>> =
        (0..3).map(|c| (0..kernels.len()).filter(|k| kernels[*k].class == c).collect()).collect();
    let mut lane_pos = vec![0usize; lanes];
    let mut class_pos = [0usize; 3];
    let mut class_active = [0usize; 3];

    let mut host_at = Vec::with_capacity(records.len());
    let mut h = 0.0;
    for r in records {
        host_at.push(h);
        h += r.host_overhead;
    }
    let host_events = records
        .iter()
        .enumerate()
        .map(|(i, r)| HostEvent { request: i, label: r.label.clone(), start: host_at[i], duration: r.host_overhead })
        .collect();

    let mut remaining_kernels = vec![0usize; records.len()];
    for k in &kernels {
        remaining_kernels[k.req] += 1;
    }
    // dispatches without kernels finish when issued
    let mut req_done: Vec<bool> = remaining_kernels.iter().map(|n| *n == 0).collect();

    let mut events = Vec::with_capacity(kernels.len());
    let mut now = 0.0f64;
    let mut finished = 0;
    while finished < kernels.len() {
        // start everything that can start at `now`
        loop {
            let mut started = false;
            for lane in 0..lanes {
                let Some(&k) = lane_queue[lane].get(lane_pos[lane]) else { continue };
                if kernels[k].state != KState::Waiting {
                    continue;
                }
                let (req, class) = (kernels[k].req, kernels[k].class);
                if kernels[k].idx == 0 && (host_at[req] > now || records[req].deps.iter().any(|d| !req_done[*d])) {
                    continue;
                }
                if class_queue[class][class_pos[class]] != k || class_active[class] >= model.capacity[class] {
                    continue;
                }
                let dur = records[req].kernels[kernels[k].idx].duration;
                kernels[k].state = KState::Running { start: now, remaining: dur };
                class_pos[class] += 1;
                class_active[class] += 1;
                started = true;
            }
            if !started {
                break;
            }
        }

        let active: Vec<usize> =
            (0..kernels.len()).filter(|k| matches!(kernels[*k].state, KState::Running { .. })).collect();
        let rate = |k: usize| -> f64 {
            let own = kernels[k].class;
            let slowdown: f64 = (0..3)
                .filter(|c| *c != own && class_active[*c] > 0)
                .map(|c| model.interference[own][c])
                .product();
            1.0 / slowdown
        };
        let mut next = f64::INFINITY;
        for &k in &active {
            if let KState::Running { remaining, .. } = kernels[k].state {
                next = next.min(now + remaining / rate(k));
            }
        }
        for (i, t) in host_at.iter().enumerate() {
            if *t > now && !req_done[i] {
                next = next.min(*t);
            }
        }
        assert!(next.is_finite(), "simulation stalled with {} kernels left", kernels.len() - finished);

        let rates: Vec<f64> = active.iter().map(|k| rate(*k)).collect();
        let mut completed = Vec::new();
        for (&k, r) in active.iter().zip(&rates) {
            if let KState::Running { start, remaining } = kernels[k].state {
                let finish = now + remaining / r;
                if finish <= next {
                    completed.push((k, start));
                } else {
                    kernels[k].state = KState::Running { start, remaining: remaining - (next - now) * r };
                }
            }
        }
        now = next;
        for (k, start) in completed {
            let kr = &kernels[k];
            let (req, idx, class) = (kr.req, kr.idx, kr.class);
            kernels[k].state = KState::Done;
            class_active[class] -= 1;
            lane_pos[kernels[k].lane] += 1;
            finished += 1;
            remaining_kernels[req] -= 1;
            if remaining_kernels[req] == 0 {
                req_done[req] = true;
            }
            let r = &records[req];
            events.push(SimEvent {
                name: r.kernels[idx].name.clone(),
                request: req,
                lane: r.lane,
                class: r.kernels[idx].class,
                rows: r.rows,
                start,
                duration: now - start,
                end: now,
            });
        }
    }
    events.sort_by(|a, b| a.start.total_cmp(&b.start).then(a.lane.cmp(&b.lane)).then(a.request.cmp(&b.request)));
    let mut busy = [0.0; 3];
    for e in &events {
        busy[e.class.index()] += e.duration;
    }
    let makespan = events.iter().map(|e| e.end).fold(0.0, f64::max);
    SimReport { makespan, busy, lanes, events, host_events }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ResourceClass::*;

    fn rec(lane: usize, deps: &[usize], kernels: &[(ResourceClass, f64)]) -> DispatchRecord {
        DispatchRecord {
            label: "r".into(),
            lane,
            deps: deps.to_vec(),
            host_overhead: 0.0,
            rows: 1,
            kernels: kernels.iter().map(|(c, d)| SimKernel { name: "k".into(), class: *c, duration: *d }).collect(),
        }
    }

    #[test]
    fn independent_classes_overlap() {
        let r = simulate(&[rec(0, &[], &[(Compute, 10.0)]), rec(1, &[], &[(Network, 5.0)])], &ResourceModel::default(), 2);
        assert_eq!(r.makespan, 10.0);
    }

    #[test]
    fn same_class_serializes() {
        let r = simulate(&[rec(0, &[], &[(Compute, 10.0)]), rec(1, &[], &[(Compute, 5.0)])], &ResourceModel::default(), 2);
        assert_eq!(r.makespan, 15.0);
    }

    #[test]
    fn lane_fifo_and_dependencies() {
        let recs = [rec(0, &[], &[(Compute, 3.0), (Memory, 2.0)]), rec(1, &[0], &[(Network, 4.0)])];
        let r = simulate(&recs, &ResourceModel::default(), 2);
        assert_eq!(r.makespan, 9.0);
        assert_eq!(r.busy, [3.0, 2.0, 4.0]);
    }

    #[test]
    fn interference_stretches_overlapped_work() {
        let model = ResourceModel::default().with_interference(Compute, Network, 2.0);
        let r = simulate(&[rec(0, &[], &[(Compute, 10.0)]), rec(1, &[], &[(Network, 5.0)])], &model, 2);
        // compute runs at half speed for 5 units (2.5 work), then 7.5 alone
        assert_eq!(r.makespan, 12.5);
    }

    #[test]
    fn host_overhead_only_delays_when_exceeding_slack() {
        let mut a = rec(0, &[], &[(Compute, 1.0)]);
        a.host_overhead = 5.0;
        let b = rec(0, &[], &[(Compute, 1.0)]);
        let r = simulate(&[a, b], &ResourceModel::default(), 1);
        assert_eq!(r.makespan, 6.0);
        assert_eq!(r.host_events[1].start, 5.0);
    }

    #[test]
    fn breakdown_of_sequential_chain() {
        let recs = [rec(0, &[], &[(Compute, 70.0), (Memory, 15.0), (Network, 15.0)])];
        let r = simulate(&recs, &ResourceModel::default(), 1);
        let b = r.breakdown();
        assert_eq!((b.compute, b.memory, b.network, b.idle), (0.7, 0.15, 0.15, 0.0));
    }
}
