mod common;

use common::*;
use opflow::graph::ResourceClass;
use opflow::sim::{simulate, DispatchRecord, ResourceModel, SimKernel};
use opflow::trace::{to_json, validate_trace};
use proptest::prelude::*;
use rand::Rng;

fn random_records(seed: u64, n: usize, lanes: usize, host: bool) -> Vec<DispatchRecord> {
    let mut r = rng(seed);
    (0..n)
        .map(|i| {
            let deps = (0..i).filter(|_| r.gen_bool(0.2)).collect();
            let kernels = (0..r.gen_range(1..=3))
                .map(|k| SimKernel {
                    name: format!("k{i}.{k}"),
                    class: ResourceClass::ALL[r.gen_range(0..3)],
                    duration: r.gen_range(0.0..10.0),
                })
                .collect();
            DispatchRecord {
                label: format!("d{i}"),
                lane: r.gen_range(0..lanes),
                deps,
                host_overhead: if host { r.gen_range(0.0..2.0) } else { 0.0 },
                rows: 1,
                kernels,
            }
        })
        .collect()
}

fn random_model(seed: u64) -> ResourceModel {
    let mut r = rng(seed);
    let mut m = ResourceModel::default();
    for a in 0..3 {
        m.capacity[a] = r.gen_range(1..=3);
        for b in 0..3 {
            m.interference[a][b] = r.gen_range(1.0..2.0);
        }
    }
    m
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn makespan_respects_lower_bounds(seed in any::<u64>(), n in 1usize..40, lanes in 1usize..4) {
        let recs = random_records(seed, n, lanes, true);
        let model = random_model(seed ^ 1);
        let rep = simulate(&recs, &model, lanes);
        prop_assert!(rep.makespan + 1e-9 >= critical_path(&recs));
        prop_assert!(rep.makespan + 1e-9 >= class_work_bound(&recs, &model));
        // the last dispatch is issued once every earlier launch has been paid for
        let issued: f64 = recs[..n - 1].iter().map(|r| r.host_overhead).sum();
        prop_assert!(rep.makespan + 1e-9 >= issued);
    }

    #[test]
    fn simulation_is_deterministic(seed in any::<u64>(), n in 1usize..40) {
        let recs = random_records(seed, n, 3, true);
        let model = random_model(seed);
        prop_assert_eq!(simulate(&recs, &model, 3), simulate(&recs, &model, 3));
    }

    #[test]
    fn capacity_one_without_interference_matches_list_schedule(seed in any::<u64>(), n in 1usize..40, lanes in 1usize..4) {
        let recs = random_records(seed, n, lanes, true);
        let rep = simulate(&recs, &ResourceModel::default(), lanes);
        let oracle = list_schedule_makespan(&recs);
        prop_assert!(close(rep.makespan, oracle), "sim {} oracle {}", rep.makespan, oracle);
    }

    #[test]
    fn work_is_conserved_without_interference(seed in any::<u64>(), n in 1usize..40) {
        let recs = random_records(seed, n, 2, false);
        let mut model = random_model(seed);
        model.interference = [[1.0; 3]; 3];
        let rep = simulate(&recs, &model, 2);
        let mut want = [0.0f64; 3];
        for k in recs.iter().flat_map(|r| &r.kernels) {
            want[k.class.index()] += k.duration;
        }
        for c in 0..3 {
            prop_assert!(close(rep.busy[c], want[c]), "class {} busy {} want {}", c, rep.busy[c], want[c]);
        }
        prop_assert_eq!(rep.events.len(), recs.iter().map(|r| r.kernels.len()).sum::<usize>());
    }

    #[test]
    fn durations_scale_linearly(seed in any::<u64>(), n in 1usize..30, factor in 0.5f64..4.0) {
        let recs = random_records(seed, n, 2, true);
        let model = random_model(seed);
        let mut scaled = recs.clone();
        for r in &mut scaled {
            r.host_overhead *= factor;
            for k in &mut r.kernels {
                k.duration *= factor;
            }
        }
        let (a, b) = (simulate(&recs, &model, 2).makespan, simulate(&scaled, &model, 2).makespan);
        prop_assert!(close(a * factor, b), "{} * {} != {}", a, factor, b);
    }

    #[test]
    fn events_respect_lanes_classes_and_deps(seed in any::<u64>(), n in 1usize..40, lanes in 1usize..4) {
        let recs = random_records(seed, n, lanes, true);
        let model = random_model(seed);
        let rep = simulate(&recs, &model, lanes);
        let eps = 1e-9;
        for (i, a) in rep.events.iter().enumerate() {
            prop_assert!(a.end + eps >= a.start + recs[a.request].kernels.iter().find(|k| k.name == a.name).unwrap().duration);
            for b in &rep.events[i + 1..] {
                let overlap = a.start < b.end - eps && b.start < a.end - eps;
                prop_assert!(!(overlap && a.lane == b.lane), "{} and {} overlap on lane {}", a.name, b.name, a.lane);
            }
            let concurrent = rep
                .events
                .iter()
                .filter(|b| b.class == a.class && b.start <= a.start + eps && a.start < b.end - eps)
                .count();
            prop_assert!(concurrent <= model.capacity[a.class.index()]);
        }
        for (i, r) in recs.iter().enumerate() {
            let start = rep.events.iter().filter(|e| e.request == i).map(|e| e.start).fold(f64::INFINITY, f64::min);
            for d in &r.deps {
                let end = rep.events.iter().filter(|e| e.request == *d).map(|e| e.end).fold(0.0, f64::max);
                prop_assert!(start + eps >= end, "request {} starts before dependency {} ends", i, d);
            }
        }
    }
}

#[test]
fn independent_kernels_overlap_across_classes() {
    let rec = |lane, class, duration| DispatchRecord {
        label: "x".into(),
        lane,
        deps: vec![],
        host_overhead: 0.0,
        rows: 1,
        kernels: vec![SimKernel { name: format!("k{lane}"), class, duration }],
    };
    let recs = [rec(0, ResourceClass::Compute, 10.0), rec(1, ResourceClass::Network, 5.0)];
    assert_eq!(simulate(&recs, &ResourceModel::default(), 2).makespan, 10.0);
    let slowed = ResourceModel::default().with_interference(ResourceClass::Network, ResourceClass::Compute, 2.0);
    assert_eq!(simulate(&recs, &slowed, 2).makespan, 10.0);
    let rep = simulate(&recs, &slowed, 2);
    let net = rep.events.iter().find(|e| e.class == ResourceClass::Network).unwrap();
    assert_eq!(net.end - net.start, 10.0);
}

#[test]
fn trace_of_random_report_validates() {
    let recs = random_records(9, 25, 2, true);
    let rep = simulate(&recs, &ResourceModel::default(), 2);
    let n = validate_trace(&to_json(&rep)).unwrap();
    assert_eq!(n, rep.events.len() + rep.host_events.len());
}
