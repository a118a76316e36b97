mod common;

use common::*;
use opflow::graph::BatchSemantics::Batched;
use opflow::graph::TensorRole::{GraphInput, GraphOutput, Intermediate};
use opflow::graph::{build_graph, DType, GraphDescription, GraphError, OpId, OperatorKind};
use opflow::partition::{partition, validate_plan, PartitionError, PartitionPlan, PartitionRule, PlanViolation};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn random_rules_give_valid_plans(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (d, rules) = random_graph(&mut r, 30, DType::I64);
        let g = build_graph(&d).unwrap();
        let plan = partition(&g, &rules).unwrap();
        prop_assert_eq!(validate_plan(&plan, &g), Ok(()));
        prop_assert_eq!(plan.rule_trace.len(), plan.len());

        let mut seen = vec![0usize; g.operators().len()];
        for sg in &plan.subgraphs {
            prop_assert!(!sg.ops.is_empty());
            for op in &sg.ops {
                seen[op.0] += 1;
                prop_assert_eq!(plan.subgraph_of(*op), sg.id);
            }
        }
        prop_assert!(seen.iter().all(|n| *n == 1));
        for (a, b) in &plan.sg_edges {
            prop_assert!(a < b, "edges follow the topological order");
        }
        prop_assert_eq!(partition(&g, &rules).unwrap(), plan);
    }

    #[test]
    fn no_rules_gives_one_subgraph(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (d, _) = random_graph(&mut r, 20, DType::I64);
        let g = build_graph(&d).unwrap();
        let plan = partition(&g, &[]).unwrap();
        prop_assert_eq!(plan.len(), 1);
        prop_assert!(plan.sg_edges.is_empty());
    }
}

fn chain(n: usize) -> GraphDescription {
    let mut d = GraphDescription::default();
    d.tensor("t0", &[4, 2], Batched, GraphInput);
    for i in 1..=n {
        d.tensor(&format!("t{i}"), &[4, 2], Batched, if i == n { GraphOutput } else { Intermediate });
    }
    for i in 0..n {
        let kind = if i % 2 == 0 { OperatorKind::RowScale } else { OperatorKind::AllReduce { world_size: 2 } };
        d.op(&format!("op{i}"), kind, &[&format!("t{i}")], &[&format!("t{}", i + 1)], &format!("layer{}.{}", i / 2, i % 2));
    }
    d
}

#[test]
fn module_rule_groups_each_instance() {
    let g = build_graph(&chain(6)).unwrap();
    let plan = partition(&g, &[PartitionRule::ByModule("layer*".into())]).unwrap();
    let labels: Vec<&str> = plan.subgraphs.iter().map(|s| s.label.as_str()).collect();
    assert_eq!(labels, ["layer0", "layer1", "layer2"]);
    assert_eq!(plan.sg_edges.len(), 2);
}

#[test]
fn func_rule_isolates_each_matching_operator() {
    let g = build_graph(&chain(6)).unwrap();
    let plan = partition(&g, &[PartitionRule::ByFunc("AllReduce".into())]).unwrap();
    assert_eq!(validate_plan(&plan, &g), Ok(()));
    let isolated = plan.subgraphs.iter().zip(&plan.rule_trace).filter(|(_, t)| t.is_some()).count();
    assert_eq!(isolated, 3);
}

#[test]
fn func_rule_carves_out_of_module() {
    let g = build_graph(&chain(4)).unwrap();
    let plan = partition(&g, &[PartitionRule::ByModule("layer*".into()), PartitionRule::ByFunc("RowScale".into())]).unwrap();
    assert_eq!(validate_plan(&plan, &g), Ok(()));
    assert_eq!(plan.len(), 4);
    assert_eq!(plan.rule_trace, [Some(1), Some(0), Some(1), Some(0)]);
}

#[test]
fn doubly_tagged_operator_is_rejected() {
    let mut d = chain(4);
    d.operators[0].region_tags.insert("a".into());
    d.operators[1].region_tags.insert("a".into());
    d.operators[1].region_tags.insert("b".into());
    let g = build_graph(&d).unwrap();
    let err = partition(&g, &[PartitionRule::ByRegion("a".into()), PartitionRule::ByRegion("b".into())]);
    assert!(matches!(err, Err(PartitionError::OverlappingRules { .. })), "{err:?}");
}

#[test]
fn broken_region_is_rejected() {
    let mut d = chain(4);
    d.operators[0].region_tags.insert("r".into());
    d.operators[2].region_tags.insert("r".into());
    let g = build_graph(&d).unwrap();
    let err = partition(&g, &[PartitionRule::ByRegion("r".into())]);
    assert!(matches!(err, Err(PartitionError::NonContiguousRegion { .. })), "{err:?}");
}

#[test]
fn empty_pattern_is_rejected() {
    let g = build_graph(&chain(2)).unwrap();
    assert!(matches!(partition(&g, &[PartitionRule::ByFunc(String::new())]), Err(PartitionError::EmptyRule(_))));
}

#[test]
fn interleaved_membership_is_a_cycle() {
    let g = build_graph(&chain(4)).unwrap();
    let plan = PartitionPlan::from_memberships(&g, vec![("a".into(), vec![OpId(0), OpId(2)]), ("b".into(), vec![OpId(1), OpId(3)])]);
    assert!(validate_plan(&plan, &g).is_err());
}

#[test]
fn missing_operator_is_reported() {
    let g = build_graph(&chain(3)).unwrap();
    let plan = PartitionPlan::from_memberships(&g, vec![("a".into(), vec![OpId(0), OpId(1)])]);
    assert!(matches!(validate_plan(&plan, &g), Err(PlanViolation::Unassigned(_))));
}

#[test]
fn cyclic_description_is_rejected() {
    let mut d = GraphDescription::default();
    d.tensor("a", &[4, 2], Batched, Intermediate);
    d.tensor("b", &[4, 2], Batched, GraphOutput);
    d.op("f", OperatorKind::RowScale, &["a"], &["b"], "m");
    d.op("g", OperatorKind::RowScale, &["b"], &["a"], "m");
    assert!(matches!(build_graph(&d), Err(GraphError::CycleDetected(_))));
}
