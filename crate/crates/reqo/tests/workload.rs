use std::fs;

use proptest::prelude::*;
use reqo::ingest::{write_candidate_sets, write_catalog, Ingestor};
use reqo::{Oracle, OracleConfig};
use reqo_core::metrics::plan_suboptimality;
use reqo_core::PlanTree;

fn oracle(seed: u64, queries: usize, noise: f64) -> Oracle {
    Oracle::new(OracleConfig {
        seed,
        num_queries: queries,
        noise_sigma: noise,
        ..OracleConfig::default()
    })
    .unwrap()
}

fn local_times(tree: &PlanTree) -> Vec<f64> {
    (0..tree.len())
        .map(|v| {
            tree.node(v).actual_total_ms
                - tree
                    .children(v)
                    .iter()
                    .map(|&c| tree.node(c).actual_total_ms)
                    .sum::<f64>()
        })
        .collect()
}

#[test]
fn one_query_two_plans() {
    let o = Oracle::new(OracleConfig {
        num_queries: 1,
        plans_per_query: 2,
        ..OracleConfig::default()
    })
    .unwrap();
    let sets = o.generate_workload().unwrap();
    assert_eq!(sets.len(), 1);
    assert_eq!(sets[0].plans.len(), 2);
    assert!(sets[0].plans.iter().all(|p| p.root_runtime_ms() > 0.0));
}

#[test]
fn same_seed_writes_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a", "b"] {
        let o = oracle(5, 30, 0.3);
        let sets = o.generate_workload().unwrap();
        write_candidate_sets(&dir.path().join(format!("{name}.jsonl")), &sets).unwrap();
        write_catalog(&dir.path().join(format!("{name}.json")), &o.catalog).unwrap();
    }
    let read = |f: &str| fs::read(dir.path().join(f)).unwrap();
    assert_eq!(read("a.jsonl"), read("b.jsonl"));
    assert_eq!(read("a.json"), read("b.json"));

    let other = oracle(6, 30, 0.3).generate_workload().unwrap();
    write_candidate_sets(&dir.path().join("c.jsonl"), &other).unwrap();
    assert_ne!(read("a.jsonl"), read("c.jsonl"));
}

#[test]
fn written_workload_reads_back_equal() {
    let dir = tempfile::tempdir().unwrap();
    let o = oracle(8, 20, 0.0);
    let sets = o.generate_workload().unwrap();
    let path = dir.path().join("w.jsonl");
    write_candidate_sets(&path, &sets).unwrap();
    let back = Ingestor::new(o.catalog.clone(), true)
        .read_candidate_sets(&path)
        .unwrap();
    assert_eq!(back.len(), sets.len());
    for (a, b) in sets.iter().zip(&back) {
        assert_eq!(a.query_id, b.query_id);
        for (p, q) in a.plans.iter().zip(&b.plans) {
            assert_eq!(p.len(), q.len());
            assert_eq!(p.postorder(), q.postorder());
            for v in 0..p.len() {
                let (x, y) = (p.node(v), q.node(v));
                assert_eq!(x.op_type, y.op_type);
                assert_eq!(x.predicates, y.predicates);
                assert!((x.actual_total_ms - y.actual_total_ms).abs() <= 1e-9 * x.actual_total_ms);
            }
        }
    }
}

#[test]
fn noiseless_best_label_is_optimal() {
    let sets = oracle(9, 50, 0.0).generate_workload().unwrap();
    for s in &sets {
        let rt = s.runtimes();
        let best = rt.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(
            plan_suboptimality(&[best], &[s.optimal_runtime()]).unwrap(),
            vec![1.0]
        );
    }
}

#[test]
fn trees_respect_size_bounds() {
    let o = Oracle::new(OracleConfig {
        num_queries: 100,
        min_nodes: 3,
        max_nodes: 20,
        ..OracleConfig::default()
    })
    .unwrap();
    for s in o.generate_workload().unwrap() {
        for p in &s.plans {
            assert!((3..=20).contains(&p.len()), "plan of {} nodes", p.len());
            for &t in &p.all_tables() {
                assert!(o.catalog.table_index(t).is_some());
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn noiseless_labels_are_additive(seed in any::<u64>()) {
        let o = oracle(seed, 3, 0.0);
        for s in o.generate_workload().unwrap() {
            for p in &s.plans {
                let local = local_times(p);
                prop_assert!(local.iter().all(|&l| l > 0.0));
                let share: f64 = local.iter().sum::<f64>() / p.root_runtime_ms();
                prop_assert!((share - 1.0).abs() < 1e-9);
                for (v, &lv) in local.iter().enumerate() {
                    for &c in p.children(v) {
                        prop_assert!(p.node(v).actual_total_ms >= p.node(c).actual_total_ms);
                    }
                    // each local time is the oracle's cost of that node alone
                    let expected = o.local_cost(p.node(v)).unwrap();
                    prop_assert!((lv - expected).abs() <= 1e-9 * expected.max(1.0));
                }
            }
        }
    }

    #[test]
    fn generation_is_a_function_of_the_config(seed in any::<u64>()) {
        let a = oracle(seed, 4, 0.5).generate_workload().unwrap();
        let b = oracle(seed, 4, 0.5).generate_workload().unwrap();
        prop_assert_eq!(a, b);
    }
}

const EXPLAIN: &str = r#"[{"query_id": "q7", "Plan": {
  "Node Type": "Hash Join", "Actual Total Time": 12.5, "Actual Loops": 1,
  "Hash Cond": "(t0.c0 = t1.c1)",
  "Plans": [
    {"Node Type": "Seq Scan", "Relation Name": "t0", "Actual Total Time": 4.0, "Actual Loops": 1,
     "Filter": "((c2 > 10::numeric) AND (c3 = 'abc'::text))"},
    {"Node Type": "Hash", "Actual Total Time": 3.0, "Actual Loops": 1,
     "Plans": [{"Node Type": "Index Scan", "Relation Name": "t1", "Actual Total Time": 0.5,
                "Actual Loops": 4, "Index Cond": "(c0 < 50)"}]}
  ]}}]"#;

#[test]
fn explain_output_parses() {
    let catalog = oracle(0, 1, 0.0).catalog;
    let mut ing = Ingestor::new(catalog, true);
    let tree = ing.parse_plan_document(EXPLAIN).unwrap();
    assert_eq!(tree.len(), 4);
    let root = tree.node(tree.root());
    assert_eq!(root.op_type, "Hash Join");
    assert_eq!(root.actual_total_ms, 12.5);
    let scan = tree
        .nodes()
        .iter()
        .find(|n| n.op_type == "Seq Scan")
        .unwrap();
    assert_eq!(scan.tables, vec!["t0".to_string()]);
    assert_eq!(scan.predicates.len(), 2);
    let index = tree
        .nodes()
        .iter()
        .find(|n| n.op_type == "Index Scan")
        .unwrap();
    // per-loop time times loop count
    assert_eq!(index.actual_total_ms, 2.0);
    assert_eq!(index.predicates[0].column, "t1.c0");
}

#[test]
fn strict_ingest_rejects_unknown_operators() {
    let catalog = oracle(0, 1, 0.0).catalog;
    let doc =
        r#"{"query_id": "q", "Plan": {"Node Type": "Quantum Scan", "Actual Total Time": 1.0}}"#;
    assert!(Ingestor::new(catalog.clone(), true)
        .parse_plan_document(doc)
        .is_err());
    let mut lenient = Ingestor::new(catalog, false);
    let t = lenient.parse_plan_document(doc).unwrap();
    assert_eq!(t.node(0).op_type, "Quantum Scan");
}
