use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reqo_core::explainer::node_operation_contributions;
use reqo_core::metrics::{partition_min_subgraphs, q_error, spearman, subgraph_contributions};
use reqo_core::scaler::LabelScaler;
use reqo_core::{PlanNode, PlanTree};

/// Random tree with `n` nodes and shuffled ids.
fn random_tree(n: usize, seed: u64) -> PlanTree {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(&mut rng);
    let mut nodes: Vec<PlanNode> = (0..n).map(|i| PlanNode::new(i, "Op")).collect();
    for k in 1..n {
        let parent = ids[rng.random_range(0..k)];
        nodes[parent].children.push(ids[k]);
    }
    PlanTree::new("q", nodes).unwrap()
}

fn recursive_postorder(tree: &PlanTree, v: usize, out: &mut Vec<usize>) {
    for &c in tree.children(v) {
        recursive_postorder(tree, c, out);
    }
    out.push(v);
}

fn is_ancestor_or_self(tree: &PlanTree, a: usize, mut v: usize) -> bool {
    loop {
        if v == a {
            return true;
        }
        match tree.parent(v) {
            Some(p) => v = p,
            None => return false,
        }
    }
}

fn arb_tree(max: usize) -> impl Strategy<Value = PlanTree> {
    (1..=max, any::<u64>()).prop_map(|(n, s)| random_tree(n, s))
}

proptest! {
    #[test]
    fn postorder_matches_recursion(tree in arb_tree(24)) {
        let mut expected = Vec::new();
        recursive_postorder(&tree, tree.root(), &mut expected);
        prop_assert_eq!(tree.postorder(), expected);
    }

    #[test]
    fn subtrees_are_descendant_closures(tree in arb_tree(16)) {
        for st in tree.extract_subtrees(true) {
            let expected: Vec<usize> = (0..tree.len())
                .filter(|&u| is_ancestor_or_self(&tree, st.root_node_id, u))
                .collect();
            prop_assert_eq!(&st.member_ids, &expected);
        }
        let internal = tree.extract_subtrees(false);
        let expected_roots: BTreeSet<usize> = (0..tree.len())
            .filter(|&v| v == tree.root() || !tree.node(v).is_leaf())
            .collect();
        let roots: BTreeSet<usize> = internal.iter().map(|s| s.root_node_id).collect();
        prop_assert_eq!(roots, expected_roots);
    }

    #[test]
    fn edge_views_are_mirror_images(tree in arb_tree(20)) {
        let (down, up) = tree.directed_edge_views();
        prop_assert_eq!(down.len(), tree.len() - 1);
        for (&(p, c), &(c2, p2)) in down.iter().zip(&up) {
            prop_assert_eq!((p, c), (p2, c2));
            prop_assert_eq!(tree.parent(c), Some(p));
        }
    }

    #[test]
    fn operator_contributions_sum_to_root(tree in arb_tree(32), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ec: BTreeMap<usize, f64> =
            (0..tree.len()).map(|v| (v, rng.random_range(0.0..1.0))).collect();
        let ops = node_operation_contributions(&tree, &ec).unwrap();
        let total: f64 = ops.iter().map(|o| o.value).sum();
        prop_assert!((total - ec[&tree.root()]).abs() <= 1e-12);
    }

    #[test]
    fn partition_matches_parent_assignment(tree in arb_tree(10)) {
        // a leaf other than the root belongs to its parent's group
        let mut groups: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
        for v in 0..tree.len() {
            let owner = if v != tree.root() && tree.node(v).is_leaf() {
                tree.parent(v).unwrap()
            } else {
                v
            };
            groups.entry(owner).or_default().insert(v);
        }
        let got: BTreeMap<usize, BTreeSet<usize>> = partition_min_subgraphs(&tree)
            .into_iter()
            .map(|s| (s.root, s.members.into_iter().collect()))
            .collect();
        prop_assert_eq!(got, groups);
    }

    #[test]
    fn subgraph_values_sum_member_operators(tree in arb_tree(12), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ec: BTreeMap<usize, f64> =
            (0..tree.len()).map(|v| (v, rng.random_range(0.0..1.0))).collect();
        let ops: BTreeMap<usize, f64> = node_operation_contributions(&tree, &ec)
            .unwrap()
            .into_iter()
            .map(|o| (o.node_id, o.value))
            .collect();
        let by_group = subgraph_contributions(&tree, &ec).unwrap();
        for s in partition_min_subgraphs(&tree) {
            let expected: f64 = s.members.iter().map(|m| ops[m]).sum();
            prop_assert!((by_group[&s.root] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn q_error_symmetric_and_at_least_one(a in 1e-6f64..1e6, b in 1e-6f64..1e6) {
        let q = q_error(a, b).unwrap();
        prop_assert!(q >= 1.0);
        prop_assert_eq!(q, q_error(b, a).unwrap());
    }

    #[test]
    fn scaling_round_trips(y in 0.01f64..1e5) {
        let s = LabelScaler::new(0.01, 1e5).unwrap();
        let back = s.unscale_runtime(s.scale_runtime(y).unwrap());
        prop_assert!(((back - y) / y).abs() <= 1e-9);
    }

    #[test]
    fn relabeling_keeps_structure(tree in arb_tree(16), seed in any::<u64>()) {
        let mut perm: Vec<usize> = (0..tree.len()).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let t2 = tree.relabel(&perm).unwrap();
        prop_assert_eq!(t2.root(), perm[tree.root()]);
        let mapped: Vec<usize> = tree.postorder().into_iter().map(|v| perm[v]).collect();
        prop_assert_eq!(t2.postorder(), mapped);
    }
}

fn spearman_by_permutations(x: &[f64], y: &[f64]) -> f64 {
    // distinct values: rank = position in sorted order
    let rank = |v: &[f64]| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        for (pos, &i) in idx.iter().enumerate() {
            r[i] = pos as f64;
        }
        r
    };
    let (rx, ry) = (rank(x), rank(y));
    let n = x.len() as f64;
    let d2: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - b) * (a - b)).sum();
    1.0 - 6.0 * d2 / (n * (n * n - 1.0))
}

proptest! {
    #[test]
    fn spearman_matches_rank_difference_formula(
        x in prop::collection::hash_set(0u32..1000, 3..12),
        seed in any::<u64>(),
    ) {
        let x: Vec<f64> = x.into_iter().map(f64::from).collect();
        let mut y = x.clone();
        y.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let got = spearman(&x, &y).unwrap();
        prop_assert!((got - spearman_by_permutations(&x, &y)).abs() < 1e-12);
    }
}
