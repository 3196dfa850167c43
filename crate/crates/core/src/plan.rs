//! Query plan trees: nodes, predicates, traversals and closed subtrees.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The eight predicate cases a column slot can hold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PredicateCase {
    Join,
    Eq,
    Ne,
    Gt,
    Ge,
    Lt,
    Le,
    In,
}

impl PredicateCase {
    pub const ALL: [PredicateCase; 8] = [
        PredicateCase::Join,
        PredicateCase::Eq,
        PredicateCase::Ne,
        PredicateCase::Gt,
        PredicateCase::Ge,
        PredicateCase::Lt,
        PredicateCase::Le,
        PredicateCase::In,
    ];

    /// Position of this case in a column's 8-slot vector.
    pub fn slot(self) -> usize {
        self as usize
    }

    pub fn symbol(self) -> &'static str {
        match self {
            PredicateCase::Join => "join",
            PredicateCase::Eq => "=",
            PredicateCase::Ne => "!=",
            PredicateCase::Gt => ">",
            PredicateCase::Ge => ">=",
            PredicateCase::Lt => "<",
            PredicateCase::Le => "<=",
            PredicateCase::In => "in",
        }
    }

    pub fn from_symbol(s: &str) -> Option<Self> {
        Some(match s {
            "join" | "⋈" => PredicateCase::Join,
            "=" | "==" => PredicateCase::Eq,
            "!=" | "<>" | "≠" => PredicateCase::Ne,
            ">" => PredicateCase::Gt,
            ">=" | "≥" => PredicateCase::Ge,
            "<" => PredicateCase::Lt,
            "<=" | "≤" => PredicateCase::Le,
            "in" | "IN" => PredicateCase::In,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Operand {
    Number(f64),
    Text(String),
    /// Qualified `table.column` reference.
    Column(String),
    /// Literal list of a membership test.
    List(Vec<Operand>),
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredicateAtom {
    /// Qualified `table.column`.
    pub column: String,
    pub case: PredicateCase,
    pub operand: Operand,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanNode {
    pub node_id: usize,
    pub op_type: String,
    pub tables: Vec<String>,
    pub predicates: Vec<PredicateAtom>,
    /// Cumulative runtime of this node and its descendants, over all loops.
    pub actual_total_ms: f64,
    pub loop_count: u64,
    pub children: Vec<usize>,
}

impl PlanNode {
    pub fn new(node_id: usize, op_type: impl Into<String>) -> Self {
        Self {
            node_id,
            op_type: op_type.into(),
            tables: Vec::new(),
            predicates: Vec::new(),
            actual_total_ms: 0.0,
            loop_count: 1,
            children: Vec::new(),
        }
    }

    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }
}

/// A validated rooted operator tree; `nodes[i].node_id == i`.
/// A `(from, to)` pair of node ids.
pub type Edge = (usize, usize);

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlanTree {
    query_id: String,
    root: usize,
    nodes: Vec<PlanNode>,
    #[serde(skip)]
    parents: Vec<Option<usize>>,
}

impl<'de> Deserialize<'de> for PlanTree {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> core::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            query_id: String,
            nodes: Vec<PlanNode>,
        }
        let raw = Raw::deserialize(d)?;
        PlanTree::new(raw.query_id, raw.nodes).map_err(serde::de::Error::custom)
    }
}

impl PlanTree {
    /// Validates that `nodes` form one rooted tree with ids `0..n`.
    pub fn new(query_id: impl Into<String>, nodes: Vec<PlanNode>) -> Result<Self> {
        let n = nodes.len();
        if n == 0 {
            return Err(Error::Structure("plan has no nodes".into()));
        }
        for (i, node) in nodes.iter().enumerate() {
            if node.node_id != i {
                return Err(Error::Structure(format!(
                    "node ids must be contiguous: position {i} holds id {}",
                    node.node_id
                )));
            }
            if !(node.actual_total_ms >= 0.0) || !node.actual_total_ms.is_finite() {
                return Err(Error::Structure(format!(
                    "node {i} has invalid runtime {}",
                    node.actual_total_ms
                )));
            }
            if node.loop_count == 0 {
                return Err(Error::Structure(format!("node {i} has zero loops")));
            }
        }
        let mut parents = vec![None; n];
        for node in &nodes {
            for &c in &node.children {
                if c >= n {
                    return Err(Error::Structure(format!(
                        "node {} references missing child {c}",
                        node.node_id
                    )));
                }
                if c == node.node_id {
                    return Err(Error::Structure(format!("node {c} is its own child")));
                }
                if let Some(p) = parents[c] {
                    return Err(Error::Structure(format!(
                        "node {c} has two parents ({p} and {})",
                        node.node_id
                    )));
                }
                parents[c] = Some(node.node_id);
            }
        }
        let roots: Vec<usize> = (0..n).filter(|&i| parents[i].is_none()).collect();
        match roots.as_slice() {
            [] => return Err(Error::Structure("child references form a cycle".into())),
            [_] => {}
            many => {
                return Err(Error::Structure(format!(
                    "plan has {} roots: {many:?}",
                    many.len()
                )))
            }
        }
        let root = roots[0];
        // Every node must be reachable from the root, otherwise a cycle hangs off it.
        let mut seen = vec![false; n];
        let mut stack = vec![root];
        let mut reached = 0;
        while let Some(v) = stack.pop() {
            if seen[v] {
                return Err(Error::Structure("child references form a cycle".into()));
            }
            seen[v] = true;
            reached += 1;
            stack.extend(nodes[v].children.iter().copied());
        }
        if reached != n {
            return Err(Error::Structure("child references form a cycle".into()));
        }
        Ok(Self {
            query_id: query_id.into(),
            root,
            nodes,
            parents,
        })
    }

    pub fn query_id(&self) -> &str {
        &self.query_id
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[PlanNode] {
        &self.nodes
    }

    pub fn node(&self, id: usize) -> &PlanNode {
        &self.nodes[id]
    }

    pub fn parent(&self, id: usize) -> Option<usize> {
        self.parents[id]
    }

    pub fn children(&self, id: usize) -> &[usize] {
        &self.nodes[id].children
    }

    pub fn root_runtime_ms(&self) -> f64 {
        self.nodes[self.root].actual_total_ms
    }

    /// Replaces per-node runtimes, keeping the structure.
    pub fn with_runtimes(mut self, runtimes: &[f64]) -> Self {
        assert_eq!(runtimes.len(), self.nodes.len());
        for (n, &t) in self.nodes.iter_mut().zip(runtimes) {
            n.actual_total_ms = t;
        }
        self
    }

    /// Children before parents, siblings in stored order, root last.
    pub fn postorder(&self) -> Vec<usize> {
        self.postorder_from(self.root)
    }

    /// Postorder of the subtree rooted at `start`.
    pub fn postorder_from(&self, start: usize) -> Vec<usize> {
        let mut out = Vec::new();
        // (node, next child index)
        let mut stack: Vec<(usize, usize)> = vec![(start, 0)];
        while let Some(top) = stack.last_mut() {
            let (v, next) = *top;
            if let Some(&c) = self.nodes[v].children.get(next) {
                top.1 += 1;
                stack.push((c, 0));
            } else {
                out.push(v);
                stack.pop();
            }
        }
        out
    }

    /// `(parent, child)` edges in preorder, and the same edges reversed.
    pub fn directed_edge_views(&self) -> (Vec<Edge>, Vec<Edge>) {
        let mut down = Vec::with_capacity(self.nodes.len().saturating_sub(1));
        let mut stack = vec![self.root];
        while let Some(v) = stack.pop() {
            for &c in &self.nodes[v].children {
                down.push((v, c));
            }
            stack.extend(self.nodes[v].children.iter().rev().copied());
        }
        let up = down.iter().map(|&(p, c)| (c, p)).collect();
        (down, up)
    }

    /// Closed subtree rooted at `id`.
    pub fn subtree(&self, id: usize) -> SubtreeRef {
        let mut members = self.postorder_from(id);
        members.sort_unstable();
        SubtreeRef {
            root_node_id: id,
            member_ids: members,
        }
    }

    /// One closed subtree per eligible node, in postorder of their roots.
    ///
    /// Without `include_leaves`, only internal nodes (and the root, even when
    /// it is the only node) root a subtree.
    pub fn extract_subtrees(&self, include_leaves: bool) -> Vec<SubtreeRef> {
        self.postorder()
            .into_iter()
            .filter(|&v| include_leaves || !self.nodes[v].is_leaf() || v == self.root)
            .map(|v| self.subtree(v))
            .collect()
    }

    /// Ratio of the subtree's runtime to the plan's runtime.
    ///
    /// Values above one (possible with parallel workers in real traces) are
    /// clamped; see [`actual_contribution_unclamped`](Self::actual_contribution_unclamped).
    pub fn actual_contribution(&self, st: &SubtreeRef) -> Result<f64> {
        Ok(self.actual_contribution_unclamped(st)?.clamp(0.0, 1.0))
    }

    pub fn actual_contribution_unclamped(&self, st: &SubtreeRef) -> Result<f64> {
        if st.root_node_id >= self.nodes.len() {
            return Err(Error::Structure(format!(
                "subtree root {} is not in the plan",
                st.root_node_id
            )));
        }
        let total = self.root_runtime_ms();
        if !(total > 0.0) {
            return Err(Error::Label(format!(
                "plan {} has zero root runtime",
                self.query_id
            )));
        }
        if st.root_node_id == self.root {
            return Ok(1.0);
        }
        Ok(self.nodes[st.root_node_id].actual_total_ms / total)
    }

    /// Node ids of the subtree rooted at `id`, in postorder.
    pub fn descendants_postorder(&self, id: usize) -> Vec<usize> {
        self.postorder_from(id)
    }

    /// Same tree with node ids renumbered by `perm[old] = new`; child order kept.
    pub fn relabel(&self, perm: &[usize]) -> Result<Self> {
        assert_eq!(perm.len(), self.nodes.len());
        let mut nodes: Vec<Option<PlanNode>> = vec![None; self.nodes.len()];
        for (old, node) in self.nodes.iter().enumerate() {
            let mut n = node.clone();
            n.node_id = perm[old];
            n.children = node.children.iter().map(|&c| perm[c]).collect();
            nodes[perm[old]] = Some(n);
        }
        let nodes = nodes
            .into_iter()
            .map(|n| n.ok_or_else(|| Error::Structure("relabeling is not a permutation".into())))
            .collect::<Result<Vec<_>>>()?;
        PlanTree::new(self.query_id.clone(), nodes)
    }

    /// All tables referenced anywhere in the plan.
    pub fn all_tables(&self) -> BTreeSet<&str> {
        self.nodes
            .iter()
            .flat_map(|n| n.tables.iter().map(String::as_str))
            .collect()
    }
}

/// A node together with all of its descendants.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubtreeRef {
    pub root_node_id: usize,
    /// Sorted ascending.
    pub member_ids: Vec<usize>,
}

impl SubtreeRef {
    pub fn len(&self) -> usize {
        self.member_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.member_ids.is_empty()
    }

    pub fn contains(&self, id: usize) -> bool {
        self.member_ids.binary_search(&id).is_ok()
    }
}

/// Alternative plans for one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePlanSet {
    pub query_id: String,
    pub plans: Vec<PlanTree>,
}

impl CandidatePlanSet {
    pub fn new(query_id: impl Into<String>, plans: Vec<PlanTree>) -> Result<Self> {
        let query_id = query_id.into();
        if plans.is_empty() {
            return Err(Error::Empty("candidate set has no plans"));
        }
        if let Some(p) = plans.iter().find(|p| p.query_id() != query_id) {
            return Err(Error::Structure(format!(
                "plan for query {} placed in candidate set {query_id}",
                p.query_id()
            )));
        }
        Ok(Self { query_id, plans })
    }

    /// Root runtimes of every candidate.
    pub fn runtimes(&self) -> Vec<f64> {
        self.plans.iter().map(PlanTree::root_runtime_ms).collect()
    }

    /// Lowest candidate runtime.
    pub fn optimal_runtime(&self) -> f64 {
        self.runtimes().into_iter().fold(f64::INFINITY, f64::min)
    }
}

/// Test and generator helper: builds a tree from `(op_type, children)` pairs.
pub fn tree_from_shape(query_id: &str, shape: &[(&str, &[usize])]) -> Result<PlanTree> {
    let nodes = shape
        .iter()
        .enumerate()
        .map(|(i, (op, children))| {
            let mut n = PlanNode::new(i, *op);
            n.children = children.to_vec();
            n
        })
        .collect();
    PlanTree::new(query_id, nodes)
}

#[cfg(test)]
mod tests {
    use super::*;

    // A(B, C(D, E)) with ids A=0, B=1, C=2, D=3, E=4.
    fn sample() -> PlanTree {
        tree_from_shape(
            "q",
            &[
                ("A", &[1, 2]),
                ("B", &[]),
                ("C", &[3, 4]),
                ("D", &[]),
                ("E", &[]),
            ],
        )
        .unwrap()
    }

    #[test]
    fn postorder_examples() {
        let single = tree_from_shape("q", &[("A", &[])]).unwrap();
        assert_eq!(single.postorder(), vec![0]);
        assert_eq!(sample().postorder(), vec![1, 3, 4, 2, 0]);
        let chain = tree_from_shape("q", &[("A", &[1]), ("B", &[2]), ("C", &[])]).unwrap();
        assert_eq!(chain.postorder(), vec![2, 1, 0]);
    }

    #[test]
    fn edge_views() {
        let single = tree_from_shape("q", &[("A", &[])]).unwrap();
        assert_eq!(single.directed_edge_views(), (vec![], vec![]));
        let t = tree_from_shape("q", &[("A", &[1, 2]), ("B", &[]), ("C", &[])]).unwrap();
        let (down, up) = t.directed_edge_views();
        assert_eq!(down, vec![(0, 1), (0, 2)]);
        assert_eq!(up, vec![(1, 0), (2, 0)]);
        assert_eq!(sample().directed_edge_views().0.len(), 4);
    }

    #[test]
    fn subtree_extraction_examples() {
        let t = sample();
        let roots: Vec<usize> = t
            .extract_subtrees(true)
            .iter()
            .map(|s| s.root_node_id)
            .collect();
        assert_eq!(roots.len(), 5);
        let mut sorted = roots.clone();
        sorted.sort();
        assert_eq!(sorted, vec![0, 1, 2, 3, 4]);
        let roots: Vec<usize> = t
            .extract_subtrees(false)
            .iter()
            .map(|s| s.root_node_id)
            .collect();
        assert_eq!(roots, vec![2, 0]);
        assert_eq!(t.subtree(2).member_ids, vec![2, 3, 4]);
        assert_eq!(t.subtree(0).member_ids, vec![0, 1, 2, 3, 4]);

        let single = tree_from_shape("q", &[("A", &[])]).unwrap();
        assert_eq!(single.extract_subtrees(false).len(), 1);
    }

    #[test]
    fn actual_contribution_examples() {
        let t = sample().with_runtimes(&[10.0, 3.0, 4.0, 1.0, 0.0]);
        assert_eq!(t.actual_contribution(&t.subtree(0)).unwrap(), 1.0);
        assert!((t.actual_contribution(&t.subtree(2)).unwrap() - 0.4).abs() < 1e-15);
        assert_eq!(t.actual_contribution(&t.subtree(4)).unwrap(), 0.0);

        let zero = sample();
        assert!(matches!(
            zero.actual_contribution(&zero.subtree(2)),
            Err(Error::Label(_))
        ));

        // Child slower than its parent: clamped to one.
        let odd = sample().with_runtimes(&[10.0, 3.0, 12.0, 1.0, 0.0]);
        assert_eq!(odd.actual_contribution(&odd.subtree(2)).unwrap(), 1.0);
        assert!((odd.actual_contribution_unclamped(&odd.subtree(2)).unwrap() - 1.2).abs() < 1e-12);
    }

    #[test]
    fn structure_errors() {
        let cyc = tree_from_shape("q", &[("A", &[1]), ("B", &[2]), ("C", &[1])]);
        assert!(matches!(cyc, Err(Error::Structure(_))));
        let full_cycle = tree_from_shape("q", &[("A", &[1]), ("B", &[0])]);
        assert!(matches!(full_cycle, Err(Error::Structure(_))));
        let two_roots = tree_from_shape("q", &[("A", &[]), ("B", &[])]);
        assert!(matches!(two_roots, Err(Error::Structure(_))));
        let dangling = tree_from_shape("q", &[("A", &[5])]);
        assert!(matches!(dangling, Err(Error::Structure(_))));
        assert!(PlanTree::new("q", vec![]).is_err());
    }

    #[test]
    fn relabel_preserves_shape() {
        let t = sample();
        let r = t.relabel(&[4, 0, 3, 1, 2]).unwrap();
        assert_eq!(r.root(), 4);
        assert_eq!(r.children(4), &[0, 3]);
        assert_eq!(r.postorder(), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn candidate_set_checks() {
        assert!(CandidatePlanSet::new("q", vec![]).is_err());
        let other = tree_from_shape("z", &[("A", &[])]).unwrap();
        assert!(CandidatePlanSet::new("q", vec![other]).is_err());
    }
}
