//! Synthetic candidate-plan workloads labeled by an additive cost oracle.
//!
//! Each node's local cost is
//! `base(op) * (1 + sum of its predicate values) * (sum of its table sizes) * time_scale`
//! and its recorded runtime is its local cost plus its children's runtimes.
//! Predicate values are the same normalized literals the encoder sees.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use reqo_core::encoder::{
    normalize_value, text_to_numeric, Catalog, ColumnDef, ColumnKind, TableDef,
};
use reqo_core::plan::{
    CandidatePlanSet, Operand, PlanNode, PlanTree, PredicateAtom, PredicateCase,
};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SCAN_OPS: [&str; 3] = ["Seq Scan", "Index Scan", "Bitmap Heap Scan"];
pub const JOIN_OPS: [&str; 3] = ["Hash Join", "Merge Join", "Nested Loop"];
pub const UNARY_OPS: [&str; 4] = ["Hash", "Sort", "Aggregate", "Materialize"];

fn default_base_costs() -> BTreeMap<String, f64> {
    [
        ("Seq Scan", 1.0),
        ("Index Scan", 0.4),
        ("Bitmap Heap Scan", 0.6),
        ("Hash Join", 1.5),
        ("Merge Join", 1.2),
        ("Nested Loop", 2.5),
        ("Hash", 0.3),
        ("Sort", 0.8),
        ("Aggregate", 0.5),
        ("Materialize", 0.2),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleConfig {
    pub seed: u64,
    pub num_queries: usize,
    pub plans_per_query: usize,
    pub min_nodes: usize,
    pub max_nodes: usize,
    pub num_tables: usize,
    pub columns_per_table: usize,
    pub max_filters_per_table: usize,
    pub base_costs: BTreeMap<String, f64>,
    /// Sigma of the lognormal multiplier on each local cost; 0 disables noise.
    pub noise_sigma: f64,
    pub time_scale: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_queries: 100,
            plans_per_query: 5,
            min_nodes: 3,
            max_nodes: 20,
            num_tables: 8,
            columns_per_table: 4,
            max_filters_per_table: 2,
            base_costs: default_base_costs(),
            noise_sigma: 0.0,
            time_scale: 1.0,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("oracle config: {m}")));
        if self.plans_per_query < 2 {
            return bad("plans_per_query must be at least 2");
        }
        if self.min_nodes < 1 || self.min_nodes > self.max_nodes {
            return bad("need 1 <= min_nodes <= max_nodes");
        }
        if self.num_tables == 0 || self.columns_per_table == 0 {
            return bad("need at least one table and one column per table");
        }
        if !(self.noise_sigma >= 0.0) || !(self.time_scale > 0.0) {
            return bad("noise_sigma must be nonnegative and time_scale positive");
        }
        if let Some((op, c)) = self.base_costs.iter().find(|(_, &c)| !(c > 0.0)) {
            return bad(&format!("base cost of '{op}' is {c}"));
        }
        Ok(())
    }
}

/// Catalog and table sizes of a generated database; a pure function of the config.
#[derive(Debug, Clone, PartialEq)]
pub struct Oracle {
    pub config: OracleConfig,
    pub catalog: Catalog,
    pub table_sizes: BTreeMap<String, f64>,
}

impl Oracle {
    pub fn new(config: OracleConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7ab1_e5eed);
        let tables: Vec<TableDef> = (0..config.num_tables)
            .map(|t| TableDef {
                name: format!("t{t}"),
                columns: (0..config.columns_per_table)
                    .map(|c| ColumnDef {
                        name: format!("c{c}"),
                        kind: if c % 4 == 3 {
                            ColumnKind::Text
                        } else {
                            ColumnKind::Numeric {
                                min: 0.0,
                                max: 100.0,
                            }
                        },
                    })
                    .collect(),
            })
            .collect();
        let (lo, hi) = (0.5f64.ln(), 20.0f64.ln());
        let table_sizes = tables
            .iter()
            .map(|t| (t.name.clone(), rng.random_range(lo..hi).exp()))
            .collect();
        let mut node_types: Vec<String> = SCAN_OPS
            .iter()
            .chain(&JOIN_OPS)
            .chain(&UNARY_OPS)
            .map(|s| s.to_string())
            .collect();
        for op in config.base_costs.keys() {
            if !node_types.contains(op) {
                node_types.push(op.clone());
            }
        }
        let catalog = Catalog::new(node_types, tables)?;
        Ok(Self {
            config,
            catalog,
            table_sizes,
        })
    }

    fn predicate_value(&self, p: &PredicateAtom) -> f64 {
        match p.case {
            PredicateCase::Join | PredicateCase::In => 1.0,
            _ => match (
                &p.operand,
                self.catalog.column(&p.column).map(|c| &c.def.kind),
            ) {
                (Operand::Number(v), Some(ColumnKind::Numeric { min, max })) => {
                    normalize_value(*v, *min, *max)
                }
                (Operand::Text(s), _) => text_to_numeric(s),
                _ => 0.0,
            },
        }
    }

    /// Noise-free local cost of one node.
    pub fn local_cost(&self, node: &PlanNode) -> Result<f64> {
        let base = self.config.base_costs.get(&node.op_type).ok_or_else(|| {
            Error::Config(format!("no base cost for operator '{}'", node.op_type))
        })?;
        let preds: f64 = node
            .predicates
            .iter()
            .map(|p| self.predicate_value(p))
            .sum();
        let size: f64 = if node.tables.is_empty() {
            1.0
        } else {
            node.tables
                .iter()
                .map(|t| self.table_sizes.get(t).copied().unwrap_or(1.0))
                .sum()
        };
        Ok(base * (1.0 + preds) * size * self.config.time_scale)
    }

    /// Cumulative runtime of every node (indexed by node id). With `noise`,
    /// each local cost is multiplied by an independent lognormal draw.
    pub fn oracle_cost(
        &self,
        tree: &PlanTree,
        noise: Option<&mut dyn rand::RngCore>,
    ) -> Result<Vec<f64>> {
        let locals = tree
            .nodes()
            .iter()
            .map(|n| self.local_cost(n))
            .collect::<Result<Vec<_>>>()?;
        let multipliers: Vec<f64> = match noise {
            Some(rng) if self.config.noise_sigma > 0.0 => {
                let d = LogNormal::new(0.0, self.config.noise_sigma).expect("sigma is positive");
                tree.postorder().iter().map(|_| d.sample(rng)).collect()
            }
            _ => vec![1.0; tree.len()],
        };
        let mut total = vec![0.0; tree.len()];
        for (k, id) in tree.postorder().into_iter().enumerate() {
            total[id] = locals[id] * multipliers[k]
                + tree.children(id).iter().map(|&c| total[c]).sum::<f64>();
        }
        Ok(total)
    }

    /// Candidate sets for `num_queries` random queries.
    pub fn generate_workload(&self) -> Result<Vec<CandidatePlanSet>> {
        let cfg = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        (0..cfg.num_queries)
            .map(|q| {
                let query = self.sample_query(&mut rng);
                let query_id = format!("q{q:05}");
                let plans = (0..cfg.plans_per_query)
                    .map(|_| {
                        let shape = self.sample_variant(&query, &mut rng);
                        let tree = self.materialize(&query_id, &shape, &query)?;
                        let times = self.oracle_cost(&tree, Some(&mut rng))?;
                        Ok(tree.with_runtimes(&times))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(CandidatePlanSet::new(query_id, plans)?)
            })
            .collect()
    }

    fn sample_query(&self, rng: &mut ChaCha8Rng) -> Query {
        let cfg = &self.config;
        let k_max = cfg.max_nodes.div_ceil(2).min(cfg.num_tables).max(1);
        let k_min = if cfg.max_nodes >= 3 { 2.min(k_max) } else { 1 };
        let k = rng.random_range(k_min..=k_max);
        let mut tables: Vec<usize> = (0..cfg.num_tables).collect();
        tables.shuffle(rng);
        tables.truncate(k);

        let numeric: Vec<usize> = (0..cfg.columns_per_table).filter(|c| c % 4 != 3).collect();
        let mut filters = BTreeMap::new();
        for &t in &tables {
            let n = rng.random_range(0..=cfg.max_filters_per_table);
            let atoms: Vec<PredicateAtom> = (0..n)
                .map(|_| {
                    let c = rng.random_range(0..cfg.columns_per_table);
                    let column = format!("t{t}.c{c}");
                    if c % 4 == 3 {
                        let word = format!("w{}", rng.random_range(0..50));
                        let case = *[PredicateCase::Eq, PredicateCase::Ne]
                            .choose(rng)
                            .expect("nonempty");
                        PredicateAtom {
                            column,
                            case,
                            operand: Operand::Text(word),
                        }
                    } else {
                        let case = *[
                            PredicateCase::Eq,
                            PredicateCase::Ne,
                            PredicateCase::Gt,
                            PredicateCase::Ge,
                            PredicateCase::Lt,
                            PredicateCase::Le,
                            PredicateCase::In,
                        ]
                        .choose(rng)
                        .expect("nonempty");
                        let operand = if case == PredicateCase::In {
                            Operand::List(
                                (0..rng.random_range(2..5))
                                    .map(|_| Operand::Number(rng.random_range(0..100) as f64))
                                    .collect(),
                            )
                        } else {
                            Operand::Number((rng.random_range(0.0..100.0f64) * 10.0).round() / 10.0)
                        };
                        PredicateAtom {
                            column,
                            case,
                            operand,
                        }
                    }
                })
                .collect();
            filters.insert(t, atoms);
        }
        // spanning tree of join predicates over the chosen tables
        let mut joins = Vec::new();
        for i in 1..tables.len() {
            let j = rng.random_range(0..i);
            let (a, b) = (tables[i], tables[j]);
            let ca = numeric.choose(rng).copied().unwrap_or(0);
            let cb = numeric.choose(rng).copied().unwrap_or(0);
            joins.push((
                a,
                b,
                PredicateAtom {
                    column: format!("t{a}.c{ca}"),
                    case: PredicateCase::Join,
                    operand: Operand::Column(format!("t{b}.c{cb}")),
                },
            ));
        }
        let fixed = 2 * k - 1;
        let aggregate = fixed < cfg.max_nodes && rng.random_bool(0.5);
        let used = fixed + aggregate as usize;
        let target = rng.random_range(cfg.min_nodes.max(used)..=cfg.max_nodes.max(used));
        Query {
            tables,
            filters,
            joins,
            aggregate,
            target_nodes: target,
        }
    }

    fn sample_variant(&self, q: &Query, rng: &mut ChaCha8Rng) -> Shape {
        let mut forest: Vec<Shape> = q
            .tables
            .iter()
            .map(|&t| Shape::Scan {
                op: SCAN_OPS.choose(rng).expect("nonempty"),
                table: t,
            })
            .collect();
        let mut budget = q.target_nodes - (2 * q.tables.len() - 1) - q.aggregate as usize;
        while forest.len() > 1 {
            let i = rng.random_range(0..forest.len());
            let a = forest.swap_remove(i);
            let j = rng.random_range(0..forest.len());
            let b = forest.swap_remove(j);
            let op = *JOIN_OPS.choose(rng).expect("nonempty");
            let mut wrap = |s: Shape, unary: &'static str, p: f64, rng: &mut ChaCha8Rng| {
                if budget > 0 && rng.random_bool(p) {
                    budget -= 1;
                    Shape::Unary {
                        op: unary,
                        child: Box::new(s),
                    }
                } else {
                    s
                }
            };
            let (l, r) = match op {
                "Hash Join" => (a, wrap(b, "Hash", 0.8, rng)),
                "Merge Join" => {
                    let a = wrap(a, "Sort", 0.5, rng);
                    (a, wrap(b, "Sort", 0.5, rng))
                }
                _ => (a, wrap(b, "Materialize", 0.4, rng)),
            };
            forest.push(Shape::Join {
                op,
                left: Box::new(l),
                right: Box::new(r),
            });
        }
        let mut root = forest.pop().expect("at least one table");
        // fill the remaining budget so node counts spread over the range
        while budget > 0 {
            budget -= 1;
            root = Shape::Unary {
                op: ["Sort", "Materialize"].choose(rng).expect("nonempty"),
                child: Box::new(root),
            };
        }
        if q.aggregate {
            root = Shape::Unary {
                op: "Aggregate",
                child: Box::new(root),
            };
        }
        root
    }

    /// Lays `shape` out as plan nodes in preorder.
    fn materialize(&self, query_id: &str, shape: &Shape, q: &Query) -> Result<PlanTree> {
        fn walk(s: &Shape, q: &Query, out: &mut Vec<PlanNode>) -> Vec<usize> {
            let id = out.len();
            out.push(PlanNode::new(id, s.op()));
            let tables = match s {
                Shape::Scan { table, .. } => {
                    out[id].predicates = q.filters.get(table).cloned().unwrap_or_default();
                    vec![*table]
                }
                Shape::Unary { child, .. } => {
                    let next = out.len();
                    out[id].children.push(next);
                    walk(child, q, out)
                }
                Shape::Join { left, right, .. } => {
                    let next = out.len();
                    out[id].children.push(next);
                    let l = walk(left, q, out);
                    let next = out.len();
                    out[id].children.push(next);
                    let r = walk(right, q, out);
                    out[id].predicates = q
                        .joins
                        .iter()
                        .filter(|(a, b, _)| {
                            (l.contains(a) && r.contains(b)) || (l.contains(b) && r.contains(a))
                        })
                        .map(|(_, _, p)| p.clone())
                        .collect();
                    let mut all = l;
                    all.extend(r);
                    all
                }
            };
            let mut sorted = tables.clone();
            sorted.sort_unstable();
            out[id].tables = sorted.iter().map(|t| format!("t{t}")).collect();
            tables
        }
        let mut nodes = Vec::new();
        walk(shape, q, &mut nodes);
        Ok(PlanTree::new(query_id, nodes)?)
    }
}

#[derive(Debug, Clone)]
struct Query {
    tables: Vec<usize>,
    filters: BTreeMap<usize, Vec<PredicateAtom>>,
    joins: Vec<(usize, usize, PredicateAtom)>,
    aggregate: bool,
    target_nodes: usize,
}

#[derive(Debug, Clone)]
enum Shape {
    Scan {
        op: &'static str,
        table: usize,
    },
    Join {
        op: &'static str,
        left: Box<Shape>,
        right: Box<Shape>,
    },
    Unary {
        op: &'static str,
        child: Box<Shape>,
    },
}

impl Shape {
    fn op(&self) -> &'static str {
        match self {
            Shape::Scan { op, .. } | Shape::Join { op, .. } | Shape::Unary { op, .. } => op,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use reqo_core::plan::tree_from_shape;

    fn oracle_with(costs: &[(&str, f64)]) -> Oracle {
        let mut cfg = OracleConfig::default();
        cfg.base_costs
            .extend(costs.iter().map(|(k, v)| (k.to_string(), *v)));
        Oracle::new(cfg).unwrap()
    }

    #[test]
    fn recursion_examples() {
        let o = oracle_with(&[("A", 2.0), ("B", 3.0), ("C", 5.0)]);
        let single = tree_from_shape("q", &[("B", &[])]).unwrap();
        assert_eq!(o.oracle_cost(&single, None).unwrap(), vec![3.0]);
        let t = tree_from_shape("q", &[("A", &[1, 2]), ("B", &[]), ("C", &[])]).unwrap();
        assert_eq!(o.oracle_cost(&t, None).unwrap(), vec![10.0, 3.0, 5.0]);
        let unknown = tree_from_shape("q", &[("Z", &[])]).unwrap();
        assert!(o.oracle_cost(&unknown, None).is_err());
    }

    #[test]
    fn shapes_respect_config() {
        let cfg = OracleConfig {
            num_queries: 40,
            seed: 3,
            ..OracleConfig::default()
        };
        let o = Oracle::new(cfg).unwrap();
        let sets = o.generate_workload().unwrap();
        assert_eq!(sets.len(), 40);
        for s in &sets {
            assert_eq!(s.plans.len(), 5);
            for p in &s.plans {
                assert!((3..=20).contains(&p.len()), "{} nodes", p.len());
                for n in p.nodes() {
                    o.catalog.check_node(n).unwrap();
                    for &c in &n.children {
                        assert!(n.actual_total_ms >= p.node(c).actual_total_ms);
                    }
                }
            }
        }
    }
}
