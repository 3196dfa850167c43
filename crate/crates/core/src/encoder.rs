//! Node feature encoding.
//!
//! A node feature is the concatenation of
//!
//! * a learned projection of the operator-kind one-hot,
//! * a one-hot over the catalog tables the node touches,
//! * one block per catalog table holding the elementwise max of that table's
//!   column embeddings, where a column embedding is its 8-slot predicate case
//!   vector multiplied by a column-specific learned matrix.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ColumnPoolInput, PooledColumn, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::plan::{Operand, PlanNode, PredicateAtom, PredicateCase};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ColumnKind {
    Numeric { min: f64, max: f64 },
    Text,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnDef {
    pub name: String,
    #[serde(flatten)]
    pub kind: ColumnKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableDef {
    pub name: String,
    pub columns: Vec<ColumnDef>,
}

/// Schema knowledge the encoder needs: operator kinds, tables and columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    pub node_types: Vec<String>,
    pub tables: Vec<TableDef>,
}

/// Resolved location of a qualified column.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColumnRef<'a> {
    pub table: usize,
    /// Index over all catalog columns, tables in order.
    pub global: usize,
    pub def: &'a ColumnDef,
}

impl Catalog {
    pub fn new(node_types: Vec<String>, tables: Vec<TableDef>) -> Result<Self> {
        let c = Self { node_types, tables };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        fn no_dups<'a>(what: &str, names: impl Iterator<Item = &'a str>) -> Result<()> {
            let mut seen: Vec<&str> = Vec::new();
            for n in names {
                if seen.contains(&n) {
                    return Err(Error::InvalidCatalog(format!("duplicate {what} '{n}'")));
                }
                seen.push(n);
            }
            if seen.is_empty() {
                return Err(Error::InvalidCatalog(format!("no {what}s declared")));
            }
            Ok(())
        }
        no_dups("node type", self.node_types.iter().map(String::as_str))?;
        no_dups("table", self.tables.iter().map(|t| t.name.as_str()))?;
        for t in &self.tables {
            no_dups("column", t.columns.iter().map(|c| c.name.as_str()))
                .map_err(|e| Error::InvalidCatalog(format!("table '{}': {e}", t.name)))?;
            for c in &t.columns {
                if let ColumnKind::Numeric { min, max } = c.kind {
                    if !(min < max) {
                        return Err(Error::InvalidCatalog(format!(
                            "column '{}.{}' has empty range [{min}, {max}]",
                            t.name, c.name
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn node_type_index(&self, op: &str) -> Option<usize> {
        self.node_types.iter().position(|t| t == op)
    }

    pub fn table_index(&self, name: &str) -> Option<usize> {
        self.tables.iter().position(|t| t.name == name)
    }

    /// Adds an operator kind if missing; returns its index.
    pub fn register_node_type(&mut self, op: &str) -> usize {
        match self.node_type_index(op) {
            Some(i) => i,
            None => {
                self.node_types.push(op.to_string());
                self.node_types.len() - 1
            }
        }
    }

    pub fn num_columns(&self) -> usize {
        self.tables.iter().map(|t| t.columns.len()).sum()
    }

    /// Looks up a `table.column` identifier.
    pub fn column(&self, qualified: &str) -> Option<ColumnRef<'_>> {
        let (table, column) = qualified.split_once('.')?;
        let mut global = 0;
        for (ti, t) in self.tables.iter().enumerate() {
            if t.name == table {
                let ci = t.columns.iter().position(|c| c.name == column)?;
                return Some(ColumnRef {
                    table: ti,
                    global: global + ci,
                    def: &t.columns[ci],
                });
            }
            global += t.columns.len();
        }
        None
    }

    /// Checks that a node's operator, tables and predicate columns are known.
    pub fn check_node(&self, node: &PlanNode) -> Result<()> {
        if self.node_type_index(&node.op_type).is_none() {
            return Err(Error::Catalog(format!(
                "unknown operator '{}'",
                node.op_type
            )));
        }
        for t in &node.tables {
            if self.table_index(t).is_none() {
                return Err(Error::Catalog(format!("unknown table '{t}'")));
            }
        }
        for p in &node.predicates {
            if self.column(&p.column).is_none() {
                return Err(Error::Catalog(format!("unknown column '{}'", p.column)));
            }
        }
        Ok(())
    }
}

/// Normalized operand values per predicate case for one column.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ColumnCaseVector {
    pub values: [f64; 8],
}

impl ColumnCaseVector {
    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }
}

/// `(clamp(v, lo, hi) - lo) / (hi - lo)`.
pub fn normalize_value(v: f64, lo: f64, hi: f64) -> f64 {
    debug_assert!(lo < hi);
    (v.clamp(lo, hi) - lo) / (hi - lo)
}

const TEXT_HASH_SEED: u64 = 0x5851_f42d_4c95_7f2d;

/// Deterministic scalar in `[0, 1)` for a string literal; `""` maps to `0`.
///
/// FNV-1a over the UTF-8 bytes, seeded, followed by a splitmix64 finalizer so
/// that single-character changes spread over all output bits.
pub fn text_to_numeric(s: &str) -> f64 {
    if s.is_empty() {
        return 0.0;
    }
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ TEXT_HASH_SEED;
    for &b in s.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^= h >> 31;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn operand_value(op: &Operand, def: &ColumnDef, column: &str) -> f64 {
    let numeric = |v: f64| match def.kind {
        ColumnKind::Numeric { min, max } => {
            if v < min || v > max {
                log::warn!("literal {v} outside [{min}, {max}] of {column}; clamped");
            }
            normalize_value(v, min, max)
        }
        ColumnKind::Text => text_to_numeric(&format!("{v}")),
    };
    match op {
        Operand::Number(v) => numeric(*v),
        Operand::Text(s) => match (&def.kind, s.trim().parse::<f64>()) {
            (ColumnKind::Numeric { .. }, Ok(v)) => numeric(v),
            _ => text_to_numeric(s),
        },
        Operand::Column(_) | Operand::List(_) | Operand::None => 1.0,
    }
}

/// Builds the 8-slot case vector of `column` from a node's predicates.
///
/// Join and membership slots hold an indicator; comparison slots hold the
/// normalized literal. A later predicate on the same slot overwrites an
/// earlier one. A join predicate also marks the column it references.
pub fn encode_case_vector(
    predicates: &[PredicateAtom],
    column: &str,
    catalog: &Catalog,
) -> Result<ColumnCaseVector> {
    let target = catalog
        .column(column)
        .ok_or_else(|| Error::Catalog(format!("unknown column '{column}'")))?;
    let mut out = ColumnCaseVector::default();
    for p in predicates {
        let slot = p.case.slot();
        if p.column == column {
            out.values[slot] = match p.case {
                PredicateCase::Join | PredicateCase::In => 1.0,
                _ => operand_value(&p.operand, target.def, column),
            };
        } else if p.case == PredicateCase::Join {
            if let Operand::Column(other) = &p.operand {
                if other == column {
                    out.values[slot] = 1.0;
                }
            }
        }
    }
    Ok(out)
}

/// Parameter-independent encoding of one node.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedNode {
    pub type_index: usize,
    pub tables: Vec<usize>,
    pub columns: Vec<PooledColumn>,
}

/// Resolves a node against the catalog and computes its column case vectors.
pub fn prepare_node(node: &PlanNode, catalog: &Catalog) -> Result<EncodedNode> {
    let type_index = catalog
        .node_type_index(&node.op_type)
        .ok_or_else(|| Error::Catalog(format!("unknown operator '{}'", node.op_type)))?;
    let mut tables = Vec::with_capacity(node.tables.len());
    for t in &node.tables {
        let idx = catalog
            .table_index(t)
            .ok_or_else(|| Error::Catalog(format!("unknown table '{t}'")))?;
        if !tables.contains(&idx) {
            tables.push(idx);
        }
    }
    let mut names: Vec<&str> = Vec::new();
    for p in &node.predicates {
        names.push(p.column.as_str());
        if let (PredicateCase::Join, Operand::Column(other)) = (p.case, &p.operand) {
            names.push(other.as_str());
        }
    }
    let mut columns: Vec<PooledColumn> = Vec::new();
    for name in names {
        let r = catalog
            .column(name)
            .ok_or_else(|| Error::Catalog(format!("unknown column '{name}'")))?;
        if columns.iter().any(|c| c.column == r.global) {
            continue;
        }
        let cv = encode_case_vector(&node.predicates, name, catalog)?;
        if !cv.is_zero() {
            columns.push(PooledColumn {
                table: r.table,
                column: r.global,
                cases: cv.values,
            });
        }
    }
    Ok(EncodedNode {
        type_index,
        tables,
        columns,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub type_dim: usize,
    pub column_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            type_dim: 32,
            column_dim: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub num_node_types: usize,
    pub columns_per_table: Vec<usize>,
    pub type_weight: ParamId,
    pub type_bias: ParamId,
    /// One `8 x column_dim` block per catalog column, stacked.
    pub column_weights: ParamId,
}

impl EncoderParams {
    pub fn new<R: Rng + ?Sized>(
        catalog: &Catalog,
        config: EncoderConfig,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        if config.type_dim == 0 || config.column_dim == 0 {
            return Err(Error::Config("encoder dims must be positive".into()));
        }
        let nt = catalog.node_types.len();
        let type_weight = store.add_glorot("encoder.type.weight", nt, config.type_dim, rng);
        let type_bias = store.add_zeros("encoder.type.bias", 1, config.type_dim);
        let column_weights = store.add_glorot(
            "encoder.columns.weight",
            8 * catalog.num_columns(),
            config.column_dim,
            rng,
        );
        // Glorot over the stacked shape is too small per column block; rescale.
        let fix = libm::sqrt(
            (8 * catalog.num_columns() + config.column_dim) as f64 / (8 + config.column_dim) as f64,
        );
        store.get_mut(column_weights).scale_assign(fix);
        Ok(Self {
            config,
            num_node_types: nt,
            columns_per_table: catalog.tables.iter().map(|t| t.columns.len()).collect(),
            type_weight,
            type_bias,
            column_weights,
        })
    }

    pub fn num_tables(&self) -> usize {
        self.columns_per_table.len()
    }

    /// Length of a node feature vector.
    pub fn feature_dim(&self) -> usize {
        self.config.type_dim + self.num_tables() * (1 + self.config.column_dim)
    }

    /// Encodes a batch of nodes into a `nodes x feature_dim` value on the tape.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, nodes: &[&EncodedNode]) -> Var {
        let nt = self.num_node_types;
        let tables = self.num_tables();
        let mut onehot = Matrix::zeros(nodes.len(), nt);
        let mut table_hot = Matrix::zeros(nodes.len(), tables);
        for (i, n) in nodes.iter().enumerate() {
            onehot.set(i, n.type_index, 1.0);
            for &t in &n.tables {
                table_hot.set(i, t, 1.0);
            }
        }
        let onehot = tape.constant(onehot);
        let w = tape.param(store, self.type_weight);
        let b = tape.param(store, self.type_bias);
        let type_emb = tape.matmul(onehot, w);
        let type_emb = tape.add_row_bias(type_emb, b);
        let table_hot = tape.constant(table_hot);
        let cw = tape.param(store, self.column_weights);
        let pooled = tape.column_pool(
            cw,
            ColumnPoolInput {
                embed_dim: self.config.column_dim,
                columns_per_table: self.columns_per_table.clone(),
                rows: nodes.iter().map(|n| n.columns.clone()).collect(),
            },
        );
        tape.concat_cols(&[type_emb, table_hot, pooled])
    }
}

/// Fixed-length feature vector of one node.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeFeature(pub Vec<f64>);

/// Encodes a single node with the given parameters.
pub fn encode_node(
    node: &PlanNode,
    catalog: &Catalog,
    params: &EncoderParams,
    store: &ParamStore,
) -> Result<NodeFeature> {
    let prepared = prepare_node(node, catalog)?;
    let mut tape = Tape::new();
    let v = params.encode(&mut tape, store, &[&prepared]);
    Ok(NodeFeature(tape.value(v).row(0).to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn catalog() -> Catalog {
        Catalog::new(
            vec!["Seq Scan".into(), "Hash Join".into()],
            vec![
                TableDef {
                    name: "t1".into(),
                    columns: vec![
                        ColumnDef {
                            name: "a".into(),
                            kind: ColumnKind::Numeric {
                                min: 0.0,
                                max: 10.0,
                            },
                        },
                        ColumnDef {
                            name: "b".into(),
                            kind: ColumnKind::Numeric {
                                min: 5.0,
                                max: 10.0,
                            },
                        },
                        ColumnDef {
                            name: "s".into(),
                            kind: ColumnKind::Text,
                        },
                    ],
                },
                TableDef {
                    name: "t2".into(),
                    columns: vec![ColumnDef {
                        name: "x".into(),
                        kind: ColumnKind::Numeric { min: 0.0, max: 1.0 },
                    }],
                },
            ],
        )
        .unwrap()
    }

    fn atom(column: &str, case: PredicateCase, operand: Operand) -> PredicateAtom {
        PredicateAtom {
            column: column.into(),
            case,
            operand,
        }
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_value(5.0, 5.0, 10.0), 0.0);
        assert_eq!(normalize_value(10.0, 5.0, 10.0), 1.0);
        assert_eq!(normalize_value(7.5, 5.0, 10.0), 0.5);
        assert_eq!(normalize_value(42.0, 5.0, 10.0), 1.0);
        assert_eq!(normalize_value(-3.0, 5.0, 10.0), 0.0);
    }

    #[test]
    fn text_hash_properties() {
        assert_eq!(text_to_numeric(""), 0.0);
        assert_eq!(text_to_numeric("abc"), text_to_numeric("abc"));
        let corpus: Vec<String> = (0..100).map(|i| format!("value-{i:03}")).collect();
        for s in &corpus {
            let v = text_to_numeric(s);
            assert!((0.0..1.0).contains(&v));
            // Flip the last character.
            let mut t = s.clone();
            let last = t.pop().unwrap();
            t.push(if last == 'z' { 'y' } else { 'z' });
            assert_ne!(v, text_to_numeric(&t), "{s} vs {t}");
        }
        let mean: f64 = corpus.iter().map(|s| text_to_numeric(s)).sum::<f64>() / 100.0;
        assert!((mean - 0.5).abs() < 0.1, "mean {mean}");
    }

    #[test]
    fn case_vector_examples() {
        let c = catalog();
        let none = encode_case_vector(&[], "t1.a", &c).unwrap();
        assert!(none.is_zero());

        let gt = encode_case_vector(
            &[atom("t1.a", PredicateCase::Gt, Operand::Number(5.0))],
            "t1.a",
            &c,
        )
        .unwrap();
        let mut expected = [0.0; 8];
        expected[PredicateCase::Gt.slot()] = 0.5;
        assert_eq!(gt.values, expected);

        let join = encode_case_vector(
            &[atom(
                "t1.a",
                PredicateCase::Join,
                Operand::Column("t2.x".into()),
            )],
            "t1.a",
            &c,
        )
        .unwrap();
        assert_eq!(join.values[PredicateCase::Join.slot()], 1.0);
        assert_eq!(join.values.iter().sum::<f64>(), 1.0);

        // The referenced side of a join is marked as well.
        let other = encode_case_vector(
            &[atom(
                "t1.a",
                PredicateCase::Join,
                Operand::Column("t2.x".into()),
            )],
            "t2.x",
            &c,
        )
        .unwrap();
        assert_eq!(other.values[PredicateCase::Join.slot()], 1.0);

        let text = encode_case_vector(
            &[atom("t1.s", PredicateCase::Eq, Operand::Text("foo".into()))],
            "t1.s",
            &c,
        )
        .unwrap();
        assert_eq!(
            text.values[PredicateCase::Eq.slot()],
            text_to_numeric("foo")
        );

        // Out of range clamps; last write wins.
        let clamp = encode_case_vector(
            &[
                atom("t1.a", PredicateCase::Lt, Operand::Number(3.0)),
                atom("t1.a", PredicateCase::Lt, Operand::Number(99.0)),
            ],
            "t1.a",
            &c,
        )
        .unwrap();
        assert_eq!(clamp.values[PredicateCase::Lt.slot()], 1.0);

        assert!(matches!(
            encode_case_vector(&[], "t9.z", &c),
            Err(Error::Catalog(_))
        ));
    }

    #[test]
    fn catalog_validation() {
        let mut c = catalog();
        c.tables[0].columns[1].kind = ColumnKind::Numeric { min: 3.0, max: 3.0 };
        assert!(c.validate().is_err());
        let mut c = catalog();
        c.node_types.push("Seq Scan".into());
        assert!(c.validate().is_err());
        let mut c = catalog();
        c.tables.clear();
        assert!(c.validate().is_err());
        assert_eq!(catalog().column("t2.x").unwrap().global, 3);
    }

    fn params(c: &Catalog) -> (ParamStore, EncoderParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = EncoderParams::new(
            c,
            EncoderConfig {
                type_dim: 4,
                column_dim: 2,
            },
            &mut store,
            &mut rng,
        )
        .unwrap();
        (store, p)
    }

    #[test]
    fn scan_without_predicates_has_empty_predicate_blocks() {
        let c = catalog();
        let (store, p) = params(&c);
        let mut node = PlanNode::new(0, "Seq Scan");
        node.tables = vec!["t1".into()];
        let f = encode_node(&node, &c, &p, &store).unwrap();
        assert_eq!(f.0.len(), p.feature_dim());
        assert_eq!(&f.0[4..6], &[1.0, 0.0]);
        assert!(f.0[6..].iter().all(|&x| x == 0.0));

        node.tables.push("t2".into());
        let f = encode_node(&node, &c, &p, &store).unwrap();
        assert_eq!(&f.0[4..6], &[1.0, 1.0]);
    }

    #[test]
    fn pooled_block_is_elementwise_max() {
        let c = catalog();
        let (mut store, p) = params(&c);
        // Column a: E = [1, 0]; column b: E = [0, 2] for a '=' literal of 1.0.
        let w = store.get_mut(p.column_weights);
        *w = Matrix::zeros(w.rows(), w.cols());
        let eq = PredicateCase::Eq.slot();
        w.set(eq, 0, 1.0);
        w.set(8 + eq, 1, 2.0);
        let mut node = PlanNode::new(0, "Seq Scan");
        node.tables = vec!["t1".into()];
        node.predicates = vec![
            atom("t1.a", PredicateCase::Eq, Operand::Number(10.0)),
            atom("t1.b", PredicateCase::Eq, Operand::Number(10.0)),
        ];
        let f = encode_node(&node, &c, &p, &store).unwrap();
        assert_eq!(&f.0[6..8], &[1.0, 2.0]);
        assert_eq!(&f.0[8..10], &[0.0, 0.0]);

        node.predicates.reverse();
        let g = encode_node(&node, &c, &p, &store).unwrap();
        assert_eq!(f, g);
    }

    #[test]
    fn unknown_operator_or_table_is_a_catalog_error() {
        let c = catalog();
        let (store, p) = params(&c);
        let node = PlanNode::new(0, "Gather");
        assert!(matches!(
            encode_node(&node, &c, &p, &store),
            Err(Error::Catalog(_))
        ));
        let mut node = PlanNode::new(0, "Seq Scan");
        node.tables = vec!["nope".into()];
        assert!(matches!(
            encode_node(&node, &c, &p, &store),
            Err(Error::Catalog(_))
        ));
    }
}
