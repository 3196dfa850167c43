//! Plan documents: a subset of PostgreSQL `EXPLAIN (ANALYZE, FORMAT JSON)`.
//!
//! A document is `{"query_id": .., "plan": {node}}` where a node has
//! `"Node Type"`, optional `"Relation Name"` / `"Relations"` / `"Alias"`,
//! optional condition fields (`"Filter"`, `"Index Cond"`, `"Hash Cond"`, ...)
//! given as a condition string or a list of strings and
//! `{"column", "op", "value"}` objects, `"Actual Total Time"` (per loop),
//! `"Actual Loops"` and nested `"Plans"`. Node ids follow document order.
//!
//! A flat form `{"query_id": .., "nodes": [{"Node ID": i, "Children": [..], ..}]}`
//! names ids explicitly.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use reqo_core::encoder::Catalog;
use reqo_core::plan::{
    CandidatePlanSet, Operand, PlanNode, PlanTree, PredicateAtom, PredicateCase,
};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};

const CONDITION_KEYS: [&str; 7] = [
    "Filter",
    "Index Cond",
    "Recheck Cond",
    "Hash Cond",
    "Merge Cond",
    "Join Filter",
    "Predicates",
];

/// Parses plan documents against a catalog.
///
/// In strict mode an unknown operator kind is an error; otherwise it is added
/// to the catalog. Unknown tables and columns are always errors.
#[derive(Debug, Clone)]
pub struct Ingestor {
    pub catalog: Catalog,
    pub strict: bool,
}

impl Ingestor {
    pub fn new(catalog: Catalog, strict: bool) -> Self {
        Self { catalog, strict }
    }

    pub fn parse_plan_document(&mut self, text: &str) -> Result<PlanTree> {
        let v: Value = serde_json::from_str(text).map_err(|e| Error::json(e, text))?;
        self.plan_from_value(&v, None)
    }

    /// `fallback_query_id` is used when the document has no `query_id`.
    pub fn plan_from_value(
        &mut self,
        doc: &Value,
        fallback_query_id: Option<&str>,
    ) -> Result<PlanTree> {
        // EXPLAIN (FORMAT JSON) wraps the document in a one-element list
        if let Some([inner]) = doc.as_array().map(Vec::as_slice) {
            return self.plan_from_value(inner, fallback_query_id);
        }
        let obj = doc
            .as_object()
            .ok_or_else(|| Error::Document("plan document must be an object".into()))?;
        let query_id = match obj.get("query_id") {
            Some(Value::String(s)) => s.clone(),
            Some(Value::Number(n)) => n.to_string(),
            Some(_) => return Err(Error::Document("query_id must be a string".into())),
            None => fallback_query_id
                .map(str::to_string)
                .ok_or_else(|| Error::Document("missing query_id".into()))?,
        };
        let nodes = if let Some(flat) = obj.get("nodes") {
            self.flat_nodes(flat)?
        } else {
            let root = obj
                .get("plan")
                .or_else(|| obj.get("Plan"))
                .ok_or_else(|| Error::Document("missing \"plan\"".into()))?;
            let mut aliases = BTreeMap::new();
            collect_aliases(root, &mut aliases);
            let mut nodes = Vec::new();
            self.nested_node(root, &aliases, &mut nodes)?;
            nodes
        };
        let tree = PlanTree::new(query_id, nodes)?;
        for n in tree.nodes() {
            self.catalog.check_node(n)?;
        }
        Ok(tree)
    }

    fn nested_node(
        &mut self,
        v: &Value,
        aliases: &BTreeMap<String, String>,
        out: &mut Vec<PlanNode>,
    ) -> Result<usize> {
        let obj = v
            .as_object()
            .ok_or_else(|| Error::Document("plan node must be an object".into()))?;
        let id = out.len();
        let node = self.node_fields(id, obj, aliases)?;
        out.push(node);
        if let Some(children) = obj.get("Plans") {
            let children = children
                .as_array()
                .ok_or_else(|| Error::Document("\"Plans\" must be a list".into()))?;
            for c in children {
                let cid = self.nested_node(c, aliases, out)?;
                out[id].children.push(cid);
            }
        }
        Ok(id)
    }

    fn flat_nodes(&mut self, v: &Value) -> Result<Vec<PlanNode>> {
        let list = v
            .as_array()
            .ok_or_else(|| Error::Document("\"nodes\" must be a list".into()))?;
        let mut aliases = BTreeMap::new();
        for n in list {
            collect_aliases(n, &mut aliases);
        }
        let mut nodes = Vec::with_capacity(list.len());
        for (pos, n) in list.iter().enumerate() {
            let obj = n
                .as_object()
                .ok_or_else(|| Error::Document("plan node must be an object".into()))?;
            let id = match obj.get("Node ID") {
                Some(v) => as_index(v, "Node ID")?,
                None => pos,
            };
            let mut node = self.node_fields(id, obj, &aliases)?;
            if let Some(children) = obj.get("Children") {
                node.children = children
                    .as_array()
                    .ok_or_else(|| Error::Document("\"Children\" must be a list".into()))?
                    .iter()
                    .map(|c| as_index(c, "Children"))
                    .collect::<Result<_>>()?;
            }
            nodes.push(node);
        }
        nodes.sort_by_key(|n| n.node_id);
        Ok(nodes)
    }

    fn node_fields(
        &mut self,
        id: usize,
        obj: &Map<String, Value>,
        aliases: &BTreeMap<String, String>,
    ) -> Result<PlanNode> {
        let op = obj
            .get("Node Type")
            .and_then(Value::as_str)
            .ok_or_else(|| Error::Document(format!("node {id} has no \"Node Type\"")))?;
        if self.catalog.node_type_index(op).is_none() {
            if self.strict {
                return Err(reqo_core::Error::Catalog(format!("unknown operator '{op}'")).into());
            }
            log::info!("registering operator kind '{op}'");
            self.catalog.register_node_type(op);
        }
        let mut node = PlanNode::new(id, op);
        if let Some(r) = obj.get("Relation Name").and_then(Value::as_str) {
            node.tables.push(r.to_string());
        }
        if let Some(rs) = obj.get("Relations") {
            for r in rs
                .as_array()
                .ok_or_else(|| Error::Document("\"Relations\" must be a list".into()))?
            {
                let r = r
                    .as_str()
                    .ok_or_else(|| Error::Document("relation names must be strings".into()))?;
                if !node.tables.iter().any(|t| t == r) {
                    node.tables.push(r.to_string());
                }
            }
        }
        let scope = Scope {
            relation: node.tables.first().map(String::as_str),
            aliases,
        };
        for key in CONDITION_KEYS {
            let Some(cond) = obj.get(key) else { continue };
            let items: Vec<&Value> = match cond {
                Value::Array(items) => items.iter().collect(),
                other => vec![other],
            };
            for item in items {
                match item {
                    Value::String(s) => node.predicates.extend(parse_condition(s, &scope)?),
                    Value::Object(o) => node.predicates.push(predicate_object(o, &scope)?),
                    _ => return Err(Error::Document(format!("bad entry in \"{key}\""))),
                }
            }
        }
        for p in &node.predicates {
            let mut referenced = vec![&p.column];
            if let Operand::Column(c) = &p.operand {
                referenced.push(c);
            }
            for c in referenced {
                if let Some((t, _)) = c.split_once('.') {
                    if !node.tables.iter().any(|x| x == t) {
                        node.tables.push(t.to_string());
                    }
                }
            }
        }
        let loops = match obj.get("Actual Loops") {
            Some(v) => v.as_u64().ok_or_else(|| {
                Error::Document(format!("node {id}: \"Actual Loops\" must be an integer"))
            })?,
            None => 1,
        };
        let per_loop = match obj.get("Actual Total Time") {
            Some(v) => v.as_f64().ok_or_else(|| {
                Error::Document(format!("node {id}: \"Actual Total Time\" must be a number"))
            })?,
            None => 0.0,
        };
        node.loop_count = loops;
        node.actual_total_ms = per_loop * loops as f64;
        Ok(node)
    }

    /// One JSONL line: `{"query_id": .., "plans": [plan documents]}`.
    pub fn parse_candidate_line(&mut self, line: &str) -> Result<CandidatePlanSet> {
        let v: Value = serde_json::from_str(line).map_err(|e| Error::json(e, line))?;
        let query_id = v
            .get("query_id")
            .and_then(Value::as_str)
            .ok_or_else(|| Error::Document("candidate set has no query_id".into()))?
            .to_string();
        let plans = v
            .get("plans")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::Document("candidate set has no \"plans\" list".into()))?
            .iter()
            .map(|p| self.plan_from_value(p, Some(&query_id)))
            .collect::<Result<Vec<_>>>()?;
        Ok(CandidatePlanSet::new(query_id, plans)?)
    }

    /// Reads a JSONL file of candidate sets; blank lines are skipped.
    pub fn read_candidate_sets(&mut self, path: &Path) -> Result<Vec<CandidatePlanSet>> {
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut out = Vec::new();
        let mut offset = 0;
        for line in BufReader::new(f).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if !line.trim().is_empty() {
                let set = self.parse_candidate_line(&line).map_err(|e| match e {
                    Error::Json { offset: o, message } => Error::Json {
                        offset: offset + o,
                        message,
                    },
                    other => other,
                })?;
                out.push(set);
            }
            offset += line.len() + 1;
        }
        Ok(out)
    }
}

fn as_index(v: &Value, what: &str) -> Result<usize> {
    v.as_u64()
        .map(|x| x as usize)
        .ok_or_else(|| Error::Document(format!("\"{what}\" must hold nonnegative integers")))
}

fn collect_aliases(v: &Value, out: &mut BTreeMap<String, String>) {
    if let (Some(a), Some(r)) = (
        v.get("Alias").and_then(Value::as_str),
        v.get("Relation Name").and_then(Value::as_str),
    ) {
        out.insert(a.to_string(), r.to_string());
    }
    if let Some(Value::Array(children)) = v.get("Plans") {
        for c in children {
            collect_aliases(c, out);
        }
    }
}

struct Scope<'a> {
    relation: Option<&'a str>,
    aliases: &'a BTreeMap<String, String>,
}

impl Scope<'_> {
    /// `alias.col` or `col` to `relation.col`.
    fn qualify(&self, ident: &str) -> Result<String> {
        let ident = ident.trim().trim_matches('"');
        match ident.rsplit_once('.') {
            Some((q, c)) => {
                let q = q.trim_matches('"');
                let table = self.aliases.get(q).map(String::as_str).unwrap_or(q);
                Ok(format!("{table}.{}", c.trim_matches('"')))
            }
            None => match self.relation {
                Some(r) => Ok(format!("{r}.{ident}")),
                None => Err(Error::Document(format!(
                    "column '{ident}' is unqualified and the node has no relation"
                ))),
            },
        }
    }
}

fn predicate_object(o: &Map<String, Value>, scope: &Scope<'_>) -> Result<PredicateAtom> {
    let column = o
        .get("column")
        .and_then(Value::as_str)
        .ok_or_else(|| Error::Document("predicate object needs \"column\"".into()))?;
    let op = o
        .get("op")
        .and_then(Value::as_str)
        .ok_or_else(|| Error::Document("predicate object needs \"op\"".into()))?;
    let case = PredicateCase::from_symbol(op)
        .ok_or_else(|| Error::Document(format!("unknown predicate operator '{op}'")))?;
    let operand = operand_from_value(o.get("value").unwrap_or(&Value::Null), scope)?;
    Ok(PredicateAtom {
        column: scope.qualify(column)?,
        case,
        operand,
    })
}

fn operand_from_value(v: &Value, scope: &Scope<'_>) -> Result<Operand> {
    Ok(match v {
        Value::Null => Operand::None,
        Value::Number(n) => Operand::Number(n.as_f64().unwrap_or(0.0)),
        Value::String(s) => Operand::Text(s.clone()),
        Value::Bool(b) => Operand::Text(b.to_string()),
        Value::Array(items) => Operand::List(
            items
                .iter()
                .map(|i| operand_from_value(i, scope))
                .collect::<Result<_>>()?,
        ),
        Value::Object(o) => match o.get("column").and_then(Value::as_str) {
            Some(c) => Operand::Column(scope.qualify(c)?),
            None => return Err(Error::Document("operand object needs \"column\"".into())),
        },
    })
}

fn operand_to_value(op: &Operand) -> Value {
    match op {
        Operand::Number(x) => json!(x),
        Operand::Text(s) => json!(s),
        Operand::Column(c) => json!({ "column": c }),
        Operand::List(items) => Value::Array(items.iter().map(operand_to_value).collect()),
        Operand::None => Value::Null,
    }
}

/// Splits `s` at depth-zero, unquoted occurrences of ` AND ` / ` OR `.
fn split_boolean(s: &str) -> Vec<&str> {
    let bytes = s.as_bytes();
    let upper = s.to_ascii_uppercase();
    let mut parts = Vec::new();
    let (mut depth, mut quoted, mut start, mut i) = (0i32, false, 0, 0);
    while i < bytes.len() {
        match bytes[i] {
            b'\'' => quoted = !quoted,
            b'(' if !quoted => depth += 1,
            b')' if !quoted => depth -= 1,
            _ if !quoted && depth == 0 => {
                for sep in [" AND ", " OR "] {
                    if upper[i..].starts_with(sep) {
                        parts.push(&s[start..i]);
                        start = i + sep.len();
                        i = start - 1;
                        break;
                    }
                }
            }
            _ => {}
        }
        i += 1;
    }
    parts.push(&s[start..]);
    parts
}

/// Removes parentheses that wrap the whole expression.
fn strip_parens(mut s: &str) -> &str {
    loop {
        s = s.trim();
        if !(s.starts_with('(') && s.ends_with(')')) {
            return s;
        }
        let mut depth = 0;
        let mut quoted = false;
        for (i, ch) in s.char_indices() {
            match ch {
                '\'' => quoted = !quoted,
                '(' if !quoted => depth += 1,
                ')' if !quoted => {
                    depth -= 1;
                    if depth == 0 && i != s.len() - 1 {
                        return s;
                    }
                }
                _ => {}
            }
        }
        s = &s[1..s.len() - 1];
    }
}

/// Drops `::type` casts outside quotes.
fn strip_casts(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut quoted = false;
    let mut chars = s.chars().peekable();
    while let Some(ch) = chars.next() {
        if ch == '\'' {
            quoted = !quoted;
        }
        if !quoted && ch == ':' && chars.peek() == Some(&':') {
            chars.next();
            let mut name = String::new();
            while let Some(&c) = chars.peek() {
                let multiword = c == ' ' && matches!(name.as_str(), "character" | "double");
                if c.is_alphanumeric() || c == '_' || c == '[' || c == ']' || multiword {
                    name.push(c);
                    chars.next();
                } else {
                    break;
                }
            }
            continue;
        }
        out.push(ch);
    }
    out
}

fn find_operator(s: &str) -> Option<(usize, &'static str)> {
    let upper = s.to_ascii_uppercase();
    for word in [" = ANY ", " NOT IN ", " IN "] {
        if let Some(i) = upper.find(word) {
            return Some((i, word));
        }
    }
    let bytes = s.as_bytes();
    let mut quoted = false;
    let mut depth = 0;
    for i in 0..bytes.len() {
        match bytes[i] {
            b'\'' => quoted = !quoted,
            b'(' if !quoted => depth += 1,
            b')' if !quoted => depth -= 1,
            _ if !quoted && depth == 0 => {
                for op in [">=", "<=", "<>", "!=", "=", ">", "<"] {
                    if s[i..].starts_with(op) {
                        return Some((i, op));
                    }
                }
            }
            _ => {}
        }
    }
    None
}

fn is_identifier(s: &str) -> bool {
    let s = s.trim();
    !s.is_empty()
        && !s.starts_with('\'')
        && s.parse::<f64>().is_err()
        && s.chars()
            .all(|c| c.is_alphanumeric() || c == '_' || c == '.' || c == '"')
        && s.chars()
            .next()
            .is_some_and(|c| c.is_alphabetic() || c == '_' || c == '"')
}

fn literal(s: &str) -> Operand {
    let s = s.trim();
    if let Some(inner) = s.strip_prefix('\'').and_then(|x| x.strip_suffix('\'')) {
        return Operand::Text(inner.replace("''", "'"));
    }
    match s.parse::<f64>() {
        Ok(x) => Operand::Number(x),
        Err(_) => Operand::Text(s.to_string()),
    }
}

fn list_literal(s: &str) -> Operand {
    let s = strip_parens(s.trim());
    let s = s
        .strip_prefix("ARRAY[")
        .and_then(|x| x.strip_suffix(']'))
        .unwrap_or(s);
    let s = s
        .trim_matches('\'')
        .trim_start_matches('{')
        .trim_end_matches('}');
    Operand::List(
        s.split(',')
            .filter(|x| !x.trim().is_empty())
            .map(|x| literal(x.trim().trim_matches('"')))
            .collect(),
    )
}

fn mirror(case: PredicateCase) -> PredicateCase {
    match case {
        PredicateCase::Gt => PredicateCase::Lt,
        PredicateCase::Ge => PredicateCase::Le,
        PredicateCase::Lt => PredicateCase::Gt,
        PredicateCase::Le => PredicateCase::Ge,
        other => other,
    }
}

/// Flattens a condition string into atoms; boolean structure is dropped.
fn parse_condition(cond: &str, scope: &Scope<'_>) -> Result<Vec<PredicateAtom>> {
    let cleaned = strip_casts(cond);
    let mut atoms = Vec::new();
    let mut pending = vec![cleaned.as_str()];
    while let Some(expr) = pending.pop() {
        let expr = strip_parens(expr);
        let parts = split_boolean(expr);
        if parts.len() > 1 {
            pending.extend(parts.into_iter().rev());
            continue;
        }
        let (i, op) = find_operator(expr)
            .ok_or_else(|| Error::Document(format!("cannot read condition '{expr}'")))?;
        let lhs = strip_parens(&expr[..i]);
        let rhs = strip_parens(&expr[i + op.len()..]);
        let atom = match op.trim() {
            "= ANY" | "IN" | "NOT IN" => PredicateAtom {
                column: scope.qualify(lhs)?,
                case: PredicateCase::In,
                operand: list_literal(rhs),
            },
            sym => {
                let case = PredicateCase::from_symbol(sym).expect("operator table");
                match (is_identifier(lhs), is_identifier(rhs)) {
                    (true, true) if case == PredicateCase::Eq => PredicateAtom {
                        column: scope.qualify(lhs)?,
                        case: PredicateCase::Join,
                        operand: Operand::Column(scope.qualify(rhs)?),
                    },
                    (true, true) => PredicateAtom {
                        column: scope.qualify(lhs)?,
                        case,
                        operand: Operand::Column(scope.qualify(rhs)?),
                    },
                    (true, false) => PredicateAtom {
                        column: scope.qualify(lhs)?,
                        case,
                        operand: literal(rhs),
                    },
                    (false, true) => PredicateAtom {
                        column: scope.qualify(rhs)?,
                        case: mirror(case),
                        operand: literal(lhs),
                    },
                    (false, false) => {
                        return Err(Error::Document(format!(
                            "condition '{expr}' does not reference a column"
                        )))
                    }
                }
            }
        };
        atoms.push(atom);
    }
    Ok(atoms)
}

/// Nested document for `tree`; nodes are written in preorder.
pub fn plan_to_document(tree: &PlanTree) -> Value {
    fn node(tree: &PlanTree, id: usize) -> Value {
        let n = tree.node(id);
        let mut obj = Map::new();
        obj.insert("Node Type".into(), json!(n.op_type));
        if !n.tables.is_empty() {
            obj.insert("Relations".into(), json!(n.tables));
        }
        if !n.predicates.is_empty() {
            let preds: Vec<Value> = n
                .predicates
                .iter()
                .map(|p| {
                    json!({
                        "column": p.column,
                        "op": p.case.symbol(),
                        "value": operand_to_value(&p.operand),
                    })
                })
                .collect();
            obj.insert("Filter".into(), Value::Array(preds));
        }
        obj.insert(
            "Actual Total Time".into(),
            json!(n.actual_total_ms / n.loop_count as f64),
        );
        obj.insert("Actual Loops".into(), json!(n.loop_count));
        let children = tree.children(id);
        if !children.is_empty() {
            obj.insert(
                "Plans".into(),
                Value::Array(children.iter().map(|&c| node(tree, c)).collect()),
            );
        }
        Value::Object(obj)
    }
    json!({ "query_id": tree.query_id(), "plan": node(tree, tree.root()) })
}

pub fn candidate_set_to_value(set: &CandidatePlanSet) -> Value {
    json!({
        "query_id": set.query_id,
        "plans": set.plans.iter().map(plan_to_document).collect::<Vec<_>>(),
    })
}

pub fn write_candidate_sets(path: &Path, sets: &[CandidatePlanSet]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for s in sets {
        let line =
            serde_json::to_string(&candidate_set_to_value(s)).expect("plan documents serialize");
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

pub fn read_catalog(path: &Path) -> Result<Catalog> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let c: Catalog = serde_json::from_str(&text).map_err(|e| Error::json(e, &text))?;
    c.validate()?;
    Ok(c)
}

pub fn write_catalog(path: &Path, catalog: &Catalog) -> Result<()> {
    let text = serde_json::to_string_pretty(catalog).expect("catalog serializes");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
