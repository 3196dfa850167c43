//! Inference on a loaded checkpoint: estimates, ranking and explanations.

use reqo_core::estimator::select_min;
use reqo_core::explainer::{NodeOpContribution, SubtreeContribution};
use reqo_core::plan::{CandidatePlanSet, PlanTree};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanEstimate {
    pub mu: f64,
    pub var: f64,
    pub integrated: f64,
    /// `mu` mapped back to milliseconds.
    pub estimated_ms: f64,
}

/// Which model output orders candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Selector {
    /// The learned integration of mean and variance.
    #[default]
    Integrated,
    /// The mean alone.
    Mean,
}

impl Selector {
    pub fn score(self, e: &PlanEstimate) -> f64 {
        match self {
            Selector::Integrated => e.integrated,
            Selector::Mean => e.mu,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub query_id: String,
    pub chosen: usize,
    /// Candidate indices from best to worst score; ties keep input order.
    pub order: Vec<usize>,
    pub estimates: Vec<PlanEstimate>,
}

/// One node line of an explanation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeReport {
    pub node_id: usize,
    pub op_type: String,
    pub tables: Vec<String>,
    pub subtree_ec: f64,
    pub subtree_ac: Option<f64>,
    pub operator_ec: f64,
    pub negative: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationReport {
    pub query_id: String,
    pub estimate: PlanEstimate,
    pub nodes: Vec<NodeReport>,
    pub negative_operators: usize,
}

impl Checkpoint {
    pub fn estimate_plans(&self, plans: &[PlanTree]) -> Result<Vec<PlanEstimate>> {
        let prepared = plans
            .iter()
            .map(|p| self.model.prepare(p, false))
            .collect::<reqo_core::Result<Vec<_>>>()?;
        let refs: Vec<_> = prepared.iter().collect();
        Ok(self
            .model
            .estimate(&refs)
            .into_iter()
            .map(|e| PlanEstimate {
                mu: e.mu,
                var: e.var,
                integrated: e.integrated,
                estimated_ms: self.scaler.unscale_runtime(e.mu),
            })
            .collect())
    }

    pub fn rank(&self, set: &CandidatePlanSet, selector: Selector) -> Result<Ranking> {
        let estimates = self.estimate_plans(&set.plans)?;
        let scores: Vec<f64> = estimates.iter().map(|e| selector.score(e)).collect();
        let chosen = select_min(&scores).ok_or(reqo_core::Error::Empty("no candidate plans"))?;
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
        Ok(Ranking {
            query_id: set.query_id.clone(),
            chosen,
            order,
            estimates,
        })
    }

    pub fn explain(&self, tree: &PlanTree) -> Result<ExplanationReport> {
        let ex = self.model.explain(tree)?;
        let estimate = self.estimate_plans(std::slice::from_ref(tree))?[0];
        let sub = |id: usize| -> &SubtreeContribution {
            ex.subtrees
                .iter()
                .find(|s| s.subtree.root_node_id == id)
                .expect("every node roots a subtree")
        };
        let op = |id: usize| -> &NodeOpContribution {
            ex.operators
                .iter()
                .find(|o| o.node_id == id)
                .expect("every node has an operator contribution")
        };
        let nodes: Vec<NodeReport> = (0..tree.len())
            .map(|id| {
                let n = tree.node(id);
                let (s, o) = (sub(id), op(id));
                NodeReport {
                    node_id: id,
                    op_type: n.op_type.clone(),
                    tables: n.tables.clone(),
                    subtree_ec: s.ec,
                    subtree_ac: s.ac,
                    operator_ec: o.value,
                    negative: o.negative,
                }
            })
            .collect();
        Ok(ExplanationReport {
            query_id: ex.query_id,
            estimate,
            negative_operators: nodes.iter().filter(|n| n.negative).count(),
            nodes,
        })
    }
}

/// Indented text rendering of an explanation, one node per line.
pub fn render_tree(tree: &PlanTree, report: &ExplanationReport) -> String {
    fn walk(tree: &PlanTree, r: &ExplanationReport, id: usize, depth: usize, out: &mut String) {
        let n = &r.nodes[id];
        let ac = n
            .subtree_ac
            .map(|a| format!(" ac={a:.3}"))
            .unwrap_or_default();
        let flag = if n.negative { " [negative]" } else { "" };
        let tables = if n.tables.is_empty() {
            String::new()
        } else {
            format!(" ({})", n.tables.join(", "))
        };
        out.push_str(&format!(
            "{}{} #{}{tables}: op={:.3} subtree={:.3}{ac}{flag}\n",
            "  ".repeat(depth),
            n.op_type,
            n.node_id,
            n.operator_ec,
            n.subtree_ec
        ));
        for &c in tree.children(id) {
            walk(tree, r, c, depth + 1, out);
        }
    }
    let mut out = format!(
        "{}: estimated {:.3} ms (mu={:.4}, var={:.4}, C={:.4})\n",
        report.query_id,
        report.estimate.estimated_ms,
        report.estimate.mu,
        report.estimate.var,
        report.estimate.integrated
    );
    walk(tree, report, tree.root(), 0, &mut out);
    out
}
