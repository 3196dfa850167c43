//! The full model: node encoder, tree encoder, cost estimator and explainer
//! sharing one parameter store, with batched training losses and inference.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{value_and_grads, Tape, Var};
use crate::bigg::{
    embed_projected, project_inputs, BiggConfig, BiggParams, GraphBatch, PlanEmbedding,
};
use crate::encoder::{prepare_node, Catalog, EncodedNode, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::estimator::{
    rank_pairs, select_min, CostEstimate, EstimatorConfig, EstimatorParams, VARIANCE_FLOOR,
};
use crate::explainer::{
    node_operation_contributions, ExplainerParams, NodeOpContribution, SubtreeContribution,
};
use crate::params::{Dropout, Grads, ParamStore};
use crate::plan::{PlanTree, SubtreeRef};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub bigg: BiggConfig,
    pub estimator: EstimatorConfig,
    pub explainer_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            bigg: BiggConfig::default(),
            estimator: EstimatorConfig::default(),
            explainer_hidden: 64,
        }
    }
}

impl ModelConfig {
    /// Defaults with every hidden width set to `hidden`.
    pub fn with_hidden(hidden: usize) -> Self {
        let mut c = Self::default();
        c.bigg.hidden_dim = hidden;
        c.estimator.hidden_dim = hidden;
        c.explainer_hidden = hidden;
        c
    }
}

/// A plan with its nodes resolved against the catalog and its subtrees extracted.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedPlan {
    pub tree: PlanTree,
    pub nodes: Vec<EncodedNode>,
    pub subtrees: Vec<SubtreeRef>,
    /// Actual contribution of each subtree; `None` for unlabeled plans.
    pub ac: Option<Vec<f64>>,
}

/// Plans with scaled targets and within-query comparison pairs.
#[derive(Debug, Clone, Default)]
pub struct TrainBatch<'a> {
    pub plans: Vec<&'a PreparedPlan>,
    pub targets: Vec<f64>,
    pub pairs: Vec<(usize, usize)>,
}

/// Loss term weights; all one reproduces the plain sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub uncertainty: f64,
    pub ranking: f64,
    pub explanation: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            uncertainty: 1.0,
            ranking: 1.0,
            explanation: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchLoss {
    pub total: f64,
    pub uncertainty: f64,
    pub ranking: f64,
    pub explanation: Option<f64>,
    pub grads: Grads,
}

/// Subtree and per-operator contributions of one plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanExplanation {
    pub query_id: alloc::string::String,
    pub subtrees: Vec<SubtreeContribution>,
    pub operators: Vec<NodeOpContribution>,
}

struct LossVars {
    total: Var,
    uncertainty: Var,
    ranking: Var,
    explanation: Option<Var>,
}

struct Forward {
    embeddings: Var,
    num_plans: usize,
    mu: Var,
    var: Var,
    integrated: Var,
    ec: Option<Var>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReqoModel {
    pub config: ModelConfig,
    pub catalog: Catalog,
    pub store: ParamStore,
    pub encoder: EncoderParams,
    pub bigg: BiggParams,
    pub estimator: EstimatorParams,
    pub explainer: ExplainerParams,
}

impl ReqoModel {
    pub fn new<R: Rng + ?Sized>(
        catalog: Catalog,
        config: ModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        catalog.validate()?;
        let mut store = ParamStore::new();
        let encoder = EncoderParams::new(&catalog, config.encoder, &mut store, rng)?;
        let bigg = BiggParams::new(encoder.feature_dim(), config.bigg, &mut store, rng)?;
        let h = config.bigg.hidden_dim;
        let estimator = EstimatorParams::new(h, config.estimator, &mut store, rng)?;
        let explainer = ExplainerParams::new(h, config.explainer_hidden, &mut store, rng)?;
        Ok(Self {
            config,
            catalog,
            store,
            encoder,
            bigg,
            estimator,
            explainer,
        })
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.bigg.hidden_dim
    }

    /// Resolves `tree` against the catalog. Labels are attached when the
    /// root runtime is positive.
    pub fn prepare(&self, tree: &PlanTree, include_leaves: bool) -> Result<PreparedPlan> {
        let nodes = tree
            .nodes()
            .iter()
            .map(|n| prepare_node(n, &self.catalog))
            .collect::<Result<Vec<_>>>()?;
        let subtrees = tree.extract_subtrees(include_leaves);
        let ac = if tree.root_runtime_ms() > 0.0 {
            Some(
                subtrees
                    .iter()
                    .map(|s| tree.actual_contribution(s))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        Ok(PreparedPlan {
            tree: tree.clone(),
            nodes,
            subtrees,
            ac,
        })
    }

    fn forward(
        &self,
        tape: &mut Tape,
        plans: &[&PreparedPlan],
        with_subtrees: bool,
        mut dropout: Option<&mut Dropout<'_>>,
    ) -> Forward {
        let store = &self.store;
        let mut offsets = Vec::with_capacity(plans.len());
        let mut refs = Vec::new();
        for p in plans {
            offsets.push(refs.len());
            refs.extend(p.nodes.iter());
        }
        let features = self.encoder.encode(tape, store, &refs);

        let mut batch = GraphBatch::default();
        let mut gather = Vec::new();
        for (p, off) in plans.iter().zip(&offsets) {
            batch.push_tree(&p.tree, p.tree.root(), |id| off + id, &mut gather);
        }
        // (subtree graph, owning plan graph); the root subtree reuses the plan graph
        let mut pairs = Vec::new();
        if with_subtrees {
            for (g, (p, off)) in plans.iter().zip(&offsets).enumerate() {
                for s in &p.subtrees {
                    let sg = if s.root_node_id == p.tree.root() {
                        g
                    } else {
                        batch.push_tree(&p.tree, s.root_node_id, |id| off + id, &mut gather)
                    };
                    pairs.push((sg, g));
                }
            }
        }
        let projected = project_inputs(tape, store, features, &self.bigg);
        let x = tape.gather_rows(projected, gather);
        let embeddings = embed_projected(tape, store, x, &batch, &self.bigg);
        let plan_emb = if batch.sequences.len() == plans.len() {
            embeddings
        } else {
            tape.gather_rows(embeddings, (0..plans.len()).collect())
        };
        let (mu, var, integrated) =
            self.estimator
                .forward(tape, store, plan_emb, dropout.as_deref_mut());
        let ec = (with_subtrees && !pairs.is_empty()).then(|| {
            let st = tape.gather_rows(embeddings, pairs.iter().map(|p| p.0).collect());
            let ot = tape.gather_rows(embeddings, pairs.iter().map(|p| p.1).collect());
            let joined = tape.concat_cols(&[st, ot]);
            self.explainer.stack.forward(tape, store, joined, dropout)
        });
        Forward {
            embeddings,
            num_plans: plans.len(),
            mu,
            var,
            integrated,
            ec,
        }
    }

    fn loss_graph(
        &self,
        tape: &mut Tape,
        batch: &TrainBatch<'_>,
        with_explainer: bool,
        weights: LossWeights,
        dropout: Option<&mut Dropout<'_>>,
    ) -> Result<LossVars> {
        if batch.plans.is_empty() {
            return Err(Error::Empty("training batch has no plans"));
        }
        if batch.targets.len() != batch.plans.len() {
            return Err(Error::LengthMismatch {
                left: batch.plans.len(),
                right: batch.targets.len(),
            });
        }
        let f = self.forward(tape, &batch.plans, with_explainer, dropout);
        let uncertainty = tape.gaussian_nll(f.mu, f.var, batch.targets.clone(), VARIANCE_FLOOR);
        let ranking = tape.pair_rank(
            f.integrated,
            rank_pairs(&batch.pairs, &batch.targets),
            self.config.estimator.margin,
        );
        let mut terms = alloc::vec![
            (uncertainty, weights.uncertainty),
            (ranking, weights.ranking)
        ];
        let mut explanation = None;
        if let Some(ec) = f.ec {
            let mut actual = Vec::new();
            let mut groups = Vec::new();
            for p in &batch.plans {
                let ac = p.ac.as_ref().ok_or_else(|| {
                    Error::Label(alloc::format!("plan {} has no labels", p.tree.query_id()))
                })?;
                let lo = actual.len();
                actual.extend_from_slice(ac);
                groups.push((lo, actual.len()));
            }
            let e = tape.contribution_mse(ec, actual, groups);
            terms.push((e, weights.explanation));
            explanation = Some(e);
        }
        let total = tape.weighted_sum(&terms);
        Ok(LossVars {
            total,
            uncertainty,
            ranking,
            explanation,
        })
    }

    /// Training loss and gradients for one batch. The explanation term is
    /// included when `with_explainer` is set.
    pub fn batch_loss(
        &self,
        batch: &TrainBatch<'_>,
        with_explainer: bool,
        weights: LossWeights,
        dropout: Option<&mut Dropout<'_>>,
    ) -> Result<BatchLoss> {
        let mut tape = Tape::new();
        let v = self.loss_graph(&mut tape, batch, with_explainer, weights, dropout)?;
        let (value, grads) = value_and_grads(&tape, v.total, &self.store);
        if !value.is_finite() || !grads.is_finite() {
            return Err(Error::Divergence(alloc::format!(
                "loss {value} over plans of queries {:?}",
                batch
                    .plans
                    .iter()
                    .map(|p| p.tree.query_id())
                    .collect::<Vec<_>>()
            )));
        }
        Ok(BatchLoss {
            total: value,
            uncertainty: tape.value(v.uncertainty).item(),
            ranking: tape.value(v.ranking).item(),
            explanation: v.explanation.map(|e| tape.value(e).item()),
            grads,
        })
    }

    /// Loss value only, without dropout or gradients.
    pub fn loss_value(
        &self,
        batch: &TrainBatch<'_>,
        with_explainer: bool,
        weights: LossWeights,
    ) -> Result<f64> {
        let mut tape = Tape::new();
        let v = self.loss_graph(&mut tape, batch, with_explainer, weights, None)?;
        Ok(tape.value(v.total).item())
    }

    /// Cost estimates in the scaled label space, one per plan.
    pub fn estimate(&self, plans: &[&PreparedPlan]) -> Vec<CostEstimate> {
        if plans.is_empty() {
            return Vec::new();
        }
        let mut tape = Tape::new();
        let f = self.forward(&mut tape, plans, false, None);
        let (mu, var, c) = (
            tape.value(f.mu).data(),
            tape.value(f.var).data(),
            tape.value(f.integrated).data(),
        );
        (0..plans.len())
            .map(|i| CostEstimate {
                mu: mu[i],
                var: var[i],
                integrated: c[i],
            })
            .collect()
    }

    pub fn embed(&self, plans: &[&PreparedPlan]) -> Vec<PlanEmbedding> {
        if plans.is_empty() {
            return Vec::new();
        }
        let mut tape = Tape::new();
        let f = self.forward(&mut tape, plans, false, None);
        let e = tape.value(f.embeddings);
        (0..f.num_plans)
            .map(|i| PlanEmbedding(e.row(i).to_vec()))
            .collect()
    }

    /// Estimated contribution of each of the plan's extracted subtrees.
    pub fn subtree_contributions(&self, plan: &PreparedPlan) -> Vec<SubtreeContribution> {
        let mut tape = Tape::new();
        let f = self.forward(&mut tape, &[plan], true, None);
        let ec =
            f.ec.map(|v| tape.value(v).data().to_vec())
                .unwrap_or_default();
        plan.subtrees
            .iter()
            .enumerate()
            .map(|(k, s)| SubtreeContribution {
                subtree: s.clone(),
                ec: ec[k],
                ac: plan.ac.as_ref().map(|a| a[k]),
            })
            .collect()
    }

    /// Explains a plan: contributions of every closed subtree (leaves
    /// included) and the per-operator contributions derived from them.
    pub fn explain(&self, tree: &PlanTree) -> Result<PlanExplanation> {
        let plan = self.prepare(tree, true)?;
        let subtrees = self.subtree_contributions(&plan);
        let ec: BTreeMap<usize, f64> = subtrees
            .iter()
            .map(|s| (s.subtree.root_node_id, s.ec))
            .collect();
        let operators = node_operation_contributions(tree, &ec)?;
        Ok(PlanExplanation {
            query_id: tree.query_id().into(),
            subtrees,
            operators,
        })
    }

    /// Index of the candidate with the lowest integrated cost.
    pub fn select_plan(&self, plans: &[&PreparedPlan]) -> Result<usize> {
        let scores: Vec<f64> = self.estimate(plans).iter().map(|e| e.integrated).collect();
        select_min(&scores).ok_or(Error::Empty("no candidate plans"))
    }
}
