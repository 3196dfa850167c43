//! Subtree contribution estimation and per-operator attribution.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{contribution_mse_value, Activation, Tape};
use crate::bigg::PlanEmbedding;
use crate::error::{Error, Result};
use crate::math;
use crate::params::{Mlp, ParamStore};
use crate::plan::{PlanTree, SubtreeRef};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainerParams {
    pub embedding_dim: usize,
    /// Four layers over `[subtree embedding | plan embedding]`, logistic output.
    pub stack: Mlp,
}

impl ExplainerParams {
    pub fn new<R: Rng + ?Sized>(
        embedding_dim: usize,
        hidden: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        if embedding_dim == 0 || hidden == 0 {
            return Err(Error::Config("explainer dims must be positive".into()));
        }
        Ok(Self {
            embedding_dim,
            stack: Mlp::new(
                "explainer",
                &[2 * embedding_dim, hidden, hidden, hidden, 1],
                Activation::LeakyRelu(0.01),
                Activation::Sigmoid,
                store,
                rng,
            ),
        })
    }
}

/// Estimated contribution of a subtree to its plan, in `[0, 1]`.
pub fn explain_subtree(
    emb_subtree: &PlanEmbedding,
    emb_plan: &PlanEmbedding,
    params: &ExplainerParams,
    store: &ParamStore,
) -> Result<f64> {
    let d = params.embedding_dim;
    if emb_subtree.0.len() != d || emb_plan.0.len() != d {
        return Err(Error::Config(alloc::format!(
            "explainer expects two embeddings of length {d}, got {} and {}",
            emb_subtree.0.len(),
            emb_plan.0.len()
        )));
    }
    let mut joined = emb_subtree.0.clone();
    joined.extend_from_slice(&emb_plan.0);
    let mut tape = Tape::new();
    let x = tape.constant(Matrix::row_vector(joined));
    let y = params.stack.forward(&mut tape, store, x, None);
    Ok(tape.value(y).item())
}

/// Mean over plans of the mean squared gap between actual and estimated
/// subtree contributions. Each entry is `(estimated, actual)` for one plan.
pub fn explanation_loss(plans: &[(Vec<f64>, Vec<f64>)]) -> Result<f64> {
    if plans.is_empty() {
        return Err(Error::Empty("explanation loss over no plans"));
    }
    let mut est = Vec::new();
    let mut act = Vec::new();
    let mut groups = Vec::with_capacity(plans.len());
    for (e, a) in plans {
        if e.len() != a.len() {
            return Err(Error::LengthMismatch {
                left: e.len(),
                right: a.len(),
            });
        }
        if e.is_empty() {
            return Err(Error::Empty("plan without subtree contributions"));
        }
        let lo = est.len();
        est.extend_from_slice(e);
        act.extend_from_slice(a);
        groups.push((lo, est.len()));
    }
    Ok(contribution_mse_value(&est, &act, &groups))
}

/// Estimated (and, when labels exist, actual) contribution of one subtree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubtreeContribution {
    pub subtree: SubtreeRef,
    pub ec: f64,
    pub ac: Option<f64>,
}

/// Contribution attributed to a single operator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodeOpContribution {
    pub node_id: usize,
    pub value: f64,
    /// Set when the subtree estimates were inconsistent and the value is negative.
    pub negative: bool,
}

/// Converts subtree contributions into per-operator contributions: a leaf
/// keeps its subtree value, an inner node keeps its subtree value minus the
/// subtree values of its children. Output is in postorder.
pub fn node_operation_contributions(
    tree: &PlanTree,
    ec_by_root: &BTreeMap<usize, f64>,
) -> Result<Vec<NodeOpContribution>> {
    let ec = |id: usize| ec_by_root.get(&id).copied().ok_or(Error::Coverage(id));
    let mut out = Vec::with_capacity(tree.len());
    for id in tree.postorder() {
        let own = ec(id)?;
        let mut value = own;
        for &c in tree.children(id) {
            value -= ec(c)?;
        }
        if value < 0.0 {
            log::warn!("negative operator contribution {value} at node {id}");
        }
        out.push(NodeOpContribution {
            node_id: id,
            value,
            negative: value < 0.0,
        });
    }
    Ok(out)
}

/// Cosine of the angle between two embeddings.
pub fn cosine_similarity(a: &PlanEmbedding, b: &PlanEmbedding) -> Result<f64> {
    if a.0.len() != b.0.len() {
        return Err(Error::LengthMismatch {
            left: a.0.len(),
            right: b.0.len(),
        });
    }
    let dot: f64 = a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum();
    let na = math::sqrt(a.0.iter().map(|x| x * x).sum());
    let nb = math::sqrt(b.0.iter().map(|x| x * x).sum());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Undefined("cosine similarity of a zero vector"));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plan::tree_from_shape;
    use alloc::vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_params_give_one_half() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = ExplainerParams::new(3, 8, &mut store, &mut rng).unwrap();
        let a = PlanEmbedding(vec![0.2, -0.4, 1.0]);
        let b = PlanEmbedding(vec![1.0, 0.0, -2.0]);
        let v = explain_subtree(&a, &b, &p, &store).unwrap();
        assert!((0.0..=1.0).contains(&v));
        assert_eq!(v, explain_subtree(&a, &b, &p, &store).unwrap());
        store.map_all(|_| 0.0);
        assert_eq!(explain_subtree(&a, &b, &p, &store).unwrap(), 0.5);
        assert!(explain_subtree(&PlanEmbedding(vec![0.0; 2]), &b, &p, &store).is_err());
    }

    #[test]
    fn explanation_loss_examples() {
        assert_eq!(
            explanation_loss(&[(vec![0.3, 1.0], vec![0.3, 1.0])]).unwrap(),
            0.0
        );
        assert_eq!(explanation_loss(&[(vec![0.5], vec![1.0])]).unwrap(), 0.25);
        // per-plan means 0.1 and 0.3
        let a = (vec![0.0, 0.0], vec![libm::sqrt(0.1), libm::sqrt(0.1)]);
        let b = (vec![0.0], vec![libm::sqrt(0.3)]);
        assert!((explanation_loss(&[a, b]).unwrap() - 0.2).abs() < 1e-12);
        assert!(explanation_loss(&[]).is_err());
        assert!(explanation_loss(&[(vec![0.1], vec![])]).is_err());
    }

    #[test]
    fn operator_contribution_examples() {
        let single = tree_from_shape("q", &[("A", &[])]).unwrap();
        let ops = node_operation_contributions(&single, &BTreeMap::from([(0, 0.9)])).unwrap();
        assert_eq!(ops[0].value, 0.9);

        let t = tree_from_shape("q", &[("A", &[1, 2]), ("B", &[]), ("C", &[])]).unwrap();
        let ops = node_operation_contributions(&t, &BTreeMap::from([(0, 1.0), (1, 0.6), (2, 0.3)]))
            .unwrap();
        let by_id = |id| ops.iter().find(|o| o.node_id == id).unwrap().value;
        assert!((by_id(0) - 0.1).abs() < 1e-12);
        assert_eq!(by_id(1), 0.6);
        assert_eq!(by_id(2), 0.3);

        let ops = node_operation_contributions(&t, &BTreeMap::from([(0, 0.5), (1, 0.4), (2, 0.3)]))
            .unwrap();
        let a = ops.iter().find(|o| o.node_id == 0).unwrap();
        assert!((a.value + 0.2).abs() < 1e-12);
        assert!(a.negative);

        assert_eq!(
            node_operation_contributions(&t, &BTreeMap::from([(0, 0.5), (1, 0.4)])),
            Err(Error::Coverage(2))
        );
    }

    #[test]
    fn cosine_examples() {
        let a = PlanEmbedding(vec![1.0, 2.0, 3.0]);
        assert!((cosine_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        let x = PlanEmbedding(vec![1.0, 0.0]);
        let y = PlanEmbedding(vec![0.0, 5.0]);
        assert_eq!(cosine_similarity(&x, &y).unwrap(), 0.0);
        assert!(cosine_similarity(&x, &PlanEmbedding(vec![0.0, 0.0])).is_err());
    }
}
