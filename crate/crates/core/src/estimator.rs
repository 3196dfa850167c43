//! Cost estimation head: expected cost, data-uncertainty variance and the
//! learned integration of both into a single ranking score.

use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{gaussian_nll_value, Activation, RankPair, Tape, Var};
use crate::bigg::PlanEmbedding;
use crate::error::{Error, Result};
use crate::math;
use crate::params::{Dropout, Mlp, ParamStore};
use crate::tensor::Matrix;

/// Variance floor inside the Gaussian likelihood.
pub const VARIANCE_FLOOR: f64 = 1e-6;

const LEAKY: Activation = Activation::LeakyRelu(0.01);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub hidden_dim: usize,
    /// Hidden width of the integrator; `None` is a single affine layer.
    pub integrator_hidden: Option<usize>,
    pub margin: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 64,
            integrator_hidden: Some(16),
            margin: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorParams {
    pub config: EstimatorConfig,
    pub trunk: Mlp,
    pub mean_branch: Mlp,
    pub var_branch: Mlp,
    pub integrator: Mlp,
}

impl EstimatorParams {
    pub fn new<R: Rng + ?Sized>(
        embedding_dim: usize,
        config: EstimatorConfig,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        let h = config.hidden_dim;
        if h == 0 || embedding_dim == 0 || config.integrator_hidden == Some(0) {
            return Err(Error::Config(
                "estimator layer dims must be positive".into(),
            ));
        }
        if !(config.margin >= 0.0) {
            return Err(Error::Config("ranking margin must be nonnegative".into()));
        }
        let integrator_dims: Vec<usize> = match config.integrator_hidden {
            Some(ih) => vec![2, ih, 1],
            None => vec![2, 1],
        };
        Ok(Self {
            config,
            trunk: Mlp::new(
                "estimator.trunk",
                &[embedding_dim, h, h, h],
                LEAKY,
                LEAKY,
                store,
                rng,
            ),
            mean_branch: Mlp::new(
                "estimator.mean",
                &[h, h, h, 1],
                LEAKY,
                Activation::Sigmoid,
                store,
                rng,
            ),
            var_branch: Mlp::new(
                "estimator.var",
                &[h, h, h, 1],
                LEAKY,
                Activation::Softplus,
                store,
                rng,
            ),
            integrator: Mlp::new(
                "estimator.integrator",
                &integrator_dims,
                LEAKY,
                Activation::Sigmoid,
                store,
                rng,
            ),
        })
    }

    /// Batched forward over `P x hidden` embeddings; returns `(mu, var, integrated)`, each `P x 1`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        embeddings: Var,
        mut dropout: Option<&mut Dropout<'_>>,
    ) -> (Var, Var, Var) {
        let t = self
            .trunk
            .forward(tape, store, embeddings, dropout.as_deref_mut());
        let mu = self
            .mean_branch
            .forward(tape, store, t, dropout.as_deref_mut());
        let var = self.var_branch.forward(tape, store, t, dropout);
        let c = self.integrate_var(tape, store, mu, var);
        (mu, var, c)
    }

    pub fn integrate_var(&self, tape: &mut Tape, store: &ParamStore, mu: Var, var: Var) -> Var {
        let both = tape.concat_cols(&[mu, var]);
        self.integrator.forward(tape, store, both, None)
    }
}

/// Estimated cost of one plan, in the scaled label space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub mu: f64,
    pub var: f64,
    pub integrated: f64,
}

pub fn estimate(
    embedding: &PlanEmbedding,
    params: &EstimatorParams,
    store: &ParamStore,
) -> Result<CostEstimate> {
    let expected = params.trunk.input_dim(store);
    if embedding.0.len() != expected {
        return Err(Error::Config(alloc::format!(
            "embedding length {} does not match estimator input {expected}",
            embedding.0.len()
        )));
    }
    let mut tape = Tape::new();
    let e = tape.constant(Matrix::row_vector(embedding.0.clone()));
    let (mu, var, c) = params.forward(&mut tape, store, e, None);
    Ok(CostEstimate {
        mu: tape.value(mu).item(),
        var: tape.value(var).item(),
        integrated: tape.value(c).item(),
    })
}

/// Learned integration of an expected cost and its variance.
pub fn integrate(mu: f64, var: f64, params: &EstimatorParams, store: &ParamStore) -> f64 {
    let mut tape = Tape::new();
    let m = tape.constant(Matrix::scalar(mu));
    let v = tape.constant(Matrix::scalar(var));
    let c = params.integrate_var(&mut tape, store, m, v);
    tape.value(c).item()
}

/// Gaussian negative log-likelihood over `(mu, var, y)` triples.
pub fn uncertainty_loss(batch: &[(f64, f64, f64)]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("uncertainty loss over an empty batch"));
    }
    let mu: Vec<f64> = batch.iter().map(|b| b.0).collect();
    let var: Vec<f64> = batch.iter().map(|b| b.1).collect();
    let y: Vec<f64> = batch.iter().map(|b| b.2).collect();
    Ok(gaussian_nll_value(&mu, &var, &y, VARIANCE_FLOOR))
}

/// `+1` when the first plan is slower, otherwise `-1` (ties included).
pub fn pair_label(y_i: f64, y_j: f64) -> f64 {
    if y_i > y_j {
        1.0
    } else {
        -1.0
    }
}

/// Exponentiated margin ranking loss over `(C_i, C_j, y_i, y_j)` tuples.
pub fn ranking_loss(pairs: &[(f64, f64, f64, f64)], margin: f64) -> f64 {
    pairs
        .iter()
        .map(|&(ci, cj, yi, yj)| {
            let s = pair_label(yi, yj);
            math::exp((-s * (ci - cj) + margin).max(0.0))
        })
        .sum()
}

/// Model outputs and the scaled label of one plan.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanOutcome {
    pub mu: f64,
    pub var: f64,
    pub integrated: f64,
    pub target: f64,
}

/// Plans of a batch plus the index pairs compared by the ranking term.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossBatch {
    pub plans: Vec<PlanOutcome>,
    pub pairs: Vec<(usize, usize)>,
}

/// Uncertainty loss plus ranking loss, unweighted.
pub fn combined_loss(batch: &LossBatch, margin: f64) -> Result<f64> {
    let triples: Vec<(f64, f64, f64)> = batch
        .plans
        .iter()
        .map(|p| (p.mu, p.var, p.target))
        .collect();
    let unc = uncertainty_loss(&triples)?;
    let quads: Vec<(f64, f64, f64, f64)> = batch
        .pairs
        .iter()
        .map(|&(i, j)| {
            let (a, b) = (&batch.plans[i], &batch.plans[j]);
            (a.integrated, b.integrated, a.target, b.target)
        })
        .collect();
    Ok(unc + ranking_loss(&quads, margin))
}

pub(crate) fn rank_pairs(pairs: &[(usize, usize)], targets: &[f64]) -> Vec<RankPair> {
    pairs
        .iter()
        .map(|&(i, j)| RankPair {
            i,
            j,
            sign: pair_label(targets[i], targets[j]),
        })
        .collect()
}

/// Index of the lowest score; ties go to the lowest index.
pub fn select_min(scores: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &s) in scores.iter().enumerate() {
        match best {
            Some((_, b)) if !(s < b) => {}
            _ => best = Some((i, s)),
        }
    }
    best.map(|(i, _)| i)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zeroed(config: EstimatorConfig) -> (ParamStore, EstimatorParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = EstimatorParams::new(4, config, &mut store, &mut rng).unwrap();
        store.map_all(|_| 0.0);
        (store, p)
    }

    #[test]
    fn zero_parameters_give_closed_form_outputs() {
        let (store, p) = zeroed(EstimatorConfig::default());
        let e = estimate(&PlanEmbedding(vec![0.3, -1.0, 2.0, 0.0]), &p, &store).unwrap();
        assert_eq!(e.mu, 0.5);
        assert!((e.var - core::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(e.integrated, 0.5);
        assert!(estimate(&PlanEmbedding(vec![0.0; 3]), &p, &store).is_err());
    }

    #[test]
    fn affine_integrator_examples() {
        let config = EstimatorConfig {
            integrator_hidden: None,
            ..EstimatorConfig::default()
        };
        let (mut store, p) = zeroed(config);
        let (w, _) = p.integrator.layers[0];
        store.get_mut(w).data_mut()[0] = 1.0; // W = [1, 0]
        assert_eq!(integrate(0.0, 0.7, &p, &store), 0.5);
        let mut last = f64::NEG_INFINITY;
        for k in 0..=10 {
            let c = integrate(k as f64 / 10.0, 0.3, &p, &store);
            assert!(c > last);
            last = c;
        }
        store.get_mut(w).data_mut()[0] = 0.0;
        let (_, b) = p.integrator.layers[0];
        store.get_mut(b).data_mut()[0] = -1.3;
        let c0 = integrate(0.1, 0.2, &p, &store);
        assert_eq!(c0, integrate(0.9, 5.0, &p, &store));
        assert!(c0 > 0.0 && c0 < 1.0);
    }

    #[test]
    fn uncertainty_loss_examples() {
        assert_eq!(uncertainty_loss(&[(0.4, 1.0, 0.4)]).unwrap(), 0.0);
        assert_eq!(uncertainty_loss(&[(0.0, 1.0, 1.0)]).unwrap(), 1.0);
        let e = core::f64::consts::E;
        assert!((uncertainty_loss(&[(0.3, e, 0.3)]).unwrap() - 0.5).abs() < 1e-12);
        assert!(uncertainty_loss(&[]).is_err());
        // Floor keeps a zero variance finite.
        assert!(uncertainty_loss(&[(0.0, 0.0, 0.1)]).unwrap().is_finite());
    }

    #[test]
    fn ranking_loss_examples() {
        assert_eq!(ranking_loss(&[(0.8, 0.2, 2.0, 1.0)], 0.1), 1.0);
        assert!((ranking_loss(&[(0.2, 0.7, 2.0, 1.0)], 0.1) - libm::exp(0.6)).abs() < 1e-12);
        assert!((ranking_loss(&[(0.4, 0.4, 2.0, 1.0)], 0.1) - libm::exp(0.1)).abs() < 1e-12);
        assert_eq!(ranking_loss(&[], 0.1), 0.0);
    }

    #[test]
    fn combined_loss_examples() {
        let p = |mu, integrated, target| PlanOutcome {
            mu,
            var: 1.0,
            integrated,
            target,
        };
        // Both terms at their floors: 0 + one pair at exp(0).
        // mu == y and var == 1 -> uncertainty 0; C gap 0.8 the right way -> 1.
        let floor = LossBatch {
            plans: vec![p(0.2, 0.1, 0.2), p(0.8, 0.9, 0.8)],
            pairs: vec![(0, 1)],
        };
        assert_eq!(combined_loss(&floor, 0.1).unwrap(), 1.0);

        let single = LossBatch {
            plans: vec![p(0.0, 0.5, 1.0)],
            pairs: vec![],
        };
        assert_eq!(combined_loss(&single, 0.1).unwrap(), 1.0);

        // Hand computed: uncertainty = ((0.5^2) + (0.5^2)) / 2 = 0.25,
        // ranking: y0 < y1 so sign -1, arg = (0.6 - 0.4) + 0.1 = 0.3.
        let two = LossBatch {
            plans: vec![p(0.5, 0.6, 0.0), p(0.5, 0.4, 1.0)],
            pairs: vec![(0, 1)],
        };
        let expected = 0.25 + libm::exp(0.3);
        assert!((combined_loss(&two, 0.1).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn selection_examples() {
        assert_eq!(select_min(&[0.3]), Some(0));
        assert_eq!(select_min(&[0.9, 0.2, 0.5]), Some(1));
        assert_eq!(select_min(&[0.4, 0.4]), Some(0));
        assert_eq!(select_min(&[]), None);
    }
}
