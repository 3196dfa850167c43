//! Joint training of all model parts with early stopping.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use reqo_core::encoder::Catalog;
use reqo_core::model::{LossWeights, PreparedPlan, TrainBatch};
use reqo_core::optim::{Adam, AdamConfig};
use reqo_core::params::{Dropout, Grads};
use reqo_core::plan::CandidatePlanSet;
use reqo_core::scaler::LabelScaler;
use reqo_core::{ModelConfig, ReqoModel};
use serde::{Deserialize, Serialize};

use crate::dataset::{batches, make_pairs};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub model: ModelConfig,
    /// Ranking margin; overrides the one in `model`.
    pub margin: f64,
    pub learning_rate: f64,
    /// Learning rate multiplier applied after every epoch.
    pub lr_decay: f64,
    /// Reject updates that raise the batch loss, halving the learning rate
    /// and retrying; accepted steps grow it back towards the schedule.
    /// Requires `dropout == 0`.
    pub backtracking: bool,
    /// Minimum number of plans per batch; batches hold whole candidate sets.
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub dropout: f64,
    pub include_explainer: bool,
    pub include_leaf_subtrees: bool,
    pub folds: usize,
    /// Share of training queries held out for early stopping.
    pub validation_fraction: f64,
    pub seed: u64,
    pub loss_weights: LossWeights,
    pub clip_norm: Option<f64>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            margin: 0.1,
            learning_rate: 1e-3,
            lr_decay: 1.0,
            backtracking: false,
            batch_size: 64,
            max_epochs: 100,
            patience: 10,
            dropout: 0.1,
            include_explainer: true,
            include_leaf_subtrees: false,
            folds: 10,
            validation_fraction: 0.1,
            seed: 0,
            loss_weights: LossWeights::default(),
            clip_norm: Some(10.0),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("training config: {m}")));
        if self.folds < 2 {
            return bad("folds must be at least 2");
        }
        if self.patience < 1 {
            return bad("patience must be at least 1");
        }
        if !(self.learning_rate > 0.0) || self.batch_size == 0 {
            return bad("learning rate and batch size must be positive");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay must be in (0, 1]");
        }
        if self.backtracking && self.dropout > 0.0 {
            return bad("backtracking needs dropout 0");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad("validation_fraction must be in [0, 1)");
        }
        if !(self.margin >= 0.0) {
            return bad("margin must be nonnegative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trained {
    pub model: ReqoModel,
    pub scaler: LabelScaler,
    pub config: TrainingConfig,
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
}

/// A candidate set resolved against the model, with scaled targets.
pub struct PreparedSet {
    pub plans: Vec<PreparedPlan>,
    pub targets: Vec<f64>,
}

pub fn prepare_sets(
    model: &ReqoModel,
    scaler: &LabelScaler,
    sets: &[&CandidatePlanSet],
    include_leaves: bool,
) -> Result<Vec<PreparedSet>> {
    sets.iter()
        .map(|s| {
            let plans = s
                .plans
                .iter()
                .map(|p| model.prepare(p, include_leaves))
                .collect::<reqo_core::Result<Vec<_>>>()?;
            let targets = s
                .plans
                .iter()
                .map(|p| scaler.scale_runtime(p.root_runtime_ms()))
                .collect::<reqo_core::Result<Vec<_>>>()?;
            Ok(PreparedSet { plans, targets })
        })
        .collect()
}

fn train_batch<'a>(sets: &'a [PreparedSet], group: &[usize]) -> TrainBatch<'a> {
    let mut b = TrainBatch::default();
    for &i in group {
        let base = b.plans.len();
        let s = &sets[i];
        b.plans.extend(s.plans.iter());
        b.targets.extend_from_slice(&s.targets);
        b.pairs.extend(
            make_pairs(s.plans.len())
                .into_iter()
                .map(|(x, y)| (base + x, base + y)),
        );
    }
    b
}

fn plan_counts(sets: &[PreparedSet]) -> Vec<usize> {
    sets.iter().map(|s| s.plans.len()).collect()
}

/// Mean batch loss over `sets`.
pub fn evaluate_loss(
    model: &ReqoModel,
    sets: &[PreparedSet],
    config: &TrainingConfig,
) -> Result<f64> {
    let order: Vec<usize> = (0..sets.len()).collect();
    let groups = batches(&plan_counts(sets), &order, config.batch_size);
    let mut total = 0.0;
    for g in &groups {
        let b = train_batch(sets, g);
        total += model.loss_value(&b, config.include_explainer, config.loss_weights)?;
    }
    Ok(total / groups.len().max(1) as f64)
}

const MAX_BACKTRACKS: usize = 30;

/// One accepted update: the batch loss after the step does not exceed the
/// loss before it. A rejected step restarts the moment estimates, so the
/// retry moves along the current gradient's sign.
fn step_monotone(
    model: &mut ReqoModel,
    opt: &mut Adam,
    batch: &TrainBatch<'_>,
    grads: &Grads,
    config: &TrainingConfig,
    scheduled_lr: f64,
) -> Result<()> {
    let before = model.loss_value(batch, config.include_explainer, config.loss_weights)?;
    let saved = model.store.clone();
    for _ in 0..MAX_BACKTRACKS {
        opt.step(&mut model.store, grads);
        let after = model.loss_value(batch, config.include_explainer, config.loss_weights)?;
        if after <= before {
            opt.config.lr = (opt.config.lr * 1.1).min(scheduled_lr);
            return Ok(());
        }
        model.store = saved.clone();
        let lr = opt.config.lr * 0.5;
        *opt = Adam::new(AdamConfig { lr, ..opt.config }, &model.store);
    }
    model.store = saved;
    Ok(())
}

/// Trains on `train_sets`, early-stopping on `valid_sets` (or on the training
/// loss when there is no validation data). The scaler is fit on `train_sets`.
pub fn train(
    catalog: &Catalog,
    train_sets: &[&CandidatePlanSet],
    valid_sets: &[&CandidatePlanSet],
    config: &TrainingConfig,
) -> Result<Trained> {
    config.validate()?;
    if train_sets.is_empty() {
        return Err(Error::Config("no training queries".into()));
    }
    let scaler = LabelScaler::fit(train_sets.iter().flat_map(|s| s.runtimes()))?;
    let mut model_config = config.model;
    model_config.estimator.margin = config.margin;
    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = ReqoModel::new(catalog.clone(), model_config, &mut init_rng)?;

    let train_data = prepare_sets(&model, &scaler, train_sets, config.include_leaf_subtrees)?;
    let valid_data = prepare_sets(&model, &scaler, valid_sets, config.include_leaf_subtrees)?;
    let mut opt = Adam::new(
        AdamConfig {
            lr: config.learning_rate,
            clip_norm: config.clip_norm,
            ..AdamConfig::default()
        },
        &model.store,
    );
    let mut scheduled_lr = config.learning_rate;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(2));

    let mut best = model.clone();
    let mut best_loss = f64::INFINITY;
    let mut best_epoch = 0;
    let mut history = Vec::new();
    let mut stale = 0;
    let mut order: Vec<usize> = (0..train_data.len()).collect();
    let counts = plan_counts(&train_data);
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let groups = batches(&counts, &order, config.batch_size);
        let mut train_loss = 0.0;
        for g in &groups {
            let b = train_batch(&train_data, g);
            let mut dropout = Dropout {
                rng: &mut dropout_rng,
                rate: config.dropout,
            };
            let d = (config.dropout > 0.0).then_some(&mut dropout);
            let out = model
                .batch_loss(&b, config.include_explainer, config.loss_weights, d)
                .map_err(|e| match e {
                    reqo_core::Error::Divergence(m) => {
                        log::error!("epoch {epoch}: {m}");
                        Error::Divergence(m)
                    }
                    other => other.into(),
                })?;
            train_loss += out.total;
            if config.backtracking {
                step_monotone(&mut model, &mut opt, &b, &out.grads, config, scheduled_lr)?;
            } else {
                opt.step(&mut model.store, &out.grads);
            }
        }
        train_loss /= groups.len() as f64;
        scheduled_lr *= config.lr_decay;
        opt.config.lr = if config.backtracking {
            opt.config.lr.min(scheduled_lr)
        } else {
            scheduled_lr
        };
        let validation_loss = if valid_data.is_empty() {
            train_loss
        } else {
            evaluate_loss(&model, &valid_data, config)?
        };
        log::info!("epoch {epoch}: train {train_loss:.5} validation {validation_loss:.5}");
        history.push(EpochStats {
            epoch,
            train_loss,
            validation_loss,
        });
        if validation_loss < best_loss {
            best_loss = validation_loss;
            best = model.clone();
            best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                log::info!("early stop after epoch {epoch}; best epoch {best_epoch}");
                break;
            }
        }
    }
    Ok(Trained {
        model: best,
        scaler,
        config: config.clone(),
        history,
        best_epoch,
    })
}
