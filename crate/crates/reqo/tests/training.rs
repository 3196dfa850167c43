use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use reqo::dataset::{holdout, kfold, select};
use reqo::train::{train, TrainingConfig};
use reqo::{Oracle, OracleConfig};
use reqo_core::estimator::VARIANCE_FLOOR;
use reqo_core::{ModelConfig, ReqoModel};

fn workload(queries: usize, seed: u64) -> Oracle {
    Oracle::new(OracleConfig {
        seed,
        num_queries: queries,
        max_nodes: 8,
        num_tables: 4,
        ..OracleConfig::default()
    })
    .unwrap()
}

fn small_config() -> TrainingConfig {
    let mut model = ModelConfig::with_hidden(8);
    model.encoder.type_dim = 4;
    model.encoder.column_dim = 4;
    model.bigg.num_heads = 2;
    model.bigg.num_layers = 2;
    TrainingConfig {
        model,
        batch_size: 20,
        max_epochs: 3,
        dropout: 0.0,
        ..TrainingConfig::default()
    }
}

#[test]
fn zero_epochs_returns_initialization() {
    let oracle = workload(6, 1);
    let sets = oracle.generate_workload().unwrap();
    let refs: Vec<_> = sets.iter().collect();
    let config = TrainingConfig {
        max_epochs: 0,
        ..small_config()
    };
    let t = train(&oracle.catalog, &refs, &[], &config).unwrap();
    let mut model_config = config.model;
    model_config.estimator.margin = config.margin;
    let init = ReqoModel::new(
        oracle.catalog.clone(),
        model_config,
        &mut ChaCha8Rng::seed_from_u64(config.seed),
    )
    .unwrap();
    assert_eq!(t.model, init);
    assert!(t.history.is_empty());
}

#[test]
fn same_seed_same_validation_loss() {
    let oracle = workload(12, 2);
    let sets = oracle.generate_workload().unwrap();
    let (tr, va) = holdout(&(0..sets.len()).collect::<Vec<_>>(), 0.25, 0);
    let (tr, va) = (select(&sets, &tr), select(&sets, &va));
    let config = TrainingConfig {
        dropout: 0.1,
        ..small_config()
    };
    let a = train(&oracle.catalog, &tr, &va, &config).unwrap();
    let b = train(&oracle.catalog, &tr, &va, &config).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.model, b.model);
    // the scaler only sees training queries
    let lo = tr
        .iter()
        .flat_map(|s| s.runtimes())
        .fold(f64::INFINITY, f64::min);
    assert_eq!(a.scaler.ln_ymin, lo.ln());
}

#[test]
fn folds_keep_queries_whole() {
    let folds = kfold(10, 10, 3).unwrap();
    for (tr, te) in &folds {
        assert_eq!(te.len(), 1);
        assert_eq!(tr.len(), 9);
        assert!(!tr.contains(&te[0]));
    }
    let mut all: Vec<usize> = folds.iter().map(|f| f.1[0]).collect();
    all.sort_unstable();
    assert_eq!(all, (0..10).collect::<Vec<_>>());
    assert_eq!(folds, kfold(10, 10, 3).unwrap());
    assert!(kfold(3, 10, 3).is_err());
}

/// Ten plans in one full batch without the explainer. With backtracking the
/// loss never increases between epochs. Its floor (variance at its lower
/// bound, every pair ordered past the margin) is an infimum: the mean head
/// cannot reach the scaled labels 0 and 1 exactly, so the run has to close
/// most of the distance to it rather than touch it.
#[test]
fn overfits_ten_plans() {
    let oracle = workload(2, 4);
    let sets = oracle.generate_workload().unwrap();
    let refs: Vec<_> = sets.iter().collect();
    let pairs = 2 * 10;
    let floor = VARIANCE_FLOOR.ln() / 2.0 + pairs as f64;
    let config = TrainingConfig {
        model: ModelConfig::with_hidden(16),
        batch_size: 10,
        max_epochs: 500,
        patience: 500,
        dropout: 0.0,
        learning_rate: 0.1,
        include_explainer: false,
        backtracking: true,
        ..TrainingConfig::default()
    };
    let t = train(&oracle.catalog, &refs, &[], &config).unwrap();
    let losses: Vec<f64> = t.history.iter().map(|h| h.train_loss).collect();
    assert_eq!(losses.len(), 500);
    for (e, w) in losses.windows(2).enumerate() {
        assert!(
            w[1] <= w[0],
            "loss rose at epoch {}: {} -> {}",
            e + 2,
            w[0],
            w[1]
        );
    }
    let (first, last) = (losses[0], losses[499]);
    assert!(last >= floor);
    assert!(
        last - floor <= 0.5 * (first - floor),
        "loss {first} -> {last}, floor {floor}"
    );
}
