use std::fs;

use reqo::checkpoint::catalog_fingerprint;
use reqo::service::Selector;
use reqo::train::{train, TrainingConfig};
use reqo::{Checkpoint, Error, Oracle, OracleConfig};
use reqo_core::ModelConfig;

fn trained() -> (Oracle, Checkpoint) {
    let oracle = Oracle::new(OracleConfig {
        seed: 3,
        num_queries: 8,
        max_nodes: 10,
        ..OracleConfig::default()
    })
    .unwrap();
    let sets = oracle.generate_workload().unwrap();
    let refs: Vec<_> = sets.iter().collect();
    let mut model = ModelConfig::with_hidden(8);
    model.bigg.num_heads = 2;
    let config = TrainingConfig {
        model,
        max_epochs: 2,
        batch_size: 10,
        ..TrainingConfig::default()
    };
    let t = train(&oracle.catalog, &refs, &[], &config).unwrap();
    (oracle, Checkpoint::from_trained(t))
}

#[test]
fn save_load_reproduces_outputs_bit_for_bit() {
    let (oracle, ck) = trained();
    let probe = oracle.generate_workload().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path, Some(&oracle.catalog)).unwrap();
    assert_eq!(back, ck);
    for set in &probe {
        let a = ck.estimate_plans(&set.plans).unwrap();
        let b = back.estimate_plans(&set.plans).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.mu.to_bits(), y.mu.to_bits());
            assert_eq!(x.var.to_bits(), y.var.to_bits());
            assert_eq!(x.integrated.to_bits(), y.integrated.to_bits());
        }
        assert_eq!(
            ck.rank(set, Selector::Integrated).unwrap(),
            back.rank(set, Selector::Integrated).unwrap()
        );
        let e1 = ck.explain(&set.plans[0]).unwrap();
        let e2 = back.explain(&set.plans[0]).unwrap();
        assert_eq!(e1, e2);
    }
}

#[test]
fn truncated_file_fails_to_load() {
    let (_, ck) = trained();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    let text = ck.to_json();
    fs::write(&path, &text[..text.len() / 2]).unwrap();
    assert!(matches!(
        Checkpoint::load(&path, None),
        Err(Error::Json { .. })
    ));
}

#[test]
fn mismatched_catalog_names_both_fingerprints() {
    let (_, ck) = trained();
    let other = Oracle::new(OracleConfig {
        num_tables: 3,
        ..OracleConfig::default()
    })
    .unwrap()
    .catalog;
    let err = Checkpoint::from_json(&ck.to_json(), Some(&other)).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains(&ck.catalog_fingerprint), "{msg}");
    assert!(msg.contains(&catalog_fingerprint(&other)), "{msg}");
}

#[test]
fn unknown_format_version_is_rejected() {
    let (_, ck) = trained();
    let text = ck
        .to_json()
        .replacen("\"format_version\":1", "\"format_version\":99", 1);
    assert!(matches!(
        Checkpoint::from_json(&text, None),
        Err(Error::Checkpoint(_))
    ));
}
