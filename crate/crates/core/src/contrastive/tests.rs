use ndarray::Array2;

use super::*;
use crate::connectome::BrainGraphSnapshot;
use crate::diffcore::grad_check;
use crate::sgtmodel::{SgtConfig, SgtModel};
use crate::testutil::random_network;

fn tiny_config() -> SgtConfig {
    SgtConfig {
        embed_dim: 8,
        heads: 2,
        layer_pairs: 1,
        ..SgtConfig::default()
    }
}

fn batch_from(tape: &mut Tape<f64>, anchor: Vec<f64>, pos: Vec<f64>, neg: Vec<f64>, k: usize) -> ContrastBatch {
    let d = anchor.len();
    let p = pos.len() / d;
    ContrastBatch {
        anchor: tape.input(anchor, &[d]).unwrap(),
        positives: tape.input(pos, &[p, d]).unwrap(),
        negatives: tape.input(neg, &[p * k, d]).unwrap(),
        negatives_per_positive: k,
    }
}

#[test]
fn single_region_corruption_is_identity() {
    let base = random_network(2, 3, 10, 1);
    let net = DynamicBrainNetwork {
        subject_id: "one".into(),
        group: base.group,
        region_labels: vec!["R0".into()],
        snapshots: base
            .snapshots
            .iter()
            .map(|s| BrainGraphSnapshot {
                timestep: s.timestep,
                adjacency: Array2::ones((1, 1)),
                node_features: s.node_features.slice(ndarray::s![0..1, ..]).to_owned(),
                zero_variance: vec![],
            })
            .collect(),
    };
    assert_eq!(corrupt_network(&net, 9), net);
}

#[test]
fn corruption_shuffles_features_and_keeps_adjacency() {
    let net = random_network(12, 4, 10, 2);
    let c = corrupt_network(&net, 5);
    assert_ne!(c, net);
    for (a, b) in net.snapshots.iter().zip(&c.snapshots) {
        assert_eq!(a.adjacency, b.adjacency);
        let key = |x: &Array2<f64>| {
            let mut rows: Vec<Vec<u64>> = x
                .rows()
                .into_iter()
                .map(|r| r.iter().map(|v| v.to_bits()).collect())
                .collect();
            rows.sort();
            rows
        };
        assert_eq!(key(&a.node_features), key(&b.node_features));
    }
    assert_eq!(corrupt_network(&net, 5), c);
}

#[test]
fn corrupted_embeddings_differ_almost_everywhere() {
    let net = random_network(30, 4, 20, 3);
    let mut store = ParameterStore::<f64>::new(8);
    let model = SgtModel::new(&mut store, &SgtConfig::default(), 20).unwrap();
    let a = model.embed(&store, &net).unwrap();
    let b = model.embed(&store, &corrupt_network(&net, 1)).unwrap();
    let differ = a.values.iter().zip(&b.values).filter(|(x, y)| x != y).count();
    assert!(differ as f64 >= 0.99 * a.values.len() as f64);
}

#[test]
fn estimator_score_cases() {
    let identity = [1.0, 0.0, 0.0, 1.0];
    assert_eq!(estimator_score(&[1.0, 0.0], &[1.0, 0.0], &identity), 1.0);
    assert_eq!(estimator_score(&[0.3, -2.0], &[1.5, 4.0], &[0.0; 4]), 0.0);
    let w = [0.2f64, -0.7, 1.1, 0.4];
    let (l, g) = ([0.3f64, -2.0], [1.5f64, 4.0]);
    let doubled = estimator_score(&[0.6, -4.0], &g, &w);
    assert!((doubled - 2.0 * estimator_score(&l, &g, &w)).abs() < 1e-14);
    let doubled = estimator_score(&l, &[3.0, 8.0], &w);
    assert!((doubled - 2.0 * estimator_score(&l, &g, &w)).abs() < 1e-14);
}

#[test]
fn equal_logits_give_log_of_candidate_count() {
    let mut tape = Tape::new();
    let batch = batch_from(&mut tape, vec![0.5; 4], vec![0.1; 12], vec![0.9; 108], 9);
    let w = tape.input(vec![0.0; 16], &[4, 4]).unwrap();
    let loss = infonce_loss(&mut tape, &batch, w).unwrap();
    assert!((tape.scalar(loss) - 10f64.ln()).abs() < 1e-12);
}

#[test]
fn dominant_positive_drives_loss_to_zero() {
    let mut tape = Tape::new();
    let batch = batch_from(
        &mut tape,
        vec![1.0, 0.0],
        vec![50.0, 0.0],
        vec![-50.0, 0.0, -50.0, 0.0],
        2,
    );
    let w = tape.input(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
    let loss = infonce_loss(&mut tape, &batch, w).unwrap();
    assert!(tape.scalar(loss) >= 0.0 && tape.scalar(loss) < 1e-40);
    let loss = infomax_loss(&mut tape, &batch, w).unwrap();
    assert!(tape.scalar(loss) < 1e-20);
}

#[test]
fn contrast_losses_pass_gradient_check() {
    for objective in [Objective::InfoNce, Objective::InfoMax] {
        let mut store = ParameterStore::<f64>::new(17);
        let w = store.add("w", &[8, 8], Init::Uniform { fan_in: 8 }).unwrap();
        let x = store.add("x", &[20, 8], Init::Uniform { fan_in: 2 }).unwrap();
        let report = grad_check(
            |tape, store| {
                let x = tape.param(store, x)?;
                let anchor = tape.mean_axis(x, 0)?;
                let anchor = tape.sigmoid(anchor)?;
                let pos = tape.gather_rows(x, (0..4).collect())?;
                let neg = tape.gather_rows(x, (4..20).collect())?;
                let batch = ContrastBatch {
                    anchor,
                    positives: pos,
                    negatives: neg,
                    negatives_per_positive: 4,
                };
                let w = tape.param(store, w)?;
                contrast_loss(tape, &batch, w, objective)
            },
            &mut store,
            1e-5,
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-4, "{objective:?}: {report:?}");
    }
}

#[test]
fn pretraining_rejects_empty_and_nicotine_sets() {
    let mut store = ParameterStore::<f64>::new(1);
    let model = SgtModel::new(&mut store, &tiny_config(), 10).unwrap();
    let est = EstimatorParams::new(&mut store, 8).unwrap();
    let config = ContrastiveConfig::default();
    let err = pretrain_encoder(&[], &mut store, &model, &est, &config, 0).unwrap_err();
    assert!(err.is_validation());
    let mut net = random_network(5, 3, 10, 4);
    net.group = crate::synthcohort::GroupLabel::HighNicotine;
    assert!(pretrain_encoder(&[net], &mut store, &model, &est, &config, 0)
        .unwrap_err()
        .is_validation());
}

#[test]
fn pretraining_trace_and_determinism() {
    let nets: Vec<_> = (0..3).map(|s| random_network(6, 3, 10, 10 + s)).collect();
    let config = ContrastiveConfig {
        epochs: 4,
        positives: 8,
        ..ContrastiveConfig::default()
    };
    let run = || {
        let mut store = ParameterStore::<f64>::new(2);
        let model = SgtModel::new(&mut store, &tiny_config(), 10).unwrap();
        let est = EstimatorParams::new(&mut store, 8).unwrap();
        let trace = pretrain_encoder(&nets, &mut store, &model, &est, &config, 99).unwrap();
        let values: Vec<Vec<f64>> = store.iter().map(|(_, p)| p.value.clone()).collect();
        (trace, values)
    };
    let (trace, a) = run();
    assert_eq!(trace.len(), 4);
    assert!(trace
        .iter()
        .all(|e| e.total.is_finite() && e.infonce >= 0.0 && e.reconstruction >= 0.0));
    let (trace_b, b) = run();
    assert_eq!(trace, trace_b);
    assert_eq!(a, b);
}
