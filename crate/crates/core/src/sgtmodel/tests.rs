use super::*;
use crate::diffcore::grad_check;
use crate::testutil::random_network;

fn small_config() -> SgtConfig {
    SgtConfig {
        embed_dim: 8,
        heads: 2,
        layer_pairs: 1,
        temporal_radius: 1,
        adjacency_bias_weight: 1.0,
    }
}

fn zero_param(store: &mut ParameterStore<f64>, id: ParamId) {
    store.parameter_mut(id).value.iter_mut().for_each(|v| *v = 0.0);
}

fn layer_norm_rows(x: &[f64], d: usize) -> Vec<f64> {
    x.chunks(d)
        .flat_map(|row| {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            row.iter()
                .map(move |v| (v - mean) / (var + 1e-9).sqrt())
                .collect::<Vec<_>>()
        })
        .collect()
}

#[test]
fn config_validation() {
    assert!(SgtConfig::default().validate().is_ok());
    let bad = SgtConfig {
        heads: 3,
        ..SgtConfig::default()
    };
    assert!(bad.validate().is_err());
    let bad = SgtConfig {
        temporal_radius: 0,
        ..SgtConfig::default()
    };
    assert!(bad.validate().is_err());
    let bad = SgtConfig {
        layer_pairs: 0,
        ..SgtConfig::default()
    };
    assert!(bad.validate().is_err());
}

#[test]
fn zero_weights_give_uniform_attention_and_normalized_residual() {
    let mut store = ParameterStore::<f64>::new(3);
    let params = AttentionParams::register(&mut store, "a", 4, Some(0.0)).unwrap();
    for id in [params.query, params.key, params.value, params.output] {
        zero_param(&mut store, id);
    }
    let x: Vec<f64> = (0..20).map(|k| ((k * 7) % 11) as f64 * 0.1 - 0.4).collect();
    let mut tape = Tape::new();
    let input = tape.input(x.clone(), &[1, 5, 4]).unwrap();
    let adj = tape
        .input((0..50).map(|k| (k % 3) as f64 * 0.3).collect(), &[2, 5, 5])
        .unwrap();
    let out = attention_layer(&mut tape, &store, &params, input, 2, Some(adj), None).unwrap();
    for &w in tape.value(out.weights) {
        assert!((w - 0.2).abs() < 1e-15);
    }
    let expected = layer_norm_rows(&x, 4);
    for (a, b) in tape.value(out.output).iter().zip(&expected) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn attention_rows_are_distributions() {
    let net = random_network(6, 4, 10, 1);
    let mut store = ParameterStore::<f64>::new(5);
    let model = SgtModel::new(&mut store, &small_config(), 10).unwrap();
    let mut tape = Tape::new();
    let enc = model.encode(&mut tape, &store, &net).unwrap();
    for &w in enc.spatial_weights.iter().chain(&enc.temporal_weights) {
        let n = *tape.shape(w).last().unwrap();
        for row in tape.value(w).chunks(n) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }
    // Spatial attention over a dense graph never underflows to zero.
    assert!(tape.value(enc.spatial_weights[0]).iter().all(|&v| v > 0.0));
}

#[test]
fn temporal_mask_zeroes_distant_timesteps() {
    let net = random_network(4, 5, 8, 2);
    let mut store = ParameterStore::<f64>::new(5);
    let model = SgtModel::new(&mut store, &small_config(), 8).unwrap();
    let mut tape = Tape::new();
    let enc = model.encode(&mut tape, &store, &net).unwrap();
    let w = tape.value(enc.temporal_weights[0]);
    for (k, &v) in w.iter().enumerate() {
        let (t, u) = ((k / 5) % 5, k % 5);
        if t.abs_diff(u) > 1 {
            assert_eq!(v, 0.0);
        } else {
            assert!(v > 0.0);
        }
    }
}

#[test]
fn single_timestep_attends_to_itself() {
    let net = random_network(5, 1, 30, 3);
    let mut store = ParameterStore::<f64>::new(5);
    let model = SgtModel::new(&mut store, &small_config(), 30).unwrap();
    let mut tape = Tape::new();
    let enc = model.encode(&mut tape, &store, &net).unwrap();
    assert!(tape.value(enc.temporal_weights[0]).iter().all(|&v| v == 1.0));
}

#[test]
fn saturated_radius_matches_unmasked_attention() {
    let mut store = ParameterStore::<f64>::new(9);
    let params = AttentionParams::register(&mut store, "t", 4, None).unwrap();
    let x: Vec<f64> = (0..24).map(|k| (k as f64 * 0.37).sin()).collect();
    let run = |allowed: Option<&[bool]>| {
        let mut tape = Tape::new();
        let input = tape.input(x.clone(), &[2, 3, 4]).unwrap();
        let out = attention_layer(&mut tape, &store, &params, input, 2, None, allowed).unwrap();
        tape.value(out.output).to_vec()
    };
    let mask = temporal_mask(3, 2);
    assert!(mask.iter().all(|&a| a));
    assert_eq!(run(Some(&mask)), run(None));
}

#[test]
fn encoder_output_shape_and_determinism() {
    let net = random_network(6, 4, 10, 4);
    let mut store = ParameterStore::<f64>::new(5);
    let model = SgtModel::new(&mut store, &small_config(), 10).unwrap();
    let a = model.embed(&store, &net).unwrap();
    let b = model.embed(&store, &net).unwrap();
    assert_eq!((a.timesteps, a.regions, a.dim), (4, 6, 8));
    assert_eq!(a.values.len(), 4 * 6 * 8);
    assert_eq!(a, b);
}

#[test]
fn encoder_is_region_permutation_equivariant() {
    let net = random_network(7, 3, 12, 5);
    let perm = [3, 0, 6, 1, 5, 2, 4];
    let permuted = net.permute_regions(&perm);
    let mut store = ParameterStore::<f64>::new(11);
    let model = SgtModel::new(
        &mut store,
        &SgtConfig {
            layer_pairs: 2,
            ..small_config()
        },
        12,
    )
    .unwrap();
    let a = model.embed(&store, &net).unwrap();
    let b = model.embed(&store, &permuted).unwrap();
    for t in 0..3 {
        for (k, &old) in perm.iter().enumerate() {
            for (x, y) in b.get(t, k).iter().zip(a.get(t, old)) {
                assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0));
            }
        }
    }
    let ga = global_representation(&a).unwrap();
    let gb = global_representation(&b).unwrap();
    for (x, y) in ga.0.iter().zip(&gb.0) {
        assert!((x - y).abs() <= 1e-9 * x.abs());
    }
}

#[test]
fn readout_of_constant_embeddings_is_sigmoid() {
    let e = NodeEmbeddings {
        timesteps: 3,
        regions: 4,
        dim: 5,
        values: vec![0.7; 60],
    };
    let g = global_representation(&e).unwrap();
    assert_eq!(g.0.len(), 5);
    let expected = 1.0 / (1.0 + (-0.7f64).exp());
    assert!(g.0.iter().all(|v| (v - expected).abs() < 1e-15));
}

#[test]
fn decoder_is_symmetric_and_bounded() {
    let net = random_network(6, 2, 15, 6);
    let mut store = ParameterStore::<f64>::new(2);
    let model = SgtModel::new(&mut store, &small_config(), 15).unwrap();
    let e = model.embed(&store, &net).unwrap();
    let fc = decode_fc(&e, 1);
    for i in 0..6 {
        assert_eq!(fc[[i, i]], 1.0);
        for j in 0..6 {
            assert_eq!(fc[[i, j]], fc[[j, i]]);
            if i != j {
                assert!(fc[[i, j]].abs() < 1.0);
            }
        }
    }
}

#[test]
fn decoder_vanishes_for_small_embeddings() {
    let e = NodeEmbeddings {
        timesteps: 1,
        regions: 2,
        dim: 4,
        values: vec![1e-6f64; 8],
    };
    assert!(decode_fc(&e, 0)[[0, 1]].abs() < 1e-11);
}

#[test]
fn perfect_reconstruction_has_zero_loss() {
    let mut net = random_network(5, 2, 15, 7);
    let z: Vec<f64> = (0..2 * 5 * 4).map(|k| (k as f64 * 0.61).cos()).collect();
    let e = NodeEmbeddings {
        timesteps: 2,
        regions: 5,
        dim: 4,
        values: z.clone(),
    };
    for (t, snap) in net.snapshots.iter_mut().enumerate() {
        snap.adjacency = decode_fc(&e, t);
    }
    let mut tape = Tape::new();
    let zn = tape.input(z, &[2, 5, 4]).unwrap();
    let loss = reconstruction_loss(&mut tape, zn, &net).unwrap();
    assert!(tape.scalar(loss).abs() < 1e-28);
}

#[test]
fn reconstruction_loss_is_permutation_invariant() {
    let net = random_network(6, 3, 10, 8);
    let perm = [5, 4, 3, 2, 1, 0];
    let mut store = ParameterStore::<f64>::new(4);
    let model = SgtModel::new(&mut store, &small_config(), 10).unwrap();
    let loss = |n: &DynamicBrainNetwork<f64>| {
        let mut tape = Tape::new();
        let enc = model.encode(&mut tape, &store, n).unwrap();
        let l = reconstruction_loss(&mut tape, enc.embeddings, n).unwrap();
        tape.scalar(l)
    };
    let (a, b) = (loss(&net), loss(&net.permute_regions(&perm)));
    assert!(a > 0.0);
    assert!((a - b).abs() <= 1e-12 * a);
}

#[test]
fn wrong_feature_length_is_a_shape_error() {
    let net = random_network(4, 3, 10, 9);
    let mut store = ParameterStore::<f64>::new(4);
    let model = SgtModel::new(&mut store, &small_config(), 12).unwrap();
    assert!(matches!(model.embed(&store, &net), Err(Error::Shape { .. })));
}

#[test]
fn encoder_decoder_gradients_match_finite_differences() {
    let net = random_network(6, 3, 10, 10);
    let mut store = ParameterStore::<f64>::new(21);
    let model = SgtModel::new(&mut store, &small_config(), 10).unwrap();
    let report = grad_check(
        |tape, store| {
            let enc = model.encode(tape, store, &net)?;
            reconstruction_loss(tape, enc.embeddings, &net)
        },
        &mut store,
        1e-5,
    )
    .unwrap();
    assert!(report.max_relative_error < 1e-4, "{report:?}");
}
