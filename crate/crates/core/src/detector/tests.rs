use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::contrastive::{ContrastiveConfig, EstimatorParams};
use crate::diffcore::grad_check;
use crate::sgtmodel::SgtConfig;
use crate::testutil::random_network;

fn toy_model(store: &mut ParameterStore<f64>, length: usize) -> SgtModel {
    let config = SgtConfig {
        embed_dim: 8,
        heads: 2,
        layer_pairs: 1,
        ..SgtConfig::default()
    };
    SgtModel::new(store, &config, length).unwrap()
}

fn nicotine(mut net: DynamicBrainNetwork<f64>, group: GroupLabel) -> DynamicBrainNetwork<f64> {
    net.group = group;
    net.subject_id = format!("{}-{}", net.subject_id, group.as_str());
    net
}

fn labels(m: usize) -> Vec<String> {
    (0..m).map(|r| format!("R{r}")).collect()
}

fn map_from(timesteps: usize, regions: usize, f: impl Fn(usize, usize, usize) -> f64) -> EdgeScoreMap<f64> {
    let mut scores = Vec::new();
    for t in 1..=timesteps {
        for i in 0..regions {
            for j in i + 1..regions {
                scores.push(f(t, i, j));
            }
        }
    }
    EdgeScoreMap {
        timesteps,
        regions,
        scores,
    }
}

#[test]
fn default_config_is_valid_and_bad_fields_are_rejected() {
    assert!(DetectorConfig::default().validate().is_ok());
    for bad in [
        DetectorConfig {
            top_fraction: 0.0,
            ..DetectorConfig::default()
        },
        DetectorConfig {
            candidate_fraction: 1.5,
            ..DetectorConfig::default()
        },
        DetectorConfig {
            hidden: 0,
            ..DetectorConfig::default()
        },
        DetectorConfig {
            margin: -1.0,
            ..DetectorConfig::default()
        },
        DetectorConfig {
            epochs: 0,
            ..DetectorConfig::default()
        },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Validation(_))));
    }
}

#[test]
fn pairing_checks_groups_and_sizes() {
    let saline = random_network(5, 3, 10, 1);
    let high = nicotine(random_network(5, 3, 10, 2), GroupLabel::HighNicotine);
    assert!(PairedSample::new(&saline, &high).is_ok());
    assert!(matches!(PairedSample::new(&high, &high), Err(Error::Pairing(_))));
    assert!(matches!(PairedSample::new(&saline, &saline), Err(Error::Pairing(_))));
    let shorter = nicotine(random_network(5, 2, 10, 3), GroupLabel::LowNicotine);
    assert!(matches!(PairedSample::new(&saline, &shorter), Err(Error::Pairing(_))));
    let wider = nicotine(random_network(6, 3, 10, 4), GroupLabel::LowNicotine);
    assert!(matches!(
        PairedSample::unchecked(&saline, &wider),
        Err(Error::Pairing(_))
    ));
}

#[test]
fn weight_change_follows_map_cell_order() {
    let reference = random_network(6, 3, 10, 5);
    let probe = nicotine(random_network(6, 3, 10, 6), GroupLabel::HighNicotine);
    let pair = PairedSample::new(&reference, &probe).unwrap();
    let change = pair.weight_change();
    let map = EdgeScoreMap {
        timesteps: 3,
        regions: 6,
        scores: change.clone(),
    };
    assert_eq!(change.len(), probe.cell_count());
    for (t, i, j, v) in map.cells() {
        let expected = probe.snapshots[t - 1].adjacency[[i, j]] - reference.snapshots[t - 1].adjacency[[i, j]];
        assert_eq!(v, expected);
        assert_eq!(map.get(t, j, i), expected);
    }
}

#[test]
fn self_pair_has_no_weight_change() {
    let net = random_network(5, 2, 10, 7);
    let pair = PairedSample::unchecked(&net, &net).unwrap();
    assert!(pair.weight_change().iter().all(|&v| v == 0.0));
}

#[test]
fn map_index_matches_storage_order() {
    let map = map_from(3, 7, |t, i, j| (t * 100 + i * 10 + j) as f64);
    for (k, (t, i, j, s)) in map.cells().enumerate() {
        assert_eq!(map.index(t, i, j), k);
        assert_eq!(map.index(t, j, i), k);
        assert_eq!(s, (t * 100 + i * 10 + j) as f64);
    }
    assert_eq!(map.cells().count(), 3 * 21);
}

#[test]
fn map_mean_is_cellwise_and_checks_sizes() {
    let a = map_from(2, 4, |t, i, j| (t + i + j) as f64);
    let b = map_from(2, 4, |_, _, _| 1.0);
    let mean = EdgeScoreMap::mean(&[a.clone(), b]).unwrap();
    for ((_, _, _, m), (_, _, _, x)) in mean.cells().zip(a.cells()) {
        assert_eq!(m, (x + 1.0) / 2.0);
    }
    assert!(matches!(EdgeScoreMap::<f64>::mean(&[]), Err(Error::Aggregation(_))));
    let other = map_from(3, 4, |_, _, _| 0.0);
    assert!(matches!(EdgeScoreMap::mean(&[a, other]), Err(Error::Aggregation(_))));
}

#[test]
fn scores_cover_every_cell_within_unit_interval() {
    let reference = random_network(6, 3, 10, 8);
    let probe = nicotine(random_network(6, 3, 10, 9), GroupLabel::LowNicotine);
    let mut store = ParameterStore::<f64>::new(3);
    let model = toy_model(&mut store, 10);
    let scorer = ScorerParams::new(&mut store, 8, 16).unwrap();
    let pair = PairedSample::new(&reference, &probe).unwrap();
    let map = score_edges(&pair, &store, &model, &scorer).unwrap();
    assert_eq!((map.timesteps, map.regions), (3, 6));
    assert_eq!(map.scores.len(), 3 * 15);
    assert!(map.scores.iter().all(|&s| s > 0.0 && s < 1.0));
    assert_eq!(map, score_edges(&pair, &store, &model, &scorer).unwrap());
}

#[test]
fn scores_follow_a_relabelling_of_regions() {
    let reference = random_network(7, 3, 10, 10);
    let probe = nicotine(random_network(7, 3, 10, 11), GroupLabel::HighNicotine);
    let perm = [4, 0, 6, 2, 1, 5, 3];
    let (reference_p, probe_p) = (reference.permute_regions(&perm), probe.permute_regions(&perm));
    let mut store = ParameterStore::<f64>::new(4);
    let model = toy_model(&mut store, 10);
    let scorer = ScorerParams::new(&mut store, 8, 16).unwrap();
    let a = score_edges(&PairedSample::new(&reference, &probe).unwrap(), &store, &model, &scorer).unwrap();
    let b = score_edges(
        &PairedSample::new(&reference_p, &probe_p).unwrap(),
        &store,
        &model,
        &scorer,
    )
    .unwrap();
    for (t, k, l, s) in b.cells() {
        let original = a.get(t, perm[k], perm[l]);
        assert!((s - original).abs() <= 1e-9, "t={t} ({k},{l}): {s} vs {original}");
    }
}

#[test]
fn candidates_take_largest_changes_and_disjoint_normals() {
    let change: Vec<f64> = (0..40)
        .map(|k| ((k * 17) % 40) as f64 * if k % 2 == 0 { 1.0 } else { -1.0 })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let c = ranking_candidates(&change, 0.1, &mut rng);
    assert_eq!(c.positives.len(), 4);
    assert_eq!(c.normals.len(), 4);
    let mut by_size: Vec<usize> = (0..40).collect();
    by_size.sort_by(|&a, &b| change[b].abs().total_cmp(&change[a].abs()).then(a.cmp(&b)));
    assert_eq!(c.positives, by_size[..4]);
    let mut normals = c.normals.clone();
    normals.sort_unstable();
    normals.dedup();
    assert_eq!(normals.len(), 4);
    assert!(normals.iter().all(|n| !c.positives.contains(n)));
}

#[test]
fn candidates_never_exceed_half_the_cells() {
    let change = vec![1.0, -2.0, 0.5];
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let c = ranking_candidates(&change, 1.0, &mut rng);
    assert_eq!(c.positives, vec![1]);
    assert_eq!(c.normals.len(), 1);
}

fn loss_of(scores: &[f64], candidates: &RankingCandidates, margin: f64, sparsity: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let s = tape.input(scores.to_vec(), &[scores.len()])?;
    let l = ranking_loss(&mut tape, s, candidates, margin, sparsity)?;
    Ok(tape.scalar(l))
}

#[test]
fn separated_scores_leave_only_the_sparsity_term() {
    let scores = [0.9, 0.95, 0.1, 0.2, 0.3, 0.05];
    let candidates = RankingCandidates {
        positives: vec![0, 1],
        normals: vec![2, 5],
    };
    let mean = scores.iter().sum::<f64>() / 6.0;
    let loss = loss_of(&scores, &candidates, 0.5, 1e-3).unwrap();
    assert!((loss - 1e-3 * mean).abs() < 1e-15);
}

#[test]
fn equal_scores_cost_the_margin() {
    let scores = [0.4; 8];
    let candidates = RankingCandidates {
        positives: vec![0, 3, 5],
        normals: vec![1, 2, 7],
    };
    let loss = loss_of(&scores, &candidates, 0.5, 0.01).unwrap();
    assert!((loss - (0.5 + 0.01 * 0.4)).abs() < 1e-15);
}

#[test]
fn hinge_averages_over_pairs() {
    let scores = [0.6, 0.2, 0.5, 0.3];
    let candidates = RankingCandidates {
        positives: vec![0, 1],
        normals: vec![3, 2],
    };
    // max(0, 0.5 − 0.6 + 0.3) = 0.2, max(0, 0.5 − 0.2 + 0.5) = 0.8
    let loss = loss_of(&scores, &candidates, 0.5, 0.0).unwrap();
    assert!((loss - 0.5).abs() < 1e-15);
}

#[test]
fn mismatched_candidates_are_rejected() {
    let scores = [0.1, 0.2];
    let empty = RankingCandidates {
        positives: vec![],
        normals: vec![],
    };
    assert!(matches!(loss_of(&scores, &empty, 0.5, 0.0), Err(Error::Computation(_))));
    let uneven = RankingCandidates {
        positives: vec![0],
        normals: vec![],
    };
    assert!(matches!(
        loss_of(&scores, &uneven, 0.5, 0.0),
        Err(Error::Computation(_))
    ));
}

#[test]
fn ranking_loss_gradient_matches_finite_differences() {
    let reference = random_network(6, 3, 10, 12);
    let probe = nicotine(random_network(6, 3, 10, 13), GroupLabel::HighNicotine);
    let pair = PairedSample::new(&reference, &probe).unwrap();
    let change = pair.weight_change();
    let mut store = ParameterStore::<f64>::new(5);
    let model = toy_model(&mut store, 10);
    let scorer = ScorerParams::new(&mut store, 8, 6).unwrap();
    let candidates = ranking_candidates(&change, 0.1, &mut ChaCha8Rng::seed_from_u64(3));
    let report = grad_check(
        |tape, store| {
            let hp = model.encode(tape, store, &probe)?;
            let hr = model.encode(tape, store, &reference)?;
            let hp = tape.reshape(hp.embeddings, &[18, 8])?;
            let hr = tape.reshape(hr.embeddings, &[18, 8])?;
            let scores = score_cells(tape, store, &scorer, hp, hr, &change, 3, 6)?;
            ranking_loss(tape, scores, &candidates, 0.5, 0.1)
        },
        &mut store,
        1e-5,
    )
    .unwrap();
    assert!(report.max_relative_error < 1e-4, "{report:?}");
}

#[test]
fn top_one_percent_of_a_large_map_has_ceil_count() {
    let map = map_from(1, 150, |_, i, j| ((i * 7919 + j * 104_729) % 10_007) as f64);
    assert_eq!(map.scores.len(), 11_175);
    let set = top_percent(&map, 0.01, Selection::Pooled, "s", &labels(150)).unwrap();
    assert_eq!(set.cells.len(), 112);
    let mut sorted = map.scores.clone();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let cutoff = sorted[111];
    assert!(set.cells.iter().all(|c| c.score >= cutoff));
    assert!(set.cells.windows(2).all(|w| w[0].score >= w[1].score));
}

#[test]
fn full_fraction_selects_everything() {
    let map = map_from(2, 5, |t, i, j| (t + i * j) as f64);
    let set = top_percent(&map, 1.0, Selection::Pooled, "s", &labels(5)).unwrap();
    assert_eq!(set.cells.len(), 20);
}

#[test]
fn ties_go_to_the_earliest_cell() {
    let map = map_from(2, 4, |_, _, _| 0.5);
    let set = top_percent(&map, 0.25, Selection::Pooled, "s", &labels(4)).unwrap();
    let picked: Vec<(usize, usize, usize)> = set.cells.iter().map(|c| (c.timestep, c.i, c.j)).collect();
    assert_eq!(picked, vec![(1, 0, 1), (1, 0, 2), (1, 0, 3)]);
    assert_eq!(set.tie_break, TIE_BREAK);
}

#[test]
fn per_timestep_selection_takes_from_each_timestep() {
    let map = map_from(
        3,
        5,
        |t, i, j| if t == 2 { 10.0 + (i + j) as f64 } else { (i + j) as f64 },
    );
    let pooled = top_percent(&map, 0.2, Selection::Pooled, "s", &labels(5)).unwrap();
    assert!(pooled.cells.iter().all(|c| c.timestep == 2));
    let per = top_percent(&map, 0.2, Selection::PerTimestep, "s", &labels(5)).unwrap();
    for t in 1..=3 {
        assert_eq!(per.cells.iter().filter(|c| c.timestep == t).count(), 2);
    }
}

#[test]
fn selection_arguments_are_validated() {
    let map = map_from(1, 4, |_, _, _| 1.0);
    assert!(matches!(
        top_percent(&map, 0.0, Selection::Pooled, "s", &labels(4)),
        Err(Error::Validation(_))
    ));
    assert!(matches!(
        top_percent(&map, 0.5, Selection::Pooled, "s", &labels(3)),
        Err(Error::Validation(_))
    ));
}

#[test]
fn monotone_scores_select_the_largest_changes() {
    let reference = random_network(8, 4, 10, 14);
    let probe = nicotine(random_network(8, 4, 10, 15), GroupLabel::HighNicotine);
    let change = PairedSample::new(&reference, &probe).unwrap().weight_change();
    let map = EdgeScoreMap {
        timesteps: 4,
        regions: 8,
        scores: change.iter().map(|d: &f64| 1.0 - (-3.0 * d.abs()).exp()).collect(),
    };
    let set = top_percent(&map, 0.05, Selection::Pooled, "s", &labels(8)).unwrap();
    let plain = EdgeScoreMap {
        timesteps: 4,
        regions: 8,
        scores: change.clone(),
    };
    let mut brute: Vec<(f64, usize, usize, usize)> = plain.cells().map(|(t, i, j, d)| (d.abs(), t, i, j)).collect();
    brute.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2, a.3).cmp(&(b.1, b.2, b.3))));
    let k = (0.05 * change.len() as f64).ceil() as usize;
    let picked: Vec<(usize, usize, usize)> = set.cells.iter().map(|c| (c.timestep, c.i, c.j)).collect();
    let expected: Vec<(usize, usize, usize)> = brute[..k].iter().map(|c| (c.1, c.2, c.3)).collect();
    assert_eq!(picked, expected);
}

fn set_of(cells: &[(usize, usize, usize, f64)], m: usize, t: usize) -> CircuitSet {
    CircuitSet {
        subject: "s".into(),
        region_labels: labels(m),
        timesteps: t,
        fraction: 0.01,
        tie_break: TIE_BREAK.into(),
        cells: cells
            .iter()
            .map(|&(timestep, i, j, score)| CircuitCell { timestep, i, j, score })
            .collect(),
    }
}

#[test]
fn single_cell_credits_both_endpoints() {
    let hubs = aggregate_hubs(&[set_of(&[(3, 1, 2, 0.8)], 4, 4)]).unwrap();
    assert_eq!(hubs.regions[0], ("R1".to_string(), 0.8));
    assert_eq!(hubs.regions[1], ("R2".to_string(), 0.8));
    assert_eq!(hubs.regions[2].1, 0.0);
    assert_eq!(hubs.edge_frequency, vec![(1, 2, 1)]);
}

#[test]
fn hub_weights_conserve_twice_the_score_mass() {
    let map = map_from(1, 150, |_, i, j| ((i * 31 + j * 17) % 1024) as f64 / 1024.0);
    let set = top_percent(&map, 0.01, Selection::Pooled, "s", &labels(150)).unwrap();
    let other = top_percent(
        &map_from(1, 150, |_, i, j| ((i * 13 + j) % 512) as f64 / 256.0),
        0.01,
        Selection::Pooled,
        "t",
        &labels(150),
    )
    .unwrap();
    let hubs = aggregate_hubs(&[set.clone(), other.clone()]).unwrap();
    let mass: f64 = set.cells.iter().chain(&other.cells).map(|c| c.score).sum();
    assert_eq!(hubs.total(), 2.0 * mass);
}

#[test]
fn edge_frequency_counts_sets_not_timesteps() {
    let a = set_of(&[(1, 0, 1, 0.5), (2, 0, 1, 0.25), (1, 2, 3, 0.125)], 4, 2);
    let b = set_of(&[(2, 0, 1, 0.5)], 4, 2);
    let hubs = aggregate_hubs(&[a, b]).unwrap();
    assert_eq!(hubs.edge_frequency, vec![(0, 1, 2), (2, 3, 1)]);
}

#[test]
fn hubs_reject_mismatched_labels_and_empty_input() {
    assert!(matches!(aggregate_hubs(&[]), Err(Error::Aggregation(_))));
    let a = set_of(&[(1, 0, 1, 0.5)], 4, 2);
    let b = set_of(&[(1, 0, 1, 0.5)], 5, 2);
    assert!(matches!(aggregate_hubs(&[a, b]), Err(Error::Aggregation(_))));
}

#[test]
fn phase_split_partitions_at_half() {
    let set = set_of(
        &[(1, 0, 1, 0.5), (2, 0, 2, 0.25), (3, 1, 2, 1.0), (4, 2, 3, 0.75)],
        4,
        4,
    );
    let split = phase_split_report(&set, None).unwrap();
    assert_eq!(split.split, 2);
    assert_eq!((split.pre.len(), split.post.len()), (2, 2));
    assert_eq!(split.pre_mass, 0.75);
    assert_eq!(split.post_mass, 1.75);
    let explicit = phase_split_report(&set, Some(3)).unwrap();
    assert_eq!((explicit.pre.len(), explicit.post.len()), (3, 1));
}

#[test]
fn odd_timesteps_need_an_explicit_split() {
    let set = set_of(&[(1, 0, 1, 0.5)], 4, 5);
    assert!(matches!(phase_split_report(&set, None), Err(Error::Validation(_))));
    assert!(phase_split_report(&set, Some(2)).is_ok());
    assert!(matches!(phase_split_report(&set, Some(6)), Err(Error::Validation(_))));
}

fn toy_training() -> (Vec<DynamicBrainNetwork<f64>>, Vec<DynamicBrainNetwork<f64>>) {
    let refs = (0..2).map(|s| random_network(5, 2, 10, 20 + s)).collect();
    let probes = (0..2)
        .map(|s| nicotine(random_network(5, 2, 10, 30 + s), GroupLabel::HighNicotine))
        .collect();
    (refs, probes)
}

fn run_training(
    refs: &[DynamicBrainNetwork<f64>],
    probes: &[DynamicBrainNetwork<f64>],
) -> (Vec<DetectorEpoch>, ParameterStore<f64>) {
    let pairs: Vec<PairedSample<'_, f64>> = refs
        .iter()
        .flat_map(|r| probes.iter().map(move |p| PairedSample::new(r, p).unwrap()))
        .collect();
    let mut store = ParameterStore::<f64>::new(6);
    let model = toy_model(&mut store, 10);
    let estimator = EstimatorParams::new(&mut store, 8).unwrap();
    let scorer = ScorerParams::new(&mut store, 8, 8).unwrap();
    let config = DetectorConfig {
        epochs: 3,
        hidden: 8,
        ..DetectorConfig::default()
    };
    let contrastive = ContrastiveConfig {
        positives: 6,
        ..ContrastiveConfig::default()
    };
    let trace = train_detector(
        &pairs,
        &mut store,
        &model,
        &estimator,
        &scorer,
        &config,
        &contrastive,
        9,
    )
    .unwrap();
    (trace, store)
}

#[test]
fn training_traces_every_epoch_deterministically() {
    let (refs, probes) = toy_training();
    let (trace, store) = run_training(&refs, &probes);
    assert_eq!(trace.len(), 3);
    for (k, e) in trace.iter().enumerate() {
        assert_eq!(e.epoch, k + 1);
        assert!(e.ranking.is_finite() && e.infonce.is_finite());
        assert!((e.total - (e.ranking + 0.1 * e.infonce)).abs() < 1e-12);
    }
    let (again, store_again) = run_training(&refs, &probes);
    assert_eq!(trace, again);
    for ((_, a), (_, b)) in store.iter().zip(store_again.iter()) {
        assert_eq!(a.value, b.value);
    }
}

#[test]
fn training_without_pairs_is_rejected() {
    let mut store = ParameterStore::<f64>::new(7);
    let model = toy_model(&mut store, 10);
    let estimator = EstimatorParams::new(&mut store, 8).unwrap();
    let scorer = ScorerParams::new(&mut store, 8, 8).unwrap();
    let result = train_detector(
        &[],
        &mut store,
        &model,
        &estimator,
        &scorer,
        &DetectorConfig::default(),
        &ContrastiveConfig::default(),
        1,
    );
    assert!(matches!(result, Err(Error::Validation(_))));
}
