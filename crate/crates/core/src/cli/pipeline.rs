//! In-memory pipeline stages. The file-based commands and the test suites
//! both drive these.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::RunConfig;
use crate::connectome::{build_dynamic_network, DynamicBrainNetwork};
use crate::contrastive::{pretrain_encoder, EstimatorParams, PretrainEpoch};
use crate::detector::{
    aggregate_hubs, phase_split_report, score_embeddings, top_percent, train_detector, CircuitSet, DetectorEpoch,
    EdgeScoreMap, HubWeights, PairedSample, PhaseSplit, ScorerParams,
};
use crate::diffcore::ParameterStore;
use crate::error::{Error, Result};
use crate::evaluation::{
    classify_groups, oracle_scores, project_2d, recovery_metrics, stratified_split, MetricsReport, RecoveryReport,
    Split,
};
use crate::sgtmodel::{global_representation, NodeEmbeddings, SgtModel};
use crate::synthcohort::{generate_cohort, Cohort, GroupLabel};

/// Independent random streams drawn from the run seed.
#[derive(Clone, Copy, Debug)]
pub enum Stream {
    Split = 1,
    Parameters = 2,
    Pretrain = 3,
    Detector = 4,
    Shuffle = 5,
}

pub fn derive_seed(seed: u64, stream: Stream) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng.next_u64()
}

/// Label used in artifact names for the comparison of `group` against saline.
pub fn pair_name(group: GroupLabel) -> &'static str {
    match group {
        GroupLabel::Saline => "S-S",
        GroupLabel::LowNicotine => "S-L",
        GroupLabel::HighNicotine => "S-H",
    }
}

pub const NICOTINE_GROUPS: [GroupLabel; 2] = [GroupLabel::LowNicotine, GroupLabel::HighNicotine];

pub fn synthesize(config: &RunConfig) -> Result<Cohort> {
    generate_cohort(&config.synthcohort, config.seed)
}

pub fn build_networks(config: &RunConfig, cohort: &Cohort) -> Result<Vec<DynamicBrainNetwork<f64>>> {
    cohort
        .subjects
        .par_iter()
        .map(|s| build_dynamic_network(&s.series, s.group, &config.connectome))
        .collect()
}

/// Stratified train/test split by group.
pub fn split_subjects(config: &RunConfig, networks: &[DynamicBrainNetwork<f64>]) -> Split {
    let labels: Vec<usize> = networks.iter().map(|n| n.group.index()).collect();
    stratified_split(
        &labels,
        GroupLabel::ALL.len(),
        config.evaluation.train_fraction,
        derive_seed(config.seed, Stream::Split),
    )
}

/// Encoder, estimator and scorer handles bound to one parameter store.
#[derive(Clone, Debug)]
pub struct Model {
    pub encoder: SgtModel,
    pub estimator: EstimatorParams,
    pub scorer: ScorerParams,
}

impl Model {
    /// Binds to `store`, registering any missing parameters in a fixed order.
    pub fn bind(config: &RunConfig, store: &mut ParameterStore<f64>, input_dim: usize) -> Result<Self> {
        let encoder = SgtModel::new(store, &config.model, input_dim)?;
        let estimator = EstimatorParams::new(store, config.model.embed_dim)?;
        let scorer = ScorerParams::new(store, config.model.embed_dim, config.detector.hidden)?;
        Ok(Self {
            encoder,
            estimator,
            scorer,
        })
    }

    pub fn fresh(config: &RunConfig, input_dim: usize) -> Result<(ParameterStore<f64>, Self)> {
        let mut store = ParameterStore::new(derive_seed(config.seed, Stream::Parameters));
        let model = Self::bind(config, &mut store, input_dim)?;
        Ok((store, model))
    }
}

fn members<'a>(
    networks: &'a [DynamicBrainNetwork<f64>],
    indices: &[usize],
    group: GroupLabel,
) -> Vec<&'a DynamicBrainNetwork<f64>> {
    indices
        .iter()
        .map(|&k| &networks[k])
        .filter(|n| n.group == group)
        .collect()
}

pub fn pretrain(
    config: &RunConfig,
    networks: &[DynamicBrainNetwork<f64>],
    split: &Split,
    store: &mut ParameterStore<f64>,
    model: &Model,
) -> Result<Vec<PretrainEpoch>> {
    let saline: Vec<DynamicBrainNetwork<f64>> = members(networks, &split.train, GroupLabel::Saline)
        .into_iter()
        .cloned()
        .collect();
    pretrain_encoder(
        &saline,
        store,
        &model.encoder,
        &model.estimator,
        &config.contrastive,
        derive_seed(config.seed, Stream::Pretrain),
    )
}

/// Every training saline subject paired with every training nicotine subject.
pub fn training_pairs<'a>(
    networks: &'a [DynamicBrainNetwork<f64>],
    split: &Split,
) -> Result<Vec<PairedSample<'a, f64>>> {
    let refs = members(networks, &split.train, GroupLabel::Saline);
    let mut pairs = Vec::new();
    for group in NICOTINE_GROUPS {
        for probe in members(networks, &split.train, group) {
            for reference in &refs {
                pairs.push(PairedSample::new(reference, probe)?);
            }
        }
    }
    Ok(pairs)
}

pub fn train(
    config: &RunConfig,
    networks: &[DynamicBrainNetwork<f64>],
    split: &Split,
    store: &mut ParameterStore<f64>,
    model: &Model,
) -> Result<Vec<DetectorEpoch>> {
    let pairs = training_pairs(networks, split)?;
    train_detector(
        &pairs,
        store,
        &model.encoder,
        &model.estimator,
        &model.scorer,
        &config.detector,
        &config.contrastive,
        derive_seed(config.seed, Stream::Detector),
    )
}

pub fn embed_all(
    store: &ParameterStore<f64>,
    model: &Model,
    networks: &[&DynamicBrainNetwork<f64>],
) -> Result<Vec<NodeEmbeddings<f64>>> {
    networks.par_iter().map(|n| model.encoder.embed(store, n)).collect()
}

/// Score map of one probe, averaged over its references.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeDetection {
    pub subject: String,
    pub group: GroupLabel,
    pub map: EdgeScoreMap<f64>,
    pub circuit: CircuitSet,
}

/// Group-level result of one nicotine-vs-saline comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupDetection {
    pub group: GroupLabel,
    /// Cellwise mean of the group's probe maps.
    pub map: EdgeScoreMap<f64>,
    pub circuit: CircuitSet,
    pub hubs: HubWeights,
    pub phases: PhaseSplit,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub probes: Vec<ProbeDetection>,
    pub groups: Vec<GroupDetection>,
}

/// Scores every test nicotine subject against every test saline subject.
pub fn detect(
    config: &RunConfig,
    networks: &[DynamicBrainNetwork<f64>],
    split: &Split,
    store: &ParameterStore<f64>,
    model: &Model,
) -> Result<Detection> {
    let refs = members(networks, &split.test, GroupLabel::Saline);
    if refs.is_empty() {
        return Err(Error::Split("no saline subject in the test split".into()));
    }
    let ref_embeddings = embed_all(store, model, &refs)?;
    let labels = &networks[0].region_labels;
    let fraction = config.detector.top_fraction;
    let selection = config.detector.selection;
    let mut probes = Vec::new();
    let mut groups = Vec::new();
    for group in NICOTINE_GROUPS {
        let group_probes = members(networks, &split.test, group);
        if group_probes.is_empty() {
            return Err(Error::Split(format!("no {group} subject in the test split")));
        }
        let probe_embeddings = embed_all(store, model, &group_probes)?;
        let detections = group_probes
            .par_iter()
            .zip(&probe_embeddings)
            .map(|(probe, embedding)| {
                let maps = refs
                    .iter()
                    .zip(&ref_embeddings)
                    .map(|(reference, ref_embedding)| {
                        let pair = PairedSample::new(reference, probe)?;
                        score_embeddings(store, &model.scorer, embedding, ref_embedding, &pair.weight_change())
                    })
                    .collect::<Result<Vec<_>>>()?;
                let map = EdgeScoreMap::mean(&maps)?;
                let circuit = top_percent(&map, fraction, selection, &probe.subject_id, labels)?;
                Ok(ProbeDetection {
                    subject: probe.subject_id.clone(),
                    group,
                    map,
                    circuit,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let maps: Vec<EdgeScoreMap<f64>> = detections.iter().map(|d| d.map.clone()).collect();
        let map = EdgeScoreMap::mean(&maps)?;
        let circuit = top_percent(&map, fraction, selection, pair_name(group), labels)?;
        let sets: Vec<CircuitSet> = detections.iter().map(|d| d.circuit.clone()).collect();
        let hubs = aggregate_hubs(&sets)?;
        let phases = phase_split_report(&circuit, None)?;
        probes.extend(detections);
        groups.push(GroupDetection {
            group,
            map,
            circuit,
            hubs,
            phases,
        });
    }
    Ok(Detection { probes, groups })
}

/// Classification metrics and the label-shuffled baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub metrics: MetricsReport,
    /// Test accuracies with training labels permuted, one per repeat.
    pub shuffled_accuracies: Vec<f64>,
    pub shuffled_mean_accuracy: f64,
}

/// Global representation of every subject, in network order.
pub fn globals(
    store: &ParameterStore<f64>,
    model: &Model,
    networks: &[DynamicBrainNetwork<f64>],
) -> Result<Vec<Vec<f64>>> {
    let refs: Vec<&DynamicBrainNetwork<f64>> = networks.iter().collect();
    embed_all(store, model, &refs)?
        .iter()
        .map(|e| global_representation(e).map(|g| g.0))
        .collect()
}

pub fn classify(
    config: &RunConfig,
    networks: &[DynamicBrainNetwork<f64>],
    split: &Split,
    features: &[Vec<f64>],
) -> Result<Classification> {
    let labels: Vec<usize> = networks.iter().map(|n| n.group.index()).collect();
    let classes: Vec<String> = GroupLabel::ALL.iter().map(|g| g.as_str().to_string()).collect();
    let classifier = config.evaluation.classifier();
    let metrics = classify_groups(features, &labels, &classes, split, &classifier)?;
    let shuffle_seed = derive_seed(config.seed, Stream::Shuffle);
    let shuffled_accuracies = (0..config.evaluation.shuffle_repeats)
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
            rng.set_stream(r as u64);
            let mut shuffled = labels.clone();
            rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut rng);
            let split = stratified_split(
                &shuffled,
                classes.len(),
                config.evaluation.train_fraction,
                rng.next_u64(),
            );
            classify_groups(features, &shuffled, &classes, &split, &classifier).map(|m| m.accuracy)
        })
        .collect::<Result<Vec<_>>>()?;
    let shuffled_mean_accuracy = if shuffled_accuracies.is_empty() {
        0.0
    } else {
        shuffled_accuracies.iter().sum::<f64>() / shuffled_accuracies.len() as f64
    };
    Ok(Classification {
        metrics,
        shuffled_accuracies,
        shuffled_mean_accuracy,
    })
}

/// Oracle top fraction of one nicotine group against saline over the whole cohort.
pub fn oracle_circuit(
    config: &RunConfig,
    networks: &[DynamicBrainNetwork<f64>],
    group: GroupLabel,
) -> Result<CircuitSet> {
    let map = oracle_scores(networks, &[group])?;
    top_percent(
        &map,
        config.detector.top_fraction,
        config.detector.selection,
        pair_name(group),
        &networks[0].region_labels,
    )
}

pub fn recovery(
    config: &RunConfig,
    cohort: &Cohort,
    networks: &[DynamicBrainNetwork<f64>],
    detection: &Detection,
) -> Result<Vec<RecoveryReport>> {
    let onset = cohort.generator_config.onset();
    let post = config.connectome.post_onset_timesteps(onset);
    detection
        .groups
        .iter()
        .map(|g| {
            let planted = cohort
                .planted(g.group)
                .ok_or_else(|| Error::Validation(format!("cohort has no {} subjects", g.group)))?;
            let oracle = oracle_circuit(config, networks, g.group)?;
            Ok(RecoveryReport::new(
                pair_name(g.group),
                config.detector.top_fraction,
                recovery_metrics(&g.circuit, planted, &post),
                recovery_metrics(&oracle, planted, &post),
            ))
        })
        .collect()
}

/// Everything one end-to-end run produces, kept in memory.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub cohort: Cohort,
    pub networks: Vec<DynamicBrainNetwork<f64>>,
    pub split: Split,
    pub store: ParameterStore<f64>,
    pub pretrain_trace: Vec<PretrainEpoch>,
    pub detector_trace: Vec<DetectorEpoch>,
    pub detection: Detection,
    pub globals: Vec<Vec<f64>>,
    pub classification: Classification,
    pub recovery: Vec<RecoveryReport>,
    pub projection: Vec<[f64; 2]>,
}

pub fn run(config: &RunConfig) -> Result<Outcome> {
    config.validate()?;
    let cohort = synthesize(config)?;
    run_on(config, cohort)
}

pub fn run_on(config: &RunConfig, cohort: Cohort) -> Result<Outcome> {
    let networks = build_networks(config, &cohort)?;
    let split = split_subjects(config, &networks);
    let (mut store, model) = Model::fresh(config, networks[0].window_length())?;
    let pretrain_trace = pretrain(config, &networks, &split, &mut store, &model)?;
    let detector_trace = train(config, &networks, &split, &mut store, &model)?;
    let detection = detect(config, &networks, &split, &store, &model)?;
    let globals = globals(&store, &model, &networks)?;
    let classification = classify(config, &networks, &split, &globals)?;
    let recovery = recovery(config, &cohort, &networks, &detection)?;
    let projection = project_2d(&globals)?;
    Ok(Outcome {
        cohort,
        networks,
        split,
        store,
        pretrain_trace,
        detector_trace,
        detection,
        globals,
        classification,
        recovery,
        projection,
    })
}
