use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{score_cells, DetectorConfig, PairedSample, PairingPolicy, ScorerParams};
use crate::contrastive::{subject_contrast, ContrastiveConfig, EstimatorParams};
use crate::diffcore::{NodeId, ParameterStore, Sgd, Tape};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::sgtmodel::SgtModel;

/// Matched positive/normal cell indices for one pair; entry `k` of each list forms one ranking pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RankingCandidates {
    pub positives: Vec<usize>,
    pub normals: Vec<usize>,
}

/// Positives are the `ceil(q·C)` cells with the largest `|Δω|` (ties by
/// index); normals are a same-size uniform sample of the remaining cells.
pub fn ranking_candidates<S: Scalar, R: Rng>(weight_change: &[S], fraction: f64, rng: &mut R) -> RankingCandidates {
    let cells = weight_change.len();
    let mut order: Vec<usize> = (0..cells).collect();
    order.sort_by(|&a, &b| {
        weight_change[b]
            .abs()
            .partial_cmp(&weight_change[a].abs())
            .expect("finite weights")
            .then(a.cmp(&b))
    });
    let k = ((fraction * cells as f64).ceil() as usize).max(1).min(cells / 2);
    let positives = order[..k].to_vec();
    let rest = &order[k..];
    let normals = rand::seq::index::sample(rng, rest.len(), k)
        .into_iter()
        .map(|r| rest[r])
        .collect();
    RankingCandidates { positives, normals }
}

/// `mean max(0, γ − s(a) + s(b)) + β · mean(s)` over scores `[C]`.
pub fn ranking_loss<S: Scalar>(
    tape: &mut Tape<S>,
    scores: NodeId,
    candidates: &RankingCandidates,
    margin: f64,
    sparsity: f64,
) -> Result<NodeId> {
    let cells = tape.value(scores).len();
    if candidates.positives.is_empty() || candidates.positives.len() != candidates.normals.len() {
        return Err(Error::Computation(format!(
            "ranking needs matched non-empty candidates, got {} positives and {} normals",
            candidates.positives.len(),
            candidates.normals.len()
        )));
    }
    let column = tape.reshape(scores, &[cells, 1])?;
    let pos: Arc<[usize]> = candidates.positives.as_slice().into();
    let normal: Arc<[usize]> = candidates.normals.as_slice().into();
    let sa = tape.gather_rows(column, pos)?;
    let sb = tape.gather_rows(column, normal)?;
    let gap = tape.sub(sb, sa)?;
    let margin = tape.constant(
        vec![S::lit(margin); candidates.positives.len()],
        &[candidates.positives.len(), 1],
    )?;
    let hinge = tape.add(gap, margin)?;
    let hinge = tape.relu(hinge)?;
    let hinge = tape.mean(hinge)?;
    let level = tape.mean(scores)?;
    let level = tape.scale(level, S::lit(sparsity))?;
    tape.add(hinge, level)
}

/// Mean losses of one detector epoch, measured before each update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorEpoch {
    pub epoch: usize,
    pub ranking: f64,
    pub infonce: f64,
    pub total: f64,
}

fn epoch_schedule(pairs: &[(usize, usize)], policy: PairingPolicy, epoch: usize) -> Vec<(usize, usize)> {
    match policy {
        PairingPolicy::AllPairs => pairs.to_vec(),
        PairingPolicy::Rotating => {
            let mut probes: Vec<usize> = pairs.iter().map(|p| p.1).collect();
            probes.sort_unstable();
            probes.dedup();
            probes
                .iter()
                .enumerate()
                .map(|(k, &probe)| {
                    let refs: Vec<usize> = pairs.iter().filter(|p| p.1 == probe).map(|p| p.0).collect();
                    (refs[(k + epoch) % refs.len()], probe)
                })
                .collect()
        }
    }
}

/// Trains the scorer (and fine-tunes encoder and estimator) on
/// `ranking + α₂·contrast`, one update per scheduled pair.
#[allow(clippy::too_many_arguments)]
pub fn train_detector<S: Scalar>(
    pairs: &[PairedSample<'_, S>],
    store: &mut ParameterStore<S>,
    model: &SgtModel,
    estimator: &EstimatorParams,
    scorer: &ScorerParams,
    config: &DetectorConfig,
    contrastive: &ContrastiveConfig,
    seed: u64,
) -> Result<Vec<DetectorEpoch>> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(Error::Validation("detector training needs at least one pair".into()));
    }
    // Index pairs by (reference, probe) identity so the rotation is well defined.
    let mut refs: Vec<&str> = Vec::new();
    let mut probes: Vec<&str> = Vec::new();
    let mut keyed = Vec::with_capacity(pairs.len());
    for (k, pair) in pairs.iter().enumerate() {
        let r = position_or_push(&mut refs, &pair.reference.subject_id);
        let p = position_or_push(&mut probes, &pair.probe.subject_id);
        keyed.push(((r, p), k));
    }
    let lookup = |r: usize, p: usize| keyed.iter().find(|(key, _)| *key == (r, p)).map(|(_, k)| *k);
    let index_pairs: Vec<(usize, usize)> = keyed.iter().map(|(key, _)| *key).collect();

    let alpha = S::lit(config.alpha);
    let encoder_scale = config.encoder_lr_scale;
    let mut sgd = Sgd::new(config.optimizer);
    let mut trace = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch as u64);
        let mut schedule = epoch_schedule(&index_pairs, config.pairing, epoch);
        schedule.shuffle(&mut rng);
        let (mut ranking_sum, mut contrast_sum) = (0.0, 0.0);
        for &(r, p) in &schedule {
            let pair = &pairs[lookup(r, p).expect("scheduled pair exists")];
            let (t, m, d) = (pair.probe.timesteps(), pair.probe.regions(), model.config.embed_dim);
            let mut tape = Tape::new();
            let probe_features = model.features(&mut tape, pair.probe)?;
            let probe_adjacency = model.adjacency_bias(&mut tape, pair.probe)?;
            let probe = model.encode_from(&mut tape, store, probe_features, probe_adjacency, t, m)?;
            let reference = model.encode(&mut tape, store, pair.reference)?;
            let hp = tape.reshape(probe.embeddings, &[t * m, d])?;
            let hr = tape.reshape(reference.embeddings, &[t * m, d])?;
            let change = pair.weight_change();
            let scores = score_cells(&mut tape, store, scorer, hp, hr, &change, t, m)?;
            let candidates = ranking_candidates(&change, config.candidate_fraction, &mut rng);
            let ranking = ranking_loss(&mut tape, scores, &candidates, config.margin, config.sparsity)?;
            let contrast = subject_contrast(
                &mut tape,
                store,
                model,
                estimator,
                pair.probe,
                probe.embeddings,
                probe_adjacency,
                contrastive,
                &mut rng,
            )?;
            ranking_sum += tape.scalar(ranking).as_f64();
            contrast_sum += tape.scalar(contrast).as_f64();
            let weighted = tape.scale(contrast, alpha)?;
            let total = tape.add(ranking, weighted)?;
            let grads = tape.backward(total)?;
            store.set_grads(&grads);
            sgd.step(store, |name| {
                if name.starts_with("encoder.") {
                    encoder_scale
                } else {
                    1.0
                }
            });
        }
        let n = schedule.len() as f64;
        let (ranking, infonce) = (ranking_sum / n, contrast_sum / n);
        trace.push(DetectorEpoch {
            epoch: epoch + 1,
            ranking,
            infonce,
            total: ranking + config.alpha * infonce,
        });
    }
    Ok(trace)
}

fn position_or_push<'a>(list: &mut Vec<&'a str>, id: &'a str) -> usize {
    match list.iter().position(|&x| x == id) {
        Some(k) => k,
        None => {
            list.push(id);
            list.len() - 1
        }
    }
}
