//! Local/global contrast: corrupted negatives, a bilinear estimator, the
//! InfoNCE objective and encoder pretraining on control networks.

mod pretrain;

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use pretrain::{pretrain_encoder, subject_contrast, write_trace_csv, PretrainEpoch, TRACE_FILE};

use crate::connectome::DynamicBrainNetwork;
use crate::diffcore::{Init, NodeId, ParamId, ParameterStore, SgdConfig, Tape};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Which mutual-information bound the contrast term uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Softmax over one positive and its `K` negatives.
    InfoNce,
    /// Binary cross-entropy on positives and negatives separately.
    InfoMax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastiveConfig {
    /// Negatives per positive, `K`.
    pub negatives: usize,
    /// Positive `(timestep, region)` cells sampled per subject and step.
    pub positives: usize,
    /// Weight of the reconstruction term.
    pub alpha: f64,
    pub epochs: usize,
    pub objective: Objective,
    pub optimizer: SgdConfig,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            negatives: 5,
            positives: 64,
            alpha: 1.0,
            epochs: 50,
            objective: Objective::InfoNce,
            optimizer: SgdConfig::default(),
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.negatives < 1 {
            return Err(Error::Validation("contrastive.negatives must be ≥ 1".into()));
        }
        if self.positives < 1 {
            return Err(Error::Validation("contrastive.positives must be ≥ 1".into()));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::Validation("contrastive.alpha must be finite and ≥ 0".into()));
        }
        if self.epochs < 1 {
            return Err(Error::Validation("contrastive.epochs must be ≥ 1".into()));
        }
        self.optimizer.validate()
    }
}

/// Bilinear estimator weight `W` (`d × d`).
#[derive(Clone, Copy, Debug)]
pub struct EstimatorParams {
    pub weight: ParamId,
}

impl EstimatorParams {
    pub fn new<S: Scalar>(store: &mut ParameterStore<S>, dim: usize) -> Result<Self> {
        let weight = store.get_or_add("estimator.weight", &[dim, dim], Init::Uniform { fan_in: dim })?;
        Ok(Self { weight })
    }
}

/// Tape handles of one subject's contrast samples.
#[derive(Clone, Copy, Debug)]
pub struct ContrastBatch {
    /// `[d]`.
    pub anchor: NodeId,
    /// `[P, d]`.
    pub positives: NodeId,
    /// `[P·K, d]`, the `K` negatives of positive `p` in rows `p·K..(p+1)·K`.
    pub negatives: NodeId,
    pub negatives_per_positive: usize,
}

/// Copy of `network` whose node features are row-shuffled by one seeded
/// permutation per timestep; adjacency is untouched.
pub fn corrupt_network<S: Scalar>(network: &DynamicBrainNetwork<S>, seed: u64) -> DynamicBrainNetwork<S> {
    let mut out = network.clone();
    let m = network.regions();
    for (t, snap) in out.snapshots.iter_mut().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(t as u64);
        let mut perm: Vec<usize> = (0..m).collect();
        perm.shuffle(&mut rng);
        let source = &network.snapshots[t].node_features;
        for (dst, &src) in perm.iter().enumerate() {
            snap.node_features.row_mut(dst).assign(&source.row(src));
        }
    }
    out
}

/// `localᵀ · W · global` with `W` row-major `d × d`.
pub fn estimator_score<S: Scalar>(local: &[S], global: &[S], weight: &[S]) -> S {
    let d = global.len();
    local
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            l * weight[i * d..(i + 1) * d]
                .iter()
                .zip(global)
                .map(|(&w, &g)| w * g)
                .sum::<S>()
        })
        .sum()
}

/// Samples positives from `true_locals` (`[n, d]`) and `K` negatives each
/// from `corrupt_locals` (`[n, d]`), anchored on `anchor` (`[d]`).
pub fn contrast_batch<S: Scalar, R: Rng>(
    tape: &mut Tape<S>,
    anchor: NodeId,
    true_locals: NodeId,
    corrupt_locals: NodeId,
    config: &ContrastiveConfig,
    rng: &mut R,
) -> Result<ContrastBatch> {
    let n = tape.shape(true_locals)[0];
    let p = config.positives.min(n);
    let pos: Arc<[usize]> = rand::seq::index::sample(rng, n, p).into_iter().collect();
    let neg: Arc<[usize]> = (0..p * config.negatives).map(|_| rng.random_range(0..n)).collect();
    Ok(ContrastBatch {
        anchor,
        positives: tape.gather_rows(true_locals, pos)?,
        negatives: tape.gather_rows(corrupt_locals, neg)?,
        negatives_per_positive: config.negatives,
    })
}

/// Estimator logits of positives `[P, 1]` and negatives `[P, K]`.
fn batch_logits<S: Scalar>(tape: &mut Tape<S>, batch: &ContrastBatch, weight: NodeId) -> Result<(NodeId, NodeId)> {
    let d = tape.shape(batch.anchor)[0];
    let g = tape.reshape(batch.anchor, &[d, 1])?;
    let wg = tape.matmul(weight, g)?;
    let pos = tape.matmul(batch.positives, wg)?;
    let p = tape.shape(pos)[0];
    let neg = tape.matmul(batch.negatives, wg)?;
    let neg = tape.reshape(neg, &[p, batch.negatives_per_positive])?;
    Ok((pos, neg))
}

/// Mean over positives of `−log(e^{s⁺} / (e^{s⁺} + Σₖ e^{s⁻ₖ}))`.
pub fn infonce_loss<S: Scalar>(tape: &mut Tape<S>, batch: &ContrastBatch, weight: NodeId) -> Result<NodeId> {
    let (pos, neg) = batch_logits(tape, batch, weight)?;
    let logits = tape.concat(&[pos, neg], 1)?;
    let lse = tape.log_sum_exp(logits)?;
    let lse = tape.mean(lse)?;
    let pos = tape.mean(pos)?;
    tape.sub(lse, pos)
}

/// `softplus(x) = log(1 + eˣ)` elementwise.
fn softplus<S: Scalar>(tape: &mut Tape<S>, x: NodeId) -> Result<NodeId> {
    let n = tape.value(x).len();
    let col = tape.reshape(x, &[n, 1])?;
    let zeros = tape.constant(vec![S::zero(); n], &[n, 1])?;
    let pair = tape.concat(&[zeros, col], 1)?;
    tape.log_sum_exp(pair)
}

/// Binary cross-entropy form: `mean softplus(−s⁺) + mean softplus(s⁻)`.
pub fn infomax_loss<S: Scalar>(tape: &mut Tape<S>, batch: &ContrastBatch, weight: NodeId) -> Result<NodeId> {
    let (pos, neg) = batch_logits(tape, batch, weight)?;
    let flipped = tape.scale(pos, -S::one())?;
    let a = softplus(tape, flipped)?;
    let a = tape.mean(a)?;
    let b = softplus(tape, neg)?;
    let b = tape.mean(b)?;
    tape.add(a, b)
}

pub fn contrast_loss<S: Scalar>(
    tape: &mut Tape<S>,
    batch: &ContrastBatch,
    weight: NodeId,
    objective: Objective,
) -> Result<NodeId> {
    match objective {
        Objective::InfoNce => infonce_loss(tape, batch, weight),
        Objective::InfoMax => infomax_loss(tape, batch, weight),
    }
}

#[cfg(test)]
mod tests;
