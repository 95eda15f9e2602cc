//! Per-connection anomaly scoring of nicotine networks against saline
//! references, ranking-loss training, top-fraction circuit extraction and
//! hub aggregation.

mod circuits;
mod train;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use circuits::{
    aggregate_hubs, phase_split_report, top_percent, write_circuits_csv, write_hubs_csv, CircuitCell, CircuitSet,
    HubWeights, PhaseSplit, Selection, TIE_BREAK,
};
pub use train::{ranking_candidates, ranking_loss, train_detector, DetectorEpoch, RankingCandidates};

use crate::connectome::DynamicBrainNetwork;
use crate::diffcore::{Init, NodeId, ParamId, ParameterStore, SgdConfig, Tape};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::sgtmodel::{NodeEmbeddings, SgtModel};
use crate::synthcohort::GroupLabel;

/// How training pairs are drawn each epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairingPolicy {
    /// Every (reference, probe) pair once per epoch.
    AllPairs,
    /// Each probe once per epoch, against reference `(probe + epoch) mod n`.
    Rotating,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    /// Hidden width of the scoring perceptron.
    pub hidden: usize,
    /// Hinge margin `γ`.
    pub margin: f64,
    /// Weight `β` of the mean-score sparsity term.
    pub sparsity: f64,
    /// Fraction `q` of cells, by `|Δω|`, used as candidate positives.
    pub candidate_fraction: f64,
    /// Fraction `p` of cells kept as circuits.
    pub top_fraction: f64,
    pub selection: Selection,
    /// Weight `α₂` of the contrast term.
    pub alpha: f64,
    pub epochs: usize,
    pub pairing: PairingPolicy,
    /// Encoder learning-rate multiplier during detector training; 0 freezes it.
    pub encoder_lr_scale: f64,
    pub optimizer: SgdConfig,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            margin: 0.5,
            sparsity: 1e-3,
            candidate_fraction: 0.05,
            top_fraction: 0.01,
            selection: Selection::Pooled,
            alpha: 0.1,
            epochs: 50,
            pairing: PairingPolicy::Rotating,
            encoder_lr_scale: 0.1,
            optimizer: SgdConfig {
                learning_rate: 0.02,
                ..SgdConfig::default()
            },
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let fraction = |name: &str, v: f64| {
            if v > 0.0 && v <= 1.0 {
                Ok(())
            } else {
                Err(Error::Validation(format!(
                    "detector.{name} must lie in (0, 1], got {v}"
                )))
            }
        };
        fraction("candidate_fraction", self.candidate_fraction)?;
        fraction("top_fraction", self.top_fraction)?;
        if self.hidden == 0 {
            return Err(Error::Validation("detector.hidden must be ≥ 1".into()));
        }
        for (name, v) in [
            ("margin", self.margin),
            ("sparsity", self.sparsity),
            ("alpha", self.alpha),
            ("encoder_lr_scale", self.encoder_lr_scale),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Validation(format!("detector.{name} must be finite and ≥ 0")));
            }
        }
        if self.epochs < 1 {
            return Err(Error::Validation("detector.epochs must be ≥ 1".into()));
        }
        self.optimizer.validate()
    }
}

/// A nicotine probe network and the saline reference it is compared against.
#[derive(Clone, Copy, Debug)]
pub struct PairedSample<'a, S> {
    pub reference: &'a DynamicBrainNetwork<S>,
    pub probe: &'a DynamicBrainNetwork<S>,
}

impl<'a, S: Scalar> PairedSample<'a, S> {
    pub fn new(reference: &'a DynamicBrainNetwork<S>, probe: &'a DynamicBrainNetwork<S>) -> Result<Self> {
        if reference.group != GroupLabel::Saline {
            return Err(Error::Pairing(format!(
                "reference `{}` is {}, expected saline",
                reference.subject_id, reference.group
            )));
        }
        if !probe.group.is_nicotine() {
            return Err(Error::Pairing(format!("probe `{}` is saline", probe.subject_id)));
        }
        Self::unchecked(reference, probe)
    }

    /// Pairs two networks of any group (self-pairs, control comparisons).
    pub fn unchecked(reference: &'a DynamicBrainNetwork<S>, probe: &'a DynamicBrainNetwork<S>) -> Result<Self> {
        if reference.region_labels != probe.region_labels {
            return Err(Error::Pairing(format!(
                "region labels of `{}` and `{}` differ",
                reference.subject_id, probe.subject_id
            )));
        }
        if reference.timesteps() != probe.timesteps() || reference.window_length() != probe.window_length() {
            return Err(Error::Pairing(format!(
                "`{}` has {} windows of {}, `{}` has {} windows of {}",
                reference.subject_id,
                reference.timesteps(),
                reference.window_length(),
                probe.subject_id,
                probe.timesteps(),
                probe.window_length()
            )));
        }
        Ok(Self { reference, probe })
    }

    pub fn pairing_id(&self) -> String {
        format!("{}~{}", self.reference.subject_id, self.probe.subject_id)
    }

    /// `ω(probe) − ω(reference)` per cell, in [`EdgeScoreMap`] cell order.
    pub fn weight_change(&self) -> Vec<S> {
        let m = self.probe.regions();
        let mut out = Vec::with_capacity(self.probe.cell_count());
        for (p, r) in self.probe.snapshots.iter().zip(&self.reference.snapshots) {
            for i in 0..m {
                for j in i + 1..m {
                    out.push(p.adjacency[[i, j]] - r.adjacency[[i, j]]);
                }
            }
        }
        out
    }
}

/// Scores of every `(timestep, i < j)` cell, timestep-major then `(i, j)` lexicographic.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeScoreMap<S> {
    pub timesteps: usize,
    pub regions: usize,
    pub scores: Vec<S>,
}

impl<S: Scalar> EdgeScoreMap<S> {
    pub fn cells_per_timestep(&self) -> usize {
        self.regions * (self.regions - 1) / 2
    }

    /// Flat index of 1-based `timestep` and unordered pair `(i, j)`.
    pub fn index(&self, timestep: usize, i: usize, j: usize) -> usize {
        let (i, j) = if i < j { (i, j) } else { (j, i) };
        let m = self.regions;
        (timestep - 1) * self.cells_per_timestep() + i * (2 * m - i - 1) / 2 + (j - i - 1)
    }

    pub fn get(&self, timestep: usize, i: usize, j: usize) -> S {
        self.scores[self.index(timestep, i, j)]
    }

    /// `(timestep, i, j, score)` in storage order.
    pub fn cells(&self) -> impl Iterator<Item = (usize, usize, usize, S)> + '_ {
        let m = self.regions;
        (1..=self.timesteps)
            .flat_map(move |t| (0..m).flat_map(move |i| (i + 1..m).map(move |j| (t, i, j))))
            .zip(&self.scores)
            .map(|((t, i, j), &s)| (t, i, j, s))
    }

    /// Cellwise mean of maps with equal dimensions.
    pub fn mean(maps: &[EdgeScoreMap<S>]) -> Result<Self> {
        let first = maps
            .first()
            .ok_or_else(|| Error::Aggregation("no score maps to average".into()))?;
        let mut scores = vec![S::zero(); first.scores.len()];
        for map in maps {
            if (map.timesteps, map.regions) != (first.timesteps, first.regions) {
                return Err(Error::Aggregation("score maps differ in size".into()));
            }
            for (acc, &v) in scores.iter_mut().zip(&map.scores) {
                *acc += v;
            }
        }
        let n = S::count(maps.len());
        scores.iter_mut().for_each(|v| *v /= n);
        Ok(Self {
            timesteps: first.timesteps,
            regions: first.regions,
            scores,
        })
    }
}

/// Two-layer perceptron over `[h_i(probe) ‖ h_j(probe) ‖ h_i(ref) ‖ h_j(ref) ‖ Δω]`.
///
/// The first layer is held as one block per input segment so the per-region
/// products can be computed once and gathered per cell.
#[derive(Clone, Copy, Debug)]
pub struct ScorerParams {
    pub probe_i: ParamId,
    pub probe_j: ParamId,
    pub reference_i: ParamId,
    pub reference_j: ParamId,
    pub delta: ParamId,
    pub hidden_bias: ParamId,
    pub output: ParamId,
    pub output_bias: ParamId,
}

impl ScorerParams {
    pub fn new<S: Scalar>(store: &mut ParameterStore<S>, dim: usize, hidden: usize) -> Result<Self> {
        let first = Init::Uniform { fan_in: 4 * dim + 1 };
        let second = Init::Uniform { fan_in: hidden };
        Ok(Self {
            probe_i: store.get_or_add("scorer.probe_i", &[dim, hidden], first)?,
            probe_j: store.get_or_add("scorer.probe_j", &[dim, hidden], first)?,
            reference_i: store.get_or_add("scorer.reference_i", &[dim, hidden], first)?,
            reference_j: store.get_or_add("scorer.reference_j", &[dim, hidden], first)?,
            delta: store.get_or_add("scorer.delta", &[1, hidden], first)?,
            hidden_bias: store.get_or_add("scorer.hidden_bias", &[hidden], first)?,
            output: store.get_or_add("scorer.output", &[hidden, 1], second)?,
            output_bias: store.get_or_add("scorer.output_bias", &[1], second)?,
        })
    }
}

/// Row indices into `[T·M, ·]` of the two endpoints of every cell.
fn endpoint_rows(timesteps: usize, regions: usize) -> (Arc<[usize]>, Arc<[usize]>) {
    let mut first = Vec::new();
    let mut second = Vec::new();
    for t in 0..timesteps {
        for i in 0..regions {
            for j in i + 1..regions {
                first.push(t * regions + i);
                second.push(t * regions + j);
            }
        }
    }
    (first.into(), second.into())
}

/// Symmetrized cell scores `[C]` from probe and reference embeddings (`[T·M, d]` each).
#[allow(clippy::too_many_arguments)]
pub fn score_cells<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParameterStore<S>,
    scorer: &ScorerParams,
    probe: NodeId,
    reference: NodeId,
    weight_change: &[S],
    timesteps: usize,
    regions: usize,
) -> Result<NodeId> {
    let [pi, pj, ri, rj, delta, b1, w2, b2] = [
        scorer.probe_i,
        scorer.probe_j,
        scorer.reference_i,
        scorer.reference_j,
        scorer.delta,
        scorer.hidden_bias,
        scorer.output,
        scorer.output_bias,
    ]
    .map(|id| tape.param(store, id));
    let (pi, pj, ri, rj, delta, b1, w2, b2) = (pi?, pj?, ri?, rj?, delta?, b1?, w2?, b2?);

    // Contribution of a region in the first (u) or second (v) endpoint slot.
    let u = tape.matmul(probe, pi)?;
    let ur = tape.matmul(reference, ri)?;
    let u = tape.add(u, ur)?;
    let v = tape.matmul(probe, pj)?;
    let vr = tape.matmul(reference, rj)?;
    let v = tape.add(v, vr)?;

    let cells = weight_change.len();
    let dw = tape.constant(weight_change.to_vec(), &[cells, 1])?;
    let shared = tape.matmul(dw, delta)?;
    let shared = tape.add_broadcast(shared, b1)?;

    let (first, second) = endpoint_rows(timesteps, regions);
    let mut orderings = Vec::with_capacity(2);
    for (a, b) in [(first.clone(), second.clone()), (second, first)] {
        let ua = tape.gather_rows(u, a)?;
        let vb = tape.gather_rows(v, b)?;
        let pre = tape.add(ua, vb)?;
        let pre = tape.add(pre, shared)?;
        let hidden = tape.relu(pre)?;
        let out = tape.matmul(hidden, w2)?;
        let out = tape.add_broadcast(out, b2)?;
        orderings.push(tape.sigmoid(out)?);
    }
    let both = tape.add(orderings[0], orderings[1])?;
    let mean = tape.scale(both, S::lit(0.5))?;
    tape.reshape(mean, &[cells])
}

/// Scores a pair from precomputed embeddings of both members.
pub fn score_embeddings<S: Scalar>(
    store: &ParameterStore<S>,
    scorer: &ScorerParams,
    probe: &NodeEmbeddings<S>,
    reference: &NodeEmbeddings<S>,
    weight_change: &[S],
) -> Result<EdgeScoreMap<S>> {
    let (t, m, d) = (probe.timesteps, probe.regions, probe.dim);
    let mut tape = Tape::new();
    let hp = tape.constant(probe.values.clone(), &[t * m, d])?;
    let hr = tape.constant(reference.values.clone(), &[t * m, d])?;
    let scores = score_cells(&mut tape, store, scorer, hp, hr, weight_change, t, m)?;
    Ok(EdgeScoreMap {
        timesteps: t,
        regions: m,
        scores: tape.value(scores).to_vec(),
    })
}

/// Encodes both members of `pair` and scores every cell.
pub fn score_edges<S: Scalar>(
    pair: &PairedSample<'_, S>,
    store: &ParameterStore<S>,
    model: &SgtModel,
    scorer: &ScorerParams,
) -> Result<EdgeScoreMap<S>> {
    let probe = model.embed(store, pair.probe)?;
    let reference = model.embed(store, pair.reference)?;
    score_embeddings(store, scorer, &probe, &reference, &pair.weight_change())
}

#[cfg(test)]
mod tests;
