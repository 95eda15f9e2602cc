//! Spatiotemporal graph transformer encoder and inner-product FC decoder.
//!
//! The encoder projects each region's windowed series to `d` dimensions and
//! then alternates spatial attention (regions within one snapshot, logits
//! biased by `λ·ω`) with temporal attention (one region across neighboring
//! snapshots, radius-masked, sinusoidal timestep encodings).

mod attention;

use serde::{Deserialize, Serialize};

pub use attention::{attention_layer, AttentionOutput, AttentionParams};

use crate::connectome::DynamicBrainNetwork;
use crate::diffcore::{Init, NodeId, ParamId, ParameterStore, Tape};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgtConfig {
    pub embed_dim: usize,
    pub heads: usize,
    /// Number of (spatial, temporal) layer pairs.
    pub layer_pairs: usize,
    /// Timesteps each slice may attend to on either side.
    pub temporal_radius: usize,
    /// Initial value of the learnable adjacency-bias weight `λ`.
    pub adjacency_bias_weight: f64,
}

impl Default for SgtConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            heads: 4,
            layer_pairs: 2,
            temporal_radius: 1,
            adjacency_bias_weight: 1.0,
        }
    }
}

impl SgtConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::Validation(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.temporal_radius < 1 {
            return Err(Error::Validation("temporal_radius must be ≥ 1".into()));
        }
        if self.layer_pairs < 1 {
            return Err(Error::Validation("layer_pairs must be ≥ 1".into()));
        }
        if !self.adjacency_bias_weight.is_finite() {
            return Err(Error::Validation("adjacency_bias_weight must be finite".into()));
        }
        Ok(())
    }
}

/// Parameter handles of the encoder.
#[derive(Clone, Debug)]
pub struct SgtModel {
    pub config: SgtConfig,
    pub input_dim: usize,
    pub input_weight: ParamId,
    pub input_bias: ParamId,
    pub layers: Vec<(AttentionParams, AttentionParams)>,
}

/// Tape handles produced by [`SgtModel::encode`].
#[derive(Clone, Debug)]
pub struct Encoded {
    /// `[T, M, d]` node embeddings.
    pub embeddings: NodeId,
    /// Spatial attention weights per layer, `[T·h, M, M]`.
    pub spatial_weights: Vec<NodeId>,
    /// Temporal attention weights per layer, `[M·h, T, T]`.
    pub temporal_weights: Vec<NodeId>,
}

/// Sinusoidal encoding of timestep indices `0..timesteps`, `[timesteps, dim]`.
pub fn positional_encoding<S: Scalar>(timesteps: usize, dim: usize) -> Vec<S> {
    let mut out = Vec::with_capacity(timesteps * dim);
    for t in 0..timesteps {
        for c in 0..dim {
            let pair = (c / 2) as f64;
            let angle = t as f64 / 10000f64.powf(2.0 * pair / dim as f64);
            out.push(S::lit(if c % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    out
}

/// `n × n` mask allowing `|t − t'| ≤ radius`.
pub fn temporal_mask(timesteps: usize, radius: usize) -> Vec<bool> {
    (0..timesteps)
        .flat_map(|t| (0..timesteps).map(move |u| t.abs_diff(u) <= radius))
        .collect()
}

impl SgtModel {
    /// Binds the encoder's parameters in `store`, registering any that are missing.
    pub fn new<S: Scalar>(store: &mut ParameterStore<S>, config: &SgtConfig, input_dim: usize) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let input_weight = store.get_or_add(
            "encoder.input.weight",
            &[input_dim, d],
            Init::Uniform { fan_in: input_dim },
        )?;
        let input_bias = store.get_or_add("encoder.input.bias", &[d], Init::Uniform { fan_in: input_dim })?;
        let layers = (0..config.layer_pairs)
            .map(|l| {
                Ok((
                    AttentionParams::register(
                        store,
                        &format!("encoder.spatial.{l}"),
                        d,
                        Some(config.adjacency_bias_weight),
                    )?,
                    AttentionParams::register(store, &format!("encoder.temporal.{l}"), d, None)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: config.clone(),
            input_dim,
            input_weight,
            input_bias,
            layers,
        })
    }

    fn check_network<S: Scalar>(&self, network: &DynamicBrainNetwork<S>) -> Result<()> {
        if network.window_length() != self.input_dim {
            return Err(Error::Shape {
                op: "encode",
                lhs: vec![network.regions(), network.window_length()],
                rhs: vec![self.input_dim, self.config.embed_dim],
            });
        }
        Ok(())
    }

    /// Records the input features `[T·M, L]` as a constant.
    pub fn features<S: Scalar>(&self, tape: &mut Tape<S>, network: &DynamicBrainNetwork<S>) -> Result<NodeId> {
        self.check_network(network)?;
        let (t, m, l) = (network.timesteps(), network.regions(), network.window_length());
        let values = network
            .snapshots
            .iter()
            .flat_map(|s| s.node_features.iter().copied())
            .collect();
        tape.constant(values, &[t * m, l])
    }

    /// Adjacency repeated per head, `[T·h, M, M]`.
    pub fn adjacency_bias<S: Scalar>(&self, tape: &mut Tape<S>, network: &DynamicBrainNetwork<S>) -> Result<NodeId> {
        let (t, m, h) = (network.timesteps(), network.regions(), self.config.heads);
        let mut values = Vec::with_capacity(t * h * m * m);
        for snap in &network.snapshots {
            for _ in 0..h {
                values.extend(snap.adjacency.iter().copied());
            }
        }
        tape.constant(values, &[t * h, m, m])
    }

    /// Runs the encoder from precomputed feature and adjacency constants.
    pub fn encode_from<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParameterStore<S>,
        features: NodeId,
        adjacency: NodeId,
        timesteps: usize,
        regions: usize,
    ) -> Result<Encoded> {
        let d = self.config.embed_dim;
        let h = self.config.heads;
        let w = tape.param(store, self.input_weight)?;
        let b = tape.param(store, self.input_bias)?;
        let x = tape.matmul(features, w)?;
        let x = tape.add_broadcast(x, b)?;
        let mut x = tape.reshape(x, &[timesteps, regions, d])?;

        let pe = tape.constant(positional_encoding(timesteps, d), &[timesteps, d])?;
        let mask = temporal_mask(timesteps, self.config.temporal_radius);
        let mut spatial_weights = Vec::new();
        let mut temporal_weights = Vec::new();
        for (spatial, temporal) in &self.layers {
            let s = attention_layer(tape, store, spatial, x, h, Some(adjacency), None)?;
            spatial_weights.push(s.weights);
            let by_region = tape.permute(s.output, &[1, 0, 2])?;
            let by_region = tape.add_broadcast(by_region, pe)?;
            let t = attention_layer(tape, store, temporal, by_region, h, None, Some(&mask))?;
            temporal_weights.push(t.weights);
            x = tape.permute(t.output, &[1, 0, 2])?;
        }
        Ok(Encoded {
            embeddings: x,
            spatial_weights,
            temporal_weights,
        })
    }

    /// Encodes a dynamic network into `[T, M, d]` node embeddings.
    pub fn encode<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParameterStore<S>,
        network: &DynamicBrainNetwork<S>,
    ) -> Result<Encoded> {
        let features = self.features(tape, network)?;
        let adjacency = self.adjacency_bias(tape, network)?;
        self.encode_from(tape, store, features, adjacency, network.timesteps(), network.regions())
    }

    /// Evaluates the encoder without keeping the tape.
    pub fn embed<S: Scalar>(
        &self,
        store: &ParameterStore<S>,
        network: &DynamicBrainNetwork<S>,
    ) -> Result<NodeEmbeddings<S>> {
        let mut tape = Tape::new();
        let enc = self.encode(&mut tape, store, network)?;
        Ok(NodeEmbeddings {
            timesteps: network.timesteps(),
            regions: network.regions(),
            dim: self.config.embed_dim,
            values: tape.value(enc.embeddings).to_vec(),
        })
    }
}

/// Per-timestep, per-region latent vectors, `[T, M, d]` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeEmbeddings<S> {
    pub timesteps: usize,
    pub regions: usize,
    pub dim: usize,
    pub values: Vec<S>,
}

impl<S: Scalar> NodeEmbeddings<S> {
    pub fn get(&self, t: usize, region: usize) -> &[S] {
        let start = (t * self.regions + region) * self.dim;
        &self.values[start..start + self.dim]
    }
}

/// Network-level summary vector in `(0, 1)^d`.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalRepresentation<S>(pub Vec<S>);

/// Mean over regions, then over timesteps, then sigmoid: `[T, M, d]` → `[d]`.
pub fn readout<S: Scalar>(tape: &mut Tape<S>, embeddings: NodeId) -> Result<NodeId> {
    let per_step = tape.mean_axis(embeddings, 1)?;
    let pooled = tape.mean_axis(per_step, 0)?;
    tape.sigmoid(pooled)
}

pub fn global_representation<S: Scalar>(embeddings: &NodeEmbeddings<S>) -> Result<GlobalRepresentation<S>> {
    let mut tape = Tape::new();
    let e = tape.constant(
        embeddings.values.clone(),
        &[embeddings.timesteps, embeddings.regions, embeddings.dim],
    )?;
    let g = readout(&mut tape, e)?;
    Ok(GlobalRepresentation(tape.value(g).to_vec()))
}

/// Reconstructed adjacency `tanh(z_i·z_j/√d)` for every timestep: `[T, M, d]` → `[T, M, M]`.
///
/// The recorded diagonal holds `tanh(‖z_i‖²/√d)`; [`decode_fc`] reports it as 1.
pub fn decode_all<S: Scalar>(tape: &mut Tape<S>, embeddings: NodeId) -> Result<NodeId> {
    let d = tape.shape(embeddings)[2];
    let zt = tape.transpose(embeddings)?;
    let gram = tape.batch_matmul(embeddings, zt)?;
    let gram = tape.scale(gram, S::one() / S::count(d).sqrt())?;
    tape.tanh(gram)
}

/// Reconstructed FC matrix of one timestep from its `M × d` embeddings, diagonal set to 1.
pub fn decode_fc<S: Scalar>(embeddings: &NodeEmbeddings<S>, t: usize) -> ndarray::Array2<S> {
    let (m, d) = (embeddings.regions, embeddings.dim);
    let scale = S::one() / S::count(d).sqrt();
    let mut out = ndarray::Array2::<S>::zeros((m, m));
    for i in 0..m {
        out[[i, i]] = S::one();
        for j in i + 1..m {
            let dot: S = embeddings
                .get(t, i)
                .iter()
                .zip(embeddings.get(t, j))
                .map(|(&a, &b)| a * b)
                .sum();
            let v = (dot * scale).tanh();
            out[[i, j]] = v;
            out[[j, i]] = v;
        }
    }
    out
}

/// Mean squared error between decoded and observed adjacency over all
/// off-diagonal entries of all timesteps.
pub fn reconstruction_loss<S: Scalar>(
    tape: &mut Tape<S>,
    embeddings: NodeId,
    network: &DynamicBrainNetwork<S>,
) -> Result<NodeId> {
    let (t, m) = (network.timesteps(), network.regions());
    let decoded = decode_all(tape, embeddings)?;
    let target = tape.constant(
        network
            .snapshots
            .iter()
            .flat_map(|s| s.adjacency.iter().copied())
            .collect(),
        &[t, m, m],
    )?;
    let off_diagonal = tape.constant(
        (0..m * m)
            .map(|k| if k / m == k % m { S::zero() } else { S::one() })
            .collect(),
        &[m, m],
    )?;
    let diff = tape.sub(decoded, target)?;
    let sq = tape.mul(diff, diff)?;
    let masked = tape.mul_broadcast(sq, off_diagonal)?;
    let total = tape.sum(masked)?;
    tape.scale(total, S::one() / S::count(t * m * (m - 1)))
}

#[cfg(test)]
mod tests;
