//! Multi-head self-attention with residual connection and layer normalization.

use crate::diffcore::{Init, NodeId, ParamId, ParameterStore, Tape};
use crate::error::Result;
use crate::scalar::Scalar;

/// Parameters of one attention layer.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    pub output: ParamId,
    pub output_bias: ParamId,
    pub norm_gain: ParamId,
    pub norm_bias: ParamId,
    /// Weight of the additive adjacency bias (spatial layers only).
    pub adjacency_weight: Option<ParamId>,
}

impl AttentionParams {
    pub(crate) fn register<S: Scalar>(
        store: &mut ParameterStore<S>,
        prefix: &str,
        dim: usize,
        adjacency_weight: Option<f64>,
    ) -> Result<Self> {
        let w = Init::Uniform { fan_in: dim };
        let mut add =
            |name: &str, shape: &[usize], init: Init| store.get_or_add(&format!("{prefix}.{name}"), shape, init);
        Ok(Self {
            query: add("query", &[dim, dim], w)?,
            key: add("key", &[dim, dim], w)?,
            value: add("value", &[dim, dim], w)?,
            output: add("output", &[dim, dim], w)?,
            output_bias: add("output_bias", &[dim], Init::Constant { value: 0.0 })?,
            norm_gain: add("norm_gain", &[dim], Init::Constant { value: 1.0 })?,
            norm_bias: add("norm_bias", &[dim], Init::Constant { value: 0.0 })?,
            adjacency_weight: match adjacency_weight {
                Some(v) => Some(add("adjacency_weight", &[1], Init::Constant { value: v })?),
                None => None,
            },
        })
    }
}

/// Output of [`attention_layer`].
#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    /// `[batch, n, d]`.
    pub output: NodeId,
    /// Attention weights `[batch·heads, n, n]`, batch-major.
    pub weights: NodeId,
}

fn split_heads<S: Scalar>(tape: &mut Tape<S>, x: NodeId, dims: [usize; 4], transpose: bool) -> Result<NodeId> {
    let [b, n, h, dh] = dims;
    let x = tape.reshape(x, &[b, n, h, dh])?;
    if transpose {
        let x = tape.permute(x, &[0, 2, 3, 1])?;
        tape.reshape(x, &[b * h, dh, n])
    } else {
        let x = tape.permute(x, &[0, 2, 1, 3])?;
        tape.reshape(x, &[b * h, n, dh])
    }
}

/// Self-attention over the `n` items of each batch entry of `x: [batch, n, d]`.
///
/// Head logits are `QKᵀ/√(d/h)`, plus `λ·bias` when `bias` (`[batch·heads, n, n]`,
/// constant) is given and the layer has an adjacency weight. `allowed`
/// (`n × n`) masks logits out; masked weights are exactly zero.
pub fn attention_layer<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParameterStore<S>,
    params: &AttentionParams,
    x: NodeId,
    heads: usize,
    bias: Option<NodeId>,
    allowed: Option<&[bool]>,
) -> Result<AttentionOutput> {
    let shape = tape.shape(x).to_vec();
    let (b, n, d) = (shape[0], shape[1], shape[2]);
    let dh = d / heads;
    let flat = tape.reshape(x, &[b * n, d])?;

    let wq = tape.param(store, params.query)?;
    let wk = tape.param(store, params.key)?;
    let wv = tape.param(store, params.value)?;
    let q = tape.matmul(flat, wq)?;
    let k = tape.matmul(flat, wk)?;
    let v = tape.matmul(flat, wv)?;
    let q = split_heads(tape, q, [b, n, heads, dh], false)?;
    let kt = split_heads(tape, k, [b, n, heads, dh], true)?;
    let v = split_heads(tape, v, [b, n, heads, dh], false)?;

    let logits = tape.batch_matmul(q, kt)?;
    let mut logits = tape.scale(logits, S::one() / S::count(dh).sqrt())?;
    if let (Some(bias), Some(lambda)) = (bias, params.adjacency_weight) {
        let lambda = tape.param(store, lambda)?;
        let weighted = tape.scale_by(bias, lambda)?;
        logits = tape.add(logits, weighted)?;
    }
    let weights = match allowed {
        Some(mask) => tape.masked_softmax(logits, mask)?,
        None => tape.softmax(logits)?,
    };

    let ctx = tape.batch_matmul(weights, v)?;
    let ctx = tape.reshape(ctx, &[b, heads, n, dh])?;
    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = tape.reshape(ctx, &[b * n, d])?;
    let wo = tape.param(store, params.output)?;
    let bo = tape.param(store, params.output_bias)?;
    let projected = tape.matmul(ctx, wo)?;
    let projected = tape.add_broadcast(projected, bo)?;

    let residual = tape.add(flat, projected)?;
    let normed = tape.layer_norm(residual)?;
    let gain = tape.param(store, params.norm_gain)?;
    let shift = tape.param(store, params.norm_bias)?;
    let normed = tape.mul_broadcast(normed, gain)?;
    let normed = tape.add_broadcast(normed, shift)?;
    let output = tape.reshape(normed, &[b, n, d])?;
    Ok(AttentionOutput { output, weights })
}
