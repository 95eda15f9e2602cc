//! Gradient checks over every tape primitive and every trainable layer
//! family, at toy sizes (d = 8, M = 6, T = 3) in 64-bit precision.

use std::sync::Arc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::connectome::{build_dynamic_network, DynamicBrainNetwork, WindowSpec};
use crate::contrastive::{contrast_loss, ContrastBatch, Objective};
use crate::detector::{ranking_candidates, ranking_loss, score_cells, PairedSample, ScorerParams};
use crate::diffcore::{grad_check, Init, NodeId, ParamId, ParameterStore, Tape};
use crate::error::Result;
use crate::sgtmodel::{attention_layer, reconstruction_loss, temporal_mask, AttentionParams, SgtConfig, SgtModel};
use crate::synthcohort::{GroupLabel, RoiTimeSeries};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

const DIM: usize = 8;
const HEADS: usize = 2;
const REGIONS: usize = 6;
const TIMESTEPS: usize = 3;
const WINDOW: usize = 10;

#[derive(Clone, Debug, Serialize)]
pub struct FamilyCheck {
    pub family: String,
    pub max_relative_error: f64,
    pub coordinates: usize,
    pub worst: Option<(String, usize)>,
}

impl FamilyCheck {
    pub fn passed(&self) -> bool {
        self.max_relative_error < TOLERANCE
    }
}

fn random_values(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// A parameter filled with values drawn from `[lo, hi)`.
fn leaf(
    store: &mut ParameterStore<f64>,
    rng: &mut ChaCha8Rng,
    name: &str,
    shape: &[usize],
    lo: f64,
    hi: f64,
) -> Result<ParamId> {
    let id = store.add(name, shape, Init::Constant { value: 0.0 })?;
    let n = shape.iter().product();
    store.parameter_mut(id).value = random_values(rng, n, lo, hi);
    Ok(id)
}

/// Away from zero in both directions, so `relu` never sits on its kink.
fn signed_leaf(store: &mut ParameterStore<f64>, rng: &mut ChaCha8Rng, name: &str, shape: &[usize]) -> Result<ParamId> {
    let id = leaf(store, rng, name, shape, 0.1, 1.0)?;
    for (k, v) in store.parameter_mut(id).value.iter_mut().enumerate() {
        if k % 3 == 1 {
            *v = -*v;
        }
    }
    Ok(id)
}

/// `Σ w ⊙ y` with fixed random `w`, so every output coordinate matters.
fn project(tape: &mut Tape<f64>, y: NodeId, seed: u64) -> Result<NodeId> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = tape.value(y).len();
    let w = tape.constant(random_values(&mut rng, n, -1.0, 1.0), tape.shape(y).to_vec().as_slice())?;
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

type Body = Box<dyn Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>>;

fn primitive(name: &str, shapes: &[&[usize]], positive: bool, body: Body) -> Result<FamilyCheck> {
    let mut store = ParameterStore::new(0);
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64 * 7919);
    let ids = shapes
        .iter()
        .enumerate()
        .map(|(k, shape)| {
            let label = format!("{name}.x{k}");
            if positive {
                leaf(&mut store, &mut rng, &label, shape, 0.5, 2.0)
            } else {
                signed_leaf(&mut store, &mut rng, &label, shape)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let report = grad_check(
        |tape, store| {
            let xs = ids
                .iter()
                .map(|&id| tape.param(store, id))
                .collect::<Result<Vec<_>>>()?;
            let y = body(tape, &xs)?;
            project(tape, y, 17)
        },
        &mut store,
        STEP,
    )?;
    Ok(FamilyCheck {
        family: format!("primitive.{name}"),
        max_relative_error: report.max_relative_error,
        coordinates: report.coordinates,
        worst: report.worst,
    })
}

fn primitives() -> Result<Vec<FamilyCheck>> {
    let mask: Vec<bool> = (0..9).map(|k| k % 4 != 1).collect();
    let cases: Vec<(&str, Vec<&[usize]>, bool, Body)> = vec![
        (
            "matmul",
            vec![&[3, 4], &[4, 2]],
            false,
            Box::new(|t, x| t.matmul(x[0], x[1])),
        ),
        (
            "batch_matmul",
            vec![&[2, 3, 4], &[2, 4, 2]],
            false,
            Box::new(|t, x| t.batch_matmul(x[0], x[1])),
        ),
        ("add", vec![&[3, 4], &[3, 4]], false, Box::new(|t, x| t.add(x[0], x[1]))),
        ("sub", vec![&[3, 4], &[3, 4]], false, Box::new(|t, x| t.sub(x[0], x[1]))),
        ("mul", vec![&[3, 4], &[3, 4]], false, Box::new(|t, x| t.mul(x[0], x[1]))),
        (
            "add_broadcast",
            vec![&[3, 4], &[4]],
            false,
            Box::new(|t, x| t.add_broadcast(x[0], x[1])),
        ),
        (
            "mul_broadcast",
            vec![&[3, 4], &[4]],
            false,
            Box::new(|t, x| t.mul_broadcast(x[0], x[1])),
        ),
        ("scale", vec![&[3, 4]], false, Box::new(|t, x| t.scale(x[0], -1.7))),
        (
            "scale_by",
            vec![&[3, 4], &[1]],
            false,
            Box::new(|t, x| t.scale_by(x[0], x[1])),
        ),
        ("relu", vec![&[3, 4]], false, Box::new(|t, x| t.relu(x[0]))),
        ("sigmoid", vec![&[3, 4]], false, Box::new(|t, x| t.sigmoid(x[0]))),
        ("tanh", vec![&[3, 4]], false, Box::new(|t, x| t.tanh(x[0]))),
        ("exp", vec![&[3, 4]], false, Box::new(|t, x| t.exp(x[0]))),
        ("log", vec![&[3, 4]], true, Box::new(|t, x| t.log(x[0]))),
        ("softmax", vec![&[2, 3, 3]], false, Box::new(|t, x| t.softmax(x[0]))),
        (
            "masked_softmax",
            vec![&[2, 3, 3]],
            false,
            Box::new(move |t, x| t.masked_softmax(x[0], &mask)),
        ),
        ("layer_norm", vec![&[3, 5]], false, Box::new(|t, x| t.layer_norm(x[0]))),
        (
            "log_sum_exp",
            vec![&[3, 5]],
            false,
            Box::new(|t, x| t.log_sum_exp(x[0])),
        ),
        (
            "concat",
            vec![&[2, 3], &[2, 2]],
            false,
            Box::new(|t, x| t.concat(&[x[0], x[1]], 1)),
        ),
        (
            "gather_rows",
            vec![&[4, 3]],
            false,
            Box::new(|t, x| t.gather_rows(x[0], Arc::from(vec![2, 0, 2, 3]))),
        ),
        (
            "sum_axis",
            vec![&[2, 3, 4]],
            false,
            Box::new(|t, x| t.sum_axis(x[0], 1)),
        ),
        (
            "mean_axis",
            vec![&[2, 3, 4]],
            false,
            Box::new(|t, x| t.mean_axis(x[0], 0)),
        ),
        ("sum", vec![&[3, 4]], false, Box::new(|t, x| t.sum(x[0]))),
        ("mean", vec![&[3, 4]], false, Box::new(|t, x| t.mean(x[0]))),
        (
            "reshape",
            vec![&[3, 4]],
            false,
            Box::new(|t, x| t.reshape(x[0], &[2, 6])),
        ),
        (
            "permute",
            vec![&[2, 3, 4]],
            false,
            Box::new(|t, x| t.permute(x[0], &[2, 0, 1])),
        ),
        ("transpose", vec![&[3, 4]], false, Box::new(|t, x| t.transpose(x[0]))),
    ];
    cases
        .into_iter()
        .map(|(name, shapes, positive, body)| primitive(name, &shapes, positive, body))
        .collect()
}

fn toy_network(seed: u64, group: GroupLabel) -> Result<DynamicBrainNetwork<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scans = (TIMESTEPS * WINDOW).max(crate::synthcohort::MIN_SCANS);
    let values = Array2::from_shape_fn((REGIONS, scans), |_| rng.random::<f64>() - 0.5);
    let labels = (0..REGIONS).map(|r| format!("R{r}")).collect();
    let series = RoiTimeSeries::new(format!("G{seed}"), labels, values)?;
    let spec = WindowSpec {
        window_count: TIMESTEPS,
        window_length: WINDOW,
        stride: None,
    };
    build_dynamic_network(&series, group, &spec)
}

fn toy_config() -> SgtConfig {
    SgtConfig {
        embed_dim: DIM,
        heads: HEADS,
        layer_pairs: 1,
        ..SgtConfig::default()
    }
}

fn family(name: &str, report: crate::diffcore::GradCheckReport) -> FamilyCheck {
    FamilyCheck {
        family: name.into(),
        max_relative_error: report.max_relative_error,
        coordinates: report.coordinates,
        worst: report.worst,
    }
}

fn spatial_layer() -> Result<FamilyCheck> {
    let mut store = ParameterStore::new(31);
    let params = AttentionParams::register(&mut store, "spatial", DIM, Some(1.0))?;
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let x = signed_leaf(&mut store, &mut rng, "x", &[TIMESTEPS, REGIONS, DIM])?;
    let bias = random_values(&mut rng, TIMESTEPS * HEADS * REGIONS * REGIONS, -1.0, 1.0);
    let report = grad_check(
        |tape, store| {
            let x = tape.param(store, x)?;
            let b = tape.constant(bias.clone(), &[TIMESTEPS * HEADS, REGIONS, REGIONS])?;
            let out = attention_layer(tape, store, &params, x, HEADS, Some(b), None)?;
            project(tape, out.output, 33)
        },
        &mut store,
        STEP,
    )?;
    Ok(family("spatial_attention", report))
}

fn temporal_layer() -> Result<FamilyCheck> {
    let mut store = ParameterStore::new(41);
    let params = AttentionParams::register(&mut store, "temporal", DIM, None)?;
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let x = signed_leaf(&mut store, &mut rng, "x", &[REGIONS, TIMESTEPS, DIM])?;
    let mask = temporal_mask(TIMESTEPS, 1);
    let report = grad_check(
        |tape, store| {
            let x = tape.param(store, x)?;
            let out = attention_layer(tape, store, &params, x, HEADS, None, Some(&mask))?;
            project(tape, out.output, 43)
        },
        &mut store,
        STEP,
    )?;
    Ok(family("temporal_attention", report))
}

fn encoder_decoder() -> Result<FamilyCheck> {
    let net = toy_network(51, GroupLabel::Saline)?;
    let mut store = ParameterStore::new(52);
    let model = SgtModel::new(&mut store, &toy_config(), WINDOW)?;
    let report = grad_check(
        |tape, store| {
            let enc = model.encode(tape, store, &net)?;
            reconstruction_loss(tape, enc.embeddings, &net)
        },
        &mut store,
        STEP,
    )?;
    Ok(family("encoder_decoder", report))
}

fn contrast(objective: Objective) -> Result<FamilyCheck> {
    let mut store = ParameterStore::new(61);
    let mut rng = ChaCha8Rng::seed_from_u64(62);
    let x = signed_leaf(&mut store, &mut rng, "x", &[20, DIM])?;
    let w = leaf(&mut store, &mut rng, "estimator", &[DIM, DIM], -0.5, 0.5)?;
    let report = grad_check(
        |tape, store| {
            let x = tape.param(store, x)?;
            let anchor = tape.mean_axis(x, 0)?;
            let anchor = tape.sigmoid(anchor)?;
            let batch = ContrastBatch {
                anchor,
                positives: tape.gather_rows(x, (0..4).collect())?,
                negatives: tape.gather_rows(x, (4..20).collect())?,
                negatives_per_positive: 4,
            };
            let w = tape.param(store, w)?;
            contrast_loss(tape, &batch, w, objective)
        },
        &mut store,
        STEP,
    )?;
    let name = match objective {
        Objective::InfoNce => "infonce",
        Objective::InfoMax => "infomax",
    };
    Ok(family(name, report))
}

fn ranking() -> Result<FamilyCheck> {
    let reference = toy_network(71, GroupLabel::Saline)?;
    let probe = toy_network(72, GroupLabel::HighNicotine)?;
    let change = PairedSample::new(&reference, &probe)?.weight_change();
    let mut store = ParameterStore::new(73);
    let model = SgtModel::new(&mut store, &toy_config(), WINDOW)?;
    let scorer = ScorerParams::new(&mut store, DIM, 6)?;
    let candidates = ranking_candidates(&change, 0.1, &mut ChaCha8Rng::seed_from_u64(74));
    let rows = TIMESTEPS * REGIONS;
    let report = grad_check(
        |tape, store| {
            let hp = model.encode(tape, store, &probe)?;
            let hr = model.encode(tape, store, &reference)?;
            let hp = tape.reshape(hp.embeddings, &[rows, DIM])?;
            let hr = tape.reshape(hr.embeddings, &[rows, DIM])?;
            let scores = score_cells(tape, store, &scorer, hp, hr, &change, TIMESTEPS, REGIONS)?;
            ranking_loss(tape, scores, &candidates, 0.5, 0.1)
        },
        &mut store,
        STEP,
    )?;
    Ok(family("ranking", report))
}

/// Every primitive, then the spatial and temporal layers, the encoder with
/// its reconstruction loss, both contrastive objectives and the ranking loss.
pub fn gradient_suite() -> Result<Vec<FamilyCheck>> {
    let mut out = primitives()?;
    out.push(spatial_layer()?);
    out.push(temporal_layer()?);
    out.push(encoder_decoder()?);
    out.push(contrast(Objective::InfoNce)?);
    out.push(contrast(Objective::InfoMax)?);
    out.push(ranking()?);
    Ok(out)
}
