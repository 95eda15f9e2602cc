use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{contrast_batch, contrast_loss, corrupt_network, ContrastiveConfig, EstimatorParams};
use crate::connectome::DynamicBrainNetwork;
use crate::diffcore::{NodeId, ParameterStore, Sgd, Tape};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::sgtmodel::{readout, reconstruction_loss, SgtModel};
use crate::synthcohort::GroupLabel;

pub const TRACE_FILE: &str = "pretrain_trace.csv";

/// Mean losses over one pass through the training subjects, measured before each update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub infonce: f64,
    pub reconstruction: f64,
    pub total: f64,
}

/// Contrast term for one network whose true embeddings `[T, M, d]` are already on the tape.
#[allow(clippy::too_many_arguments)]
pub fn subject_contrast<S: Scalar, R: Rng>(
    tape: &mut Tape<S>,
    store: &ParameterStore<S>,
    model: &SgtModel,
    estimator: &EstimatorParams,
    network: &DynamicBrainNetwork<S>,
    embeddings: NodeId,
    adjacency: NodeId,
    config: &ContrastiveConfig,
    rng: &mut R,
) -> Result<NodeId> {
    let (t, m, d) = (network.timesteps(), network.regions(), model.config.embed_dim);
    let corrupted = corrupt_network(network, rng.random());
    let features = model.features(tape, &corrupted)?;
    let negative = model.encode_from(tape, store, features, adjacency, t, m)?;
    let anchor = readout(tape, embeddings)?;
    let locals = tape.reshape(embeddings, &[t * m, d])?;
    let corrupt_locals = tape.reshape(negative.embeddings, &[t * m, d])?;
    let batch = contrast_batch(tape, anchor, locals, corrupt_locals, config, rng)?;
    let weight = tape.param(store, estimator.weight)?;
    contrast_loss(tape, &batch, weight, config.objective)
}

/// Trains encoder and estimator on control networks by minimizing
/// `contrast + α·reconstruction`, one update per subject.
pub fn pretrain_encoder<S: Scalar>(
    networks: &[DynamicBrainNetwork<S>],
    store: &mut ParameterStore<S>,
    model: &SgtModel,
    estimator: &EstimatorParams,
    config: &ContrastiveConfig,
    seed: u64,
) -> Result<Vec<PretrainEpoch>> {
    config.validate()?;
    if networks.is_empty() {
        return Err(Error::Validation(
            "pretraining needs at least one saline network".into(),
        ));
    }
    if let Some(n) = networks.iter().find(|n| n.group != GroupLabel::Saline) {
        return Err(Error::Validation(format!(
            "pretraining accepts saline networks only; `{}` is {}",
            n.subject_id, n.group
        )));
    }
    let alpha = S::lit(config.alpha);
    let mut sgd = Sgd::new(config.optimizer);
    let mut order: Vec<usize> = (0..networks.len()).collect();
    let mut trace = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let (mut contrast_sum, mut recon_sum) = (0.0, 0.0);
        for &idx in &order {
            let network = &networks[idx];
            let mut tape = Tape::new();
            let features = model.features(&mut tape, network)?;
            let adjacency = model.adjacency_bias(&mut tape, network)?;
            let enc = model.encode_from(
                &mut tape,
                store,
                features,
                adjacency,
                network.timesteps(),
                network.regions(),
            )?;
            let contrast = subject_contrast(
                &mut tape,
                store,
                model,
                estimator,
                network,
                enc.embeddings,
                adjacency,
                config,
                &mut rng,
            )?;
            let recon = reconstruction_loss(&mut tape, enc.embeddings, network)?;
            let weighted = tape.scale(recon, alpha)?;
            let total = tape.add(contrast, weighted)?;
            contrast_sum += tape.scalar(contrast).as_f64();
            recon_sum += tape.scalar(recon).as_f64();
            let grads = tape.backward(total)?;
            store.set_grads(&grads);
            sgd.step(store, |_| 1.0);
        }
        let n = networks.len() as f64;
        let (infonce, reconstruction) = (contrast_sum / n, recon_sum / n);
        trace.push(PretrainEpoch {
            epoch: epoch + 1,
            infonce,
            reconstruction,
            total: infonce + config.alpha * reconstruction,
        });
    }
    Ok(trace)
}

pub fn write_trace_csv(trace: &[PretrainEpoch], path: &Path) -> Result<()> {
    let mut text = String::from("epoch,infonce,reconstruction,total\n");
    for e in trace {
        writeln!(text, "{},{},{},{}", e.epoch, e.infonce, e.reconstruction, e.total).expect("string write");
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
