use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Init, ParameterStore, Sgd, SgdConfig, Tape};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    /// Share of each class placed in the training split.
    pub train_fraction: f64,
    pub iterations: usize,
    pub optimizer: SgdConfig,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            train_fraction: 0.7,
            iterations: 500,
            optimizer: SgdConfig {
                learning_rate: 0.5,
                momentum: 0.9,
                clip_norm: 5.0,
            },
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Validation("evaluation.train_fraction must lie in (0, 1)".into()));
        }
        if self.iterations == 0 {
            return Err(Error::Validation("evaluation.iterations must be ≥ 1".into()));
        }
        self.optimizer.validate()
    }
}

/// Sample indices of a stratified split.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Per class, a seeded shuffle puts `round(fraction · n_c)` samples in training
/// (at least one, and at least one left for testing when `n_c ≥ 2`).
pub fn stratified_split(labels: &[usize], classes: usize, fraction: f64, seed: u64) -> Split {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for c in 0..classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&k| labels[k] == c).collect();
        members.shuffle(&mut rng);
        let n = members.len();
        let k = match n {
            0 | 1 => n,
            _ => ((fraction * n as f64).round() as usize).clamp(1, n - 1),
        };
        train.extend_from_slice(&members[..k]);
        test.extend_from_slice(&members[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Split { train, test }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub classes: Vec<String>,
    pub accuracy: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub test_size: usize,
}

impl MetricsReport {
    pub fn from_predictions(classes: &[String], truth: &[usize], predicted: &[usize]) -> Self {
        let c = classes.len();
        let mut confusion = vec![vec![0; c]; c];
        for (&t, &p) in truth.iter().zip(predicted) {
            confusion[t][p] += 1;
        }
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision: Vec<f64> = (0..c)
            .map(|k| ratio(confusion[k][k], (0..c).map(|t| confusion[t][k]).sum()))
            .collect();
        let recall: Vec<f64> = (0..c)
            .map(|k| ratio(confusion[k][k], confusion[k].iter().sum()))
            .collect();
        let correct = (0..c).map(|k| confusion[k][k]).sum();
        Self {
            classes: classes.to_vec(),
            accuracy: ratio(correct, truth.len()),
            macro_precision: precision.iter().sum::<f64>() / c as f64,
            macro_recall: recall.iter().sum::<f64>() / c as f64,
            precision,
            recall,
            confusion,
            test_size: truth.len(),
        }
    }
}

/// Fits a multinomial logistic model on the training split (features
/// standardized with training statistics, full-batch gradient descent) and
/// reports test-split metrics.
pub fn classify_groups(
    features: &[Vec<f64>],
    labels: &[usize],
    classes: &[String],
    split: &Split,
    config: &ClassifierConfig,
) -> Result<MetricsReport> {
    config.validate()?;
    let c = classes.len();
    for (k, name) in classes.iter().enumerate() {
        if !split.train.iter().any(|&s| labels[s] == k) {
            return Err(Error::Split(format!(
                "class `{name}` is absent from the training split"
            )));
        }
    }
    if split.test.is_empty() {
        return Err(Error::Split("test split is empty".into()));
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return Err(Error::Validation("feature vectors differ in length".into()));
    }
    let n = split.train.len() as f64;
    let mean: Vec<f64> = (0..d)
        .map(|k| split.train.iter().map(|&s| features[s][k]).sum::<f64>() / n)
        .collect();
    let scale: Vec<f64> = (0..d)
        .map(|k| {
            let var = split
                .train
                .iter()
                .map(|&s| (features[s][k] - mean[k]).powi(2))
                .sum::<f64>()
                / n;
            if var > 0.0 {
                1.0 / var.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let standardize = |rows: &[usize]| -> Vec<f64> {
        rows.iter()
            .flat_map(|&s| {
                (0..d)
                    .map(|k| (features[s][k] - mean[k]) * scale[k])
                    .collect::<Vec<_>>()
            })
            .collect()
    };
    let train_x = standardize(&split.train);
    let onehot: Vec<f64> = split
        .train
        .iter()
        .flat_map(|&s| (0..c).map(move |k| if labels[s] == k { 1.0 } else { 0.0 }))
        .collect();

    let mut store = ParameterStore::<f64>::new(0);
    let w = store.add("classifier.weight", &[d, c], Init::Constant { value: 0.0 })?;
    let b = store.add("classifier.bias", &[c], Init::Constant { value: 0.0 })?;
    let mut sgd = Sgd::new(config.optimizer);
    let rows = split.train.len();
    for _ in 0..config.iterations {
        let mut tape = Tape::new();
        let x = tape.constant(train_x.clone(), &[rows, d])?;
        let y = tape.constant(onehot.clone(), &[rows, c])?;
        let wn = tape.param(&store, w)?;
        let bn = tape.param(&store, b)?;
        let logits = tape.matmul(x, wn)?;
        let logits = tape.add_broadcast(logits, bn)?;
        let lse = tape.log_sum_exp(logits)?;
        let lse = tape.mean(lse)?;
        let picked = tape.mul(logits, y)?;
        let picked = tape.sum(picked)?;
        let picked = tape.scale(picked, 1.0 / rows as f64)?;
        let loss = tape.sub(lse, picked)?;
        let grads = tape.backward(loss)?;
        store.set_grads(&grads);
        sgd.step(&mut store, |_| 1.0);
    }

    let weight = &store.parameter(w).value;
    let bias = &store.parameter(b).value;
    let test_x = standardize(&split.test);
    let predicted: Vec<usize> = test_x
        .chunks(d)
        .map(|x| {
            (0..c)
                .map(|k| bias[k] + (0..d).map(|f| x[f] * weight[f * c + k]).sum::<f64>())
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |best, (k, v)| if v > best.1 { (k, v) } else { best },
                )
                .0
        })
        .collect();
    let truth: Vec<usize> = split.test.iter().map(|&s| labels[s]).collect();
    Ok(MetricsReport::from_predictions(classes, &truth, &predicted))
}
