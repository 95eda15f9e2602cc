//! Group classification on global representations, the brute-force oracle
//! ranking, planted-circuit recovery and 2-D projection of embeddings.

mod classify;
mod project;

use serde::{Deserialize, Serialize};

pub use classify::{classify_groups, stratified_split, ClassifierConfig, MetricsReport, Split};
pub use project::{project_2d, write_embedding_csvs};

use crate::connectome::{build_dynamic_network, DynamicBrainNetwork, WindowSpec};
use crate::detector::{CircuitSet, EdgeScoreMap};
use crate::error::{Error, Result};
use crate::synthcohort::{Cohort, GroupLabel, PlantedCircuit};

/// `|mean ω over probe-group subjects − mean ω over saline subjects|` per cell.
pub fn oracle_scores(networks: &[DynamicBrainNetwork<f64>], probe_groups: &[GroupLabel]) -> Result<EdgeScoreMap<f64>> {
    let mean_of = |select: &dyn Fn(GroupLabel) -> bool, what: &str| -> Result<Vec<f64>> {
        let chosen: Vec<&DynamicBrainNetwork<f64>> = networks.iter().filter(|n| select(n.group)).collect();
        let first = chosen
            .first()
            .ok_or_else(|| Error::Validation(format!("oracle ranking needs {what} subjects")))?;
        let m = first.regions();
        let mut acc = vec![0.0; first.cell_count()];
        for net in &chosen {
            if net.regions() != m || net.timesteps() != first.timesteps() {
                return Err(Error::Validation(format!(
                    "network `{}` differs in size",
                    net.subject_id
                )));
            }
            let mut k = 0;
            for snap in &net.snapshots {
                for i in 0..m {
                    for j in i + 1..m {
                        acc[k] += snap.adjacency[[i, j]];
                        k += 1;
                    }
                }
            }
        }
        let n = chosen.len() as f64;
        Ok(acc.into_iter().map(|v| v / n).collect())
    };
    let label = probe_groups.iter().map(|g| g.as_str()).collect::<Vec<_>>().join("/");
    let probe = mean_of(&|g| probe_groups.contains(&g), &label)?;
    let saline = mean_of(&|g| g == GroupLabel::Saline, "saline")?;
    let first = &networks[0];
    Ok(EdgeScoreMap {
        timesteps: first.timesteps(),
        regions: first.regions(),
        scores: probe.iter().zip(&saline).map(|(a, b)| (a - b).abs()).collect(),
    })
}

/// Builds every subject's network under `spec` and ranks cells by the oracle score.
pub fn oracle_rank(cohort: &Cohort, spec: &WindowSpec, probe_groups: &[GroupLabel]) -> Result<EdgeScoreMap<f64>> {
    let networks = cohort
        .subjects
        .iter()
        .map(|s| build_dynamic_network(&s.series, s.group, spec))
        .collect::<Result<Vec<_>>>()?;
    oracle_scores(&networks, probe_groups)
}

/// Detected cells scored against planted edges at post-onset timesteps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellRecovery {
    pub true_positives: usize,
    pub detected: usize,
    /// Planted edges × post-onset timesteps.
    pub relevant: usize,
    pub recall: f64,
    pub precision: f64,
}

pub fn recovery_metrics(detected: &CircuitSet, planted: &PlantedCircuit, post_onset: &[usize]) -> CellRecovery {
    let true_positives = detected
        .cells
        .iter()
        .filter(|c| planted.contains(c.i, c.j) && post_onset.contains(&c.timestep))
        .count();
    let relevant = planted.edges.len() * post_onset.len();
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    CellRecovery {
        true_positives,
        detected: detected.cells.len(),
        relevant,
        recall: ratio(true_positives, relevant),
        precision: ratio(true_positives, detected.cells.len()),
    }
}

/// Detector recovery next to the oracle's at the same selection fraction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub pair: String,
    pub fraction: f64,
    pub detector: CellRecovery,
    pub oracle: CellRecovery,
    /// Detector recall over oracle recall (0 when the oracle recalls nothing).
    pub ratio: f64,
}

impl RecoveryReport {
    pub fn new(pair: impl Into<String>, fraction: f64, detector: CellRecovery, oracle: CellRecovery) -> Self {
        let ratio = if oracle.recall > 0.0 {
            detector.recall / oracle.recall
        } else {
            0.0
        };
        Self {
            pair: pair.into(),
            fraction,
            detector,
            oracle,
            ratio,
        }
    }
}
