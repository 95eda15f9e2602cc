//! Snapshot edge lists and whole-network JSON documents.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::network::{BrainGraphSnapshot, DynamicBrainNetwork};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::synthcohort::GroupLabel;

/// `i,j,weight` rows for every edge of a snapshot.
pub fn snapshot_edge_csv<S: Scalar>(snapshot: &BrainGraphSnapshot<S>) -> String {
    let mut out = String::from("i,j,weight\n");
    for (i, j, w) in snapshot.edges() {
        writeln!(out, "{i},{j},{}", w.as_f64()).expect("string write");
    }
    out
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkDocument {
    pub subject_id: String,
    pub group: GroupLabel,
    pub region_labels: Vec<String>,
    pub snapshots: Vec<SnapshotDocument>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnapshotDocument {
    pub timestep: usize,
    pub adjacency: Vec<Vec<f64>>,
    pub node_features: Vec<Vec<f64>>,
    pub zero_variance: Vec<usize>,
}

fn rows<S: Scalar>(a: &Array2<S>) -> Vec<Vec<f64>> {
    a.rows()
        .into_iter()
        .map(|r| r.iter().map(|v| v.as_f64()).collect())
        .collect()
}

fn matrix<S: Scalar>(rows: &[Vec<f64>], what: &str) -> Result<Array2<S>> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != m) || n == 0 || m == 0 {
        return Err(Error::parse(what, "ragged or empty matrix"));
    }
    Ok(Array2::from_shape_fn((n, m), |(i, j)| S::lit(rows[i][j])))
}

impl NetworkDocument {
    pub fn from_network<S: Scalar>(network: &DynamicBrainNetwork<S>) -> Self {
        Self {
            subject_id: network.subject_id.clone(),
            group: network.group,
            region_labels: network.region_labels.clone(),
            snapshots: network
                .snapshots
                .iter()
                .map(|s| SnapshotDocument {
                    timestep: s.timestep,
                    adjacency: rows(&s.adjacency),
                    node_features: rows(&s.node_features),
                    zero_variance: s.zero_variance.clone(),
                })
                .collect(),
        }
    }

    pub fn into_network<S: Scalar>(self) -> Result<DynamicBrainNetwork<S>> {
        let snapshots = self
            .snapshots
            .into_iter()
            .map(|s| {
                Ok(BrainGraphSnapshot {
                    timestep: s.timestep,
                    adjacency: matrix(&s.adjacency, "adjacency")?,
                    node_features: matrix(&s.node_features, "node_features")?,
                    zero_variance: s.zero_variance,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let network = DynamicBrainNetwork {
            subject_id: self.subject_id,
            group: self.group,
            region_labels: self.region_labels,
            snapshots,
        };
        network.validate()?;
        Ok(network)
    }
}

pub fn write_network_json<S: Scalar>(network: &DynamicBrainNetwork<S>, path: &Path) -> Result<()> {
    let doc = NetworkDocument::from_network(network);
    fs::write(path, serde_json::to_string(&doc)?).map_err(|e| Error::io(path, e))
}

pub fn read_network_json<S: Scalar>(path: &Path) -> Result<DynamicBrainNetwork<S>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc: NetworkDocument =
        serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
    doc.into_network()
}
