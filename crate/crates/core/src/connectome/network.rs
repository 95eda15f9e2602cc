use ndarray::Array2;

use super::pearson::pearson_matrix;
use super::window::{split_windows, WindowSpec};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::synthcohort::{GroupLabel, RoiTimeSeries};

/// Static functional network of one window.
#[derive(Clone, Debug, PartialEq)]
pub struct BrainGraphSnapshot<S> {
    /// 1-based timestep.
    pub timestep: usize,
    /// Symmetric `M × M` correlations with unit diagonal.
    pub adjacency: Array2<S>,
    /// The window's raw series, `M × L`.
    pub node_features: Array2<S>,
    pub zero_variance: Vec<usize>,
}

impl<S: Scalar> BrainGraphSnapshot<S> {
    /// Undirected weighted edges `(i, j, ω)` with `i < j`; every off-diagonal pair is an edge.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, S)> + '_ {
        let m = self.adjacency.nrows();
        (0..m).flat_map(move |i| (i + 1..m).map(move |j| (i, j, self.adjacency[[i, j]])))
    }
}

/// Ordered snapshots of one subject's scan.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicBrainNetwork<S> {
    pub subject_id: String,
    pub group: GroupLabel,
    pub region_labels: Vec<String>,
    pub snapshots: Vec<BrainGraphSnapshot<S>>,
}

impl<S: Scalar> DynamicBrainNetwork<S> {
    pub fn regions(&self) -> usize {
        self.region_labels.len()
    }

    pub fn timesteps(&self) -> usize {
        self.snapshots.len()
    }

    pub fn window_length(&self) -> usize {
        self.snapshots[0].node_features.ncols()
    }

    /// Number of `(t, i, j)` cells with `i < j`.
    pub fn cell_count(&self) -> usize {
        let m = self.regions();
        self.timesteps() * m * (m - 1) / 2
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.regions();
        let fail = |detail: String| {
            Err(Error::Invariant {
                module: "connectome",
                invariant: "snapshot",
                detail: format!("{}: {detail}", self.subject_id),
            })
        };
        if self.snapshots.is_empty() {
            return fail("no snapshots".into());
        }
        let l = self.window_length();
        let tol = S::lit(1e-12);
        for (k, snap) in self.snapshots.iter().enumerate() {
            if snap.timestep != k + 1 {
                return fail(format!("snapshot {k} has timestep {}", snap.timestep));
            }
            if snap.adjacency.dim() != (m, m) || snap.node_features.dim() != (m, l) {
                return fail(format!("snapshot {} has inconsistent shapes", snap.timestep));
            }
            for i in 0..m {
                if snap.adjacency[[i, i]] != S::one() {
                    return fail(format!("t={} diagonal ({i},{i}) is not 1", snap.timestep));
                }
                for j in 0..m {
                    let w = snap.adjacency[[i, j]];
                    if !w.is_finite() || w.abs() > S::one() || (w - snap.adjacency[[j, i]]).abs() > tol {
                        return fail(format!("t={} entry ({i},{j}) breaks symmetry or bounds", snap.timestep));
                    }
                }
            }
        }
        Ok(())
    }

    /// Reorders regions so that new region `k` is old region `perm[k]`.
    pub fn permute_regions(&self, perm: &[usize]) -> Self {
        let m = self.regions();
        assert_eq!(perm.len(), m, "permutation length");
        Self {
            subject_id: self.subject_id.clone(),
            group: self.group,
            region_labels: perm.iter().map(|&p| self.region_labels[p].clone()).collect(),
            snapshots: self
                .snapshots
                .iter()
                .map(|s| BrainGraphSnapshot {
                    timestep: s.timestep,
                    adjacency: Array2::from_shape_fn((m, m), |(i, j)| s.adjacency[[perm[i], perm[j]]]),
                    node_features: Array2::from_shape_fn(s.node_features.dim(), |(i, c)| s.node_features[[perm[i], c]]),
                    zero_variance: {
                        let mut z: Vec<usize> = s
                            .zero_variance
                            .iter()
                            .map(|&old| perm.iter().position(|&p| p == old).expect("valid permutation"))
                            .collect();
                        z.sort_unstable();
                        z
                    },
                })
                .collect(),
        }
    }
}

/// Windows the series and correlates each window into a dense snapshot.
pub fn build_dynamic_network<S: Scalar>(
    series: &RoiTimeSeries,
    group: GroupLabel,
    spec: &WindowSpec,
) -> Result<DynamicBrainNetwork<S>> {
    let segments = split_windows(series, spec)?;
    let snapshots = segments
        .into_iter()
        .enumerate()
        .map(|(k, seg)| {
            let features = seg.mapv(S::lit);
            let pearson = pearson_matrix(features.view())?;
            Ok(BrainGraphSnapshot {
                timestep: k + 1,
                adjacency: pearson.adjacency,
                node_features: features,
                zero_variance: pearson.zero_variance,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let network = DynamicBrainNetwork {
        subject_id: series.subject_id.clone(),
        group,
        region_labels: series.region_labels.clone(),
        snapshots,
    };
    network.validate()?;
    Ok(network)
}
