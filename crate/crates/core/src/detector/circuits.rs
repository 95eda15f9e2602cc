use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::EdgeScoreMap;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Whether the top fraction is taken over all cells or within each timestep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    Pooled,
    PerTimestep,
}

pub const TIE_BREAK: &str = "score_desc_then_tij_asc";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CircuitCell {
    /// 1-based.
    pub timestep: usize,
    pub i: usize,
    pub j: usize,
    pub score: f64,
}

/// Selected cells of one score map, best first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CircuitSet {
    pub subject: String,
    pub region_labels: Vec<String>,
    pub timesteps: usize,
    pub fraction: f64,
    pub tie_break: String,
    pub cells: Vec<CircuitCell>,
}

impl CircuitSet {
    pub fn contains(&self, timestep: usize, i: usize, j: usize) -> bool {
        let (i, j) = if i < j { (i, j) } else { (j, i) };
        self.cells.iter().any(|c| (c.timestep, c.i, c.j) == (timestep, i, j))
    }
}

fn rank(a: &CircuitCell, b: &CircuitCell) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then((a.timestep, a.i, a.j).cmp(&(b.timestep, b.i, b.j)))
}

fn take_top(mut cells: Vec<CircuitCell>, fraction: f64) -> Vec<CircuitCell> {
    let k = ((fraction * cells.len() as f64).ceil() as usize).min(cells.len());
    cells.sort_by(rank);
    cells.truncate(k);
    cells
}

/// Keeps the `ceil(p · cells)` highest-scoring cells, ties going to the smaller `(t, i, j)`.
pub fn top_percent<S: Scalar>(
    map: &EdgeScoreMap<S>,
    fraction: f64,
    selection: Selection,
    subject: &str,
    region_labels: &[String],
) -> Result<CircuitSet> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Validation(format!(
            "selection fraction must lie in (0, 1], got {fraction}"
        )));
    }
    if region_labels.len() != map.regions {
        return Err(Error::Validation(format!(
            "{} region labels for a map over {} regions",
            region_labels.len(),
            map.regions
        )));
    }
    let all: Vec<CircuitCell> = map
        .cells()
        .map(|(timestep, i, j, s)| CircuitCell {
            timestep,
            i,
            j,
            score: s.as_f64(),
        })
        .collect();
    let cells = match selection {
        Selection::Pooled => take_top(all, fraction),
        Selection::PerTimestep => {
            let per = map.cells_per_timestep();
            let mut cells: Vec<CircuitCell> = all
                .chunks(per)
                .flat_map(|chunk| take_top(chunk.to_vec(), fraction))
                .collect();
            cells.sort_by(rank);
            cells
        }
    };
    Ok(CircuitSet {
        subject: subject.to_string(),
        region_labels: region_labels.to_vec(),
        timesteps: map.timesteps,
        fraction,
        tie_break: TIE_BREAK.into(),
        cells,
    })
}

/// Score mass accumulated by each region over a collection of circuit sets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HubWeights {
    /// `(region label, cumulative weight)`, heaviest first, ties by label.
    pub regions: Vec<(String, f64)>,
    /// `(i, j, number of sets selecting the edge at any timestep)`, most frequent first.
    pub edge_frequency: Vec<(usize, usize, usize)>,
}

impl HubWeights {
    pub fn total(&self) -> f64 {
        self.regions.iter().map(|(_, w)| w).sum()
    }
}

/// Credits each selected cell's score to both endpoints.
pub fn aggregate_hubs(circuits: &[CircuitSet]) -> Result<HubWeights> {
    let first = circuits
        .first()
        .ok_or_else(|| Error::Aggregation("no circuit sets to aggregate".into()))?;
    let labels = &first.region_labels;
    let mut weights = vec![0.0; labels.len()];
    let mut frequency: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for set in circuits {
        if &set.region_labels != labels {
            return Err(Error::Aggregation(format!(
                "circuit set of `{}` uses different region labels than `{}`",
                set.subject, first.subject
            )));
        }
        let mut edges: Vec<(usize, usize)> = Vec::new();
        for c in &set.cells {
            weights[c.i] += c.score;
            weights[c.j] += c.score;
            edges.push((c.i, c.j));
        }
        edges.sort_unstable();
        edges.dedup();
        for e in edges {
            *frequency.entry(e).or_default() += 1;
        }
    }
    let mut regions: Vec<(String, f64)> = labels.iter().cloned().zip(weights).collect();
    regions.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
    let mut edge_frequency: Vec<(usize, usize, usize)> = frequency.into_iter().map(|((i, j), n)| (i, j, n)).collect();
    edge_frequency.sort_by(|a, b| b.2.cmp(&a.2).then((a.0, a.1).cmp(&(b.0, b.1))));
    Ok(HubWeights {
        regions,
        edge_frequency,
    })
}

/// Circuits before and after a split timestep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseSplit {
    /// Last timestep of the first phase.
    pub split: usize,
    pub pre: Vec<CircuitCell>,
    pub post: Vec<CircuitCell>,
    pub pre_mass: f64,
    pub post_mass: f64,
}

/// Partitions selected cells into `t ≤ split` and `t > split`; `split`
/// defaults to `T/2` and must be given explicitly when `T` is odd.
pub fn phase_split_report(circuits: &CircuitSet, split: Option<usize>) -> Result<PhaseSplit> {
    let t = circuits.timesteps;
    let split = match split {
        Some(s) if s <= t => s,
        Some(s) => return Err(Error::Validation(format!("split index {s} exceeds {t} timesteps"))),
        None if t.is_multiple_of(2) => t / 2,
        None => {
            return Err(Error::Validation(format!(
                "{t} timesteps cannot be halved; pass an explicit split index"
            )))
        }
    };
    let (pre, post): (Vec<CircuitCell>, Vec<CircuitCell>) = circuits.cells.iter().partition(|c| c.timestep <= split);
    Ok(PhaseSplit {
        split,
        // fold from +0.0: an empty float `sum` is -0.0
        pre_mass: pre.iter().fold(0.0, |m, c| m + c.score),
        post_mass: post.iter().fold(0.0, |m, c| m + c.score),
        pre,
        post,
    })
}

/// One row per cell of every map: `subject,t,region_i_label,region_j_label,score,selected`.
pub fn write_circuits_csv<S: Scalar>(path: &Path, maps: &[(EdgeScoreMap<S>, CircuitSet)]) -> Result<()> {
    let mut text = String::from("subject,t,region_i_label,region_j_label,score,selected\n");
    for (map, set) in maps {
        let labels = &set.region_labels;
        let mut selected = vec![false; map.scores.len()];
        for c in &set.cells {
            selected[map.index(c.timestep, c.i, c.j)] = true;
        }
        for (k, (t, i, j, s)) in map.cells().enumerate() {
            writeln!(
                text,
                "{},{t},{},{},{},{}",
                set.subject,
                labels[i],
                labels[j],
                s.as_f64(),
                u8::from(selected[k])
            )
            .expect("string write");
        }
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_hubs_csv(path: &Path, hubs: &HubWeights) -> Result<()> {
    let mut text = String::from("region_label,cumulative_weight,rank\n");
    for (rank, (label, w)) in hubs.regions.iter().enumerate() {
        writeln!(text, "{label},{w},{}", rank + 1).expect("string write");
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
