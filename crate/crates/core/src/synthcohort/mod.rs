//! Labeled multi-group ROI time-series cohorts with planted ground-truth circuits.

mod generate;
mod io;
mod voxels;

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use generate::{base_correlation, generate_cohort, GeneratorConfig};
pub use io::{read_cohort, write_cohort, COHORT_FORMAT, MANIFEST_FILE};
pub use voxels::aggregate_voxels;

/// Minimum scan count accepted for a region time series.
pub const MIN_SCANS: usize = 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupLabel {
    Saline,
    LowNicotine,
    HighNicotine,
}

impl GroupLabel {
    pub const ALL: [GroupLabel; 3] = [GroupLabel::Saline, GroupLabel::LowNicotine, GroupLabel::HighNicotine];

    pub fn as_str(self) -> &'static str {
        match self {
            GroupLabel::Saline => "saline",
            GroupLabel::LowNicotine => "low_nicotine",
            GroupLabel::HighNicotine => "high_nicotine",
        }
    }

    /// Class index used by the classifier (saline = 0, low = 1, high = 2).
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_nicotine(self) -> bool {
        self != GroupLabel::Saline
    }

    fn id_prefix(self) -> char {
        match self {
            GroupLabel::Saline => 'S',
            GroupLabel::LowNicotine => 'L',
            GroupLabel::HighNicotine => 'H',
        }
    }
}

impl fmt::Display for GroupLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GroupLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        GroupLabel::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| format!("unknown group label `{s}`"))
    }
}

/// Region-level signal of one subject: `values` is regions × scans.
#[derive(Clone, Debug, PartialEq)]
pub struct RoiTimeSeries {
    pub subject_id: String,
    pub region_labels: Vec<String>,
    pub values: Array2<f64>,
}

impl RoiTimeSeries {
    pub fn new(subject_id: impl Into<String>, region_labels: Vec<String>, values: Array2<f64>) -> Result<Self> {
        let subject_id = subject_id.into();
        let (m, s) = values.dim();
        if m < 2 {
            return Err(Error::Validation(format!(
                "{subject_id}: need at least 2 regions, got {m}"
            )));
        }
        if s < MIN_SCANS {
            return Err(Error::Validation(format!(
                "{subject_id}: need at least {MIN_SCANS} scans, got {s}"
            )));
        }
        if region_labels.len() != m {
            return Err(Error::Validation(format!(
                "{subject_id}: {} region labels for {m} regions",
                region_labels.len()
            )));
        }
        check_unique_labels(&region_labels)?;
        if let Some(((r, c), _)) = values.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "{subject_id}: non-finite value at region {r}, scan {c}"
            )));
        }
        Ok(Self {
            subject_id,
            region_labels,
            values,
        })
    }

    pub fn regions(&self) -> usize {
        self.values.nrows()
    }

    pub fn scans(&self) -> usize {
        self.values.ncols()
    }
}

pub(crate) fn check_unique_labels(labels: &[String]) -> Result<()> {
    let mut seen = HashSet::new();
    for l in labels {
        if !seen.insert(l.as_str()) {
            return Err(Error::Validation(format!("duplicate region label `{l}`")));
        }
    }
    Ok(())
}

/// Ground-truth perturbation applied to one subject.
///
/// `edges[k]` is shifted by `signs[k] × effect_size` from `onset_scan` onward.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedCircuit {
    pub edges: Vec<(usize, usize)>,
    pub signs: Vec<i8>,
    pub effect_size: f64,
    pub onset_scan: usize,
}

impl PlantedCircuit {
    pub fn empty(onset_scan: usize) -> Self {
        Self {
            edges: Vec::new(),
            signs: Vec::new(),
            effect_size: 0.0,
            onset_scan,
        }
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        let key = (i.min(j), i.max(j));
        self.edges.contains(&key)
    }

    pub fn validate(&self, regions: usize, scans: usize, group: GroupLabel) -> Result<()> {
        if self.edges.len() != self.signs.len() {
            return Err(Error::Validation(
                "planted circuit: edges and signs differ in length".into(),
            ));
        }
        if self.onset_scan >= scans {
            return Err(Error::Validation(format!(
                "planted circuit: onset scan {} outside [0, {scans})",
                self.onset_scan
            )));
        }
        for &(i, j) in &self.edges {
            if i >= j || j >= regions {
                return Err(Error::Validation(format!(
                    "planted circuit: edge ({i},{j}) must satisfy i < j < {regions}"
                )));
            }
        }
        if self.signs.iter().any(|&s| s != 1 && s != -1) {
            return Err(Error::Validation("planted circuit: signs must be ±1".into()));
        }
        match group {
            GroupLabel::Saline if !self.edges.is_empty() => Err(Error::Validation(
                "planted circuit: saline subjects carry no edges".into(),
            )),
            g if g.is_nicotine() && self.effect_size <= 0.0 => Err(Error::Validation(
                "planted circuit: nicotine subjects need a positive effect size".into(),
            )),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Subject {
    pub series: RoiTimeSeries,
    pub group: GroupLabel,
    pub circuit: PlantedCircuit,
}

/// Immutable generated (or loaded) cohort.
#[derive(Clone, Debug, PartialEq)]
pub struct Cohort {
    pub subjects: Vec<Subject>,
    pub generator_config: GeneratorConfig,
    pub seed: u64,
}

impl Cohort {
    pub fn region_labels(&self) -> &[String] {
        &self.subjects[0].series.region_labels
    }

    pub fn subjects_in(&self, group: GroupLabel) -> impl Iterator<Item = &Subject> {
        self.subjects.iter().filter(move |s| s.group == group)
    }

    /// Planted circuit shared by a group (the first subject's, which all members carry).
    pub fn planted(&self, group: GroupLabel) -> Option<&PlantedCircuit> {
        self.subjects_in(group).next().map(|s| &s.circuit)
    }

    pub(crate) fn validate(&self) -> Result<()> {
        let first = self
            .subjects
            .first()
            .ok_or_else(|| Error::Validation("cohort has no subjects".into()))?;
        let mut ids = HashSet::new();
        for s in &self.subjects {
            if s.series.region_labels != first.series.region_labels
                || s.series.values.dim() != first.series.values.dim()
            {
                return Err(Error::Validation(format!(
                    "subject {} does not share region labels and shape with {}",
                    s.series.subject_id, first.series.subject_id
                )));
            }
            if !ids.insert(s.series.subject_id.as_str()) {
                return Err(Error::Validation(format!(
                    "duplicate subject id {}",
                    s.series.subject_id
                )));
            }
            s.circuit.validate(s.series.regions(), s.series.scans(), s.group)?;
        }
        Ok(())
    }
}
