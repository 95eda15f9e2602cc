//! Cohort directory: `manifest.json` plus one `<subject>.csv` per subject
//! (rows = regions, first column = region label, header = `region,0,1,…`).
//! Values are written in Rust's shortest round-trip decimal form, so reading
//! a written cohort reproduces every `f64` bit-exactly.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{Cohort, GeneratorConfig, GroupLabel, PlantedCircuit, RoiTimeSeries, Subject, MIN_SCANS};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const COHORT_FORMAT: &str = "circuitscope-cohort/1";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    seed: u64,
    config: GeneratorConfig,
    region_labels: Vec<String>,
    scans: usize,
    subjects: Vec<SubjectEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SubjectEntry {
    id: String,
    group: String,
    file: String,
    circuit: PlantedCircuit,
}

pub fn write_cohort(cohort: &Cohort, dir: &Path) -> Result<()> {
    cohort.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let labels = cohort.region_labels().to_vec();
    let scans = cohort.subjects[0].series.scans();
    let manifest = Manifest {
        format: COHORT_FORMAT.into(),
        seed: cohort.seed,
        config: cohort.generator_config.clone(),
        region_labels: labels.clone(),
        scans,
        subjects: cohort
            .subjects
            .iter()
            .map(|s| SubjectEntry {
                id: s.series.subject_id.clone(),
                group: s.group.as_str().into(),
                file: format!("{}.csv", s.series.subject_id),
                circuit: s.circuit.clone(),
            })
            .collect(),
    };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;

    for (subject, entry) in cohort.subjects.iter().zip(&manifest.subjects) {
        let mut text = String::from("region");
        for s in 0..scans {
            write!(text, ",{s}").expect("string write");
        }
        text.push('\n');
        for (label, row) in labels.iter().zip(subject.series.values.rows()) {
            text.push_str(label);
            for v in row {
                write!(text, ",{v}").expect("string write");
            }
            text.push('\n');
        }
        let path = dir.join(&entry.file);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

pub fn read_cohort(dir: &Path) -> Result<Cohort> {
    let manifest_path = dir.join(MANIFEST_FILE);
    if !manifest_path.exists() {
        return Err(Error::MissingArtifact(manifest_path));
    }
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::parse(MANIFEST_FILE, e.to_string()))?;
    if manifest.format != COHORT_FORMAT {
        return Err(Error::parse(
            format!("{MANIFEST_FILE}: field `format`"),
            format!("expected `{COHORT_FORMAT}`, found `{}`", manifest.format),
        ));
    }
    let m = manifest.region_labels.len();
    if m < 2 {
        return Err(Error::parse(
            format!("{MANIFEST_FILE}: field `region_labels`"),
            format!("region count {m} violates the minimum of 2"),
        ));
    }
    if manifest.scans < MIN_SCANS {
        return Err(Error::parse(
            format!("{MANIFEST_FILE}: field `scans`"),
            format!("scan count {} is below the minimum of {MIN_SCANS}", manifest.scans),
        ));
    }

    let mut seen = HashSet::new();
    let mut subjects = Vec::with_capacity(manifest.subjects.len());
    for (idx, entry) in manifest.subjects.iter().enumerate() {
        let field = |name: &str| format!("{MANIFEST_FILE}: subjects[{idx}].{name}");
        if !seen.insert(entry.id.as_str()) {
            return Err(Error::parse(
                field("id"),
                format!("duplicate subject id `{}`", entry.id),
            ));
        }
        let group: GroupLabel = entry
            .group
            .parse()
            .map_err(|e: String| Error::parse(field("group"), e))?;
        entry
            .circuit
            .validate(m, manifest.scans, group)
            .map_err(|e| Error::parse(field("circuit"), e.to_string()))?;
        let values = read_subject_csv(dir, idx, entry, &manifest.region_labels, manifest.scans)?;
        let series = RoiTimeSeries::new(entry.id.clone(), manifest.region_labels.clone(), values)
            .map_err(|e| Error::parse(field("id"), e.to_string()))?;
        subjects.push(Subject {
            series,
            group,
            circuit: entry.circuit.clone(),
        });
    }
    if subjects.is_empty() {
        return Err(Error::parse(
            format!("{MANIFEST_FILE}: field `subjects`"),
            "no subjects listed",
        ));
    }
    Ok(Cohort {
        subjects,
        generator_config: manifest.config,
        seed: manifest.seed,
    })
}

fn read_subject_csv(
    dir: &Path,
    idx: usize,
    entry: &SubjectEntry,
    labels: &[String],
    scans: usize,
) -> Result<Array2<f64>> {
    let path = dir.join(&entry.file);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let loc = |line: usize| format!("{} (subject {idx} `{}`), line {line}", entry.file, entry.id);
    let mut lines = text.lines();

    let header = lines.next().ok_or_else(|| Error::parse(loc(1), "missing header row"))?;
    let mut cols = header.split(',');
    if cols.next() != Some("region") {
        return Err(Error::parse(loc(1), "header must start with `region`"));
    }
    let mut count = 0;
    for (s, c) in cols.enumerate() {
        if c.trim().parse::<usize>() != Ok(s) {
            return Err(Error::parse(
                loc(1),
                format!("header column {} must be scan index {s}, found `{c}`", s + 1),
            ));
        }
        count += 1;
    }
    if count != scans {
        return Err(Error::parse(
            loc(1),
            format!("header lists {count} scans, manifest says {scans}"),
        ));
    }

    let mut values = Array2::<f64>::zeros((labels.len(), scans));
    let mut rows = 0;
    for (r, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let line_no = r + 2;
        if rows >= labels.len() {
            return Err(Error::parse(
                loc(line_no),
                format!("more than {} region rows", labels.len()),
            ));
        }
        let mut fields = line.split(',');
        let label = fields.next().unwrap_or_default();
        if label != labels[rows] {
            return Err(Error::parse(
                loc(line_no),
                format!("region {rows}: expected label `{}`, found `{label}`", labels[rows]),
            ));
        }
        let mut n = 0;
        for (s, field) in fields.enumerate() {
            if s >= scans {
                return Err(Error::parse(
                    loc(line_no),
                    format!("region {rows}: more than {scans} values"),
                ));
            }
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::parse(loc(line_no), format!("region {rows}, scan {s}: cannot parse `{field}`")))?;
            if !v.is_finite() {
                return Err(Error::parse(
                    loc(line_no),
                    format!("subject {idx}, region {rows}, scan {s}: non-finite value `{field}`"),
                ));
            }
            values[[rows, s]] = v;
            n += 1;
        }
        if n != scans {
            return Err(Error::parse(
                loc(line_no),
                format!("region {rows}: {n} values, expected {scans}"),
            ));
        }
        rows += 1;
    }
    if rows != labels.len() {
        return Err(Error::parse(
            loc(rows + 2),
            format!("{rows} region rows, expected {}", labels.len()),
        ));
    }
    Ok(values)
}
