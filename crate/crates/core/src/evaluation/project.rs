use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

/// Projects centered features onto their two leading principal directions.
///
/// Each direction's sign is fixed so its largest-magnitude component is
/// positive, making the output a deterministic function of the input.
pub fn project_2d(features: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
    let n = features.len();
    if n < 3 {
        return Err(Error::Validation(format!(
            "projection needs at least 3 vectors, got {n}"
        )));
    }
    let d = features[0].len();
    if d == 0 || features.iter().any(|f| f.len() != d) {
        return Err(Error::Validation(
            "feature vectors must share a positive dimension".into(),
        ));
    }
    let mean: Vec<f64> = (0..d)
        .map(|k| features.iter().map(|f| f[k]).sum::<f64>() / n as f64)
        .collect();
    let centered = DMatrix::from_fn(n, d, |r, k| features[r][k] - mean[k]);
    let cov = centered.transpose() * &centered / n as f64;
    let eigen = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eigen.eigenvalues[b].total_cmp(&eigen.eigenvalues[a]).then(a.cmp(&b)));
    let top = eigen.eigenvalues[order[0]];
    if top <= f64::EPSILON * eigen.eigenvalues.iter().map(|v| v.abs()).fold(1.0, f64::max) {
        return Err(Error::Computation("features have zero variance".into()));
    }
    let axes: Vec<Vec<f64>> = order
        .iter()
        .take(2)
        .map(|&k| {
            let mut v: Vec<f64> = eigen.eigenvectors.column(k).iter().copied().collect();
            let pivot = v
                .iter()
                .copied()
                .fold(0.0f64, |best, x| if x.abs() > best.abs() { x } else { best });
            if pivot < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            v
        })
        .collect();
    Ok((0..n)
        .map(|r| {
            let row = centered.row(r);
            let coord = |axis: Option<&Vec<f64>>| axis.map_or(0.0, |a| row.iter().zip(a).map(|(x, y)| x * y).sum());
            [coord(axes.first()), coord(axes.get(1))]
        })
        .collect())
}

/// Writes `embedding_2d.csv` (subject, group, x, y) and `embeddings_raw.csv`
/// (subject, group, f0 … f{d−1}).
pub fn write_embedding_csvs(dir: &Path, rows: &[(String, String, Vec<f64>)], coords: &[[f64; 2]]) -> Result<()> {
    let mut flat = String::from("subject,group,x,y\n");
    for ((subject, group, _), [x, y]) in rows.iter().zip(coords) {
        writeln!(flat, "{subject},{group},{x},{y}").expect("string write");
    }
    let d = rows.first().map_or(0, |r| r.2.len());
    let mut raw = String::from("subject,group");
    for k in 0..d {
        write!(raw, ",f{k}").expect("string write");
    }
    raw.push('\n');
    for (subject, group, f) in rows {
        raw.push_str(subject);
        raw.push(',');
        raw.push_str(group);
        for v in f {
            write!(raw, ",{v}").expect("string write");
        }
        raw.push('\n');
    }
    for (name, text) in [("embedding_2d.csv", flat), ("embeddings_raw.csv", raw)] {
        let path = dir.join(name);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
