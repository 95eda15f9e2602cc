use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Correlation matrix of the rows of a segment.
#[derive(Clone, Debug, PartialEq)]
pub struct PearsonMatrix<S> {
    pub adjacency: Array2<S>,
    /// Rows whose values are all identical; their off-diagonal entries are 0.
    pub zero_variance: Vec<usize>,
}

/// Pearson correlation between every pair of rows of an `M × L` segment.
///
/// The diagonal is exactly 1, the matrix is exactly symmetric (only the upper
/// triangle is computed), entries are clamped to `[-1, 1]`, and constant rows
/// correlate 0 with everything else.
pub fn pearson_matrix<S: Scalar>(segment: ArrayView2<'_, S>) -> Result<PearsonMatrix<S>> {
    let (m, l) = segment.dim();
    if l < 3 {
        return Err(Error::Computation(format!(
            "pearson_matrix needs ≥ 3 samples per row, got {l}"
        )));
    }
    if let Some(((r, c), _)) = segment.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::Computation(format!("non-finite input at row {r}, column {c}")));
    }
    let n = S::count(l);
    let mut centered = Array2::<S>::zeros((m, l));
    let mut norms = vec![S::zero(); m];
    let mut zero_variance = Vec::new();
    for (i, row) in segment.rows().into_iter().enumerate() {
        if row.iter().all(|&v| v == row[0]) {
            zero_variance.push(i);
            continue;
        }
        let mean = row.iter().copied().sum::<S>() / n;
        let mut ss = S::zero();
        for (dst, &v) in centered.row_mut(i).iter_mut().zip(row) {
            *dst = v - mean;
            ss += *dst * *dst;
        }
        norms[i] = ss.sqrt();
    }

    let mut adjacency = Array2::<S>::zeros((m, m));
    for i in 0..m {
        adjacency[[i, i]] = S::one();
        if norms[i] == S::zero() {
            continue;
        }
        let ri = centered.row(i);
        for j in i + 1..m {
            if norms[j] == S::zero() {
                continue;
            }
            let dot: S = ri.iter().zip(centered.row(j)).map(|(&a, &b)| a * b).sum();
            let r = (dot / (norms[i] * norms[j])).max(-S::one()).min(S::one());
            adjacency[[i, j]] = r;
            adjacency[[j, i]] = r;
        }
    }
    Ok(PearsonMatrix {
        adjacency,
        zero_variance,
    })
}

/// Fisher z-transform of the off-diagonal entries (`atanh`, with |r| capped
/// just below 1 so perfect correlations stay finite). Not applied by default.
pub fn fisher_z<S: Scalar>(adjacency: &Array2<S>) -> Array2<S> {
    let cap = S::one() - S::lit(1e-12);
    let mut out = adjacency.clone();
    for ((i, j), v) in out.indexed_iter_mut() {
        if i != j {
            *v = v.max(-cap).min(cap).atanh();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn affine_rows_correlate_perfectly() {
        let seg = array![[1.0, 4.0, 2.0, 8.0], [5.0, 11.0, 7.0, 19.0]];
        let p = pearson_matrix::<f64>(seg.view()).unwrap();
        assert!((p.adjacency[[0, 1]] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn hand_case() {
        let seg = array![[1.0, 2.0, 3.0, 4.0], [1.0, 3.0, 2.0, 4.0]];
        let p = pearson_matrix::<f64>(seg.view()).unwrap();
        assert!((p.adjacency[[0, 1]] - 0.8).abs() <= 1e-12);
    }

    #[test]
    fn constant_row_is_flagged() {
        let seg = array![[2.0, 2.0, 2.0, 2.0], [1.0, 3.0, 2.0, 4.0], [0.5, -1.0, 3.0, 0.0]];
        let p = pearson_matrix::<f64>(seg.view()).unwrap();
        assert_eq!(p.zero_variance, vec![0]);
        assert_eq!(p.adjacency[[0, 1]], 0.0);
        assert_eq!(p.adjacency[[2, 0]], 0.0);
        assert_eq!(p.adjacency[[0, 0]], 1.0);
    }

    #[test]
    fn non_finite_input_is_located() {
        let seg = array![[1.0, 2.0, 3.0], [1.0, f64::INFINITY, 2.0]];
        let err = pearson_matrix(seg.view()).unwrap_err().to_string();
        assert!(err.contains("row 1, column 1"), "{err}");
    }

    #[test]
    fn works_in_single_precision() {
        let seg = array![[1.0f32, 2.0, 3.0, 4.0], [1.0, 3.0, 2.0, 4.0]];
        let p = pearson_matrix::<f32>(seg.view()).unwrap();
        assert!((p.adjacency[[0, 1]] - 0.8).abs() < 1e-6);
    }

    #[test]
    fn fisher_z_keeps_diagonal() {
        let a = array![[1.0, 0.5], [0.5, 1.0]];
        let z = fisher_z(&a);
        assert_eq!(z[[0, 0]], 1.0);
        assert!((z[[0, 1]] - 0.5f64.atanh()).abs() < 1e-15);
    }
}
