use ndarray::{Array2, Axis};

use crate::error::{Error, Result};

/// Averages voxel series into region series.
///
/// `voxel_series` is voxels × scans and `parcellation[v]` is the region of
/// voxel `v`. Returns a regions × scans matrix whose row `r` is the per-scan
/// arithmetic mean of the voxels assigned to `r`. Wrap the result in
/// [`super::RoiTimeSeries::new`] to attach labels and enforce the series invariants.
pub fn aggregate_voxels(voxel_series: &Array2<f64>, parcellation: &[usize], regions: usize) -> Result<Array2<f64>> {
    let (voxels, scans) = voxel_series.dim();
    if parcellation.len() != voxels {
        return Err(Error::Ingestion(format!(
            "parcellation covers {} voxels, series has {voxels}",
            parcellation.len()
        )));
    }
    if let Some((v, &r)) = parcellation.iter().enumerate().find(|(_, &r)| r >= regions) {
        return Err(Error::Ingestion(format!(
            "voxel {v} maps to region {r}, outside [0, {regions})"
        )));
    }
    if let Some(((v, s), _)) = voxel_series.indexed_iter().find(|(_, x)| !x.is_finite()) {
        return Err(Error::Ingestion(format!("non-finite value at voxel {v}, scan {s}")));
    }
    let mut sums = Array2::<f64>::zeros((regions, scans));
    let mut counts = vec![0usize; regions];
    for (row, &r) in voxel_series.axis_iter(Axis(0)).zip(parcellation) {
        sums.row_mut(r).zip_mut_with(&row, |acc, &x| *acc += x);
        counts[r] += 1;
    }
    if let Some(r) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Ingestion(format!("region {r} has no voxels")));
    }
    for (mut row, &c) in sums.axis_iter_mut(Axis(0)).zip(&counts) {
        row.mapv_inplace(|x| x / c as f64);
    }
    Ok(sums)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn single_voxel_region_is_identity() {
        let v = array![[1.0, -2.0, 3.5]];
        assert_eq!(aggregate_voxels(&v, &[0], 1).unwrap(), v);
    }

    #[test]
    fn opposite_voxels_cancel() {
        let v = array![[1.0, -2.0, 3.5], [-1.0, 2.0, -3.5]];
        assert_eq!(aggregate_voxels(&v, &[0, 0], 1).unwrap(), array![[0.0, 0.0, 0.0]]);
    }

    #[test]
    fn mean_by_hand() {
        let v = array![[1.0, 3.0], [2.0, 4.0]];
        assert_eq!(aggregate_voxels(&v, &[0, 0], 1).unwrap(), array![[1.5, 3.5]]);
    }

    #[test]
    fn empty_region_is_named() {
        let v = array![[1.0, 3.0], [2.0, 4.0]];
        let err = aggregate_voxels(&v, &[0, 0], 2).unwrap_err().to_string();
        assert!(err.contains("region 1"), "{err}");
    }

    #[test]
    fn non_finite_voxel_is_located() {
        let v = array![[1.0, 3.0], [2.0, f64::NAN]];
        let err = aggregate_voxels(&v, &[0, 1], 2).unwrap_err().to_string();
        assert!(err.contains("voxel 1"), "{err}");
    }

    proptest! {
        #[test]
        fn aggregation_is_linear(
            vals in proptest::collection::vec(-10.0f64..10.0, 12),
            c in -5.0f64..5.0,
        ) {
            let x = Array2::from_shape_vec((4, 3), vals).unwrap();
            let parc = [0, 1, 1, 0];
            let lhs = aggregate_voxels(&(&x * c), &parc, 2).unwrap();
            let rhs = aggregate_voxels(&x, &parc, 2).unwrap() * c;
            for (a, b) in lhs.iter().zip(rhs.iter()) {
                prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
            }
        }
    }
}
