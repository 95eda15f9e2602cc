use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthcohort::RoiTimeSeries;

/// How a scan is cut into timesteps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSpec {
    pub window_count: usize,
    pub window_length: usize,
    /// Scans between window starts; `None` means non-overlapping (= `window_length`).
    #[serde(default)]
    pub stride: Option<usize>,
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self {
            window_count: 10,
            window_length: 20,
            stride: None,
        }
    }
}

impl WindowSpec {
    pub fn stride(&self) -> usize {
        self.stride.unwrap_or(self.window_length)
    }

    /// First scan of the 1-based timestep `t`.
    pub fn start(&self, t: usize) -> usize {
        (t - 1) * self.stride()
    }

    /// Largest window count that fits in `scans`.
    pub fn max_feasible(&self, scans: usize) -> usize {
        if scans < self.window_length || self.stride() == 0 {
            0
        } else {
            (scans - self.window_length) / self.stride() + 1
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_count < 1 {
            return Err(Error::Validation("window_count must be ≥ 1".into()));
        }
        if self.window_length < 3 {
            return Err(Error::Validation(format!(
                "window_length must be ≥ 3, got {}",
                self.window_length
            )));
        }
        if self.stride() < 1 {
            return Err(Error::Validation("stride must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn check_scans(&self, scans: usize) -> Result<()> {
        self.validate()?;
        let needed = (self.window_count - 1) * self.stride() + self.window_length;
        if needed > scans {
            return Err(Error::Window {
                message: format!(
                    "{} windows of length {} with stride {} need {needed} scans, series has {scans}",
                    self.window_count,
                    self.window_length,
                    self.stride()
                ),
                max_feasible: self.max_feasible(scans),
            });
        }
        Ok(())
    }

    /// Timesteps whose window starts at or after `onset_scan`.
    pub fn post_onset_timesteps(&self, onset_scan: usize) -> Vec<usize> {
        (1..=self.window_count)
            .filter(|&t| self.start(t) >= onset_scan)
            .collect()
    }
}

/// Cuts `series` into `window_count` segments of `window_length` scans;
/// segment `t` (1-based) starts at scan `(t−1)·stride`. Trailing scans are dropped.
pub fn split_windows(series: &RoiTimeSeries, spec: &WindowSpec) -> Result<Vec<Array2<f64>>> {
    spec.check_scans(series.scans())?;
    Ok((1..=spec.window_count)
        .map(|t| {
            let start = spec.start(t);
            series
                .values
                .slice(s![.., start..start + spec.window_length])
                .to_owned()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(scans: usize) -> RoiTimeSeries {
        let values = Array2::from_shape_fn((3, scans), |(r, s)| (r * 1000 + s) as f64);
        RoiTimeSeries::new("x", vec!["a".into(), "b".into(), "c".into()], values).unwrap()
    }

    fn spec() -> WindowSpec {
        WindowSpec {
            window_count: 10,
            window_length: 20,
            stride: Some(20),
        }
    }

    #[test]
    fn disjoint_windows_cover_all_scans() {
        let s = series(200);
        let segs = split_windows(&s, &spec()).unwrap();
        assert_eq!(segs.len(), 10);
        let rebuilt =
            ndarray::concatenate(ndarray::Axis(1), &segs.iter().map(|x| x.view()).collect::<Vec<_>>()).unwrap();
        assert_eq!(rebuilt, s.values);
    }

    #[test]
    fn remainder_scans_are_discarded() {
        let segs = split_windows(&series(205), &spec()).unwrap();
        assert_eq!(segs.len(), 10);
        assert_eq!(segs[9][[0, 19]], 199.0);
    }

    #[test]
    fn infeasible_spec_reports_max_windows() {
        match split_windows(&series(199), &spec()) {
            Err(Error::Window { max_feasible, .. }) => assert_eq!(max_feasible, 9),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn overlapping_stride() {
        let spec = WindowSpec {
            window_count: 4,
            window_length: 20,
            stride: Some(10),
        };
        let segs = split_windows(&series(50), &spec).unwrap();
        assert_eq!(segs[3][[0, 0]], 30.0);
    }

    #[test]
    fn post_onset_timesteps_default() {
        assert_eq!(WindowSpec::default().post_onset_timesteps(100), vec![6, 7, 8, 9, 10]);
    }
}
