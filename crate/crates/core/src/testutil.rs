use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::connectome::{build_dynamic_network, DynamicBrainNetwork, WindowSpec};
use crate::synthcohort::{GroupLabel, RoiTimeSeries};

/// Network of `regions` white-noise series cut into `timesteps` windows of `length` scans.
pub fn random_network(regions: usize, timesteps: usize, length: usize, seed: u64) -> DynamicBrainNetwork<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scans = (timesteps * length).max(30);
    let values = Array2::from_shape_fn((regions, scans), |_| rng.random::<f64>() - 0.5);
    let labels = (0..regions).map(|r| format!("R{r}")).collect();
    let series = RoiTimeSeries::new(format!("X{seed}"), labels, values).unwrap();
    let spec = WindowSpec {
        window_count: timesteps,
        window_length: length,
        stride: None,
    };
    build_dynamic_network(&series, GroupLabel::Saline, &spec).unwrap()
}
