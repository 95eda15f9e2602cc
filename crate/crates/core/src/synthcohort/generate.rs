//! Latent Gaussian factor model with a covariance shift on planted edges.
//!
//! Random streams (all ChaCha8 under the cohort seed, selected with
//! `set_stream`): stream 0 draws the factor loadings, stream 1 draws the
//! planted edges, stream `2 + k` draws subject `k`'s scans. Reimplementations
//! can match the distributions, not the bits.

use nalgebra::DMatrix;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{check_unique_labels, Cohort, GroupLabel, PlantedCircuit, RoiTimeSeries, Subject, MIN_SCANS};
use crate::error::{Error, Result};

const LOADING_ROUNDS: usize = 10;
const LOADING_START: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub regions: usize,
    pub scans: usize,
    pub subjects_per_group: usize,
    /// Number of latent factors.
    pub factors: usize,
    /// Probability that a region loads on a given factor.
    pub base_density: f64,
    /// Upper bound on a region's shared variance; keeps the base covariance
    /// far enough from singular to absorb the planted shift.
    pub max_communality: f64,
    pub effect_size_low: f64,
    pub effect_size_high: f64,
    /// Standard deviation of the independent measurement noise.
    pub noise_level: f64,
    pub planted_edges: usize,
    /// Scan index where the perturbation starts; `None` means the midpoint.
    pub onset_scan: Option<usize>,
    /// When false, the low and high groups get disjoint planted edge sets.
    pub shared_circuit: bool,
    /// Defaults to `R00`, `R01`, ...
    pub region_labels: Option<Vec<String>>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            regions: 30,
            scans: 200,
            subjects_per_group: 12,
            factors: 3,
            base_density: 0.6,
            max_communality: 0.35,
            effect_size_low: 0.3,
            effect_size_high: 0.6,
            noise_level: 0.1,
            planted_edges: 8,
            onset_scan: None,
            shared_circuit: true,
            region_labels: None,
        }
    }
}

impl GeneratorConfig {
    pub fn onset(&self) -> usize {
        self.onset_scan.unwrap_or(self.scans / 2)
    }

    pub fn labels(&self) -> Vec<String> {
        match &self.region_labels {
            Some(l) => l.clone(),
            None => {
                let width = (self.regions.max(2) - 1).to_string().len().max(2);
                (0..self.regions).map(|i| format!("R{i:0width$}")).collect()
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Validation(m));
        if self.regions < 2 {
            return fail(format!("regions must be ≥ 2, got {}", self.regions));
        }
        if self.scans < MIN_SCANS {
            return fail(format!("scans must be ≥ {MIN_SCANS}, got {}", self.scans));
        }
        if self.subjects_per_group < 1 {
            return fail("subjects_per_group must be ≥ 1".into());
        }
        if self.factors < 1 {
            return fail("factors must be ≥ 1".into());
        }
        if !(self.base_density > 0.0 && self.base_density <= 1.0) {
            return fail(format!("base_density must lie in (0,1], got {}", self.base_density));
        }
        if !(self.max_communality > 0.0 && self.max_communality < 1.0) {
            return fail(format!(
                "max_communality must lie in (0,1), got {}",
                self.max_communality
            ));
        }
        if !(self.effect_size_low > 0.0 && self.effect_size_high > self.effect_size_low) {
            return fail(format!(
                "effect sizes must satisfy high > low > 0, got high={} low={}",
                self.effect_size_high, self.effect_size_low
            ));
        }
        if !(self.noise_level > 0.0 && self.noise_level.is_finite()) {
            return fail(format!("noise_level must be > 0, got {}", self.noise_level));
        }
        let sets = if self.shared_circuit { 1 } else { 2 };
        if self.planted_edges < 1 || 2 * self.planted_edges * sets > self.regions {
            return fail(format!(
                "planted_edges={} needs {} distinct regions, only {} available",
                self.planted_edges,
                2 * self.planted_edges * sets,
                self.regions
            ));
        }
        let onset = self.onset();
        if onset == 0 || onset >= self.scans {
            return fail(format!("onset_scan must lie in [1, {}), got {onset}", self.scans));
        }
        if let Some(labels) = &self.region_labels {
            if labels.len() != self.regions {
                return fail(format!("{} region labels for {} regions", labels.len(), self.regions));
            }
            check_unique_labels(labels)?;
        }
        Ok(())
    }
}

fn factor_loadings(config: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let (m, k) = (config.regions, config.factors);
    let mut loadings = Array2::<f64>::zeros((m, k));
    for i in 0..m {
        for f in 0..k {
            if rng.random::<f64>() < config.base_density {
                let magnitude = 0.3 + 0.7 * rng.random::<f64>();
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                loadings[[i, f]] = sign * magnitude;
            }
        }
        let norm2: f64 = loadings.row(i).iter().map(|v| v * v).sum();
        if norm2 > 0.0 {
            let communality = config.max_communality * (0.5 + 0.5 * rng.random::<f64>());
            let scale = (communality / norm2).sqrt();
            loadings.row_mut(i).iter_mut().for_each(|v| *v *= scale);
        }
    }
    loadings
}

/// Unit-diagonal base covariance (equivalently correlation) of the factor model.
pub fn base_correlation(config: &GeneratorConfig, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    let loadings = factor_loadings(config, &mut rng);
    let mut cov = loadings.dot(&loadings.t());
    for i in 0..config.regions {
        cov[[i, i]] = 1.0;
    }
    cov
}

type Edges = Vec<(usize, usize)>;

/// Planted edge sets of the low and high groups.
fn draw_circuits(config: &GeneratorConfig, seed: u64) -> (Edges, Edges) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..config.regions).collect();
    order.shuffle(&mut rng);
    let pairs: Vec<(usize, usize)> = order
        .chunks_exact(2)
        .map(|p| (p[0].min(p[1]), p[0].max(p[1])))
        .collect();
    let e = config.planted_edges;
    let low = pairs[..e].to_vec();
    let high = if config.shared_circuit {
        low.clone()
    } else {
        pairs[e..2 * e].to_vec()
    };
    (low, high)
}

fn alternating_signs(n: usize) -> Vec<i8> {
    (0..n).map(|k| if k % 2 == 0 { 1 } else { -1 }).collect()
}

fn cholesky(cov: &Array2<f64>) -> Option<Array2<f64>> {
    let m = cov.nrows();
    let dm = DMatrix::from_fn(m, m, |i, j| cov[[i, j]]);
    let chol = dm.cholesky()?;
    let l = chol.l();
    Some(Array2::from_shape_fn((m, m), |(i, j)| l[(i, j)]))
}

/// Lower Cholesky factor of the post-onset covariance, repaired by diagonal
/// loading (`ε` doubling from 1e-6) when the shift breaks positive definiteness.
fn perturbed_factor(base: &Array2<f64>, circuit: &PlantedCircuit) -> Result<Array2<f64>> {
    let mut cov = base.clone();
    for (&(i, j), &sign) in circuit.edges.iter().zip(&circuit.signs) {
        let shift = f64::from(sign) * circuit.effect_size;
        cov[[i, j]] += shift;
        cov[[j, i]] += shift;
    }
    if let Some(l) = cholesky(&cov) {
        return Ok(l);
    }
    let mut eps = LOADING_START;
    for _ in 0..LOADING_ROUNDS {
        let mut loaded = cov.clone();
        for i in 0..loaded.nrows() {
            loaded[[i, i]] += eps;
        }
        if let Some(l) = cholesky(&loaded) {
            return Ok(l);
        }
        eps *= 2.0;
    }
    let worst = circuit
        .edges
        .iter()
        .copied()
        .max_by(|&(a, b), &(c, d)| cov[[a, b]].abs().total_cmp(&cov[[c, d]].abs()))
        .expect("non-empty circuit");
    Err(Error::Generation(format!(
        "covariance not positive definite after perturbing edge ({}, {}) (shifted covariance {:.4}); \
         diagonal loading failed after {LOADING_ROUNDS} rounds",
        worst.0,
        worst.1,
        cov[[worst.0, worst.1]]
    )))
}

struct GroupModel {
    group: GroupLabel,
    circuit: PlantedCircuit,
    post_factor: Array2<f64>,
}

fn sample_subject(
    seed: u64,
    stream: u64,
    pre: &Array2<f64>,
    post: &Array2<f64>,
    onset: usize,
    scans: usize,
    noise: f64,
) -> Array2<f64> {
    let m = pre.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut values = Array2::<f64>::zeros((m, scans));
    let mut z = vec![0.0; m];
    for s in 0..scans {
        let factor = if s < onset { pre } else { post };
        z.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
        for i in 0..m {
            let row = factor.row(i);
            let mut acc = 0.0;
            for (p, &zp) in z.iter().enumerate().take(i + 1) {
                acc += row[p] * zp;
            }
            let eta: f64 = rng.sample(StandardNormal);
            values[[i, s]] = acc + noise * eta;
        }
    }
    values
}

/// Draws a labeled cohort: saline subjects follow the base factor model for
/// the whole scan; nicotine subjects switch to the shifted covariance at the
/// onset scan, the high group with the larger effect size.
pub fn generate_cohort(config: &GeneratorConfig, seed: u64) -> Result<Cohort> {
    config.validate()?;
    let onset = config.onset();
    let labels = config.labels();
    let base = base_correlation(config, seed);
    let base_factor =
        cholesky(&base).ok_or_else(|| Error::Generation("base covariance is not positive definite".into()))?;
    let (low_edges, high_edges) = draw_circuits(config, seed);

    let mut models = vec![GroupModel {
        group: GroupLabel::Saline,
        circuit: PlantedCircuit::empty(onset),
        post_factor: base_factor.clone(),
    }];
    for (group, edges, effect) in [
        (GroupLabel::LowNicotine, low_edges, config.effect_size_low),
        (GroupLabel::HighNicotine, high_edges, config.effect_size_high),
    ] {
        let circuit = PlantedCircuit {
            signs: alternating_signs(edges.len()),
            edges,
            effect_size: effect,
            onset_scan: onset,
        };
        let post_factor = perturbed_factor(&base, &circuit)?;
        models.push(GroupModel {
            group,
            circuit,
            post_factor,
        });
    }

    let n = config.subjects_per_group;
    let jobs: Vec<(usize, &GroupModel, usize)> = models
        .iter()
        .flat_map(|model| (0..n).map(move |k| (model, k)))
        .enumerate()
        .map(|(idx, (model, k))| (idx, model, k))
        .collect();
    let width = n.to_string().len().max(2);
    let subjects = jobs
        .par_iter()
        .map(|&(idx, model, k)| {
            let values = sample_subject(
                seed,
                2 + idx as u64,
                &base_factor,
                &model.post_factor,
                onset,
                config.scans,
                config.noise_level,
            );
            let id = format!("{}{:0width$}", model.group.id_prefix(), k + 1);
            Ok(Subject {
                series: RoiTimeSeries::new(id, labels.clone(), values)?,
                group: model.group,
                circuit: model.circuit.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(Cohort {
        subjects,
        generator_config: config.clone(),
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GeneratorConfig {
        GeneratorConfig {
            regions: 10,
            scans: 60,
            subjects_per_group: 2,
            planted_edges: 2,
            ..Default::default()
        }
    }

    #[test]
    fn default_shape_and_group_semantics() {
        let cohort = generate_cohort(&GeneratorConfig::default(), 7).unwrap();
        assert_eq!(cohort.subjects.len(), 36);
        for s in &cohort.subjects {
            assert_eq!(s.series.values.dim(), (30, 200));
            if s.group == GroupLabel::Saline {
                assert!(s.circuit.edges.is_empty());
            } else {
                assert_eq!(s.circuit.edges.len(), 8);
            }
        }
    }

    #[test]
    fn low_effect_zero_is_rejected() {
        let config = GeneratorConfig {
            effect_size_low: 0.0,
            ..small()
        };
        assert!(matches!(generate_cohort(&config, 1), Err(Error::Validation(_))));
    }

    #[test]
    fn determinism_and_seed_sensitivity() {
        let a = generate_cohort(&small(), 11).unwrap();
        let b = generate_cohort(&small(), 11).unwrap();
        let c = generate_cohort(&small(), 12).unwrap();
        assert_eq!(a, b);
        let bits = |x: &Cohort| -> Vec<u64> {
            x.subjects
                .iter()
                .flat_map(|s| s.series.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>())
                .collect()
        };
        assert_eq!(bits(&a), bits(&b));
        assert_ne!(bits(&a), bits(&c));
    }

    #[test]
    fn signs_alternate_and_groups_share_edges() {
        let cohort = generate_cohort(&small(), 3).unwrap();
        let low = cohort.planted(GroupLabel::LowNicotine).unwrap();
        let high = cohort.planted(GroupLabel::HighNicotine).unwrap();
        assert_eq!(low.edges, high.edges);
        assert_eq!(low.signs, vec![1, -1]);
        assert!(high.effect_size > low.effect_size);
    }

    #[test]
    fn disjoint_circuits_when_requested() {
        let config = GeneratorConfig {
            shared_circuit: false,
            ..small()
        };
        let cohort = generate_cohort(&config, 3).unwrap();
        let low = cohort.planted(GroupLabel::LowNicotine).unwrap();
        let high = cohort.planted(GroupLabel::HighNicotine).unwrap();
        for e in &low.edges {
            assert!(!high.edges.contains(e));
        }
    }

    #[test]
    fn unrepairable_shift_names_an_edge() {
        let config = GeneratorConfig {
            effect_size_low: 1.5,
            effect_size_high: 2.5,
            ..small()
        };
        match generate_cohort(&config, 5) {
            Err(Error::Generation(msg)) => assert!(msg.contains("edge (")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn base_correlation_is_unit_diagonal_and_bounded() {
        let c = base_correlation(&GeneratorConfig::default(), 9);
        for i in 0..30 {
            assert_eq!(c[[i, i]], 1.0);
            for j in 0..30 {
                assert!(c[[i, j]].abs() <= 1.0);
                assert_eq!(c[[i, j]], c[[j, i]]);
            }
        }
    }
}
