use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tape::Gradients;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// How a parameter is initialized.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Init {
    /// Uniform in `[-1/√fan_in, 1/√fan_in]`.
    Uniform {
        fan_in: usize,
    },
    Constant {
        value: f64,
    },
}

#[derive(Clone, Debug)]
pub struct Parameter<S> {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    pub value: Vec<S>,
    pub grad: Vec<S>,
}

/// Named, seeded parameter collection.
///
/// Parameter `k` (in insertion order) draws its initial values from a ChaCha8
/// stream selected by `k` under the store seed, so re-initialization and
/// incremental extension are both bit-reproducible.
#[derive(Clone, Debug)]
pub struct ParameterStore<S> {
    params: Vec<Parameter<S>>,
    index: HashMap<String, usize>,
    seed: u64,
    step: u64,
}

impl<S: Scalar> ParameterStore<S> {
    pub fn new(seed: u64) -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
            seed,
            step: 0,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub(crate) fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub(crate) fn bump_step(&mut self) {
        self.step += 1;
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    fn initial_values(seed: u64, slot: usize, len: usize, init: Init) -> Vec<S> {
        match init {
            Init::Constant { value } => vec![S::lit(value); len],
            Init::Uniform { fan_in } => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(slot as u64);
                (0..len)
                    .map(|_| S::lit((2.0 * rng.random::<f64>() - 1.0) * bound))
                    .collect()
            }
        }
    }

    /// Registers a new parameter and initializes it.
    pub fn add(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Validation(format!("duplicate parameter name `{name}`")));
        }
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Validation(format!(
                "parameter `{name}` has empty shape {shape:?}"
            )));
        }
        let len = shape.iter().product();
        let slot = self.params.len();
        self.params.push(Parameter {
            name: name.to_string(),
            shape: shape.to_vec(),
            init,
            value: Self::initial_values(self.seed, slot, len, init),
            grad: vec![S::zero(); len],
        });
        self.index.insert(name.to_string(), slot);
        Ok(ParamId(slot))
    }

    /// Returns the existing parameter with this name, or registers it.
    pub fn get_or_add(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        match self.id(name) {
            Some(id) if self.params[id.0].shape == shape => Ok(id),
            Some(id) => Err(Error::Validation(format!(
                "parameter `{name}` exists with shape {:?}, requested {shape:?}",
                self.params[id.0].shape
            ))),
            None => self.add(name, shape, init),
        }
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn parameter(&self, id: ParamId) -> &Parameter<S> {
        &self.params[id.0]
    }

    pub fn parameter_mut(&mut self, id: ParamId) -> &mut Parameter<S> {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<S>> {
        self.id(name).map(|id| self.parameter(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<S>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Parameter<S>] {
        &mut self.params
    }

    /// Resets every parameter to its seeded initial value and zeroes gradients.
    pub fn reinitialize(&mut self) {
        let seed = self.seed;
        for (slot, p) in self.params.iter_mut().enumerate() {
            p.value = Self::initial_values(seed, slot, p.value.len(), p.init);
            p.grad.iter_mut().for_each(|g| *g = S::zero());
        }
        self.step = 0;
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = S::zero());
        }
    }

    /// Overwrites every gradient buffer: reachable parameters receive their
    /// gradient, unreachable ones are zeroed.
    pub fn set_grads(&mut self, grads: &Gradients<S>) {
        self.zero_grads();
        self.accumulate_grads(grads, S::one());
    }

    /// Adds `weight × gradient` into the buffers of reachable parameters.
    pub fn accumulate_grads(&mut self, grads: &Gradients<S>, weight: S) {
        for (pid, g) in grads.params() {
            for (dst, &v) in self.params[pid.0].grad.iter_mut().zip(g) {
                *dst += weight * v;
            }
        }
    }

    pub fn grad_norm(&self) -> S {
        self.params
            .iter()
            .flat_map(|p| p.grad.iter())
            .map(|&g| g * g)
            .sum::<S>()
            .sqrt()
    }

    /// Total number of scalar values.
    pub fn value_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub(crate) fn insert_loaded(&mut self, param: Parameter<S>) -> Result<()> {
        if self.index.contains_key(&param.name) {
            return Err(Error::Validation(format!("duplicate parameter name `{}`", param.name)));
        }
        self.index.insert(param.name.clone(), self.params.len());
        self.params.push(param);
        Ok(())
    }
}
