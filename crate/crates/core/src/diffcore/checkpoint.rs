//! `params.json` + `params.bin` checkpoint layout.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{Init, Parameter, ParameterStore};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MANIFEST_FILE: &str = "params.json";
pub const VALUES_FILE: &str = "params.bin";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    init_scheme: String,
    seed: u64,
    step: u64,
    params: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

/// Writes the manifest and the little-endian 64-bit values concatenated in manifest order.
pub fn save<S: Scalar>(store: &ParameterStore<S>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = Manifest {
        init_scheme: "uniform_inv_sqrt_fan_in".into(),
        seed: store.seed(),
        step: store.step(),
        params: store
            .iter()
            .map(|(_, p)| Entry {
                name: p.name.clone(),
                shape: p.shape.clone(),
                init: p.init,
            })
            .collect(),
    };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;

    let mut bytes = Vec::with_capacity(store.value_count() * 8);
    for (_, p) in store.iter() {
        for v in &p.value {
            bytes.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    let path = dir.join(VALUES_FILE);
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
}

pub fn load<S: Scalar>(dir: &Path) -> Result<ParameterStore<S>> {
    let manifest_path = dir.join(MANIFEST_FILE);
    if !manifest_path.exists() {
        return Err(Error::MissingArtifact(manifest_path));
    }
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::parse(manifest_path.display().to_string(), e.to_string()))?;
    let bin_path = dir.join(VALUES_FILE);
    if !bin_path.exists() {
        return Err(Error::MissingArtifact(bin_path));
    }
    let bytes = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    let expected: usize = manifest.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
    if bytes.len() != expected * 8 {
        return Err(Error::parse(
            bin_path.display().to_string(),
            format!("expected {} bytes, found {}", expected * 8, bytes.len()),
        ));
    }
    let mut store = ParameterStore::new(manifest.seed);
    let mut values = bytes
        .chunks_exact(8)
        .map(|c| S::lit(f64::from_le_bytes(c.try_into().expect("8-byte chunk"))));
    for entry in manifest.params {
        let len = entry.shape.iter().product();
        store.insert_loaded(Parameter {
            name: entry.name,
            shape: entry.shape,
            init: entry.init,
            value: values.by_ref().take(len).collect(),
            grad: vec![S::zero(); len],
        })?;
    }
    store.set_step(manifest.step);
    Ok(store)
}
