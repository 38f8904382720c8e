//! Versioned checkpoint containers: topology description, architecture and
//! operation parameter arrays, and the counters that reseed the random
//! streams on resume.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{ParamGroup, ParamStore};
use crate::pipeline::StageKind;
use crate::rng::{StreamRole, StreamSeed};
use crate::scalar::Scalar;
use crate::supernet::{SuperNetSpec, SuperNetwork};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ParamSnapshot {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: ParamGroup,
    /// Stored as f64, which round-trips both element types exactly.
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupernetCheckpoint {
    pub version: u32,
    pub precision: u32,
    /// Run seed; together with stage/epoch counters this is the whole rng
    /// state, since every stream is derived functionally from them.
    pub seed: u64,
    pub completed_stage: Option<StageKind>,
    pub spec: SuperNetSpec,
    pub params: Vec<ParamSnapshot>,
}

pub fn capture<T: Scalar>(
    spec: &SuperNetSpec,
    store: &ParamStore<T>,
    seed: u64,
    completed_stage: Option<StageKind>,
) -> SupernetCheckpoint {
    let params = store
        .iter()
        .map(|(_, e)| ParamSnapshot {
            name: e.name.clone(),
            shape: e.shape.clone(),
            group: e.group,
            values: e.values.iter().map(|v| v.to_f64()).collect(),
        })
        .collect();
    SupernetCheckpoint {
        version: CHECKPOINT_VERSION,
        precision: (T::BYTES * 8) as u32,
        seed,
        completed_stage,
        spec: spec.clone(),
        params,
    }
}

/// Rebuild the network from the stored topology and overwrite every
/// parameter with the snapshot values.
pub fn restore<T: Scalar>(ck: &SupernetCheckpoint) -> Result<(SuperNetwork, ParamStore<T>)> {
    if ck.version != CHECKPOINT_VERSION {
        return Err(Error::Serde(format!("unsupported checkpoint version {}", ck.version)));
    }
    let mut store = ParamStore::new();
    let mut rng = StreamSeed::new(ck.seed).stream(StreamRole::ParamInit, &[0]);
    let net = SuperNetwork::build(&ck.spec, &mut store, &mut rng)?;
    if store.len() != ck.params.len() {
        return Err(Error::Serde(format!(
            "checkpoint has {} params, topology builds {}",
            ck.params.len(),
            store.len()
        )));
    }
    let ids: Vec<_> = store.iter().map(|(pid, _)| pid).collect();
    for (pid, snap) in ids.into_iter().zip(&ck.params) {
        {
            let e = store.entry(pid);
            if e.name != snap.name || e.shape != snap.shape {
                return Err(Error::Serde(format!(
                    "checkpoint param {:?}/{:?} does not match rebuilt {}/{:?}",
                    snap.name, snap.shape, e.name, e.shape
                )));
            }
        }
        let dst = store.values_mut(pid);
        for (d, &s) in dst.iter_mut().zip(&snap.values) {
            *d = T::from_f64(s);
        }
    }
    Ok((net, store))
}

pub fn save(ck: &SupernetCheckpoint, path: &Path) -> Result<()> {
    let bytes = serde_json::to_vec_pretty(ck)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<SupernetCheckpoint> {
    let bytes = fs::read(path)?;
    Ok(serde_json::from_slice(&bytes)?)
}
