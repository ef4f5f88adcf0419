//! Checkpoint files.
//!
//! Layout: the magic `PLCK`, a little-endian `u16` format version, a `u64`
//! manifest length, the JSON manifest, then every tensor listed in the
//! manifest as little-endian `f64` in manifest order. Loading a saved state
//! reproduces it bit for bit.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EpochEval, StepRecord, TrainState};
use crate::config::RunConfig;
use crate::embedder::{Adam, AdamState, EmbedderPair, Mlp};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, OrthonormalBasis};
use crate::manifold::ProxySet;

const MAGIC: &[u8; 4] = b"PLCK";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct AdamMeta {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
}

impl AdamMeta {
    fn of(a: &Adam) -> Self {
        Self {
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            step: a.steps(),
        }
    }

    fn rebuild(&self, m: Vec<f64>, v: Vec<f64>) -> Result<Adam> {
        let mut a = Adam::from_parts(self.lr, m, v, self.step)?;
        a.beta1 = self.beta1;
        a.beta2 = self.beta2;
        a.eps = self.eps;
        Ok(a)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    epoch: u64,
    step: u64,
    config: RunConfig,
    layer_sizes: Vec<usize>,
    gamma: f64,
    adam_network: AdamMeta,
    adam_proxies: AdamMeta,
    n_proxies: usize,
    proxy_dim: usize,
    proxy_rank: usize,
    history: Vec<StepRecord>,
    evals: Vec<EpochEval>,
    tensors: Vec<TensorEntry>,
}

fn tensors(state: &TrainState) -> Vec<(&'static str, Vec<f64>)> {
    let (nm, nv) = state.adam.network.moments();
    let (pm, pv) = state.adam.proxies.moments();
    let frames: Vec<f64> = state
        .proxies
        .frames()
        .iter()
        .flat_map(|f| f.vectors().as_slice().iter().copied())
        .collect();
    vec![
        ("theta", state.embedder.theta.params().to_vec()),
        ("phi", state.embedder.phi.params().to_vec()),
        ("adam_network_m", nm.to_vec()),
        ("adam_network_v", nv.to_vec()),
        ("adam_proxies_m", pm.to_vec()),
        ("adam_proxies_v", pv.to_vec()),
        ("proxy_locations", state.proxies.locations().as_slice().to_vec()),
        ("proxy_frames", frames),
    ]
}

pub fn encode(state: &TrainState) -> Vec<u8> {
    let ts = tensors(state);
    let manifest = Manifest {
        epoch: state.epoch,
        step: state.step,
        config: state.config.clone(),
        layer_sizes: state.embedder.theta.sizes().to_vec(),
        gamma: state.embedder.gamma,
        adam_network: AdamMeta::of(&state.adam.network),
        adam_proxies: AdamMeta::of(&state.adam.proxies),
        n_proxies: state.proxies.len(),
        proxy_dim: state.proxies.dim(),
        proxy_rank: state.proxies.rank(),
        history: state.history.clone(),
        evals: state.evals.clone(),
        tensors: ts
            .iter()
            .map(|(n, t)| TensorEntry {
                name: n.to_string(),
                len: t.len(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let total: usize = ts.iter().map(|(_, t)| t.len()).sum();
    let mut out = Vec::with_capacity(14 + json.len() + 8 * total);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in &ts {
        for x in t {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Format(format!("checkpoint truncated in {what}")));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

pub fn decode(mut bytes: &[u8]) -> Result<TrainState> {
    let b = &mut bytes;
    if take(b, 4, "magic")? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = u16::from_le_bytes(take(b, 2, "version")?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {version} unsupported (expected {FORMAT_VERSION})"
        )));
    }
    let len = u64::from_le_bytes(take(b, 8, "header")?.try_into().unwrap());
    let len = usize::try_from(len).map_err(|_| Error::Format("manifest too large".into()))?;
    let manifest: Manifest = serde_json::from_slice(take(b, len, "manifest")?)
        .map_err(|e| Error::Format(format!("checkpoint manifest: {e}")))?;

    let mut values = Vec::with_capacity(manifest.tensors.len());
    for t in &manifest.tensors {
        let raw = take(b, t.len * 8, &t.name)?;
        let v: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        values.push((t.name.as_str(), v));
    }
    if !b.is_empty() {
        return Err(Error::Format("trailing bytes after checkpoint tensors".into()));
    }
    let mut get = |name: &str| -> Result<Vec<f64>> {
        let slot = values
            .iter_mut()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor `{name}`")))?;
        Ok(std::mem::take(&mut slot.1))
    };

    let theta = Mlp::from_parts(manifest.layer_sizes.clone(), get("theta")?)?;
    let phi = Mlp::from_parts(manifest.layer_sizes.clone(), get("phi")?)?;
    let adam = AdamState {
        network: manifest
            .adam_network
            .rebuild(get("adam_network_m")?, get("adam_network_v")?)?,
        proxies: manifest
            .adam_proxies
            .rebuild(get("adam_proxies_m")?, get("adam_proxies_v")?)?,
    };
    let (np, d, m) = (manifest.n_proxies, manifest.proxy_dim, manifest.proxy_rank);
    let locations = Matrix::from_vec(np, d, get("proxy_locations")?)?;
    let frames_flat = get("proxy_frames")?;
    if frames_flat.len() != np * m * d {
        return Err(Error::Format("proxy frame tensor has wrong length".into()));
    }
    let frames = frames_flat
        .chunks_exact((m * d).max(1))
        .take(np)
        .map(|c| Matrix::from_vec(m, d, c.to_vec()).map(OrthonormalBasis::new_unchecked))
        .collect::<Result<Vec<_>>>()?;
    let proxies = ProxySet::new(locations, frames)?;

    Ok(TrainState {
        config: manifest.config,
        embedder: EmbedderPair {
            theta,
            phi,
            gamma: manifest.gamma,
        },
        proxies,
        adam,
        epoch: manifest.epoch,
        step: manifest.step,
        history: manifest.history,
        evals: manifest.evals,
    })
}

pub fn save(state: &TrainState, path: &Path) -> Result<()> {
    let bytes = encode(state);
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    f.flush().map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<TrainState> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
