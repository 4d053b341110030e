//! Intrinsic node features.
//!
//! Every node gets a pseudo-embedding derived from its name: a Gaussian
//! vector drawn from an RNG keyed by `sha256(seed ‖ name)`, scaled to unit
//! length. Equal names give equal vectors; unrelated names are close to
//! orthogonal. Real embeddings can be supplied per name instead.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::{MonitorEntityGraph, NodeType};
use crate::error::{Error, Result};

/// Row-major feature table with one row per node in global order.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    dim: usize,
    data: Vec<f64>,
}

impl Features {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(Error::Graph(format!(
                "feature buffer of {} values is not a multiple of width {dim}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Graph("non-finite feature value".into()));
        }
        Ok(Self { dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Unit-norm pseudo-embedding of `name`.
pub fn pseudo_embedding(name: &str, dim: usize, seed: u64) -> Result<Vec<f64>> {
    if name.is_empty() {
        return Err(Error::Graph("cannot embed an empty name".into()));
    }
    if dim == 0 {
        return Err(Error::InvalidArgument("feature width must be positive".into()));
    }
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let key: [u8; 32] = h.finalize().into();
    let mut rng = ChaCha8Rng::from_seed(key);
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(v)
}

/// Pseudo-embeddings for every node of `g`, in global order. Names found in
/// `external` take the supplied vector instead (it must have width `dim`).
pub fn init_node_features(
    g: &MonitorEntityGraph,
    dim: usize,
    seed: u64,
    external: Option<&HashMap<String, Vec<f64>>>,
) -> Result<Features> {
    let mut data = Vec::with_capacity(g.num_nodes() * dim);
    for ty in NodeType::ALL {
        for name in &g.nodes().names[ty.slot()] {
            match external.and_then(|m| m.get(name)) {
                Some(v) if v.len() == dim => data.extend_from_slice(v),
                Some(v) => {
                    return Err(Error::Graph(format!(
                        "external embedding for {name:?} has width {}, expected {dim}",
                        v.len()
                    )))
                }
                None => data.extend(pseudo_embedding(name, dim, seed)?),
            }
        }
    }
    Features::new(dim, data)
}

/// Reads a JSON object `{name: [floats]}` of externally computed embeddings.
pub fn load_external_embeddings(path: &std::path::Path) -> Result<HashMap<String, Vec<f64>>> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}
