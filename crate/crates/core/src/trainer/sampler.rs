//! Nearest-neighbor batch sampling over momentum embeddings.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{squared_distance, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub batch_size: usize,
    /// Seeds per batch; each seed brings `batch_size / n_seeds - 1` neighbors.
    pub n_seeds: usize,
    /// Scale of the Gaussian feature noise used to make two views per
    /// sample; 0 disables augmentation.
    pub augment_sigma: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            batch_size: 100,
            n_seeds: 10,
            augment_sigma: 0.0,
        }
    }
}

impl SamplerConfig {
    /// Group size: a seed plus its `k - 1` nearest neighbors.
    pub fn k(&self) -> usize {
        self.batch_size / self.n_seeds.max(1)
    }

    pub fn validate(&self, m: usize) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if self.n_seeds == 0 || self.batch_size % self.n_seeds != 0 {
            return Err(Error::config(
                "n_seeds",
                format!("must divide batch_size {}", self.batch_size),
            ));
        }
        // k = 1 is plain uniform sampling; otherwise groups must hold an m-patch
        if self.k() > 1 && self.k() < m {
            return Err(Error::config(
                "n_seeds",
                format!("group size {} is smaller than m={m}", self.k()),
            ));
        }
        if !(self.augment_sigma >= 0.0 && self.augment_sigma.is_finite()) {
            return Err(Error::config("augment_sigma", "must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Brute-force k-nearest-neighbor lists for every row.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborIndex {
    neighbors: Vec<Vec<usize>>,
}

impl NeighborIndex {
    /// The `k` nearest other rows of every row, closest first, ties by index.
    pub fn build(embeddings: &Matrix, k: usize) -> Self {
        let n = embeddings.rows();
        let neighbors = (0..n)
            .map(|i| {
                let a = embeddings.row(i);
                let mut d: Vec<(f64, usize)> = (0..n)
                    .filter(|&j| j != i)
                    .map(|j| (squared_distance(a, embeddings.row(j)), j))
                    .collect();
                let k = k.min(d.len());
                if k < d.len() {
                    d.select_nth_unstable_by(k, |x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
                    d.truncate(k);
                }
                d.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
                d.into_iter().map(|(_, j)| j).collect()
            })
            .collect();
        Self { neighbors }
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }
}

/// Draws `n_seeds` distinct seeds uniformly and appends each seed's `k - 1`
/// nearest neighbors after it. Samples may repeat across groups.
pub fn sample_batch(
    index: &NeighborIndex,
    cfg: &SamplerConfig,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    let n = index.len();
    if n < cfg.batch_size {
        return Err(Error::Invalid(format!(
            "dataset of {n} samples is smaller than batch size {}",
            cfg.batch_size
        )));
    }
    let k = cfg.k();
    let seeds = index::sample(rng, n, cfg.n_seeds);
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for s in seeds.iter() {
        let nbrs = index.neighbors(s);
        if nbrs.len() + 1 < k {
            return Err(Error::Invalid(format!(
                "neighbor index holds {} neighbors, need {}",
                nbrs.len(),
                k - 1
            )));
        }
        batch.push(s);
        batch.extend_from_slice(&nbrs[..k - 1]);
    }
    Ok(batch)
}
