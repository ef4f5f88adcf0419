//! Piecewise-linear approximation of the embedding manifold.
//!
//! Every anchor point gets a [`LinearNeighborhood`]: an `m`-dimensional
//! affine patch fitted by PCA to the subset of its nearest neighbors that
//! the patch reconstructs well. Learnable proxies ([`ProxySet`]) carry the
//! same kind of `m`-frame so they can stand in for patches outside the batch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    distance, norm, pca_top_m, reorthonormalize, squared_distance, sub, Matrix, OrthonormalBasis,
    PcaFit,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ManifoldConfig {
    /// Patch dimension.
    pub m: usize,
    /// Reconstruction quality threshold, in percent.
    pub threshold: f64,
    /// Neighbor pool scanned per anchor.
    pub k: usize,
    /// Accept every pooled neighbor without the quality test.
    pub ablation_knn_only: bool,
}

impl Default for ManifoldConfig {
    fn default() -> Self {
        Self {
            m: 3,
            threshold: 90.0,
            k: 10,
            ablation_knn_only: false,
        }
    }
}

impl ManifoldConfig {
    /// Checks the config against embedding dimension `d`.
    pub fn validate(&self, d: usize) -> Result<()> {
        if self.m < 2 || self.m >= d {
            return Err(Error::config(
                "m",
                format!("need 2 <= m < d, got m={} d={d}", self.m),
            ));
        }
        if !(self.threshold > 0.0 && self.threshold <= 100.0) {
            return Err(Error::config("threshold", "must lie in (0, 100]"));
        }
        if self.k < self.m {
            return Err(Error::config(
                "k",
                format!("pool size {} is smaller than m={}", self.k, self.m),
            ));
        }
        Ok(())
    }
}

/// Affine `m`-patch fitted around one anchor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearNeighborhood {
    pub anchor_index: usize,
    /// Accepted points in scan order; the anchor comes first.
    pub member_indices: Vec<usize>,
    pub basis: OrthonormalBasis,
    pub centroid: Vec<f64>,
    /// Largest member distance from the anchor.
    pub radius: f64,
}

impl LinearNeighborhood {
    /// Reconstruction quality of `x` under this patch.
    pub fn quality(&self, x: &[f64]) -> f64 {
        reconstruction_quality(x, &self.basis, &self.centroid)
    }

    pub fn contains(&self, index: usize) -> bool {
        self.member_indices.contains(&index)
    }
}

/// `1 - |x - proj(x)| / |x - centroid|`; points at the centroid score 1.
pub fn reconstruction_quality(x: &[f64], basis: &OrthonormalBasis, centroid: &[f64]) -> f64 {
    let c = sub(x, centroid);
    let spread = norm(&c);
    if spread <= 1e-12 * (1.0 + norm(centroid)) {
        return 1.0;
    }
    let residual = distance(&c, &basis.project(&c));
    1.0 - residual / spread
}

fn all_pass(points: &Matrix, fit: &PcaFit, min_quality: f64) -> bool {
    points
        .iter_rows()
        .all(|x| reconstruction_quality(x, &fit.basis, &fit.centroid) >= min_quality)
}

/// Grows the patch around `anchor` by scanning `neighbor_order` once.
///
/// The seed set is the anchor plus its `m - 1` nearest neighbors, which any
/// `m`-patch fits exactly. Each later candidate is tentatively added, PCA is
/// refitted, and the candidate is kept only if every point of the enlarged
/// set still has quality `>= threshold / 100`. Rejected candidates are never
/// retried. Only the first `cfg.k` entries of `neighbor_order` are scanned.
pub fn fit_neighborhood(
    embeddings: &Matrix,
    anchor: usize,
    neighbor_order: &[usize],
    cfg: &ManifoldConfig,
) -> Result<LinearNeighborhood> {
    if cfg.k < cfg.m {
        return Err(Error::config(
            "k",
            format!("pool size {} is smaller than m={}", cfg.k, cfg.m),
        ));
    }
    if cfg.m > embeddings.cols() {
        return Err(Error::Dimension {
            expected: embeddings.cols(),
            got: cfg.m,
        });
    }
    if neighbor_order.len() + 1 < cfg.m {
        return Err(Error::Invalid(format!(
            "anchor {anchor} has {} neighbors, need at least {}",
            neighbor_order.len(),
            cfg.m - 1
        )));
    }
    let pool = &neighbor_order[..neighbor_order.len().min(cfg.k)];

    let mut members = Vec::with_capacity(pool.len() + 1);
    members.push(anchor);
    if cfg.ablation_knn_only {
        members.extend_from_slice(pool);
    } else {
        let seed = cfg.m - 1;
        members.extend_from_slice(&pool[..seed]);
        let min_quality = cfg.threshold / 100.0;
        for &cand in &pool[seed..] {
            members.push(cand);
            let pts = embeddings.select_rows(&members);
            let fit = pca_top_m(&pts, cfg.m)?;
            if !all_pass(&pts, &fit, min_quality) {
                members.pop();
            }
        }
    }

    let fit = pca_top_m(&embeddings.select_rows(&members), cfg.m)?;
    let a = embeddings.row(anchor);
    let radius = members
        .iter()
        .map(|&i| distance(a, embeddings.row(i)))
        .fold(0.0, f64::max);
    Ok(LinearNeighborhood {
        anchor_index: anchor,
        member_indices: members,
        basis: fit.basis,
        centroid: fit.centroid,
        radius,
    })
}

/// Indices of all other rows sorted by distance to row `anchor`
/// (ties broken by index).
pub fn neighbor_order(embeddings: &Matrix, anchor: usize) -> Vec<usize> {
    let a = embeddings.row(anchor);
    let mut order: Vec<(f64, usize)> = (0..embeddings.rows())
        .filter(|&j| j != anchor)
        .map(|j| (squared_distance(a, embeddings.row(j)), j))
        .collect();
    order.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
    order.into_iter().map(|(_, j)| j).collect()
}

/// Fits a neighborhood for every row of `embeddings` using its in-set
/// nearest neighbors as the pool. Work is split across `threads` scoped
/// threads; anchors are independent so the result does not depend on the
/// thread count.
pub fn fit_all_neighborhoods(
    embeddings: &Matrix,
    cfg: &ManifoldConfig,
    threads: usize,
) -> Result<Vec<LinearNeighborhood>> {
    let n = embeddings.rows();
    let fit_one = |i: usize| {
        let mut order = neighbor_order(embeddings, i);
        order.truncate(cfg.k);
        fit_neighborhood(embeddings, i, &order, cfg)
    };
    let threads = threads.clamp(1, n.max(1));
    if threads == 1 {
        return (0..n).map(fit_one).collect();
    }
    let chunk = n.div_ceil(threads);
    let results: Vec<Result<Vec<LinearNeighborhood>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                let fit_one = &fit_one;
                s.spawn(move || {
                    (t * chunk..((t + 1) * chunk).min(n))
                        .map(fit_one)
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("neighborhood worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(n);
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

/// Learnable proxies: unit-norm locations, each with an orthonormal `m`-frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxySet {
    locations: Matrix,
    frames: Vec<OrthonormalBasis>,
}

impl ProxySet {
    pub fn new(locations: Matrix, frames: Vec<OrthonormalBasis>) -> Result<Self> {
        if frames.len() != locations.rows() {
            return Err(Error::Dimension {
                expected: locations.rows(),
                got: frames.len(),
            });
        }
        let rank = frames.first().map_or(0, |f| f.rank());
        for f in &frames {
            if f.ambient_dim() != locations.cols() {
                return Err(Error::Dimension {
                    expected: locations.cols(),
                    got: f.ambient_dim(),
                });
            }
            if f.rank() != rank {
                return Err(Error::Dimension {
                    expected: rank,
                    got: f.rank(),
                });
            }
        }
        Ok(Self { locations, frames })
    }

    pub fn len(&self) -> usize {
        self.locations.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.locations.cols()
    }

    pub fn rank(&self) -> usize {
        self.frames.first().map_or(0, |f| f.rank())
    }

    pub fn locations(&self) -> &Matrix {
        &self.locations
    }

    pub fn location(&self, j: usize) -> &[f64] {
        self.locations.row(j)
    }

    pub fn frames(&self) -> &[OrthonormalBasis] {
        &self.frames
    }

    pub fn frame(&self, j: usize) -> &OrthonormalBasis {
        &self.frames[j]
    }

    /// Number of scalars in the flat parameter view.
    pub fn param_len(&self) -> usize {
        self.len() * self.dim() * (1 + self.rank())
    }

    /// Locations followed by every frame, row-major.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_len());
        out.extend_from_slice(self.locations.as_slice());
        for f in &self.frames {
            out.extend_from_slice(f.vectors().as_slice());
        }
        out
    }

    /// Overwrites the parameters from a flat view, without restoring the
    /// invariants (see [`ProxySet::project_to_constraints`]).
    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_len() {
            return Err(Error::Dimension {
                expected: self.param_len(),
                got: flat.len(),
            });
        }
        let (loc, rest) = flat.split_at(self.locations.as_slice().len());
        self.locations.as_mut_slice().copy_from_slice(loc);
        let (m, d) = (self.rank(), self.dim());
        for (f, chunk) in self.frames.iter_mut().zip(rest.chunks_exact(m * d)) {
            *f = OrthonormalBasis::new_unchecked(Matrix::from_vec(m, d, chunk.to_vec())?);
        }
        Ok(())
    }

    /// Puts every location back on the unit sphere and re-orthonormalizes
    /// every frame. Returns the number of frame rows that had collapsed and
    /// were replaced by an axis completion.
    pub fn project_to_constraints(&mut self) -> Result<usize> {
        let mut replaced = 0;
        for j in 0..self.len() {
            let row = self.locations.row_mut(j);
            let n = norm(row);
            if !(n.is_finite() && n > 0.0) {
                return Err(Error::NonFinite(format!("proxy {j} location norm {n}")));
            }
            row.iter_mut().for_each(|x| *x /= n);
        }
        for f in &mut self.frames {
            let r = reorthonormalize(f.vectors())?;
            replaced += r.replaced.len();
            *f = r.basis;
        }
        Ok(replaced)
    }

    pub fn check(&self) -> Result<()> {
        for j in 0..self.len() {
            let n = norm(self.location(j));
            if (n - 1.0).abs() > 1e-6 {
                return Err(Error::Invalid(format!("proxy {j} has norm {n}")));
            }
        }
        self.frames.iter().try_for_each(|f| f.check())
    }
}

/// Farthest-point sampling of `count` distinct rows from a seeded random start.
/// Ties go to the lowest index.
pub fn farthest_point_indices(embeddings: &Matrix, count: usize, seed: u64) -> Result<Vec<usize>> {
    let n = embeddings.rows();
    if count > n {
        return Err(Error::Invalid(format!(
            "cannot pick {count} proxies from {n} samples"
        )));
    }
    if count == 0 {
        return Ok(Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = rng.gen_range(0..n);
    let mut chosen = vec![start];
    let mut taken = vec![false; n];
    taken[start] = true;
    let mut min_d: Vec<f64> = (0..n)
        .map(|i| squared_distance(embeddings.row(i), embeddings.row(start)))
        .collect();
    while chosen.len() < count {
        let mut best = usize::MAX;
        for i in 0..n {
            if !taken[i] && (best == usize::MAX || min_d[i] > min_d[best]) {
                best = i;
            }
        }
        taken[best] = true;
        chosen.push(best);
        let b = embeddings.row(best);
        for i in 0..n {
            let d = squared_distance(embeddings.row(i), b);
            if d < min_d[i] {
                min_d[i] = d;
            }
        }
    }
    Ok(chosen)
}

/// Seeds proxies at farthest-point-sampled samples: each proxy takes the
/// sample's (renormalized) embedding and the basis of its neighborhood.
/// `neighborhoods` must hold one entry per row, indexed by anchor.
pub fn init_proxies(
    embeddings: &Matrix,
    neighborhoods: &[LinearNeighborhood],
    n_proxies: usize,
    seed: u64,
) -> Result<ProxySet> {
    if neighborhoods.len() != embeddings.rows() {
        return Err(Error::Dimension {
            expected: embeddings.rows(),
            got: neighborhoods.len(),
        });
    }
    init_proxies_with(embeddings, n_proxies, seed, |i| Ok(neighborhoods[i].clone()))
}

/// Like [`init_proxies`], fitting neighborhoods lazily for the chosen samples only.
pub fn init_proxies_with(
    embeddings: &Matrix,
    n_proxies: usize,
    seed: u64,
    mut neighborhood_of: impl FnMut(usize) -> Result<LinearNeighborhood>,
) -> Result<ProxySet> {
    let idx = farthest_point_indices(embeddings, n_proxies, seed)?;
    let d = embeddings.cols();
    let mut locations = Matrix::zeros(idx.len(), d);
    let mut frames = Vec::with_capacity(idx.len());
    for (j, &i) in idx.iter().enumerate() {
        let x = embeddings.row(i);
        let nx = norm(x);
        let row = locations.row_mut(j);
        if nx > 0.0 {
            row.iter_mut().zip(x).for_each(|(r, v)| *r = v / nx);
        } else {
            row[0] = 1.0;
        }
        let nb = neighborhood_of(i)?;
        if nb.anchor_index != i {
            return Err(Error::Invalid(format!(
                "neighborhood for sample {i} is anchored at {}",
                nb.anchor_index
            )));
        }
        frames.push(nb.basis);
    }
    ProxySet::new(locations, frames)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(m: usize, k: usize) -> ManifoldConfig {
        ManifoldConfig {
            m,
            threshold: 90.0,
            k,
            ablation_knn_only: false,
        }
    }

    #[test]
    fn coincident_points_all_accepted() {
        let e = Matrix::from_rows(&[[0.6, 0.8, 0.0]; 5]).unwrap();
        let nb = fit_neighborhood(&e, 0, &[1, 2, 3, 4], &cfg(2, 4)).unwrap();
        assert_eq!(nb.member_indices, vec![0, 1, 2, 3, 4]);
        for i in 0..5 {
            assert_eq!(nb.quality(e.row(i)), 1.0);
        }
    }

    #[test]
    fn knn_only_ablation_takes_whole_pool() {
        let e = Matrix::from_rows(&[
            [0.0, 0.0, 0.0],
            [0.1, 0.0, 0.0],
            [0.0, 0.1, 0.0],
            [0.0, 0.0, 0.5],
            [0.2, 0.2, 0.0],
        ])
        .unwrap();
        let mut c = cfg(2, 4);
        let plain = fit_neighborhood(&e, 0, &[1, 2, 4, 3], &c).unwrap();
        assert!(!plain.contains(3));
        c.ablation_knn_only = true;
        let all = fit_neighborhood(&e, 0, &[1, 2, 4, 3], &c).unwrap();
        assert_eq!(all.member_indices, vec![0, 1, 2, 4, 3]);
    }

    #[test]
    fn pool_smaller_than_m_is_config_error() {
        let e = Matrix::from_rows(&[[0.0, 0.0, 1.0]; 4]).unwrap();
        assert!(matches!(
            fit_neighborhood(&e, 0, &[1, 2, 3], &cfg(3, 2)),
            Err(Error::Config { field: "k", .. })
        ));
    }

    #[test]
    fn validate_bounds() {
        assert!(cfg(3, 10).validate(32).is_ok());
        assert!(cfg(1, 10).validate(32).is_err());
        assert!(cfg(32, 40).validate(32).is_err());
        let mut c = cfg(3, 10);
        c.threshold = 0.0;
        assert!(c.validate(32).is_err());
    }

    #[test]
    fn farthest_point_single_and_exhaustive() {
        let e = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]]).unwrap();
        let one = farthest_point_indices(&e, 1, 7).unwrap();
        let all = farthest_point_indices(&e, 4, 7).unwrap();
        assert_eq!(all[0], one[0]);
        let mut sorted = all.clone();
        sorted.sort();
        assert_eq!(sorted, vec![0, 1, 2, 3]);
        assert_eq!(all, farthest_point_indices(&e, 4, 7).unwrap());
        assert!(farthest_point_indices(&e, 5, 7).is_err());
    }

    #[test]
    fn proxy_flat_view_round_trip_and_projection() {
        let e = Matrix::from_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        let nbs = fit_all_neighborhoods(&e, &cfg(2, 2), 1).unwrap();
        let mut p = init_proxies(&e, &nbs, 2, 0).unwrap();
        p.check().unwrap();
        let mut flat = p.to_flat();
        let before = p.clone();
        p.set_flat(&flat).unwrap();
        assert_eq!(p, before);
        flat.iter_mut().for_each(|x| *x *= 3.0);
        p.set_flat(&flat).unwrap();
        assert!(p.check().is_err());
        p.project_to_constraints().unwrap();
        p.check().unwrap();
    }
}
