//! Retrieval and supervision-quality metrics, and a k-means pseudo-labeler
//! to compare against.

use std::collections::{BTreeMap, HashMap};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{squared_distance, Matrix};
use crate::manifold::{fit_all_neighborhoods, LinearNeighborhood, ManifoldConfig};
use crate::similarity::{symmetric_similarity, SimilarityConfig};

/// Pairs scored by correlation when the dataset is too large for all of them.
pub const MAX_CORRELATION_PAIRS: usize = 1_000_000;
/// Datasets up to this size use every unordered pair.
pub const ALL_PAIRS_LIMIT: usize = 2000;

fn check_labels(n: usize, labels: &[u32]) -> Result<()> {
    if labels.len() != n {
        return Err(Error::Dimension {
            expected: n,
            got: labels.len(),
        });
    }
    Ok(())
}

/// Percentage of queries with a same-label point among their `K` nearest
/// other points, for each `K` in `ks`.
pub fn recall_at_k(
    embeddings: &Matrix,
    labels: &[u32],
    ks: &[usize],
) -> Result<BTreeMap<usize, f64>> {
    let n = embeddings.rows();
    check_labels(n, labels)?;
    let max_k = ks.iter().copied().max().ok_or(Error::Empty("K list"))?;
    if ks.contains(&0) {
        return Err(Error::Invalid("K must be positive".into()));
    }
    if n < max_k + 1 {
        return Err(Error::Invalid(format!(
            "recall@{max_k} needs at least {} points, got {n}",
            max_k + 1
        )));
    }
    // First rank at which a same-label neighbor appears, per query.
    let mut first_hit = vec![usize::MAX; n];
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(n);
    for (q, hit) in first_hit.iter_mut().enumerate() {
        let x = embeddings.row(q);
        order.clear();
        order.extend(
            (0..n)
                .filter(|&j| j != q)
                .map(|j| (squared_distance(x, embeddings.row(j)), j)),
        );
        let take = max_k.min(order.len());
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if take < order.len() {
            order.select_nth_unstable_by(take - 1, cmp);
            order.truncate(take);
        }
        order.sort_by(cmp);
        if let Some(r) = order.iter().position(|&(_, j)| labels[j] == labels[q]) {
            *hit = r + 1;
        }
    }
    Ok(ks
        .iter()
        .map(|&k| {
            let ok = first_hit.iter().filter(|&&r| r <= k).count();
            (k, 100.0 * ok as f64 / n as f64)
        })
        .collect())
}

/// Fraction of `members` carrying the most common label.
pub fn majority_fraction(members: &[usize], labels: &[u32]) -> Result<f64> {
    if members.is_empty() {
        return Err(Error::Empty("group"));
    }
    let mut counts: HashMap<u32, usize> = HashMap::new();
    for &i in members {
        let l = *labels.get(i).ok_or_else(|| {
            Error::Invalid(format!("member {i} out of range for {} labels", labels.len()))
        })?;
        *counts.entry(l).or_default() += 1;
    }
    let best = counts.values().copied().max().unwrap_or(0);
    Ok(best as f64 / members.len() as f64)
}

/// Unweighted mean of the majority fraction over non-empty groups.
pub fn group_purity(groups: &[Vec<usize>], labels: &[u32]) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for g in groups.iter().filter(|g| !g.is_empty()) {
        sum += majority_fraction(g, labels)?;
        count += 1;
    }
    if count == 0 {
        return Err(Error::Empty("groups"));
    }
    Ok(sum / count as f64)
}

/// Mean over anchors of the majority fraction of each neighborhood.
pub fn neighborhood_purity(neighborhoods: &[LinearNeighborhood], labels: &[u32]) -> Result<f64> {
    let groups: Vec<Vec<usize>> = neighborhoods
        .iter()
        .map(|nb| nb.member_indices.clone())
        .collect();
    group_purity(&groups, labels)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub assignment: Vec<usize>,
    pub centroids: Matrix,
    /// Within-cluster sum of squares after each assignment pass.
    pub sse_history: Vec<f64>,
}

impl KMeansResult {
    /// Binary pseudo-label similarity.
    pub fn similarity(&self, i: usize, j: usize) -> f64 {
        if self.assignment[i] == self.assignment[j] {
            1.0
        } else {
            0.0
        }
    }

    pub fn clusters(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.centroids.rows()];
        for (i, &c) in self.assignment.iter().enumerate() {
            out[c].push(i);
        }
        out
    }
}

pub const KMEANS_MAX_ITER: usize = 100;

fn nearest_centroid(x: &[f64], centroids: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, row) in centroids.iter_rows().enumerate() {
        let d = squared_distance(x, row);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Lloyd's algorithm with k-means++ seeding; stops when assignments stop
/// changing or after [`KMEANS_MAX_ITER`] passes. Empty clusters keep their
/// previous centroid.
pub fn kmeans_baseline(embeddings: &Matrix, n_clusters: usize, seed: u64) -> Result<KMeansResult> {
    let n = embeddings.rows();
    let d = embeddings.cols();
    if n_clusters == 0 {
        return Err(Error::Invalid("n_clusters must be positive".into()));
    }
    if n < n_clusters {
        return Err(Error::Invalid(format!(
            "{n_clusters} clusters requested for {n} points"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut chosen = vec![rng.gen_range(0..n)];
    let mut d2: Vec<f64> = (0..n)
        .map(|i| squared_distance(embeddings.row(i), embeddings.row(chosen[0])))
        .collect();
    while chosen.len() < n_clusters {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if w > 0.0 && acc >= target {
                    pick = Some(i);
                    break;
                }
            }
            pick.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).unwrap())
        } else {
            // All remaining points coincide with a centroid.
            (0..n).find(|i| !chosen.contains(i)).unwrap()
        };
        chosen.push(next);
        for (i, w) in d2.iter_mut().enumerate() {
            *w = w.min(squared_distance(embeddings.row(i), embeddings.row(next)));
        }
    }
    let mut centroids = embeddings.select_rows(&chosen);

    let mut assignment = vec![usize::MAX; n];
    let mut sse_history = Vec::new();
    for _ in 0..KMEANS_MAX_ITER {
        let mut changed = false;
        let mut sse = 0.0;
        for (i, a) in assignment.iter_mut().enumerate() {
            let (c, dist) = nearest_centroid(embeddings.row(i), &centroids);
            sse += dist;
            if *a != c {
                *a = c;
                changed = true;
            }
        }
        if let Some(&prev) = sse_history.last() {
            assert!(
                sse <= prev * (1.0 + 1e-12) + 1e-300,
                "k-means objective increased: {prev} -> {sse}"
            );
        }
        sse_history.push(sse);
        if !changed {
            break;
        }
        let mut sums = Matrix::zeros(n_clusters, d);
        let mut counts = vec![0usize; n_clusters];
        for (i, &c) in assignment.iter().enumerate() {
            counts[c] += 1;
            for (s, x) in sums.row_mut(c).iter_mut().zip(embeddings.row(i)) {
                *s += x;
            }
        }
        for c in 0..n_clusters {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for (dst, s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s * inv;
                }
            }
        }
    }
    Ok(KMeansResult {
        assignment,
        centroids,
        sse_history,
    })
}

/// Pearson correlation between `similarities` and the 0/1 same-class
/// indicator `same`.
pub fn similarity_correlation(similarities: &[f64], same: &[bool]) -> Result<f64> {
    if similarities.len() != same.len() {
        return Err(Error::Dimension {
            expected: similarities.len(),
            got: same.len(),
        });
    }
    if similarities.len() < 2 {
        return Err(Error::UndefinedCorrelation("fewer than two pairs"));
    }
    let n = similarities.len() as f64;
    let mx = similarities.iter().sum::<f64>() / n;
    let my = same.iter().filter(|&&b| b).count() as f64 / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&x, &b) in similarities.iter().zip(same) {
        let dx = x - mx;
        let dy = if b { 1.0 } else { 0.0 } - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if syy == 0.0 {
        return Err(Error::UndefinedCorrelation(
            "ground truth has a single class over the pairs",
        ));
    }
    if sxx == 0.0 {
        return Err(Error::UndefinedCorrelation("similarities are constant"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Unordered pairs `i < j` to score: all of them for small `n`, otherwise
/// a seeded uniform sample of [`MAX_CORRELATION_PAIRS`] distinct pairs.
pub fn correlation_pairs(n: usize, seed: u64) -> Vec<(usize, usize)> {
    if n <= ALL_PAIRS_LIMIT {
        let mut out = Vec::with_capacity(n * n.saturating_sub(1) / 2);
        for i in 0..n {
            for j in i + 1..n {
                out.push((i, j));
            }
        }
        return out;
    }
    let total = n * (n - 1) / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = sample(&mut rng, total, MAX_CORRELATION_PAIRS.min(total)).into_vec();
    picks.sort_unstable();
    picks.into_iter().map(|t| unrank_pair(n, t)).collect()
}

/// Inverse of the row-major enumeration of pairs `i < j`.
fn unrank_pair(n: usize, mut t: usize) -> (usize, usize) {
    let mut i = 0;
    loop {
        let row = n - 1 - i;
        if t < row {
            return (i, i + 1 + t);
        }
        t -= row;
        i += 1;
    }
}

/// Label purity and ground-truth correlation of two pseudo-supervision
/// sources on the same embeddings: fitted neighborhoods with their
/// continuous similarity, and k-means clusters with binary similarity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SupervisionReport {
    pub neighborhood_purity: f64,
    pub kmeans_purity: f64,
    pub similarity_correlation: f64,
    pub kmeans_correlation: f64,
}

#[derive(Debug, Clone)]
pub struct DiagnoseConfig<'a> {
    pub manifold: &'a ManifoldConfig,
    pub similarity: &'a SimilarityConfig,
    pub n_clusters: usize,
    pub kmeans_seed: u64,
    pub pair_seed: u64,
    pub threads: usize,
}

pub fn diagnose(embeddings: &Matrix, labels: &[u32], cfg: &DiagnoseConfig<'_>) -> Result<SupervisionReport> {
    let n = embeddings.rows();
    check_labels(n, labels)?;
    let neighborhoods = fit_all_neighborhoods(embeddings, cfg.manifold, cfg.threads)?;
    let km = kmeans_baseline(embeddings, cfg.n_clusters, cfg.kmeans_seed)?;
    let pairs = correlation_pairs(n, cfg.pair_seed);
    let mut ours = Vec::with_capacity(pairs.len());
    let mut theirs = Vec::with_capacity(pairs.len());
    let mut same = Vec::with_capacity(pairs.len());
    for &(i, j) in &pairs {
        ours.push(symmetric_similarity(i, j, &neighborhoods, embeddings, cfg.similarity)?);
        theirs.push(km.similarity(i, j));
        same.push(labels[i] == labels[j]);
    }
    Ok(SupervisionReport {
        neighborhood_purity: neighborhood_purity(&neighborhoods, labels)?,
        kmeans_purity: group_purity(&km.clusters(), labels)?,
        similarity_correlation: similarity_correlation(&ours, &same)?,
        kmeans_correlation: similarity_correlation(&theirs, &same)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub recall_at: BTreeMap<usize, f64>,
    pub supervision: Option<SupervisionReport>,
}

impl EvalReport {
    /// Flat `key=value` record, one field per line.
    pub fn to_record(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.recall_at {
            out.push_str(&format!("recall@{k}={v}\n"));
        }
        if let Some(s) = &self.supervision {
            out.push_str(&format!("neighborhood_purity={}\n", s.neighborhood_purity));
            out.push_str(&format!("kmeans_purity={}\n", s.kmeans_purity));
            out.push_str(&format!("similarity_correlation={}\n", s.similarity_correlation));
            out.push_str(&format!("kmeans_correlation={}\n", s.kmeans_correlation));
        }
        out
    }
}
