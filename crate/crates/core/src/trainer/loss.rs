//! The three squared-error loss terms and their analytic gradients.
//!
//! All terms are means over their pairs (or triples). Point–point
//! similarities are constants. Proxy–point similarities carry gradients with
//! respect to proxy locations and frames, which flow into the proxy and
//! neighborhood terms unless `stopgrad_similarity_for_proxies` is set.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, norm, Matrix};
use crate::manifold::{LinearNeighborhood, ProxySet};
use crate::similarity::{proxy_point_with_grad, SimilarityConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Distance assigned to a fully dissimilar pair.
    pub delta: f64,
    pub weight_point: f64,
    pub weight_proxy: f64,
    pub weight_neighborhood: f64,
    /// Treat proxy–point similarities as constants.
    pub stopgrad_similarity_for_proxies: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            delta: 2.0,
            weight_point: 1.0,
            weight_proxy: 1.0,
            weight_neighborhood: 1.0,
            stopgrad_similarity_for_proxies: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::config("delta", "must be finite and > 0"));
        }
        for (name, w) in [
            ("weight_point", self.weight_point),
            ("weight_proxy", self.weight_proxy),
            ("weight_neighborhood", self.weight_neighborhood),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::config(name, "must be finite and >= 0"));
            }
        }
        Ok(())
    }
}

/// Proxy–point similarities for a batch, with per-pair gradients with
/// respect to the proxy parameters.
#[derive(Debug, Clone)]
pub struct ProxySimilarities {
    values: Matrix,
    /// `[i][j]` → d-vector, flattened
    d_location: Vec<f64>,
    /// `[i][j]` → m×d frame gradient, flattened
    d_frame: Vec<f64>,
    dim: usize,
    rank: usize,
}

impl ProxySimilarities {
    /// `embeddings` are momentum embeddings of the batch and
    /// `neighborhoods[i]` the patch of row `i`.
    pub fn compute(
        embeddings: &Matrix,
        neighborhoods: &[LinearNeighborhood],
        proxies: &ProxySet,
        cfg: &SimilarityConfig,
    ) -> Result<Self> {
        let (b, np, d, m) = (embeddings.rows(), proxies.len(), proxies.dim(), proxies.rank());
        if neighborhoods.len() != b {
            return Err(Error::Dimension {
                expected: b,
                got: neighborhoods.len(),
            });
        }
        if embeddings.cols() != d {
            return Err(Error::Dimension {
                expected: d,
                got: embeddings.cols(),
            });
        }
        let mut values = Matrix::zeros(b, np);
        let mut d_location = Vec::with_capacity(b * np * d);
        let mut d_frame = Vec::with_capacity(b * np * m * d);
        for i in 0..b {
            for j in 0..np {
                let g = proxy_point_with_grad(
                    embeddings.row(i),
                    proxies.location(j),
                    proxies.frame(j).vectors(),
                    &neighborhoods[i],
                    cfg,
                );
                values[(i, j)] = g.value;
                d_location.extend_from_slice(&g.d_location);
                d_frame.extend_from_slice(g.d_frame.as_slice());
            }
        }
        Ok(Self {
            values,
            d_location,
            d_frame,
            dim: d,
            rank: m,
        })
    }

    /// Constant similarities (no gradient information).
    pub fn constant(values: Matrix, rank: usize) -> Self {
        Self {
            values,
            d_location: Vec::new(),
            d_frame: Vec::new(),
            dim: 0,
            rank,
        }
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    fn has_grad(&self) -> bool {
        self.dim > 0
    }

    /// Accumulates `coef * ∂s_ij/∂(ρ_j, Ψ_j)` into a flat proxy gradient.
    fn backprop(&self, i: usize, j: usize, coef: f64, n_proxies: usize, out: &mut [f64]) {
        if !self.has_grad() || coef == 0.0 {
            return;
        }
        let (d, m) = (self.dim, self.rank);
        let pair = i * self.values.cols() + j;
        axpy(
            coef,
            &self.d_location[pair * d..(pair + 1) * d],
            &mut out[j * d..(j + 1) * d],
        );
        let frames = n_proxies * d;
        axpy(
            coef,
            &self.d_frame[pair * m * d..(pair + 1) * m * d],
            &mut out[frames + j * m * d..frames + (j + 1) * m * d],
        );
    }
}

/// Mean over ordered pairs `i != j` of `(δ(1 - s_ij) - |z_i - z_j|)²`.
/// Returns the loss and its gradient with respect to `z`.
pub fn point_loss(z: &Matrix, s: &Matrix, cfg: &LossConfig) -> (f64, Matrix) {
    let b = z.rows();
    let mut grad = Matrix::zeros(b, z.cols());
    if b < 2 {
        return (0.0, grad);
    }
    let count = (b * (b - 1)) as f64;
    let mut total = 0.0;
    let mut diff = vec![0.0; z.cols()];
    for i in 0..b {
        for j in 0..b {
            if i == j {
                continue;
            }
            diff.iter_mut()
                .zip(z.row(i).iter().zip(z.row(j)))
                .for_each(|(d, (a, c))| *d = a - c);
            let dist = norm(&diff);
            let e = cfg.delta * (1.0 - s[(i, j)]) - dist;
            total += e * e;
            if dist > 0.0 {
                // ∂e²/∂z_i = -2e (z_i - z_j)/|z_i - z_j|
                let c = -2.0 * e / (dist * count);
                axpy(c, &diff, grad.row_mut(i));
                axpy(-c, &diff, grad.row_mut(j));
            }
        }
    }
    (total / count, grad)
}

/// Mean over `(i, j)` of `(δ(1 - s(x_i, ρ_j)) - |z_i - ρ_j|)²`.
/// Returns the loss, the gradient with respect to `z`, and the flat proxy
/// gradient (layout of [`ProxySet::to_flat`]).
pub fn proxy_loss(
    z: &Matrix,
    proxies: &ProxySet,
    sim: &ProxySimilarities,
    cfg: &LossConfig,
) -> (f64, Matrix, Vec<f64>) {
    let (b, np) = (z.rows(), proxies.len());
    let mut grad_z = Matrix::zeros(b, z.cols());
    let mut grad_p = vec![0.0; proxies.param_len()];
    if b == 0 || np == 0 {
        return (0.0, grad_z, grad_p);
    }
    let count = (b * np) as f64;
    let d = proxies.dim();
    let mut total = 0.0;
    let mut diff = vec![0.0; d];
    for i in 0..b {
        for j in 0..np {
            let rho = proxies.location(j);
            diff.iter_mut()
                .zip(z.row(i).iter().zip(rho))
                .for_each(|(o, (a, c))| *o = a - c);
            let dist = norm(&diff);
            let e = cfg.delta * (1.0 - sim.values[(i, j)]) - dist;
            total += e * e;
            if dist > 0.0 {
                let c = -2.0 * e / (dist * count);
                axpy(c, &diff, grad_z.row_mut(i));
                axpy(-c, &diff, &mut grad_p[j * d..(j + 1) * d]);
            }
            if !cfg.stopgrad_similarity_for_proxies {
                sim.backprop(i, j, -2.0 * e * cfg.delta / count, np, &mut grad_p);
            }
        }
    }
    (total / count, grad_z, grad_p)
}

/// Cosine of the angle between `psi` and the span of `basis`, with its
/// gradient with respect to `psi`.
fn cos_to_subspace(psi: &[f64], basis: &Matrix) -> (f64, Vec<f64>) {
    let coords: Vec<f64> = basis.iter_rows().map(|u| dot(u, psi)).collect();
    let a = norm(&coords);
    let n = norm(psi);
    let mut grad = vec![0.0; psi.len()];
    if n == 0.0 {
        return (0.0, grad);
    }
    let c = a / n;
    if a > 0.0 {
        for (u, ck) in basis.iter_rows().zip(&coords) {
            axpy(ck / (a * n), u, &mut grad);
        }
    }
    axpy(-a / (n * n * n), psi, &mut grad);
    (c, grad)
}

/// Mean over `(i, j, k)` of `(s(x_i, ρ_j) - cos θ_kji)²`, where `θ_kji` is
/// the angle between frame vector `ψ_kj` and the patch of batch row `i`.
/// Returns the loss and the flat proxy gradient.
pub fn neighborhood_loss(
    neighborhoods: &[LinearNeighborhood],
    proxies: &ProxySet,
    sim: &ProxySimilarities,
    cfg: &LossConfig,
) -> (f64, Vec<f64>) {
    let (b, np, m, d) = (
        neighborhoods.len(),
        proxies.len(),
        proxies.rank(),
        proxies.dim(),
    );
    let mut grad_p = vec![0.0; proxies.param_len()];
    if b == 0 || np == 0 || m == 0 {
        return (0.0, grad_p);
    }
    let count = (b * np * m) as f64;
    let frames = np * d;
    let mut total = 0.0;
    for (i, nb) in neighborhoods.iter().enumerate() {
        let basis = nb.basis.vectors();
        for j in 0..np {
            let s = sim.values[(i, j)];
            let mut ds = 0.0;
            for k in 0..m {
                let psi = proxies.frame(j).vector(k);
                let (c, dc) = cos_to_subspace(psi, basis);
                let f = s - c;
                total += f * f;
                ds += 2.0 * f / count;
                let off = frames + (j * m + k) * d;
                axpy(-2.0 * f / count, &dc, &mut grad_p[off..off + d]);
            }
            if !cfg.stopgrad_similarity_for_proxies {
                sim.backprop(i, j, ds, np, &mut grad_p);
            }
        }
    }
    (total / count, grad_p)
}

/// Per-step loss values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub point: f64,
    pub proxy: f64,
    pub neighborhood: f64,
    /// Weighted sum of the three terms.
    pub total: f64,
}

/// Gradients routed to the two parameter groups.
#[derive(Debug, Clone)]
pub struct RoutedGradients {
    /// With respect to the `f_θ` embeddings; fed only by the point and proxy terms.
    pub embeddings: Matrix,
    /// Flat proxy gradient; fed only by the proxy and neighborhood terms.
    pub proxies: Vec<f64>,
}

/// Evaluates all three terms and combines them with the configured weights.
pub fn total_loss(
    z: &Matrix,
    point_sim: &Matrix,
    neighborhoods: &[LinearNeighborhood],
    proxies: &ProxySet,
    proxy_sim: &ProxySimilarities,
    cfg: &LossConfig,
) -> (LossBreakdown, RoutedGradients) {
    let (lp, gz_point) = point_loss(z, point_sim, cfg);
    let (lx, gz_proxy, gp_proxy) = proxy_loss(z, proxies, proxy_sim, cfg);
    let (ln, gp_nbhd) = neighborhood_loss(neighborhoods, proxies, proxy_sim, cfg);

    let mut gz = gz_point;
    gz.as_mut_slice()
        .iter_mut()
        .zip(gz_proxy.as_slice())
        .for_each(|(a, b)| *a = cfg.weight_point * *a + cfg.weight_proxy * b);
    let gp: Vec<f64> = gp_proxy
        .iter()
        .zip(&gp_nbhd)
        .map(|(a, b)| cfg.weight_proxy * a + cfg.weight_neighborhood * b)
        .collect();
    let breakdown = LossBreakdown {
        point: lp,
        proxy: lx,
        neighborhood: ln,
        total: cfg.weight_point * lp + cfg.weight_proxy * lx + cfg.weight_neighborhood * ln,
    };
    (
        breakdown,
        RoutedGradients {
            embeddings: gz,
            proxies: gp,
        },
    )
}
