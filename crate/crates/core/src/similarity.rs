//! Manifold-aware similarity between embeddings.
//!
//! The difference vector between two unit-norm embeddings is split against
//! the target's local frame into an in-plane length `p` and an orthogonal
//! length `o`. Directed similarity is `alpha(o) * beta(p)` with
//!
//! ```text
//! alpha(o) = (1 + o/2)^(-n_alpha)      beta(p) = (1 + p)^(-n_beta)
//! ```
//!
//! and the symmetric similarity averages the two directions, each measured
//! against the frame of its target point.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy, decompose, dot, norm, sub, Matrix, OrthonormalBasis};
use crate::manifold::{LinearNeighborhood, ProxySet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimilarityConfig {
    /// Decay exponent for orthogonal distance.
    pub n_alpha: f64,
    /// Decay exponent for in-plane distance.
    pub n_beta: f64,
    /// Replace the continuous similarity by neighborhood membership (0/1).
    pub ablation_binary: bool,
}

impl Default for SimilarityConfig {
    fn default() -> Self {
        Self {
            n_alpha: 4.0,
            n_beta: 0.5,
            ablation_binary: false,
        }
    }
}

impl SimilarityConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.n_alpha >= 0.0 && self.n_alpha.is_finite()) {
            return Err(Error::config("n_alpha", "must be finite and >= 0"));
        }
        if !(self.n_beta >= 0.0 && self.n_beta.is_finite()) {
            return Err(Error::config("n_beta", "must be finite and >= 0"));
        }
        Ok(())
    }

    /// Non-fatal oddities worth reporting.
    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if self.n_alpha <= self.n_beta {
            w.push(format!(
                "n_alpha ({}) <= n_beta ({}): off-manifold distance will not decay faster than in-plane distance",
                self.n_alpha, self.n_beta
            ));
        }
        w
    }
}

pub fn alpha(o: f64, n_alpha: f64) -> Result<f64> {
    if !(o >= 0.0) {
        return Err(Error::Invalid(format!("orthogonal distance {o} is negative")));
    }
    Ok((1.0 + 0.5 * o).powf(-n_alpha))
}

pub fn beta(p: f64, n_beta: f64) -> Result<f64> {
    if !(p >= 0.0) {
        return Err(Error::Invalid(format!("in-plane distance {p} is negative")));
    }
    Ok((1.0 + p).powf(-n_beta))
}

fn alpha_deriv(o: f64, n_alpha: f64) -> f64 {
    -0.5 * n_alpha * (1.0 + 0.5 * o).powf(-n_alpha - 1.0)
}

fn beta_deriv(p: f64, n_beta: f64) -> f64 {
    -n_beta * (1.0 + p).powf(-n_beta - 1.0)
}

/// A local frame that similarity can be measured against.
pub trait LocalFrame {
    fn basis(&self) -> &OrthonormalBasis;
    /// Whether sample `index` belongs to the frame's neighborhood; used only
    /// by the binary ablation.
    fn has_member(&self, index: usize) -> bool;
}

impl LocalFrame for LinearNeighborhood {
    fn basis(&self) -> &OrthonormalBasis {
        &self.basis
    }
    fn has_member(&self, index: usize) -> bool {
        self.contains(index)
    }
}

impl LocalFrame for OrthonormalBasis {
    fn basis(&self) -> &OrthonormalBasis {
        self
    }
    fn has_member(&self, _index: usize) -> bool {
        false
    }
}

/// Tolerance on the unit-norm precondition.
const UNIT_TOL: f64 = 1e-4;

fn check_unit(x: &[f64], what: &str) -> Result<()> {
    let n = norm(x);
    if (n - 1.0).abs() > UNIT_TOL {
        return Err(Error::Invalid(format!("{what} has norm {n}, expected 1")));
    }
    Ok(())
}

/// `s'(x_i -> x_j)` measured against the frame of `x_j`.
///
/// `source_index` identifies `x_i` for the binary ablation, where the result
/// is 1 iff `x_i` is a member of the target's neighborhood.
pub fn directed_similarity(
    source_index: usize,
    x_i: &[f64],
    x_j: &[f64],
    frame_j: &impl LocalFrame,
    cfg: &SimilarityConfig,
) -> Result<f64> {
    if cfg.ablation_binary {
        return Ok(if frame_j.has_member(source_index) { 1.0 } else { 0.0 });
    }
    if x_i.len() != x_j.len() {
        return Err(Error::Dimension {
            expected: x_j.len(),
            got: x_i.len(),
        });
    }
    check_unit(x_i, "source embedding")?;
    check_unit(x_j, "target embedding")?;
    let (p, o) = decompose(&sub(x_i, x_j), frame_j.basis())?;
    Ok(alpha(o, cfg.n_alpha)? * beta(p, cfg.n_beta)?)
}

/// Symmetric point–point similarity of batch rows `i` and `j`.
/// `neighborhoods[k]` must be the neighborhood anchored at row `k`.
pub fn symmetric_similarity(
    i: usize,
    j: usize,
    neighborhoods: &[LinearNeighborhood],
    embeddings: &Matrix,
    cfg: &SimilarityConfig,
) -> Result<f64> {
    let nb = |k: usize| {
        neighborhoods
            .get(k)
            .ok_or_else(|| Error::Invalid(format!("no neighborhood for row {k}")))
    };
    let (ni, nj) = (nb(i)?, nb(j)?);
    let (xi, xj) = (embeddings.row(i), embeddings.row(j));
    let forward = directed_similarity(i, xi, xj, nj, cfg)?;
    let backward = directed_similarity(j, xj, xi, ni, cfg)?;
    Ok(0.5 * (forward + backward))
}

/// Similarity between embedding `x_i` (with neighborhood `neighborhood_i`)
/// and proxy `j`, with the proxy frame standing in for a point neighborhood.
///
/// Under the binary ablation both directions score 1 iff the proxy lies
/// within the radius of `neighborhood_i`, proxies having no member sets.
pub fn proxy_point_similarity(
    x_i: &[f64],
    proxy_index: usize,
    proxies: &ProxySet,
    neighborhood_i: &LinearNeighborhood,
    cfg: &SimilarityConfig,
) -> Result<f64> {
    if proxy_index >= proxies.len() {
        return Err(Error::Invalid(format!("no proxy {proxy_index}")));
    }
    let rho = proxies.location(proxy_index);
    if cfg.ablation_binary {
        return Ok(binary_proxy(x_i, rho, neighborhood_i.radius));
    }
    check_unit(rho, "proxy location")?;
    let forward = directed_similarity(0, x_i, rho, proxies.frame(proxy_index), cfg)?;
    let backward = directed_similarity(0, rho, x_i, neighborhood_i, cfg)?;
    Ok(0.5 * (forward + backward))
}

fn binary_proxy(x_i: &[f64], rho: &[f64], radius: f64) -> f64 {
    if crate::linalg::distance(x_i, rho) <= radius {
        1.0
    } else {
        0.0
    }
}

/// Pairwise point similarities of all batch rows; diagonal is 1.
pub fn point_similarity_matrix(
    embeddings: &Matrix,
    neighborhoods: &[LinearNeighborhood],
    cfg: &SimilarityConfig,
) -> Result<Matrix> {
    let n = embeddings.rows();
    let mut s = Matrix::identity(n);
    for i in 0..n {
        for j in i + 1..n {
            let v = symmetric_similarity(i, j, neighborhoods, embeddings, cfg)?;
            s[(i, j)] = v;
            s[(j, i)] = v;
        }
    }
    Ok(s)
}

/// Directed similarity and its gradient with respect to the difference
/// vector and to the rows of a (not necessarily orthonormal) frame.
///
/// The in-plane component is taken literally as `v = Σ_k (ψ_k·diff) ψ_k`,
/// so the frame gradient is exact for the formula even off the Stiefel
/// manifold. Zero-length components get a zero subgradient.
#[derive(Debug, Clone)]
pub struct DirectedGrad {
    pub value: f64,
    pub d_diff: Vec<f64>,
    pub d_frame: Matrix,
}

pub fn directed_with_grad(diff: &[f64], frame: &Matrix, cfg: &SimilarityConfig) -> DirectedGrad {
    let d = diff.len();
    let coords: Vec<f64> = frame.iter_rows().map(|psi| dot(psi, diff)).collect();
    let mut v = vec![0.0; d];
    for (c, psi) in coords.iter().zip(frame.iter_rows()) {
        axpy(*c, psi, &mut v);
    }
    let r = sub(diff, &v);
    let (p, o) = (norm(&v), norm(&r));
    let a = (1.0 + 0.5 * o).powf(-cfg.n_alpha);
    let b = (1.0 + p).powf(-cfg.n_beta);
    let ds_do = alpha_deriv(o, cfg.n_alpha) * b;
    let ds_dp = a * beta_deriv(p, cfg.n_beta);

    // g_r = ∂s/∂r, g_v = ∂s/∂v (treating v and r as independent)
    let g_r: Vec<f64> = if o > 0.0 {
        r.iter().map(|x| ds_do * x / o).collect()
    } else {
        vec![0.0; d]
    };
    let g_v: Vec<f64> = if p > 0.0 {
        v.iter().map(|x| ds_dp * x / p).collect()
    } else {
        vec![0.0; d]
    };
    // r = diff - v, so the total pull on v is g_v - g_r
    let g: Vec<f64> = g_v.iter().zip(&g_r).map(|(x, y)| x - y).collect();

    let mut d_diff = g_r;
    let mut d_frame = Matrix::zeros(frame.rows(), d);
    for (k, psi) in frame.iter_rows().enumerate() {
        let gp = dot(&g, psi);
        axpy(gp, psi, &mut d_diff);
        let row = d_frame.row_mut(k);
        axpy(gp, diff, row);
        axpy(coords[k], &g, row);
    }
    DirectedGrad {
        value: a * b,
        d_diff,
        d_frame,
    }
}

/// Proxy–point similarity with gradients with respect to the proxy
/// location and frame. The point embedding and its neighborhood are
/// constants.
#[derive(Debug, Clone)]
pub struct ProxyPointGrad {
    pub value: f64,
    pub d_location: Vec<f64>,
    pub d_frame: Matrix,
}

pub fn proxy_point_with_grad(
    x_i: &[f64],
    rho: &[f64],
    proxy_frame: &Matrix,
    neighborhood_i: &LinearNeighborhood,
    cfg: &SimilarityConfig,
) -> ProxyPointGrad {
    let d = x_i.len();
    if cfg.ablation_binary {
        return ProxyPointGrad {
            value: binary_proxy(x_i, rho, neighborhood_i.radius),
            d_location: vec![0.0; d],
            d_frame: Matrix::zeros(proxy_frame.rows(), d),
        };
    }
    // x_i -> rho against the proxy frame; diff = x_i - rho
    let fwd = directed_with_grad(&sub(x_i, rho), proxy_frame, cfg);
    // rho -> x_i against P_i; diff = rho - x_i
    let bwd = directed_with_grad(&sub(rho, x_i), neighborhood_i.basis.vectors(), cfg);
    let d_location = fwd
        .d_diff
        .iter()
        .zip(&bwd.d_diff)
        .map(|(f, b)| 0.5 * (b - f))
        .collect();
    let mut d_frame = fwd.d_frame;
    d_frame.as_mut_slice().iter_mut().for_each(|x| *x *= 0.5);
    ProxyPointGrad {
        value: 0.5 * (fwd.value + bwd.value),
        d_location,
        d_frame,
    }
}
