use nalgebra::{DMatrix, DVector};
use plmetric::linalg::{reorthonormalize, Matrix, OrthonormalBasis};
use plmetric::manifold::{fit_all_neighborhoods, LinearNeighborhood, ManifoldConfig, ProxySet};
use plmetric::similarity::{
    alpha, beta, directed_similarity, point_similarity_matrix, proxy_point_similarity,
    symmetric_similarity, SimilarityConfig,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn frame(rng: &mut ChaCha8Rng, m: usize, d: usize) -> OrthonormalBasis {
    let raw = Matrix::from_vec(m, d, (0..m * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    reorthonormalize(&raw).unwrap().basis
}

/// `s'` recomputed through an explicit projector matrix `B^T B`.
fn oracle_directed(xi: &[f64], xj: &[f64], basis: &OrthonormalBasis, na: f64, nb: f64) -> f64 {
    let b = DMatrix::from_row_slice(basis.rank(), basis.ambient_dim(), basis.vectors().as_slice());
    let p = b.transpose() * b;
    let diff = DVector::from_iterator(xi.len(), xi.iter().zip(xj).map(|(a, c)| a - c));
    let inplane = &p * &diff;
    let orth = &diff - &inplane;
    (1.0 + orth.norm() / 2.0).powf(-na) * (1.0 + inplane.norm()).powf(-nb)
}

#[test]
fn closed_form_values() {
    assert_eq!(alpha(0.0, 4.0).unwrap(), 1.0);
    assert!((alpha(2.0, 4.0).unwrap() - 0.0625).abs() < 1e-15);
    assert!((alpha(1.0, 4.0).unwrap() - 1.0 / 1.5f64.powi(4)).abs() < 1e-15);
    assert_eq!(beta(0.0, 0.5).unwrap(), 1.0);
    assert!((beta(1.0, 0.5).unwrap() - 0.707_106_781_186_547_5).abs() < 1e-12);
    assert!((beta(3.0, 0.5).unwrap() - 0.5).abs() < 1e-15);
}

#[test]
fn directed_on_xy_plane() {
    let xy = OrthonormalBasis::axes(2, 3).unwrap();
    let cfg = SimilarityConfig::default();
    let xi = [0.0, 0.0, 1.0];
    let xj = [0.0, 0.0, -1.0];
    assert!((directed_similarity(0, &xi, &xj, &xy, &cfg).unwrap() - 0.0625).abs() < 1e-15);
    assert_eq!(directed_similarity(0, &xi, &xi, &xy, &cfg).unwrap(), 1.0);
    // Two unit vectors whose difference is (1, 1, 1).
    let w = 0.5 / 2f64.sqrt();
    let p = [0.5 + w, 0.5 - w, 0.5];
    let q = [p[0] - 1.0, p[1] - 1.0, p[2] - 1.0];
    for v in [&p, &q] {
        assert!((v.iter().map(|c| c * c).sum::<f64>() - 1.0).abs() < 1e-15);
    }
    let want = 1.0 / 1.5f64.powi(4) * (1.0 + 2f64.sqrt()).powf(-0.5);
    assert!((want - 0.127_129).abs() < 1e-6);
    let got = directed_similarity(0, &p, &q, &xy, &cfg).unwrap();
    assert!((got - want).abs() < 1e-12);
    assert!((got - oracle_directed(&p, &q, &xy, 4.0, 0.5)).abs() < 1e-12);
}

fn batch(seed: u64, n: usize, d: usize) -> (Matrix, Vec<LinearNeighborhood>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<Vec<f64>> = (0..n).map(|_| unit(&mut rng, d)).collect();
    let x = Matrix::from_rows(&rows).unwrap();
    let cfg = ManifoldConfig {
        m: 2,
        threshold: 90.0,
        k: 6,
        ablation_knn_only: false,
    };
    let nbs = fit_all_neighborhoods(&x, &cfg, 1).unwrap();
    (x, nbs)
}

#[test]
fn symmetric_is_mean_of_independent_directed_terms() {
    let (x, nbs) = batch(1, 12, 5);
    let cfg = SimilarityConfig::default();
    for i in 0..12 {
        for j in 0..12 {
            let s = symmetric_similarity(i, j, &nbs, &x, &cfg).unwrap();
            let a = oracle_directed(x.row(i), x.row(j), &nbs[j].basis, 4.0, 0.5);
            let b = oracle_directed(x.row(j), x.row(i), &nbs[i].basis, 4.0, 0.5);
            assert!((s - 0.5 * (a + b)).abs() < 1e-12);
            assert_eq!(s.to_bits(), symmetric_similarity(j, i, &nbs, &x, &cfg).unwrap().to_bits());
        }
        assert_eq!(symmetric_similarity(i, i, &nbs, &x, &cfg).unwrap(), 1.0);
    }
    let s = point_similarity_matrix(&x, &nbs, &cfg).unwrap();
    assert_eq!(s, s.transpose());
}

#[test]
fn symmetry_over_many_random_pairs() {
    let (x, nbs) = batch(2, 48, 6);
    let cfg = SimilarityConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..1000 {
        let (i, j) = (rng.gen_range(0..48), rng.gen_range(0..48));
        let a = symmetric_similarity(i, j, &nbs, &x, &cfg).unwrap();
        let b = symmetric_similarity(j, i, &nbs, &x, &cfg).unwrap();
        assert!((a - b).abs() <= 1e-12);
    }
}

#[test]
fn proxy_similarity_treats_proxy_as_point() {
    let (x, nbs) = batch(4, 10, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let loc: Vec<Vec<f64>> = (0..3).map(|_| unit(&mut rng, 5)).collect();
    let frames: Vec<_> = (0..3).map(|_| frame(&mut rng, 2, 5)).collect();
    let proxies = ProxySet::new(Matrix::from_rows(&loc).unwrap(), frames.clone()).unwrap();
    let cfg = SimilarityConfig::default();
    for i in 0..10 {
        for j in 0..3 {
            let s = proxy_point_similarity(x.row(i), j, &proxies, &nbs[i], &cfg).unwrap();
            let a = oracle_directed(x.row(i), &loc[j], &frames[j], 4.0, 0.5);
            let b = oracle_directed(&loc[j], x.row(i), &nbs[i].basis, 4.0, 0.5);
            assert!((s - 0.5 * (a + b)).abs() < 1e-12);
        }
    }
    // A proxy sitting on the embedding.
    let on = ProxySet::new(Matrix::from_rows(&[x.row(0)]).unwrap(), vec![frames[0].clone()]).unwrap();
    assert_eq!(proxy_point_similarity(x.row(0), 0, &on, &nbs[0], &cfg).unwrap(), 1.0);
}

#[test]
fn binary_ablation_uses_membership() {
    let (x, nbs) = batch(5, 12, 5);
    let cfg = SimilarityConfig {
        ablation_binary: true,
        ..SimilarityConfig::default()
    };
    for i in 0..12 {
        for j in 0..12 {
            let s = directed_similarity(i, x.row(i), x.row(j), &nbs[j], &cfg).unwrap();
            assert_eq!(s, if nbs[j].contains(i) { 1.0 } else { 0.0 });
        }
    }
}

proptest! {
    #[test]
    fn similarity_in_unit_interval(seed in 0u64..1000, na in 0.0f64..8.0, nb in 0.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = (unit(&mut rng, 6), unit(&mut rng, 6));
        let f = frame(&mut rng, 3, 6);
        let cfg = SimilarityConfig { n_alpha: na, n_beta: nb, ablation_binary: false };
        let s = directed_similarity(0, &a, &b, &f, &cfg).unwrap();
        prop_assert!(s > 0.0 && s <= 1.0);
        prop_assert!(s >= 2f64.powf(-na) * 3f64.powf(-nb) - 1e-15);
    }

    #[test]
    fn strictly_decreasing_in_each_component(o in 0.0f64..2.0, p in 0.0f64..2.0, e in 1e-3f64..1.0) {
        let (na, nb) = (4.0, 0.5);
        let s = alpha(o, na).unwrap() * beta(p, nb).unwrap();
        prop_assert!(alpha(o + e, na).unwrap() * beta(p, nb).unwrap() < s);
        prop_assert!(alpha(o, na).unwrap() * beta(p + e, nb).unwrap() < s);
    }

    #[test]
    fn orthogonal_moves_cost_more(e in 1e-6f64..=1.0) {
        let off = alpha(e, 4.0).unwrap() * beta(0.0, 0.5).unwrap();
        let along = alpha(0.0, 4.0).unwrap() * beta(e, 0.5).unwrap();
        prop_assert!(off < along);
    }
}
