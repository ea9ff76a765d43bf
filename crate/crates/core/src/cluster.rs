//! Power-iteration PCA and seeded k-means, shared by the clustering defense
//! and the embedding-projection export.

use crate::rng::stream_rng;
use crate::{math, CoreError, Result};
use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;

/// Top-k principal directions of a point set.
pub struct Pca {
    pub mean: Vec<f64>,
    /// Unit-norm components, strongest first. May hold fewer than requested
    /// when the data has lower rank.
    pub components: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    pub total_variance: f64,
}

impl Pca {
    /// Coordinates of a point in the component basis, zero-padded to `k`.
    pub fn project(&self, point: &[f64], k: usize) -> Vec<f64> {
        let centered: Vec<f64> = point.iter().zip(&self.mean).map(|(p, m)| p - m).collect();
        let mut out = Vec::with_capacity(k);
        for i in 0..k {
            out.push(match self.components.get(i) {
                Some(c) => math::dot(&centered, c),
                None => 0.0,
            });
        }
        out
    }
}

/// PCA via power iteration with deflation on the covariance matrix.
pub fn pca_top_k(points: &[Vec<f64>], k: usize, iterations: usize) -> Result<Pca> {
    let n = points.len();
    if n == 0 {
        return Err(CoreError::InsufficientInputs("pca of zero points".into()));
    }
    let d = points[0].len();
    let mut mean = vec![0.0; d];
    for p in points {
        if p.len() != d {
            return Err(CoreError::ShapeMismatch("pca points of unequal dims".into()));
        }
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let centered: Vec<Vec<f64>> = points
        .iter()
        .map(|p| p.iter().zip(&mean).map(|(v, m)| v - m).collect())
        .collect();
    let total_variance = centered
        .iter()
        .map(|p| math::dot(p, p))
        .sum::<f64>()
        / n as f64;

    // Covariance-vector products without materializing the d x d matrix.
    let cov_mul = |v: &[f64], deflate: &[(Vec<f64>, f64)]| -> Vec<f64> {
        let mut out = vec![0.0; d];
        for p in &centered {
            let proj = math::dot(p, v);
            for (o, x) in out.iter_mut().zip(p) {
                *o += proj * x;
            }
        }
        for o in &mut out {
            *o /= n as f64;
        }
        for (comp, lambda) in deflate {
            let proj = math::dot(comp, v) * lambda;
            for (o, c) in out.iter_mut().zip(comp) {
                *o -= proj * c;
            }
        }
        out
    };

    let mut found: Vec<(Vec<f64>, f64)> = Vec::new();
    let mut rng = stream_rng(0x9c0, &[d as u64, n as u64]);
    for _ in 0..k.min(d) {
        let mut v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = math::l2_norm(&v);
        if norm == 0.0 {
            break;
        }
        for x in &mut v {
            *x /= norm;
        }
        let mut lambda = 0.0;
        for _ in 0..iterations {
            let mv = cov_mul(&v, &found);
            let norm = math::l2_norm(&mv);
            if norm < 1e-12 {
                lambda = 0.0;
                break;
            }
            v = mv.into_iter().map(|x| x / norm).collect();
            lambda = norm;
        }
        if lambda < 1e-12 {
            break;
        }
        found.push((v, lambda));
    }
    let (components, eigenvalues) = found.into_iter().unzip();
    Ok(Pca {
        mean,
        components,
        eigenvalues,
        total_variance,
    })
}

/// Seeded k-means with farthest-point initialization. Returns per-point
/// cluster labels; empty clusters collapse deterministically.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, iterations: usize) -> Result<Vec<usize>> {
    let n = points.len();
    if n == 0 || k == 0 {
        return Err(CoreError::InsufficientInputs("kmeans needs points and k >= 1".into()));
    }
    let k = k.min(n);
    let d = points[0].len();
    let mut rng = stream_rng(seed, &[0x6b6d]);
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(points[rng.gen_range(0..n)].clone());
    while centroids.len() < k {
        // Farthest point from current centroids, ties to the lowest index.
        let mut best = 0usize;
        let mut best_d = -1.0;
        for (i, p) in points.iter().enumerate() {
            let dmin = centroids
                .iter()
                .map(|c| math::sq_dist(p, c))
                .fold(f64::INFINITY, f64::min);
            if dmin > best_d {
                best_d = dmin;
                best = i;
            }
        }
        centroids.push(points[best].clone());
    }
    let mut labels = vec![0usize; n];
    for _ in 0..iterations {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (c, centroid) in centroids.iter().enumerate() {
                let dist = math::sq_dist(p, centroid);
                if dist < best_d {
                    best_d = dist;
                    best = c;
                }
            }
            if labels[i] != best {
                labels[i] = best;
                changed = true;
            }
        }
        let mut counts = vec![0usize; k];
        let mut sums = vec![vec![0.0; d]; k];
        for (i, p) in points.iter().enumerate() {
            counts[labels[i]] += 1;
            for (s, v) in sums[labels[i]].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for (cv, s) in centroids[c].iter_mut().zip(&sums[c]) {
                    *cv = s / counts[c] as f64;
                }
            }
        }
        if !changed {
            break;
        }
    }
    Ok(labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn planted_points() -> Vec<Vec<f64>> {
        let mut pts = Vec::new();
        for i in 0..6 {
            pts.push(vec![0.0 + 0.01 * i as f64, 0.0]);
        }
        for i in 0..4 {
            pts.push(vec![5.0 + 0.01 * i as f64, 5.0]);
        }
        pts
    }

    #[test]
    fn pca_components_are_orthonormal() {
        let mut rng = crate::rng::stream_rng(5, &[1]);
        use rand::Rng;
        let pts: Vec<Vec<f64>> = (0..20)
            .map(|_| (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let pca = pca_top_k(&pts, 2, 200).unwrap();
        assert_eq!(pca.components.len(), 2);
        let c0 = &pca.components[0];
        let c1 = &pca.components[1];
        assert!((math::l2_norm(c0) - 1.0).abs() < 1e-8);
        assert!((math::l2_norm(c1) - 1.0).abs() < 1e-8);
        assert!(math::dot(c0, c1).abs() < 1e-8);
        // Captured variance cannot exceed the total.
        assert!(pca.eigenvalues.iter().sum::<f64>() <= pca.total_variance + 1e-9);
    }

    #[test]
    fn pca_finds_the_planted_axis() {
        // Points spread along (1,1)/sqrt(2).
        let pts: Vec<Vec<f64>> = (0..10)
            .map(|i| {
                let t = i as f64 - 4.5;
                vec![t, t + 0.001 * i as f64]
            })
            .collect();
        let pca = pca_top_k(&pts, 1, 300).unwrap();
        let c = &pca.components[0];
        let along = (c[0].abs() - core::f64::consts::FRAC_1_SQRT_2).abs();
        assert!(along < 0.01, "component {c:?}");
    }

    #[test]
    fn pca_degenerate_rank_reports_fewer_components() {
        let pts = vec![vec![1.0, 2.0]; 5];
        let pca = pca_top_k(&pts, 2, 100).unwrap();
        assert!(pca.components.is_empty());
        assert_eq!(pca.project(&[3.0, 4.0], 2), vec![0.0, 0.0]);
    }

    #[test]
    fn kmeans_recovers_planted_clusters() {
        let pts = planted_points();
        let labels = kmeans(&pts, 2, 3, 50).unwrap();
        let first = labels[0];
        assert!(labels[..6].iter().all(|l| *l == first));
        assert!(labels[6..].iter().all(|l| *l != first));
    }

    #[test]
    fn kmeans_is_seed_deterministic() {
        let pts = planted_points();
        assert_eq!(
            kmeans(&pts, 2, 9, 50).unwrap(),
            kmeans(&pts, 2, 9, 50).unwrap()
        );
    }
}
