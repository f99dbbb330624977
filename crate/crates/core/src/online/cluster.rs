//! PCA reduction and flat-kernel mean-shift over latent means.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanShiftConfig {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for MeanShiftConfig {
    fn default() -> Self {
        Self {
            tol: 1e-4,
            max_iter: 300,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub cluster_count: usize,
    pub sizes: Vec<usize>,
    /// Modes in the reduced space.
    pub centroids: Vec<Vec<f64>>,
    /// Cluster of every input point.
    pub labels: Vec<usize>,
    /// Argmax of `sizes`, lowest id on ties.
    pub largest: usize,
    pub far: Vec<usize>,
    pub bandwidth: f64,
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Projects `points` onto their first `k` principal components.
pub fn pca_reduce(points: &[Vec<f64>], k: usize) -> Vec<Vec<f64>> {
    let n = points.len();
    let d = points.first().map_or(0, Vec::len);
    let k = k.min(d).min(n);
    if n == 0 || k == 0 {
        return vec![Vec::new(); n];
    }
    let mut mean = vec![0.0; d];
    for p in points {
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v / n as f64;
        }
    }
    let x = DMatrix::from_fn(n, d, |i, j| points[i][j] - mean[j]);
    let svd = x.clone().svd(false, true);
    let Some(vt) = svd.v_t else {
        return vec![vec![0.0; k]; n];
    };
    // Singular values come sorted in decreasing order.
    let proj = x * vt.rows(0, k).transpose();
    (0..n).map(|i| proj.row(i).iter().copied().collect()).collect()
}

/// Median of all pairwise distances.
pub fn median_pairwise_distance(points: &[Vec<f64>]) -> f64 {
    let mut ds = Vec::with_capacity(points.len() * points.len().saturating_sub(1) / 2);
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            ds.push(dist(&points[i], &points[j]));
        }
    }
    if ds.is_empty() {
        return 0.0;
    }
    crate::dsp::dynamics::median(&mut ds)
}

fn shift_to_mode(start: &[f64], points: &[Vec<f64>], h: f64, cfg: &MeanShiftConfig) -> Vec<f64> {
    let mut x = start.to_vec();
    for _ in 0..cfg.max_iter {
        let mut acc = vec![0.0; x.len()];
        let mut n = 0usize;
        for p in points {
            if dist(p, &x) <= h {
                for (a, v) in acc.iter_mut().zip(p) {
                    *a += v;
                }
                n += 1;
            }
        }
        if n == 0 {
            break;
        }
        acc.iter_mut().for_each(|a| *a /= n as f64);
        let moved = dist(&acc, &x);
        x = acc;
        if moved < cfg.tol {
            break;
        }
    }
    x
}

/// Flat-kernel mean-shift: every point climbs to a mode; modes within
/// `bandwidth` of an earlier one are merged. Cluster ids follow point order.
pub fn mean_shift(points: &[Vec<f64>], bandwidth: f64, cfg: &MeanShiftConfig) -> ClusterReport {
    let mut centroids: Vec<Vec<f64>> = Vec::new();
    let mut labels = Vec::with_capacity(points.len());
    for p in points {
        let mode = if bandwidth > 0.0 {
            shift_to_mode(p, points, bandwidth, cfg)
        } else {
            p.clone()
        };
        let hit = centroids
            .iter()
            .position(|c| dist(c, &mode) <= bandwidth.max(0.0));
        let id = hit.unwrap_or_else(|| {
            centroids.push(mode);
            centroids.len() - 1
        });
        labels.push(id);
    }
    let mut sizes = vec![0; centroids.len()];
    for &l in &labels {
        sizes[l] += 1;
    }
    let largest = sizes
        .iter()
        .enumerate()
        .fold(0, |best, (i, &s)| if s > sizes[best] { i } else { best });
    let far = far_clusters(&centroids, 3.0);
    ClusterReport {
        cluster_count: centroids.len(),
        sizes,
        centroids,
        labels,
        largest,
        far,
        bandwidth,
    }
}

/// Clusters whose nearest other centroid lies beyond `factor` × the median
/// inter-centroid distance.
pub fn far_clusters(centroids: &[Vec<f64>], factor: f64) -> Vec<usize> {
    if centroids.len() < 3 {
        return Vec::new();
    }
    let med = median_pairwise_distance(centroids);
    (0..centroids.len())
        .filter(|&i| {
            let nn = (0..centroids.len())
                .filter(|&j| j != i)
                .map(|j| dist(&centroids[i], &centroids[j]))
                .fold(f64::INFINITY, f64::min);
            nn > factor * med
        })
        .collect()
}

/// PCA to `dims`, then mean-shift with the median pairwise distance as bandwidth.
pub fn cluster_latents(latents: &[Vec<f64>], dims: usize, cfg: &MeanShiftConfig) -> ClusterReport {
    let reduced = pca_reduce(latents, dims);
    let mut h = median_pairwise_distance(&reduced);
    if h == 0.0 {
        // Mostly duplicates: fall back to the mean distance so distinct points still separate.
        let n = reduced.len();
        let mut sum = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                sum += dist(&reduced[i], &reduced[j]);
            }
        }
        let pairs = n * n.saturating_sub(1) / 2;
        h = if pairs > 0 { sum / pairs as f64 } else { 0.0 };
    }
    mean_shift(&reduced, h, cfg)
}

/// Index of the point nearest the centroid of `cluster`.
pub fn nearest_member(points: &[Vec<f64>], report: &ClusterReport, cluster: usize) -> Option<usize> {
    let c = report.centroids.get(cluster)?;
    report
        .labels
        .iter()
        .enumerate()
        .filter(|(_, &l)| l == cluster)
        .map(|(i, _)| (i, dist(&points[i], c)))
        .fold(None, |best: Option<(usize, f64)>, (i, d)| match best {
            Some((_, bd)) if bd <= d => best,
            _ => Some((i, d)),
        })
        .map(|(i, _)| i)
}
