//! Lloyd's k-means with k-means++ seeding and best-of-restarts selection.

use log::warn;
use nalgebra::DMatrix;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded, Rng};

const MAX_LLOYD: usize = 300;

#[derive(Debug, Clone)]
pub struct KMeans {
    pub labels: Vec<usize>,
    /// `k x dim` cluster centers.
    pub centers: DMatrix<f64>,
    /// Within-cluster sum of squares.
    pub wcss: f64,
}

struct Points {
    m: usize,
    dim: usize,
    data: Vec<f64>,
}

impl Points {
    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centers: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.chunks_exact(dim).enumerate() {
        let d = sq_dist(p, center);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus(points: &Points, k: usize, rng: &mut Rng) -> Vec<f64> {
    let dim = points.dim;
    let mut centers = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..points.m);
    centers.extend_from_slice(points.row(first));
    let mut d2: Vec<f64> = (0..points.m).map(|i| sq_dist(points.row(i), points.row(first))).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = points.m - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        } else {
            rng.random_range(0..points.m)
        };
        let start = centers.len();
        centers.extend_from_slice(points.row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), &centers[start..]));
        }
    }
    centers
}

fn lloyd(points: &Points, mut centers: Vec<f64>, k: usize) -> (Vec<usize>, Vec<f64>, f64) {
    let dim = points.dim;
    let mut labels = vec![usize::MAX; points.m];
    for _ in 0..MAX_LLOYD {
        let mut changed = false;
        for (i, label) in labels.iter_mut().enumerate() {
            let (c, _) = nearest(points.row(i), &centers, dim);
            if *label != c {
                *label = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &c) in labels.iter().enumerate() {
            counts[c] += 1;
            for (s, x) in sums[c * dim..(c + 1) * dim].iter_mut().zip(points.row(i)) {
                *s += x;
            }
        }
        for c in 0..k {
            // empty clusters keep their previous center
            if counts[c] > 0 {
                for a in 0..dim {
                    centers[c * dim + a] = sums[c * dim + a] / counts[c] as f64;
                }
            }
        }
    }
    let wcss = labels.iter().enumerate().map(|(i, &c)| sq_dist(points.row(i), &centers[c * dim..(c + 1) * dim])).sum();
    (labels, centers, wcss)
}

/// Clusters the rows of `points` into `k` groups, keeping the restart with
/// the smallest within-cluster sum of squares. Deterministic in `seed`.
pub fn kmeans(points: &DMatrix<f64>, k: usize, restarts: usize, seed: u64) -> Result<KMeans> {
    let (m, dim) = points.shape();
    if k == 0 || restarts == 0 {
        return Err(Error::InvalidParameter("k-means needs k >= 1 and at least one restart".into()));
    }
    if m < k {
        return Err(Error::InvalidParameter(format!("k-means with {k} clusters on {m} points")));
    }
    let pts = Points { m, dim, data: (0..m).flat_map(|i| points.row(i).iter().copied().collect::<Vec<_>>()).collect() };
    if count_distinct(&pts, k) < k {
        warn!("fewer than {k} distinct points; k-means will use duplicate centers");
    }
    let mut best: Option<(Vec<usize>, Vec<f64>, f64)> = None;
    for r in 0..restarts {
        let mut rng = seeded(derive_seed(seed, &[r as u64]));
        let init = plus_plus(&pts, k, &mut rng);
        let run = lloyd(&pts, init, k);
        if best.as_ref().is_none_or(|b| run.2 < b.2) {
            best = Some(run);
        }
    }
    let (labels, centers, wcss) = best.expect("at least one restart");
    Ok(KMeans { labels, centers: DMatrix::from_row_slice(k, dim, &centers), wcss })
}

fn count_distinct(points: &Points, cap: usize) -> usize {
    let mut seen: Vec<usize> = Vec::new();
    for i in 0..points.m {
        if !seen.iter().any(|&j| points.row(j) == points.row(i)) {
            seen.push(i);
            if seen.len() >= cap {
                break;
            }
        }
    }
    seen.len()
}

/// Within-cluster sum of squares of an arbitrary labeling (centroids recomputed).
pub fn wcss_of(points: &DMatrix<f64>, labels: &[usize], k: usize) -> f64 {
    let dim = points.ncols();
    let mut sums = DMatrix::<f64>::zeros(k, dim);
    let mut counts = vec![0usize; k];
    for (i, &c) in labels.iter().enumerate() {
        counts[c] += 1;
        for a in 0..dim {
            sums[(c, a)] += points[(i, a)];
        }
    }
    labels
        .iter()
        .enumerate()
        .map(|(i, &c)| (0..dim).map(|a| (points[(i, a)] - sums[(c, a)] / counts[c] as f64).powi(2)).sum::<f64>())
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clouds() -> DMatrix<f64> {
        let centers = [(0.0, 0.0), (10.0, 0.0), (0.0, 10.0)];
        let offsets = [(0.1, 0.2), (-0.3, 0.1), (0.2, -0.2), (0.0, 0.3)];
        DMatrix::from_fn(12, 2, |i, a| {
            let (cx, cy) = centers[i / 4];
            let (ox, oy) = offsets[i % 4];
            if a == 0 {
                cx + ox
            } else {
                cy + oy
            }
        })
    }

    #[test]
    fn separated_clouds_are_recovered() {
        let km = kmeans(&clouds(), 3, 5, 7).unwrap();
        for g in 0..3 {
            let l = km.labels[4 * g];
            assert!(km.labels[4 * g..4 * g + 4].iter().all(|&x| x == l));
        }
        let distinct: std::collections::HashSet<_> = km.labels.iter().collect();
        assert_eq!(distinct.len(), 3);
    }

    #[test]
    fn single_cluster_wcss_is_total_scatter() {
        let p = clouds();
        let km = kmeans(&p, 1, 3, 0).unwrap();
        let mean = p.row_mean();
        let total: f64 = p.row_iter().map(|r| (r - &mean).norm_squared()).sum();
        assert!((km.wcss - total).abs() < 1e-9);
        assert!(km.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn deterministic_in_seed() {
        let p = DMatrix::from_fn(40, 3, |i, a| ((i * 31 + a * 17) % 13) as f64);
        let a = kmeans(&p, 4, 3, 99).unwrap();
        let b = kmeans(&p, 4, 3, 99).unwrap();
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.wcss, b.wcss);
    }

    #[test]
    fn duplicate_points_degrade_gracefully() {
        let p = DMatrix::from_element(5, 2, 1.0);
        let km = kmeans(&p, 3, 2, 0).unwrap();
        assert_eq!(km.wcss, 0.0);
        assert!(kmeans(&p, 6, 1, 0).is_err());
    }
}
