//! Density-based clustering with an ε-ball neighbourhood.

use nalgebra::Point3;

use crate::scalar::Real;
use crate::spatial::KdTree;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DbscanResult {
    /// Cluster of each point; `None` marks noise.
    pub labels: Vec<Option<usize>>,
    pub cluster_count: usize,
}

impl DbscanResult {
    pub fn noise(&self) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i].is_none()).collect()
    }

    pub fn members(&self, cluster: usize) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i] == Some(cluster)).collect()
    }

    /// Index of the cluster with the most members; ties go to the lower index.
    pub fn largest(&self) -> Option<usize> {
        let mut sizes = vec![0usize; self.cluster_count];
        for l in self.labels.iter().flatten() {
            sizes[*l] += 1;
        }
        (0..self.cluster_count).rev().max_by_key(|&c| sizes[c])
    }
}

/// Clusters `points`; a point is core when at least `min_pts` points
/// (itself included) satisfy `‖p − q‖² ≤ eps²`.
///
/// Points are visited in input order and neighbourhoods in ascending index
/// order, so the labelling, including which cluster claims a shared border
/// point, is a function of the input sequence alone.
pub fn dbscan<T: Real>(points: &[Point3<T>], eps: T, min_pts: usize) -> DbscanResult {
    let n = points.len();
    let tree = KdTree::new(points);
    let mut labels: Vec<Option<usize>> = vec![None; n];
    let mut visited = vec![false; n];
    let mut cluster_count = 0;
    for i in 0..n {
        if visited[i] {
            continue;
        }
        visited[i] = true;
        let neighbours = tree.within_radius(&points[i], eps);
        if neighbours.len() < min_pts {
            continue;
        }
        let c = cluster_count;
        cluster_count += 1;
        labels[i] = Some(c);
        let mut queue: std::collections::VecDeque<usize> = neighbours.into_iter().collect();
        while let Some(q) = queue.pop_front() {
            if labels[q].is_none() {
                labels[q] = Some(c);
            }
            if visited[q] {
                continue;
            }
            visited[q] = true;
            let nq = tree.within_radius(&points[q], eps);
            if nq.len() >= min_pts {
                queue.extend(nq);
            }
        }
    }
    DbscanResult { labels, cluster_count }
}
