//! Static 3-d tree for exact nearest-neighbour, k-NN and radius queries.
//!
//! Distances are compared as squared norms computed with
//! `(a - b).norm_squared()`, so query results are bit-identical to a brute
//! force scan using the same expression.

use nalgebra::Point3;

use crate::scalar::Real;

/// Nodes this small are scanned linearly.
const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone)]
pub struct KdTree<T: Real> {
    points: Vec<Point3<T>>,
    order: Vec<usize>,
    /// `points` permuted into `order`, for locality.
    sorted: Vec<Point3<T>>,
    /// Split axis of the node stored at each position of `order`.
    axes: Vec<u8>,
}

impl<T: Real> KdTree<T> {
    pub fn new(points: &[Point3<T>]) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        let mut axes = vec![0u8; points.len()];
        build(points, &mut order, &mut axes);
        Self {
            points: points.to_vec(),
            sorted: order.iter().map(|&i| points[i]).collect(),
            order,
            axes,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, index: usize) -> &Point3<T> {
        &self.points[index]
    }

    /// Index and squared distance of the closest point.
    pub fn nearest(&self, query: &Point3<T>) -> Option<(usize, T)> {
        let mut best: Option<(usize, T)> = None;
        self.nearest_in(query, 0, self.order.len(), &mut best);
        best
    }

    /// Euclidean distance to the closest point, `None` for an empty tree.
    pub fn nearest_distance(&self, query: &Point3<T>) -> Option<T> {
        self.nearest(query).map(|(_, d2)| d2.sqrt())
    }

    /// All indices with `‖p − query‖² ≤ radius²`, ascending.
    pub fn within_radius(&self, query: &Point3<T>, radius: T) -> Vec<usize> {
        let mut out = Vec::new();
        self.radius_in(query, radius * radius, 0, self.order.len(), &mut out);
        out.sort_unstable();
        out
    }

    /// Number of points within `radius`, including any point equal to `query`.
    pub fn count_within(&self, query: &Point3<T>, radius: T) -> usize {
        let mut out = Vec::new();
        self.radius_in(query, radius * radius, 0, self.order.len(), &mut out);
        out.len()
    }

    /// The `k` closest points as `(index, squared distance)`, nearest first.
    pub fn knn(&self, query: &Point3<T>, k: usize) -> Vec<(usize, T)> {
        let mut heap: Vec<(usize, T)> = Vec::with_capacity(k + 1);
        if k > 0 {
            self.knn_in(query, k, 0, self.order.len(), &mut heap);
        }
        heap
    }

    fn nearest_in(&self, q: &Point3<T>, lo: usize, hi: usize, best: &mut Option<(usize, T)>) {
        let visit = |pos: usize, best: &mut Option<(usize, T)>| {
            let idx = self.order[pos];
            let d2 = (self.sorted[pos] - q).norm_squared();
            match best {
                Some((bi, bd)) if d2 > *bd || (d2 == *bd && idx > *bi) => {}
                _ => *best = Some((idx, d2)),
            }
        };
        if hi - lo <= LEAF_SIZE {
            (lo..hi).for_each(|pos| visit(pos, best));
            return;
        }
        let mid = lo + (hi - lo) / 2;
        visit(mid, best);
        let (diff, near, far) = self.split(q, lo, mid, hi);
        self.nearest_in(q, near.0, near.1, best);
        let plane = diff * diff;
        if best.map_or(true, |(_, bd)| plane <= bd) {
            self.nearest_in(q, far.0, far.1, best);
        }
    }

    fn radius_in(&self, q: &Point3<T>, r2: T, lo: usize, hi: usize, out: &mut Vec<usize>) {
        if hi - lo <= LEAF_SIZE {
            out.extend((lo..hi).filter(|&pos| (self.sorted[pos] - q).norm_squared() <= r2).map(|pos| self.order[pos]));
            return;
        }
        let mid = lo + (hi - lo) / 2;
        if (self.sorted[mid] - q).norm_squared() <= r2 {
            out.push(self.order[mid]);
        }
        let axis = self.axes[mid] as usize;
        let diff = q[axis] - self.sorted[mid][axis];
        let plane = diff * diff;
        if diff <= T::zero() || plane <= r2 {
            self.radius_in(q, r2, lo, mid, out);
        }
        if diff >= T::zero() || plane <= r2 {
            self.radius_in(q, r2, mid + 1, hi, out);
        }
    }

    fn knn_in(&self, q: &Point3<T>, k: usize, lo: usize, hi: usize, heap: &mut Vec<(usize, T)>) {
        let visit = |pos: usize, heap: &mut Vec<(usize, T)>| {
            let idx = self.order[pos];
            let d2 = (self.sorted[pos] - q).norm_squared();
            if heap.len() < k || {
                let last = heap[heap.len() - 1];
                d2 < last.1 || (d2 == last.1 && idx < last.0)
            } {
                let at = heap.partition_point(|&(i, d)| d < d2 || (d == d2 && i < idx));
                heap.insert(at, (idx, d2));
                heap.truncate(k);
            }
        };
        if hi - lo <= LEAF_SIZE {
            (lo..hi).for_each(|pos| visit(pos, heap));
            return;
        }
        let mid = lo + (hi - lo) / 2;
        visit(mid, heap);
        let (diff, near, far) = self.split(q, lo, mid, hi);
        self.knn_in(q, k, near.0, near.1, heap);
        let plane = diff * diff;
        if heap.len() < k || plane <= heap[heap.len() - 1].1 {
            self.knn_in(q, k, far.0, far.1, heap);
        }
    }

    /// Signed offset from the splitting plane and the near/far child ranges.
    #[allow(clippy::type_complexity)]
    fn split(&self, q: &Point3<T>, lo: usize, mid: usize, hi: usize) -> (T, (usize, usize), (usize, usize)) {
        let axis = self.axes[mid] as usize;
        let diff = q[axis] - self.sorted[mid][axis];
        if diff <= T::zero() {
            (diff, (lo, mid), (mid + 1, hi))
        } else {
            (diff, (mid + 1, hi), (lo, mid))
        }
    }
}

/// Splits each node on its widest axis; planar clouds would otherwise waste
/// every third level.
fn build<T: Real>(points: &[Point3<T>], order: &mut [usize], axes: &mut [u8]) {
    if order.len() <= LEAF_SIZE {
        return;
    }
    let mut lo = points[order[0]];
    let mut hi = lo;
    for &i in order.iter() {
        for a in 0..3 {
            lo[a] = lo[a].min(points[i][a]);
            hi[a] = hi[a].max(points[i][a]);
        }
    }
    let spread = hi - lo;
    let axis = (0..3).fold(0, |best, a| if spread[a] > spread[best] { a } else { best });
    let mid = order.len() / 2;
    axes[mid] = axis as u8;
    order.select_nth_unstable_by(mid, |&a, &b| {
        points[a][axis]
            .partial_cmp(&points[b][axis])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let (left, rest) = order.split_at_mut(mid);
    let (left_axes, rest_axes) = axes.split_at_mut(mid);
    build(points, left, left_axes);
    build(points, &mut rest[1..], &mut rest_axes[1..]);
}
