use nalgebra::Matrix3;

use crate::{KdTree, Point3, Vector3};

/// Unit surface normal per point from PCA of its `k` nearest neighbours
/// (the point included). Sign is arbitrary.
pub fn estimate_normals(points: &[Point3], k: usize) -> Vec<Vector3> {
    let tree = KdTree::new(points);
    points
        .iter()
        .map(|p| {
            let nn = tree.knn(p, k.max(3));
            let m = nn.len() as f64;
            let mean = nn.iter().fold(Vector3::zeros(), |a, (i, _)| a + points[*i].coords) / m;
            let mut cov = Matrix3::zeros();
            for (i, _) in &nn {
                let d = points[*i].coords - mean;
                cov += d * d.transpose();
            }
            let eig = cov.symmetric_eigen();
            eig.eigenvectors.column(eig.eigenvalues.imin()).into_owned()
        })
        .collect()
}
