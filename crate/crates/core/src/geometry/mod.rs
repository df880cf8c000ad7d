//! Spatial kernels: point containers, nearest-neighbor search, Chamfer
//! distance, surface sampling, convex hulls and normalization.

mod hull;
mod kdtree;
mod sampling;
pub mod shapes;

use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;

pub use hull::{convex_hull_3d, signed_plane_distance, HULL_EPS};
pub use kdtree::{brute_force_knn, KdTree};
pub use sampling::{farthest_point_sampling, sample_mesh_surface};

/// Floor applied to `L(Q)` before deriving thresholds from it.
pub const MIN_UV_EXTENT: f64 = 1e-6;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum GeometryError {
    #[error("need k={k} neighbors but the index holds {size} points")]
    NeighborCount { k: usize, size: usize },
    #[error("point set is empty")]
    Empty,
    #[error("non-finite coordinate at point {0}")]
    NonFinite(usize),
    #[error("degenerate convex hull input: {0}")]
    DegenerateHull(String),
    #[error("mesh has zero surface area")]
    ZeroArea,
    #[error("point set has zero extent")]
    ZeroExtent,
}

/// `N × 3` spatial points with optional evaluation-only normals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointCloud3 {
    pub points: Vec<[f64; 3]>,
    pub normals: Option<Vec<[f64; 3]>>,
}

impl PointCloud3 {
    pub fn new(points: Vec<[f64; 3]>) -> Self {
        Self {
            points,
            normals: None,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.points.is_empty() {
            return Err(GeometryError::Empty);
        }
        match self.points.iter().position(|p| !p.iter().all(|v| v.is_finite())) {
            Some(i) => Err(GeometryError::NonFinite(i)),
            None => Ok(()),
        }
    }

    pub fn to_mat(&self) -> Mat {
        Mat::from_rows(&self.points)
    }

    /// Panics unless `m` has 3 columns.
    pub fn from_mat(m: &Mat) -> Self {
        assert_eq!(m.cols(), 3, "expected an N×3 matrix");
        Self::new((0..m.rows()).map(|r| [m.get(r, 0), m.get(r, 1), m.get(r, 2)]).collect())
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            points: idx.iter().map(|&i| self.points[i]).collect(),
            normals: self
                .normals
                .as_ref()
                .map(|n| idx.iter().map(|&i| n[i]).collect()),
        }
    }
}

/// `N × 2` parameter-domain coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UvCloud {
    pub coords: Vec<[f64; 2]>,
}

impl UvCloud {
    pub fn new(coords: Vec<[f64; 2]>) -> Self {
        Self { coords }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn to_mat(&self) -> Mat {
        Mat::from_rows(&self.coords)
    }

    /// Panics unless `m` has 2 columns.
    pub fn from_mat(m: &Mat) -> Self {
        assert_eq!(m.cols(), 2, "expected an N×2 matrix");
        Self::new((0..m.rows()).map(|r| [m.get(r, 0), m.get(r, 1)]).collect())
    }

    /// Axis-aligned bounding box `(min, max)`; `None` when empty.
    pub fn bounds(&self) -> Option<([f64; 2], [f64; 2])> {
        let first = *self.coords.first()?;
        Some(self.coords.iter().fold((first, first), |(lo, hi), c| {
            ([lo[0].min(c[0]), lo[1].min(c[1])], [hi[0].max(c[0]), hi[1].max(c[1])])
        }))
    }
}

/// Indexed triangle mesh. `uvs`, when present, holds one UV per vertex.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TriangleMesh {
    pub vertices: Vec<[f64; 3]>,
    pub triangles: Vec<[usize; 3]>,
    pub uvs: Option<Vec<[f64; 2]>>,
}

impl TriangleMesh {
    pub fn triangle(&self, t: usize) -> [[f64; 3]; 3] {
        let [a, b, c] = self.triangles[t];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangle(t);
        let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
        let n = [
            u[1] * v[2] - u[2] * v[1],
            u[2] * v[0] - u[0] * v[2],
            u[0] * v[1] - u[1] * v[0],
        ];
        0.5 * (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt()
    }

    pub fn surface_area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }
}

/// Side length `L(Q)` of the square bounding the UV coordinates:
/// `max(width, height)` of the axis-aligned box. Zero for an empty cloud.
pub fn uv_side_length(q: &UvCloud) -> f64 {
    match q.bounds() {
        Some((lo, hi)) => (hi[0] - lo[0]).max(hi[1] - lo[1]),
        None => 0.0,
    }
}

/// Similarity transform mapping raw input coordinates to the normalized
/// frame: `x_norm = (x − center) / scale`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizeTransform {
    pub center: [f64; 3],
    pub scale: f64,
}

impl NormalizeTransform {
    pub fn identity() -> Self {
        Self {
            center: [0.0; 3],
            scale: 1.0,
        }
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|d| (p[d] - self.center[d]) / self.scale)
    }

    pub fn inverse(&self, p: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|d| p[d] * self.scale + self.center[d])
    }

    pub fn apply_cloud(&self, p: &PointCloud3) -> PointCloud3 {
        PointCloud3 {
            points: p.points.iter().map(|&x| self.apply(x)).collect(),
            normals: p.normals.clone(),
        }
    }

    pub fn inverse_cloud(&self, p: &PointCloud3) -> PointCloud3 {
        PointCloud3 {
            points: p.points.iter().map(|&x| self.inverse(x)).collect(),
            normals: p.normals.clone(),
        }
    }
}

/// Centers the cloud on its centroid and scales it so the farthest point
/// sits at radius 1.
pub fn normalize_cloud(p: &PointCloud3) -> Result<(PointCloud3, NormalizeTransform), GeometryError> {
    p.validate()?;
    let n = p.len() as f64;
    let mut center = [0.0; 3];
    for x in &p.points {
        for d in 0..3 {
            center[d] += x[d];
        }
    }
    center.iter_mut().for_each(|c| *c /= n);
    let radius = p
        .points
        .iter()
        .map(|x| kdtree::dist2(x, &center).sqrt())
        .fold(0.0, f64::max);
    if !(radius > 0.0) {
        return Err(GeometryError::ZeroExtent);
    }
    let t = NormalizeTransform {
        center,
        scale: radius,
    };
    Ok((t.apply_cloud(p), t))
}

/// Nearest-neighbor assignment used by the Chamfer distance: for every point
/// of `from`, the index of its nearest point in `to`.
pub fn nearest_assignment<const D: usize>(
    from: &[[f64; D]],
    to: &[[f64; D]],
) -> Result<Vec<usize>, GeometryError> {
    if from.is_empty() || to.is_empty() {
        return Err(GeometryError::Empty);
    }
    let tree = KdTree::new(to);
    from.iter().map(|p| tree.nearest(p).map(|(i, _)| i)).collect()
}

/// Symmetric Chamfer distance: mean squared nearest-neighbor distance from
/// `a` to `b` plus the same from `b` to `a`.
pub fn chamfer(a: &PointCloud3, b: &PointCloud3) -> Result<f64, GeometryError> {
    let ab = nearest_assignment(&a.points, &b.points)?;
    let ba = nearest_assignment(&b.points, &a.points)?;
    let term = |from: &[[f64; 3]], to: &[[f64; 3]], nn: &[usize]| {
        from.iter()
            .zip(nn)
            .map(|(p, &j)| kdtree::dist2(p, &to[j]))
            .sum::<f64>()
            / from.len() as f64
    };
    Ok(term(&a.points, &b.points, &ab) + term(&b.points, &a.points, &ba))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_chamfer(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
        let dir = |x: &[[f64; 3]], y: &[[f64; 3]]| {
            x.iter()
                .map(|p| y.iter().map(|q| kdtree::dist2(p, q)).fold(f64::INFINITY, f64::min))
                .sum::<f64>()
                / x.len() as f64
        };
        dir(a, b) + dir(b, a)
    }

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud3 {
        PointCloud3::new(
            (0..n)
                .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
                .collect(),
        )
    }

    #[test]
    fn chamfer_examples() {
        let a = PointCloud3::new(vec![[0.0, 0.0, 0.0]]);
        let b = PointCloud3::new(vec![[1.0, 0.0, 0.0]]);
        assert_eq!(chamfer(&a, &b).unwrap(), 2.0);
        assert_eq!(chamfer(&a, &a).unwrap(), 0.0);
        let a2 = PointCloud3::new(vec![[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
        // a→b: (1 + 1)/2 = 1; b→a: 1 → total 2
        assert_eq!(chamfer(&a2, &b).unwrap(), brute_chamfer(&a2.points, &b.points));
        assert_eq!(chamfer(&a2, &b).unwrap(), 2.0);
        assert_eq!(chamfer(&PointCloud3::new(vec![]), &b), Err(GeometryError::Empty));
    }

    #[test]
    fn chamfer_symmetry_and_rigid_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let a = random_cloud(&mut rng, 200);
        let b = random_cloud(&mut rng, 150);
        let d = chamfer(&a, &b).unwrap();
        assert_eq!(d, chamfer(&b, &a).unwrap());
        assert!((d - brute_chamfer(&a.points, &b.points)).abs() < 1e-12);
        let (s, c) = (0.3f64.sin(), 0.3f64.cos());
        let rot = |p: [f64; 3]| [c * p[0] - s * p[1] + 0.5, s * p[0] + c * p[1] - 2.0, p[2] + 1.0];
        let ra = PointCloud3::new(a.points.iter().map(|&p| rot(p)).collect());
        let rb = PointCloud3::new(b.points.iter().map(|&p| rot(p)).collect());
        assert!((chamfer(&ra, &rb).unwrap() - d).abs() < 1e-10);
    }

    #[test]
    fn uv_side_length_examples() {
        assert_eq!(uv_side_length(&UvCloud::new(vec![[0.0, 0.0], [1.0, 0.5]])), 1.0);
        assert_eq!(uv_side_length(&UvCloud::new(vec![[0.3, 0.3]; 5])), 0.0);
        assert_eq!(uv_side_length(&UvCloud::new(vec![[-1.0, -1.0], [1.0, 1.0]])), 2.0);
    }

    #[test]
    fn normalize_unit_cube_corners() {
        let mut pts = Vec::new();
        for x in [0.0, 1.0] {
            for y in [0.0, 1.0] {
                for z in [0.0, 1.0] {
                    pts.push([x, y, z]);
                }
            }
        }
        let (n, t) = normalize_cloud(&PointCloud3::new(pts)).unwrap();
        let max = n.points.iter().map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()).fold(0.0, f64::max);
        assert!((max - 1.0).abs() < 1e-12);
        let (_, t2) = normalize_cloud(&n).unwrap();
        assert!(t2.center.iter().all(|c| c.abs() < 1e-12));
        assert!((t2.scale - 1.0).abs() < 1e-12);
        assert_eq!(t.center, [0.5; 3]);
    }

    #[test]
    fn normalize_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..100 {
            let n = rng.random_range(2..40);
            let mut cloud = random_cloud(&mut rng, n);
            let s = rng.random_range(0.1..50.0);
            cloud.points.iter_mut().for_each(|p| p.iter_mut().for_each(|v| *v = *v * s + 3.0));
            let (norm, t) = normalize_cloud(&cloud).unwrap();
            let back = t.inverse_cloud(&norm);
            for (a, b) in back.points.iter().zip(&cloud.points) {
                for d in 0..3 {
                    assert!((a[d] - b[d]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn normalize_rejects_degenerate() {
        assert_eq!(normalize_cloud(&PointCloud3::new(vec![[1.0, 2.0, 3.0]; 4])), Err(GeometryError::ZeroExtent));
        assert_eq!(normalize_cloud(&PointCloud3::new(vec![])), Err(GeometryError::Empty));
    }
}
