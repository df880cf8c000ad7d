use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{kdtree::dist2, GeometryError, PointCloud3, TriangleMesh};

/// `n` points drawn area-weighted over the triangles, uniform in
/// barycentric coordinates within each. Deterministic for a fixed seed.
pub fn sample_mesh_surface(
    mesh: &TriangleMesh,
    n: usize,
    seed: u64,
) -> Result<PointCloud3, GeometryError> {
    let mut cdf = Vec::with_capacity(mesh.triangles.len());
    let mut total = 0.0;
    for t in 0..mesh.triangles.len() {
        total += mesh.triangle_area(t);
        cdf.push(total);
    }
    if !(total > 0.0) {
        return Err(GeometryError::ZeroArea);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = (0..n)
        .map(|_| {
            let target = rng.random::<f64>() * total;
            let t = cdf.partition_point(|&c| c <= target).min(cdf.len() - 1);
            let [a, b, c] = mesh.triangle(t);
            let r1: f64 = rng.random::<f64>().sqrt();
            let r2: f64 = rng.random();
            let (wa, wb, wc) = (1.0 - r1, r1 * (1.0 - r2), r1 * r2);
            std::array::from_fn(|d| wa * a[d] + wb * b[d] + wc * c[d])
        })
        .collect();
    Ok(PointCloud3::new(points))
}

/// Greedy farthest-point subset of size `m`, starting from `start`.
/// Returns indices into `points` in selection order.
pub fn farthest_point_sampling(points: &[[f64; 3]], m: usize, start: usize) -> Vec<usize> {
    let n = points.len();
    let m = m.min(n);
    if m == 0 {
        return Vec::new();
    }
    let mut chosen = Vec::with_capacity(m);
    let mut best = vec![f64::INFINITY; n];
    let mut current = start % n;
    for _ in 0..m {
        chosen.push(current);
        let c = points[current];
        let mut next = current;
        let mut far = -1.0;
        for (i, p) in points.iter().enumerate() {
            let d = dist2(p, &c);
            if d < best[i] {
                best[i] = d;
            }
            if best[i] > far {
                far = best[i];
                next = i;
            }
        }
        current = next;
    }
    chosen
}
