//! Incremental 3D convex hull.

use std::collections::HashSet;

use super::{GeometryError, TriangleMesh};

/// Orientation tolerance; inputs are expected to be normalized.
pub const HULL_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug)]
struct Face {
    v: [usize; 3],
    normal: [f64; 3],
    offset: f64,
}

impl Face {
    fn new(pts: &[[f64; 3]], v: [usize; 3]) -> Self {
        let (a, b, c) = (pts[v[0]], pts[v[1]], pts[v[2]]);
        let n = cross(sub(b, a), sub(c, a));
        let len = dot(n, n).sqrt();
        let normal = if len > 0.0 { [n[0] / len, n[1] / len, n[2] / len] } else { n };
        Self {
            v,
            normal,
            offset: dot(normal, a),
        }
    }

    fn distance(&self, p: [f64; 3]) -> f64 {
        dot(self.normal, p) - self.offset
    }
}

/// Triangulated convex hull of `points` with outward-facing triangles.
///
/// Vertices of the returned mesh are the hull's extreme points only.
pub fn convex_hull_3d(points: &[[f64; 3]]) -> Result<TriangleMesh, GeometryError> {
    if points.len() < 4 {
        return Err(GeometryError::DegenerateHull("fewer than 4 points".into()));
    }
    let init = initial_simplex(points)?;
    let centroid = {
        let mut c = [0.0; 3];
        for &i in &init {
            for d in 0..3 {
                c[d] += points[i][d] / 4.0;
            }
        }
        c
    };

    let mut faces: Vec<Option<Face>> = Vec::new();
    for tri in [[0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 2, 3]] {
        let mut v = [init[tri[0]], init[tri[1]], init[tri[2]]];
        let mut f = Face::new(points, v);
        if f.distance(centroid) > 0.0 {
            v.swap(1, 2);
            f = Face::new(points, v);
        }
        faces.push(Some(f));
    }

    for (pi, &p) in points.iter().enumerate() {
        if init.contains(&pi) {
            continue;
        }
        let visible: Vec<usize> = faces
            .iter()
            .enumerate()
            .filter_map(|(i, f)| f.filter(|f| f.distance(p) > HULL_EPS).map(|_| i))
            .collect();
        if visible.is_empty() {
            continue;
        }
        let mut edges = HashSet::new();
        for &fi in &visible {
            let v = faces[fi].expect("visible face is live").v;
            for k in 0..3 {
                edges.insert((v[k], v[(k + 1) % 3]));
            }
        }
        let mut horizon: Vec<(usize, usize)> = edges
            .iter()
            .copied()
            .filter(|&(a, b)| !edges.contains(&(b, a)))
            .collect();
        horizon.sort_unstable();
        for &fi in &visible {
            faces[fi] = None;
        }
        for (a, b) in horizon {
            faces.push(Some(Face::new(points, [a, b, pi])));
        }
    }

    let live: Vec<Face> = faces.into_iter().flatten().collect();
    let mut remap = vec![usize::MAX; points.len()];
    let mut vertices = Vec::new();
    let mut triangles = Vec::with_capacity(live.len());
    for f in &live {
        let mut t = [0usize; 3];
        for k in 0..3 {
            let v = f.v[k];
            if remap[v] == usize::MAX {
                remap[v] = vertices.len();
                vertices.push(points[v]);
            }
            t[k] = remap[v];
        }
        triangles.push(t);
    }
    Ok(TriangleMesh {
        vertices,
        triangles,
        uvs: None,
    })
}

fn initial_simplex(points: &[[f64; 3]]) -> Result<[usize; 4], GeometryError> {
    // two extremes along the widest axis
    let mut best = (0, 0, -1.0);
    for axis in 0..3 {
        let (mut lo, mut hi) = (0, 0);
        for (i, p) in points.iter().enumerate() {
            if p[axis] < points[lo][axis] {
                lo = i;
            }
            if p[axis] > points[hi][axis] {
                hi = i;
            }
        }
        let span = points[hi][axis] - points[lo][axis];
        if span > best.2 {
            best = (lo, hi, span);
        }
    }
    let (a, b, _) = best;
    let ab = sub(points[b], points[a]);
    if dot(ab, ab) <= HULL_EPS {
        return Err(GeometryError::DegenerateHull("all points coincide".into()));
    }
    let (c, area) = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let n = cross(ab, sub(*p, points[a]));
            (i, dot(n, n))
        })
        .max_by(|x, y| x.1.total_cmp(&y.1))
        .expect("non-empty");
    if area <= HULL_EPS {
        return Err(GeometryError::DegenerateHull("points are collinear".into()));
    }
    let plane = Face::new(points, [a, b, c]);
    let (d, dist) = points
        .iter()
        .enumerate()
        .map(|(i, p)| (i, plane.distance(*p).abs()))
        .max_by(|x, y| x.1.total_cmp(&y.1))
        .expect("non-empty");
    if dist <= HULL_EPS {
        return Err(GeometryError::DegenerateHull("points are coplanar".into()));
    }
    Ok([a, b, c, d])
}

/// Signed distance of `p` to the plane of triangle `t` of `mesh`
/// (positive on the side the triangle's normal points to).
pub fn signed_plane_distance(mesh: &TriangleMesh, t: usize, p: [f64; 3]) -> f64 {
    let [i, j, k] = mesh.triangles[t];
    let (a, b, c) = (mesh.vertices[i], mesh.vertices[j], mesh.vertices[k]);
    let n = cross(sub(b, a), sub(c, a));
    let len = dot(n, n).sqrt();
    dot(n, sub(p, a)) / len
}

#[inline]
fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}
