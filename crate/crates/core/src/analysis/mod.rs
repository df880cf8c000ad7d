//! Post-training consumers of a learned mapping: seam extraction, dense
//! UV inference, distortion metrics and visual exports.

mod export;

use serde::{Deserialize, Serialize};

pub use export::{export_uv_obj, export_uv_svg, normal_colors, uv_to_unit_square, SVG_SIZE};

use crate::autodiff::{singular_values_3x2, Jacobian32, DEGENERACY_FLOOR};
use crate::geometry::{
    chamfer, uv_side_length, GeometryError, KdTree, PointCloud3, TriangleMesh, UvCloud,
    MIN_UV_EXTENT,
};
use crate::losses::unwrap_epsilon;
use crate::networks::{cut_forward, unwrap_forward, SubNetworkSet};
use crate::pipeline::{make_grid, run_pipeline, surface_jacobians, BranchMode, PipelineError};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum AnalysisError {
    #[error("{what}: {left} vs {right} entries")]
    SizeMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

/// Points lying on cutting seams.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeamSet {
    /// Indices into the point cloud, ascending.
    pub indices: Vec<usize>,
    /// `d_i` for every point.
    pub gaps: Vec<f64>,
    pub threshold: f64,
    pub k_cut: usize,
}

impl SeamSet {
    pub fn fraction(&self) -> f64 {
        if self.gaps.is_empty() {
            0.0
        } else {
            self.indices.len() as f64 / self.gaps.len() as f64
        }
    }
}

/// `d_i = max_k ‖q_i − q_i^(k)‖` over the `k_cut` nearest 3D neighbors;
/// a point is on a seam when `d_i > t_cut`.
pub fn extract_seams(
    p: &PointCloud3,
    q: &UvCloud,
    k_cut: usize,
    t_cut: f64,
) -> Result<SeamSet, AnalysisError> {
    if p.len() != q.len() {
        return Err(AnalysisError::SizeMismatch {
            what: "points and UVs",
            left: p.len(),
            right: q.len(),
        });
    }
    let tree = KdTree::new(&p.points);
    let gaps = tree
        .knn_all(k_cut)?
        .into_iter()
        .enumerate()
        .map(|(i, nb)| {
            let a = q.coords[i];
            nb.into_iter()
                .map(|j| (a[0] - q.coords[j][0]).hypot(a[1] - q.coords[j][1]))
                .fold(0.0, f64::max)
        })
        .collect::<Vec<f64>>();
    let indices = (0..gaps.len()).filter(|&i| gaps[i] > t_cut).collect();
    Ok(SeamSet {
        indices,
        gaps,
        threshold: t_cut,
        k_cut,
    })
}

/// `T_cut = fraction · L(Q)`.
pub fn seam_threshold(q: &UvCloud, fraction: f64) -> f64 {
    fraction * uv_side_length(q).max(MIN_UV_EXTENT)
}

/// UVs of arbitrary (normalized) points: `Unwrap(Cut(P))`.
pub fn infer_uv(net: &SubNetworkSet, p: &PointCloud3) -> UvCloud {
    unwrap_forward(net, &cut_forward(net, p))
}

/// [`infer_uv`] plus the learned surface normal at each UV, evaluated
/// `chunk` points at a time to bound memory on dense inputs.
pub fn infer_uv_with_normals(
    net: &SubNetworkSet,
    p: &PointCloud3,
    chunk: usize,
) -> Result<(UvCloud, Vec<Option<[f64; 3]>>), AnalysisError> {
    let (mut coords, mut normals) = (Vec::with_capacity(p.len()), Vec::with_capacity(p.len()));
    for part in p.points.chunks(chunk.max(1)) {
        let q = infer_uv(net, &PointCloud3::new(part.to_vec()));
        normals.extend(surface_jacobians(net, &q)?.normals);
        coords.extend(q.coords);
    }
    Ok((UvCloud::new(coords), normals))
}

fn corner_angles<const D: usize>(t: [[f64; D]; 3]) -> [f64; 3] {
    std::array::from_fn(|c| {
        let (o, a, b) = (t[c], t[(c + 1) % 3], t[(c + 2) % 3]);
        let u: [f64; D] = std::array::from_fn(|d| a[d] - o[d]);
        let v: [f64; D] = std::array::from_fn(|d| b[d] - o[d]);
        let dot: f64 = (0..D).map(|d| u[d] * v[d]).sum();
        let cross = if D == 2 {
            (u[0] * v[1] - u[1] * v[0]).abs()
        } else {
            let (x, y, z) = (
                u[1] * v[2] - u[2] * v[1],
                u[2] * v[0] - u[0] * v[2],
                u[0] * v[1] - u[1] * v[0],
            );
            (x * x + y * y + z * z).sqrt()
        };
        cross.atan2(dot)
    })
}

fn cross_norm3(t: [[f64; 3]; 3]) -> f64 {
    let u = [t[1][0] - t[0][0], t[1][1] - t[0][1], t[1][2] - t[0][2]];
    let v = [t[2][0] - t[0][0], t[2][1] - t[0][1], t[2][2] - t[0][2]];
    let (x, y, z) = (u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0]);
    (x * x + y * y + z * z).sqrt()
}

/// Angle distortion between a mesh and its UV layout.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conformality {
    /// Mean `|angle_3D − angle_UV|` over all corners of used triangles, in radians.
    pub mean_angle_error: f64,
    pub triangles_used: usize,
    /// Triangles skipped because they have no area in 3D.
    pub degenerate_3d: usize,
}

/// Mean absolute corner-angle difference between the 3D triangles and their
/// UV images. Requires `mesh.uvs`.
pub fn conformality_metric(mesh: &TriangleMesh) -> Result<Conformality, AnalysisError> {
    let uvs = mesh.uvs.as_deref().unwrap_or(&[]);
    if uvs.len() != mesh.vertices.len() {
        return Err(AnalysisError::SizeMismatch {
            what: "mesh vertices and UVs",
            left: mesh.vertices.len(),
            right: uvs.len(),
        });
    }
    let (mut sum, mut used, mut degenerate) = (0.0, 0, 0);
    for (t, tri) in mesh.triangles.iter().enumerate() {
        let p = mesh.triangle(t);
        if cross_norm3(p) <= DEGENERACY_FLOOR {
            degenerate += 1;
            continue;
        }
        let a3 = corner_angles(p);
        let a2 = corner_angles([uvs[tri[0]], uvs[tri[1]], uvs[tri[2]]]);
        sum += (0..3).map(|c| (a3[c] - a2[c]).abs()).sum::<f64>();
        used += 1;
    }
    Ok(Conformality {
        mean_angle_error: if used == 0 { 0.0 } else { sum / (3 * used) as f64 },
        triangles_used: used,
        degenerate_3d: degenerate,
    })
}

/// Fraction of UV triangles whose orientation disagrees with the majority
/// orientation (a global mirror image is not a flip). Zero-area UV
/// triangles count as neither.
pub fn flip_fraction(mesh: &TriangleMesh) -> Option<f64> {
    let uvs = mesh.uvs.as_deref()?;
    if mesh.triangles.is_empty() {
        return Some(0.0);
    }
    let (mut pos, mut neg) = (0usize, 0usize);
    for &[a, b, c] in &mesh.triangles {
        let (p, q, r) = (uvs[a], uvs[b], uvs[c]);
        let area = (q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0]);
        if area > 0.0 {
            pos += 1;
        } else if area < 0.0 {
            neg += 1;
        }
    }
    Some(pos.min(neg) as f64 / mesh.triangles.len() as f64)
}

/// Fraction of points whose nearest other UV lies closer than `eps`.
pub fn uv_overlap_fraction(q: &UvCloud, eps: f64) -> f64 {
    if q.len() < 2 {
        return 0.0;
    }
    let tree = KdTree::new(&q.coords);
    let close = (0..q.len())
        .filter(|&i| {
            let j = tree.knn(&q.coords[i], 1, Some(i)).expect("two or more points")[0];
            let (a, b) = (q.coords[i], q.coords[j]);
            (a[0] - b[0]).hypot(a[1] - b[1]) < eps
        })
        .count();
    close as f64 / q.len() as f64
}

/// Point-cloud stand-in for the mesh angle metric: mean
/// `|σ1 − σ2| / (σ1 + σ2)` of the Jacobians. Not comparable to
/// [`conformality_metric`].
pub fn conformality_proxy(jacobians: &[Jacobian32]) -> f64 {
    let vals: Vec<f64> = jacobians
        .iter()
        .map(singular_values_3x2)
        .filter(|(a, b)| a + b > 0.0)
        .map(|(a, b)| (a - b).abs() / (a + b))
        .collect();
    if vals.is_empty() {
        0.0
    } else {
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

/// Mean `|σ1 − 1| + |σ2 − 1|` of the Jacobians.
pub fn isometric_residual(jacobians: &[Jacobian32]) -> f64 {
    if jacobians.is_empty() {
        return 0.0;
    }
    jacobians
        .iter()
        .map(|j| {
            let (a, b) = singular_values_3x2(j);
            (a - 1.0).abs() + (b - 1.0).abs()
        })
        .sum::<f64>()
        / jacobians.len() as f64
}

/// Evaluation summary of a trained mapping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub points: usize,
    /// Mesh angle metric in radians; present when a mesh was supplied.
    pub conformality: Option<f64>,
    pub degenerate_triangles: Option<usize>,
    pub flip_fraction: Option<f64>,
    /// Jacobian-based proxy (cloud inputs).
    pub conformality_proxy: f64,
    pub isometric_residual: f64,
    pub uv_overlap_fraction: f64,
    pub overlap_epsilon: f64,
    /// Chamfer distance between the surface decoded from the grid and the
    /// input points.
    pub chamfer: f64,
    /// Mean absolute 3D → 2D → 3D round-trip error.
    pub cycle_error: f64,
    pub seam_fraction: f64,
    pub uv_side_length: f64,
}

/// Settings for [`evaluate`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalSettings {
    pub eps_factor: f64,
    pub k_cut: usize,
    pub t_cut_fraction: f64,
}

/// Everything computed by [`evaluate`].
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: MetricReport,
    pub uv: UvCloud,
    pub seams: SeamSet,
    /// Learned unit normals at the input points.
    pub normals: Vec<Option<[f64; 3]>>,
    /// Mesh with inferred per-vertex UVs, when a mesh was supplied.
    pub mesh: Option<TriangleMesh>,
}

/// Runs the full pipeline on normalized points `p` (and optionally a
/// normalized mesh whose vertices receive inferred UVs) and collects metrics.
pub fn evaluate(
    net: &SubNetworkSet,
    p: &PointCloud3,
    mesh: Option<&TriangleMesh>,
    settings: EvalSettings,
) -> Result<Evaluation, AnalysisError> {
    let g = make_grid(p.len().max(4))?;
    let state = run_pipeline(net, p, &g, BranchMode::Both)?;
    let three = state.three.as_ref().expect("both branches ran");
    let two = state.two.as_ref().expect("both branches ran");
    let jf = state.jf.as_ref().expect("jacobians ran");
    let uv = three.q.clone();
    let eps = unwrap_epsilon(&uv, settings.eps_factor);
    let seams = extract_seams(p, &uv, settings.k_cut, seam_threshold(&uv, settings.t_cut_fraction))?;
    let cycle_error = p
        .points
        .iter()
        .zip(&three.p_cycle.points)
        .flat_map(|(a, b)| (0..3).map(move |d| (a[d] - b[d]).abs()))
        .sum::<f64>()
        / (3 * p.len()) as f64;
    let mesh = mesh.map(|m| TriangleMesh {
        uvs: Some(infer_uv(net, &PointCloud3::new(m.vertices.clone())).coords),
        ..m.clone()
    });
    let conf = mesh.as_ref().map(conformality_metric).transpose()?;
    let report = MetricReport {
        points: p.len(),
        conformality: conf.map(|c| c.mean_angle_error),
        degenerate_triangles: conf.map(|c| c.degenerate_3d),
        flip_fraction: mesh.as_ref().and_then(flip_fraction),
        conformality_proxy: conformality_proxy(&jf.jacobians),
        isometric_residual: isometric_residual(&jf.jacobians),
        uv_overlap_fraction: uv_overlap_fraction(&uv, eps),
        overlap_epsilon: eps,
        chamfer: chamfer(&two.p_hat, p)?,
        cycle_error,
        seam_fraction: seams.fraction(),
        uv_side_length: uv_side_length(&uv),
    };
    Ok(Evaluation {
        report,
        uv,
        seams,
        normals: jf.normals.clone(),
        mesh,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::brute_force_knn;
    use crate::networks::init_params;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn seams_on_a_smooth_lattice_are_empty() {
        let n = 10;
        let p = PointCloud3::new((0..n * n).map(|i| [(i % n) as f64, (i / n) as f64, 0.0]).collect());
        let q = UvCloud::new(p.points.iter().map(|x| [x[0] * 0.001, x[1] * 0.001]).collect());
        let s = extract_seams(&p, &q, 3, 0.01).unwrap();
        assert!(s.indices.is_empty());
    }

    #[test]
    fn three_collinear_points() {
        let p = PointCloud3::new(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
        let q = UvCloud::new(vec![[0.0, 0.0], [0.005, 0.0], [0.9, 0.0]]);
        let t = seam_threshold(&q, 0.01);
        assert!((t - 0.009).abs() < 1e-15);
        let s = extract_seams(&p, &q, 2, t).unwrap();
        // with K_cut = 2 every point sees both others
        assert_eq!(s.gaps, vec![0.9, 0.895, 0.9]);
        assert_eq!(s.indices, vec![0, 1, 2]);
        let s1 = extract_seams(&p, &q, 1, t).unwrap();
        assert_eq!(s1.gaps, vec![0.005, 0.005, 0.895]);
        assert_eq!(s1.indices, vec![2]);
    }

    #[test]
    fn seams_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let p = PointCloud3::new((0..500).map(|_| [rng.random(), rng.random(), rng.random()]).collect());
        let q = UvCloud::new((0..500).map(|_| [rng.random(), rng.random()]).collect());
        let s = extract_seams(&p, &q, 3, 0.3).unwrap();
        for i in 0..500 {
            let d = brute_force_knn(&p.points, &p.points[i], 3, Some(i))
                .into_iter()
                .map(|j| ((q.coords[i][0] - q.coords[j][0]).powi(2) + (q.coords[i][1] - q.coords[j][1]).powi(2)).sqrt())
                .fold(0.0, f64::max);
            assert!((s.gaps[i] - d).abs() < 1e-12);
            if (d - 0.3).abs() > 1e-12 {
                assert_eq!(s.indices.contains(&i), d > 0.3);
            }
        }
        assert!(extract_seams(&p, &UvCloud::new(vec![[0.0; 2]; 3]), 3, 0.1).is_err());
    }

    #[test]
    fn inference_matches_training_forward() {
        let net = init_params(2);
        let p = PointCloud3::new(vec![[0.1, 0.2, 0.3], [-0.4, 0.0, 0.9], [0.5, 0.5, -0.5], [0.0, 1.0, 0.0]]);
        let state = run_pipeline(&net, &p, &make_grid(4).unwrap(), BranchMode::Both).unwrap();
        assert_eq!(infer_uv(&net, &p), state.three.unwrap().q);
        let perm = [3, 1, 0, 2];
        let (chunked, normals) = infer_uv_with_normals(&net, &p, 3).unwrap();
        assert_eq!(chunked, infer_uv(&net, &p));
        assert_eq!(normals.len(), 4);
        let a = infer_uv(&net, &p);
        let b = infer_uv(&net, &p.select(&perm));
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(b.coords[k], a.coords[i]);
        }
    }

    fn equilateral(uvs: [[f64; 2]; 3]) -> TriangleMesh {
        TriangleMesh {
            vertices: vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.5, 3f64.sqrt() / 2.0, 0.0]],
            triangles: vec![[0, 1, 2]],
            uvs: Some(uvs.to_vec()),
        }
    }

    #[test]
    fn conformality_examples() {
        let iso = equilateral([[0.0, 0.0], [1.0, 0.0], [0.5, 3f64.sqrt() / 2.0]]);
        assert!(conformality_metric(&iso).unwrap().mean_angle_error < 1e-12);
        // UV angles 90°, 45°, 45°
        let right = equilateral([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]);
        let c = conformality_metric(&right).unwrap();
        assert!((c.mean_angle_error - 60f64.to_radians() / 3.0).abs() < 1e-12);
        assert!((c.mean_angle_error - 0.3491).abs() < 5e-5);

        let mut with_degenerate = right.clone();
        with_degenerate.vertices.push([2.0, 0.0, 0.0]);
        with_degenerate.uvs.as_mut().unwrap().push([3.0, 3.0]);
        with_degenerate.triangles.push([0, 1, 3]);
        let c2 = conformality_metric(&with_degenerate).unwrap();
        assert_eq!(c2.degenerate_3d, 1);
        assert_eq!(c2.triangles_used, 1);
        assert_eq!(c2.mean_angle_error, c.mean_angle_error);

        let collapsed = equilateral([[0.0, 0.0], [0.0, 0.0], [0.0, 0.0]]);
        let c3 = conformality_metric(&collapsed).unwrap();
        assert!(c3.mean_angle_error <= std::f64::consts::PI);
    }

    #[test]
    fn flips_are_counted_against_the_majority() {
        let mut m = TriangleMesh {
            vertices: vec![[0.0; 3]; 4],
            triangles: vec![[0, 1, 2], [1, 3, 2], [0, 2, 1]],
            uvs: Some(vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]),
        };
        assert!((flip_fraction(&m).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        for uv in m.uvs.as_mut().unwrap() {
            uv[0] = -uv[0];
        }
        assert!((flip_fraction(&m).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn overlap_examples() {
        let lattice = UvCloud::new((0..25).map(|i| [(i % 5) as f64, (i / 5) as f64]).collect());
        assert_eq!(uv_overlap_fraction(&lattice, 0.5), 0.0);
        assert_eq!(uv_overlap_fraction(&UvCloud::new(vec![[0.2, 0.2]; 6]), 0.1), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = UvCloud::new((0..300).map(|_| [rng.random(), rng.random()]).collect());
        let brute = (0..300)
            .filter(|&i| {
                (0..300).filter(|&j| j != i).any(|j| {
                    ((q.coords[i][0] - q.coords[j][0]).powi(2) + (q.coords[i][1] - q.coords[j][1]).powi(2)).sqrt() < 0.02
                })
            })
            .count();
        assert_eq!(uv_overlap_fraction(&q, 0.02), brute as f64 / 300.0);
    }

    #[test]
    fn evaluation_on_an_untrained_net() {
        let net = init_params(0);
        let p = crate::geometry::shapes::fibonacci_sphere(64);
        let mesh = crate::geometry::shapes::icosphere(1);
        let e = evaluate(
            &net,
            &p,
            Some(&mesh),
            EvalSettings {
                eps_factor: 0.1,
                k_cut: 3,
                t_cut_fraction: 0.01,
            },
        )
        .unwrap();
        let r = &e.report;
        assert_eq!(r.points, 64);
        assert!(r.conformality.unwrap() >= 0.0 && r.conformality.unwrap() <= std::f64::consts::PI);
        assert!((0.0..=1.0).contains(&r.flip_fraction.unwrap()));
        assert!((0.0..=1.0).contains(&r.uv_overlap_fraction));
        assert_eq!(e.mesh.unwrap().uvs.unwrap().len(), mesh.vertices.len());
        let json = serde_json::to_string(r).unwrap();
        assert_eq!(serde_json::from_str::<MetricReport>(&json).unwrap(), *r);
    }

    fn rot2(t: f64, p: [f64; 2]) -> [f64; 2] {
        [t.cos() * p[0] - t.sin() * p[1], t.sin() * p[0] + t.cos() * p[1]]
    }

    proptest! {
        #[test]
        fn conformality_similarity_invariance(
            uv in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 4),
            z in prop::collection::vec(-1.0f64..1.0, 4),
            t in 0.0f64..6.3, s in 0.1f64..10.0, dx in -3.0f64..3.0,
        ) {
            let mesh = TriangleMesh {
                vertices: (0..4).map(|i| [uv[i].0 + i as f64, uv[i].1 * 2.0, z[i]]).collect(),
                triangles: vec![[0, 1, 2], [0, 2, 3]],
                uvs: Some(uv.iter().map(|&(a, b)| [a, b]).collect()),
            };
            let base = conformality_metric(&mesh).unwrap().mean_angle_error;
            prop_assert!((0.0..=std::f64::consts::PI).contains(&base));
            let moved_uv = TriangleMesh {
                uvs: Some(mesh.uvs.as_ref().unwrap().iter().map(|&p| {
                    let r = rot2(t, p);
                    [s * r[0] + dx, s * r[1] - dx]
                }).collect()),
                ..mesh.clone()
            };
            prop_assert!((conformality_metric(&moved_uv).unwrap().mean_angle_error - base).abs() < 1e-9);
            let moved_3d = TriangleMesh {
                vertices: mesh.vertices.iter().map(|v| {
                    let r = rot2(t, [v[0], v[2]]);
                    [r[0] + dx, v[1] - 1.0, r[1]]
                }).collect(),
                ..mesh.clone()
            };
            prop_assert!((conformality_metric(&moved_3d).unwrap().mean_angle_error - base).abs() < 1e-9);
        }
    }
}
