//! Training objectives: unwrapping, wrapping, cycle consistency, distortion
//! and anti-flipping, plus their weighted sum.
//!
//! Each objective exists twice: a value-level function over plain clouds
//! (used for evaluation and as the finite-difference reference) and a
//! tape-level recording used for training. Neighbor assignments are
//! computed from current values and then held fixed.

use std::f64::consts::FRAC_PI_2;
use std::ops::Add;

use serde::{Deserialize, Serialize};

use crate::autodiff::{normal_from_jacobian, singular_values_3x2, Jacobian32, Mat, Tape, Var};
use crate::geometry::{
    chamfer, nearest_assignment, uv_side_length, GeometryError, KdTree, PointCloud3, UvCloud,
    MIN_UV_EXTENT,
};
use crate::pipeline::{BranchJacobians, JacobianGraph, PipelineGraph, PipelineState};

/// Distortion weight suggested for shapes with intricate geometry.
pub const COMPLEX_SHAPE_DISTORTION_WEIGHT: f64 = 1e-4;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum LossError {
    #[error("loss weight `{name}` must be a non-negative number, got {value}")]
    NegativeWeight { name: &'static str, value: f64 },
    #[error("shape mismatch in {what}: {left} vs {right} rows")]
    ShapeMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistortionMode {
    #[default]
    Conformal,
    Isometric,
}

impl DistortionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            DistortionMode::Conformal => "conformal",
            DistortionMode::Isometric => "isometric",
        }
    }
}

impl std::str::FromStr for DistortionMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "conformal" => Ok(DistortionMode::Conformal),
            "isometric" => Ok(DistortionMode::Isometric),
            other => Err(format!("unknown distortion mode `{other}` (conformal | isometric)")),
        }
    }
}

/// How summed penalties are normalized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    /// Divide by the number of terms.
    #[default]
    Mean,
    /// Plain sums.
    Sum,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub unwrap: f64,
    pub wrap: f64,
    pub cycle: f64,
    pub distortion: f64,
    pub aflip: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            unwrap: 0.01,
            wrap: 1.0,
            cycle: 0.01,
            distortion: 0.01,
            aflip: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        for (name, value) in self.named() {
            if !(value >= 0.0) || !value.is_finite() {
                return Err(LossError::NegativeWeight { name, value });
            }
        }
        Ok(())
    }

    fn named(&self) -> [(&'static str, f64); 5] {
        [
            ("unwrap", self.unwrap),
            ("wrap", self.wrap),
            ("cycle", self.cycle),
            ("distortion", self.distortion),
            ("aflip", self.aflip),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub distortion: DistortionMode,
    /// UV neighbors per point in the unwrapping penalty.
    pub k_unwrap: usize,
    /// Spatial neighbors per point in the anti-flipping penalty.
    pub k_aflip: usize,
    pub t_angle: f64,
    /// `ε = eps_factor · L(Q) / √N`.
    pub eps_factor: f64,
    pub reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            distortion: DistortionMode::Conformal,
            k_unwrap: 8,
            k_aflip: 4,
            t_angle: FRAC_PI_2,
            eps_factor: 0.1,
            reduction: Reduction::Mean,
        }
    }
}

/// A summed penalty together with its number of terms and how many of them
/// were non-zero.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Reduced {
    pub sum: f64,
    pub count: usize,
    pub active: usize,
}

impl Reduced {
    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.sum / self.count as f64
        }
    }

    pub fn reduce(&self, r: Reduction) -> f64 {
        match r {
            Reduction::Mean => self.mean(),
            Reduction::Sum => self.sum,
        }
    }
}

impl Add for Reduced {
    type Output = Reduced;
    fn add(self, o: Reduced) -> Reduced {
        Reduced {
            sum: self.sum + o.sum,
            count: self.count + o.count,
            active: self.active + o.active,
        }
    }
}

/// `ε = factor · max(L(Q), 1e-6) / √N`.
pub fn unwrap_epsilon(q: &UvCloud, factor: f64) -> f64 {
    factor * uv_side_length(q).max(MIN_UV_EXTENT) / (q.len() as f64).sqrt()
}

/// `(i, j)` for each point `i` and each of its `k` nearest other points `j`.
fn neighbor_pairs<const D: usize>(
    points: &[[f64; D]],
    k: usize,
) -> Result<Vec<(usize, usize)>, GeometryError> {
    let tree = KdTree::new(points);
    Ok(tree
        .knn_all(k)?
        .into_iter()
        .enumerate()
        .flat_map(|(i, nb)| nb.into_iter().map(move |j| (i, j)))
        .collect())
}

fn hinge(x: f64) -> f64 {
    x.max(0.0)
}

/// `Σ_i Σ_k max(0, ε − ‖q_i − q_i^(k)‖)` over the `k_u` nearest UV
/// neighbors of each point.
pub fn unwrap_loss(q: &UvCloud, k_u: usize, eps: f64) -> Result<Reduced, LossError> {
    let pairs = neighbor_pairs(&q.coords, k_u)?;
    let mut out = Reduced {
        count: pairs.len(),
        ..Default::default()
    };
    for (i, j) in pairs {
        let (a, b) = (q.coords[i], q.coords[j]);
        let h = hinge(eps - (a[0] - b[0]).hypot(a[1] - b[1]));
        out.sum += h;
        out.active += usize::from(h > 0.0);
    }
    Ok(out)
}

/// Chamfer distance between the reconstructed and the input cloud.
pub fn wrap_loss(p_hat: &PointCloud3, p: &PointCloud3) -> Result<f64, LossError> {
    Ok(chamfer(p_hat, p)?)
}

fn mean_abs_diff<const D: usize>(
    what: &'static str,
    a: &[[f64; D]],
    b: &[[f64; D]],
) -> Result<f64, LossError> {
    if a.len() != b.len() {
        return Err(LossError::ShapeMismatch {
            what,
            left: a.len(),
            right: b.len(),
        });
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = a
        .iter()
        .zip(b)
        .flat_map(|(x, y)| x.iter().zip(y).map(|(u, v)| (u - v).abs()))
        .sum();
    Ok(s / (a.len() * D) as f64)
}

/// Sum of the mean absolute differences of the four round-trip pairs
/// present in `state`.
pub fn cycle_loss(state: &PipelineState) -> Result<f64, LossError> {
    let mut total = 0.0;
    if let Some(b) = &state.three {
        total += mean_abs_diff("P/P_cycle", &state.p.points, &b.p_cycle.points)?;
        total += mean_abs_diff("S/S_cycle", &b.s.points, &b.s_cycle.points)?;
    }
    if let Some(b) = &state.two {
        total += mean_abs_diff("Q̂/Q̂_cycle", &b.q_hat.coords, &b.q_hat_cycle.coords)?;
        total += mean_abs_diff("Ŝ/Ŝ_cycle", &b.s_hat.points, &b.s_hat_cycle.points)?;
    }
    Ok(total)
}

fn distortion_term(sigma: (f64, f64), mode: DistortionMode) -> f64 {
    let (s1, s2) = sigma;
    match mode {
        DistortionMode::Conformal => (s1 - s2).abs(),
        DistortionMode::Isometric => (s1 - 1.0).abs() + (s2 - 1.0).abs(),
    }
}

/// Per-point distortion of the Jacobians, summed.
pub fn distortion_loss(jacobians: &[Jacobian32], mode: DistortionMode) -> Reduced {
    let mut out = Reduced {
        count: jacobians.len(),
        ..Default::default()
    };
    for j in jacobians {
        let d = distortion_term(singular_values_3x2(j), mode);
        out.sum += d;
        out.active += usize::from(d > 0.0);
    }
    out
}

/// Neighbor pairs among the points with a defined normal, as indices into
/// `points`. `k` is reduced when too few valid points remain.
fn aflip_pairs(
    points: &[[f64; 3]],
    valid: &[usize],
    k: usize,
) -> Result<Vec<(usize, usize)>, LossError> {
    if k >= points.len() {
        return Err(GeometryError::NeighborCount {
            k,
            size: points.len(),
        }
        .into());
    }
    let k = k.min(valid.len().saturating_sub(1));
    if k == 0 {
        return Ok(Vec::new());
    }
    let sub: Vec<[f64; 3]> = valid.iter().map(|&i| points[i]).collect();
    Ok(neighbor_pairs(&sub, k)?
        .into_iter()
        .map(|(a, b)| (valid[a], valid[b]))
        .collect())
}

fn angle_between(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] * b[0] + a[1] * b[1] + a[2] * b[2]).clamp(-1.0, 1.0).acos()
}

/// `Σ_i Σ_k max(0, ∠(n_i, n_i^(k)) − T_angle)` over the `k` nearest spatial
/// neighbors. Points without a normal take no part.
pub fn antiflip_loss(
    points: &PointCloud3,
    normals: &[Option<[f64; 3]>],
    k: usize,
    t_angle: f64,
) -> Result<Reduced, LossError> {
    if normals.len() != points.len() {
        return Err(LossError::ShapeMismatch {
            what: "antiflip normals",
            left: points.len(),
            right: normals.len(),
        });
    }
    let valid: Vec<usize> = (0..normals.len()).filter(|&i| normals[i].is_some()).collect();
    let pairs = aflip_pairs(&points.points, &valid, k)?;
    let mut out = Reduced {
        count: pairs.len(),
        ..Default::default()
    };
    for (i, j) in pairs {
        let (Some(a), Some(b)) = (normals[i], normals[j]) else {
            unreachable!("pairs only join valid points")
        };
        let h = hinge(angle_between(&a, &b) - t_angle);
        out.sum += h;
        out.active += usize::from(h > 0.0);
    }
    Ok(out)
}

/// Positions the Jacobians of a branch were evaluated at.
fn jacobian_positions(points: &PointCloud3, rows: &Option<Vec<usize>>) -> PointCloud3 {
    match rows {
        None => points.clone(),
        Some(idx) => points.select(idx),
    }
}

/// One logged evaluation of the objective.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub unwrap: Option<f64>,
    pub wrap: Option<f64>,
    pub cycle: Option<f64>,
    pub distortion: Option<f64>,
    pub aflip: Option<f64>,
    pub total: f64,
    pub weights: Option<LossWeights>,
    pub epsilon: Option<f64>,
    /// Unwrap pairs closer than ε.
    pub unwrap_active: usize,
    /// Neighbor pairs whose normal angle exceeds the threshold.
    pub aflip_active: usize,
    /// Points whose Jacobian has no defined normal.
    pub degenerate: usize,
    pub wall_time: f64,
}

impl LossReport {
    fn terms(&self, w: &LossWeights) -> [(Option<f64>, f64); 5] {
        [
            (self.unwrap, w.unwrap),
            (self.wrap, w.wrap),
            (self.cycle, w.cycle),
            (self.distortion, w.distortion),
            (self.aflip, w.aflip),
        ]
    }

    /// `Σ weight_i · term_i` in the same order the total is accumulated.
    pub fn weighted_sum(&self) -> f64 {
        let w = self.weights.unwrap_or_default();
        weighted_total(self.terms(&w).into_iter())
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

fn weighted_total(terms: impl Iterator<Item = (Option<f64>, f64)>) -> f64 {
    let mut total: Option<f64> = None;
    for (t, w) in terms {
        if let Some(t) = t {
            if w != 0.0 {
                let x = t * w;
                total = Some(total.map_or(x, |s| s + x));
            }
        }
    }
    total.unwrap_or(0.0)
}

/// All terms of the objective on a computed pipeline state.
pub fn total_loss(state: &PipelineState, cfg: &LossConfig) -> Result<LossReport, LossError> {
    cfg.weights.validate()?;
    let mut report = LossReport {
        weights: Some(cfg.weights),
        ..Default::default()
    };
    if let Some(b) = &state.three {
        let eps = unwrap_epsilon(&b.q, cfg.eps_factor);
        let u = unwrap_loss(&b.q, cfg.k_unwrap, eps)?;
        report.epsilon = Some(eps);
        report.unwrap = Some(u.reduce(cfg.reduction));
        report.unwrap_active = u.active;
    }
    if let Some(b) = &state.two {
        report.wrap = Some(wrap_loss(&b.p_hat, &state.p)?);
    }
    if state.three.is_some() || state.two.is_some() {
        report.cycle = Some(cycle_loss(state)?);
    }
    let branches: Vec<(&BranchJacobians, &PointCloud3)> = [
        state.jf.as_ref().zip(state.three.as_ref().map(|b| &b.p_cycle)),
        state.jg.as_ref().zip(state.two.as_ref().map(|b| &b.p_hat)),
    ]
    .into_iter()
    .flatten()
    .collect();
    if !branches.is_empty() {
        let mut dist = Reduced::default();
        let mut flip = Reduced::default();
        for (j, pts) in &branches {
            dist = dist + distortion_loss(&j.jacobians, cfg.distortion);
            let pos = jacobian_positions(pts, &j.rows);
            flip = flip + antiflip_loss(&pos, &j.normals, cfg.k_aflip, cfg.t_angle)?;
            report.degenerate += j.degenerate_count();
        }
        report.distortion = Some(dist.reduce(cfg.reduction));
        report.aflip = Some(flip.reduce(cfg.reduction));
        report.aflip_active = flip.active;
    }
    report.total = report.weighted_sum();
    Ok(report)
}

/// Tape handles of the recorded objective.
#[derive(Clone, Debug)]
pub struct LossVars {
    pub unwrap: Option<Var>,
    pub wrap: Option<Var>,
    pub cycle: Option<Var>,
    pub distortion: Option<Var>,
    pub aflip: Option<Var>,
    pub total: Var,
}

fn points3(m: &Mat) -> Vec<[f64; 3]> {
    PointCloud3::from_mat(m).points
}

fn reduce_var(tape: &mut Tape, sum: Var, count: usize, r: Reduction) -> Var {
    match r {
        Reduction::Mean if count > 0 => tape.scale(sum, 1.0 / count as f64),
        _ => sum,
    }
}

fn record_unwrap(tape: &mut Tape, q: Var, cfg: &LossConfig) -> Result<(Var, Reduced, f64), LossError> {
    let uv = UvCloud::from_mat(tape.value(q));
    let eps = unwrap_epsilon(&uv, cfg.eps_factor);
    let pairs = neighbor_pairs(&uv.coords, cfg.k_unwrap)?;
    let (ii, jj): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
    let a = tape.gather_rows(q, ii);
    let b = tape.gather_rows(q, jj);
    let d = tape.sub(a, b);
    let n = tape.row_norm(d);
    let gap = tape.scale_shift(n, -1.0, eps);
    let h = tape.relu(gap);
    let active = tape.value(h).as_slice().iter().filter(|&&v| v > 0.0).count();
    let s = tape.sum(h);
    let stats = Reduced {
        sum: tape.value(s).item(),
        count: pairs.len(),
        active,
    };
    Ok((reduce_var(tape, s, pairs.len(), cfg.reduction), stats, eps))
}

fn record_chamfer(tape: &mut Tape, a: Var, b: Var) -> Result<Var, LossError> {
    let (pa, pb) = (points3(tape.value(a)), points3(tape.value(b)));
    let ab = nearest_assignment(&pa, &pb)?;
    let ba = nearest_assignment(&pb, &pa)?;
    let mut one = |from: Var, to: Var, nn: Vec<usize>| {
        let t = tape.gather_rows(to, nn);
        let d = tape.sub(from, t);
        let d2 = tape.row_dot(d, d);
        tape.mean(d2)
    };
    let x = one(a, b, ab);
    let y = one(b, a, ba);
    Ok(tape.add(x, y))
}

fn record_mean_abs(tape: &mut Tape, what: &'static str, a: Var, b: Var) -> Result<Var, LossError> {
    let (ra, rb) = (tape.value(a).rows(), tape.value(b).rows());
    if ra != rb {
        return Err(LossError::ShapeMismatch {
            what,
            left: ra,
            right: rb,
        });
    }
    let d = tape.sub(a, b);
    let d = tape.abs(d);
    Ok(tape.mean(d))
}

fn sum_vars(tape: &mut Tape, vars: impl IntoIterator<Item = Var>) -> Option<Var> {
    vars.into_iter().reduce(|acc, v| tape.add(acc, v))
}

struct JacobianTerms {
    dist_sum: Var,
    dist: Reduced,
    flip_sum: Option<Var>,
    flip: Reduced,
    degenerate: usize,
}

fn record_jacobian_terms(
    tape: &mut Tape,
    jac: &JacobianGraph,
    positions: Var,
    cfg: &LossConfig,
) -> Result<JacobianTerms, LossError> {
    let sv = tape.singular_values(jac.fu, jac.fv);
    let per_point = match cfg.distortion {
        DistortionMode::Conformal => {
            let c = tape.input(Mat::from_rows(&[[1.0], [-1.0]]));
            tape.matmul(sv, c)
        }
        DistortionMode::Isometric => tape.scale_shift(sv, 1.0, -1.0),
    };
    let per_point = tape.abs(per_point);
    let m = tape.value(sv).rows();
    let dist = Reduced {
        sum: 0.0,
        count: m,
        active: 0,
    };
    let dist_sum = tape.sum(per_point);

    let (fu, fv) = (tape.value(jac.fu), tape.value(jac.fv));
    let normals: Vec<bool> = (0..m)
        .map(|r| {
            let j = Jacobian32::new(
                [fu.get(r, 0), fu.get(r, 1), fu.get(r, 2)],
                [fv.get(r, 0), fv.get(r, 1), fv.get(r, 2)],
            );
            normal_from_jacobian(&j).is_ok()
        })
        .collect();
    let valid: Vec<usize> = (0..m).filter(|&r| normals[r]).collect();
    let all_pos = points3(tape.value(positions));
    let pos: Vec<[f64; 3]> = match &jac.rows {
        None => all_pos,
        Some(idx) => idx.iter().map(|&i| all_pos[i]).collect(),
    };
    let pairs = aflip_pairs(&pos, &valid, cfg.k_aflip)?;
    let mut flip = Reduced {
        count: pairs.len(),
        ..Default::default()
    };
    let flip_sum = if pairs.is_empty() {
        None
    } else {
        let cr = tape.cross(jac.fu, jac.fv);
        let n = tape.normalize_rows(cr);
        let (ii, jj): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let a = tape.gather_rows(n, ii);
        let b = tape.gather_rows(n, jj);
        let cos = tape.row_dot(a, b);
        let ang = tape.acos_clamped(cos);
        let over = tape.scale_shift(ang, 1.0, -cfg.t_angle);
        let h = tape.relu(over);
        flip.active = tape.value(h).as_slice().iter().filter(|&&v| v > 0.0).count();
        Some(tape.sum(h))
    };
    Ok(JacobianTerms {
        dist_sum,
        dist,
        flip_sum,
        flip,
        degenerate: m - valid.len(),
    })
}

/// Records every active term and the weighted total on `tape`.
pub fn record_losses(
    tape: &mut Tape,
    graph: &PipelineGraph,
    cfg: &LossConfig,
) -> Result<(LossVars, LossReport), LossError> {
    cfg.weights.validate()?;
    let mut report = LossReport {
        weights: Some(cfg.weights),
        ..Default::default()
    };

    let unwrap = match &graph.three {
        Some(b) => {
            let (v, stats, eps) = record_unwrap(tape, b.q, cfg)?;
            report.epsilon = Some(eps);
            report.unwrap_active = stats.active;
            Some(v)
        }
        None => None,
    };
    let wrap = match &graph.two {
        Some(b) => Some(record_chamfer(tape, b.p_hat, graph.p)?),
        None => None,
    };

    let mut cyc = Vec::new();
    if let Some(b) = &graph.three {
        cyc.push(record_mean_abs(tape, "P/P_cycle", graph.p, b.p_cycle)?);
        cyc.push(record_mean_abs(tape, "S/S_cycle", b.s, b.s_cycle)?);
    }
    if let Some(b) = &graph.two {
        cyc.push(record_mean_abs(tape, "Q̂/Q̂_cycle", b.q_hat, b.q_hat_cycle)?);
        cyc.push(record_mean_abs(tape, "Ŝ/Ŝ_cycle", b.s_hat, b.s_hat_cycle)?);
    }
    let cycle = sum_vars(tape, cyc);

    let mut jterms = Vec::new();
    if let (Some(j), Some(b)) = (&graph.jf, &graph.three) {
        jterms.push(record_jacobian_terms(tape, j, b.p_cycle, cfg)?);
    }
    if let (Some(j), Some(b)) = (&graph.jg, &graph.two) {
        jterms.push(record_jacobian_terms(tape, j, b.p_hat, cfg)?);
    }
    let (distortion, aflip) = if jterms.is_empty() {
        (None, None)
    } else {
        let dist = jterms.iter().fold(Reduced::default(), |a, t| a + t.dist);
        let flip = jterms.iter().fold(Reduced::default(), |a, t| a + t.flip);
        report.aflip_active = flip.active;
        report.degenerate = jterms.iter().map(|t| t.degenerate).sum();
        let d = sum_vars(tape, jterms.iter().map(|t| t.dist_sum)).expect("non-empty");
        let d = reduce_var(tape, d, dist.count, cfg.reduction);
        let f = match sum_vars(tape, jterms.iter().filter_map(|t| t.flip_sum)) {
            Some(f) => reduce_var(tape, f, flip.count, cfg.reduction),
            None => tape.input(Mat::scalar(0.0)),
        };
        (Some(d), Some(f))
    };

    let w = cfg.weights;
    let mut total: Option<Var> = None;
    for (term, weight) in [
        (unwrap, w.unwrap),
        (wrap, w.wrap),
        (cycle, w.cycle),
        (distortion, w.distortion),
        (aflip, w.aflip),
    ] {
        if let Some(t) = term {
            if weight != 0.0 {
                let x = tape.scale(t, weight);
                total = Some(match total {
                    Some(s) => tape.add(s, x),
                    None => x,
                });
            }
        }
    }
    let total = total.unwrap_or_else(|| tape.input(Mat::scalar(0.0)));

    let val = |v: Option<Var>| v.map(|v| tape.value(v).item());
    report.unwrap = val(unwrap);
    report.wrap = val(wrap);
    report.cycle = val(cycle);
    report.distortion = val(distortion);
    report.aflip = val(aflip);
    report.total = tape.value(total).item();
    Ok((
        LossVars {
            unwrap,
            wrap,
            cycle,
            distortion,
            aflip,
            total,
        },
        report,
    ))
}
