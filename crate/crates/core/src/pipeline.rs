//! One forward pass of the bi-directional cycle mapping.
//!
//! 3D→2D→3D: `S = Cut(P)`, `Q = Unwrap(S)`, `S_cycle = Wrap(Q)`,
//! `P_cycle = Stitch(S_cycle)`.
//!
//! 2D→3D→2D: `Q̂ = Deform(G)`, `Ŝ = Wrap(Q̂)`, `P̂ = Stitch(Ŝ)`,
//! `Ŝ_cycle = Cut(P̂)`, `Q̂_cycle = Unwrap(Ŝ_cycle)`.
//!
//! The Jacobians of `f = g = Stitch∘Wrap` are obtained by pushing the two
//! UV tangent directions through the same linearized stacks that produced
//! `P_cycle` and `P̂`, so they stay differentiable with respect to the
//! network parameters.

use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{normal_from_jacobian, Jacobian32, Mat, Tape, Var};
use crate::geometry::{PointCloud3, UvCloud};
use crate::networks::{NetVars, StackTrace, SubNetworkSet};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum PipelineError {
    #[error("non-finite values produced at stage `{0}`")]
    NonFinite(&'static str),
    #[error("grid needs at least 4 points, got {0}")]
    GridTooSmall(usize),
}

/// Which cycle branches participate in a step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BranchMode {
    #[default]
    Both,
    #[serde(rename = "3d-only")]
    ThreeDOnly,
    #[serde(rename = "2d-only")]
    TwoDOnly,
}

impl BranchMode {
    pub fn has_3d(self) -> bool {
        matches!(self, BranchMode::Both | BranchMode::ThreeDOnly)
    }

    pub fn has_2d(self) -> bool {
        matches!(self, BranchMode::Both | BranchMode::TwoDOnly)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BranchMode::Both => "both",
            BranchMode::ThreeDOnly => "3d-only",
            BranchMode::TwoDOnly => "2d-only",
        }
    }
}

impl std::str::FromStr for BranchMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "both" => Ok(BranchMode::Both),
            "3d-only" => Ok(BranchMode::ThreeDOnly),
            "2d-only" => Ok(BranchMode::TwoDOnly),
            other => Err(format!("unknown branch mode `{other}` (both | 3d-only | 2d-only)")),
        }
    }
}

/// Lattice of `⌈√n⌉ × ⌈√n⌉` points spanning `[-1, 1]²`, truncated to the
/// first `n` in row-major order.
pub fn make_grid(n: usize) -> Result<UvCloud, PipelineError> {
    if n < 4 {
        return Err(PipelineError::GridTooSmall(n));
    }
    let k = (n as f64).sqrt().ceil() as usize;
    let k = if k * k < n { k + 1 } else { k };
    let step = 2.0 / (k - 1) as f64;
    let coord = |i: usize| if i + 1 == k { 1.0 } else { -1.0 + step * i as f64 };
    Ok(UvCloud::new((0..n).map(|i| [coord(i / k), coord(i % k)]).collect()))
}

/// Rows at which Jacobians are evaluated: all rows when `n ≤ max_points`,
/// otherwise a random subset of `max_points` rows (sorted).
pub fn jacobian_rows(n: usize, max_points: usize, rng: &mut ChaCha8Rng) -> Option<Vec<usize>> {
    if n <= max_points {
        return None;
    }
    let mut rows = sample(rng, n, max_points).into_vec();
    rows.sort_unstable();
    Some(rows)
}

/// Tape handles of the 3D→2D→3D branch.
#[derive(Clone, Debug)]
pub struct Graph3d {
    pub s: Var,
    pub q: Var,
    pub s_cycle: Var,
    pub p_cycle: Var,
    wrap_trace: StackTrace,
    stitch_trace: StackTrace,
}

/// Tape handles of the 2D→3D→2D branch.
#[derive(Clone, Debug)]
pub struct Graph2d {
    pub q_hat: Var,
    pub s_hat: Var,
    pub p_hat: Var,
    pub s_hat_cycle: Var,
    pub q_hat_cycle: Var,
    wrap_trace: StackTrace,
    stitch_trace: StackTrace,
}

/// Tape handles of per-point Jacobian columns at `rows` (all rows if `None`).
#[derive(Clone, Debug)]
pub struct JacobianGraph {
    pub rows: Option<Vec<usize>>,
    pub fu: Var,
    pub fv: Var,
}

/// A full forward pass recorded on a tape.
#[derive(Clone, Debug)]
pub struct PipelineGraph {
    pub p: Var,
    pub g: Var,
    pub three: Option<Graph3d>,
    pub two: Option<Graph2d>,
    pub jf: Option<JacobianGraph>,
    pub jg: Option<JacobianGraph>,
}

/// Options for [`record_pipeline`].
#[derive(Clone, Debug, Default)]
pub struct PassOptions {
    pub branches: BranchMode,
    pub with_jacobians: bool,
    pub jf_rows: Option<Vec<usize>>,
    pub jg_rows: Option<Vec<usize>>,
}

fn check(v: Var, tape: &Tape, stage: &'static str) -> Result<Var, PipelineError> {
    if tape.value(v).is_finite() {
        Ok(v)
    } else {
        Err(PipelineError::NonFinite(stage))
    }
}

/// `S = Cut(P)`, `Q = Unwrap(S)`, `S_cycle = Wrap(Q)`, `P_cycle = Stitch(S_cycle)`.
pub fn record_3d_branch(tape: &mut Tape, net: &NetVars, p: Var) -> Result<Graph3d, PipelineError> {
    let s = check(net.cut(tape, p), tape, "cut")?;
    let q = check(net.unwrap(tape, s), tape, "unwrap")?;
    let wrap_trace = net.wrap(tape, q);
    let s_cycle = check(wrap_trace.output, tape, "wrap")?;
    let stitch_trace = net.stitch(tape, s_cycle);
    let p_cycle = check(stitch_trace.output, tape, "stitch")?;
    Ok(Graph3d {
        s,
        q,
        s_cycle,
        p_cycle,
        wrap_trace,
        stitch_trace,
    })
}

/// `Q̂ = Deform(G)`, `Ŝ = Wrap(Q̂)`, `P̂ = Stitch(Ŝ)`, `Ŝ_cycle = Cut(P̂)`,
/// `Q̂_cycle = Unwrap(Ŝ_cycle)`.
pub fn record_2d_branch(tape: &mut Tape, net: &NetVars, g: Var) -> Result<Graph2d, PipelineError> {
    let q_hat = check(net.deform(tape, g), tape, "deform")?;
    let wrap_trace = net.wrap(tape, q_hat);
    let s_hat = check(wrap_trace.output, tape, "wrap")?;
    let stitch_trace = net.stitch(tape, s_hat);
    let p_hat = check(stitch_trace.output, tape, "stitch")?;
    let s_hat_cycle = check(net.cut(tape, p_hat), tape, "cut")?;
    let q_hat_cycle = check(net.unwrap(tape, s_hat_cycle), tape, "unwrap")?;
    Ok(Graph2d {
        q_hat,
        s_hat,
        p_hat,
        s_hat_cycle,
        q_hat_cycle,
        wrap_trace,
        stitch_trace,
    })
}

/// Jacobian columns of `Stitch∘Wrap` linearized at the recorded traces.
fn record_jacobian(
    tape: &mut Tape,
    net: &NetVars,
    wrap: &StackTrace,
    stitch: &StackTrace,
    n: usize,
    rows: Option<Vec<usize>>,
) -> Result<JacobianGraph, PipelineError> {
    let m = rows.as_ref().map_or(n, Vec::len);
    let mut seed = Mat::zeros(2 * m, 2);
    for r in 0..m {
        seed.set(r, 0, 1.0);
        seed.set(m + r, 1, 1.0);
    }
    let seed = tape.input(seed);
    let t = match &rows {
        None => {
            let tw = net.wrap.tangent(tape, wrap, seed);
            net.stitch.tangent(tape, stitch, tw)
        }
        Some(idx) => {
            let tw = net.wrap.tangent_at(tape, wrap, idx, seed);
            net.stitch.tangent_at(tape, stitch, idx, tw)
        }
    };
    let t = check(t, tape, "jacobian")?;
    let fu = tape.slice_rows(t, 0, m);
    let fv = tape.slice_rows(t, m, m);
    Ok(JacobianGraph { rows, fu, fv })
}

/// Records the full pass on `tape`. `p` is `N × 3`, `g` is `M × 2`.
pub fn record_pipeline(
    tape: &mut Tape,
    net: &NetVars,
    p: Mat,
    g: Mat,
    opts: PassOptions,
) -> Result<PipelineGraph, PipelineError> {
    let (np, ng) = (p.rows(), g.rows());
    let pv = tape.input(p);
    let gv = tape.input(g);
    let three = if opts.branches.has_3d() {
        Some(record_3d_branch(tape, net, pv)?)
    } else {
        None
    };
    let two = if opts.branches.has_2d() {
        Some(record_2d_branch(tape, net, gv)?)
    } else {
        None
    };
    let (mut jf, mut jg) = (None, None);
    if opts.with_jacobians {
        if let Some(b) = &three {
            jf = Some(record_jacobian(tape, net, &b.wrap_trace, &b.stitch_trace, np, opts.jf_rows)?);
        }
        if let Some(b) = &two {
            jg = Some(record_jacobian(tape, net, &b.wrap_trace, &b.stitch_trace, ng, opts.jg_rows)?);
        }
    }
    Ok(PipelineGraph {
        p: pv,
        g: gv,
        three,
        two,
        jf,
        jg,
    })
}

/// Output clouds of the 3D→2D→3D branch.
#[derive(Clone, Debug, PartialEq)]
pub struct Branch3d {
    pub s: PointCloud3,
    pub q: UvCloud,
    pub s_cycle: PointCloud3,
    pub p_cycle: PointCloud3,
}

/// Output clouds of the 2D→3D→2D branch.
#[derive(Clone, Debug, PartialEq)]
pub struct Branch2d {
    pub q_hat: UvCloud,
    pub s_hat: PointCloud3,
    pub p_hat: PointCloud3,
    pub s_hat_cycle: PointCloud3,
    pub q_hat_cycle: UvCloud,
}

/// Per-point Jacobians and derived unit normals (`None` where degenerate).
#[derive(Clone, Debug, PartialEq)]
pub struct BranchJacobians {
    /// Row indices the Jacobians belong to; `None` means every row in order.
    pub rows: Option<Vec<usize>>,
    pub jacobians: Vec<Jacobian32>,
    pub normals: Vec<Option<[f64; 3]>>,
}

impl BranchJacobians {
    fn from_graph(tape: &Tape, j: &JacobianGraph) -> Self {
        let (fu, fv) = (tape.value(j.fu), tape.value(j.fv));
        let jacobians: Vec<Jacobian32> = (0..fu.rows())
            .map(|r| {
                Jacobian32::new(
                    [fu.get(r, 0), fu.get(r, 1), fu.get(r, 2)],
                    [fv.get(r, 0), fv.get(r, 1), fv.get(r, 2)],
                )
            })
            .collect();
        let normals = jacobians.iter().map(|j| normal_from_jacobian(j).ok()).collect();
        Self {
            rows: j.rows.clone(),
            jacobians,
            normals,
        }
    }

    pub fn degenerate_count(&self) -> usize {
        self.normals.iter().filter(|n| n.is_none()).count()
    }
}

/// Every intermediate of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineState {
    pub p: PointCloud3,
    pub g: UvCloud,
    pub three: Option<Branch3d>,
    pub two: Option<Branch2d>,
    pub jf: Option<BranchJacobians>,
    pub jg: Option<BranchJacobians>,
}

impl PipelineState {
    pub fn from_graph(tape: &Tape, graph: &PipelineGraph) -> Self {
        let cloud = |v: Var| PointCloud3::from_mat(tape.value(v));
        let uv = |v: Var| UvCloud::from_mat(tape.value(v));
        Self {
            p: cloud(graph.p),
            g: uv(graph.g),
            three: graph.three.as_ref().map(|b| Branch3d {
                s: cloud(b.s),
                q: uv(b.q),
                s_cycle: cloud(b.s_cycle),
                p_cycle: cloud(b.p_cycle),
            }),
            two: graph.two.as_ref().map(|b| Branch2d {
                q_hat: uv(b.q_hat),
                s_hat: cloud(b.s_hat),
                p_hat: cloud(b.p_hat),
                s_hat_cycle: cloud(b.s_hat_cycle),
                q_hat_cycle: uv(b.q_hat_cycle),
            }),
            jf: graph.jf.as_ref().map(|j| BranchJacobians::from_graph(tape, j)),
            jg: graph.jg.as_ref().map(|j| BranchJacobians::from_graph(tape, j)),
        }
    }
}

/// Runs both branches and the Jacobians without recording gradients.
pub fn run_pipeline(
    net: &SubNetworkSet,
    p: &PointCloud3,
    g: &UvCloud,
    branches: BranchMode,
) -> Result<PipelineState, PipelineError> {
    let mut tape = Tape::new();
    let vars = net.register(&mut tape);
    let graph = record_pipeline(
        &mut tape,
        &vars,
        p.to_mat(),
        g.to_mat(),
        PassOptions {
            branches,
            with_jacobians: true,
            ..Default::default()
        },
    )?;
    Ok(PipelineState::from_graph(&tape, &graph))
}

/// 3D→2D→3D branch on its own.
pub fn forward_3d_branch(net: &SubNetworkSet, p: &PointCloud3) -> Result<Branch3d, PipelineError> {
    let mut tape = Tape::new();
    let vars = net.register(&mut tape);
    let pv = tape.input(p.to_mat());
    let b = record_3d_branch(&mut tape, &vars, pv)?;
    Ok(Branch3d {
        s: PointCloud3::from_mat(tape.value(b.s)),
        q: UvCloud::from_mat(tape.value(b.q)),
        s_cycle: PointCloud3::from_mat(tape.value(b.s_cycle)),
        p_cycle: PointCloud3::from_mat(tape.value(b.p_cycle)),
    })
}

/// 2D→3D→2D branch on its own.
pub fn forward_2d_branch(net: &SubNetworkSet, g: &UvCloud) -> Result<Branch2d, PipelineError> {
    let mut tape = Tape::new();
    let vars = net.register(&mut tape);
    let gv = tape.input(g.to_mat());
    let b = record_2d_branch(&mut tape, &vars, gv)?;
    Ok(Branch2d {
        q_hat: UvCloud::from_mat(tape.value(b.q_hat)),
        s_hat: PointCloud3::from_mat(tape.value(b.s_hat)),
        p_hat: PointCloud3::from_mat(tape.value(b.p_hat)),
        s_hat_cycle: PointCloud3::from_mat(tape.value(b.s_hat_cycle)),
        q_hat_cycle: UvCloud::from_mat(tape.value(b.q_hat_cycle)),
    })
}

/// Jacobians of `Stitch∘Wrap` at every point of `q` and of `q_hat`, with
/// their unit normals.
pub fn compute_branch_jacobians(
    net: &SubNetworkSet,
    q: &UvCloud,
    q_hat: &UvCloud,
) -> Result<(BranchJacobians, BranchJacobians), PipelineError> {
    Ok((surface_jacobians(net, q)?, surface_jacobians(net, q_hat)?))
}

/// Jacobians of `Stitch∘Wrap` at every point of `uv`.
pub fn surface_jacobians(net: &SubNetworkSet, uv: &UvCloud) -> Result<BranchJacobians, PipelineError> {
    let mut tape = Tape::new();
    let vars = net.register(&mut tape);
    let x = tape.input(uv.to_mat());
    let w = vars.wrap(&mut tape, x);
    let s = vars.stitch(&mut tape, w.output);
    let j = record_jacobian(&mut tape, &vars, &w, &s, uv.len(), None)?;
    Ok(BranchJacobians::from_graph(&tape, &j))
}
