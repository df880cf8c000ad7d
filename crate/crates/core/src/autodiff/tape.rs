//! Append-only Wengert tape over matrix-valued nodes.
//!
//! Every node stores its forward value. `backward` walks the tape in reverse
//! index order (a valid reverse topological order, since nodes can only
//! reference earlier nodes) and accumulates adjoints across fan-out.

use std::sync::Arc;

use super::jacobian::{cross3, dot3, sym2_eigen, DEGENERACY_FLOOR};
use super::mat::{gemm, gemm_into, Mat};
use super::AutodiffError;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param,
    Affine { x: Var, w: Var, b: Var },
    MatMul { x: Var, w: Var },
    LeakyRelu { x: Var, slope: f64 },
    /// Tangent propagation through LeakyReLU; `pre` only selects the slope.
    LeakyGate { t: Var, pre: Var, slope: f64 },
    ConcatCols { a: Var, b: Var },
    ConcatRows { a: Var, b: Var },
    SliceRows { a: Var, start: usize, len: usize },
    GatherRows { a: Var, idx: Arc<Vec<usize>> },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    ScaleShift { a: Var, scale: f64, shift: f64 },
    Abs { a: Var },
    Relu { a: Var },
    RowNorm { a: Var },
    RowDot { a: Var, b: Var },
    Cross { a: Var, b: Var },
    NormalizeRows { a: Var },
    AcosClamped { a: Var },
    SingularValues { fu: Var, fv: Var },
    Sum { a: Var },
    Mean { a: Var },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param => "param",
            Op::Affine { .. } => "affine",
            Op::MatMul { .. } => "matmul",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::LeakyGate { .. } => "leaky_gate",
            Op::ConcatCols { .. } => "concat",
            Op::ConcatRows { .. } => "concat_rows",
            Op::SliceRows { .. } => "slice_rows",
            Op::GatherRows { .. } => "gather_rows",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::ScaleShift { .. } => "scale_shift",
            Op::Abs { .. } => "abs",
            Op::Relu { .. } => "relu",
            Op::RowNorm { .. } => "row_norm",
            Op::RowDot { .. } => "row_dot",
            Op::Cross { .. } => "cross",
            Op::NormalizeRows { .. } => "normalize",
            Op::AcosClamped { .. } => "acos",
            Op::SingularValues { .. } => "singular_values",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
        }
    }
}

/// Recorded computation with forward values.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    ops: Vec<Op>,
    values: Vec<Mat>,
    params: Vec<Var>,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Mat>>,
    params: Vec<Var>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Adjoint of any node; `None` when the root does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&Mat> {
        self.adjoints[v.0].as_ref()
    }

    /// Gradient for every registered parameter, in slot order. Parameters
    /// the root does not depend on get zeros.
    pub fn params(&self) -> Vec<Mat> {
        self.params
            .iter()
            .map(|&p| match &self.adjoints[p.0] {
                Some(g) => g.clone(),
                None => {
                    let (r, c) = self.shapes[p.0];
                    Mat::zeros(r, c)
                }
            })
            .collect()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.values[v.0]
    }

    /// Primitive name recorded at `v`.
    pub fn primitive(&self, v: Var) -> &'static str {
        self.ops[v.0].name()
    }

    /// Identifies the smooth piece of the recorded function: the sign of
    /// every input to a kinked primitive, whether each `acos` input was
    /// clamped, and every gathered index. Two recordings of the same program
    /// with equal signatures evaluate the same smooth branch everywhere.
    pub fn piece_signature(&self) -> Vec<i64> {
        let sign = |m: &Mat| m.as_slice().iter().map(|&v| (v > 0.0) as i64 - (v < 0.0) as i64).collect::<Vec<_>>();
        let mut sig = Vec::new();
        for op in &self.ops {
            match op {
                Op::LeakyRelu { x: a, .. }
                | Op::LeakyGate { pre: a, .. }
                | Op::Relu { a }
                | Op::Abs { a } => sig.extend(sign(&self.values[a.0])),
                Op::AcosClamped { a } => sig.extend(
                    self.values[a.0]
                        .as_slice()
                        .iter()
                        .map(|&v| (v >= 1.0) as i64 - (v <= -1.0) as i64),
                ),
                Op::GatherRows { idx, .. } => sig.extend(idx.iter().map(|&i| i as i64)),
                _ => {}
            }
        }
        sig
    }

    /// Registered parameter handles, in slot order.
    pub fn param_vars(&self) -> &[Var] {
        &self.params
    }

    fn push(&mut self, op: Op) -> Var {
        let value = eval(&op, &self.values);
        self.ops.push(op);
        self.values.push(value);
        Var(self.ops.len() - 1)
    }

    fn push_leaf(&mut self, op: Op, value: Mat) -> Var {
        self.ops.push(op);
        self.values.push(value);
        Var(self.ops.len() - 1)
    }

    pub fn input(&mut self, value: Mat) -> Var {
        self.push_leaf(Op::Input, value)
    }

    /// Registers a trainable parameter; slots are numbered in call order.
    pub fn param(&mut self, value: Mat) -> Var {
        let v = self.push_leaf(Op::Param, value);
        self.params.push(v);
        v
    }

    /// `x·W + b` with `b` a `1 × out` row broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        self.push(Op::Affine { x, w, b })
    }

    pub fn matmul(&mut self, x: Var, w: Var) -> Var {
        self.push(Op::MatMul { x, w })
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.push(Op::LeakyRelu { x, slope })
    }

    /// `t ⊙ LeakyReLU'(pre)`; `t` may stack several tangent blocks of
    /// `pre.rows()` rows each.
    pub fn leaky_gate(&mut self, t: Var, pre: Var, slope: f64) -> Var {
        self.push(Op::LeakyGate { t, pre, slope })
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::ConcatCols { a, b })
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::ConcatRows { a, b })
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        self.push(Op::SliceRows { a, start, len })
    }

    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        self.push(Op::GatherRows {
            a,
            idx: Arc::new(idx),
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Mul { a, b })
    }

    /// `scale·a + shift` elementwise.
    pub fn scale_shift(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        self.push(Op::ScaleShift { a, scale, shift })
    }

    pub fn scale(&mut self, a: Var, scale: f64) -> Var {
        self.scale_shift(a, scale, 0.0)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.push(Op::Abs { a })
    }

    /// `max(0, a)`.
    pub fn relu(&mut self, a: Var) -> Var {
        self.push(Op::Relu { a })
    }

    /// Per-row Euclidean norm, `N × 1`.
    pub fn row_norm(&mut self, a: Var) -> Var {
        self.push(Op::RowNorm { a })
    }

    /// Per-row dot product, `N × 1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::RowDot { a, b })
    }

    /// Per-row 3D cross product.
    pub fn cross(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Cross { a, b })
    }

    /// Rows scaled to unit length. Zero rows map to zero.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        self.push(Op::NormalizeRows { a })
    }

    /// `arccos(clamp(a, -1, 1))` elementwise.
    pub fn acos_clamped(&mut self, a: Var) -> Var {
        self.push(Op::AcosClamped { a })
    }

    /// Per-row singular values `(σ1, σ2)` of the 3×2 matrix `[fu fv]`.
    pub fn singular_values(&mut self, fu: Var, fv: Var) -> Var {
        self.push(Op::SingularValues { fu, fv })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.push(Op::Sum { a })
    }

    pub fn mean(&mut self, a: Var) -> Var {
        self.push(Op::Mean { a })
    }

    /// Records a primitive by name, for description-driven graph building.
    pub fn apply(&mut self, name: &str, inputs: &[Var]) -> Result<Var, AutodiffError> {
        let arity = |n: usize| {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(AutodiffError::Arity {
                    primitive: name.to_string(),
                    expected: n,
                    got: inputs.len(),
                })
            }
        };
        let v = match name {
            "affine" => {
                arity(3)?;
                self.affine(inputs[0], inputs[1], inputs[2])
            }
            "matmul" => {
                arity(2)?;
                self.matmul(inputs[0], inputs[1])
            }
            "leaky_relu" => {
                arity(1)?;
                self.leaky_relu(inputs[0], crate::networks::LEAKY_SLOPE)
            }
            "concat" => {
                arity(2)?;
                self.concat_cols(inputs[0], inputs[1])
            }
            "add" => {
                arity(2)?;
                self.add(inputs[0], inputs[1])
            }
            "sub" => {
                arity(2)?;
                self.sub(inputs[0], inputs[1])
            }
            "mul" => {
                arity(2)?;
                self.mul(inputs[0], inputs[1])
            }
            "abs" => {
                arity(1)?;
                self.abs(inputs[0])
            }
            "relu" => {
                arity(1)?;
                self.relu(inputs[0])
            }
            "row_norm" => {
                arity(1)?;
                self.row_norm(inputs[0])
            }
            "row_dot" => {
                arity(2)?;
                self.row_dot(inputs[0], inputs[1])
            }
            "cross" => {
                arity(2)?;
                self.cross(inputs[0], inputs[1])
            }
            "normalize" => {
                arity(1)?;
                self.normalize_rows(inputs[0])
            }
            "acos" => {
                arity(1)?;
                self.acos_clamped(inputs[0])
            }
            "singular_values" => {
                arity(2)?;
                self.singular_values(inputs[0], inputs[1])
            }
            "sum" => {
                arity(1)?;
                self.sum(inputs[0])
            }
            "mean" => {
                arity(1)?;
                self.mean(inputs[0])
            }
            other => return Err(AutodiffError::UnsupportedPrimitive(other.to_string())),
        };
        Ok(v)
    }

    /// Recomputes every node from the recorded leaves.
    pub fn replay(&self) -> Vec<Mat> {
        let mut values: Vec<Mat> = Vec::with_capacity(self.values.len());
        for (i, op) in self.ops.iter().enumerate() {
            let v = match op {
                Op::Input | Op::Param => self.values[i].clone(),
                _ => eval(op, &values),
            };
            values.push(v);
        }
        values
    }

    /// Reverse-mode sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients, AutodiffError> {
        let rv = &self.values[root.0];
        if rv.len() != 1 {
            return Err(AutodiffError::NonScalarRoot {
                rows: rv.rows(),
                cols: rv.cols(),
            });
        }
        let mut adj: Vec<Option<Mat>> = vec![None; root.0 + 1];
        adj[root.0] = Some(Mat::scalar(1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj);
            adj[i] = Some(g);
        }
        adj.resize(self.values.len(), None);
        Ok(Gradients {
            adjoints: adj,
            params: self.params.clone(),
            shapes: self.values.iter().map(Mat::shape).collect(),
        })
    }

    fn propagate(&self, i: usize, g: &Mat, adj: &mut [Option<Mat>]) {
        let val = |v: Var| &self.values[v.0];
        let out = &self.values[i];
        match &self.ops[i] {
            Op::Input | Op::Param => {}
            Op::Affine { x, w, b } => {
                accumulate(adj, *x, gemm(g, false, val(*w), true));
                accumulate_gemm(adj, *w, val(*x), true, g, false);
                let mut db = Mat::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (d, v) in db.as_mut_slice().iter_mut().zip(g.row(r)) {
                        *d += v;
                    }
                }
                accumulate(adj, *b, db);
            }
            Op::MatMul { x, w } => {
                accumulate(adj, *x, gemm(g, false, val(*w), true));
                accumulate_gemm(adj, *w, val(*x), true, g, false);
            }
            Op::LeakyRelu { x, slope } => {
                let s = *slope;
                accumulate(adj, *x, g.zip_map(val(*x), |gv, xv| if xv >= 0.0 { gv } else { s * gv }));
            }
            Op::LeakyGate { t, pre, slope } => {
                accumulate(adj, *t, gate(g, val(*pre), *slope));
            }
            Op::ConcatCols { a, b } => {
                let ca = val(*a).cols();
                let cb = val(*b).cols();
                let mut ga = Mat::zeros(g.rows(), ca);
                let mut gb = Mat::zeros(g.rows(), cb);
                for r in 0..g.rows() {
                    ga.row_mut(r).copy_from_slice(&g.row(r)[..ca]);
                    gb.row_mut(r).copy_from_slice(&g.row(r)[ca..]);
                }
                accumulate(adj, *a, ga);
                accumulate(adj, *b, gb);
            }
            Op::ConcatRows { a, b } => {
                let ra = val(*a).rows();
                let c = g.cols();
                let (top, bottom) = g.as_slice().split_at(ra * c);
                accumulate(adj, *a, Mat::from_vec(ra, c, top.to_vec()));
                accumulate(adj, *b, Mat::from_vec(g.rows() - ra, c, bottom.to_vec()));
            }
            Op::SliceRows { a, start, len } => {
                let src = val(*a);
                let mut ga = Mat::zeros(src.rows(), src.cols());
                let c = src.cols();
                ga.as_mut_slice()[start * c..(start + len) * c].copy_from_slice(g.as_slice());
                accumulate(adj, *a, ga);
            }
            Op::GatherRows { a, idx } => {
                let src = val(*a);
                let mut ga = Mat::zeros(src.rows(), src.cols());
                for (r, &j) in idx.iter().enumerate() {
                    for (d, v) in ga.row_mut(j).iter_mut().zip(g.row(r)) {
                        *d += v;
                    }
                }
                accumulate(adj, *a, ga);
            }
            Op::Add { a, b } => {
                accumulate(adj, *a, g.clone());
                accumulate(adj, *b, g.clone());
            }
            Op::Sub { a, b } => {
                accumulate(adj, *a, g.clone());
                accumulate(adj, *b, g.map(|v| -v));
            }
            Op::Mul { a, b } => {
                accumulate(adj, *a, g.zip_map(val(*b), |gv, bv| gv * bv));
                accumulate(adj, *b, g.zip_map(val(*a), |gv, av| gv * av));
            }
            Op::ScaleShift { a, scale, .. } => {
                let s = *scale;
                accumulate(adj, *a, g.map(|v| v * s));
            }
            Op::Abs { a } => {
                accumulate(adj, *a, g.zip_map(val(*a), |gv, av| gv * sign0(av)));
            }
            Op::Relu { a } => {
                accumulate(adj, *a, g.zip_map(val(*a), |gv, av| if av > 0.0 { gv } else { 0.0 }));
            }
            Op::RowNorm { a } => {
                let x = val(*a);
                let mut ga = Mat::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let n = out.get(r, 0);
                    if n > 0.0 {
                        let k = g.get(r, 0) / n;
                        for (d, xv) in ga.row_mut(r).iter_mut().zip(x.row(r)) {
                            *d = k * xv;
                        }
                    }
                }
                accumulate(adj, *a, ga);
            }
            Op::RowDot { a, b } => {
                let (xa, xb) = (val(*a), val(*b));
                let mut ga = Mat::zeros(xa.rows(), xa.cols());
                let mut gb = Mat::zeros(xb.rows(), xb.cols());
                for r in 0..xa.rows() {
                    let k = g.get(r, 0);
                    for c in 0..xa.cols() {
                        ga.set(r, c, k * xb.get(r, c));
                        gb.set(r, c, k * xa.get(r, c));
                    }
                }
                accumulate(adj, *a, ga);
                accumulate(adj, *b, gb);
            }
            Op::Cross { a, b } => {
                let (xa, xb) = (val(*a), val(*b));
                let mut ga = Mat::zeros(xa.rows(), 3);
                let mut gb = Mat::zeros(xb.rows(), 3);
                for r in 0..xa.rows() {
                    let gr = row3(g, r);
                    ga.row_mut(r).copy_from_slice(&cross3(row3(xb, r), gr));
                    gb.row_mut(r).copy_from_slice(&cross3(gr, row3(xa, r)));
                }
                accumulate(adj, *a, ga);
                accumulate(adj, *b, gb);
            }
            Op::NormalizeRows { a } => {
                let x = val(*a);
                let mut ga = Mat::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let n = x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                    if n > 0.0 {
                        let y = out.row(r);
                        let gr = g.row(r);
                        let yg: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..x.cols() {
                            ga.set(r, c, (gr[c] - y[c] * yg) / n);
                        }
                    }
                }
                accumulate(adj, *a, ga);
            }
            Op::AcosClamped { a } => {
                accumulate(
                    adj,
                    *a,
                    g.zip_map(val(*a), |gv, xv| {
                        let s = 1.0 - xv * xv;
                        if s > 1e-12 {
                            -gv / s.sqrt()
                        } else {
                            0.0
                        }
                    }),
                );
            }
            Op::SingularValues { fu, fv } => {
                let (u, v) = (val(*fu), val(*fv));
                let mut gu = Mat::zeros(u.rows(), 3);
                let mut gv = Mat::zeros(v.rows(), 3);
                for r in 0..u.rows() {
                    let (a, b) = (row3(u, r), row3(v, r));
                    let (_, vecs) = sym2_eigen(dot3(a, a), dot3(a, b), dot3(b, b));
                    for k in 0..2 {
                        let sigma = out.get(r, k);
                        let gk = g.get(r, k);
                        if sigma <= DEGENERACY_FLOOR || gk == 0.0 {
                            continue;
                        }
                        // dσ_k/dJ = u_k v_kᵀ with u_k = J v_k / σ_k
                        let vk = vecs[k];
                        let uk: [f64; 3] =
                            std::array::from_fn(|c| (a[c] * vk[0] + b[c] * vk[1]) / sigma);
                        for c in 0..3 {
                            gu.as_mut_slice()[r * 3 + c] += gk * uk[c] * vk[0];
                            gv.as_mut_slice()[r * 3 + c] += gk * uk[c] * vk[1];
                        }
                    }
                }
                accumulate(adj, *fu, gu);
                accumulate(adj, *fv, gv);
            }
            Op::Sum { a } => {
                let x = val(*a);
                accumulate(adj, *a, Mat::filled(x.rows(), x.cols(), g.item()));
            }
            Op::Mean { a } => {
                let x = val(*a);
                let k = if x.is_empty() { 0.0 } else { g.item() / x.len() as f64 };
                accumulate(adj, *a, Mat::filled(x.rows(), x.cols(), k));
            }
        }
    }
}

fn accumulate(adj: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut adj[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn accumulate_gemm(adj: &mut [Option<Mat>], v: Var, a: &Mat, ta: bool, b: &Mat, tb: bool) {
    match &mut adj[v.0] {
        Some(existing) => gemm_into(a, ta, b, tb, 1.0, existing),
        slot @ None => *slot = Some(gemm(a, ta, b, tb)),
    }
}

#[inline]
fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[inline]
fn row3(m: &Mat, r: usize) -> [f64; 3] {
    let s = m.row(r);
    [s[0], s[1], s[2]]
}

fn gate(t: &Mat, pre: &Mat, slope: f64) -> Mat {
    assert_eq!(t.cols(), pre.cols(), "leaky_gate width mismatch");
    let n = pre.rows();
    assert!(n > 0 && t.rows() % n == 0, "leaky_gate row blocks mismatch");
    let mut out = t.clone();
    let c = t.cols();
    for (r, row) in out.as_mut_slice().chunks_mut(c).enumerate() {
        for (o, p) in row.iter_mut().zip(pre.row(r % n)) {
            if *p < 0.0 {
                *o *= slope;
            }
        }
    }
    out
}

fn eval(op: &Op, values: &[Mat]) -> Mat {
    let val = |v: &Var| &values[v.0];
    match op {
        Op::Input | Op::Param => unreachable!("leaves carry their own values"),
        Op::Affine { x, w, b } => {
            let mut y = gemm(val(x), false, val(w), false);
            let bias = val(b);
            assert_eq!(bias.shape(), (1, y.cols()), "affine bias shape");
            let c = y.cols();
            for row in y.as_mut_slice().chunks_mut(c) {
                for (o, bv) in row.iter_mut().zip(bias.as_slice()) {
                    *o += bv;
                }
            }
            y
        }
        Op::MatMul { x, w } => gemm(val(x), false, val(w), false),
        Op::LeakyRelu { x, slope } => {
            let s = *slope;
            val(x).map(|v| if v >= 0.0 { v } else { s * v })
        }
        Op::LeakyGate { t, pre, slope } => gate(val(t), val(pre), *slope),
        Op::ConcatCols { a, b } => {
            let (xa, xb) = (val(a), val(b));
            assert_eq!(xa.rows(), xb.rows(), "concat row mismatch");
            let mut data = Vec::with_capacity(xa.len() + xb.len());
            for r in 0..xa.rows() {
                data.extend_from_slice(xa.row(r));
                data.extend_from_slice(xb.row(r));
            }
            Mat::from_vec(xa.rows(), xa.cols() + xb.cols(), data)
        }
        Op::ConcatRows { a, b } => {
            let (xa, xb) = (val(a), val(b));
            assert_eq!(xa.cols(), xb.cols(), "concat_rows column mismatch");
            let mut data = xa.as_slice().to_vec();
            data.extend_from_slice(xb.as_slice());
            Mat::from_vec(xa.rows() + xb.rows(), xa.cols(), data)
        }
        Op::SliceRows { a, start, len } => {
            let x = val(a);
            assert!(start + len <= x.rows(), "slice_rows out of range");
            let c = x.cols();
            Mat::from_vec(*len, c, x.as_slice()[start * c..(start + len) * c].to_vec())
        }
        Op::GatherRows { a, idx } => val(a).gather_rows(idx),
        Op::Add { a, b } => val(a).zip_map(val(b), |x, y| x + y),
        Op::Sub { a, b } => val(a).zip_map(val(b), |x, y| x - y),
        Op::Mul { a, b } => val(a).zip_map(val(b), |x, y| x * y),
        Op::ScaleShift { a, scale, shift } => {
            let (s, t) = (*scale, *shift);
            val(a).map(|v| s * v + t)
        }
        Op::Abs { a } => val(a).map(f64::abs),
        Op::Relu { a } => val(a).map(|v| v.max(0.0)),
        Op::RowNorm { a } => {
            let x = val(a);
            let data = (0..x.rows())
                .map(|r| x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
                .collect();
            Mat::from_vec(x.rows(), 1, data)
        }
        Op::RowDot { a, b } => {
            let (xa, xb) = (val(a), val(b));
            assert_eq!(xa.shape(), xb.shape(), "row_dot shape mismatch");
            let data = (0..xa.rows())
                .map(|r| xa.row(r).iter().zip(xb.row(r)).map(|(p, q)| p * q).sum())
                .collect();
            Mat::from_vec(xa.rows(), 1, data)
        }
        Op::Cross { a, b } => {
            let (xa, xb) = (val(a), val(b));
            assert!(xa.cols() == 3 && xb.shape() == xa.shape(), "cross needs N×3 inputs");
            let mut data = Vec::with_capacity(xa.len());
            for r in 0..xa.rows() {
                data.extend_from_slice(&cross3(row3(xa, r), row3(xb, r)));
            }
            Mat::from_vec(xa.rows(), 3, data)
        }
        Op::NormalizeRows { a } => {
            let x = val(a);
            let mut y = x.clone();
            let c = x.cols();
            for row in y.as_mut_slice().chunks_mut(c) {
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n > 0.0 {
                    row.iter_mut().for_each(|v| *v /= n);
                }
            }
            y
        }
        Op::AcosClamped { a } => val(a).map(|v| v.clamp(-1.0, 1.0).acos()),
        Op::SingularValues { fu, fv } => {
            let (u, v) = (val(fu), val(fv));
            assert!(u.cols() == 3 && v.shape() == u.shape(), "singular_values needs N×3 columns");
            let mut data = Vec::with_capacity(u.rows() * 2);
            for r in 0..u.rows() {
                let (a, b) = (row3(u, r), row3(v, r));
                let ([l1, l2], _) = sym2_eigen(dot3(a, a), dot3(a, b), dot3(b, b));
                data.push(l1.max(0.0).sqrt());
                data.push(l2.max(0.0).sqrt());
            }
            Mat::from_vec(u.rows(), 2, data)
        }
        Op::Sum { a } => Mat::scalar(val(a).sum()),
        Op::Mean { a } => {
            let x = val(a);
            Mat::scalar(if x.is_empty() { 0.0 } else { x.sum() / x.len() as f64 })
        }
    }
}
