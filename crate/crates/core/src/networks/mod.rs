//! The five point-wise MLP sub-networks and their parameters.
//!
//! Every stack is five affine layers with hidden widths `[64, 128, 512, 128]`
//! and LeakyReLU(0.01) between layers; the output layer is purely affine.
//! Deform-Net and Cut-Net are residual: an embedding stack lifts the input to
//! `d = 64` channels, the input is re-attached, and an offset head produces a
//! displacement added back to the input.

mod checkpoint;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, Tape, Var};
use crate::geometry::{PointCloud3, UvCloud};

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, CheckpointHeader,
    OptimizerSnapshot, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};

pub const LEAKY_SLOPE: f64 = 0.01;
pub const HIDDEN_DIMS: [usize; 4] = [64, 128, 512, 128];
pub const EMBED_DIM: usize = 64;

/// Hidden widths shared by every stack and the residual embedding width.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            hidden: HIDDEN_DIMS.to_vec(),
            embed_dim: EMBED_DIM,
        }
    }
}

/// One affine layer, `y = x·W + b` with `W: in × out`, `b: 1 × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: Mat,
    pub bias: Mat,
}

/// A point-wise shared MLP stack.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpStack {
    pub layers: Vec<Layer>,
}

impl MlpStack {
    /// Fan-in scaled uniform init, `U(-1/√fan_in, 1/√fan_in)` for weights
    /// and biases. With `zero_output` the final layer starts at zero.
    pub fn random(
        in_dim: usize,
        hidden: &[usize],
        out_dim: usize,
        zero_output: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut dims = vec![in_dim];
        dims.extend_from_slice(hidden);
        dims.push(out_dim);
        let n = dims.len() - 1;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, d)| {
                let (fan_in, fan_out) = (d[0], d[1]);
                if zero_output && i + 1 == n {
                    return Layer {
                        weight: Mat::zeros(fan_in, fan_out),
                        bias: Mat::zeros(1, fan_out),
                    };
                }
                let bound = 1.0 / (fan_in as f64).sqrt();
                let mut draw = |len| (0..len).map(|_| rng.random_range(-bound..bound)).collect();
                Layer {
                    weight: Mat::from_vec(fan_in, fan_out, draw(fan_in * fan_out)),
                    bias: Mat::from_vec(1, fan_out, draw(fan_out)),
                }
            })
            .collect();
        Self { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("stack has layers").weight.cols()
    }

    pub fn hidden_dims(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1]
            .iter()
            .map(|l| l.weight.cols())
            .collect()
    }

    /// Layer dimensions `[in, h1, …, out]`.
    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.in_dim()];
        d.extend(self.layers.iter().map(|l| l.weight.cols()));
        d
    }

    pub fn zero_output_layer(&mut self) {
        let last = self.layers.last_mut().expect("stack has layers");
        last.weight.as_mut_slice().fill(0.0);
        last.bias.as_mut_slice().fill(0.0);
    }

    fn register(&self, tape: &mut Tape) -> StackVars {
        StackVars {
            layers: self
                .layers
                .iter()
                .map(|l| (tape.param(l.weight.clone()), tape.param(l.bias.clone())))
                .collect(),
        }
    }
}

/// Identifies one of the seven stacks making up the five sub-networks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum StackId {
    DeformEmbed,
    DeformHead,
    CutEmbed,
    CutHead,
    Stitch,
    Wrap,
    Unwrap,
}

impl StackId {
    pub const ALL: [StackId; 7] = [
        StackId::DeformEmbed,
        StackId::DeformHead,
        StackId::CutEmbed,
        StackId::CutHead,
        StackId::Stitch,
        StackId::Wrap,
        StackId::Unwrap,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StackId::DeformEmbed => "deform.embed",
            StackId::DeformHead => "deform.offset",
            StackId::CutEmbed => "cut.embed",
            StackId::CutHead => "cut.offset",
            StackId::Stitch => "stitch",
            StackId::Wrap => "wrap",
            StackId::Unwrap => "unwrap",
        }
    }
}

/// Deform-Net, Cut-Net, Stitch-Net, Wrap-Net and Unwrap-Net. A single set
/// serves both cycle branches.
#[derive(Clone, Debug, PartialEq)]
pub struct SubNetworkSet {
    pub architecture: Architecture,
    pub deform_embed: MlpStack,
    pub deform_head: MlpStack,
    pub cut_embed: MlpStack,
    pub cut_head: MlpStack,
    pub stitch: MlpStack,
    pub wrap: MlpStack,
    pub unwrap: MlpStack,
}

/// Default-architecture parameters from `seed`.
pub fn init_params(seed: u64) -> SubNetworkSet {
    SubNetworkSet::init(&Architecture::default(), seed)
}

impl SubNetworkSet {
    /// Random parameters with zeroed offset heads, so Deform-Net and Cut-Net
    /// start as exact identities.
    pub fn init(arch: &Architecture, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = &arch.hidden;
        let d = arch.embed_dim;
        Self {
            architecture: arch.clone(),
            deform_embed: MlpStack::random(2, h, d, false, &mut rng),
            deform_head: MlpStack::random(d + 2, h, 2, true, &mut rng),
            cut_embed: MlpStack::random(3, h, d, false, &mut rng),
            cut_head: MlpStack::random(d + 3, h, 3, true, &mut rng),
            stitch: MlpStack::random(3, h, 3, false, &mut rng),
            wrap: MlpStack::random(2, h, 3, false, &mut rng),
            unwrap: MlpStack::random(3, h, 2, false, &mut rng),
        }
    }

    pub fn stack(&self, id: StackId) -> &MlpStack {
        match id {
            StackId::DeformEmbed => &self.deform_embed,
            StackId::DeformHead => &self.deform_head,
            StackId::CutEmbed => &self.cut_embed,
            StackId::CutHead => &self.cut_head,
            StackId::Stitch => &self.stitch,
            StackId::Wrap => &self.wrap,
            StackId::Unwrap => &self.unwrap,
        }
    }

    pub fn stack_mut(&mut self, id: StackId) -> &mut MlpStack {
        match id {
            StackId::DeformEmbed => &mut self.deform_embed,
            StackId::DeformHead => &mut self.deform_head,
            StackId::CutEmbed => &mut self.cut_embed,
            StackId::CutHead => &mut self.cut_head,
            StackId::Stitch => &mut self.stitch,
            StackId::Wrap => &mut self.wrap,
            StackId::Unwrap => &mut self.unwrap,
        }
    }

    /// Every parameter matrix in slot order: stacks in [`StackId::ALL`]
    /// order, and within a stack each layer's weight then bias.
    pub fn params(&self) -> Vec<&Mat> {
        StackId::ALL
            .iter()
            .flat_map(|&id| self.stack(id).layers.iter().flat_map(|l| [&l.weight, &l.bias]))
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Mat> {
        let Self {
            deform_embed,
            deform_head,
            cut_embed,
            cut_head,
            stitch,
            wrap,
            unwrap,
            ..
        } = self;
        [deform_embed, deform_head, cut_embed, cut_head, stitch, wrap, unwrap]
            .into_iter()
            .flat_map(|s| s.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]))
            .collect()
    }

    /// Slot range of the parameters belonging to `id`.
    pub fn slot_range(&self, id: StackId) -> std::ops::Range<usize> {
        let mut start = 0;
        for s in StackId::ALL {
            let n = 2 * self.stack(s).layers.len();
            if s == id {
                return start..start + n;
            }
            start += n;
        }
        unreachable!("every StackId is listed in ALL")
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|m| m.len()).sum()
    }

    /// Registers every parameter on `tape` in slot order.
    pub fn register(&self, tape: &mut Tape) -> NetVars {
        NetVars {
            deform_embed: self.deform_embed.register(tape),
            deform_head: self.deform_head.register(tape),
            cut_embed: self.cut_embed.register(tape),
            cut_head: self.cut_head.register(tape),
            stitch: self.stitch.register(tape),
            wrap: self.wrap.register(tape),
            unwrap: self.unwrap.register(tape),
        }
    }

    /// Checks every stack against the declared architecture.
    pub fn audit(&self) -> Result<(), String> {
        let arch = &self.architecture;
        let d = arch.embed_dim;
        let expect = [
            (StackId::DeformEmbed, 2, d),
            (StackId::DeformHead, d + 2, 2),
            (StackId::CutEmbed, 3, d),
            (StackId::CutHead, d + 3, 3),
            (StackId::Stitch, 3, 3),
            (StackId::Wrap, 2, 3),
            (StackId::Unwrap, 3, 2),
        ];
        for (id, i, o) in expect {
            let s = self.stack(id);
            let mut want = vec![i];
            want.extend_from_slice(&arch.hidden);
            want.push(o);
            if s.dims() != want {
                return Err(format!("{}: dims {:?}, expected {:?}", id.name(), s.dims(), want));
            }
            for (k, l) in s.layers.iter().enumerate() {
                if l.bias.shape() != (1, l.weight.cols()) {
                    return Err(format!("{}: layer {k} bias shape {:?}", id.name(), l.bias.shape()));
                }
            }
        }
        Ok(())
    }
}

/// Tape handles of one stack's parameters.
#[derive(Clone, Debug)]
pub struct StackVars {
    pub layers: Vec<(Var, Var)>,
}

/// Tape handles of every sub-network parameter.
#[derive(Clone, Debug)]
pub struct NetVars {
    pub deform_embed: StackVars,
    pub deform_head: StackVars,
    pub cut_embed: StackVars,
    pub cut_head: StackVars,
    pub stitch: StackVars,
    pub wrap: StackVars,
    pub unwrap: StackVars,
}

/// Output of a stack plus the pre-activations of its hidden layers, kept
/// for tangent propagation.
#[derive(Clone, Debug)]
pub struct StackTrace {
    pub output: Var,
    pub pre_activations: Vec<Var>,
}

impl StackVars {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> StackTrace {
        let mut h = x;
        let mut pre = Vec::with_capacity(self.layers.len() - 1);
        let n = self.layers.len();
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let z = tape.affine(h, w, b);
            if i + 1 < n {
                pre.push(z);
                h = tape.leaky_relu(z, LEAKY_SLOPE);
            } else {
                h = z;
            }
        }
        StackTrace {
            output: h,
            pre_activations: pre,
        }
    }

    /// Pushes tangent rows through the stack linearized at `trace`.
    /// `tangent` stacks one or more blocks of `trace` rows.
    pub fn tangent(&self, tape: &mut Tape, trace: &StackTrace, tangent: Var) -> Var {
        let mut t = tangent;
        for (i, &(w, _)) in self.layers.iter().enumerate() {
            t = tape.matmul(t, w);
            if let Some(&z) = trace.pre_activations.get(i) {
                t = tape.leaky_gate(t, z, LEAKY_SLOPE);
            }
        }
        t
    }

    /// Tangent propagation at a row subset of `trace`.
    pub fn tangent_at(
        &self,
        tape: &mut Tape,
        trace: &StackTrace,
        rows: &[usize],
        tangent: Var,
    ) -> Var {
        let sub = StackTrace {
            output: trace.output,
            pre_activations: trace
                .pre_activations
                .iter()
                .map(|&z| tape.gather_rows(z, rows.to_vec()))
                .collect(),
        };
        self.tangent(tape, &sub, tangent)
    }
}

/// Residual offset network: `head([embed(x); x]) + x`.
fn residual(tape: &mut Tape, embed: &StackVars, head: &StackVars, x: Var) -> Var {
    let e = embed.forward(tape, x).output;
    let cat = tape.concat_cols(e, x);
    let off = head.forward(tape, cat).output;
    tape.add(off, x)
}

impl NetVars {
    pub fn deform(&self, tape: &mut Tape, x: Var) -> Var {
        residual(tape, &self.deform_embed, &self.deform_head, x)
    }

    pub fn cut(&self, tape: &mut Tape, x: Var) -> Var {
        residual(tape, &self.cut_embed, &self.cut_head, x)
    }

    pub fn stitch(&self, tape: &mut Tape, x: Var) -> StackTrace {
        self.stitch.forward(tape, x)
    }

    pub fn wrap(&self, tape: &mut Tape, x: Var) -> StackTrace {
        self.wrap.forward(tape, x)
    }

    pub fn unwrap(&self, tape: &mut Tape, x: Var) -> Var {
        self.unwrap.forward(tape, x).output
    }
}

fn eval_on_tape(net: &SubNetworkSet, x: Mat, f: impl Fn(&NetVars, &mut Tape, Var) -> Var) -> Mat {
    let mut tape = Tape::new();
    let vars = net.register(&mut tape);
    let xv = tape.input(x);
    let y = f(&vars, &mut tape, xv);
    tape.value(y).clone()
}

/// Deform-Net: `Φ(d+2)→2([Φ2→d(x); x]) + x`.
pub fn deform_forward(net: &SubNetworkSet, x: &UvCloud) -> UvCloud {
    UvCloud::from_mat(&eval_on_tape(net, x.to_mat(), |v, t, x| v.deform(t, x)))
}

/// Cut-Net: `Φ(d+3)→3([Φ3→d(x); x]) + x`.
pub fn cut_forward(net: &SubNetworkSet, x: &PointCloud3) -> PointCloud3 {
    PointCloud3::from_mat(&eval_on_tape(net, x.to_mat(), |v, t, x| v.cut(t, x)))
}

/// Stitch-Net: plain `Φ3→3`.
pub fn stitch_forward(net: &SubNetworkSet, x: &PointCloud3) -> PointCloud3 {
    PointCloud3::from_mat(&eval_on_tape(net, x.to_mat(), |v, t, x| v.stitch(t, x).output))
}

/// Wrap-Net: plain `Φ2→3`.
pub fn wrap_forward(net: &SubNetworkSet, x: &UvCloud) -> PointCloud3 {
    PointCloud3::from_mat(&eval_on_tape(net, x.to_mat(), |v, t, x| v.wrap(t, x).output))
}

/// Unwrap-Net: plain `Φ3→2`.
pub fn unwrap_forward(net: &SubNetworkSet, x: &PointCloud3) -> UvCloud {
    UvCloud::from_mat(&eval_on_tape(net, x.to_mat(), |v, t, x| v.unwrap(t, x)))
}
