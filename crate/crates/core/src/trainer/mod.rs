//! Optimization loop: convex-hull warm-up, sparse-to-dense scheduling,
//! input jitter, adaptive-moment updates, logging and checkpoints.

mod config;
mod optim;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

pub use config::{ConfigError, SubsetMethod, TrainConfig};
pub use optim::{clip_global_norm, global_norm, Adam};

use crate::autodiff::Tape;
use crate::geometry::{
    convex_hull_3d, farthest_point_sampling, sample_mesh_surface, GeometryError,
    NormalizeTransform, PointCloud3, UvCloud,
};
use crate::losses::{record_losses, LossError, LossReport};
use crate::networks::{save_checkpoint, Checkpoint, CheckpointError, SubNetworkSet};
use crate::pipeline::{jacobian_rows, make_grid, record_pipeline, PassOptions, PipelineError};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("run directory: {0}")]
    Io(#[from] std::io::Error),
    #[error("non-finite {what} at step {step}; last good checkpoint: {}", last_checkpoint.as_ref().map_or("none".to_string(), |p| p.display().to_string()))]
    NonFinite {
        step: u64,
        what: String,
        last_checkpoint: Option<PathBuf>,
    },
}

/// Training phase of a step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Warmup,
    Sparse,
    Dense,
}

impl Phase {
    pub fn at(config: &TrainConfig, step: u64) -> Phase {
        if step < config.warmup_steps() {
            Phase::Warmup
        } else if step < config.dense_switch_step() {
            Phase::Sparse
        } else {
            Phase::Dense
        }
    }
}

/// Logged when the schedule moves to the next phase, before the first step
/// of that phase.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseMarker {
    pub event: String,
    pub step: u64,
}

pub const WARMUP_END: &str = "warmup_end";
pub const DENSE_SWITCH: &str = "dense_switch";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub reports: Vec<LossReport>,
    pub markers: Vec<PhaseMarker>,
    /// Steps at which checkpoints were written.
    pub checkpoints: Vec<u64>,
}

/// Random stream of one step; independent of every other step so that
/// resuming mid-run replays the same draws.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step + 1);
    rng
}

/// Isotropic Gaussian jitter of standard deviation `sigma`.
pub fn perturb(p: &PointCloud3, sigma: f64, rng: &mut ChaCha8Rng) -> PointCloud3 {
    if sigma == 0.0 {
        return p.clone();
    }
    let noise = Normal::new(0.0, sigma).expect("sigma is finite and non-negative");
    PointCloud3::new(
        p.points
            .iter()
            .map(|x| std::array::from_fn(|d| x[d] + noise.sample(rng)))
            .collect(),
    )
}

/// One forward pass, objective, backward pass and optimizer update on the
/// given inputs. The 3D inputs are jittered first.
pub fn train_step(
    net: &mut SubNetworkSet,
    adam: &mut Adam,
    p: &PointCloud3,
    g: &UvCloud,
    config: &TrainConfig,
    step: u64,
) -> Result<LossReport, TrainError> {
    let non_finite = |what: String| TrainError::NonFinite {
        step,
        what,
        last_checkpoint: None,
    };
    let mut rng = step_rng(config.seed, step);
    let p = perturb(p, config.perturbation, &mut rng);
    let jf_rows = jacobian_rows(p.len(), config.jacobian_max_points, &mut rng);
    let jg_rows = jacobian_rows(g.len(), config.jacobian_max_points, &mut rng);

    let mut tape = Tape::new();
    let vars = net.register(&mut tape);
    let graph = record_pipeline(
        &mut tape,
        &vars,
        p.to_mat(),
        g.to_mat(),
        PassOptions {
            branches: config.branches,
            with_jacobians: true,
            jf_rows,
            jg_rows,
        },
    )
    .map_err(|e| match e {
        PipelineError::NonFinite(stage) => non_finite(format!("output of stage {stage}")),
        other => non_finite(other.to_string()),
    })?;
    let (lv, mut report) = record_losses(&mut tape, &graph, &config.loss_config())?;
    report.step = step;
    if !report.total.is_finite() {
        return Err(non_finite("loss".into()));
    }
    let mut grads = tape.backward(lv.total).expect("scalar loss").params();
    drop(tape);
    let norm = clip_global_norm(&mut grads, config.grad_clip);
    if !norm.is_finite() {
        return Err(non_finite("gradient".into()));
    }
    adam.update(net.params_mut(), &grads, config.lr_at(step));
    Ok(report)
}

/// Stateful driver of a whole run.
pub struct Trainer {
    net: SubNetworkSet,
    adam: Adam,
    config: TrainConfig,
    step: u64,
    transform: NormalizeTransform,
    dense: PointCloud3,
    sparse: PointCloud3,
    warm: PointCloud3,
}

fn unit_sphere_samples(n: usize, seed: u64) -> PointCloud3 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = (0..n)
        .map(|_| loop {
            let v: [f64; 3] = std::array::from_fn(|_| rng.sample(StandardNormal));
            let l = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if l > 1e-9 {
                break [v[0] / l, v[1] / l, v[2] / l];
            }
        })
        .collect();
    PointCloud3::new(points)
}

/// Points sampled on the convex hull of `p`, or on the unit sphere when the
/// hull cannot be built.
pub fn warmup_target(p: &PointCloud3, n: usize, seed: u64) -> PointCloud3 {
    match convex_hull_3d(&p.points).and_then(|h| sample_mesh_surface(&h, n, seed)) {
        Ok(c) => c,
        Err(e) => {
            log::warn!("convex hull unavailable ({e}); warming up on the unit sphere");
            unit_sphere_samples(n, seed)
        }
    }
}

impl Trainer {
    /// `points` must already be normalized; `transform` is stored in
    /// checkpoints so UVs can be related back to the raw input.
    pub fn new(
        net: SubNetworkSet,
        points: PointCloud3,
        transform: NormalizeTransform,
        config: TrainConfig,
    ) -> Result<Self, TrainError> {
        config.validate_for(points.len())?;
        points.validate()?;
        if net.architecture != config.architecture() {
            return Err(ConfigError::Invalid(format!(
                "network architecture {:?} differs from the configured {:?}",
                net.architecture,
                config.architecture()
            ))
            .into());
        }
        let m = config.sparse_size(points.len());
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let idx = match config.subset_method {
            SubsetMethod::Farthest => {
                farthest_point_sampling(&points.points, m, rng.random_range(0..points.len()))
            }
            SubsetMethod::Random => {
                let mut v = sample(&mut rng, points.len(), m).into_vec();
                v.sort_unstable();
                v
            }
        };
        let sparse = PointCloud3::new(idx.iter().map(|&i| points.points[i]).collect());
        let warm = warmup_target(&points, m, config.seed);
        let adam = Adam::new(net.num_params(), config.beta1, config.beta2, config.adam_epsilon);
        Ok(Self {
            net,
            adam,
            config,
            step: 0,
            transform,
            dense: points,
            sparse,
            warm,
        })
    }

    /// Continues a run from a checkpoint written by [`Trainer::checkpoint`].
    pub fn from_checkpoint(
        ckpt: Checkpoint,
        points: PointCloud3,
        config: TrainConfig,
    ) -> Result<Self, TrainError> {
        if ckpt.seed != config.seed {
            return Err(ConfigError::Invalid(format!(
                "checkpoint seed {} differs from configured seed {}",
                ckpt.seed, config.seed
            ))
            .into());
        }
        let mut t = Self::new(ckpt.net, points, ckpt.transform, config)?;
        if let Some(o) = &ckpt.optimizer {
            t.adam
                .restore(o)
                .map_err(CheckpointError::Corrupt)?;
        }
        t.step = ckpt.step;
        Ok(t)
    }

    pub fn net(&self) -> &SubNetworkSet {
        &self.net
    }

    pub fn into_net(self) -> SubNetworkSet {
        self.net
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn transform(&self) -> NormalizeTransform {
        self.transform
    }

    /// Normalized cloud the run trains on.
    pub fn points(&self) -> &PointCloud3 {
        &self.dense
    }

    pub fn sparse_points(&self) -> &PointCloud3 {
        &self.sparse
    }

    pub fn warmup_points(&self) -> &PointCloud3 {
        &self.warm
    }

    /// Inputs used at `step`: the warm-up target, the sparse subset or the
    /// full cloud, with a grid of matching size.
    pub fn inputs_at(&self, step: u64) -> (&PointCloud3, UvCloud) {
        let p = match Phase::at(&self.config, step) {
            Phase::Warmup => &self.warm,
            Phase::Sparse => &self.sparse,
            Phase::Dense => &self.dense,
        };
        (p, make_grid(p.len()).expect("training sets hold at least 4 points"))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            net: self.net.clone(),
            seed: self.config.seed,
            step: self.step,
            transform: self.transform,
            optimizer: Some(self.adam.snapshot()),
            meta: serde_json::to_value(&self.config).expect("config serializes"),
        }
    }

    pub fn train_step(&mut self) -> Result<LossReport, TrainError> {
        let (p, g) = self.inputs_at(self.step);
        let p = p.clone();
        let report = train_step(&mut self.net, &mut self.adam, &p, &g, &self.config, self.step)?;
        self.step += 1;
        Ok(report)
    }

    /// Trains until `until` steps have been taken (capped at the configured
    /// total), logging to `run` when given.
    pub fn run(&mut self, until: u64, mut run: Option<&mut RunWriter>) -> Result<TrainLog, TrainError> {
        let until = until.min(self.config.steps);
        let start = Instant::now();
        let mut log = TrainLog::default();
        let warm_end = self.config.warmup_steps();
        let dense = self.config.dense_switch_step();
        loop {
            let s = self.step;
            for (event, at) in [(WARMUP_END, warm_end), (DENSE_SWITCH, dense)] {
                if s == at && !log.markers.iter().any(|m| m.event == event) && s <= until {
                    let m = PhaseMarker {
                        event: event.to_string(),
                        step: s,
                    };
                    log::info!("{} at step {s}", m.event);
                    if let Some(w) = run.as_deref_mut() {
                        w.marker(&m)?;
                    }
                    log.markers.push(m);
                }
            }
            if s >= until {
                break;
            }
            let mut report = match self.train_step() {
                Ok(r) => r,
                Err(TrainError::NonFinite { step, what, .. }) => {
                    return Err(TrainError::NonFinite {
                        step,
                        what,
                        last_checkpoint: run.as_deref().and_then(|w| w.last_checkpoint.clone()),
                    })
                }
                Err(e) => return Err(e),
            };
            report.wall_time = start.elapsed().as_secs_f64();
            log::debug!("step {s}: total {:.6e}", report.total);
            if let Some(w) = run.as_deref_mut() {
                w.report(&report)?;
            }
            log.reports.push(report);
            let done = self.step;
            if self.config.checkpoint_every > 0
                && done % self.config.checkpoint_every == 0
                && done < self.config.steps
            {
                if let Some(w) = run.as_deref_mut() {
                    w.checkpoint(&self.checkpoint())?;
                }
                log.checkpoints.push(done);
            }
        }
        if self.step == self.config.steps {
            if let Some(w) = run.as_deref_mut() {
                w.final_checkpoint(&self.checkpoint())?;
            }
        }
        Ok(log)
    }
}

/// Writes the run directory: `config.snapshot`, `log.jsonl`,
/// `ckpt_<step>` files and `final.ckpt`.
pub struct RunWriter {
    dir: PathBuf,
    log: BufWriter<File>,
    last_checkpoint: Option<PathBuf>,
}

impl RunWriter {
    /// Creates (or appends to) the run directory at `dir`.
    pub fn create(dir: impl AsRef<Path>, config: &TrainConfig) -> Result<Self, TrainError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("config.snapshot"), config.to_toml_string())?;
        let log = File::options().create(true).append(true).open(dir.join("log.jsonl"))?;
        Ok(Self {
            dir,
            log: BufWriter::new(log),
            last_checkpoint: None,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn last_checkpoint(&self) -> Option<&Path> {
        self.last_checkpoint.as_deref()
    }

    fn report(&mut self, r: &LossReport) -> Result<(), TrainError> {
        writeln!(self.log, "{}", r.to_json_line())?;
        Ok(())
    }

    fn marker(&mut self, m: &PhaseMarker) -> Result<(), TrainError> {
        writeln!(self.log, "{}", serde_json::to_string(m).expect("marker serializes"))?;
        self.log.flush()?;
        Ok(())
    }

    fn checkpoint(&mut self, c: &Checkpoint) -> Result<(), TrainError> {
        let path = self.dir.join(format!("ckpt_{}", c.step));
        save_checkpoint(c, &path)?;
        self.log.flush()?;
        self.last_checkpoint = Some(path);
        Ok(())
    }

    fn final_checkpoint(&mut self, c: &Checkpoint) -> Result<(), TrainError> {
        let path = self.dir.join("final.ckpt");
        save_checkpoint(c, &path)?;
        self.log.flush()?;
        self.last_checkpoint = Some(path);
        Ok(())
    }
}

/// Runs only the warm-up phase and returns the warmed parameters.
pub fn warmup(
    net: SubNetworkSet,
    p: &PointCloud3,
    config: &TrainConfig,
) -> Result<SubNetworkSet, TrainError> {
    let mut t = Trainer::new(net, p.clone(), NormalizeTransform::identity(), config.clone())?;
    t.run(config.warmup_steps(), None)?;
    Ok(t.into_net())
}

/// Full schedule on a normalized cloud, without touching the filesystem.
pub fn fit(
    net: SubNetworkSet,
    p: &PointCloud3,
    config: &TrainConfig,
) -> Result<(SubNetworkSet, TrainLog), TrainError> {
    let mut t = Trainer::new(net, p.clone(), NormalizeTransform::identity(), config.clone())?;
    let log = t.run(config.steps, None)?;
    Ok((t.into_net(), log))
}
