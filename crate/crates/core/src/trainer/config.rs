use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::losses::{DistortionMode, LossConfig, LossWeights, Reduction};
use crate::networks::{Architecture, EMBED_DIM, HIDDEN_DIMS};
use crate::pipeline::BranchMode;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// How the sparse training subset is chosen.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubsetMethod {
    #[default]
    Farthest,
    Random,
}

/// Every knob of a training run. Serialized flat so a config file is a
/// list of `key = value` lines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Total optimizer steps, warm-up included.
    pub steps: u64,
    pub seed: u64,
    pub branches: BranchMode,
    pub distortion: DistortionMode,

    pub w_unwrap: f64,
    pub w_wrap: f64,
    pub w_cycle: f64,
    pub w_distortion: f64,
    pub w_aflip: f64,
    /// Use plain sums instead of means for the summed penalties.
    pub sum_losses: bool,

    pub k_unwrap: usize,
    pub k_aflip: usize,
    pub t_angle: f64,
    pub eps_factor: f64,
    pub k_cut: usize,
    /// Seam threshold as a fraction of the UV side length.
    pub t_cut_fraction: f64,

    /// Fraction of `steps` spent on the convex-hull warm-up.
    pub warmup_fraction: f64,
    /// Sparse subset size as a fraction of the input point count.
    pub sparse_fraction: f64,
    /// Fraction of `steps` after which all points are used.
    pub dense_switch_fraction: f64,
    pub subset_method: SubsetMethod,
    /// Standard deviation of the 3D input jitter, relative to the unit
    /// bounding sphere.
    pub perturbation: f64,

    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub lr_decay: f64,
    /// Fractions of `steps` at which the learning rate is multiplied by
    /// `lr_decay`.
    pub lr_milestones: Vec<f64>,
    pub grad_clip: f64,

    /// Above this many points, Jacobians are evaluated on a random subset.
    pub jacobian_max_points: usize,
    pub checkpoint_every: u64,

    pub hidden: Vec<usize>,
    pub embed_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            steps: 3000,
            seed: 0,
            branches: BranchMode::Both,
            distortion: DistortionMode::Conformal,
            w_unwrap: w.unwrap,
            w_wrap: w.wrap,
            w_cycle: w.cycle,
            w_distortion: w.distortion,
            w_aflip: w.aflip,
            sum_losses: false,
            k_unwrap: 8,
            k_aflip: 4,
            t_angle: FRAC_PI_2,
            eps_factor: 0.1,
            k_cut: 3,
            t_cut_fraction: 0.01,
            warmup_fraction: 0.1,
            sparse_fraction: 0.25,
            dense_switch_fraction: 0.6,
            subset_method: SubsetMethod::Farthest,
            perturbation: 0.005,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            lr_decay: 0.5,
            lr_milestones: vec![0.5, 0.75],
            grad_clip: 10.0,
            jacobian_max_points: 4096,
            checkpoint_every: 500,
            hidden: HIDDEN_DIMS.to_vec(),
            embed_dim: EMBED_DIM,
        }
    }
}

fn fraction(name: &str, v: f64) -> Result<(), ConfigError> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(ConfigError::Invalid(format!("{name} must lie in [0, 1], got {v}")))
    }
}

fn positive(name: &str, v: f64) -> Result<(), ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(ConfigError::Invalid(format!("{name} must be positive, got {v}")))
    }
}

impl TrainConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(s).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Sets one field from its textual form, as used for command-line
    /// overrides (`key=value`).
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let mut table = toml::Table::try_from(&*self).expect("config is a table");
        if !table.contains_key(key) {
            return Err(ConfigError::Parse(format!("unknown config key `{key}`")));
        }
        let parsed: toml::Value = format!("v = {value}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        table.insert(key.to_string(), parsed);
        *self = table
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(format!("{key}: {e}")))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.loss_config()
            .weights
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        fraction("warmup_fraction", self.warmup_fraction)?;
        fraction("sparse_fraction", self.sparse_fraction)?;
        fraction("dense_switch_fraction", self.dense_switch_fraction)?;
        fraction("t_cut_fraction", self.t_cut_fraction)?;
        if self.dense_switch_fraction < self.warmup_fraction {
            return Err(ConfigError::Invalid(
                "dense_switch_fraction must not precede the end of warm-up".into(),
            ));
        }
        for &m in &self.lr_milestones {
            fraction("lr_milestones", m)?;
        }
        positive("learning_rate", self.learning_rate)?;
        positive("eps_factor", self.eps_factor)?;
        positive("grad_clip", self.grad_clip)?;
        positive("adam_epsilon", self.adam_epsilon)?;
        positive("t_angle", self.t_angle)?;
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(ConfigError::Invalid("beta1 and beta2 must lie in [0, 1)".into()));
        }
        if !(self.perturbation >= 0.0) || !(self.lr_decay > 0.0) {
            return Err(ConfigError::Invalid(
                "perturbation must be ≥ 0 and lr_decay > 0".into(),
            ));
        }
        if self.k_unwrap == 0 || self.k_aflip == 0 || self.k_cut == 0 {
            return Err(ConfigError::Invalid("neighborhood sizes must be ≥ 1".into()));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) || self.embed_dim == 0 {
            return Err(ConfigError::Invalid("hidden widths and embed_dim must be ≥ 1".into()));
        }
        if self.jacobian_max_points == 0 {
            return Err(ConfigError::Invalid("jacobian_max_points must be ≥ 1".into()));
        }
        Ok(())
    }

    /// Checks the config against the size of the cloud it will train on.
    pub fn validate_for(&self, n_points: usize) -> Result<(), ConfigError> {
        self.validate()?;
        let m = self.sparse_size(n_points).min(n_points);
        let k = self.k_unwrap.max(self.k_aflip).max(self.k_cut);
        if m <= k {
            return Err(ConfigError::Invalid(format!(
                "{n_points} points leave a training subset of {m}, too few for neighborhoods of {k}"
            )));
        }
        Ok(())
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            hidden: self.hidden.clone(),
            embed_dim: self.embed_dim,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            weights: LossWeights {
                unwrap: self.w_unwrap,
                wrap: self.w_wrap,
                cycle: self.w_cycle,
                distortion: self.w_distortion,
                aflip: self.w_aflip,
            },
            distortion: self.distortion,
            k_unwrap: self.k_unwrap,
            k_aflip: self.k_aflip,
            t_angle: self.t_angle,
            eps_factor: self.eps_factor,
            reduction: if self.sum_losses {
                Reduction::Sum
            } else {
                Reduction::Mean
            },
        }
    }

    fn at_fraction(&self, f: f64) -> u64 {
        (f * self.steps as f64).round() as u64
    }

    pub fn warmup_steps(&self) -> u64 {
        self.at_fraction(self.warmup_fraction)
    }

    /// First step trained on the full cloud.
    pub fn dense_switch_step(&self) -> u64 {
        self.at_fraction(self.dense_switch_fraction).max(self.warmup_steps())
    }

    /// Sparse subset size for an `n`-point cloud (at least 4 points).
    pub fn sparse_size(&self, n: usize) -> usize {
        ((self.sparse_fraction * n as f64).round() as usize).clamp(4.min(n), n)
    }

    /// Learning rate in effect at 0-based `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        let decays = self
            .lr_milestones
            .iter()
            .filter(|&&m| step >= self.at_fraction(m))
            .count();
        self.learning_rate * self.lr_decay.powi(decays as i32)
    }
}
