use crate::autodiff::Mat;
use crate::networks::OptimizerSnapshot;

/// Adaptive-moment gradient descent over a flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<f64>,
    second: Vec<f64>,
}

impl Adam {
    pub fn new(num_params: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            first: vec![0.0; num_params],
            second: vec![0.0; num_params],
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn snapshot(&self) -> OptimizerSnapshot {
        OptimizerSnapshot {
            step: self.step,
            first: self.first.clone(),
            second: self.second.clone(),
        }
    }

    pub fn restore(&mut self, s: &OptimizerSnapshot) -> Result<(), String> {
        if s.first.len() != self.first.len() || s.second.len() != self.second.len() {
            return Err(format!(
                "optimizer state has {} values, expected {}",
                s.first.len(),
                self.first.len()
            ));
        }
        self.step = s.step;
        self.first.clone_from(&s.first);
        self.second.clone_from(&s.second);
        Ok(())
    }

    /// Applies one bias-corrected update with learning rate `lr`.
    pub fn update(&mut self, params: Vec<&mut Mat>, grads: &[Mat], lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let mut off = 0;
        for (p, g) in params.into_iter().zip(grads) {
            let n = g.len();
            let m = &mut self.first[off..off + n];
            let v = &mut self.second[off..off + n];
            for (((x, &gi), mi), vi) in p.as_mut_slice().iter_mut().zip(g.as_slice()).zip(m).zip(v) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *x -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
            }
            off += n;
        }
    }
}

/// Global L2 norm of a gradient list.
pub fn global_norm(grads: &[Mat]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.as_slice())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` in place so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Mat], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.as_mut_slice() {
                *v *= s;
            }
        }
    }
    norm
}
