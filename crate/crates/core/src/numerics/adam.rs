//! ADAM with bias correction, plus a plateau learning-rate schedule.

use serde::{Deserialize, Serialize};

use super::{ParamSet, Tensor};

pub const DEFAULT_LR: f64 = 1e-3;
pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    /// Fresh moments shaped like `params`.
    pub fn new<P: ParamSet + ?Sized>(params: &P, lr: f64) -> Self {
        let shapes: Vec<[usize; 2]> = params.tensors().iter().map(|t| t.shape()).collect();
        Self::with_shapes(&shapes, lr)
    }

    pub fn with_shapes(shapes: &[[usize; 2]], lr: f64) -> Self {
        let zeros = || shapes.iter().map(|[r, c]| Tensor::zeros(*r, *c)).collect::<Vec<_>>();
        Self {
            lr,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            eps: DEFAULT_EPS,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Drops accumulated moments and the step counter, keeping hyperparameters.
    pub fn reset_moments(&mut self) {
        for t in self.m.iter_mut().chain(self.v.iter_mut()) {
            t.data_mut().fill(0.0);
        }
        self.step = 0;
    }

    /// One ADAM update of `params` in place.
    pub fn step<P: ParamSet + ?Sized>(&mut self, params: &mut P, grads: &[Tensor]) {
        let mut tensors = params.tensors_mut();
        assert_eq!(
            tensors.len(),
            grads.len(),
            "shape mismatch: {} parameters but {} gradients",
            tensors.len(),
            grads.len()
        );
        assert_eq!(tensors.len(), self.m.len(), "shape mismatch: optimizer built for other params");
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in tensors.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            p.assert_same_shape(g, "adam step");
            let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Multiplies the learning rate by `factor` whenever the monitored loss has
/// not improved for `patience` consecutive epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plateau {
    pub patience: u32,
    pub factor: f64,
    best: f64,
    stale: u32,
}

impl Default for Plateau {
    fn default() -> Self {
        Self::new(20, 0.9)
    }
}

impl Plateau {
    pub fn new(patience: u32, factor: f64) -> Self {
        Self { patience, factor, best: f64::INFINITY, stale: 0 }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    /// Records one epoch's validation loss; returns `true` when the rate decayed.
    pub fn observe(&mut self, loss: f64, adam: &mut AdamState) -> bool {
        if loss < self.best {
            self.best = loss;
            self.stale = 0;
            return false;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            adam.lr *= self.factor;
            self.stale = 0;
            true
        } else {
            false
        }
    }
}

/// Replays a validation-loss history through the default plateau rule.
pub fn plateau_decay(adam: &mut AdamState, history: &[f64]) {
    assert!(!history.is_empty(), "plateau_decay needs at least one epoch");
    let mut rule = Plateau::default();
    for &loss in history {
        rule.observe(loss, adam);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_adam(lr: f64) -> (Vec<Tensor>, AdamState) {
        let p = vec![Tensor::scalar(1.0)];
        let s = AdamState::new(&p, lr);
        (p, s)
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let (mut p, mut s) = scalar_adam(DEFAULT_LR);
        for _ in 0..5 {
            s.step(&mut p, &[Tensor::scalar(0.0)]);
        }
        assert_eq!(p[0].item(), 1.0);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (mut p, mut s) = scalar_adam(0.001);
        s.step(&mut p, &[Tensor::scalar(0.2)]);
        let delta = p[0].item() - 1.0;
        assert!((delta + 0.001).abs() < 1e-6, "delta {delta}");
    }

    #[test]
    fn two_steps_match_hand_recurrence() {
        // Hand evaluation, g1 = 0.2, g2 = -0.1, lr = 0.01:
        // m1 = 0.02, v1 = 4e-5, m̂ = 0.2, v̂ = 0.04, Δ1 = -0.01·0.2/(0.2+1e-8)
        // m2 = 0.018 - 0.01 = 0.008, v2 = 3.996e-5 + 1e-5 = 4.996e-5
        // m̂ = 0.008/0.19, v̂ = 4.996e-5/0.001999
        let (mut p, mut s) = scalar_adam(0.01);
        s.step(&mut p, &[Tensor::scalar(0.2)]);
        let after1 = 1.0 - 0.01 * 0.2 / (0.2 + 1e-8);
        assert!((p[0].item() - after1).abs() < 1e-15);
        s.step(&mut p, &[Tensor::scalar(-0.1)]);
        let m_hat = 0.008 / 0.19;
        let v_hat = 4.996e-5 / (1.0 - 0.999f64 * 0.999);
        let after2 = after1 - 0.01 * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((p[0].item() - after2).abs() < 1e-12, "{} vs {after2}", p[0].item());
        assert_eq!(s.steps_taken(), 2);
    }

    #[test]
    fn plateau_patience() {
        let (p, _) = scalar_adam(0.001);
        let mut history = vec![1.0];
        history.extend(std::iter::repeat_n(1.0, 19));
        let mut s = AdamState::new(&p, 0.001);
        plateau_decay(&mut s, &history);
        assert_eq!(s.lr, 0.001);

        history.push(1.0);
        let mut s = AdamState::new(&p, 0.001);
        plateau_decay(&mut s, &history);
        assert!((s.lr - 0.0009).abs() < 1e-15);

        // improvement on the 20th epoch resets the counter
        let mut improving = vec![1.0];
        improving.extend(std::iter::repeat_n(1.0, 19));
        improving.push(0.5);
        let mut s = AdamState::new(&p, 0.001);
        plateau_decay(&mut s, &improving);
        assert_eq!(s.lr, 0.001);
    }
}
