//! First-order optimizer state shared by the policy learners.

use alloc::vec::Vec;

use crate::math;

/// Adam with the usual defaults (β₁ = 0.9, β₂ = 0.999, ε = 1e-8).
///
/// `step` moves parameters *against* the supplied gradient; callers that
/// maximize negate their gradient.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    /// Fresh optimizer state for `dim` parameters at step size `lr`.
    pub fn new(dim: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: alloc::vec![0.0; dim],
            v: alloc::vec![0.0; dim],
            t: 0,
        }
    }

    /// One descent update. Returns the step actually applied so callers can
    /// undo or rescale it (the learner's backtracking needs that).
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Vec<f64> {
        self.t += 1;
        let bias1 = 1.0 - math::powf(self.beta1, f64::from(self.t));
        let bias2 = 1.0 - math::powf(self.beta2, f64::from(self.t));
        let mut applied = Vec::with_capacity(params.len());
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bias1;
            let v_hat = self.v[i] / bias2;
            let delta = -self.lr * m_hat / (math::sqrt(v_hat) + self.eps);
            params[i] += delta;
            applied.push(delta);
        }
        applied
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::abs;

    #[test]
    fn minimizes_a_quadratic() {
        let mut params = alloc::vec![3.0, -2.0];
        let mut adam = Adam::new(2, 0.05);
        for _ in 0..2000 {
            let grad = alloc::vec![2.0 * (params[0] - 1.0), 2.0 * (params[1] + 0.5)];
            adam.step(&mut params, &grad);
        }
        assert!(abs(params[0] - 1.0) < 1e-3, "{:?}", params);
        assert!(abs(params[1] + 0.5) < 1e-3, "{:?}", params);
    }

    #[test]
    fn reports_the_applied_step() {
        let mut params = alloc::vec![0.0];
        let mut adam = Adam::new(1, 0.01);
        let before = params[0];
        let applied = adam.step(&mut params, &[1.0]);
        assert!(abs(params[0] - (before + applied[0])) < 1e-15);
        assert!(applied[0] < 0.0); // descends against a positive gradient
    }
}
