use serde::{Deserialize, Serialize};

use super::params::l2_norm;
use crate::error::{Error, Result};

/// Bias-corrected Adam.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Self::with_beta1(n_params, lr, 0.9)
    }

    /// Reduced-momentum variant used for the generator and discriminator (β₁ = 0.4).
    pub fn with_beta1(n_params: usize, lr: f64, beta1: f64) -> Self {
        Self {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
            lr,
            beta1,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len(), "optimizer state does not match parameters");
        assert_eq!(grads.len(), self.m.len(), "gradient does not match parameters");
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Rescales `grads` in place so its global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    assert!(max_norm > 0.0, "max_norm must be positive");
    let norm = l2_norm(grads);
    if norm > max_norm {
        let scale = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= scale);
    }
    norm
}

/// `target ← beta·source + (1 − beta)·target`.
pub fn soft_update(target: &mut [f64], source: &[f64], beta: f64) -> Result<()> {
    if target.len() != source.len() {
        return Err(Error::DimensionMismatch {
            what: "soft update",
            expected: target.len(),
            got: source.len(),
        });
    }
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(Error::invalid("soft update rate", format!("{beta} outside (0, 1]")));
    }
    for (t, s) in target.iter_mut().zip(source) {
        *t = beta * s + (1.0 - beta) * *t;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_adam_step_is_sign_like() {
        let mut st = AdamState::new(3, 0.01);
        let mut p = vec![1.0, 1.0, 1.0];
        let g = vec![0.5, -2.0, 1e-3];
        st.step(&mut p, &g);
        for i in 0..3 {
            let expected = 1.0 - 0.01 * g[i] / (g[i].abs() + 1e-8);
            assert!((p[i] - expected).abs() < 1e-12, "{} vs {}", p[i], expected);
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut st = AdamState::new(2, 0.1);
        let mut p = vec![0.3, -0.7];
        for _ in 0..100 {
            st.step(&mut p, &[0.0, 0.0]);
        }
        assert_eq!(p, vec![0.3, -0.7]);
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut st = AdamState::with_beta1(2, 0.05, 0.4);
            let mut p = vec![1.0, 2.0];
            for k in 0..50 {
                let g = [p[0] * (k as f64).cos(), p[1] - 1.0];
                st.step(&mut p, &g);
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn clipping_rules() {
        let mut g = vec![2.0, 0.0];
        let n = clip_grad_norm(&mut g, 0.1);
        assert_eq!(n, 2.0);
        assert!((g[0] - 0.1).abs() < 1e-15);
        assert!((l2_norm(&g) - 0.1).abs() < 1e-15);

        let mut small = vec![0.03, 0.04];
        clip_grad_norm(&mut small, 0.1);
        assert_eq!(small, vec![0.03, 0.04]);

        let mut zero = vec![0.0; 4];
        clip_grad_norm(&mut zero, 0.1);
        assert_eq!(zero, vec![0.0; 4]);
    }

    #[test]
    fn soft_update_rules() {
        let src = vec![1.0, 2.0];
        let mut t = vec![5.0, -1.0];
        soft_update(&mut t, &src, 1.0).unwrap();
        assert_eq!(t, src);

        let mut same = src.clone();
        soft_update(&mut same, &src, 0.005).unwrap();
        assert_eq!(same, src);

        let mut t = vec![0.0, 0.0];
        soft_update(&mut t, &src, 0.005).unwrap();
        assert!((t[0] - 0.005).abs() < 1e-15);

        assert!(soft_update(&mut vec![0.0], &src, 0.5).is_err());
    }
}
