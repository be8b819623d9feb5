use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Number of steps taken so far.
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }
}

/// One bias-corrected Adam update of `weights` in place.
pub fn adam_step(weights: &mut [f32], grads: &[f32], state: &mut AdamState, cfg: &AdamConfig) {
    assert_eq!(weights.len(), grads.len(), "gradient shape");
    assert_eq!(weights.len(), state.m.len(), "optimizer state shape");
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..weights.len() {
        let g = grads[i] as f64;
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        weights[i] = (weights[i] as f64 - cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps)) as f32;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let cfg = AdamConfig::default();
        for g in [0.3f32, -7.0, 1e-3] {
            let mut w = vec![1.0f32, -2.0];
            let mut s = AdamState::new(2);
            adam_step(&mut w, &[g, g], &mut s, &cfg);
            assert!(((1.0 - w[0]) as f64 - cfg.learning_rate * g.signum() as f64).abs() < 1e-6);
            assert!(((-2.0 - w[1]) as f64 - cfg.learning_rate * g.signum() as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut w = vec![0.5f32, -0.25];
        let mut s = AdamState::new(2);
        adam_step(&mut w, &[0.0, 0.0], &mut s, &AdamConfig::default());
        assert_eq!(w, vec![0.5, -0.25]);
    }
}
