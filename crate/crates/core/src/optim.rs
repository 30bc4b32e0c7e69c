//! AdamW with decoupled weight decay, and an exponential moving average of a
//! parameter vector.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamWConfig {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    config: AdamWConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u32,
}

impl AdamW {
    pub fn new(config: AdamWConfig, len: usize) -> Self {
        Self {
            config,
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u32 {
        self.step
    }

    /// One update in place. Weight decay is applied to the parameter directly
    /// (`p -= lr * wd * p`) before the Adam step.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len(), "parameter length changed");
        assert_eq!(grads.len(), self.m.len(), "gradient length mismatch");
        let c = self.config;
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            params[i] -= c.learning_rate * c.weight_decay * params[i];
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= c.learning_rate * m_hat / (v_hat.sqrt() + c.eps);
        }
    }
}

/// Shadow copy updated as `shadow = decay * shadow + (1 - decay) * value`,
/// starting from the initial value.
#[derive(Debug, Clone)]
pub struct Ema {
    decay: f64,
    shadow: Vec<f64>,
}

impl Ema {
    pub fn new(decay: f64, initial: &[f64]) -> Self {
        Self {
            decay,
            shadow: initial.to_vec(),
        }
    }

    pub fn update(&mut self, value: &[f64]) {
        for (s, v) in self.shadow.iter_mut().zip(value) {
            *s = self.decay * *s + (1.0 - self.decay) * v;
        }
    }

    pub fn shadow(&self) -> &[f64] {
        &self.shadow
    }

    pub fn into_shadow(self) -> Vec<f64> {
        self.shadow
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adamw_first_step_moves_by_learning_rate() {
        let mut opt = AdamW::new(AdamWConfig::new(0.1, 0.0), 2);
        let mut p = vec![1.0, -1.0];
        opt.step(&mut p, &[3.0, -0.5]);
        // bias-corrected first step is lr * sign(g)
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn adamw_decay_with_zero_gradient() {
        let mut opt = AdamW::new(AdamWConfig::new(0.5, 0.1), 1);
        let mut p = vec![2.0];
        opt.step(&mut p, &[0.0]);
        assert!((p[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-12);
    }

    #[test]
    fn adamw_minimizes_a_quadratic() {
        let mut opt = AdamW::new(AdamWConfig::new(0.05, 0.0), 3);
        let target = [1.0, -2.0, 0.5];
        let mut p = vec![0.0; 3];
        for _ in 0..2000 {
            let g: Vec<f64> = p.iter().zip(&target).map(|(x, t)| 2.0 * (x - t)).collect();
            opt.step(&mut p, &g);
        }
        for (x, t) in p.iter().zip(&target) {
            assert!((x - t).abs() < 1e-3);
        }
    }

    #[test]
    fn ema_equals_decay_weighted_average_of_iterates() {
        let decay = 0.99;
        let iterates: Vec<Vec<f64>> = (0..=20)
            .map(|i| vec![(i as f64).sin(), (i as f64 * 0.3).cos() * 2.0])
            .collect();
        let mut ema = Ema::new(decay, &iterates[0]);
        for (n, x) in iterates.iter().enumerate().skip(1) {
            ema.update(x);
            // shadow_n = d^n x_0 + sum_{i=1..n} (1-d) d^(n-i) x_i
            for j in 0..2 {
                let direct = decay.powi(n as i32) * iterates[0][j]
                    + (1..=n)
                        .map(|i| (1.0 - decay) * decay.powi((n - i) as i32) * iterates[i][j])
                        .sum::<f64>();
                assert!((ema.shadow()[j] - direct).abs() < 1e-12);
            }
        }
    }
}
