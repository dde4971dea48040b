use serde::{Deserialize, Serialize};

/// One-cycle learning rate: cosine warmup from `start` to `peak` over the
/// first `warmup_fraction` of iterations, then cosine annealing to `end` at
/// the last iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OneCycle {
    pub start: f64,
    pub peak: f64,
    pub end: f64,
    pub warmup_fraction: f64,
    pub iterations: usize,
}

impl OneCycle {
    fn warmup_steps(&self) -> usize {
        ((self.warmup_fraction * self.iterations as f64).round() as usize)
            .min(self.iterations.saturating_sub(1))
    }

    pub fn lr(&self, iteration: usize) -> f64 {
        let last = self.iterations.saturating_sub(1);
        let it = iteration.min(last);
        let w = self.warmup_steps();
        let cos_mix = |from: f64, to: f64, frac: f64| {
            to + (from - to) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
        };
        if it < w {
            cos_mix(self.start, self.peak, it as f64 / w as f64)
        } else if last == w {
            if last == 0 {
                self.start
            } else {
                self.end
            }
        } else {
            cos_mix(self.peak, self.end, (it - w) as f64 / (last - w) as f64)
        }
    }
}

/// Adam with decoupled weight decay over a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamW {
    pub fn new(n: usize, weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn update(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * params[i]);
        }
    }
}
