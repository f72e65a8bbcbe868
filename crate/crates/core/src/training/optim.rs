//! AdamW with decoupled weight decay and a warm-up/linear-decay schedule.

use crate::model::{ParamStore, HEAD_LOGITS};
use crate::tensor::Matrix;

#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: u64,
}

fn decays(name: &str) -> bool {
    !name.ends_with(".norm") && name != HEAD_LOGITS
}

impl AdamW {
    pub fn new(params: &ParamStore, weight_decay: f64) -> Self {
        let zeros: Vec<Matrix> = params
            .iter()
            .map(|t| Matrix::zeros(t.value.rows(), t.value.cols()))
            .collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update with learning rate `lr`. Gains and head logits are not
    /// decayed.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Matrix], lr: f64) {
        assert_eq!(grads.len(), params.len(), "one gradient per parameter");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (id, g) in grads.iter().enumerate() {
            let decay = if decays(params.name(id)) {
                self.weight_decay
            } else {
                0.0
            };
            let p = params.get_mut(id).data_mut();
            let m = self.m[id].data_mut();
            let v = self.v[id].data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * (m_hat / (v_hat.sqrt() + self.eps) + decay * p[i]);
            }
        }
    }
}

/// Linear warm-up over the first `warmup_frac` of `total` steps, then
/// linear decay to zero.
pub fn learning_rate(step: usize, total: usize, peak: f64, warmup_frac: f64) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let warmup = ((total as f64) * warmup_frac).round() as usize;
    if step < warmup {
        return peak * (step + 1) as f64 / warmup as f64;
    }
    let remaining = total - warmup;
    if remaining == 0 {
        return peak;
    }
    peak * (total - step.min(total)) as f64 / remaining as f64
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping. `max_norm ≤ 0` disables clipping.
pub fn clip_global_norm(grads: &mut [Matrix], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| g.scale_assign(s));
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let lr: Vec<f64> = (0..10).map(|s| learning_rate(s, 10, 1.0, 0.1)).collect();
        assert_eq!(lr[0], 1.0);
        assert!(lr.windows(2).all(|w| w[1] <= w[0]));
        assert!((lr[9] - 1.0 / 9.0).abs() < 1e-12);
        let lr: Vec<f64> = (0..20).map(|s| learning_rate(s, 20, 1.0, 0.1)).collect();
        assert_eq!(lr[0], 0.5);
        assert_eq!(lr[1], 1.0);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut store = ParamStore::new();
        store.push("w", Matrix::from_vec(1, 2, vec![1.0, -1.0]));
        let mut opt = AdamW::new(&store, 0.0);
        opt.step(&mut store, &[Matrix::from_vec(1, 2, vec![3.0, -0.5])], 0.1);
        let w = store.get(0).data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn zero_gradient_without_decay_leaves_params() {
        let mut store = ParamStore::new();
        store.push("enc.0.attn.norm", Matrix::filled(1, 3, 1.0));
        let mut opt = AdamW::new(&store, 0.5);
        opt.step(&mut store, &[Matrix::zeros(1, 3)], 0.1);
        assert_eq!(store.get(0).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = vec![Matrix::from_vec(1, 2, vec![3.0, 4.0])];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0].frobenius_norm() - 1.0).abs() < 1e-12);
    }
}
