//! Optimizers and gradient clipping.

use crate::tensor::Tensor;

/// Adam moment estimates. One state per trained parameter set; never share
/// across concurrent trainers.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        AdamState {
            m: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 0.001, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// One Adam update with bias correction. Panics on shape disagreement
/// between params, grads, and state; those sets are constructed together.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState, cfg: &AdamConfig) {
    assert_eq!(params.len(), grads.len(), "params/grads length mismatch");
    assert_eq!(params.len(), state.m.len(), "params/state length mismatch");
    assert!(cfg.lr > 0.0, "learning rate must be positive");
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for ((p, g), (m, v)) in
        params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        assert_eq!(p.shape(), g.shape(), "param/grad shape mismatch");
        for ((pv, gv), (mv, vv)) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
        {
            *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * gv;
            *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gv * gv;
            let m_hat = *mv / bc1;
            let v_hat = *vv / bc2;
            *pv -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
}

/// Scale all gradients by `max_norm / norm` when the global L2 norm exceeds
/// `max_norm`. Returns the pre-clip global norm.
pub fn clip_gradients(grads: &mut [Tensor], max_norm: f64) -> f64 {
    assert!(max_norm > 0.0, "max_norm must be positive");
    let sq: f64 = grads.iter().flat_map(|g| g.data()).map(|x| x * x).sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= scale;
            }
        }
    }
    norm
}

/// SGD with classical momentum, used by the quality classifier.
#[derive(Debug, Clone)]
pub struct SgdMomentum {
    velocity: Vec<Tensor>,
    pub lr: f64,
    pub momentum: f64,
}

impl SgdMomentum {
    pub fn new(params: &[Tensor], lr: f64, momentum: f64) -> Self {
        SgdMomentum {
            velocity: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            lr,
            momentum,
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) {
        assert_eq!(params.len(), grads.len());
        for ((p, g), v) in params.iter_mut().zip(grads).zip(self.velocity.iter_mut()) {
            for ((pv, gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = self.momentum * *vv + gv;
                *pv -= self.lr * *vv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_adam_step_moves_by_lr() {
        // g = 1: bias-corrected m_hat = v_hat = 1, so the step is -lr up to eps.
        let mut params = vec![Tensor::scalar(0.0)];
        let grads = vec![Tensor::scalar(1.0)];
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &grads, &mut state, &AdamConfig::default());
        let got = params[0].item();
        assert!((got + 0.001).abs() < 1e-9, "got {got}");
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut params = vec![Tensor::vector(vec![0.5, -0.25])];
        let grads = vec![Tensor::vector(vec![0.0, 0.0])];
        let mut state = AdamState::new(&params);
        for _ in 0..10 {
            adam_step(&mut params, &grads, &mut state, &AdamConfig::default());
        }
        assert_eq!(params[0].data(), &[0.5, -0.25]);
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut params = vec![Tensor::vector(vec![0.1, -0.2, 0.3])];
            let grads = vec![Tensor::vector(vec![0.5, 1.5, -0.7])];
            let mut state = AdamState::new(&params);
            for _ in 0..5 {
                adam_step(&mut params, &grads, &mut state, &AdamConfig::default());
            }
            params[0].data().to_vec()
        };
        let (a, b) = (run(), run());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn clip_below_threshold_is_identity() {
        let mut grads = vec![Tensor::vector(vec![3.0, 4.0])];
        let norm = clip_gradients(&mut grads, 10.0);
        assert_eq!(norm, 5.0);
        assert_eq!(grads[0].data(), &[3.0, 4.0]);
    }

    #[test]
    fn clip_scales_to_max_norm() {
        let mut grads = vec![Tensor::vector(vec![3.0, 4.0])];
        clip_gradients(&mut grads, 1.0);
        let g = grads[0].data();
        assert!((g[0] - 0.6).abs() < 1e-12 && (g[1] - 0.8).abs() < 1e-12);
        let post: f64 = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(post <= 1.0 + 1e-12);
    }

    #[test]
    fn clip_zero_gradients() {
        let mut grads = vec![Tensor::vector(vec![0.0, 0.0])];
        clip_gradients(&mut grads, 1.0);
        assert_eq!(grads[0].data(), &[0.0, 0.0]);
    }

    #[test]
    fn clip_is_idempotent() {
        let mut once = vec![Tensor::vector(vec![5.0, -2.0, 7.0])];
        clip_gradients(&mut once, 2.0);
        let mut twice = once.clone();
        clip_gradients(&mut twice, 2.0);
        assert!(once[0]
            .data()
            .iter()
            .zip(twice[0].data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
