use super::params::ParamStore;
use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments for every parameter of one [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = store
            .ids()
            .map(|id| Tensor::zeros(store.value(id).shape()))
            .collect();
        AdamState {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One bias-corrected Adam update using the gradients held in `store`.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for id in store.ids().collect::<Vec<_>>() {
            let (value, grad) = store.value_and_grad_mut(id);
            let m = self.m[id.index()].data_mut();
            let v = self.v[id.index()].data_mut();
            for (((w, &g), m), v) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(w: f64) -> (ParamStore, super::super::ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::scalar(w));
        (s, id)
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let (mut s, id) = scalar_store(0.7);
        let mut st = AdamState::new(&s, AdamConfig::default());
        for _ in 0..5 {
            st.step(&mut s);
        }
        assert_eq!(s.value(id).item(), 0.7);
    }

    #[test]
    fn first_step_by_hand() {
        // m̂ = g, v̂ = g², so Δ = −lr·g/(|g| + eps)
        let (mut s, id) = scalar_store(1.0);
        s.grad_mut(id).data_mut()[0] = 0.5;
        let cfg = AdamConfig::default();
        let mut st = AdamState::new(&s, cfg);
        st.step(&mut s);
        let want = 1.0 - cfg.lr * 0.5 / (0.5 + cfg.eps);
        assert!((s.value(id).item() - want).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_moves_monotonically() {
        let (mut s, id) = scalar_store(0.0);
        s.grad_mut(id).data_mut()[0] = -2.0;
        let mut st = AdamState::new(&s, AdamConfig::default());
        let mut prev = 0.0;
        for _ in 0..3 {
            st.step(&mut s);
            let w = s.value(id).item();
            assert!(w > prev);
            prev = w;
        }
    }
}
