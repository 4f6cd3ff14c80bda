use super::{ParamStore, Real, Tensor};

/// Bias-corrected Adam state for one [`ParamStore`].
pub struct AdamState<F> {
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl<F: Real> AdamState<F> {
    pub fn new(store: &ParamStore<F>, lr: f64) -> Self {
        Self::with_betas(store, lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(store: &ParamStore<F>, lr: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        let m = store.entries.iter().map(|e| Tensor::zeros(e.value.rows, e.value.cols)).collect();
        let v = store.entries.iter().map(|e| Tensor::zeros(e.value.rows, e.value.cols)).collect();
        AdamState { m, v, step: 0, lr, beta1, beta2, epsilon }
    }

    /// Applies one Adam update from the gradients currently in `store`.
    pub fn step(&mut self, store: &mut ParamStore<F>) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        let b1 = F::from_f64(self.beta1);
        let b2 = F::from_f64(self.beta2);
        let one_m_b1 = F::from_f64(1.0 - self.beta1);
        let one_m_b2 = F::from_f64(1.0 - self.beta2);
        let lr = F::from_f64(self.lr);
        let eps = F::from_f64(self.epsilon);
        let bc1 = F::from_f64(bc1);
        let bc2 = F::from_f64(bc2);
        for (id, entry) in store.entries.iter_mut().enumerate() {
            let m = &mut self.m[id];
            let v = &mut self.v[id];
            for i in 0..entry.value.data.len() {
                let g = entry.grad.data[i];
                m.data[i] = b1 * m.data[i] + one_m_b1 * g;
                v.data[i] = b2 * v.data[i] + one_m_b2 * g * g;
                let m_hat = m.data[i] / bc1;
                let v_hat = v.data[i] / bc2;
                entry.value.data[i] = entry.value.data[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}
