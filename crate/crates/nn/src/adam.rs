use crate::{Float, Param, Parameters};

/// Adaptive-moment optimizer (no weight decay).
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: AdamState<T>,
}

/// Moment buffers and step count, in parameter visiting order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState<T> {
    pub step: u64,
    pub first: Vec<Vec<T>>,
    pub second: Vec<Vec<T>>,
}

impl<T: Float> Adam<T> {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self { lr, beta1, beta2, eps: 1e-8, state: AdamState { step: 0, first: Vec::new(), second: Vec::new() } }
    }

    pub fn state(&self) -> &AdamState<T> {
        &self.state
    }

    pub fn set_state(&mut self, state: AdamState<T>) {
        self.state = state;
    }

    /// Apply one update from the accumulated gradients, then clear them.
    pub fn step(&mut self, model: &mut dyn Parameters<T>) {
        if self.state.first.is_empty() {
            let mut first = Vec::new();
            model.visit(&mut |p: &Param<T>| first.push(vec![T::zero(); p.len()]));
            self.state.second = first.clone();
            self.state.first = first;
        }
        self.state.step += 1;
        let t = self.state.step as i32;
        let b1 = T::from_f64_lossy(self.beta1);
        let b2 = T::from_f64_lossy(self.beta2);
        let c1 = T::from_f64_lossy(1.0 - self.beta1.powi(t));
        let c2 = T::from_f64_lossy(1.0 - self.beta2.powi(t));
        let lr = T::from_f64_lossy(self.lr);
        let eps = T::from_f64_lossy(self.eps);
        let one = T::one();
        let state = &mut self.state;
        let mut idx = 0;
        model.visit_mut(&mut |p: &mut Param<T>| {
            let m = &mut state.first[idx];
            let v = &mut state.second[idx];
            assert_eq!(m.len(), p.len(), "optimizer state does not match parameter {}", p.name);
            for i in 0..p.len() {
                let g = p.grad[i];
                m[i] = b1 * m[i] + (one - b1) * g;
                v[i] = b2 * v[i] + (one - b2) * g * g;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p.value[i] -= lr * mh / (vh.sqrt() + eps);
                p.grad[i] = T::zero();
            }
            idx += 1;
        });
    }
}
