use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::Float;

/// A trainable parameter blob and its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Float> Param<T> {
    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            value: vec![T::zero(); len],
            grad: vec![T::zero(); len],
        }
    }

    /// Gaussian init with the given standard deviation.
    pub fn normal<R: Rng + ?Sized>(
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut R,
    ) -> Self {
        let mut p = Self::zeros(name, shape);
        let dist = Normal::new(0.0, std).expect("valid std");
        for v in &mut p.value {
            *v = T::from_f64_lossy(dist.sample(rng));
        }
        p
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }

    pub fn grad_norm(&self) -> f64 {
        self.grad.iter().map(|g| g.to_f64_lossy().powi(2)).sum::<f64>().sqrt()
    }
}

/// Anything that owns trainable parameters.
pub trait Parameters<T: Float> {
    /// Visit every parameter in a fixed, deterministic order.
    fn visit(&self, f: &mut dyn FnMut(&Param<T>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>));

    fn zero_grad(&mut self) {
        self.visit_mut(&mut |p| p.zero_grad());
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| n += p.len());
        n
    }

    fn grad_norm(&self) -> f64 {
        let mut s = 0.0;
        self.visit(&mut |p| s += p.grad_norm().powi(2));
        s.sqrt()
    }

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit(&mut |p| names.push(p.name.clone()));
        names
    }
}
