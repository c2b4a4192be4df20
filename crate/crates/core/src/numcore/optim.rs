use crate::numcore::param::ParamStore;
use crate::numcore::Tensor;
use crate::scalar::Real;

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub steps: usize,
}

impl<T: Real> Adam<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, p)| Tensor::zeros(p.value.shape()))
                .collect::<Vec<_>>()
        };
        Self {
            beta1: T::c(0.9),
            beta2: T::c(0.999),
            eps: T::c(1e-8),
            m: zeros(),
            v: zeros(),
            steps: 0,
        }
    }

    /// One update with learning rate `lr`; gradients are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: T) {
        self.steps += 1;
        let t = self.steps as i32;
        let bc1 = T::one() - self.beta1.powi(t);
        let bc2 = T::one() - self.beta2.powi(t);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            for (((w, &g), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(p.grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = self.beta1 * *mi + (T::one() - self.beta1) * g;
                *vi = self.beta2 * *vi + (T::one() - self.beta2) * g * g;
                let mh = *mi / bc1;
                let vh = *vi / bc2;
                *w -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Cosine annealing from `base` to `floor` over `total` steps.
#[derive(Clone, Copy, Debug)]
pub struct CosineSchedule<T> {
    pub base: T,
    pub floor: T,
    pub total: usize,
}

impl<T: Real> CosineSchedule<T> {
    pub fn lr(&self, step: usize) -> T {
        if self.total == 0 {
            return self.base;
        }
        let frac = T::c(step.min(self.total) as f64 / self.total as f64);
        let pi = T::c(std::f64::consts::PI);
        self.floor + T::c(0.5) * (self.base - self.floor) * (T::one() + (pi * frac).cos())
    }
}

/// Rescale all gradients so their joint norm is at most `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(store: &mut ParamStore<T>, max_norm: T) -> T {
    let total = store
        .iter()
        .map(|(_, p)| p.grad.data().iter().map(|&g| g * g).sum::<T>())
        .sum::<T>()
        .sqrt();
    if total > max_norm && total > T::zero() {
        let f = max_norm / total;
        for p in store.iter_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= f);
        }
    }
    total
}
