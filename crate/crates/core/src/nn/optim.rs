use crate::nn::Parameterized;
use crate::real::Real;

/// Per-parameter moment buffers, created on the first step.
#[derive(Debug, Clone, Default)]
pub struct OptimizerState<T> {
    pub step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Real> OptimizerState<T> {
    fn ensure(&mut self, sizes: &[usize], with_first: bool) {
        if self.second.len() != sizes.len()
            || self.second.iter().zip(sizes).any(|(b, &s)| b.len() != s)
        {
            self.second = sizes.iter().map(|&s| vec![T::zero(); s]).collect();
            self.first = if with_first {
                sizes.iter().map(|&s| vec![T::zero(); s]).collect()
            } else {
                Vec::new()
            };
            self.step = 0;
        }
    }
}

pub trait Optimizer<T: Real> {
    fn step<M: Parameterized<T> + ?Sized>(&mut self, model: &mut M);
    fn learning_rate(&self) -> f64;
    fn set_learning_rate(&mut self, lr: f64);
}

fn sizes<T: Real, M: Parameterized<T> + ?Sized>(model: &M) -> Vec<usize> {
    model.parameters().iter().map(|p| p.len()).collect()
}

#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub state: OptimizerState<T>,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: OptimizerState::default(),
        }
    }
}

impl<T: Real> Optimizer<T> for Adam<T> {
    fn step<M: Parameterized<T> + ?Sized>(&mut self, model: &mut M) {
        let sz = sizes(model);
        self.state.ensure(&sz, true);
        self.state.step += 1;
        let t = self.state.step as f64;
        let c1 = 1.0 - self.beta1.powf(t);
        let c2 = 1.0 - self.beta2.powf(t);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (lr, eps) = (T::of(self.lr), T::of(self.eps));
        let (c1, c2) = (T::of(c1), T::of(c2));
        let state = &mut self.state;
        for (k, p) in model.parameters_mut().into_iter().enumerate() {
            let m = &mut state.first[k];
            let v = &mut state.second[k];
            let grads = p.grad.data();
            let values = p.value.data_mut();
            for i in 0..values.len() {
                let g = grads[i];
                m[i] = b1 * m[i] + (T::one() - b1) * g;
                v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                values[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }

    fn learning_rate(&self) -> f64 {
        self.lr
    }

    fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }
}

#[derive(Debug, Clone)]
pub struct RmsProp<T> {
    pub lr: f64,
    pub alpha: f64,
    pub eps: f64,
    pub state: OptimizerState<T>,
}

impl<T: Real> RmsProp<T> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            alpha: 0.99,
            eps: 1e-8,
            state: OptimizerState::default(),
        }
    }
}

impl<T: Real> Optimizer<T> for RmsProp<T> {
    fn step<M: Parameterized<T> + ?Sized>(&mut self, model: &mut M) {
        let sz = sizes(model);
        self.state.ensure(&sz, false);
        self.state.step += 1;
        let (a, lr, eps) = (T::of(self.alpha), T::of(self.lr), T::of(self.eps));
        let state = &mut self.state;
        for (k, p) in model.parameters_mut().into_iter().enumerate() {
            let v = &mut state.second[k];
            let grads = p.grad.data();
            let values = p.value.data_mut();
            for i in 0..values.len() {
                let g = grads[i];
                v[i] = a * v[i] + (T::one() - a) * g * g;
                values[i] -= lr * g / (v[i].sqrt() + eps);
            }
        }
    }

    fn learning_rate(&self) -> f64 {
        self.lr
    }

    fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }
}

/// Multiplies every gradient by `factor`, e.g. to average accumulated
/// micro-batches.
pub fn scale_grads<T: Real, M: Parameterized<T> + ?Sized>(model: &mut M, factor: T) {
    for p in model.parameters_mut() {
        for g in p.grad.data_mut() {
            *g *= factor;
        }
    }
}

/// L2 norm over all gradient entries.
pub fn grad_norm<T: Real, M: Parameterized<T> + ?Sized>(model: &M) -> f64 {
    model
        .parameters()
        .iter()
        .flat_map(|p| p.grad.data().iter())
        .map(|g| g.f64() * g.f64())
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Parameter, Tensor};

    struct Quad {
        p: Parameter<f64>,
    }

    impl Parameterized<f64> for Quad {
        fn parameters(&self) -> Vec<&Parameter<f64>> {
            vec![&self.p]
        }
        fn parameters_mut(&mut self) -> Vec<&mut Parameter<f64>> {
            vec![&mut self.p]
        }
    }

    fn run<O: Optimizer<f64>>(mut opt: O, steps: usize) -> f64 {
        let mut q = Quad {
            p: Parameter::new("x", Tensor::new(&[2], vec![3.0, -2.0]).unwrap()),
        };
        for _ in 0..steps {
            let v = q.p.value.data().to_vec();
            q.p.grad.data_mut().copy_from_slice(&[2.0 * v[0], 2.0 * v[1]]);
            opt.step(&mut q);
        }
        q.p.value.data().iter().map(|v| v * v).sum()
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut q = Quad {
            p: Parameter::new("x", Tensor::new(&[1], vec![1.0]).unwrap()),
        };
        q.p.grad.data_mut()[0] = 5.0;
        let mut adam = Adam::new(0.1);
        adam.step(&mut q);
        assert!((q.p.value.data()[0] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn optimizers_minimize_quadratic() {
        assert!(run(Adam::new(0.05), 500) < 1e-3);
        assert!(run(RmsProp::new(0.01), 1000) < 1e-3);
    }
}
